#![allow(dead_code)]
pub mod e2e;
pub mod gradcheck;
pub mod metrics_oracle;
pub mod reference;
pub mod subword_oracle;
pub mod synth;

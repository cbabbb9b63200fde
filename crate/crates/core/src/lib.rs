mod binio;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod subword;
pub mod train;

pub use error::{Error, ErrorKind, Result};

mod common;

use cmsenti::model::{model_forward, ModelParams, PaddedBatch, PositionalMode};
use cmsenti::numeric::Tape;
use common::e2e::{end_to_end_errors, fixture_batch, small_config};
use common::gradcheck::TOLERANCE;
use common::reference::{logits64, params64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tape_logits(params: &ModelParams, batch: &PaddedBatch) -> Vec<f32> {
    let mut tape = Tape::inference(params.store());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model_forward(&mut tape, params, batch, false, &mut rng).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn forward_matches_f64_reference() {
    for mode in [PositionalMode::Add, PositionalMode::Concat] {
        let cfg = small_config(mode);
        let params = ModelParams::init(&cfg, 17).unwrap();
        let batch = fixture_batch();
        let want = logits64(&params64(&params), &cfg, &batch);
        for (got, want) in tape_logits(&params, &batch).iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-5, "{mode:?}: {got} vs {want}");
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for mode in [PositionalMode::Add, PositionalMode::Concat] {
        let results = end_to_end_errors(mode);
        assert_eq!(results.len(), ModelParams::init(&small_config(mode), 0).unwrap().store().len());
        for (name, err) in results {
            assert!(err < TOLERANCE, "{mode:?} {name}: relative error {err:.3e}");
        }
    }
}


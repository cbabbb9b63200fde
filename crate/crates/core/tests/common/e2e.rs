//! The small-config model fixture and its end-to-end gradient check.

use cmsenti::model::{model_forward, ModelConfig, ModelParams, PaddedBatch, PositionalMode};
use cmsenti::numeric::Tape;
use cmsenti::subword::TokenSequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{relative_error, STEP};
use super::reference::{cross_entropy, forward64, logits64, params64};

pub fn small_config(mode: PositionalMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        hid_dim: 8,
        n_heads: 2,
        n_layers: 1,
        pf_dim: 16,
        dropout: 0.1,
        max_len: 5,
        n_classes: 5,
        tfidf_dim: 3,
        ctx_dim: 4,
        gru_hidden: 6,
        positional_mode: mode,
    }
}

pub fn fixture_batch() -> PaddedBatch {
    let seqs = [TokenSequence::new(vec![4, 9, 13, 5, 19]), TokenSequence::new(vec![7, 7, 12])];
    let tfidf = [[0.6f32, 0.0, 0.8], [0.0, 1.0, 0.0]];
    let ctx = [[0.1f32, -0.2, 0.3, 0.05], [-0.4, 0.2, 0.0, 0.1]];
    PaddedBatch::new(
        &seqs.iter().collect::<Vec<_>>(),
        &tfidf.iter().map(|r| r.as_slice()).collect::<Vec<_>>(),
        &ctx.iter().map(|r| r.as_slice()).collect::<Vec<_>>(),
        Some(vec![2, 4]),
        Some(5),
    )
    .unwrap()
}

/// Init seeds whose ReLU inputs all lie at least `5 · STEP` from zero on the
/// fixture batch, so no central difference straddles the kink.
pub fn kink_free_seed(mode: PositionalMode) -> u64 {
    match mode {
        PositionalMode::Add => 102,
        PositionalMode::Concat => 38,
    }
}

/// Analytic gradients of the mean loss from the tape against central
/// differences of the f64 reference forward pass.
pub fn end_to_end_errors(mode: PositionalMode) -> Vec<(String, f64)> {
    let cfg = small_config(mode);
    let params = ModelParams::init(&cfg, kink_free_seed(mode)).unwrap();
    let batch = fixture_batch();
    let (_, margin) = forward64(&params64(&params), &cfg, &batch);
    assert!(margin > 5.0 * STEP, "fixture has a ReLU input {margin:.2e} from the kink");
    let labels = batch.labels.clone().unwrap();
    let grads = {
        let mut tape = Tape::with_params(params.store());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = model_forward(&mut tape, &params, &batch, false, &mut rng).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap()
    };
    let mut store = params.store().clone();
    store.zero_grads();
    grads.accumulate_into(&mut store).unwrap();

    let mut p64 = params64(&params);
    let mut out = Vec::new();
    for (id, name, t) in params.store().iter() {
        let analytic = store.get(id).grad.clone().unwrap();
        let numeric: Vec<f64> = (0..t.len())
            .map(|j| {
                let orig = p64[name][j];
                p64.get_mut(name).unwrap()[j] = orig + STEP;
                let lp = cross_entropy(&logits64(&p64, &cfg, &batch), &labels);
                p64.get_mut(name).unwrap()[j] = orig - STEP;
                let lm = cross_entropy(&logits64(&p64, &cfg, &batch), &labels);
                p64.get_mut(name).unwrap()[j] = orig;
                (lp - lm) / (2.0 * STEP)
            })
            .collect();
        out.push((name.to_string(), relative_error(&analytic, &numeric)));
    }
    out
}

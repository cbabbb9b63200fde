//! Central finite-difference oracle. Independent of the tape's backward pass:
//! it only evaluates forward values.

use cmsenti::numeric::{ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

pub type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, worst over all inputs.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n.powi(2)).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

fn eval(inputs: &[Tensor], forward: &Forward) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = forward(&mut tape, &vars);
    tape.value(out)[0] as f64
}

/// Central differences for one input tensor. The effective step is measured
/// after rounding to f32 and the quotient is formed in f64.
pub fn numeric_grad<F: FnMut(usize, f32) -> f64>(values: &[f32], mut loss_at: F) -> Vec<f64> {
    (0..values.len())
        .map(|j| {
            let x = values[j];
            let hi = (x as f64 + STEP) as f32;
            let lo = (x as f64 - STEP) as f32;
            let lp = loss_at(j, hi);
            let lm = loss_at(j, lo);
            (lp - lm) / (hi as f64 - lo as f64)
        })
        .collect()
}

/// Returns the worst relative error over all inputs of the case.
pub fn check(case: &Case) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = (case.forward)(&mut tape, &vars);
    let grads = tape.backward(out).expect("scalar output");
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; case.inputs[i].len()]);
        let numeric = numeric_grad(case.inputs[i].data(), |j, val| {
            let mut perturbed = case.inputs.clone();
            perturbed[i].data_mut()[j] = val;
            eval(&perturbed, &case.forward)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Same check for a function of parameters in a store.
pub fn check_params<F>(store: &ParamStore, forward: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Tape) -> Var,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let out = forward(&mut tape);
        tape.backward(out).expect("scalar output")
    };
    let mut g_store = store.clone();
    g_store.zero_grads();
    grads.accumulate_into(&mut g_store).unwrap();
    let mut results = Vec::new();
    for (id, name, t) in store.iter() {
        let analytic = g_store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut scratch = store.clone();
        let numeric = numeric_grad(t.data(), |j, val| {
            let orig = scratch.get(id).data()[j];
            scratch.get_mut(id).data_mut()[j] = val;
            let l = {
                let mut tape = Tape::inference(&scratch);
                let out = forward(&mut tape);
                tape.value(out)[0] as f64
            };
            scratch.get_mut(id).data_mut()[j] = orig;
            l
        });
        results.push((name.to_string(), relative_error(&analytic, &numeric)));
    }
    results
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Weighted sum with fixed pseudo-random coefficients, so every output
/// element contributes a distinct gradient.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.leaf(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

/// One case per differentiable op, at small random shapes.
pub fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let mut cases = Vec::new();
    macro_rules! case {
        ($name:expr, [$($shape:expr),*], $f:expr) => {
            cases.push(Case {
                name: $name,
                inputs: vec![$(rand_tensor(&mut rng, &$shape, -1.0, 1.0)),*],
                forward: Box::new($f),
            });
        };
    }
    case!("add_broadcast", [[2, 3, 4], [4]], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 1)
    });
    case!("mul", [[3, 4], [3, 4]], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 2)
    });
    case!("affine", [[5]], |t, v| {
        let y = t.affine(v[0], -1.7, 0.3);
        project(t, y, 3)
    });
    case!("linear", [[2, 3, 4], [4, 5], [5]], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        project(t, y, 4)
    });
    case!("batch_matmul", [[2, 3, 4], [2, 4, 5]], |t, v| {
        let y = t.batch_matmul(v[0], v[1], false).unwrap();
        project(t, y, 5)
    });
    case!("batch_matmul_bt", [[2, 3, 4], [2, 5, 4]], |t, v| {
        let y = t.batch_matmul(v[0], v[1], true).unwrap();
        project(t, y, 6)
    });
    case!("softmax_last", [[3, 5]], |t, v| {
        let y = t.softmax(v[0], 1).unwrap();
        project(t, y, 7)
    });
    case!("softmax_inner", [[3, 4, 2]], |t, v| {
        let y = t.softmax(v[0], 1).unwrap();
        project(t, y, 8)
    });
    case!("layer_norm", [[3, 6], [6], [6]], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        project(t, y, 9)
    });
    case!("relu", [[4, 5]], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 10)
    });
    case!("sigmoid", [[4, 5]], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 11)
    });
    case!("tanh", [[4, 5]], |t, v| {
        let y = t.tanh(v[0]);
        project(t, y, 12)
    });
    case!("dropout", [[6, 5]], |t, v| {
        // re-seeded per evaluation so every pass draws the same mask
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = t.dropout(v[0], 0.3, true, &mut rng).unwrap();
        project(t, y, 13)
    });
    case!("embedding", [[6, 3]], |t, v| {
        let y = t.embedding(v[0], &[4, 1, 4, 0], &[2, 2]).unwrap();
        project(t, y, 14)
    });
    case!("reshape_permute", [[2, 3, 4]], |t, v| {
        let r = t.reshape(v[0], &[2, 3, 2, 2]).unwrap();
        let y = t.permute(r, &[0, 2, 1, 3]).unwrap();
        project(t, y, 15)
    });
    case!("concat", [[2, 3], [2, 2], [2, 4]], |t, v| {
        let y = t.concat(&[v[0], v[1], v[2]]).unwrap();
        project(t, y, 16)
    });
    case!("select", [[2, 4, 3]], |t, v| {
        let y = t.select(v[0], 1, 2).unwrap();
        project(t, y, 17)
    });
    case!("masked_fill", [[2, 3]], |t, v| {
        let y = t
            .masked_fill(v[0], &[true, false, false, true, false, true], -1e9)
            .unwrap();
        let s = t.softmax(y, 1).unwrap();
        project(t, s, 18)
    });
    case!("where_rows", [[3, 2], [3, 2]], |t, v| {
        let y = t.where_rows(&[true, false, true], v[0], v[1]).unwrap();
        project(t, y, 19)
    });
    case!("cross_entropy", [[4, 5]], |t, v| {
        t.weighted_cross_entropy(v[0], &[0, 3, 4, 1], &[1.0, 0.5, 0.0, 2.0])
            .unwrap()
    });
    case!("mean", [[3, 3]], |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        t.mean(sq)
    });
    case!("attention_block", [[2, 4, 6], [6, 6], [6, 6], [6, 6]], |t, v| {
        // softmax(Q Kᵀ / √d) V with a padded key
        let q = t.linear(v[0], v[1], None).unwrap();
        let k = t.linear(v[0], v[2], None).unwrap();
        let val = t.linear(v[0], v[3], None).unwrap();
        let s = t.batch_matmul(q, k, true).unwrap();
        let s = t.scale(s, 1.0 / 6f32.sqrt());
        let mask: Vec<bool> = (0..32).map(|i| i % 4 == 3).collect();
        let s = t.masked_fill(s, &mask, -1e9).unwrap();
        let a = t.softmax(s, 2).unwrap();
        let y = t.batch_matmul(a, val, false).unwrap();
        project(t, y, 20)
    });
    cases
}

#[allow(dead_code)]
pub fn small_random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::new(shape, data).unwrap()
}

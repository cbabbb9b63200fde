//! Plain f64 forward pass of the classifier in inference mode, written
//! without the tape. Used as the finite-difference oracle for end-to-end
//! gradients and as a cross-check of forward values.

use std::collections::HashMap;

use cmsenti::model::{ModelConfig, ModelParams, PaddedBatch, PositionalMode};

pub type Params64 = HashMap<String, Vec<f64>>;

pub fn params64(p: &ModelParams) -> Params64 {
    p.store()
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = w.len() / out;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += x[r * inp + i] * w[i * out + o];
            }
            y[r * out + o] = s;
        }
    }
    y
}

fn layer_norm(x: &mut [f64], d: usize, g: &[f64], b: &[f64]) {
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + 1e-5f32 as f64).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * g[i] + b[i];
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn logits64(p: &Params64, c: &ModelConfig, batch: &PaddedBatch) -> Vec<f64> {
    forward64(p, c, batch).0
}

/// Logits and the smallest |input| seen by any ReLU. Finite differences are
/// only meaningful when that margin exceeds the perturbation's effect.
pub fn forward64(p: &Params64, c: &ModelConfig, batch: &PaddedBatch) -> (Vec<f64>, f64) {
    let mut relu_margin = f64::INFINITY;
    let (bsz, t, h) = (batch.batch, batch.len, c.hid_dim);
    let rows = bsz * t;
    let tok = &p["tok_emb"];
    let pos = &p["pos_emb"];
    let scale = (h as f32).sqrt() as f64;
    let mut x = vec![0.0; rows * h];
    match c.positional_mode {
        PositionalMode::Add => {
            for r in 0..rows {
                let (id, step) = (batch.ids[r], r % t);
                for d in 0..h {
                    x[r * h + d] = tok[id * h + d] * scale + pos[step * h + d];
                }
            }
        }
        PositionalMode::Concat => {
            let mut cat = vec![0.0; rows * 2 * h];
            for r in 0..rows {
                let (id, step) = (batch.ids[r], r % t);
                for d in 0..h {
                    cat[r * 2 * h + d] = tok[id * h + d] * scale;
                    cat[r * 2 * h + h + d] = pos[step * h + d];
                }
            }
            x = linear(&cat, rows, &p["pos_proj.w"], &p["pos_proj.b"]);
        }
    }

    let heads = c.n_heads;
    let dk = h / heads;
    for l in 0..c.n_layers {
        let n = |s: &str| format!("enc{l}.{s}");
        let q = linear(&x, rows, &p[&n("attn.q.w")], &p[&n("attn.q.b")]);
        let k = linear(&x, rows, &p[&n("attn.k.w")], &p[&n("attn.k.b")]);
        let v = linear(&x, rows, &p[&n("attn.v.w")], &p[&n("attn.v.b")]);
        let mut ctx = vec![0.0; rows * h];
        for b in 0..bsz {
            for hd in 0..heads {
                for i in 0..t {
                    let scores: Vec<f64> = (0..t)
                        .map(|j| {
                            if !batch.mask[b * t + j] {
                                return -1e9;
                            }
                            let s: f64 = (0..dk)
                                .map(|d| q[(b * t + i) * h + hd * dk + d] * k[(b * t + j) * h + hd * dk + d])
                                .sum();
                            s / (dk as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for d in 0..dk {
                        ctx[(b * t + i) * h + hd * dk + d] =
                            (0..t).map(|j| e[j] / z * v[(b * t + j) * h + hd * dk + d]).sum();
                    }
                }
            }
        }
        let a = linear(&ctx, rows, &p[&n("attn.o.w")], &p[&n("attn.o.b")]);
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += ai;
        }
        layer_norm(&mut x, h, &p[&n("ln1.g")], &p[&n("ln1.b")]);
        let mut f = linear(&x, rows, &p[&n("ffn.1.w")], &p[&n("ffn.1.b")]);
        for v in f.iter_mut() {
            relu_margin = relu_margin.min(v.abs());
            *v = v.max(0.0);
        }
        let f = linear(&f, rows, &p[&n("ffn.2.w")], &p[&n("ffn.2.b")]);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
        layer_norm(&mut x, h, &p[&n("ln2.g")], &p[&n("ln2.b")]);
    }

    let g = c.gru_hidden;
    let gp = |s: &str| &p[&format!("gru.{s}")];
    let mut state = vec![0.0; bsz * g];
    for b in 0..bsz {
        let hs = &mut state[b * g..(b + 1) * g];
        for step in 0..t {
            if !batch.mask[b * t + step] {
                continue;
            }
            let xt = &x[(b * t + step) * h..(b * t + step + 1) * h];
            let gate = |w: &[f64], u: &[f64], bias: &[f64], hv: &[f64]| -> Vec<f64> {
                (0..g)
                    .map(|o| {
                        bias[o]
                            + (0..h).map(|i| xt[i] * w[i * g + o]).sum::<f64>()
                            + (0..g).map(|i| hv[i] * u[i * g + o]).sum::<f64>()
                    })
                    .collect()
            };
            let z: Vec<f64> = gate(gp("w_z"), gp("u_z"), gp("b_z"), hs).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = gate(gp("w_r"), gp("u_r"), gp("b_r"), hs).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(hs.iter()).map(|(a, b)| a * b).collect();
            let cand: Vec<f64> = gate(gp("w_h"), gp("u_h"), gp("b_h"), &rh).into_iter().map(f64::tanh).collect();
            for o in 0..g {
                hs[o] = (1.0 - z[o]) * cand[o] + z[o] * hs[o];
            }
        }
    }

    let width = c.fusion_dim();
    let mut fused = Vec::with_capacity(bsz * width);
    for b in 0..bsz {
        fused.extend_from_slice(&state[b * g..(b + 1) * g]);
        fused.extend(batch.ctx[b * c.ctx_dim..(b + 1) * c.ctx_dim].iter().map(|&v| v as f64));
        fused.extend(batch.tfidf[b * c.tfidf_dim..(b + 1) * c.tfidf_dim].iter().map(|&v| v as f64));
    }
    (linear(&fused, bsz, &p["out.w"], &p["out.b"]), relu_margin)
}

pub fn cross_entropy(logits: &[f64], targets: &[usize]) -> f64 {
    let c = logits.len() / targets.len();
    logits
        .chunks(c)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum::<f64>()
        / targets.len() as f64
}

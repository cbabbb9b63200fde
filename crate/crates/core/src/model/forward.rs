use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Tape, Var};

use super::gru::{gru_states, GruParams};
use super::{EncoderLayer, Linear, ModelParams, PaddedBatch, LAYER_NORM_EPS};

const MASK_VALUE: f32 = -1e9;

fn linear(tape: &mut Tape, x: Var, l: Linear) -> Result<Var> {
    let (w, b) = (tape.param(l.w), tape.param(l.b));
    tape.linear(x, w, Some(b))
}

/// `softmax(Q Kᵀ / √dk) V` over `q: [N, Tq, dk]`, `k: [N, Tk, dk]`,
/// `v: [N, Tk, dv]`. `blocked[n, i, j]` replaces the score with −1e9.
/// Returns the output and the attention weights `[N, Tq, Tk]`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, blocked: &[bool]) -> Result<(Var, Var)> {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    let sv = tape.shape(v).to_vec();
    let dk = *sq.last().unwrap_or(&0);
    if dk == 0 || sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sk[2] != dk || sk[..2] != sv[..2] || sq[0] != sk[0] {
        return Err(Error::Shape {
            op: "attention",
            left: sq,
            right: sk,
        });
    }
    let scores = tape.batch_matmul(q, k, true)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f32).sqrt());
    let filled = tape.masked_fill(scaled, blocked, MASK_VALUE)?;
    let weights = tape.softmax(filled, 2)?;
    let out = tape.batch_matmul(weights, v, false)?;
    Ok((out, weights))
}

fn split_heads(tape: &mut Tape, x: Var, b: usize, t: usize, heads: usize, dk: usize) -> Result<Var> {
    let r = tape.reshape(x, &[b, t, heads, dk])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b * heads, t, dk])
}

/// Self-attention over `x: [B, T, H]` with `n_heads` heads. Keys where
/// `mask` is false (padding) are blocked for every query and head. Returns
/// the projected output and the weights `[B * n_heads, T, T]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    params: &ModelParams,
    layer: usize,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let l: EncoderLayer = params.layers[layer];
    let shape = tape.shape(x).to_vec();
    let (b, t, h) = (shape[0], shape[1], shape[2]);
    let heads = params.config.n_heads;
    let dk = h / heads;
    let q = linear(tape, x, l.q)?;
    let k = linear(tape, x, l.k)?;
    let v = linear(tape, x, l.v)?;
    let q = split_heads(tape, q, b, t, heads, dk)?;
    let k = split_heads(tape, k, b, t, heads, dk)?;
    let v = split_heads(tape, v, b, t, heads, dk)?;
    let mut blocked = Vec::with_capacity(b * heads * t * t);
    for row in 0..b {
        let keys = &mask[row * t..(row + 1) * t];
        for _ in 0..heads * t {
            blocked.extend(keys.iter().map(|&real| !real));
        }
    }
    let (ctx, weights) = scaled_dot_attention(tape, q, k, v, &blocked)?;
    let ctx = tape.reshape(ctx, &[b, heads, t, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, h])?;
    Ok((linear(tape, ctx, l.o)?, weights))
}

/// `linear → ReLU → dropout → linear`, applied at every position.
pub fn position_wise_ffn<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    layer: usize,
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let l = params.layers[layer];
    let hidden = linear(tape, x, l.ff1)?;
    let hidden = tape.relu(hidden);
    let hidden = tape.dropout(hidden, params.config.dropout, training, rng)?;
    linear(tape, hidden, l.ff2)
}

/// Embeds the batch and runs the post-norm encoder layers. Output
/// `[B, T, hid_dim]`.
pub fn encode_sequence<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &PaddedBatch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let c = &params.config;
    let (b, t) = (batch.batch, batch.len);
    if t > c.max_len {
        return Err(Error::validation(format!(
            "sequence length {t} exceeds max_len {}",
            c.max_len
        )));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= c.vocab_size) {
        return Err(Error::validation(format!(
            "token id {bad} out of range for vocabulary of {}",
            c.vocab_size
        )));
    }
    let table = tape.param(params.tok_emb);
    let tok = tape.embedding(table, &batch.ids, &[b, t])?;
    let tok = tape.scale(tok, (c.hid_dim as f32).sqrt());
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos_table = tape.param(params.pos_emb);
    let pos = tape.embedding(pos_table, &positions, &[b, t])?;
    let x = match params.pos_proj {
        None => tape.add(tok, pos)?,
        Some(proj) => {
            let cat = tape.concat(&[tok, pos])?;
            linear(tape, cat, proj)?
        }
    };
    let mut x = tape.dropout(x, c.dropout, training, rng)?;
    for (i, l) in params.layers.iter().enumerate() {
        let (attn, _) = multi_head_attention(tape, params, i, x, &batch.mask)?;
        let attn = tape.dropout(attn, c.dropout, training, rng)?;
        let res = tape.add(x, attn)?;
        let (g, bias) = (tape.param(l.ln1_g), tape.param(l.ln1_b));
        x = tape.layer_norm(res, g, bias, LAYER_NORM_EPS)?;
        let ff = position_wise_ffn(tape, params, i, x, training, rng)?;
        let ff = tape.dropout(ff, c.dropout, training, rng)?;
        let res = tape.add(x, ff)?;
        let (g, bias) = (tape.param(l.ln2_g), tape.param(l.ln2_b));
        x = tape.layer_norm(res, g, bias, LAYER_NORM_EPS)?;
    }
    Ok(x)
}

/// GRU over `seq: [B, T, in]`, returning the state after each row's last
/// real step, `[B, hidden]`.
pub fn gru_forward(tape: &mut Tape, gru: &GruParams, seq: Var, mask: &[bool], h0: Option<Var>) -> Result<Var> {
    let states = gru_states(tape, gru, seq, mask, h0)?;
    states
        .last()
        .copied()
        .ok_or_else(|| Error::validation("gru input has no time steps"))
}

/// `[gru_h ; ctx ; tfidf] → dropout → linear`. Channels of width zero are
/// left out.
pub fn fuse_and_classify<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    gru_h: Var,
    ctx: Option<Var>,
    tfidf: Option<Var>,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let c = &params.config;
    let b = tape.shape(gru_h)[0];
    let check = |tape: &Tape, v: Option<Var>, want: usize, what: &str| -> Result<()> {
        let got = v.map(|v| tape.shape(v).to_vec()).unwrap_or_else(|| vec![b, 0]);
        if got != [b, want] {
            return Err(Error::validation(format!(
                "{what} input has shape {got:?}, model expects [{b}, {want}]"
            )));
        }
        Ok(())
    };
    check(tape, Some(gru_h), c.gru_hidden, "gru")?;
    check(tape, ctx, c.ctx_dim, "contextual")?;
    check(tape, tfidf, c.tfidf_dim, "tf-idf")?;
    let parts: Vec<Var> = [Some(gru_h), ctx, tfidf].into_iter().flatten().collect();
    let fused = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
    let fused = tape.dropout(fused, c.dropout, training, rng)?;
    linear(tape, fused, params.out)
}

/// Full forward pass to logits `[B, n_classes]`.
pub fn model_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &PaddedBatch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let c = &params.config;
    let b = batch.batch;
    let feature = |tape: &mut Tape, data: &[f32], dim: usize| -> Result<Option<Var>> {
        if data.len() != b * dim {
            return Err(Error::validation(format!(
                "batch feature width {} does not match model width {dim}",
                data.len() / b
            )));
        }
        if dim == 0 {
            return Ok(None);
        }
        tape.constant(&[b, dim], data.to_vec()).map(Some)
    };
    let ctx = feature(tape, &batch.ctx, c.ctx_dim)?;
    let tfidf = feature(tape, &batch.tfidf, c.tfidf_dim)?;
    let seq = encode_sequence(tape, params, batch, training, rng)?;
    let h = gru_forward(tape, &params.gru, seq, &batch.mask, None)?;
    fuse_and_classify(tape, params, h, ctx, tfidf, training, rng)
}

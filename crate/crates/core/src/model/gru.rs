use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Tensor, Var};

/// Gate weights of one GRU layer. Input projections are `[in, hidden]`,
/// recurrent ones `[hidden, hidden]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

const NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        bound: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(9);
        for (i, n) in NAMES.iter().enumerate() {
            let shape: Vec<usize> = match i {
                0..=2 => vec![input, hidden],
                3..=5 => vec![hidden, hidden],
                _ => vec![hidden],
            };
            ids.push(store.insert(format!("{prefix}.{n}"), Tensor::uniform(&shape, -bound, bound, rng))?);
        }
        Ok(Self::from_ids(&ids))
    }

    /// Looks up the nine tensors under `prefix` in a loaded store.
    pub fn find(store: &ParamStore, prefix: &str) -> Result<Self> {
        let ids = NAMES
            .iter()
            .map(|n| {
                let name = format!("{prefix}.{n}");
                store
                    .id(&name)
                    .ok_or_else(|| Error::Parse(format!("missing parameter {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }

    fn from_ids(ids: &[ParamId]) -> Self {
        GruParams {
            w_z: ids[0],
            w_r: ids[1],
            w_h: ids[2],
            u_z: ids[3],
            u_r: ids[4],
            u_h: ids[5],
            b_z: ids[6],
            b_r: ids[7],
            b_h: ids[8],
        }
    }

    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.get(self.b_h).shape()[0]
    }
}

/// Runs the recurrence over `x: [B, T, in]` and returns the state after every
/// step (each `[B, hidden]`). `mask[b * T + t]` marks real steps; at pad steps
/// the previous state is carried through unchanged.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h ← (1 − z) ⊙ h̃ + z ⊙ h`.
pub fn gru_states(tape: &mut Tape, p: &GruParams, x: Var, mask: &[bool], h0: Option<Var>) -> Result<Vec<Var>> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "gru",
            left: shape,
            right: vec![0, 0, 0],
        });
    }
    let (b, t) = (shape[0], shape[1]);
    if mask.len() != b * t {
        return Err(Error::Shape {
            op: "gru mask",
            left: vec![b, t],
            right: vec![mask.len()],
        });
    }
    let [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h] =
        [p.w_z, p.w_r, p.w_h, p.u_z, p.u_r, p.u_h, p.b_z, p.b_r, p.b_h].map(|id| tape.param(id));
    let hidden = tape.shape(b_h)[0];
    let mut h = match h0 {
        Some(h) => {
            if tape.shape(h) != [b, hidden] {
                return Err(Error::Shape {
                    op: "gru h0",
                    left: tape.shape(h).to_vec(),
                    right: vec![b, hidden],
                });
            }
            h
        }
        None => tape.constant(&[b, hidden], vec![0.0; b * hidden])?,
    };
    let xz = tape.linear(x, w_z, Some(b_z))?;
    let xr = tape.linear(x, w_r, Some(b_r))?;
    let xh = tape.linear(x, w_h, Some(b_h))?;
    let mut states = Vec::with_capacity(t);
    for step in 0..t {
        let step_mask: Vec<bool> = (0..b).map(|row| mask[row * t + step]).collect();
        if !step_mask.iter().any(|&m| m) {
            states.push(h);
            continue;
        }
        let xz_t = tape.select(xz, 1, step)?;
        let xr_t = tape.select(xr, 1, step)?;
        let xh_t = tape.select(xh, 1, step)?;
        let hz = tape.linear(h, u_z, None)?;
        let z_pre = tape.add(xz_t, hz)?;
        let z = tape.sigmoid(z_pre);
        let hr = tape.linear(h, u_r, None)?;
        let r_pre = tape.add(xr_t, hr)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let hh = tape.linear(rh, u_h, None)?;
        let cand_pre = tape.add(xh_t, hh)?;
        let cand = tape.tanh(cand_pre);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, cand)?;
        let c = tape.mul(z, h)?;
        let h_new = tape.add(a, c)?;
        h = if step_mask.iter().all(|&m| m) {
            h_new
        } else {
            tape.where_rows(&step_mask, h_new, h)?
        };
        states.push(h);
    }
    Ok(states)
}

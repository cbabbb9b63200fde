//! Dense matrix kernels. Storage is `f32`; every inner product accumulates in
//! `f64`. Rows are distributed over the rayon pool when the problem is large
//! enough, but each output element is always reduced sequentially, so results
//! do not depend on the thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `C[m,n] = A[m,k] · B[k,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let b_row = &b[p * n..(p + 1) * n];
            for (acc, &bv) in acc.iter_mut().zip(b_row) {
                *acc += av * bv as f64;
            }
        }
        for (o, a) in out_row.iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    };
    if n == 0 {
        return out;
    }
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ`
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f32; m * n];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = dot(a_row, b_row) as f32;
        }
    };
    if n == 0 {
        return out;
    }
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]`
pub fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0f32; k * n];
    let row = |(p, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let b_row = &b[i * n..(i + 1) * n];
            for (acc, &bv) in acc.iter_mut().zip(b_row) {
                *acc += av * bv as f64;
            }
        }
        for (o, a) in out_row.iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    };
    if n == 0 {
        return out;
    }
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

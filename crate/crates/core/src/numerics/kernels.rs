//! Inner loops shared by graph operations.
//!
//! Every output element is reduced in a fixed order regardless of how rows
//! are distributed over threads, so parallel and sequential execution are
//! bit-identical.

use std::sync::atomic::{AtomicU8, Ordering};

use rayon::prelude::*;

pub const REFERENCE_MODE_ENV: &str = "FLORENCE_MINI_REFERENCE_MODE";

// 0 = unresolved, 1 = reference (sequential), 2 = parallel
static MODE: AtomicU8 = AtomicU8::new(0);

/// True when execution is forced to be strictly sequential.
pub fn reference_mode() -> bool {
    match MODE.load(Ordering::Relaxed) {
        1 => true,
        2 => false,
        _ => {
            let on = std::env::var(REFERENCE_MODE_ENV).map(|v| v == "1").unwrap_or(false);
            MODE.store(if on { 1 } else { 2 }, Ordering::Relaxed);
            on
        }
    }
}

/// Overrides the environment-derived execution mode for this process.
pub fn set_reference_mode(on: bool) {
    MODE.store(if on { 1 } else { 2 }, Ordering::Relaxed);
}

const PAR_THRESHOLD: usize = 1 << 16;

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], k: usize, n: usize) {
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `C = op(A) · op(B)` for row-major matrices; `op` transposes when the flag is set.
/// `A` is `m x k` after `op`, `B` is `k x n` after `op`.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let a_owned;
    let a = if ta {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    let mut c = vec![0.0; m * n];
    if n == 0 || k == 0 {
        return c;
    }
    if !reference_mode() && m * n * k >= PAR_THRESHOLD && m > 1 {
        let rows_per = (m / rayon::current_num_threads().max(1)).max(1);
        c.par_chunks_mut(rows_per * n).zip(a.par_chunks(rows_per * k)).for_each(|(cc, ac)| gemm_rows(ac, b, cc, k, n));
    } else {
        gemm_rows(a, b, &mut c, k, n);
    }
    c
}

/// Batched `gemm` over `batch` contiguous matrix pairs.
#[allow(clippy::too_many_arguments)]
pub fn bgemm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * m * n);
    for i in 0..batch {
        let ai = &a[i * m * k..(i + 1) * m * k];
        let bi = &b[i * k * n..(i + 1) * k * n];
        out.extend(gemm(ai, bi, m, k, n, ta, tb));
    }
    out
}

//! Row-at-a-time reference implementation of the attention block, written
//! with plain loops so it shares no kernels with `ega_core`.

use ega_core::attention::{NormParams, NORM_EPS};
use ega_core::{EgaParams, Matrix};

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn norm_row(x: &[f64], p: &NormParams) -> Vec<f64> {
    let c = x.len() as f64;
    let mean = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
    let sd = (var + NORM_EPS).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) / sd * p.gain[j] + p.bias[j]).collect()
}

fn times(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|j| x.iter().enumerate().map(|(t, v)| v * w.get(t, j)).sum()).collect()
}

fn mix(p: &Matrix, x: &Rows) -> Rows {
    (0..p.rows())
        .map(|r| (0..x[0].len()).map(|j| (0..x.len()).map(|l| p.get(r, l) * x[l][j]).sum()).collect())
        .collect()
}

/// Refined query features for one block. `score_factor` multiplies every
/// logit; `normalize` toggles both layer norms.
pub fn naive_block(
    query: &Matrix,
    reference: &Matrix,
    params: &EgaParams,
    heads: usize,
    score_factor: f64,
    normalize: bool,
) -> Matrix {
    let c = query.cols();
    let width = c / heads;
    let (mut f, mut h) = (rows(query), rows(reference));
    if normalize {
        f = f.iter().map(|r| norm_row(r, &params.query_norm)).collect();
        h = h.iter().map(|r| norm_row(r, &params.reference_norm)).collect();
    }
    let q: Rows = f.iter().map(|r| times(r, &params.w_q)).collect();
    let mut k: Rows = h.iter().map(|r| times(r, &params.w_k)).collect();
    let mut v: Rows = h.iter().map(|r| times(r, &params.w_v)).collect();
    if let (Some(pk), Some(pv)) = (&params.p_k, &params.p_v) {
        k = mix(pk, &k);
        v = mix(pv, &v);
    }

    let mut out = Matrix::zeros(query.rows(), c);
    for (i, qi) in q.iter().enumerate() {
        let mut merged = vec![0.0; c];
        for z in 0..heads {
            let span = z * width..(z + 1) * width;
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| span.clone().map(|t| qi[t] * kj[t]).sum::<f64>() * score_factor)
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let denom: f64 = e.iter().sum();
            for t in span {
                merged[t] = e.iter().zip(&v).map(|(w, vj)| w / denom * vj[t]).sum();
            }
        }
        for (j, y) in times(&merged, &params.w_o).into_iter().enumerate() {
            out.set(i, j, y + query.get(i, j));
        }
    }
    out
}

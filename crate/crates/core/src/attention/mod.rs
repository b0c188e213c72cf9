//! Guided cross-view attention.
//!
//! Each view's features at a scale form the queries; the stacked features of
//! its neighbors (and optionally its own past frames) form keys and values.
//! When the scale carries a projection dimension `k_s`, keys and values are
//! first multiplied by learned `k_s × L` matrices, so the attention map is
//! `n_s × k_s` instead of `n_s × L`.
//!
//! The full block is pre-norm multi-head attention with an output projection
//! and a residual connection:
//!
//! ```text
//! q̂ = norm_q(F)        ĥ = norm_h(H)
//! Q = q̂·W_q            K = ĥ·W_k          V = ĥ·W_v
//! K̃ = P_k·K            Ṽ = P_v·V          (projected scales only)
//! head_z = softmax(Q_z·K̃_zᵀ · scale)·Ṽ_z
//! out = F + concat(head_1..head_Z)·W_o
//! ```

mod params;
pub mod snapshot;

pub use params::{EgaParams, NormParams, ParamStore};
pub use snapshot::{read_snapshot, write_snapshot};

use crate::error::{EgaError, Result};
use crate::rig::{temporal_stack, FeatureBank, FeatureMap, RigConfig};
use crate::tensor::{concat_cols, matmul, matmul_transpose_b, softmax_rows, Matrix};

/// Variance epsilon of the layer norms.
pub const NORM_EPS: f64 = 1e-5;

/// Score scaling applied before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreScale {
    /// `1/√(c/Z)`, the head width.
    #[default]
    PerHead,
    /// `1/√c` regardless of head count.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    Layer,
    /// Skip both norms; gains and biases are ignored.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionOptions {
    pub score_scale: ScoreScale,
    pub norm: NormMode,
    /// Keep the per-head attention maps in [`AttentionOutput::weights`].
    pub keep_weights: bool,
}

impl AttentionOptions {
    pub fn score_factor(&self, channels: usize, heads: usize) -> f64 {
        match self.score_scale {
            ScoreScale::PerHead => 1.0 / ((channels / heads) as f64).sqrt(),
            ScoreScale::Literal => 1.0 / (channels as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Refined query features, `n_s × c`.
    pub refined: Matrix,
    /// One `n_s × K` row-stochastic map per head, when requested.
    pub weights: Option<Vec<Matrix>>,
}

/// Row-wise layer norm with per-channel gain and bias.
pub fn layer_norm(x: &Matrix, norm: &NormParams) -> Matrix {
    let c = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * norm.gain[j] + norm.bias[j];
        }
    }
    out
}

/// `Q = F·W_q`, `K = H·W_k`, `V = H·W_v`.
pub fn project_qkv(query: &Matrix, reference: &Matrix, params: &EgaParams) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((
        matmul(query, &params.w_q)?,
        matmul(reference, &params.w_k)?,
        matmul(reference, &params.w_v)?,
    ))
}

/// `K̃ = P_k·K`, `Ṽ = P_v·V`.
pub fn reduce_kv(keys: &Matrix, values: &Matrix, params: &EgaParams) -> Result<(Matrix, Matrix)> {
    let (Some(pk), Some(pv)) = (&params.p_k, &params.p_v) else {
        return Err(EgaError::Config("reduce_kv called without projection matrices".into()));
    };
    Ok((matmul(pk, keys)?, matmul(pv, values)?))
}

fn attention_map(q: &Matrix, k: &Matrix, factor: f64) -> Result<Matrix> {
    Ok(softmax_rows(&matmul_transpose_b(q, k)?.scale(factor)))
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(EgaError::shape("guided_attention(Q, K)", q.shape(), k.shape()));
    }
    if k.shape() != v.shape() {
        return Err(EgaError::shape("guided_attention(K, V)", k.shape(), v.shape()));
    }
    Ok(())
}

/// Single-head `softmax(Q·Kᵀ/√c)·V` where `c` is the scaling width.
pub fn guided_attention(q: &Matrix, k: &Matrix, v: &Matrix, c: usize) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    let weights = attention_map(q, k, 1.0 / (c as f64).sqrt())?;
    matmul(&weights, v)
}

/// Full attention block for one view at one scale.
///
/// `reference` is the stacked neighbor (and past-frame) features; the block
/// runs projected iff `params` carries `P_k`/`P_v`, whose column count must
/// equal `reference.rows()`.
pub fn ega_block(
    query: &Matrix,
    reference: &Matrix,
    params: &EgaParams,
    heads: usize,
    opts: AttentionOptions,
) -> Result<AttentionOutput> {
    let c = query.cols();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(EgaError::Config(format!("heads ({heads}) must divide channels ({c})")));
    }
    if reference.cols() != c {
        return Err(EgaError::shape("ega_block(query, reference)", query.shape(), reference.shape()));
    }
    let projection = params.p_k.as_ref().map(|pk| (pk.rows(), reference.rows()));
    params.validate(c, projection)?;

    let (q_in, h_in) = match opts.norm {
        NormMode::Layer => (
            layer_norm(query, &params.query_norm),
            layer_norm(reference, &params.reference_norm),
        ),
        NormMode::Identity => (query.clone(), reference.clone()),
    };
    let (q, k, v) = project_qkv(&q_in, &h_in, params)?;
    let (k, v) = if projection.is_some() { reduce_kv(&k, &v, params)? } else { (k, v) };

    let width = c / heads;
    let factor = opts.score_factor(c, heads);
    let mut head_outputs = Vec::with_capacity(heads);
    let mut maps = Vec::new();
    for z in 0..heads {
        let cols = z * width..(z + 1) * width;
        let weights = attention_map(&q.slice_cols(cols.start, cols.end), &k.slice_cols(cols.start, cols.end), factor)?;
        head_outputs.push(matmul(&weights, &v.slice_cols(cols.start, cols.end))?);
        if opts.keep_weights {
            maps.push(weights);
        }
    }
    let merged = concat_cols(&head_outputs.iter().collect::<Vec<_>>())?;
    let refined = matmul(&merged, &params.w_o)?.add(query)?;
    Ok(AttentionOutput { refined, weights: opts.keep_weights.then_some(maps) })
}

/// Refines every scale of one view at the current frame.
pub fn forward_view(
    bank: &FeatureBank,
    params: &ParamStore,
    config: &RigConfig,
    view: usize,
    opts: AttentionOptions,
) -> Result<Vec<FeatureMap>> {
    (0..config.scales.len())
        .map(|scale| {
            let query = bank.require(config, view, scale, 0)?;
            let reference = temporal_stack(bank, view, scale, config)?;
            let out = ega_block(query, &reference, params.get(view, scale)?, config.heads, opts)?;
            Ok(FeatureMap { view, scale, time_offset: 0, data: out.refined })
        })
        .collect()
}

/// Refines every (view, scale) of the current frame. Output is ordered by
/// view, then scale; each entry depends only on its own view's inputs.
pub fn forward_rig(
    bank: &FeatureBank,
    params: &ParamStore,
    config: &RigConfig,
    opts: AttentionOptions,
) -> Result<Vec<FeatureMap>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.num_cameras * config.scales.len());
    for view in 0..config.num_cameras {
        out.extend(forward_view(bank, params, config, view, opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::{Preset, ScaleConfig};
    use crate::tensor::seeded_init;
    use proptest::prelude::*;

    fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, c: usize) -> Matrix {
        let scale = 1.0 / (c as f64).sqrt();
        let mut out = Matrix::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|t| q.get(i, t) * k.get(j, t)).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..v.cols() {
                out.set(i, t, (0..k.rows()).map(|j| e[j] / z * v.get(j, t)).sum());
            }
        }
        out
    }

    fn zero_branch(mut p: EgaParams) -> EgaParams {
        let c = p.channels();
        p.w_q = Matrix::zeros(c, c);
        p.w_k = Matrix::zeros(c, c);
        p.w_v = Matrix::zeros(c, c);
        p
    }

    #[test]
    fn identity_projections() {
        let f = seeded_init(4, 3, 1, 1.0);
        let h = seeded_init(8, 3, 2, 1.0);
        let mut p = EgaParams::init(3, None, 0);
        p.w_q = Matrix::identity(3);
        p.w_k = Matrix::identity(3);
        p.w_v = Matrix::identity(3);
        let (q, k, v) = project_qkv(&f, &h, &p).unwrap();
        assert_eq!((q, k, v), (f.clone(), h.clone(), h.clone()));

        let (q, _, _) = project_qkv(&Matrix::zeros(4, 3), &h, &EgaParams::random(3, None, 4, 1.0)).unwrap();
        assert!(q.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn project_qkv_matches_loops() {
        let f = seeded_init(4, 3, 1, 1.0);
        let h = seeded_init(8, 3, 2, 1.0);
        let p = EgaParams::random(3, None, 3, 1.0);
        let (q, k, _) = project_qkv(&f, &h, &p).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|t| f.get(i, t) * p.w_q.get(t, j)).sum();
                assert!((q.get(i, j) - want).abs() < 1e-12);
            }
        }
        for i in 0..8 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|t| h.get(i, t) * p.w_k.get(t, j)).sum();
                assert!((k.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduce_kv_cases() {
        let k = seeded_init(6, 4, 1, 1.0);
        let v = seeded_init(6, 4, 2, 1.0);
        let mut p = EgaParams::init(4, Some((6, 6)), 0);
        p.p_k = Some(Matrix::identity(6));
        p.p_v = Some(Matrix::identity(6));
        assert_eq!(reduce_kv(&k, &v, &p).unwrap(), (k.clone(), v.clone()));

        let p = EgaParams::random(4, Some((3, 6)), 7, 1.0);
        let (kr, vr) = reduce_kv(&k, &v, &p).unwrap();
        let pk = p.p_k.as_ref().unwrap();
        let pv = p.p_v.as_ref().unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let wk: f64 = (0..6).map(|t| pk.get(i, t) * k.get(t, j)).sum();
                let wv: f64 = (0..6).map(|t| pv.get(i, t) * v.get(t, j)).sum();
                assert!((kr.get(i, j) - wk).abs() < 1e-12);
                assert!((vr.get(i, j) - wv).abs() < 1e-12);
            }
        }

        assert!(matches!(reduce_kv(&k, &v, &EgaParams::init(4, None, 0)), Err(EgaError::Config(_))));
        let short = EgaParams::init(4, Some((3, 5)), 0);
        assert!(matches!(reduce_kv(&k, &v, &short), Err(EgaError::Shape { .. })));
    }

    #[test]
    fn reduce_kv_output_shape() {
        let k = Matrix::zeros(1760, 64);
        let p = EgaParams::init(64, Some((880, 1760)), 1);
        let (kr, vr) = reduce_kv(&k, &k, &p).unwrap();
        assert_eq!(kr.shape(), (880, 64));
        assert_eq!(vr.shape(), (880, 64));
    }

    #[test]
    fn guided_attention_degenerate_cases() {
        let q = seeded_init(5, 4, 1, 1.0);
        let k = Matrix::from_fn(7, 4, |_, j| j as f64 * 0.3);
        let v = seeded_init(7, 4, 2, 1.0);
        let out = guided_attention(&q, &k, &v, 4).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mean = (0..7).map(|r| v.get(r, j)).sum::<f64>() / 7.0;
                assert!((out.get(i, j) - mean).abs() < 1e-12);
            }
        }

        let k1 = seeded_init(1, 4, 3, 1.0);
        let v1 = seeded_init(1, 4, 4, 1.0);
        let out = guided_attention(&q, &k1, &v1, 4).unwrap();
        for i in 0..5 {
            assert!(out.row(i).iter().zip(v1.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn guided_attention_matches_naive() {
        let q = seeded_init(6, 4, 1, 1.0);
        let k = seeded_init(10, 4, 2, 1.0);
        let v = seeded_init(10, 4, 3, 1.0);
        let got = guided_attention(&q, &k, &v, 4).unwrap();
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v, 4)).unwrap() < 1e-12);
        assert!(guided_attention(&q, &k, &seeded_init(9, 4, 3, 1.0), 4).is_err());
    }

    #[test]
    fn zero_branch_is_pure_residual() {
        let f = seeded_init(6, 8, 1, 1.0);
        let h = seeded_init(12, 8, 2, 1.0);
        for projection in [None, Some((4, 12))] {
            let p = zero_branch(EgaParams::random(8, projection, 3, 1.0));
            let out = ega_block(&f, &h, &p, 2, AttentionOptions::default()).unwrap();
            assert_eq!(out.refined, f);
        }
    }

    #[test]
    fn single_head_identity_norm_composition() {
        let f = seeded_init(5, 4, 1, 1.0);
        let h = seeded_init(10, 4, 2, 1.0);
        let p = EgaParams::random(4, None, 3, 1.0);
        let opts = AttentionOptions { norm: NormMode::Identity, ..Default::default() };
        let out = ega_block(&f, &h, &p, 1, opts).unwrap();
        let (q, k, v) = project_qkv(&f, &h, &p).unwrap();
        let att = naive_attention(&q, &k, &v, 4);
        let want = matmul(&att, &p.w_o).unwrap().add(&f).unwrap();
        assert!(out.refined.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn eight_heads_on_64_channels() {
        let f = seeded_init(20, 64, 1, 1.0);
        let h = seeded_init(40, 64, 2, 1.0);
        let p = EgaParams::init(64, None, 3);
        let opts = AttentionOptions { keep_weights: true, ..Default::default() };
        let out = ega_block(&f, &h, &p, 8, opts).unwrap();
        assert_eq!(out.refined.shape(), (20, 64));
        let weights = out.weights.unwrap();
        assert_eq!(weights.len(), 8);
        assert!(weights.iter().all(|w| w.shape() == (20, 40)));
        assert!(matches!(ega_block(&f, &h, &p, 7, opts), Err(EgaError::Config(_))));
    }

    #[test]
    fn literal_scale_equals_per_head_for_one_head() {
        let f = seeded_init(5, 4, 1, 1.0);
        let h = seeded_init(10, 4, 2, 1.0);
        let p = EgaParams::random(4, Some((3, 10)), 3, 1.0);
        let a = ega_block(&f, &h, &p, 1, AttentionOptions::default()).unwrap();
        let lit = AttentionOptions { score_scale: ScoreScale::Literal, ..Default::default() };
        let b = ega_block(&f, &h, &p, 1, lit).unwrap();
        assert_eq!(a, b);
        let c = ega_block(&f, &h, &p, 2, lit).unwrap();
        assert_ne!(a.refined, c.refined);
    }

    #[test]
    fn identity_projection_equals_unprojected() {
        let f = seeded_init(6, 8, 1, 1.0);
        let h = seeded_init(12, 8, 2, 1.0);
        let mut p = EgaParams::random(8, None, 3, 1.0);
        let plain = ega_block(&f, &h, &p, 2, AttentionOptions::default()).unwrap();
        p.p_k = Some(Matrix::identity(12));
        p.p_v = Some(Matrix::identity(12));
        let projected = ega_block(&f, &h, &p, 2, AttentionOptions::default()).unwrap();
        assert!(plain.refined.max_abs_diff(&projected.refined).unwrap() < 1e-12);
    }

    #[test]
    fn forward_rig_lr_shapes() {
        let cfg = RigConfig::preset(Preset::Lr).with_channels(16);
        let bank = FeatureBank::random(&cfg, 1);
        let params = ParamStore::init(&cfg, 2);
        let out = forward_rig(&bank, &params, &cfg, AttentionOptions::default()).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.iter().all(|m| m.data.shape() == (220, 16)));
    }

    #[test]
    fn minimal_two_camera_rig() {
        let cfg = RigConfig::ring("pair", 2, 1, vec![ScaleConfig::new(2, 2, None)], 4, 1).unwrap();
        let bank = FeatureBank::random(&cfg, 1);
        let params = ParamStore::init(&cfg, 2);
        let out = forward_rig(&bank, &params, &cfg, AttentionOptions::default()).unwrap();
        let ref0 = temporal_stack(&bank, 0, 0, &cfg).unwrap();
        assert_eq!(&ref0, bank.get(1, 0, 0).unwrap());
        let want = ega_block(bank.get(0, 0, 0).unwrap(), &ref0, params.get(0, 0).unwrap(), 1, AttentionOptions::default())
            .unwrap();
        assert_eq!(out[0].data, want.refined);
    }

    #[test]
    fn non_neighbor_perturbation_is_invisible() {
        let cfg = RigConfig::preset(Preset::Lr).with_channels(16).with_temporal_frames(1);
        let bank = FeatureBank::random(&cfg, 1);
        let params = ParamStore::init(&cfg, 2);
        let base = forward_view(&bank, &params, &cfg, 0, AttentionOptions::default()).unwrap();
        let mut perturbed = bank.clone();
        for scale in 0..5 {
            perturbed.replace(FeatureMap { view: 3, scale, time_offset: 0, data: seeded_init(220, 16, 99, 5.0) });
            perturbed.replace(FeatureMap { view: 1, scale, time_offset: -1, data: seeded_init(220, 16, 98, 5.0) });
        }
        let after = forward_view(&perturbed, &params, &cfg, 0, AttentionOptions::default()).unwrap();
        assert_eq!(base, after);
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weights_rows_sum_to_one(f in mat(5, 8), h in mat(9, 8), seed in any::<u64>(), projected in any::<bool>()) {
            let p = EgaParams::random(8, projected.then_some((4, 9)), seed, 1.0);
            let out = ega_block(&f, &h, &p, 2, AttentionOptions { keep_weights: true, ..Default::default() }).unwrap();
            prop_assert_eq!(out.refined.shape(), (5, 8));
            for w in out.weights.unwrap() {
                prop_assert_eq!(w.cols(), if projected { 4 } else { 9 });
                for i in 0..w.rows() {
                    prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn query_permutation_equivariance(f in mat(6, 4), h in mat(8, 4), seed in any::<u64>(), shift in 1usize..6) {
            let p = EgaParams::random(4, Some((3, 8)), seed, 1.0);
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let fp = Matrix::from_fn(6, 4, |i, j| f.get(perm[i], j));
            let a = ega_block(&f, &h, &p, 2, AttentionOptions::default()).unwrap().refined;
            let b = ega_block(&fp, &h, &p, 2, AttentionOptions::default()).unwrap().refined;
            let ap = Matrix::from_fn(6, 4, |i, j| a.get(perm[i], j));
            prop_assert!(ap.max_abs_diff(&b).unwrap() < 1e-12);
        }

        #[test]
        fn reference_permutation_invariance_unprojected(f in mat(4, 4), h in mat(7, 4), seed in any::<u64>(), shift in 1usize..7) {
            let p = EgaParams::random(4, None, seed, 1.0);
            let hp = Matrix::from_fn(7, 4, |i, j| h.get((i + shift) % 7, j));
            let a = ega_block(&f, &h, &p, 2, AttentionOptions::default()).unwrap().refined;
            let b = ega_block(&f, &hp, &p, 2, AttentionOptions::default()).unwrap().refined;
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }
}

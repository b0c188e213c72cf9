//! Analytic gradients of the attention block and their finite-difference
//! check.
//!
//! The analytic route records the block on a [`Tape`]; the numeric route
//! perturbs inputs of the plain [`ega_block`](crate::attention::ega_block)
//! forward, so the two share no code beyond the tensor kernels.

mod tape;

use std::collections::BTreeMap;

pub use tape::{Gradients, NodeId, Tape};

use crate::attention::{ega_block, AttentionOptions, EgaParams, NormMode, ParamStore};
use crate::error::{EgaError, Result};
use crate::rig::{FeatureBank, RigConfig};
use crate::tensor::{seeded_init, derive_seed, Matrix};

/// Default central-difference step in double precision.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Pass threshold on the relative error metric.
pub const RELATIVE_TOLERANCE: f64 = 1e-5;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar of every
/// matrix in `params`.
pub fn finite_diff(
    params: &[Matrix],
    epsilon: f64,
    mut loss_fn: impl FnMut(&[Matrix]) -> Result<f64>,
) -> Result<Vec<Matrix>> {
    if epsilon <= 0.0 {
        return Err(EgaError::Usage(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (k, p) in params.iter().enumerate() {
        let mut g = Matrix::zeros(p.rows(), p.cols());
        for idx in 0..p.data().len() {
            let orig = p.data()[idx];
            work[k].data_mut()[idx] = orig + epsilon;
            let plus = loss_fn(&work)?;
            work[k].data_mut()[idx] = orig - epsilon;
            let minus = loss_fn(&work)?;
            work[k].data_mut()[idx] = orig;
            g.data_mut()[idx] = (plus - minus) / (2.0 * epsilon);
        }
        out.push(g);
    }
    Ok(out)
}

/// Tape nodes holding one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockParamIds {
    pub ids: Vec<(&'static str, NodeId)>,
}

impl BlockParamIds {
    pub fn leaves(tape: &mut Tape, params: &EgaParams) -> Self {
        let ids = params.named_matrices().into_iter().map(|(name, m)| (name, tape.leaf(m))).collect();
        Self { ids }
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.ids.iter().find(|(n, _)| *n == name).map(|(_, id)| *id)
    }

    fn require(&self, name: &str) -> Result<NodeId> {
        self.get(name).ok_or_else(|| EgaError::Input(format!("parameter '{name}' missing from tape")))
    }
}

/// Records the attention block on `tape` and returns the refined-feature node.
pub fn record_ega_block(
    tape: &mut Tape,
    query: NodeId,
    reference: NodeId,
    params: &BlockParamIds,
    heads: usize,
    opts: AttentionOptions,
) -> Result<NodeId> {
    let c = tape.value(query).cols();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(EgaError::Config(format!("heads ({heads}) must divide channels ({c})")));
    }
    let (q_in, h_in) = match opts.norm {
        NormMode::Layer => (
            tape.layer_norm(query, params.require("query_norm.gain")?, params.require("query_norm.bias")?)?,
            tape.layer_norm(
                reference,
                params.require("reference_norm.gain")?,
                params.require("reference_norm.bias")?,
            )?,
        ),
        NormMode::Identity => (query, reference),
    };
    let q = tape.matmul(q_in, params.require("w_q")?)?;
    let mut k = tape.matmul(h_in, params.require("w_k")?)?;
    let mut v = tape.matmul(h_in, params.require("w_v")?)?;
    if let (Some(pk), Some(pv)) = (params.get("p_k"), params.get("p_v")) {
        k = tape.matmul(pk, k)?;
        v = tape.matmul(pv, v)?;
    }
    let width = c / heads;
    let factor = opts.score_factor(c, heads);
    let mut heads_out = Vec::with_capacity(heads);
    for z in 0..heads {
        let (a, b) = (z * width, (z + 1) * width);
        let qz = tape.slice_cols(q, a, b);
        let kz = tape.slice_cols(k, a, b);
        let vz = tape.slice_cols(v, a, b);
        let scores = tape.matmul_transpose_b(qz, kz)?;
        let scaled = tape.scale(scores, factor);
        let weights = tape.softmax_rows(scaled);
        heads_out.push(tape.matmul(weights, vz)?);
    }
    let merged = tape.concat_cols(&heads_out)?;
    let mixed = tape.matmul(merged, params.require("w_o")?)?;
    tape.add(mixed, query)
}

/// Error statistics for one parameter (or input) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, nan_max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

/// `max` that keeps NaN, so a non-finite gradient can never pass.
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn compare(name: &str, analytic: &Matrix, numeric: &Matrix) -> GradEntry {
    let errs: Vec<f64> =
        analytic.data().iter().zip(numeric.data()).map(|(&a, &n)| relative_error(a, n)).collect();
    GradEntry {
        name: name.to_string(),
        elements: errs.len(),
        max_rel_err: errs.iter().copied().fold(0.0, nan_max),
        mean_rel_err: if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 },
    }
}

/// Analytic gradients of `Σ refined²` for one block, keyed by parameter
/// name plus `"query"` and `"reference"`.
pub fn block_gradients(
    query: &Matrix,
    reference: &Matrix,
    params: &EgaParams,
    heads: usize,
    opts: AttentionOptions,
) -> Result<(f64, Vec<(String, Matrix)>)> {
    let mut tape = Tape::new();
    let q = tape.leaf(query.clone());
    let h = tape.leaf(reference.clone());
    let ids = BlockParamIds::leaves(&mut tape, params);
    let out = record_ega_block(&mut tape, q, h, &ids, heads, opts)?;
    let loss = tape.sum_squares(out);
    let grads = tape.backward(loss, 1.0)?;
    let mut named = vec![
        ("query".to_string(), grads.wrt(q).clone()),
        ("reference".to_string(), grads.wrt(h).clone()),
    ];
    named.extend(ids.ids.iter().map(|(n, id)| (n.to_string(), grads.wrt(*id).clone())));
    Ok((tape.value(loss).get(0, 0), named))
}

/// Compares tape gradients against central differences of the plain forward.
pub fn check_block(
    query: &Matrix,
    reference: &Matrix,
    params: &EgaParams,
    heads: usize,
    opts: AttentionOptions,
    epsilon: f64,
) -> Result<GradReport> {
    let (loss, analytic) = block_gradients(query, reference, params, heads, opts)?;
    let names: Vec<&'static str> = params.named_matrices().into_iter().map(|(n, _)| n).collect();
    let mut inputs = vec![query.clone(), reference.clone()];
    inputs.extend(params.named_matrices().into_iter().map(|(_, m)| m));
    let template = params.clone();
    let numeric = finite_diff(&inputs, epsilon, |xs| {
        let mut p = template.clone();
        for (name, m) in names.iter().zip(&xs[2..]) {
            p.set_named(name, m.clone())?;
        }
        let out = ega_block(&xs[0], &xs[1], &p, heads, opts)?;
        Ok(out.refined.data().iter().map(|v| v * v).sum())
    })?;
    let entries = analytic.iter().zip(&numeric).map(|((name, a), n)| compare(name, a, n)).collect();
    Ok(GradReport { loss, entries })
}

/// Shape of a randomized gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceShape {
    pub queries: usize,
    pub reference_len: usize,
    pub channels: usize,
    pub heads: usize,
    pub projection_dim: Option<usize>,
}

/// Inputs and parameters uniform in [-1, 1] for `shape`.
pub fn random_instance(shape: InstanceShape, seed: u64) -> (Matrix, Matrix, EgaParams) {
    let query = seeded_init(shape.queries, shape.channels, derive_seed(seed, &[0]), 1.0);
    let reference = seeded_init(shape.reference_len, shape.channels, derive_seed(seed, &[1]), 1.0);
    let params = EgaParams::random(
        shape.channels,
        shape.projection_dim.map(|k| (k, shape.reference_len)),
        derive_seed(seed, &[2]),
        1.0,
    );
    (query, reference, params)
}

/// Gradients of `Σ_s Σ refined(view, s)²` over a whole rig.
#[derive(Debug, Clone)]
pub struct ViewGradients {
    pub loss: f64,
    /// Every feature map in the bank, keyed by (view, scale, time offset).
    pub features: BTreeMap<(usize, usize, i32), Matrix>,
    /// The view's own block parameters, keyed by (scale, name).
    pub params: BTreeMap<(usize, &'static str), Matrix>,
}

/// Records one view's refinement at every scale with all bank features as
/// leaves, so features the view never reads come back with zero gradient.
pub fn view_gradients(
    bank: &FeatureBank,
    params: &ParamStore,
    config: &RigConfig,
    view: usize,
    opts: AttentionOptions,
) -> Result<ViewGradients> {
    let mut tape = Tape::new();
    let mut leaves = BTreeMap::new();
    for m in bank.to_maps() {
        let id = tape.leaf(m.data);
        leaves.insert((m.view, m.scale, m.time_offset), id);
    }
    let mut param_ids = Vec::new();
    let mut losses = Vec::new();
    for scale in 0..config.scales.len() {
        let query = *leaves.get(&(view, scale, 0)).ok_or_else(|| {
            EgaError::Input(format!("missing feature map for view {view}, scale {scale}, time offset 0"))
        })?;
        bank.require(config, view, scale, 0)?;
        let mut parts = Vec::new();
        for &j in &config.neighbors[view] {
            bank.require(config, j, scale, 0)?;
            parts.push(leaves[&(j, scale, 0)]);
        }
        for back in 1..=config.temporal_frames {
            let t = -(back as i32);
            bank.require(config, view, scale, t)?;
            parts.push(leaves[&(view, scale, t)]);
        }
        let reference = tape.concat_rows(&parts)?;
        let ids = BlockParamIds::leaves(&mut tape, params.get(view, scale)?);
        let out = record_ega_block(&mut tape, query, reference, &ids, config.heads, opts)?;
        losses.push(tape.sum_squares(out));
        param_ids.push((scale, ids));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let grads = tape.backward(total, 1.0)?;
    Ok(ViewGradients {
        loss: tape.value(total).get(0, 0),
        features: leaves.into_iter().map(|(k, id)| (k, grads.wrt(id).clone())).collect(),
        params: param_ids
            .into_iter()
            .flat_map(|(scale, ids)| {
                ids.ids.into_iter().map(move |(name, id)| ((scale, name), id)).collect::<Vec<_>>()
            })
            .map(|(k, id)| (k, grads.wrt(id).clone()))
            .collect(),
    })
}

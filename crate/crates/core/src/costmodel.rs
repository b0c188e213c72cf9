//! Closed-form FLOP and activation counts for guided attention and for the
//! all-views joint self-attention baseline.
//!
//! Conventions match the counting kernels in [`crate::tensor`]: a
//! multiply-add is 2 FLOPs, softmax is
//! [`SOFTMAX_FLOPS_PER_ELEMENT`](crate::tensor::SOFTMAX_FLOPS_PER_ELEMENT)
//! per element, elementwise work is free. For one block with `n_s` queries,
//! reference length `L`, `c` channels, `Z` heads and key rows
//! `K = k_s` (projected) or `L`:
//!
//! | stage        | FLOPs                    |
//! |--------------|--------------------------|
//! | qkv          | `2c²(n_s + 2L)`          |
//! | reduce       | `2·2·k_s·L·c` (projected)|
//! | attnmap      | `2·n_s·K·c`              |
//! | softmax      | `5·Z·n_s·K`              |
//! | weighted_sum | `2·n_s·K·c`              |
//! | headmix      | `2·n_s·c²`               |

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{EgaError, Result};
use crate::rig::{ring_neighbors, RigConfig};
use crate::tensor::SOFTMAX_FLOPS_PER_ELEMENT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Qkv,
    Reduce,
    AttnMap,
    Softmax,
    WeightedSum,
    HeadMix,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::Qkv, Stage::Reduce, Stage::AttnMap, Stage::Softmax, Stage::WeightedSum, Stage::HeadMix];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Qkv => "qkv",
            Stage::Reduce => "reduce",
            Stage::AttnMap => "attnmap",
            Stage::Softmax => "softmax",
            Stage::WeightedSum => "weighted_sum",
            Stage::HeadMix => "headmix",
        }
    }
}

impl FromStr for Stage {
    type Err = EgaError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| EgaError::Config(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StageFlops {
    pub qkv: u64,
    pub reduce: u64,
    pub attnmap: u64,
    pub softmax: u64,
    pub weighted_sum: u64,
    pub headmix: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.reduce + self.attnmap + self.softmax + self.weighted_sum + self.headmix
    }

    pub fn get(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Qkv => self.qkv,
            Stage::Reduce => self.reduce,
            Stage::AttnMap => self.attnmap,
            Stage::Softmax => self.softmax,
            Stage::WeightedSum => self.weighted_sum,
            Stage::HeadMix => self.headmix,
        }
    }

    fn accumulate(&mut self, other: &StageFlops) {
        self.qkv += other.qkv;
        self.reduce += other.reduce;
        self.attnmap += other.attnmap;
        self.softmax += other.softmax;
        self.weighted_sum += other.weighted_sum;
        self.headmix += other.headmix;
    }
}

/// Dimensions of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionShape {
    pub queries: usize,
    pub reference_len: usize,
    pub projection_dim: Option<usize>,
    pub channels: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn key_rows(&self) -> usize {
        self.projection_dim.unwrap_or(self.reference_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceCost {
    /// `None` for the joint baseline, whose blocks span every view.
    pub view: Option<usize>,
    pub scale: usize,
    pub shape: AttentionShape,
    pub flops: StageFlops,
    pub peak_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub label: String,
    pub stages: StageFlops,
    pub flops_total: u64,
    /// Largest per-instance activation count.
    pub peak_activation_elements: u64,
    pub breakdown: Vec<InstanceCost>,
}

impl CostReport {
    fn from_instances(label: String, breakdown: Vec<InstanceCost>) -> Self {
        let mut stages = StageFlops::default();
        for inst in &breakdown {
            stages.accumulate(&inst.flops);
        }
        Self {
            label,
            flops_total: stages.total(),
            peak_activation_elements: breakdown.iter().map(|i| i.peak_elements).max().unwrap_or(0),
            stages,
            breakdown,
        }
    }
}

/// FLOPs of one block.
pub fn instance_flops(shape: &AttentionShape) -> StageFlops {
    let (n, l, c, z) =
        (shape.queries as u64, shape.reference_len as u64, shape.channels as u64, shape.heads as u64);
    let k = shape.key_rows() as u64;
    StageFlops {
        qkv: 2 * c * c * (n + 2 * l),
        reduce: shape.projection_dim.map_or(0, |k| 2 * 2 * k as u64 * l * c),
        attnmap: 2 * n * k * c,
        softmax: SOFTMAX_FLOPS_PER_ELEMENT * z * n * k,
        weighted_sum: 2 * n * k * c,
        headmix: 2 * n * c * c,
    }
}

/// Activations one block materializes, weights excluded:
/// inputs and their normalized copies `2(n_s + L)c`, `Q, K, V` as
/// `(n_s + 2L)c`, reduced keys/values `2k_s·c`, pre- and post-softmax maps
/// `2·Z·n_s·K`, and merged heads, mixed output and result `3·n_s·c`.
pub fn instance_peak_elements(shape: &AttentionShape) -> u64 {
    let (n, l, c, z) =
        (shape.queries as u64, shape.reference_len as u64, shape.channels as u64, shape.heads as u64);
    let k = shape.key_rows() as u64;
    2 * (n + l) * c + (n + 2 * l) * c + shape.projection_dim.map_or(0, |k| 2 * k as u64 * c) + 2 * z * n * k + 3 * n * c
}

fn instance(view: Option<usize>, scale: usize, shape: AttentionShape) -> InstanceCost {
    InstanceCost { view, scale, shape, flops: instance_flops(&shape), peak_elements: instance_peak_elements(&shape) }
}

/// Guided attention over every (view, scale).
pub fn cost_ega(config: &RigConfig) -> CostReport {
    let mut breakdown = Vec::new();
    for view in 0..config.num_cameras {
        for (scale, sc) in config.scales.iter().enumerate() {
            let shape = AttentionShape {
                queries: sc.positions(),
                reference_len: config.reference_len(scale),
                projection_dim: sc.projection_dim,
                channels: config.channels,
                heads: config.heads,
            };
            breakdown.push(instance(Some(view), scale, shape));
        }
    }
    CostReport::from_instances(format!("ega:{}", config.name), breakdown)
}

/// Joint self-attention: per scale, all `N·(1 + n_t)` maps of the frame
/// window form one unprojected sequence attending to itself. Neighbor
/// lists and projection dims are ignored.
pub fn cost_joint_selfattn(config: &RigConfig) -> CostReport {
    let breakdown = config
        .scales
        .iter()
        .enumerate()
        .map(|(scale, sc)| {
            let len = config.num_cameras * (1 + config.temporal_frames) * sc.positions();
            let shape = AttentionShape {
                queries: len,
                reference_len: len,
                projection_dim: None,
                channels: config.channels,
                heads: config.heads,
            };
            instance(None, scale, shape)
        })
        .collect();
    CostReport::from_instances(format!("joint:{}", config.name), breakdown)
}

/// Sequence length of the joint baseline at `scale`.
pub fn joint_sequence_len(config: &RigConfig, scale: usize) -> usize {
    config.num_cameras * (1 + config.temporal_frames) * config.scales[scale].positions()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Every scale becomes `1 × v` (so `n_s = v`), keeping its `k_s`.
    Positions,
    /// Ring adjacency with `v` neighbors per camera.
    Neighbors,
    TemporalFrames,
    /// Every scale projected to `k_s = v`.
    ProjectionDim,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Positions => "ns",
            SweepAxis::Neighbors => "ni",
            SweepAxis::TemporalFrames => "nt",
            SweepAxis::ProjectionDim => "ks",
        }
    }

    /// `template` with this axis set to `value`.
    pub fn apply(self, template: &RigConfig, value: usize) -> Result<RigConfig> {
        let mut cfg = template.clone();
        match self {
            SweepAxis::Positions => {
                for sc in &mut cfg.scales {
                    sc.height = 1;
                    sc.width = value;
                }
            }
            SweepAxis::Neighbors => cfg.neighbors = ring_neighbors(cfg.num_cameras, value),
            SweepAxis::TemporalFrames => cfg.temporal_frames = value,
            SweepAxis::ProjectionDim => {
                for sc in &mut cfg.scales {
                    sc.projection_dim = Some(value);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = EgaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ns" | "n_s" => Ok(SweepAxis::Positions),
            "ni" | "n_i" => Ok(SweepAxis::Neighbors),
            "nt" | "n_t" => Ok(SweepAxis::TemporalFrames),
            "ks" | "k_s" => Ok(SweepAxis::ProjectionDim),
            other => Err(EgaError::Config(format!("unknown sweep axis '{other}' (ns, ni, nt, ks)"))),
        }
    }
}

/// Which count a sweep tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostMetric {
    Total,
    Stage(Stage),
}

impl CostMetric {
    pub fn read(self, report: &CostReport) -> u64 {
        match self {
            CostMetric::Total => report.flops_total,
            CostMetric::Stage(s) => report.stages.get(s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CostMetric::Total => "total",
            CostMetric::Stage(s) => s.name(),
        }
    }
}

impl FromStr for CostMetric {
    type Err = EgaError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "total" {
            Ok(CostMetric::Total)
        } else {
            s.parse().map(CostMetric::Stage)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingCurve {
    pub axis: SweepAxis,
    pub metric: CostMetric,
    pub points: Vec<(usize, u64)>,
    /// Exact polynomial degree, when the points pin it down.
    pub degree: Option<u32>,
    /// Max absolute least-squares residual of a straight-line fit, relative
    /// to the largest value.
    pub linear_residual: f64,
}

/// Evaluates `metric` of [`cost_ega`] along `axis`.
pub fn scaling_curve(template: &RigConfig, axis: SweepAxis, values: &[usize], metric: CostMetric) -> Result<ScalingCurve> {
    if values.len() < 3 {
        return Err(EgaError::Usage(format!("a sweep needs at least 3 points, got {}", values.len())));
    }
    let mut points = Vec::with_capacity(values.len());
    for &v in values {
        points.push((v, metric.read(&cost_ega(&axis.apply(template, v)?))));
    }
    Ok(ScalingCurve { axis, metric, degree: polynomial_degree(&points), linear_residual: linear_residual(&points), points })
}

/// Smallest `d` such that every `(d+1)`-th divided difference vanishes,
/// computed in exact rational arithmetic. `None` when the points are too
/// few to rule out every lower degree, or x values repeat.
pub fn polynomial_degree(points: &[(usize, u64)]) -> Option<u32> {
    let xs: Vec<i128> = points.iter().map(|p| p.0 as i128).collect();
    for i in 0..xs.len() {
        if xs[..i].contains(&xs[i]) {
            return None;
        }
    }
    let mut level: Vec<Ratio<i128>> = points.iter().map(|p| Ratio::from_integer(p.1 as i128)).collect();
    let mut order = 0usize;
    loop {
        if level.len() < 2 {
            return None;
        }
        let next: Vec<Ratio<i128>> = (0..level.len() - 1)
            .map(|i| (level[i + 1] - level[i]) / Ratio::from_integer(xs[i + order + 1] - xs[i]))
            .collect();
        order += 1;
        if next.iter().all(|v| *v == Ratio::from_integer(0)) {
            return Some(order as u32 - 1);
        }
        level = next;
    }
}

fn linear_residual(points: &[(usize, u64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 as f64 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let scale = points.iter().map(|p| p.1 as f64).fold(0.0, f64::max).max(1.0);
    points
        .iter()
        .map(|p| (p.1 as f64 - (my + slope * (p.0 as f64 - mx))).abs())
        .fold(0.0, f64::max)
        / scale
}

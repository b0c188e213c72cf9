//! Subcommand bodies. Each returns its report files in memory; [`crate::run`]
//! writes them once everything has been computed.

use std::fmt::Write as _;
use std::path::Path;

use ega_core::attention::{read_snapshot, write_snapshot};
use ega_core::costmodel::{
    cost_ega, cost_joint_selfattn, joint_sequence_len, scaling_curve, CostMetric, CostReport, Stage, SweepAxis,
};
use ega_core::gradcheck::check_block;
use ega_core::losses::{photometric_loss, smoothness_loss, total_loss, DepthMap, ImagePlane, Raster};
use ega_core::metrics::{evaluate, median_scale, EvalReport, CSV_HEADER};
use ega_core::rig::temporal_stack;
use ega_core::tensor::derive_seed;
use ega_core::{
    ega_block, forward_view, AttentionOptions, EgaParams, FeatureBank, FeatureMap, Matrix, NormMode, ParamStore,
    Preset, RigConfig, ScoreScale,
};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::manifest::Outputs;
use crate::oracle::naive_block;
use crate::{resolve, Cli, Command, ParamArgs};

pub struct Report {
    pub source: String,
    pub seed: u64,
    pub outputs: Outputs,
    pub failures: Vec<String>,
    pub summary: Vec<String>,
}

impl Report {
    fn new(source: String, seed: u64) -> Self {
        Self { source, seed, outputs: Outputs::default(), failures: Vec::new(), summary: Vec::new() }
    }
}

pub fn execute(cli: &Cli) -> Result<Report> {
    let common = &cli.common;
    match &cli.command {
        Command::CheckAttention { tolerance, literal_scale, params } => {
            let r = resolve(common, Preset::Lr)?;
            let mut report = Report::new(r.source, r.seed);
            let opts = AttentionOptions {
                score_scale: if *literal_scale { ScoreScale::Literal } else { ScoreScale::PerHead },
                ..Default::default()
            };
            check_attention(&r.rig, r.seed, *tolerance, opts, params, &mut report)?;
            Ok(report)
        }
        Command::CheckGrads { epsilon, tolerance, params } => {
            let r = resolve(common, Preset::Minimal)?;
            let mut report = Report::new(r.source, r.seed);
            check_grads(&r.rig, r.seed, *epsilon, *tolerance, params, &mut report)?;
            Ok(report)
        }
        Command::Cost => {
            let r = resolve(common, Preset::Lr)?;
            let mut report = Report::new(r.source, r.seed);
            cost(&r.rig, &mut report)?;
            Ok(report)
        }
        Command::Sweep { axis, points, metric } => {
            let r = resolve(common, Preset::Lr)?;
            let mut report = Report::new(r.source, r.seed);
            sweep(&r.rig, *axis, points, *metric, &mut report)?;
            Ok(report)
        }
        Command::EvalLoss { target, candidate, depth } => {
            let mut report = Report::new("none".into(), common.seed.unwrap_or(0));
            eval_loss(target, candidate, depth.as_deref(), &mut report)?;
            Ok(report)
        }
        Command::EvalDepth { pred, gt, max_depth, no_median_scaling } => {
            let mut report = Report::new("none".into(), common.seed.unwrap_or(0));
            eval_depth(pred, gt, *max_depth, !no_median_scaling, &mut report)?;
            Ok(report)
        }
    }
}

fn load_params(rig: &RigConfig, seed: u64, args: &ParamArgs, report: &mut Report) -> Result<ParamStore> {
    let store = match &args.params {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
            read_snapshot(std::io::BufReader::new(file))
                .map_err(|source| CliError::Input { path: path.clone(), source })?
        }
        None => ParamStore::init(rig, derive_seed(seed, &[1])),
    };
    if args.save_params {
        let mut bytes = Vec::new();
        write_snapshot(&store, &mut bytes)?;
        report.outputs.add("params.bin", bytes);
    }
    Ok(store)
}

fn random_bank(rig: &RigConfig, seed: u64) -> FeatureBank {
    FeatureBank::random(rig, derive_seed(seed, &[2]))
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

struct CheckRow {
    check: &'static str,
    view: usize,
    scale: usize,
    value: f64,
    tolerance: f64,
    passed: bool,
}

impl CheckRow {
    /// Passes iff `value < tolerance`, or `value == 0` when `tolerance` is 0.
    fn new(check: &'static str, view: usize, scale: usize, value: f64, tolerance: f64) -> Self {
        let passed = if tolerance == 0.0 { value == 0.0 } else { value < tolerance };
        Self { check, view, scale, value, tolerance, passed }
    }
}

fn check_attention(
    rig: &RigConfig,
    seed: u64,
    tolerance: f64,
    opts: AttentionOptions,
    param_args: &ParamArgs,
    report: &mut Report,
) -> Result<()> {
    rig.validate()?;
    let params = load_params(rig, seed, param_args, report)?;
    let bank = random_bank(rig, seed);
    let factor = opts.score_factor(rig.channels, rig.heads);
    let mut rows = Vec::new();

    let mut refined = Vec::with_capacity(rig.num_cameras);
    for view in 0..rig.num_cameras {
        let maps = forward_view(&bank, &params, rig, view, opts)?;
        for map in &maps {
            let query = bank.require(rig, view, map.scale, 0)?;
            let reference = temporal_stack(&bank, view, map.scale, rig)?;
            let naive = naive_block(query, &reference, params.get(view, map.scale)?, rig.heads, factor, true);
            rows.push(CheckRow::new("oracle", view, map.scale, map.data.max_abs_diff(&naive)?, tolerance));
        }
        refined.push(maps);
    }

    for view in 0..rig.num_cameras {
        for scale in 0..rig.scales.len() {
            let query = bank.require(rig, view, scale, 0)?;
            let reference = temporal_stack(&bank, view, scale, rig)?;
            let plain = EgaParams { p_k: None, p_v: None, ..params.get(view, scale)?.clone() };
            let eye = Matrix::identity(reference.rows());
            let projected = EgaParams { p_k: Some(eye.clone()), p_v: Some(eye), ..plain.clone() };
            let a = ega_block(query, &reference, &plain, rig.heads, opts)?.refined;
            let b = ega_block(query, &reference, &projected, rig.heads, opts)?.refined;
            rows.push(CheckRow::new("identity_projection", view, scale, a.max_abs_diff(&b)?, 1e-12));
        }
    }

    for view in 0..rig.num_cameras {
        let outside: Vec<usize> = (0..rig.num_cameras).filter(|&j| j != view && !rig.is_neighbor(view, j)).collect();
        if outside.is_empty() {
            continue;
        }
        let mut perturbed = bank.clone();
        for m in bank.to_maps().into_iter().filter(|m| outside.contains(&m.view)) {
            let data = m.data.map(|x| x + 1.0);
            perturbed.replace(FeatureMap { data, ..m });
        }
        let moved = forward_view(&perturbed, &params, rig, view, opts)?;
        for (before, after) in refined[view].iter().zip(&moved) {
            rows.push(CheckRow::new("locality", view, before.scale, before.data.max_abs_diff(&after.data)?, 0.0));
        }
    }

    let mut csv = String::from("check,view,scale,value,tolerance,status\n");
    for r in &rows {
        let status = if r.passed { "pass" } else { "fail" };
        let _ = writeln!(csv, "{},{},{},{:e},{:e},{status}", r.check, r.view, r.scale, r.value, r.tolerance);
        if !r.passed {
            report.failures.push(format!("{}(view={},scale={})", r.check, r.view, r.scale));
        }
    }
    report.outputs.add("check_attention.csv", csv);

    let mut checks = serde_json::Map::new();
    for name in ["oracle", "identity_projection", "locality"] {
        let sel: Vec<&CheckRow> = rows.iter().filter(|r| r.check == name).collect();
        let worst = sel.iter().map(|r| r.value).fold(0.0, nan_max);
        let failed = sel.iter().filter(|r| !r.passed).count();
        report.summary.push(format!("{name}: {} blocks, worst {worst:e}, {failed} failed", sel.len()));
        checks.insert(name.into(), json!({ "blocks": sel.len(), "worst": worst, "failed": failed }));
    }
    report.outputs.add_json(
        "summary.json",
        &json!({ "config": rig.name, "tolerance": tolerance, "checks": checks, "passed": report.failures.is_empty() }),
    )
}

fn check_grads(
    rig: &RigConfig,
    seed: u64,
    epsilon: f64,
    tolerance: f64,
    param_args: &ParamArgs,
    report: &mut Report,
) -> Result<()> {
    rig.validate()?;
    let params = load_params(rig, seed, param_args, report)?;
    let bank = random_bank(rig, seed);
    let opts = AttentionOptions { norm: NormMode::Layer, ..Default::default() };
    let mut csv = String::from("view,scale,parameter,elements,max_rel_err,mean_rel_err,status\n");
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for view in 0..rig.num_cameras {
        for scale in 0..rig.scales.len() {
            let query = bank.require(rig, view, scale, 0)?;
            let reference = temporal_stack(&bank, view, scale, rig)?;
            let grads = check_block(query, &reference, params.get(view, scale)?, rig.heads, opts, epsilon)?;
            for e in &grads.entries {
                let ok = e.max_rel_err < tolerance;
                let status = if ok { "pass" } else { "fail" };
                let _ = writeln!(
                    csv,
                    "{view},{scale},{},{},{:e},{:e},{status}",
                    e.name, e.elements, e.max_rel_err, e.mean_rel_err
                );
                if !ok {
                    report.failures.push(format!("gradient(view={view},scale={scale},{})", e.name));
                }
                worst = nan_max(worst, e.max_rel_err);
                entries += 1;
            }
        }
    }
    report.outputs.add("check_grads.csv", csv);
    report.summary.push(format!("{entries} gradient matrices, worst relative error {worst:e} (tolerance {tolerance:e})"));
    report.outputs.add_json(
        "summary.json",
        &json!({
            "config": rig.name,
            "epsilon": epsilon,
            "tolerance": tolerance,
            "matrices": entries,
            "max_rel_err": worst,
            "passed": report.failures.is_empty(),
        }),
    )
}

const COST_HEADER: &str = "config,stage,view,scale,flops,peak_elements";

fn cost_rows(csv: &mut String, report: &CostReport) {
    for inst in &report.breakdown {
        let view = inst.view.map_or_else(|| "all".to_string(), |v| v.to_string());
        for stage in Stage::ALL {
            let _ = writeln!(
                csv,
                "{},{},{view},{},{},{}",
                report.label,
                stage.name(),
                inst.scale,
                inst.flops.get(stage),
                inst.peak_elements
            );
        }
        let _ = writeln!(csv, "{},total,{view},{},{},{}", report.label, inst.scale, inst.flops.total(), inst.peak_elements);
    }
    for stage in Stage::ALL {
        let _ = writeln!(
            csv,
            "{},{},all,all,{},{}",
            report.label,
            stage.name(),
            report.stages.get(stage),
            report.peak_activation_elements
        );
    }
    let _ = writeln!(csv, "{},total,all,all,{},{}", report.label, report.flops_total, report.peak_activation_elements);
}

fn report_json(r: &CostReport) -> serde_json::Value {
    json!({
        "label": r.label,
        "stages": r.stages,
        "flops_total": r.flops_total,
        "peak_activation_elements": r.peak_activation_elements,
        "instances": r.breakdown.len(),
    })
}

/// Sweep values used for the fitted degrees in the cost summary.
fn default_points(axis: SweepAxis, rig: &RigConfig) -> Vec<usize> {
    match axis {
        SweepAxis::Positions => vec![8, 16, 32, 64, 128],
        SweepAxis::Neighbors => (1..rig.num_cameras).collect(),
        SweepAxis::TemporalFrames => vec![0, 1, 2, 3],
        SweepAxis::ProjectionDim => vec![16, 32, 64, 128],
    }
}

fn cost(rig: &RigConfig, report: &mut Report) -> Result<()> {
    rig.validate()?;
    let ega = cost_ega(rig);
    let joint = cost_joint_selfattn(rig);
    let mut csv = format!("{COST_HEADER}\n");
    cost_rows(&mut csv, &ega);
    cost_rows(&mut csv, &joint);
    report.outputs.add("cost.csv", csv);

    let ratio = joint.stages.attnmap as f64 / ega.stages.attnmap as f64;
    let attn = CostMetric::Stage(Stage::AttnMap);
    let mut degrees = serde_json::Map::new();
    for axis in [SweepAxis::Positions, SweepAxis::Neighbors, SweepAxis::TemporalFrames, SweepAxis::ProjectionDim] {
        let degree = scaling_curve(rig, axis, &default_points(axis, rig), attn).ok().and_then(|c| c.degree);
        degrees.insert(axis.name().into(), json!(degree));
    }
    let seq: Vec<usize> = (0..rig.scales.len()).map(|s| joint_sequence_len(rig, s)).collect();
    report.summary.push(format!(
        "{}: guided {} FLOPs, joint {} FLOPs, attention-map ratio {ratio}",
        rig.name, ega.flops_total, joint.flops_total
    ));
    report.outputs.add_json(
        "summary.json",
        &json!({
            "config": rig.name,
            "ega": report_json(&ega),
            "joint": report_json(&joint),
            "joint_sequence_len": seq,
            "attnmap_ratio_joint_over_ega": ratio,
            "attnmap_degree": degrees,
        }),
    )
}

fn sweep(rig: &RigConfig, axis: SweepAxis, points: &[usize], metric: CostMetric, report: &mut Report) -> Result<()> {
    let curve = scaling_curve(rig, axis, points, metric)?;
    let mut csv = String::from("axis,value,metric,flops\n");
    for (v, f) in &curve.points {
        let _ = writeln!(csv, "{axis},{v},{},{f}", metric.name());
    }
    report.outputs.add("sweep.csv", csv);
    let degree = curve.degree.map_or_else(|| "undetermined".to_string(), |d| d.to_string());
    report.summary.push(format!("{} vs {axis}: degree {degree}, linear residual {:e}", metric.name(), curve.linear_residual));
    report.outputs.add_json(
        "summary.json",
        &json!({
            "config": rig.name,
            "axis": axis.name(),
            "metric": metric.name(),
            "points": curve.points,
            "degree": curve.degree,
            "linear_residual": curve.linear_residual,
        }),
    )
}

fn read_raster(path: &Path) -> Result<Raster> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Raster::parse(&text).map_err(|source| CliError::Input { path: path.to_path_buf(), source })
}

fn read_image(path: &Path) -> Result<ImagePlane> {
    ImagePlane::from_raster(read_raster(path)?).map_err(|source| CliError::Input { path: path.to_path_buf(), source })
}

fn read_depth(path: &Path) -> Result<DepthMap> {
    DepthMap::from_raster(read_raster(path)?).map_err(|source| CliError::Input { path: path.to_path_buf(), source })
}

fn eval_loss(target: &Path, candidates: &[std::path::PathBuf], depth: Option<&Path>, report: &mut Report) -> Result<()> {
    let target_img = read_image(target)?;
    let cands = candidates.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    let photo = photometric_loss(&target_img, &cands)?;
    let smooth = match depth {
        Some(p) => Some(smoothness_loss(&read_depth(p)?, &target_img)?),
        None => None,
    };
    let total = total_loss(photo.mean, smooth.unwrap_or(0.0));

    let mut csv = format!("term,value\nphotometric,{}\n", photo.mean);
    if let Some(s) = smooth {
        let _ = writeln!(csv, "smoothness,{s}");
    }
    let _ = writeln!(csv, "total,{total}");
    report.outputs.add("loss.csv", csv);
    let map = Raster { height: target_img.height(), width: target_img.width(), channels: 1, data: photo.per_pixel };
    report.outputs.add("photometric_map.raster", map.to_text());
    report.summary.push(format!("photometric {} smoothness {} total {total}", photo.mean, smooth.map_or("n/a".into(), |s| s.to_string())));
    report.outputs.add_json(
        "summary.json",
        &json!({ "candidates": cands.len(), "photometric": photo.mean, "smoothness": smooth, "total": total }),
    )
}

fn camera_name(path: &Path, index: usize) -> String {
    path.file_stem().and_then(|s| s.to_str()).map_or_else(|| format!("cam{index}"), str::to_string)
}

fn eval_depth(
    preds: &[std::path::PathBuf],
    gts: &[std::path::PathBuf],
    max_depth: f64,
    median: bool,
    report: &mut Report,
) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(CliError::Usage(format!("{} --pred files but {} --gt files", preds.len(), gts.len())));
    }
    let mut csv = format!("{CSV_HEADER}\n");
    let mut rows = Vec::new();
    let mut cameras = Vec::new();
    for (i, (pp, gp)) in preds.iter().zip(gts).enumerate() {
        let (pred, gt) = (read_depth(pp)?, read_depth(gp)?);
        let pred = if median { median_scale(&pred, &gt)? } else { pred };
        let r = evaluate(&pred, &gt, max_depth)?;
        let name = camera_name(gp, i);
        csv.push_str(&r.csv_row(&name));
        csv.push('\n');
        cameras.push(json!({ "camera": name, "metrics": metrics_json(&r) }));
        rows.push(r);
    }
    let avg = EvalReport::average(&rows)?;
    csv.push_str(&avg.csv_row("average"));
    csv.push('\n');
    report.outputs.add("depth_metrics.csv", csv);
    report.summary.push(format!(
        "average over {} cameras: abs_rel {} rmse {} delta1 {}",
        rows.len(),
        avg.abs_rel,
        avg.rmse,
        avg.delta1
    ));
    report.outputs.add_json(
        "summary.json",
        &json!({ "max_depth": max_depth, "median_scaling": median, "cameras": cameras, "average": metrics_json(&avg) }),
    )
}

fn metrics_json(r: &EvalReport) -> serde_json::Value {
    json!({
        "abs_rel": r.abs_rel,
        "sq_rel": r.sq_rel,
        "rmse": r.rmse,
        "rmse_log": r.rmse_log,
        "delta1": r.delta1,
        "delta2": r.delta2,
        "delta3": r.delta3,
        "pixel_count": r.pixel_count,
    })
}

//! Depth evaluation: error metrics, δ thresholds and median scaling.

use crate::error::{EgaError, Result};
use crate::losses::DepthMap;

/// Predictions are clamped to this depth before taking logarithms.
pub const MIN_PRED_DEPTH: f64 = 1e-3;
/// Base of the δ accuracy thresholds.
pub const DELTA_BASE: f64 = 1.25;

/// Column order of CSV reports.
pub const CSV_HEADER: &str = "camera,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,pixel_count";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

impl EvalReport {
    /// `(abs_rel, sq_rel, rmse, rmse_log, δ1, δ2, δ3)`.
    pub fn as_tuple(&self) -> (f64, f64, f64, f64, f64, f64, f64) {
        (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3)
    }

    pub fn csv_row(&self, camera: &str) -> String {
        format!(
            "{camera},{},{},{},{},{},{},{},{}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
            self.pixel_count
        )
    }

    /// Unweighted mean over cameras; `pixel_count` is summed.
    pub fn average(reports: &[EvalReport]) -> Result<EvalReport> {
        if reports.is_empty() {
            return Err(EgaError::Evaluation("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            abs_rel: mean(|r| r.abs_rel),
            sq_rel: mean(|r| r.sq_rel),
            rmse: mean(|r| r.rmse),
            rmse_log: mean(|r| r.rmse_log),
            delta1: mean(|r| r.delta1),
            delta2: mean(|r| r.delta2),
            delta3: mean(|r| r.delta3),
            pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
        })
    }
}

fn check_shapes(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(EgaError::shape("depth evaluation", (pred.height(), pred.width()), (gt.height(), gt.width())));
    }
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Multiplies `pred` by `median(gt) / median(pred)` over pixels valid in both.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMap> {
    check_shapes(pred, gt)?;
    let overlap: Vec<usize> = (0..pred.values().len()).filter(|&p| pred.is_valid(p) && gt.is_valid(p)).collect();
    if overlap.is_empty() {
        return Err(EgaError::Evaluation("median scaling: no pixel is valid in both maps".into()));
    }
    let mut p: Vec<f64> = overlap.iter().map(|&i| pred.values()[i]).collect();
    let mut g: Vec<f64> = overlap.iter().map(|&i| gt.values()[i]).collect();
    let (mp, mg) = (median(&mut p), median(&mut g));
    if !(mp > 0.0 && mg > 0.0) {
        return Err(EgaError::Evaluation("median scaling: non-positive median".into()));
    }
    Ok(pred.scaled(mg / mp))
}

/// Standard depth metrics over pixels where both maps are valid and
/// `0 < gt ≤ max_depth`.
pub fn evaluate(pred: &DepthMap, gt: &DepthMap, max_depth: f64) -> Result<EvalReport> {
    check_shapes(pred, gt)?;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    let thresholds = [DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3)];
    for i in 0..gt.values().len() {
        let g = gt.values()[i];
        if !(gt.is_valid(i) && pred.is_valid(i) && g > 0.0 && g <= max_depth) {
            continue;
        }
        let p = pred.values()[i];
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let log_diff = p.max(MIN_PRED_DEPTH).ln() - g.ln();
        sq_log += log_diff * log_diff;
        let ratio = (p / g).max(g / p);
        for (hit, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *hit += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(EgaError::Evaluation(format!("no valid ground-truth pixel within (0, {max_depth}]")));
    }
    let nf = n as f64;
    Ok(EvalReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        pixel_count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_depth(n: usize, seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::new(1, n, (0..n).map(|_| rng.gen_range(1.0..60.0)).collect()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = random_depth(50, 1);
        let r = evaluate(&gt, &gt, 80.0).unwrap();
        assert_eq!(r.as_tuple(), (0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0));
        assert_eq!(r.pixel_count, 50);
    }

    #[test]
    fn delta_boundary() {
        let gt = random_depth(30, 2);
        let r = evaluate(&gt.scaled(1.25001), &gt, 1e9).unwrap();
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
        assert_eq!(r.delta3, 1.0);
    }

    #[test]
    fn median_scale_cases() {
        let gt = random_depth(21, 3);
        assert_eq!(median_scale(&gt, &gt).unwrap(), gt);
        assert_eq!(median_scale(&gt.scaled(2.0), &gt).unwrap(), gt);
        let none = DepthMap::new(1, 21, vec![-1.0; 21]).unwrap();
        assert!(matches!(median_scale(&none, &gt), Err(EgaError::Evaluation(_))));
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn capping_excludes_far_and_invalid_pixels() {
        let gt = DepthMap::new(1, 4, vec![10.0, 90.0, 0.0, 20.0]).unwrap();
        let pred = DepthMap::new(1, 4, vec![10.0, 1.0, 5.0, 20.0]).unwrap();
        let r = evaluate(&pred, &gt, 80.0).unwrap();
        assert_eq!(r.pixel_count, 2);
        assert_eq!(r.abs_rel, 0.0);
        let far = DepthMap::new(1, 2, vec![100.0, 120.0]).unwrap();
        assert!(matches!(evaluate(&far, &far, 80.0), Err(EgaError::Evaluation(_))));
    }

    #[test]
    fn average_is_unweighted() {
        let a = EvalReport { abs_rel: 0.2, sq_rel: 1.0, rmse: 2.0, rmse_log: 0.1, delta1: 0.5, delta2: 1.0, delta3: 1.0, pixel_count: 10 };
        let b = EvalReport { abs_rel: 0.4, pixel_count: 1000, ..a };
        let m = EvalReport::average(&[a, b]).unwrap();
        assert!((m.abs_rel - 0.3).abs() < 1e-15);
        assert_eq!(m.pixel_count, 1010);
    }

    proptest! {
        #[test]
        fn median_scaling_removes_global_scale(seed in 0u64..1000, k in 0.01f64..100.0) {
            let gt = random_depth(40, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let pred = DepthMap::new(1, 40, gt.values().iter().map(|g| g * rng.gen_range(0.7..1.4)).collect()).unwrap();
            let base = evaluate(&median_scale(&pred, &gt).unwrap(), &gt, 80.0).unwrap();
            let scaled = evaluate(&median_scale(&pred.scaled(k), &gt).unwrap(), &gt, 80.0).unwrap();
            let (a, b) = (base.as_tuple(), scaled.as_tuple());
            for (x, y) in [(a.0, b.0), (a.1, b.1), (a.2, b.2), (a.3, b.3)] {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(base.delta1 <= base.delta2 && base.delta2 <= base.delta3);
        }
    }
}

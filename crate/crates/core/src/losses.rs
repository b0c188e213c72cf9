//! Self-supervised depth objective: SSIM, per-pixel minimum photometric
//! error, edge-aware smoothness and their weighted sum.
//!
//! Candidate images are assumed to be already warped into the target view.
//!
//! # Raster files
//!
//! Images and depth maps are exchanged as plain text:
//!
//! ```text
//! RASTER <height> <width> <channels>
//! <height·width·channels whitespace-separated reals>
//! ```
//!
//! Values are row-major with channels interleaved per pixel, so pixel
//! `(y, x)` channel `k` sits at index `(y·width + x)·channels + k`. Depth
//! maps use one channel; non-positive or non-finite depths mark invalid
//! pixels. Lines starting with `#` are ignored.

use std::fmt::Write as _;

use crate::error::{EgaError, Result};

/// SSIM/L1 mixing weight of the photometric term.
pub const PHOTOMETRIC_ALPHA: f64 = 0.85;
/// Weight of the smoothness term in the total loss.
pub const SMOOTHNESS_WEIGHT: f64 = 0.001;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Unvalidated grid of reals, as read from a raster file.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("RASTER") {
            return Err(EgaError::Format("raster must start with 'RASTER'".into()));
        }
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| EgaError::Format(format!("raster header missing {what}")))?
                .parse()
                .map_err(|e| EgaError::Format(format!("raster {what}: {e}")))
        };
        let (height, width, channels) = (dim("height")?, dim("width")?, dim("channels")?);
        let data = tokens
            .map(|t| t.parse::<f64>().map_err(|e| EgaError::Format(format!("raster value '{t}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if data.len() != height * width * channels {
            return Err(EgaError::Format(format!(
                "raster {height}×{width}×{channels} needs {} values, found {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    /// One image row per line, values in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = format!("RASTER {} {} {}\n", self.height, self.width, self.channels);
        let per_row = self.width * self.channels;
        for row in self.data.chunks(per_row.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Intensities in [0, 1], channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(EgaError::Input("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(EgaError::shape("ImagePlane::new", (height * width, channels), (data.len(), 1)));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(EgaError::Input(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for k in 0..channels {
                    data.push(f(y, x, k));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn from_raster(r: Raster) -> Result<Self> {
        Self::new(r.height, r.width, r.channels, r.data)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + k]
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Dense depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Pixels with non-positive or non-finite depth are marked invalid.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::with_mask(height, width, values, valid)
    }

    pub fn with_mask(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(EgaError::Input("depth dimensions must be positive".into()));
        }
        if values.len() != height * width || valid.len() != values.len() {
            return Err(EgaError::shape("DepthMap::new", (height, width), (values.len(), valid.len())));
        }
        if let Some((v, _)) = values.iter().zip(&valid).find(|(v, ok)| **ok && !(v.is_finite() && **v > 0.0)) {
            return Err(EgaError::Input(format!("valid depth pixel holds {v}")));
        }
        Ok(Self { height, width, values, valid })
    }

    pub fn from_raster(r: Raster) -> Result<Self> {
        if r.channels != 1 {
            return Err(EgaError::Input(format!("depth raster must have 1 channel, has {}", r.channels)));
        }
        Self::new(r.height, r.width, r.data)
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.values.iter().zip(&self.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    /// Same mask, values multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v * factor).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Per-pixel, per-channel SSIM values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SsimMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Reflect-101 index into `0..n` for offsets of at most one.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn box3(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    s += f(reflect(y as isize + dy, h), reflect(x as isize + dx, w));
                }
            }
            out.push(s / 9.0);
        }
    }
    out
}

/// Local SSIM over a 3×3 uniform window with reflective padding.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<SsimMap> {
    if a.dims() != b.dims() {
        return Err(EgaError::shape("ssim", (a.height, a.width), (b.height, b.width)));
    }
    let (h, w, ch) = a.dims();
    let mut values = vec![0.0; h * w * ch];
    for k in 0..ch {
        let mu_a = box3(h, w, |y, x| a.at(y, x, k));
        let mu_b = box3(h, w, |y, x| b.at(y, x, k));
        let aa = box3(h, w, |y, x| a.at(y, x, k) * a.at(y, x, k));
        let bb = box3(h, w, |y, x| b.at(y, x, k) * b.at(y, x, k));
        let ab = box3(h, w, |y, x| a.at(y, x, k) * b.at(y, x, k));
        for p in 0..h * w {
            let var_a = aa[p] - mu_a[p] * mu_a[p];
            let var_b = bb[p] - mu_b[p] * mu_b[p];
            let cov = ab[p] - mu_a[p] * mu_b[p];
            let num = (2.0 * mu_a[p] * mu_b[p] + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a[p] * mu_a[p] + mu_b[p] * mu_b[p] + SSIM_C1) * (var_a + var_b + SSIM_C2);
            values[p * ch + k] = num / den;
        }
    }
    Ok(SsimMap { height: h, width: w, channels: ch, values })
}

/// Photometric loss: scalar mean plus the per-pixel minimum map (`h·w`).
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricLoss {
    pub mean: f64,
    pub per_pixel: Vec<f64>,
}

/// Per-pixel error of one candidate: channel mean of
/// `α/2·(1 − SSIM) + (1 − α)·|target − candidate|`.
pub fn reprojection_error(target: &ImagePlane, candidate: &ImagePlane) -> Result<Vec<f64>> {
    let s = ssim(target, candidate)?;
    let ch = target.channels;
    Ok((0..target.height * target.width)
        .map(|p| {
            (0..ch)
                .map(|k| {
                    let idx = p * ch + k;
                    PHOTOMETRIC_ALPHA / 2.0 * (1.0 - s.values[idx])
                        + (1.0 - PHOTOMETRIC_ALPHA) * (target.data[idx] - candidate.data[idx]).abs()
                })
                .sum::<f64>()
                / ch as f64
        })
        .collect())
}

/// Minimum over candidates of the reprojection error at each pixel,
/// averaged over pixels.
pub fn photometric_loss(target: &ImagePlane, candidates: &[ImagePlane]) -> Result<PhotometricLoss> {
    if candidates.is_empty() {
        return Err(EgaError::Usage("photometric_loss needs at least one candidate".into()));
    }
    let mut per_pixel = vec![f64::INFINITY; target.height * target.width];
    for c in candidates {
        for (best, e) in per_pixel.iter_mut().zip(reprojection_error(target, c)?) {
            *best = best.min(e);
        }
    }
    let mean = per_pixel.iter().sum::<f64>() / per_pixel.len() as f64;
    Ok(PhotometricLoss { mean, per_pixel })
}

/// Edge-aware smoothness of mean-normalized disparity.
///
/// Disparity is `1/depth` on valid pixels, divided by its mean. Forward
/// differences are taken only between two valid pixels; the image gradient
/// is the channel mean of absolute differences. The result is the mean over
/// horizontal pairs plus the mean over vertical pairs.
pub fn smoothness_loss(depth: &DepthMap, image: &ImagePlane) -> Result<f64> {
    let (h, w) = (depth.height, depth.width);
    if (image.height, image.width) != (h, w) {
        return Err(EgaError::shape("smoothness_loss", (h, w), (image.height, image.width)));
    }
    let disparity: Vec<f64> = depth.values.iter().map(|d| 1.0 / d).collect();
    let valid: Vec<usize> = (0..h * w).filter(|&p| depth.valid[p]).collect();
    if valid.is_empty() {
        return Err(EgaError::Usage("smoothness_loss: depth map has no valid pixels".into()));
    }
    let mean = valid.iter().map(|&p| disparity[p]).sum::<f64>() / valid.len() as f64;
    let norm: Vec<f64> = disparity.iter().map(|d| d / mean).collect();
    let image_grad = |p: usize, q: usize| -> f64 {
        let ch = image.channels;
        (0..ch).map(|k| (image.data[p * ch + k] - image.data[q * ch + k]).abs()).sum::<f64>() / ch as f64
    };
    let term = |pairs: &mut dyn Iterator<Item = (usize, usize)>| -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for (p, q) in pairs {
            if depth.valid[p] && depth.valid[q] {
                total += (norm[q] - norm[p]).abs() * (-image_grad(p, q)).exp();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    };
    let mut horizontal = (0..h).flat_map(|y| (0..w.saturating_sub(1)).map(move |x| (y * w + x, y * w + x + 1)));
    let mut vertical = (0..h.saturating_sub(1)).flat_map(|y| (0..w).map(move |x| (y * w + x, (y + 1) * w + x)));
    Ok(term(&mut horizontal) + term(&mut vertical))
}

/// `L_p + λ·L_s` with `λ = 0.001`.
pub fn total_loss(photometric: f64, smoothness: f64) -> f64 {
    photometric + SMOOTHNESS_WEIGHT * smoothness
}

//! Holistic spatial and temporal video features.
//!
//! Per frame we measure mean absolute luminance (R+G+B), colorfulness,
//! RMS luminance contrast, the detected face count and six first-order
//! Gaussian derivative responses (three scales, two orientations, 3:1
//! elongation as in the Leung-Malik bank). Each of these ten scalars is
//! summarized by its mean and population standard deviation over frames.
//! Six temporal entries follow: for three temporal scales, the per-pixel
//! time average of the temporal derivative magnitude is reduced to its
//! spatial mean and spatial standard deviation.
//!
//! All convolutions are correlation over the valid (unpadded) region. The
//! derivative kernels are scaled so that a unit-slope ramp responds with
//! exactly 1.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media_io::{frame_to_gray, luma, FrameSequence, GrayPlane, GrayVolume, RgbFrame};
use crate::stats::{mean, population_std};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("frame {width}x{height} too small for kernel radius {radius}")]
    FrameTooSmall {
        width: usize,
        height: usize,
        radius: usize,
    },
    #[error("{frames} frames, temporal filtering needs at least {required}")]
    TooFewFrames { frames: usize, required: usize },
    #[error("face sidecar mismatch: {0}")]
    SidecarMismatch(String),
    #[error("bad feature config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

pub const FEATURE_COUNT: usize = 26;

/// Column names, in vector order.
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "lum_mean",
    "lum_std",
    "color_mean",
    "color_std",
    "contrast_mean",
    "contrast_std",
    "faces_mean",
    "faces_std",
    "lm1_0_mean",
    "lm1_0_std",
    "lm1_90_mean",
    "lm1_90_std",
    "lm2_0_mean",
    "lm2_0_std",
    "lm2_90_mean",
    "lm2_90_std",
    "lm3_0_mean",
    "lm3_0_std",
    "lm3_90_mean",
    "lm3_90_std",
    "t1_spmean",
    "t1_spstd",
    "t2_spmean",
    "t2_spstd",
    "t4_spmean",
    "t4_spstd",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Short-axis sigmas of the spatial derivative filters.
    pub spatial_scales: Vec<f64>,
    /// Long-axis sigma as a multiple of the short-axis sigma.
    pub elongation: f64,
    pub temporal_scales: Vec<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            spatial_scales: vec![1.0, std::f64::consts::SQRT_2, 2.0],
            elongation: 3.0,
            temporal_scales: vec![1.0, 2.0, 4.0],
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| v.iter().all(|s| s.is_finite() && *s > 0.0);
        if self.spatial_scales.len() != 3 || !positive(&self.spatial_scales) {
            return Err(FeatureError::BadConfig(
                "spatial_scales needs 3 positive values".into(),
            ));
        }
        if self.temporal_scales.len() != 3 || !positive(&self.temporal_scales) {
            return Err(FeatureError::BadConfig(
                "temporal_scales needs 3 positive values".into(),
            ));
        }
        if !(self.elongation.is_finite() && self.elongation >= 1.0) {
            return Err(FeatureError::BadConfig("elongation must be >= 1".into()));
        }
        Ok(())
    }

    pub fn spatial_radius(&self, sigma: f64) -> usize {
        kernel_radius(sigma * self.elongation)
    }

    /// Smallest frame count accepted by [`temporal_band_features`].
    pub fn min_frames(&self) -> usize {
        let max = self.temporal_scales.iter().cloned().fold(0.0, f64::max);
        2 * kernel_radius(max) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector26(pub [f64; FEATURE_COUNT]);

impl FeatureVector26 {
    pub fn values(&self) -> &[f64; FEATURE_COUNT] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.0[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSidecar {
    pub video_id: String,
    pub counts: Vec<u32>,
}

impl FaceSidecar {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Sampled Gaussian on `-radius..=radius`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|u| (-((u * u) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Sampled first derivative of a Gaussian on `-radius..=radius`, exactly
/// antisymmetric and scaled so that `sum(u * k[u]) == 1`.
pub fn gaussian_derivative_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|u| u as f64 * (-((u * u) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let moment: f64 = (-r..=r).zip(&raw).map(|(u, k)| u as f64 * k).sum();
    raw.into_iter().map(|v| v / moment).collect()
}

pub fn frame_colorfulness(frame: &RgbFrame) -> f64 {
    let n = frame.pixel_count() as f64;
    let (mut s_rg, mut s_yb) = (0.0, 0.0);
    for ((&r, &g), &b) in frame.r().iter().zip(frame.g()).zip(frame.b()) {
        let (r, g, b) = (r as f64, g as f64, b as f64);
        s_rg += r - g;
        s_yb += 0.5 * (r + g) - b;
    }
    let (mu_rg, mu_yb) = (s_rg / n, s_yb / n);
    let (mut v_rg, mut v_yb) = (0.0, 0.0);
    for ((&r, &g), &b) in frame.r().iter().zip(frame.g()).zip(frame.b()) {
        let (r, g, b) = (r as f64, g as f64, b as f64);
        let d_rg = r - g - mu_rg;
        let d_yb = 0.5 * (r + g) - b - mu_yb;
        v_rg += d_rg * d_rg;
        v_yb += d_yb * d_yb;
    }
    (v_rg / n + v_yb / n).sqrt() + 0.3 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
}

pub fn frame_rms_contrast(frame: &RgbFrame) -> f64 {
    let ys: Vec<f64> = frame
        .r()
        .iter()
        .zip(frame.g())
        .zip(frame.b())
        .map(|((&r, &g), &b)| luma(r, g, b))
        .collect();
    let mu = mean(&ys);
    if mu == 0.0 {
        return 0.0;
    }
    population_std(&ys) / mu
}

pub fn frame_mean_luminance(frame: &RgbFrame) -> f64 {
    let total: u64 = frame
        .r()
        .iter()
        .zip(frame.g())
        .zip(frame.b())
        .map(|((&r, &g), &b)| r as u64 + g as u64 + b as u64)
        .sum();
    total as f64 / frame.pixel_count() as f64
}

/// Correlation with an antisymmetric kernel. Taps at `+u` and `-u` are
/// paired so a constant window gives exactly 0.
fn antisymmetric_dot(kernel: &[f64], sample: impl Fn(usize) -> f64) -> f64 {
    let r = kernel.len() / 2;
    (1..=r)
        .map(|u| kernel[r + u] * (sample(r + u) - sample(r - u)))
        .sum()
}

/// Mean |response| of the x-derivative filter (derivative along x with the
/// short sigma, smoothing along y with the long sigma).
fn horizontal_derivative_energy(
    plane: &GrayPlane,
    deriv: &[f64],
    smooth: &[f64],
    radius: usize,
) -> f64 {
    let (w, h) = (plane.width, plane.height);
    let (vw, vh) = (w - 2 * radius, h - 2 * radius);
    // pass 1: derivative along x, full height, valid width
    let mut dx = vec![0.0; vw * h];
    for y in 0..h {
        let row = &plane.data[y * w..(y + 1) * w];
        for x in 0..vw {
            dx[y * vw + x] = antisymmetric_dot(deriv, |j| row[x + j]);
        }
    }
    // pass 2: smoothing along y
    let mut total = 0.0;
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (j, k) in smooth.iter().enumerate() {
                acc += k * dx[(y + j) * vw + x];
            }
            total += acc.abs();
        }
    }
    total / (vw * vh) as f64
}

/// Six oriented first-derivative energies ordered
/// `[s1 0deg, s1 90deg, s2 0deg, s2 90deg, s3 0deg, s3 90deg]`.
///
/// The 90 degree response is the 0 degree response of the transposed frame,
/// so transposing the input swaps the two orientations bit for bit.
pub fn lm_responses(plane: &GrayPlane, cfg: &FeatureConfig) -> Result<[f64; 6]> {
    let transposed = plane.transposed();
    lm_responses_with_transpose(plane, &transposed, cfg)
}

fn lm_responses_with_transpose(
    plane: &GrayPlane,
    transposed: &GrayPlane,
    cfg: &FeatureConfig,
) -> Result<[f64; 6]> {
    let mut out = [0.0; 6];
    for (s, &sigma) in cfg.spatial_scales.iter().enumerate() {
        let radius = cfg.spatial_radius(sigma);
        if plane.width < 2 * radius + 1 || plane.height < 2 * radius + 1 {
            return Err(FeatureError::FrameTooSmall {
                width: plane.width,
                height: plane.height,
                radius,
            });
        }
        let deriv = gaussian_derivative_kernel(sigma, radius);
        let smooth = gaussian_kernel(sigma * cfg.elongation, radius);
        out[2 * s] = horizontal_derivative_energy(plane, &deriv, &smooth, radius);
        out[2 * s + 1] = horizontal_derivative_energy(transposed, &deriv, &smooth, radius);
    }
    Ok(out)
}

/// `(spatial mean, spatial std)` of the time-averaged temporal derivative
/// magnitude for each temporal scale, flattened to six values.
pub fn temporal_band_features(volume: &GrayVolume, cfg: &FeatureConfig) -> Result<[f64; 6]> {
    let t_len = volume.frame_count();
    let required = cfg.min_frames();
    if t_len < required {
        return Err(FeatureError::TooFewFrames {
            frames: t_len,
            required,
        });
    }
    let n_px = volume.width * volume.height;
    let mut out = [0.0; 6];
    for (s, &sigma) in cfg.temporal_scales.iter().enumerate() {
        let radius = kernel_radius(sigma);
        let kernel = gaussian_derivative_kernel(sigma, radius);
        let valid = t_len - 2 * radius;
        let avg: Vec<f64> = (0..n_px)
            .into_par_iter()
            .map(|p| {
                let mut total = 0.0;
                for t in 0..valid {
                    total += antisymmetric_dot(&kernel, |j| volume.frames[t + j].data[p]).abs();
                }
                total / valid as f64
            })
            .collect();
        out[2 * s] = mean(&avg);
        out[2 * s + 1] = population_std(&avg);
    }
    Ok(out)
}

/// Ten per-frame scalars: luminance, colorfulness, contrast, faces, 6 LM.
fn per_frame_scalars(frame: &RgbFrame, faces: f64, cfg: &FeatureConfig) -> Result<[f64; 10]> {
    let gray = frame_to_gray(frame);
    let lm = lm_responses(&gray, cfg)?;
    let mut out = [0.0; 10];
    out[0] = frame_mean_luminance(frame);
    out[1] = frame_colorfulness(frame);
    out[2] = frame_rms_contrast(frame);
    out[3] = faces;
    out[4..].copy_from_slice(&lm);
    Ok(out)
}

pub fn extract_features(
    seq: &FrameSequence,
    faces: Option<&FaceSidecar>,
    cfg: &FeatureConfig,
) -> Result<FeatureVector26> {
    cfg.validate()?;
    let meta = seq.meta();
    if let Some(sc) = faces {
        if sc.counts.len() != meta.frame_count {
            return Err(FeatureError::SidecarMismatch(format!(
                "{} face counts for {} frames of {}",
                sc.counts.len(),
                meta.frame_count,
                meta.id
            )));
        }
        if sc.video_id != meta.id {
            return Err(FeatureError::SidecarMismatch(format!(
                "sidecar is for {:?}, video is {:?}",
                sc.video_id, meta.id
            )));
        }
    }
    // temporal precondition checked up front so short clips fail fast
    let required = cfg.min_frames();
    if meta.frame_count < required {
        return Err(FeatureError::TooFewFrames {
            frames: meta.frame_count,
            required,
        });
    }

    let per_frame: Vec<[f64; 10]> = seq
        .frames()
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            let face = faces.map_or(0.0, |sc| sc.counts[t] as f64);
            per_frame_scalars(f, face, cfg)
        })
        .collect::<Result<_>>()?;

    let mut values = [0.0; FEATURE_COUNT];
    for k in 0..10 {
        let series: Vec<f64> = per_frame.iter().map(|row| row[k]).collect();
        values[2 * k] = mean(&series);
        values[2 * k + 1] = population_std(&series);
    }
    let volume = crate::media_io::to_gray(seq);
    values[20..].copy_from_slice(&temporal_band_features(&volume, cfg)?);
    Ok(FeatureVector26(values))
}

pub fn write_features_csv<W: Write>(out: W, rows: &[(String, FeatureVector26)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["video_id"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for (id, fv) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(fv.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

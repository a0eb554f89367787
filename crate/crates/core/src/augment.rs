//! Online training augmentation for MFF samples.
//!
//! Every geometric transform is drawn once per sample and applied to every
//! channel of every MFF in it, so RGB and flow planes stay registered. Flow
//! planes are resampled as scalar images; only the horizontal flip touches
//! flow values (it negates `u`).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MffError, Result};
use crate::mff_builder::{MffSample, MotionFusedFrame};
use crate::plane::Plane;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticConfig {
    /// Maximum displacement in pixels.
    pub alpha: f64,
    /// Std of the smoothing Gaussian in pixels.
    pub sigma: f64,
    pub prob: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig {
            alpha: 15.0,
            sigma: 20.0,
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Crop edge as a fraction of the shorter image side; width and height
    /// are drawn independently from this set.
    pub scales: Vec<f64>,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            scales: vec![1.0, 0.875, 0.75, 0.66],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    /// Relative time-scaling range, `c ~ U[1 - scale, 1 + scale]`.
    pub scale: f64,
    pub jitter_frames: usize,
    pub enabled: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            scale: 0.10,
            jitter_frames: 2,
            enabled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Relative scaling range, `s ~ U[1 - r, 1 + r]`.
    pub scale_range: f64,
    pub rotation_range_deg: f64,
    pub elastic: ElasticConfig,
    pub crop: CropConfig,
    pub hflip_prob: f64,
    pub temporal: TemporalConfig,
    /// Network input edge length.
    pub final_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: 0.20,
            rotation_range_deg: 20.0,
            elastic: ElasticConfig::default(),
            crop: CropConfig::default(),
            hflip_prob: 0.0,
            temporal: TemporalConfig::default(),
            final_size: 32,
        }
    }
}

impl AugmentConfig {
    /// Every random transform disabled; only the final resize remains.
    pub fn disabled(final_size: usize) -> Self {
        AugmentConfig {
            scale_range: 0.0,
            rotation_range_deg: 0.0,
            elastic: ElasticConfig {
                prob: 0.0,
                ..ElasticConfig::default()
            },
            crop: CropConfig { scales: vec![1.0] },
            hflip_prob: 0.0,
            temporal: TemporalConfig {
                enabled: false,
                ..TemporalConfig::default()
            },
            final_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(MffError::config("augment", key, msg));
        if !(0.0..1.0).contains(&self.scale_range) {
            return bad("scale_range", "must be in [0, 1)");
        }
        if !(self.rotation_range_deg >= 0.0 && self.rotation_range_deg <= 180.0) {
            return bad("rotation_range_deg", "must be in [0, 180]");
        }
        if !(0.0..=1.0).contains(&self.elastic.prob) {
            return Err(MffError::config("augment.elastic", "prob", "must be in [0, 1]"));
        }
        if !(self.elastic.alpha >= 0.0 && self.elastic.sigma > 0.0) {
            return Err(MffError::config("augment.elastic", "sigma", "needs alpha >= 0 and sigma > 0"));
        }
        if self.crop.scales.is_empty() || self.crop.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(MffError::config("augment.crop", "scales", "need a non-empty set in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob", "must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.temporal.scale) {
            return Err(MffError::config("augment.temporal", "scale", "must be in [0, 1)"));
        }
        if self.final_size == 0 {
            return bad("final_size", "must be >= 1");
        }
        Ok(())
    }
}

/// Applies one coordinate map to every plane of the sample. `map(x, y)`
/// returns the source position sampled for output pixel `(x, y)`.
fn remap_sample(sample: &MffSample, map: impl Fn(f32, f32) -> (f32, f32)) -> MffSample {
    let (w, h) = (sample.mffs[0].width(), sample.mffs[0].height());
    let coords: Vec<(f32, f32)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x as f32, y as f32)))
        .map(|(x, y)| map(x, y))
        .collect();
    sample.map_mffs(|mff| {
        mff.map_channels(|_, plane| {
            let src = plane.to_float::<f32>();
            let data = coords.iter().map(|&(sx, sy)| src.sample_clamped(sx, sy)).collect();
            Plane::new(w, h, data).expect("same shape").to_codes()
        })
    })
}

/// Scaling by `s` and rotation by `theta_deg` about the image centre:
/// a point `p` moves to `c + s·R(θ)(p − c)`.
pub fn scale_rotate(sample: &MffSample, s: f64, theta_deg: f64) -> MffSample {
    if s == 1.0 && theta_deg == 0.0 {
        return sample.clone();
    }
    let (w, h) = (sample.mffs[0].width(), sample.mffs[0].height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = theta_deg.to_radians().sin_cos();
    remap_sample(sample, |x, y| {
        let dx = (x as f64 - cx) / s;
        let dy = (y as f64 - cy) / s;
        ((cx + cos * dx + sin * dy) as f32, (cy - sin * dx + cos * dy) as f32)
    })
}

pub fn random_scale_rotate(sample: &MffSample, rng: &mut Rng, cfg: &AugmentConfig) -> MffSample {
    let s = if cfg.scale_range > 0.0 {
        rng.random_range(1.0 - cfg.scale_range..=1.0 + cfg.scale_range)
    } else {
        1.0
    };
    let theta = if cfg.rotation_range_deg > 0.0 {
        rng.random_range(-cfg.rotation_range_deg..=cfg.rotation_range_deg)
    } else {
        0.0
    };
    scale_rotate(sample, s, theta)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with edge clamping.
fn blur(field: &Plane<f64>, kernel: &[f64]) -> Plane<f64> {
    let (w, h) = field.dims();
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = Plane::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * field.get(clamp(x as isize + k as isize - r, w), y))
            .sum::<f64>()
    });
    Plane::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * horiz.get(x, clamp(y as isize + k as isize - r, h)))
            .sum()
    })
}

/// Smoothed random displacement field, each component scaled so its
/// largest magnitude is `alpha`.
pub fn elastic_field(width: usize, height: usize, alpha: f64, sigma: f64, rng: &mut Rng) -> (Plane<f64>, Plane<f64>) {
    let kernel = gaussian_kernel(sigma);
    let mut component = || {
        let noise = Plane::from_fn(width, height, |_, _| rng.random_range(-1.0..=1.0));
        let smooth = blur(&noise, &kernel);
        let max = smooth.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if max > 0.0 { alpha / max } else { 0.0 };
        smooth.map(|v| v * gain)
    };
    let dx = component();
    let dy = component();
    (dx, dy)
}

pub fn elastic_with_field(sample: &MffSample, dx: &Plane<f64>, dy: &Plane<f64>) -> MffSample {
    let w = dx.width();
    remap_sample(sample, |x, y| {
        let i = y as usize * w + x as usize;
        (x + dx.data()[i] as f32, y + dy.data()[i] as f32)
    })
}

pub fn elastic_deform(sample: &MffSample, rng: &mut Rng, cfg: &AugmentConfig) -> MffSample {
    let e = &cfg.elastic;
    if !(rng.random::<f64>() < e.prob) {
        return sample.clone();
    }
    let (w, h) = (sample.mffs[0].width(), sample.mffs[0].height());
    let (dx, dy) = elastic_field(w, h, e.alpha, e.sigma, rng);
    elastic_with_field(sample, &dx, &dy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropAnchor {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropAnchor {
    pub const ALL: [CropAnchor; 5] = [
        CropAnchor::TopLeft,
        CropAnchor::TopRight,
        CropAnchor::BottomLeft,
        CropAnchor::BottomRight,
        CropAnchor::Center,
    ];

    /// Top-left corner of a `cw`×`ch` crop in a `w`×`h` image.
    pub fn origin(self, w: usize, h: usize, cw: usize, ch: usize) -> (usize, usize) {
        let (mx, my) = (w - cw, h - ch);
        match self {
            CropAnchor::TopLeft => (0, 0),
            CropAnchor::TopRight => (mx, 0),
            CropAnchor::BottomLeft => (0, my),
            CropAnchor::BottomRight => (mx, my),
            CropAnchor::Center => (mx / 2, my / 2),
        }
    }
}

fn resize_codes(plane: &Plane<u8>, size: usize) -> Plane<u8> {
    if plane.dims() == (size, size) {
        return plane.clone();
    }
    plane.to_float::<f32>().resize_bilinear(size, size).to_codes()
}

/// Crops `cw`×`ch` at `anchor` (clamped to the image) and resizes to
/// `out`×`out`.
pub fn crop_resize(sample: &MffSample, cw: usize, ch: usize, anchor: CropAnchor, out: usize) -> MffSample {
    let (w, h) = (sample.mffs[0].width(), sample.mffs[0].height());
    let (cw, ch) = (cw.clamp(1, w), ch.clamp(1, h));
    let (x0, y0) = anchor.origin(w, h, cw, ch);
    sample.map_mffs(|mff| mff.map_channels(|_, p| resize_codes(&p.crop(x0, y0, cw, ch), out)))
}

/// Crop size for the scale pair `(sw, sh)` relative to the shorter side.
pub fn crop_dims(w: usize, h: usize, sw: f64, sh: f64) -> (usize, usize) {
    let short = w.min(h) as f64;
    (
        ((sw * short).round() as usize).clamp(1, w),
        ((sh * short).round() as usize).clamp(1, h),
    )
}

pub fn random_crop_jitter(sample: &MffSample, rng: &mut Rng, cfg: &AugmentConfig) -> MffSample {
    let (w, h) = (sample.mffs[0].width(), sample.mffs[0].height());
    let scales = &cfg.crop.scales;
    let sw = scales[rng.random_range(0..scales.len())];
    let sh = scales[rng.random_range(0..scales.len())];
    let anchor = CropAnchor::ALL[rng.random_range(0..CropAnchor::ALL.len())];
    let (cw, ch) = crop_dims(w, h, sw, sh);
    crop_resize(sample, cw, ch, anchor, cfg.final_size)
}

/// Mirrors every plane left-right and negates horizontal flow (`c → 255 − c`).
pub fn flip(sample: &MffSample) -> MffSample {
    sample.map_mffs(|mff| {
        mff.map_channels(|c, p| {
            let m = p.mirror_horizontal();
            if MotionFusedFrame::is_u_channel(c) {
                m.map(|code| 255 - code)
            } else {
                m
            }
        })
    })
}

pub fn horizontal_flip(sample: &MffSample, rng: &mut Rng, cfg: &AugmentConfig) -> MffSample {
    if cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob {
        flip(sample)
    } else {
        sample.clone()
    }
}

/// Rounds half away from zero after snapping to a 1e-9 grid, so values that
/// are ties in exact arithmetic (e.g. `1.1 · −25 + 30`) round as ties.
fn round_tolerant(x: f64) -> f64 {
    ((x * 1e9).round() / 1e9).round()
}

/// `t ← clamp(round(c·(t − F/2) + F/2) + j, 0, F−1)`, then sorted.
pub fn temporal_with(frame_count: usize, selected: &[usize], c: f64, jitter: &[i64]) -> Vec<usize> {
    let half = frame_count as f64 / 2.0;
    let last = frame_count as i64 - 1;
    let mut out: Vec<usize> = selected
        .iter()
        .zip(jitter.iter().chain(std::iter::repeat(&0)))
        .map(|(&t, &j)| {
            let scaled = round_tolerant(c * (t as f64 - half) + half) as i64;
            (scaled + j).clamp(0, last) as usize
        })
        .collect();
    out.sort_unstable();
    out
}

pub fn temporal_augment(frame_count: usize, selected: &[usize], rng: &mut Rng, cfg: &AugmentConfig) -> Vec<usize> {
    let t = &cfg.temporal;
    if !t.enabled {
        return selected.to_vec();
    }
    let c = if t.scale > 0.0 {
        rng.random_range(1.0 - t.scale..=1.0 + t.scale)
    } else {
        1.0
    };
    let j = t.jitter_frames as i64;
    let jitter: Vec<i64> = selected.iter().map(|_| rng.random_range(-j..=j)).collect();
    temporal_with(frame_count, selected, c, &jitter)
}

/// Spatial training pipeline: scale/rotate → elastic → crop → flip → resize.
pub fn augment_train(sample: &MffSample, rng: &mut Rng, cfg: &AugmentConfig) -> MffSample {
    let s = random_scale_rotate(sample, rng, cfg);
    let s = elastic_deform(&s, rng, cfg);
    let s = random_crop_jitter(&s, rng, cfg);
    let s = horizontal_flip(&s, rng, cfg);
    resize_sample(&s, cfg.final_size)
}

pub fn resize_sample(sample: &MffSample, size: usize) -> MffSample {
    sample.map_mffs(|mff| mff.map_channels(|_, p| resize_codes(p, size)))
}

/// Evaluation transform: full-frame centre crop, then resize.
pub fn eval_transform(sample: &MffSample, final_size: usize) -> MffSample {
    let (w, h) = (sample.mffs[0].width(), sample.mffs[0].height());
    let (cw, ch) = crop_dims(w, h, 1.0, 1.0);
    crop_resize(sample, cw, ch, CropAnchor::Center, final_size)
}

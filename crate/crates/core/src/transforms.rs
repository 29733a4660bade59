//! Image preprocessing and augmentation.
//!
//! Preprocessing resizes a decoded radiograph to a backbone's expected input
//! shape, replicates grayscale across three channels, and applies the
//! backbone's scaling convention. Augmentation composes a random horizontal
//! flip with an affine warp (shear, zoom, bounded rotation), all driven by an
//! explicit seed so batches are reproducible.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleRecord;
use crate::util::mix_seed;

pub type TransformResult<T> = Result<T, TransformError>;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("empty image (zero width or height)")]
    EmptyImage,
    #[error("failed to load image for record `{id}`: {source}")]
    ImageLoad {
        id: String,
        #[source]
        source: image::ImageError,
    },
    #[error("empty batch")]
    EmptyBatch,
}

/// Pixel scaling applied after resizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "channel_means")]
pub enum Scaling {
    /// Map `[0, 255]` to `[0, 1]`.
    UnitInterval,
    /// Map `[0, 255]` to `[-1, 1]`.
    Symmetric,
    /// Subtract fixed per-channel means, leaving values on the 0-255 scale.
    MeanSubtracted([f64; 3]),
}

/// Target input shape and scaling for one backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_height: usize,
    pub target_width: usize,
    pub scaling: Scaling,
}

/// All preprocessed images carry three channels; grayscale input is replicated.
pub const CHANNEL_COUNT: usize = 3;

impl PreprocessSpec {
    pub fn new(target_height: usize, target_width: usize, scaling: Scaling) -> Self {
        assert!(target_height > 0 && target_width > 0, "target sizes must be positive");
        Self {
            target_height,
            target_width,
            scaling,
        }
    }
}

/// Border fill for pixels an affine warp maps outside the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum FillPolicy {
    /// Replicate the nearest edge pixel.
    Nearest,
    /// Use a constant value.
    Constant(f64),
}

/// Augmentation magnitudes. All-zero magnitudes with `flip_probability` 0
/// denote the identity transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Probability of a horizontal flip.
    pub flip_probability: f64,
    /// Maximum horizontal shear angle, radians.
    pub shear_max: f64,
    /// Zoom factor range around 1.0; factors above 1 magnify.
    pub zoom_range: (f64, f64),
    /// Maximum rotation either way, degrees.
    pub rotation_max: f64,
    pub fill_policy: FillPolicy,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            shear_max: 0.2,
            zoom_range: (0.8, 1.2),
            rotation_max: 10.0,
            fill_policy: FillPolicy::Nearest,
        }
    }
}

impl AugmentParams {
    /// The identity transform: nothing is flipped or warped.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            shear_max: 0.0,
            zoom_range: (1.0, 1.0),
            rotation_max: 0.0,
            fill_policy: FillPolicy::Nearest,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(format!("flip_probability {} outside [0,1]", self.flip_probability));
        }
        if self.shear_max < 0.0 || self.rotation_max < 0.0 {
            return Err("shear_max and rotation_max must be non-negative".into());
        }
        let (lo, hi) = self.zoom_range;
        if !(lo <= 1.0 && 1.0 <= hi) {
            return Err(format!("zoom_range [{lo}, {hi}] must bracket 1.0"));
        }
        Ok(())
    }
}

/// Preprocessing plus augmentation settings for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub preprocess: PreprocessSpec,
    pub augment: AugmentParams,
}

fn decode_to_array(img: &image::DynamicImage) -> TransformResult<Array3<f64>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(TransformError::EmptyImage);
    }
    let mut out = Array3::<f64>::zeros((h, w, CHANNEL_COUNT));
    match img.color() {
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 => {
            let gray = img.to_luma8();
            for (x, y, p) in gray.enumerate_pixels() {
                let v = f64::from(p.0[0]);
                for c in 0..CHANNEL_COUNT {
                    out[[y as usize, x as usize, c]] = v;
                }
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..CHANNEL_COUNT {
                    out[[y as usize, x as usize, c]] = f64::from(p.0[c]);
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with center-aligned sampling. Constant inputs stay constant.
fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, ch) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let mut out = Array3::<f64>::zeros((out_h, out_w, ch));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..ch {
                let top = src[[y0, x0, c]] * (1.0 - wx) + src[[y0, x1, c]] * wx;
                let bot = src[[y1, x0, c]] * (1.0 - wx) + src[[y1, x1, c]] * wx;
                out[[i, j, c]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn apply_scaling(arr: &mut Array3<f64>, scaling: Scaling) {
    match scaling {
        Scaling::UnitInterval => arr.mapv_inplace(|v| v / 255.0),
        Scaling::Symmetric => arr.mapv_inplace(|v| v / 127.5 - 1.0),
        Scaling::MeanSubtracted(means) => {
            for mut lane in arr.lanes_mut(ndarray::Axis(2)) {
                for (c, v) in lane.iter_mut().enumerate() {
                    *v -= means[c];
                }
            }
        }
    }
}

/// Decode, resize, replicate channels, and scale one image.
///
/// Output shape is exactly `(target_height, target_width, 3)`.
pub fn preprocess_image(
    img: &image::DynamicImage,
    spec: &PreprocessSpec,
) -> TransformResult<Array3<f64>> {
    let raw = decode_to_array(img)?;
    let mut resized = resize_bilinear(&raw, spec.target_height, spec.target_width);
    apply_scaling(&mut resized, spec.scaling);
    Ok(resized)
}

fn flip_horizontal(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, ch) = img.dim();
    let mut out = Array3::<f64>::zeros((h, w, ch));
    for i in 0..h {
        for j in 0..w {
            for c in 0..ch {
                out[[i, j, c]] = img[[i, w - 1 - j, c]];
            }
        }
    }
    out
}

fn bilinear_sample(img: &Array3<f64>, y: f64, x: f64, c: usize, fill: FillPolicy) -> f64 {
    let (h, w, _) = img.dim();
    let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
    match fill {
        FillPolicy::Nearest => {
            let y = y.clamp(0.0, hm);
            let x = x.clamp(0.0, wm);
            let y0 = y.floor() as usize;
            let x0 = x.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = y - y0 as f64;
            let wx = x - x0 as f64;
            let top = img[[y0, x0, c]] * (1.0 - wx) + img[[y0, x1, c]] * wx;
            let bot = img[[y1, x0, c]] * (1.0 - wx) + img[[y1, x1, c]] * wx;
            top * (1.0 - wy) + bot * wy
        }
        FillPolicy::Constant(v) => {
            let at = |yy: i64, xx: i64| -> f64 {
                if yy < 0 || xx < 0 || yy as usize >= h || xx as usize >= w {
                    v
                } else {
                    img[[yy as usize, xx as usize, c]]
                }
            };
            let y0 = y.floor();
            let x0 = x.floor();
            let wy = y - y0;
            let wx = x - x0;
            let (y0, x0) = (y0 as i64, x0 as i64);
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx;
            let bot = at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx;
            top * (1.0 - wy) + bot * wy
        }
    }
}

/// Apply a seeded random flip plus affine warp. Output shape equals input
/// shape, and the result is fully determined by `(image, params, seed)`.
///
/// Draws happen in a fixed order (flip, rotation, shear, zoom); magnitudes of
/// zero skip their draw and contribute the identity.
pub fn augment_image(image: &Array3<f64>, params: &AugmentParams, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let flip = params.flip_probability > 0.0 && rng.random::<f64>() < params.flip_probability;
    let rotation_deg = if params.rotation_max > 0.0 {
        rng.random_range(-params.rotation_max..=params.rotation_max)
    } else {
        0.0
    };
    let shear = if params.shear_max > 0.0 {
        rng.random_range(-params.shear_max..=params.shear_max)
    } else {
        0.0
    };
    let (zlo, zhi) = params.zoom_range;
    let zoom = if zlo < zhi { rng.random_range(zlo..=zhi) } else { zlo };

    let base = if flip { flip_horizontal(image) } else { image.clone() };
    if rotation_deg == 0.0 && shear == 0.0 && zoom == 1.0 {
        return base;
    }

    // Forward map about the image center: p' = C + z * R(theta) * Sh(s) * (p - C).
    // Output pixels sample the source through the inverse.
    let theta = rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let sh = shear.tan();
    // M = z * R * Sh, acting on (x, y).
    let m = [
        [zoom * cos, zoom * (cos * sh - sin)],
        [zoom * sin, zoom * (sin * sh + cos)],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];

    let (h, w, ch) = base.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::<f64>::zeros((h, w, ch));
    for i in 0..h {
        for j in 0..w {
            let dx = j as f64 - cx;
            let dy = i as f64 - cy;
            let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
            let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
            for c in 0..ch {
                out[[i, j, c]] = bilinear_sample(&base, sy, sx, c, params.fill_policy);
            }
        }
    }
    out
}

/// Whether a batch is being prepared for training (augmented) or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Train,
    Eval,
}

/// Load, preprocess, and (in train mode) augment a batch of records.
///
/// Targets align index-for-index with `records`. Eval mode is deterministic
/// and never augments; train mode derives one augmentation seed per sample
/// from `seed` and the sample's position.
pub fn make_batch(
    records: &[SampleRecord],
    spec: &PreprocessSpec,
    params: &AugmentParams,
    mode: BatchMode,
    seed: u64,
) -> TransformResult<(Array4<f64>, Vec<f64>)> {
    if records.is_empty() {
        return Err(TransformError::EmptyBatch);
    }
    let (h, w) = (spec.target_height, spec.target_width);
    let mut images = Array4::<f64>::zeros((records.len(), h, w, CHANNEL_COUNT));
    let mut targets = Vec::with_capacity(records.len());

    for (k, record) in records.iter().enumerate() {
        let img = image::open(&record.image_path).map_err(|e| TransformError::ImageLoad {
            id: record.id.clone(),
            source: e,
        })?;
        let mut arr = preprocess_image(&img, spec)?;
        if mode == BatchMode::Train {
            arr = augment_image(&arr, params, mix_seed(seed, k as u64));
        }
        images
            .index_axis_mut(ndarray::Axis(0), k)
            .assign(&arr);
        targets.push(f64::from(record.bone_age));
    }
    Ok((images, targets))
}

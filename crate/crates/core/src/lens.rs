//! Thin-lens spectrogram augmentation.
//!
//! A spectrogram image is treated as an object placed at distance `u` in
//! front of a convex lens of focal length `F`. The thin-lens law
//! `1/u + 1/v = 1/F` gives the image distance `v` and the magnification
//! `M = v/u = F/(u - F)`. Sampling `x` distances in `(F, 2F)`, the single
//! distance `2F`, and `y` distances beyond `2F` yields `x` enlarged copies,
//! one unit-scale copy and `y` reduced copies of every spectrogram.
//!
//! The scaled content is drawn onto a canvas with the original dimensions:
//! an enlarged copy loses its borders and a reduced copy is surrounded by
//! black padding. Only then is every copy resized to 256×256. Scaling
//! without the fixed canvas would be undone by the final resize and all
//! copies would be identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_io::AudioClip;
use crate::dsp::{self, to_u8, GrayImage, StftConfig};
use crate::error::{Error, Result};

/// Side length of every augmented image.
pub const OUTPUT_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Grid,
    SeededUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensConfig {
    pub focal_length: f64,
    /// Number of enlarged copies, taken from `(F, 2F)`.
    pub x: usize,
    /// Number of reduced copies, taken from `(2F, u_max·F]`.
    pub y: usize,
    /// Farthest object distance in units of `F`.
    pub u_max: f64,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for LensConfig {
    fn default() -> Self {
        Self {
            focal_length: 1.0,
            x: 3,
            y: 4,
            u_max: 4.0,
            sampling: Sampling::Grid,
            seed: 0,
        }
    }
}

impl LensConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return Err(Error::InvalidConfig("focal_length must be positive".into()));
        }
        if !(self.u_max > 2.0 && self.u_max.is_finite()) {
            return Err(Error::InvalidConfig("u_max must exceed 2".into()));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.x + self.y + 1
    }

    /// Hex SHA-256 of the canonical JSON encoding; identifies the config in
    /// augmentation sidecars.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("LensConfig serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Thin-lens magnification for an object at distance `u`.
pub fn magnification(u: f64, focal: f64) -> Result<f64> {
    if !(u > focal) {
        return Err(Error::VirtualImage { u, focal });
    }
    Ok(focal / (u - focal))
}

/// Object distances in output order: enlarging side ascending, then `2F`,
/// then the reducing side ascending.
pub fn sample_distances(cfg: &LensConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let f = cfg.focal_length;
    let mut out = Vec::with_capacity(cfg.image_count());
    match cfg.sampling {
        Sampling::Grid => {
            out.extend((1..=cfg.x).map(|i| f * (1.0 + i as f64 / (cfg.x + 1) as f64)));
            out.push(2.0 * f);
            out.extend((1..=cfg.y).map(|j| f * (2.0 + j as f64 * (cfg.u_max - 2.0) / cfg.y as f64)));
        }
        Sampling::SeededUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut near: Vec<f64> = (0..cfg.x).map(|_| open_uniform(&mut rng, f, 2.0 * f)).collect();
            let mut far: Vec<f64> = (0..cfg.y)
                .map(|_| open_uniform(&mut rng, 2.0 * f, cfg.u_max * f))
                .collect();
            near.sort_by(f64::total_cmp);
            far.sort_by(f64::total_cmp);
            out.extend(near);
            out.push(2.0 * f);
            out.extend(far);
        }
    }
    Ok(out)
}

fn open_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

/// Bilinear sample at a continuous position; coordinates must lie in
/// `[0, w-1] × [0, h-1]`.
fn sample_bilinear(img: &GrayImage, sx: f64, sy: f64) -> f64 {
    let x0 = (sx.floor() as usize).min(img.width - 1);
    let y0 = (sy.floor() as usize).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let p = |x, y| img.get(x, y) as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Scales the content by `m` about the image centre on a canvas of the
/// original size. Pixels that map outside the source are black.
pub fn apply_lens(img: &GrayImage, m: f64) -> Result<GrayImage> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidConfig(format!("magnification must be positive, got {m}")));
    }
    if img.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    const EDGE_TOL: f64 = 1e-9;
    let cx = (img.width - 1) as f64 / 2.0;
    let cy = (img.height - 1) as f64 / 2.0;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let sy = cy + (y as f64 - cy) / m;
        for x in 0..img.width {
            let sx = cx + (x as f64 - cx) / m;
            let inside = sx >= -EDGE_TOL && sx <= max_x + EDGE_TOL && sy >= -EDGE_TOL && sy <= max_y + EDGE_TOL;
            pixels.push(if inside {
                to_u8(sample_bilinear(img, sx.clamp(0.0, max_x), sy.clamp(0.0, max_y)))
            } else {
                0
            });
        }
    }
    GrayImage::new(img.width, img.height, pixels)
}

/// Bilinear resize with corner-aligned pixel centres: output pixel `0` and
/// `w-1` sample exactly the first and last source columns.
pub fn resize_bilinear(img: &GrayImage, w: usize, h: usize) -> Result<GrayImage> {
    if img.is_empty() || w == 0 || h == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {}x{} to {w}x{h}",
            img.width, img.height
        )));
    }
    if img.width == w && img.height == h {
        return Ok(img.clone());
    }
    let axis = |out_len: usize, in_len: usize| -> Vec<f64> {
        if out_len == 1 {
            vec![(in_len - 1) as f64 / 2.0]
        } else {
            let step = (in_len - 1) as f64 / (out_len - 1) as f64;
            (0..out_len).map(|i| i as f64 * step).collect()
        }
    };
    let xs = axis(w, img.width);
    let ys = axis(h, img.height);
    let mut pixels = Vec::with_capacity(w * h);
    for &sy in &ys {
        for &sx in &xs {
            pixels.push(to_u8(sample_bilinear(img, sx, sy)));
        }
    }
    GrayImage::new(w, h, pixels)
}

/// One lens-augmented copy of a spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedImage {
    pub image: GrayImage,
    pub magnification: f64,
    pub object_distance: f64,
    pub parent_id: String,
    pub augmentation_index: usize,
}

/// Augments an already rendered spectrogram image.
pub fn augment_image(image: &GrayImage, parent_id: &str, lens_cfg: &LensConfig) -> Result<Vec<AugmentedImage>> {
    sample_distances(lens_cfg)?
        .into_iter()
        .enumerate()
        .map(|(k, u)| {
            let m = magnification(u, lens_cfg.focal_length)?;
            let lensed = apply_lens(image, m)?;
            Ok(AugmentedImage {
                image: resize_bilinear(&lensed, OUTPUT_SIZE, OUTPUT_SIZE)?,
                magnification: m,
                object_distance: u,
                parent_id: parent_id.to_string(),
                augmentation_index: k,
            })
        })
        .collect()
}

/// Full augmentation of one clip: STFT, dB rendering, then one image per
/// sampled lens distance, each resized to 256×256.
pub fn daarip(clip: &AudioClip, stft_cfg: &StftConfig, lens_cfg: &LensConfig) -> Result<Vec<AugmentedImage>> {
    let (image, _) = dsp::spectrogram_image(clip, stft_cfg, dsp::DEFAULT_DB_FLOOR)?;
    augment_image(&image, &clip.source_id, lens_cfg)
}

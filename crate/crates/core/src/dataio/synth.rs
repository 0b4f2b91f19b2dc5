//! Synthetic nested-structure images: an elliptical disk inside a ring on background,
//! with a smooth intensity gradient and Gaussian noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{Manifest, Record, Split};
use super::scribble::{synth_scribbles, ScribbleConfig};
use super::formats::{write_image, write_labels};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub num_labels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub scribbles: ScribbleConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 200,
            n_val: 40,
            n_test: 40,
            size: 64,
            num_labels: 3,
            noise_sigma: 0.08,
            seed: 0,
            scribbles: ScribbleConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.size % 8 != 0 {
            return Err(Error::Config(format!("synthetic size {} must be a positive multiple of 8", self.size)));
        }
        if self.num_labels != 3 {
            return Err(Error::Config("synthetic data has exactly 3 labels".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated image with its full mask.
pub fn synth_sample<R: Rng + ?Sized>(size: usize, noise_sigma: f64, rng: &mut R) -> (Image, LabelMap) {
    let s = size as f64;
    let cx = s * rng.random_range(0.4..0.6);
    let cy = s * rng.random_range(0.4..0.6);
    let ax = s * rng.random_range(0.22..0.32);
    let ay = s * rng.random_range(0.22..0.32);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let inner = rng.random_range(0.42..0.58);
    let (ct, st) = (theta.cos(), theta.sin());
    let means = [
        rng.random_range(0.10..0.25),
        rng.random_range(0.45..0.60),
        rng.random_range(0.75..0.90),
    ];
    let phi = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let slope = rng.random_range(-0.12..0.12);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");

    let mut labels = Vec::with_capacity(size * size);
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (ct * dx + st * dy) / ax;
            let v = (-st * dx + ct * dy) / ay;
            let r = (u * u + v * v).sqrt();
            let label = if r < inner {
                2u8
            } else if r < 1.0 {
                1
            } else {
                0
            };
            let gradient = slope * ((x as f64 / s - 0.5) * phi.cos() + (y as f64 / s - 0.5) * phi.sin());
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            labels.push(label);
            data.push((means[label as usize] + gradient + n).clamp(0.0, 1.0) as f32);
        }
    }
    (
        Image::new(size, size, data).expect("square image"),
        LabelMap::new(size, size, labels).expect("square mask"),
    )
}

/// Writes images, masks, scribbles and `manifest.csv` under `dir`.
pub fn synth_dataset(dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut records = Vec::new();
    let splits = [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val), (Split::Test, cfg.n_test)];
    for (split, n) in splits {
        for i in 0..n {
            let id = format!("{}{:04}", split.prefix(), i);
            let mut r = rng::stream(cfg.seed, &format!("synth/{id}"));
            let (image, mask) = synth_sample(cfg.size, cfg.noise_sigma, &mut r);
            let scribbles = synth_scribbles(&mask, cfg.num_labels, &cfg.scribbles, &mut r)?;
            let rec = Record {
                id: id.clone(),
                split,
                image: format!("images/{id}.f32r").into(),
                mask: Some(format!("masks/{id}.pgm").into()),
                scribbles: Some(format!("scribbles/{id}.pgm").into()),
                num_labels: cfg.num_labels,
            };
            write_image(&dir.join(&rec.image), &image)?;
            write_labels(&dir.join(rec.mask.as_ref().unwrap()), &mask)?;
            write_labels(&dir.join(rec.scribbles.as_ref().unwrap()), &scribbles)?;
            records.push(rec);
        }
    }
    let manifest = Manifest { records };
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

//! Deterministic class-structured texture corpus.
//!
//! Each class owns a brightness-ramp direction, a grating orientation and a
//! spatial frequency. Individual images jitter all three, draw a random
//! grating phase and contrast, shift brightness by source, and add
//! per-pixel uniform noise. Geometry is expressed in
//! normalized image coordinates, so the same record rendered at two
//! resolutions shows the same pattern.

use std::f64::consts::PI;

use rand::Rng;

use super::{apportion, CorpusManifest, ImageRecord, MixtureSpec, SourceTag};
use crate::error::{Error, Result};
use crate::rng;

const NOISE_HALF_WIDTH: f64 = 0.08;
const ORIENTATION_JITTER: f64 = 0.10;
const CYCLES_JITTER: f64 = 0.15;

pub fn build_synthetic_corpus(
    n_images: usize,
    mixture: &MixtureSpec,
    class_count: usize,
    image_side: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    if n_images < 1 {
        return Err(Error::domain("corpus needs at least one image"));
    }
    if class_count < 2 || n_images < class_count {
        return Err(Error::domain(format!(
            "need n_images >= class_count >= 2, got {n_images} images and {class_count} classes"
        )));
    }
    if image_side < 8 {
        return Err(Error::domain(format!("image side {image_side} < 8")));
    }

    let weights: Vec<f64> = mixture.entries().iter().map(|e| e.1).collect();
    let counts = apportion(n_images, &weights);

    let mut records = Vec::with_capacity(n_images);
    for (&(source, _), &count) in mixture.entries().iter().zip(&counts) {
        for j in 0..count {
            let k = records.len();
            let label = (k % class_count) as u32;
            let gen_seed = rng::derive_seed(seed, &[k as u64]);
            records.push(ImageRecord {
                id: format!("{source}-{j:06}"),
                source,
                width: image_side,
                height: image_side,
                label: Some(label),
                gen_seed: Some(gen_seed),
                pixels: render_synthetic(label, class_count, source, gen_seed, image_side),
            });
        }
    }

    Ok(CorpusManifest {
        records,
        mixture: mixture.clone(),
        class_count,
        channels: 1,
    })
}

/// Renders one single-channel `side x side` texture.
pub fn render_synthetic(
    label: u32,
    class_count: usize,
    source: SourceTag,
    seed: u64,
    side: usize,
) -> Vec<f32> {
    let mut shape = rng::rng_for(seed, &[0]);
    let ramp_dir = 2.0 * PI * f64::from(label) / class_count as f64
        + shape.gen_range(-ORIENTATION_JITTER..=ORIENTATION_JITTER);
    let ramp = shape.gen_range(0.25..0.40);
    let theta = PI * f64::from(label) / class_count as f64
        + shape.gen_range(-ORIENTATION_JITTER..=ORIENTATION_JITTER);
    let cycles = 2.0 + f64::from(label % 3) + shape.gen_range(-CYCLES_JITTER..=CYCLES_JITTER);
    let phase = shape.gen_range(0.0..2.0 * PI);
    let contrast = shape.gen_range(0.05..0.12);
    let base = 0.5 + 0.04 * ((source.ordinal() % 4) as f64 - 1.5);

    let mut noise = rng::rng_for(seed, &[1, side as u64]);
    let (c, s) = (theta.cos(), theta.sin());
    let (rc, rs) = (ramp_dir.cos(), ramp_dir.sin());
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        let v = (y as f64 + 0.5) / side as f64;
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64;
            let wave = (2.0 * PI * cycles * (u * c + v * s) + phase).cos();
            let slope = (u - 0.5) * rc + (v - 0.5) * rs;
            let value = base
                + ramp * slope
                + contrast * wave
                + noise.gen_range(-NOISE_HALF_WIDTH..=NOISE_HALF_WIDTH);
            pixels.push(value.clamp(0.0, 1.0) as f32);
        }
    }
    pixels
}

//! Patch tokenization and random masking.

use rand::seq::index;

use super::tensor::Matrix;
use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::rng;

/// Masking ratio used for pretraining.
pub const MASK_RATIO: f64 = 0.8;

/// Splits an interleaved row-major image into square patches, in
/// row-major patch order. Each row of the result is one patch flattened as
/// `(patch_row, patch_col, channel)`.
pub fn patchify(
    pixels: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    patch_size: usize,
) -> Result<Matrix> {
    check_geometry(pixels.len(), width, height, channels, patch_size)?;
    let (gw, gh) = (width / patch_size, height / patch_size);
    let dim = patch_size * patch_size * channels;
    let mut out = Matrix::zeros(gw * gh, dim);
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut k = 0;
            for y in 0..patch_size {
                let src = ((py * patch_size + y) * width + px * patch_size) * channels;
                let len = patch_size * channels;
                row[k..k + len].copy_from_slice(&pixels[src..src + len]);
                k += len;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Matrix,
    width: usize,
    height: usize,
    channels: usize,
    patch_size: usize,
) -> Result<Vec<f64>> {
    check_geometry(
        width * height * channels,
        width,
        height,
        channels,
        patch_size,
    )?;
    let (gw, gh) = (width / patch_size, height / patch_size);
    if patches.rows != gw * gh || patches.cols != patch_size * patch_size * channels {
        return Err(Error::domain(format!(
            "{}x{} patch matrix does not tile a {width}x{height}x{channels} image",
            patches.rows, patches.cols
        )));
    }
    let mut pixels = vec![0.0; width * height * channels];
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            let mut k = 0;
            for y in 0..patch_size {
                let dst = ((py * patch_size + y) * width + px * patch_size) * channels;
                let len = patch_size * channels;
                pixels[dst..dst + len].copy_from_slice(&row[k..k + len]);
                k += len;
            }
        }
    }
    Ok(pixels)
}

pub fn patchify_record(record: &ImageRecord, channels: usize, patch_size: usize) -> Result<Matrix> {
    let pixels: Vec<f64> = record.pixels.iter().map(|&v| f64::from(v)).collect();
    patchify(&pixels, record.width, record.height, channels, patch_size)
}

fn check_geometry(
    len: usize,
    width: usize,
    height: usize,
    channels: usize,
    patch_size: usize,
) -> Result<()> {
    if patch_size == 0
        || width % patch_size != 0
        || height % patch_size != 0
        || width == 0
        || height == 0
    {
        return Err(Error::domain(format!(
            "{width}x{height} image is not divisible into {patch_size}px patches"
        )));
    }
    if len != width * height * channels {
        return Err(Error::domain(format!(
            "pixel buffer has {len} values, expected {}",
            width * height * channels
        )));
    }
    Ok(())
}

/// Indices of hidden patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    masked: Vec<usize>,
    total: usize,
}

impl MaskSet {
    /// Builds a mask from arbitrary indices (sorted and deduplicated here).
    pub fn new(mut masked: Vec<usize>, total: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= total) {
            return Err(Error::domain(format!(
                "mask index out of range for {total} patches"
            )));
        }
        Ok(MaskSet { masked, total })
    }

    /// Nothing hidden.
    pub fn empty(total: usize) -> Self {
        MaskSet {
            masked: Vec::new(),
            total,
        }
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.total).filter(|i| !self.is_masked(*i)).collect()
    }
}

/// Number of patches hidden out of `total`: `round(ratio * total)` capped so
/// at least one patch stays visible.
pub fn masked_count(total: usize, mask_ratio: f64) -> usize {
    ((mask_ratio * total as f64).round() as usize).min(total.saturating_sub(1))
}

/// Uniform random mask without replacement.
pub fn sample_mask(total_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskSet> {
    if total_patches == 0 {
        return Err(Error::domain("mask over zero patches"));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::domain(format!(
            "mask ratio {mask_ratio} not in [0,1)"
        )));
    }
    let k = masked_count(total_patches, mask_ratio);
    let mut rng = rng::rng_for(seed, &[0x3a5c]);
    let masked = index::sample(&mut rng, total_patches, k).into_vec();
    MaskSet::new(masked, total_patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_by_four_into_two_by_two() {
        let pixels: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patchify(&pixels, 4, 4, 1, 2).unwrap();
        assert_eq!((p.rows, p.cols), (4, 4));
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn whole_image_patch() {
        let pixels: Vec<f64> = (0..12).map(|v| f64::from(v) / 12.0).collect();
        let p = patchify(&pixels, 2, 2, 3, 2).unwrap();
        assert_eq!(p.rows, 1);
        assert_eq!(p.row(0), pixels.as_slice());
    }

    #[test]
    fn indivisible_rejected() {
        assert!(patchify(&[0.0; 25], 5, 5, 1, 2).is_err());
        assert!(patchify(&[0.0; 15], 4, 4, 1, 2).is_err());
    }

    #[test]
    fn mask_counts() {
        assert_eq!(sample_mask(10, MASK_RATIO, 1).unwrap().masked().len(), 8);
        assert_eq!(sample_mask(1, MASK_RATIO, 1).unwrap().masked().len(), 0);
        let a = sample_mask(16, MASK_RATIO, 42).unwrap();
        assert_eq!(a, sample_mask(16, MASK_RATIO, 42).unwrap());
        assert_eq!(a.masked().len(), 13);
        assert_eq!(a.visible().len(), 3);
        assert!(sample_mask(4, 1.0, 0).is_err());
        assert!(sample_mask(0, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(
            g in 1usize..5, p in 1usize..5, ch in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let side = g * p;
            let mut rng = rng::rng_for(seed, &[]);
            let pixels: Vec<f64> = (0..side * side * ch).map(|_| rng.gen::<f64>()).collect();
            let patches = patchify(&pixels, side, side, ch, p).unwrap();
            let back = unpatchify(&patches, side, side, ch, p).unwrap();
            prop_assert_eq!(back, pixels);
        }

        #[test]
        fn mask_is_sorted_subset(total in 1usize..300, seed in any::<u64>()) {
            let m = sample_mask(total, MASK_RATIO, seed).unwrap();
            prop_assert!(m.masked().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.masked().iter().all(|&i| i < total));
            prop_assert_eq!(m.masked().len() + m.visible().len(), total);
        }
    }
}

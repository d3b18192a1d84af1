//! Model architecture and the four-step size ladder.

use serde::{Deserialize, Serialize};

use super::params::MaeLayout;
use crate::error::{Error, Result};

/// Hidden width of every MLP is this multiple of the block width.
pub const MLP_RATIO: usize = 2;

/// Patch side used by every ladder entry.
pub const LADDER_PATCH: usize = 4;

/// Allowed span of `parameter_count(TOY-D) / parameter_count(TOY-A)`.
pub const LADDER_RATIO_RANGE: (f64, f64) = (25.0, 31.0);
const LADDER_RATIO_TARGET: f64 = 28.0;

pub const LADDER_NAMES: [&str; 4] = ["TOY-A", "TOY-B", "TOY-C", "TOY-D"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaeModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub image_side: usize,
    pub channels: usize,
}

impl MaeModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("decoder_dim", self.decoder_dim),
            ("decoder_depth", self.decoder_depth),
            ("image_side", self.image_side),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = counts.iter().find(|c| c.1 == 0) {
            return Err(Error::domain(format!(
                "model config field {name} must be >= 1"
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::domain(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::domain(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.decoder_dim % self.heads != 0 {
            return Err(Error::domain(format!(
                "decoder_dim {} not divisible by {} heads",
                self.decoder_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Length of one flattened patch vector.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Exact number of scalar parameters of a model.
pub fn parameter_count(config: &MaeModelConfig) -> usize {
    MaeLayout::new(config).total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub config: MaeModelConfig,
}

/// Four model sizes, smallest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeLadder {
    pub entries: Vec<NamedConfig>,
}

impl SizeLadder {
    pub fn get(&self, name: &str) -> Option<&MaeModelConfig> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.config)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// `parameter_count(largest) / parameter_count(smallest)`.
    pub fn span(&self) -> f64 {
        let first = parameter_count(&self.entries[0].config);
        let last = parameter_count(&self.entries[self.entries.len() - 1].config);
        last as f64 / first as f64
    }
}

fn toy(image_side: usize, embed_dim: usize, depth: usize, heads: usize) -> MaeModelConfig {
    MaeModelConfig {
        patch_size: LADDER_PATCH,
        embed_dim,
        depth,
        heads,
        decoder_dim: 8,
        decoder_depth: 1,
        image_side,
        channels: 1,
    }
}

/// The desk-scale ladder for single-channel `image_side` images.
///
/// TOY-A..TOY-C are fixed; TOY-D's width and depth are chosen per
/// resolution (positional tables grow with the patch count) to put the
/// ladder span as close to 28x as the search allows.
pub fn size_ladder(image_side: usize) -> Result<SizeLadder> {
    if image_side < 2 * LADDER_PATCH || image_side % LADDER_PATCH != 0 {
        return Err(Error::domain(format!(
            "ladder needs a side that is a multiple of {LADDER_PATCH} and at least {}",
            2 * LADDER_PATCH
        )));
    }
    let a = toy(image_side, 8, 1, 2);
    let b = toy(image_side, 16, 2, 2);
    let c = toy(image_side, 32, 2, 4);
    let base = parameter_count(&a) as f64;

    let mut best: Option<(f64, MaeModelConfig)> = None;
    for embed in (32..=128).step_by(8) {
        for depth in 1..=8 {
            let cand = toy(image_side, embed, depth, 4);
            let ratio = parameter_count(&cand) as f64 / base;
            let miss = (ratio - LADDER_RATIO_TARGET).abs();
            if best.as_ref().map_or(true, |(m, _)| miss < *m) {
                best = Some((miss, cand));
            }
        }
    }
    let (_, d) = best.expect("search space is non-empty");

    let ladder = SizeLadder {
        entries: LADDER_NAMES
            .iter()
            .zip([a, b, c, d])
            .map(|(n, config)| NamedConfig {
                name: (*n).to_string(),
                config,
            })
            .collect(),
    };
    let span = ladder.span();
    if !(LADDER_RATIO_RANGE.0..=LADDER_RATIO_RANGE.1).contains(&span) {
        return Err(Error::domain(format!(
            "no ladder with a {LADDER_RATIO_TARGET}x span exists at {image_side}px (best {span:.2})"
        )));
    }
    Ok(ladder)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_span_and_order() {
        for side in [8, 16, 24, 32, 48, 64] {
            let ladder = size_ladder(side).unwrap();
            let span = ladder.span();
            assert!((25.0..=31.0).contains(&span), "{side}px span {span}");
            let counts: Vec<usize> = ladder
                .entries
                .iter()
                .map(|e| parameter_count(&e.config))
                .collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
            for e in &ladder.entries {
                e.config.validate().unwrap();
            }
        }
    }

    #[test]
    fn ladder_rejects_bad_sides() {
        assert!(size_ladder(4).is_err());
        assert!(size_ladder(18).is_err());
    }

    #[test]
    fn validation() {
        let good = toy(16, 8, 1, 2);
        good.validate().unwrap();
        assert!(MaeModelConfig {
            image_side: 18,
            ..good
        }
        .validate()
        .is_err());
        assert!(MaeModelConfig { heads: 3, ..good }.validate().is_err());
        assert!(MaeModelConfig { depth: 0, ..good }.validate().is_err());
        assert_eq!(good.num_patches(), 16);
        assert_eq!(good.patch_dim(), 16);
    }
}

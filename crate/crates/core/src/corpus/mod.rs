//! Image corpus data model, synthetic corpus generation and stratified
//! subset sampling.

mod apportion;
mod io;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

pub use apportion::{apportion, apportion_counts};
pub use io::{
    load_manifest, manifest_fingerprint, save_manifest, MANIFEST_FILE, META_FILE, PIXELS_FILE,
};
pub use synth::{build_synthetic_corpus, render_synthetic};

/// Tolerance on the sum of mixture proportions.
pub const MIXTURE_SUM_TOL: f64 = 1e-9;

/// Origin dataset of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceTag {
    ImageNet,
    CelebA,
    Ade20k,
    Cifar10,
    Synthetic(u32),
}

impl SourceTag {
    /// Stable small integer used for per-source styling and seeding.
    pub fn ordinal(self) -> u64 {
        match self {
            SourceTag::ImageNet => 0,
            SourceTag::CelebA => 1,
            SourceTag::Ade20k => 2,
            SourceTag::Cifar10 => 3,
            SourceTag::Synthetic(n) => 4 + u64::from(n),
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::ImageNet => f.write_str("IMAGENET"),
            SourceTag::CelebA => f.write_str("CELEBA"),
            SourceTag::Ade20k => f.write_str("ADE20K"),
            SourceTag::Cifar10 => f.write_str("CIFAR10"),
            SourceTag::Synthetic(n) => write!(f, "SYNTHETIC-{n}"),
        }
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IMAGENET" => Ok(SourceTag::ImageNet),
            "CELEBA" => Ok(SourceTag::CelebA),
            "ADE20K" => Ok(SourceTag::Ade20k),
            "CIFAR10" => Ok(SourceTag::Cifar10),
            other => other
                .strip_prefix("SYNTHETIC-")
                .and_then(|n| n.parse().ok())
                .map(SourceTag::Synthetic)
                .ok_or_else(|| Error::format("source tag", other)),
        }
    }
}

impl Serialize for SourceTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SourceTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Declared per-source proportions. Order is significant: it fixes the
/// record layout of generated corpora and the tie-break order of the
/// apportionment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureEntry>", into = "Vec<MixtureEntry>")]
pub struct MixtureSpec {
    entries: Vec<(SourceTag, f64)>,
}

#[derive(Serialize, Deserialize)]
struct MixtureEntry {
    source: SourceTag,
    proportion: f64,
}

impl TryFrom<Vec<MixtureEntry>> for MixtureSpec {
    type Error = Error;

    fn try_from(v: Vec<MixtureEntry>) -> Result<Self> {
        MixtureSpec::new(v.into_iter().map(|e| (e.source, e.proportion)).collect())
    }
}

impl From<MixtureSpec> for Vec<MixtureEntry> {
    fn from(m: MixtureSpec) -> Self {
        m.entries
            .into_iter()
            .map(|(source, proportion)| MixtureEntry { source, proportion })
            .collect()
    }
}

impl MixtureSpec {
    pub fn new(entries: Vec<(SourceTag, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::domain("mixture has no sources"));
        }
        let mut seen = HashSet::new();
        for &(tag, p) in &entries {
            if !seen.insert(tag) {
                return Err(Error::domain(format!("source {tag} listed twice")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!(
                    "proportion of {tag} is {p}, not in [0,1]"
                )));
            }
        }
        let sum: f64 = entries.iter().map(|e| e.1).sum();
        if (sum - 1.0).abs() > MIXTURE_SUM_TOL {
            return Err(Error::domain(format!("proportions sum to {sum}, not 1")));
        }
        Ok(MixtureSpec { entries })
    }

    /// ImageNet 0.500, CelebA 0.315, ADE20K 0.135, CIFAR-10 0.050.
    pub fn standard() -> Self {
        MixtureSpec {
            entries: vec![
                (SourceTag::ImageNet, 0.500),
                (SourceTag::CelebA, 0.315),
                (SourceTag::Ade20k, 0.135),
                (SourceTag::Cifar10, 0.050),
            ],
        }
    }

    pub fn single(tag: SourceTag) -> Self {
        MixtureSpec {
            entries: vec![(tag, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(SourceTag, f64)] {
        &self.entries
    }

    pub fn sources(&self) -> impl Iterator<Item = SourceTag> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn proportion(&self, tag: SourceTag) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == tag).map(|e| e.1)
    }
}

/// One image. Pixels are row-major, channel-interleaved, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub source: SourceTag,
    pub width: usize,
    pub height: usize,
    pub label: Option<u32>,
    pub gen_seed: Option<u64>,
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<ImageRecord>,
    pub mixture: MixtureSpec,
    pub class_count: usize,
    pub channels: usize,
}

impl CorpusManifest {
    /// Checks the structural invariants: unique ids, sources drawn from the
    /// declared mixture, pixel buffers of the right size and range.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::domain("manifest declares zero channels"));
        }
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::domain(format!("duplicate record id {}", r.id)));
            }
            if self.mixture.proportion(r.source).is_none() {
                return Err(Error::domain(format!(
                    "record {} has source {} outside the declared mixture",
                    r.id, r.source
                )));
            }
            if r.pixels.len() != r.width * r.height * self.channels {
                return Err(Error::domain(format!(
                    "record {} has {} pixel values, expected {}",
                    r.id,
                    r.pixels.len(),
                    r.width * r.height * self.channels
                )));
            }
            if r.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::domain(format!(
                    "record {} has intensities outside [0,1]",
                    r.id
                )));
            }
            if let Some(l) = r.label {
                if l as usize >= self.class_count {
                    return Err(Error::domain(format!(
                        "record {} label {l} >= class count {}",
                        r.id, self.class_count
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Common square side of every record, if there is one.
    pub fn image_side(&self) -> Option<usize> {
        let first = self.records.first()?;
        let side = first.width;
        self.records
            .iter()
            .all(|r| r.width == side && r.height == side)
            .then_some(side)
    }

    /// Record count per source, in declared mixture order.
    pub fn source_counts(&self) -> Vec<(SourceTag, usize)> {
        let mut counts: Vec<(SourceTag, usize)> = self.mixture.sources().map(|t| (t, 0)).collect();
        for r in &self.records {
            match counts.iter_mut().find(|c| c.0 == r.source) {
                Some(c) => c.1 += 1,
                None => counts.push((r.source, 1)),
            }
        }
        counts
    }

    /// Labels of every record; errors if any record is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                r.label
                    .map(|l| l as usize)
                    .ok_or_else(|| Error::domain(format!("record {} has no label", r.id)))
            })
            .collect()
    }

    /// Re-renders a synthetic manifest at another square resolution. Ids,
    /// sources, labels and generator seeds are preserved.
    pub fn render_at(&self, side: usize) -> Result<CorpusManifest> {
        if self.image_side() == Some(side) {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::domain(
                "only single-channel synthetic corpora can be re-rendered",
            ));
        }
        let records = self
            .records
            .iter()
            .map(|r| match (r.label, r.gen_seed) {
                (Some(label), Some(seed)) => Ok(ImageRecord {
                    width: side,
                    height: side,
                    pixels: render_synthetic(label, self.class_count, r.source, seed, side),
                    ..r.clone()
                }),
                _ => Err(Error::domain(format!(
                    "record {} is not synthetic and cannot be rendered at {side}px",
                    r.id
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(CorpusManifest {
            records,
            mixture: self.mixture.clone(),
            class_count: self.class_count,
            channels: self.channels,
        })
    }
}

/// A stochastic subset request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub seed: u64,
    pub repeat_index: u32,
}

/// Number of records a subset of `fraction` of `n` contains.
pub fn subset_size(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!(
            "subset fraction {fraction} not in (0,1]"
        )));
    }
    let m = (fraction * n as f64).round() as usize;
    if m == 0 {
        return Err(Error::domain(format!(
            "fraction {fraction} of {n} records rounds to an empty subset"
        )));
    }
    Ok(m)
}

/// Draws a stratified subset: each source contributes its largest-remainder
/// share of `round(fraction * N)`, chosen uniformly without replacement from
/// a stream keyed on `(seed, repeat_index, source)`. Relative order of the
/// input is preserved.
pub fn sample_subset(manifest: &CorpusManifest, spec: &SubsetSpec) -> Result<CorpusManifest> {
    if manifest.is_empty() {
        return Err(Error::domain("cannot sample from an empty manifest"));
    }
    let m = subset_size(manifest.len(), spec.fraction)?;
    if spec.fraction == 1.0 {
        return Ok(manifest.clone());
    }

    let counts = manifest.source_counts();
    let shares = apportion_counts(m, &counts.iter().map(|c| c.1).collect::<Vec<_>>());

    let mut keep = vec![false; manifest.len()];
    for (s, ((tag, _), &share)) in counts.iter().zip(&shares).enumerate() {
        let members: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.source == *tag)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng::rng_for(
            spec.seed,
            &[u64::from(spec.repeat_index), s as u64, tag.ordinal()],
        );
        for pick in index::sample(&mut rng, members.len(), share) {
            keep[members[pick]] = true;
        }
    }

    Ok(CorpusManifest {
        records: manifest
            .records
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect(),
        mixture: manifest.mixture.clone(),
        class_count: manifest.class_count,
        channels: manifest.channels,
    })
}

/// Observed per-source proportions of a manifest.
pub fn empirical_mixture(manifest: &CorpusManifest) -> Result<MixtureSpec> {
    if manifest.is_empty() {
        return Err(Error::domain("empirical mixture of an empty manifest"));
    }
    let n = manifest.len() as f64;
    let entries = manifest
        .source_counts()
        .into_iter()
        .filter(|c| c.1 > 0)
        .map(|(t, c)| (t, c as f64 / n))
        .collect();
    MixtureSpec::new(entries)
}

//! Classification accuracy of pretrained encoders under two protocols:
//! a ridge linear probe on frozen features, and joint fine-tuning of the
//! encoder and a linear head on 2% of the labels.

mod finetune;
mod probe;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::apportion_counts;
use crate::error::{Error, Result};
use crate::mae::{manifest_patches, MaeModel, MaeModelConfig, ParameterStore};
use crate::rng;
use crate::CorpusManifest;

pub use finetune::{
    finetune_two_percent, label_subset, FinetuneOptions, FinetuneOutcome, HeadInit,
};
pub use probe::{fit_ridge_head, linear_probe, probe_on_split, LinearHead};

/// Share of a manifest held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.2;
/// Share of labels used by the fine-tuning protocol.
pub const FINETUNE_LABEL_FRACTION: f64 = 0.02;
pub const DEFAULT_RIDGE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtocolKind {
    NoFinetune,
    Finetune2Pct,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 2] = [ProtocolKind::NoFinetune, ProtocolKind::Finetune2Pct];

    pub fn protocol(self) -> EvalProtocol {
        EvalProtocol {
            kind: self,
            label_fraction: match self {
                ProtocolKind::NoFinetune => 1.0,
                ProtocolKind::Finetune2Pct => FINETUNE_LABEL_FRACTION,
            },
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::NoFinetune => "NO_FINETUNE",
            ProtocolKind::Finetune2Pct => "FINETUNE_2PCT",
        })
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NO_FINETUNE" => Ok(ProtocolKind::NoFinetune),
            "FINETUNE_2PCT" => Ok(ProtocolKind::Finetune2Pct),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

impl Serialize for ProtocolKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProtocolKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub kind: ProtocolKind,
    pub label_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_pct: f64,
    pub protocol: EvalProtocol,
    pub n_eval: usize,
    pub seed: u64,
}

impl EvalReport {
    pub(crate) fn from_counts(
        correct: usize,
        n_eval: usize,
        protocol: EvalProtocol,
        seed: u64,
    ) -> Self {
        EvalReport {
            accuracy_pct: 100.0 * correct as f64 / n_eval as f64,
            protocol,
            n_eval,
            seed,
        }
    }
}

/// Disjoint training/evaluation index sets over a labeled manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Seeded class-stratified split holding out `round(eval_fraction * N)`
/// records; each class gives up its largest-remainder share.
pub fn stratified_split(labels: &[usize], eval_fraction: f64, seed: u64) -> Result<Split> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::domain(format!(
            "eval fraction {eval_fraction} not in (0,1)"
        )));
    }
    let n_eval = (eval_fraction * labels.len() as f64).round() as usize;
    if n_eval == 0 || n_eval >= labels.len() {
        return Err(Error::domain(format!(
            "eval fraction {eval_fraction} of {} records leaves an empty side",
            labels.len()
        )));
    }
    let by_class = class_members(labels);
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let shares = apportion_counts(n_eval, &counts);
    let mut is_eval = vec![false; labels.len()];
    for (k, (members, &share)) in by_class.iter().zip(&shares).enumerate() {
        let mut r = rng::rng_for(seed, &[0x5b1e, k as u64]);
        for pick in index::sample(&mut r, members.len(), share) {
            is_eval[members[pick]] = true;
        }
    }
    let (eval, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| is_eval[i]);
    Ok(Split { train, eval })
}

/// Member indices of each class `0..=max(labels)`.
pub(crate) fn class_members(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Mean-pooled encoder latents of every record, all patches visible.
pub fn extract_features(
    params: &ParameterStore,
    config: &MaeModelConfig,
    manifest: &CorpusManifest,
) -> Result<Vec<Vec<f64>>> {
    if !params.is_finite() {
        return Err(Error::domain(
            "encoder parameters contain non-finite values",
        ));
    }
    params.check_matches(config)?;
    let model = MaeModel::new(config)?;
    let visible: Vec<usize> = (0..config.num_patches()).collect();
    manifest_patches(manifest, config)?
        .iter()
        .map(|p| Ok(model.encode(params, p, &visible)?.mean_rows()))
        .collect()
}

/// Index of the largest score; ties go to the lowest index.
pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

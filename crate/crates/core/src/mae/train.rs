//! Plain minibatch SGD pretraining.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::MaeModelConfig;
use super::model::MaeModel;
use super::params::ParameterStore;
use super::patch::{patchify_record, sample_mask, MaskSet, MASK_RATIO};
use super::tensor::Matrix;
use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Mean reconstruction loss of each epoch, first epoch first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub epoch_means: Vec<f64>,
}

impl LossTrace {
    pub fn last(&self) -> Option<f64> {
        self.epoch_means.last().copied()
    }

    /// CSV with header `epoch,mean_loss`; epochs are numbered from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "mean_loss"])?;
        for (e, l) in self.epoch_means.iter().enumerate() {
            w.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Patch matrices of every record of a manifest, checked against `config`.
pub(crate) fn manifest_patches(
    manifest: &CorpusManifest,
    config: &MaeModelConfig,
) -> Result<Vec<Matrix>> {
    if manifest.channels != config.channels {
        return Err(Error::domain(format!(
            "manifest has {} channels, model expects {}",
            manifest.channels, config.channels
        )));
    }
    manifest
        .records
        .iter()
        .map(|r| {
            if r.width != config.image_side || r.height != config.image_side {
                return Err(Error::domain(format!(
                    "record {} is {}x{}, model expects {}px images",
                    r.id, r.width, r.height, config.image_side
                )));
            }
            patchify_record(r, config.channels, config.patch_size)
        })
        .collect()
}

/// The fixed pretraining mask of one record.
pub fn record_mask(record_id: &str, total_patches: usize, seed: u64) -> Result<MaskSet> {
    sample_mask(
        total_patches,
        MASK_RATIO,
        rng::derive_seed(seed, &[rng::label_coord(record_id)]),
    )
}

/// Trains `params` on every record of `manifest`.
///
/// Each record keeps one mask for the whole run, keyed on the schedule seed
/// and the record id. Epoch order is a seeded shuffle; batch gradients are
/// averaged over the batch. Epoch means are summed in manifest order, so the
/// trace does not depend on the shuffle.
pub fn train(
    mut params: ParameterStore,
    config: &MaeModelConfig,
    manifest: &CorpusManifest,
    schedule: &TrainSchedule,
) -> Result<(ParameterStore, LossTrace)> {
    let model = MaeModel::new(config)?;
    params.check_matches(config)?;
    if manifest.is_empty() {
        return Err(Error::domain("training manifest is empty"));
    }
    if schedule.batch_size == 0 {
        return Err(Error::domain("batch size must be >= 1"));
    }
    if !schedule.learning_rate.is_finite() || schedule.learning_rate < 0.0 {
        return Err(Error::domain(format!(
            "learning rate {} is not a finite non-negative number",
            schedule.learning_rate
        )));
    }

    let patches = manifest_patches(manifest, config)?;
    let masks = manifest
        .records
        .iter()
        .map(|r| record_mask(&r.id, config.num_patches(), schedule.seed))
        .collect::<Result<Vec<_>>>()?;

    let n = patches.len();
    let mut trace = LossTrace::default();
    let mut losses = vec![0.0; n];
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..schedule.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::rng_for(schedule.seed, &[0xe90c, epoch as u64]));
        for (batch, idx) in order.chunks(schedule.batch_size).enumerate() {
            grad.fill(0.0);
            let scale = 1.0 / idx.len() as f64;
            for &i in idx {
                let loss =
                    model.accumulate_gradient(&params, &patches[i], &masks[i], scale, &mut grad)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                losses[i] = loss;
            }
            for (p, g) in params.values.iter_mut().zip(&grad) {
                *p -= schedule.learning_rate * g;
            }
        }
        trace
            .epoch_means
            .push(losses.iter().sum::<f64>() / n as f64);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_synthetic_corpus, MixtureSpec};
    use crate::mae::size_ladder;

    fn setup(n: usize) -> (MaeModelConfig, CorpusManifest) {
        let ladder = size_ladder(16).unwrap();
        let config = *ladder.get("TOY-A").unwrap();
        let corpus = build_synthetic_corpus(n, &MixtureSpec::standard(), 4, 16, 2).unwrap();
        (config, corpus)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (config, corpus) = setup(24);
        let init = ParameterStore::init(&config, 1).unwrap();
        let schedule = TrainSchedule {
            epochs: 3,
            batch_size: 5,
            learning_rate: 0.0,
            seed: 4,
        };
        let (after, trace) = train(init.clone(), &config, &corpus, &schedule).unwrap();
        assert_eq!(after, init);
        assert_eq!(trace.epoch_means.len(), 3);
        assert!(trace.epoch_means.iter().all(|&l| l == trace.epoch_means[0]));
    }

    #[test]
    fn training_reduces_loss() {
        let (config, corpus) = setup(64);
        let init = ParameterStore::init(&config, 1).unwrap();
        let schedule = TrainSchedule {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 4,
        };
        let (_, trace) = train(init, &config, &corpus, &schedule).unwrap();
        assert!(
            trace.last().unwrap() < trace.epoch_means[0],
            "{:?}",
            trace.epoch_means
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (config, corpus) = setup(16);
        let schedule = TrainSchedule {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.05,
            seed: 9,
        };
        let run = || {
            train(
                ParameterStore::init(&config, 3).unwrap(),
                &config,
                &corpus,
                &schedule,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let (config, corpus) = setup(16);
        let schedule = TrainSchedule {
            epochs: 5,
            batch_size: 2,
            learning_rate: 1e6,
            seed: 9,
        };
        let err = train(
            ParameterStore::init(&config, 3).unwrap(),
            &config,
            &corpus,
            &schedule,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let (config, _) = setup(4);
        let small = build_synthetic_corpus(8, &MixtureSpec::standard(), 2, 8, 0).unwrap();
        let schedule = TrainSchedule {
            epochs: 1,
            batch_size: 2,
            learning_rate: 0.1,
            seed: 0,
        };
        assert!(train(
            ParameterStore::init(&config, 0).unwrap(),
            &config,
            &small,
            &schedule
        )
        .is_err());
    }

    #[test]
    fn trace_csv() {
        let trace = LossTrace {
            epoch_means: vec![0.5, 0.25],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,mean_loss\n1,0.5\n2,0.25\n"
        );
    }
}

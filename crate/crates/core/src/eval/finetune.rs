//! Low-label fine-tuning: a linear head on the mean-pooled encoder output,
//! trained jointly with the encoder by SGD on a class-stratified 2% label
//! subset, cross-entropy loss.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::probe::{fit_ridge_head, LinearHead};
use super::{
    argmax, class_members, stratified_split, EvalReport, ProtocolKind, Split, EVAL_FRACTION,
    FINETUNE_LABEL_FRACTION,
};
use crate::corpus::{apportion_counts, CorpusManifest};
use crate::error::{Error, Result};
use crate::mae::{manifest_patches, MaeModel, MaeModelConfig, Matrix, ParameterStore};
use crate::rng;

/// Head-initialization penalty. With roughly two labels per class the
/// near-interpolating 1e-4 probe penalty gives head weights large enough
/// that the first encoder updates wipe out the class signal.
pub const FINETUNE_HEAD_RIDGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum HeadInit {
    /// Ridge probe fitted on the label subset's initial features.
    RidgeOnSubset,
    /// Uniform Xavier-scaled weights drawn from the run seed.
    Seeded,
    Given(LinearHead),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Seed of the held-out evaluation split.
    pub split_seed: u64,
    pub eval_fraction: f64,
    pub ridge: f64,
    pub head_init: HeadInit,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            split_seed: 0,
            eval_fraction: EVAL_FRACTION,
            ridge: FINETUNE_HEAD_RIDGE,
            head_init: HeadInit::RidgeOnSubset,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub report: EvalReport,
    pub head: LinearHead,
    pub params: ParameterStore,
    /// Manifest indices of the labeled training examples.
    pub label_rows: Vec<usize>,
    pub split: Split,
}

/// Picks `round(0.02 * n_total)` labeled rows from `split.train`, stratified
/// by class with largest-remainder shares.
pub fn label_subset(
    labels: &[usize],
    split: &Split,
    n_total: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let n = (FINETUNE_LABEL_FRACTION * n_total as f64).round() as usize;
    if n < class_count {
        return Err(Error::domain(format!(
            "2% of {n_total} records is {n} labels, fewer than {class_count} classes"
        )));
    }
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let mut members = class_members(&train_labels);
    members.resize(class_count, Vec::new());
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let shares = apportion_counts(n, &counts);
    let mut rows = Vec::with_capacity(n);
    for (k, (m, &share)) in members.iter().zip(&shares).enumerate() {
        if share == 0 {
            return Err(Error::domain(format!(
                "2% label subset has no example of class {k}"
            )));
        }
        let mut r = rng::rng_for(seed, &[0xf172, k as u64]);
        rows.extend(
            index::sample(&mut r, m.len(), share)
                .iter()
                .map(|p| split.train[m[p]]),
        );
    }
    rows.sort_unstable();
    Ok(rows)
}

pub fn finetune_two_percent(
    params: &ParameterStore,
    config: &MaeModelConfig,
    manifest: &CorpusManifest,
    labels: &[usize],
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    if labels.len() != manifest.len() {
        return Err(Error::domain(format!(
            "{} labels for {} records",
            labels.len(),
            manifest.len()
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::domain("batch size must be >= 1"));
    }
    params.check_matches(config)?;
    let model = MaeModel::new(config)?;
    let split = stratified_split(labels, opts.eval_fraction, opts.split_seed)?;
    let label_rows = label_subset(labels, &split, manifest.len(), opts.seed)?;
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let patches = manifest_patches(manifest, config)?;
    let visible: Vec<usize> = (0..config.num_patches()).collect();

    let features_of = |p: &ParameterStore, rows: &[usize]| -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); patches.len()];
        for &r in rows {
            out[r] = model.encode(p, &patches[r], &visible)?.mean_rows();
        }
        Ok(out)
    };

    let mut head = match &opts.head_init {
        HeadInit::Given(h) => {
            if h.class_count() != class_count || h.weights.rows != config.embed_dim {
                return Err(Error::domain(
                    "supplied head does not match encoder width and class count",
                ));
            }
            h.clone()
        }
        HeadInit::RidgeOnSubset => {
            let feats = features_of(params, &label_rows)?;
            fit_ridge_head(&feats, labels, &label_rows, class_count, opts.ridge)?
        }
        HeadInit::Seeded => {
            let mut r = rng::rng_for(opts.seed, &[0x4ead]);
            let s = (6.0 / (config.embed_dim + class_count) as f64).sqrt();
            LinearHead {
                weights: Matrix::from_vec(
                    config.embed_dim,
                    class_count,
                    (0..config.embed_dim * class_count)
                        .map(|_| r.gen_range(-s..=s))
                        .collect(),
                ),
                bias: vec![0.0; class_count],
            }
        }
    };

    let mut params = params.clone();
    let mut grad = vec![0.0; params.len()];
    let mut gw = vec![0.0; head.weights.data.len()];
    let mut gb = vec![0.0; class_count];
    let mut order = label_rows.clone();
    for epoch in 0..opts.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::rng_for(opts.seed, &[0x7e57, epoch as u64]));
        for (batch, rows) in order.chunks(opts.batch_size).enumerate() {
            grad.fill(0.0);
            gw.fill(0.0);
            gb.fill(0.0);
            let scale = 1.0 / rows.len() as f64;
            for &r in rows {
                let loss = example_gradient(
                    &model,
                    &params,
                    &head,
                    &patches[r],
                    &visible,
                    labels[r],
                    scale,
                    (&mut grad, &mut gw, &mut gb),
                );
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
            }
            let lr = opts.learning_rate;
            for (p, g) in params.values.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            for (w, g) in head.weights.data.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, g) in head.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
    }

    let eval_features = features_of(&params, &split.eval)?;
    let correct = split
        .eval
        .iter()
        .filter(|&&i| argmax(&head.scores(&eval_features[i])) == labels[i])
        .count();
    let report = EvalReport::from_counts(
        correct,
        split.eval.len(),
        ProtocolKind::Finetune2Pct.protocol(),
        opts.seed,
    );
    Ok(FinetuneOutcome {
        report,
        head,
        params,
        label_rows,
        split,
    })
}

/// Cross-entropy of one example through the pooled encoder and head.
/// Accumulates `scale` times its gradient into the encoder, head-weight and
/// bias buffers and returns the unscaled loss.
#[allow(clippy::too_many_arguments)]
fn example_gradient(
    model: &MaeModel,
    params: &ParameterStore,
    head: &LinearHead,
    patches: &Matrix,
    visible: &[usize],
    label: usize,
    scale: f64,
    (grad, gw, gb): (&mut [f64], &mut [f64], &mut [f64]),
) -> f64 {
    let class_count = head.class_count();
    let (z, cache) = model.encode_cached(&params.values, patches, visible);
    let pooled = z.mean_rows();
    let mut probs = head.scores(&pooled);
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = probs.iter().map(|s| (s - max).exp()).sum();
    let loss = -(probs[label] - max - sum.ln());
    if !loss.is_finite() {
        return loss;
    }
    for s in probs.iter_mut() {
        *s = (*s - max).exp() / sum;
    }
    probs[label] -= 1.0;
    let dlogits: Vec<f64> = probs.iter().map(|p| p * scale).collect();

    let mut dpooled = vec![0.0; pooled.len()];
    for (i, (&f, dp)) in pooled.iter().zip(dpooled.iter_mut()).enumerate() {
        let wrow = &head.weights.data[i * class_count..(i + 1) * class_count];
        let grow = &mut gw[i * class_count..(i + 1) * class_count];
        for k in 0..class_count {
            grow[k] += f * dlogits[k];
            *dp += wrow[k] * dlogits[k];
        }
    }
    for (g, d) in gb.iter_mut().zip(&dlogits) {
        *g += d;
    }
    let inv_rows = 1.0 / z.rows as f64;
    let mut dz = Matrix::zeros(z.rows, z.cols);
    for t in 0..z.rows {
        for (o, d) in dz.row_mut(t).iter_mut().zip(&dpooled) {
            *o = d * inv_rows;
        }
    }
    model.encode_backward(&params.values, &cache, &dz, grad);
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_synthetic_corpus, MixtureSpec};
    use crate::eval::{extract_features, probe_on_split, DEFAULT_RIDGE};
    use crate::mae::size_ladder;
    use rand::SeedableRng;

    #[test]
    fn example_gradient_matches_finite_differences() {
        let config = MaeModelConfig {
            patch_size: 2,
            embed_dim: 4,
            depth: 2,
            heads: 2,
            decoder_dim: 2,
            decoder_depth: 1,
            image_side: 6,
            channels: 1,
        };
        let model = MaeModel::new(&config).unwrap();
        let mut params = ParameterStore::init(&config, 4).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for v in params.values.iter_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
        let n = config.num_patches();
        let patches = Matrix::from_vec(
            n,
            config.patch_dim(),
            (0..n * config.patch_dim()).map(|_| r.gen()).collect(),
        );
        let head = LinearHead {
            weights: Matrix::from_vec(4, 3, (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()),
            bias: vec![0.1, -0.2, 0.05],
        };
        let visible: Vec<usize> = (0..n).collect();
        let mut grad = vec![0.0; params.len()];
        let (mut gw, mut gb) = (vec![0.0; 12], vec![0.0; 3]);
        example_gradient(
            &model,
            &params,
            &head,
            &patches,
            &visible,
            1,
            1.0,
            (&mut grad, &mut gw, &mut gb),
        );
        let loss_at = |p: &ParameterStore| {
            let (mut g, mut w, mut b) = (vec![0.0; p.len()], vec![0.0; 12], vec![0.0; 3]);
            example_gradient(
                &model,
                p,
                &head,
                &patches,
                &visible,
                1,
                1.0,
                (&mut g, &mut w, &mut b),
            )
        };
        let h = 1e-5;
        for k in 0..params.len() {
            let orig = params.values[k];
            params.values[k] = orig + h;
            let up = loss_at(&params);
            params.values[k] = orig - h;
            let down = loss_at(&params);
            params.values[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "param {k}: {} vs {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn subset_size_and_stratification() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
        let split = stratified_split(&labels, EVAL_FRACTION, 1).unwrap();
        let rows = label_subset(&labels, &split, 1000, 2).unwrap();
        assert_eq!(rows.len(), 20);
        let mut per = [0; 5];
        for &r in &rows {
            per[labels[r]] += 1;
            assert!(!split.eval.contains(&r));
        }
        assert_eq!(per, [4; 5]);
    }

    #[test]
    fn too_few_labels_for_classes() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let split = stratified_split(&labels, EVAL_FRACTION, 1).unwrap();
        // 2% of 100 = 2 labels < 5 classes
        assert!(label_subset(&labels, &split, 100, 0).is_err());
    }

    #[test]
    fn missing_class_is_named() {
        // class 3 is tiny; its largest-remainder share of 4 labels is zero
        let mut labels: Vec<usize> = (0..200).map(|i| i % 3).collect();
        labels[0] = 3;
        let split = Split {
            train: (0..200).collect(),
            eval: vec![],
        };
        let err = label_subset(&labels, &split, 200, 0).unwrap_err();
        assert!(err.to_string().contains("class 3"), "{err}");
    }

    #[test]
    fn frozen_finetune_matches_probe() {
        let config = *size_ladder(8).unwrap().get("TOY-A").unwrap();
        let params = ParameterStore::init(&config, 5).unwrap();
        let corpus = build_synthetic_corpus(200, &MixtureSpec::standard(), 4, 8, 3).unwrap();
        let labels = corpus.labels().unwrap();
        let split = stratified_split(&labels, EVAL_FRACTION, 11).unwrap();
        let feats = extract_features(&params, &config, &corpus).unwrap();
        let (probe, head) = probe_on_split(&feats, &labels, &split, DEFAULT_RIDGE, 11).unwrap();

        let opts = FinetuneOptions {
            learning_rate: 0.0,
            epochs: 2,
            split_seed: 11,
            head_init: HeadInit::Given(head),
            ..FinetuneOptions::default()
        };
        let out = finetune_two_percent(&params, &config, &corpus, &labels, &opts).unwrap();
        assert_eq!(out.split, split);
        assert_eq!(out.report.accuracy_pct, probe.accuracy_pct);
        assert_eq!(out.params, params);
    }

    #[test]
    fn finetune_is_deterministic() {
        let config = *size_ladder(8).unwrap().get("TOY-A").unwrap();
        let params = ParameterStore::init(&config, 5).unwrap();
        let corpus = build_synthetic_corpus(200, &MixtureSpec::standard(), 2, 8, 3).unwrap();
        let labels = corpus.labels().unwrap();
        let opts = FinetuneOptions {
            epochs: 3,
            seed: 4,
            ..FinetuneOptions::default()
        };
        let a = finetune_two_percent(&params, &config, &corpus, &labels, &opts).unwrap();
        let b = finetune_two_percent(&params, &config, &corpus, &labels, &opts).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.params, b.params);
        assert_eq!(a.label_rows.len(), 4);
        assert!((0.0..=100.0).contains(&a.report.accuracy_pct));
    }
}

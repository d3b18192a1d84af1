//! Closed-form ridge regression onto one-hot targets.

use super::{argmax, stratified_split, EvalReport, ProtocolKind, Split};
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::mae::Matrix;

/// `scores = features * weights + bias`, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `feature_dim x class_count`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn scores(&self, features: &[f64]) -> Vec<f64> {
        let k = self.class_count();
        let mut out = self.bias.clone();
        for (i, &f) in features.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weights.data[i * k..(i + 1) * k]) {
                *o += f * w;
            }
        }
        out
    }

    /// Highest-scoring class, ties toward the lowest index.
    pub fn predict(&self, features: &[f64]) -> usize {
        argmax(&self.scores(features))
    }
}

/// Ridge regression of one-hot labels on `[features, 1]` over the rows
/// listed in `rows`. The penalty applies to the bias column too.
pub fn fit_ridge_head(
    features: &[Vec<f64>],
    labels: &[usize],
    rows: &[usize],
    class_count: usize,
    ridge: f64,
) -> Result<LinearHead> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::domain(format!(
            "ridge penalty {ridge} must be finite and >= 0"
        )));
    }
    let d = rows
        .first()
        .map(|&r| features[r].len())
        .ok_or_else(|| Error::domain("ridge fit over zero rows"))?;
    let n = d + 1;
    let mut gram = Matrix::zeros(n, n);
    let mut rhs = Matrix::zeros(n, class_count);
    let mut x = vec![0.0; n];
    for &r in rows {
        x[..d].copy_from_slice(&features[r]);
        x[d] = 1.0;
        for i in 0..n {
            for j in 0..n {
                gram.data[i * n + j] += x[i] * x[j];
            }
            rhs.data[i * class_count + labels[r]] += x[i];
        }
    }
    for i in 0..n {
        gram.data[i * n + i] += ridge;
    }
    let sol = solve_spd(&gram, &rhs).map_err(|e| match e {
        Error::Numeric(_) if ridge == 0.0 => {
            Error::Numeric("normal matrix is singular with ridge = 0; set ridge > 0".into())
        }
        other => other,
    })?;
    Ok(LinearHead {
        weights: Matrix::from_vec(d, class_count, sol.data[..d * class_count].to_vec()),
        bias: sol.data[d * class_count..].to_vec(),
    })
}

/// Fits a probe on `split.train` and scores it on `split.eval`.
pub fn probe_on_split(
    features: &[Vec<f64>],
    labels: &[usize],
    split: &Split,
    ridge: f64,
    seed: u64,
) -> Result<(EvalReport, LinearHead)> {
    if features.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let mut present: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::domain(
            "linear probe needs at least two classes in the training split",
        ));
    }
    if split.eval.is_empty() {
        return Err(Error::domain("empty evaluation split"));
    }
    let head = fit_ridge_head(features, labels, &split.train, class_count, ridge)?;
    let correct = split
        .eval
        .iter()
        .filter(|&&i| head.predict(&features[i]) == labels[i])
        .count();
    let report = EvalReport::from_counts(
        correct,
        split.eval.len(),
        ProtocolKind::NoFinetune.protocol(),
        seed,
    );
    Ok((report, head))
}

/// Frozen-feature evaluation: a seeded, class-stratified `eval_split`
/// fraction is held out, a ridge probe is fit on the rest.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    eval_split: f64,
    ridge: f64,
    seed: u64,
) -> Result<EvalReport> {
    let split = stratified_split(labels, eval_split, seed)?;
    Ok(probe_on_split(features, labels, &split, ridge, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_features_are_perfect() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let features: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..5).map(|k| if k == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = linear_probe(&features, &labels, 0.2, 1e-6, 1).unwrap();
        assert_eq!(r.accuracy_pct, 100.0);
        assert_eq!(r.n_eval, 10);
    }

    #[test]
    fn constant_features_predict_majority() {
        // balanced: every class ties, lowest index wins
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let features = vec![vec![0.3, -1.0]; 40];
        let r = linear_probe(&features, &labels, 0.2, 1e-4, 2).unwrap();
        assert_eq!(r.accuracy_pct, 25.0);

        // class 2 overrepresented in training
        let labels: Vec<usize> = (0..50).map(|i| if i < 20 { 2 } else { i % 3 }).collect();
        let split = Split {
            train: (0..40).collect(),
            eval: (40..50).collect(),
        };
        let (r, _) = probe_on_split(&vec![vec![1.0]; 50], &labels, &split, 1e-4, 0).unwrap();
        let share = (40..50).filter(|&i| labels[i] == 2).count() as f64 * 10.0;
        assert_eq!(r.accuracy_pct, share);
    }

    #[test]
    fn zero_ridge_singular_is_numeric_error() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let features = vec![vec![1.0, 1.0]; 20];
        let err = linear_probe(&features, &labels, 0.2, 0.0, 0).unwrap_err();
        assert!(
            matches!(err, Error::Numeric(ref m) if m.contains("ridge > 0")),
            "{err}"
        );
    }

    #[test]
    fn single_class_training_rejected() {
        let labels = vec![0usize; 10];
        let features = vec![vec![1.0]; 10];
        assert!(linear_probe(&features, &labels, 0.2, 1e-4, 0).is_err());
    }
}

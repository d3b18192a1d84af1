//! The log-affine accuracy law and its least-squares fit.
//!
//! Accuracy is modelled as `c * (ln i + a) * (ln ppi + b)` where `i` is the
//! data amount in thousands of images and `ppi` the input resolution. The
//! four-parameter raw form `(alpha_i ln i + beta_i)(alpha_ppi ln ppi + beta_ppi)`
//! has a one-dimensional gauge freedom, so fitting happens on `(c, a, b)`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::mae::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScalingParams {
    pub alpha_i: f64,
    pub beta_i: f64,
    pub alpha_ppi: f64,
    pub beta_ppi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalScalingParams {
    pub c: f64,
    pub a: f64,
    pub b: f64,
}

impl CanonicalScalingParams {
    pub fn new(c: f64, a: f64, b: f64) -> Self {
        Self { c, a, b }
    }

    fn to_array(self) -> [f64; 3] {
        [self.c, self.a, self.b]
    }

    fn from_array(p: [f64; 3]) -> Self {
        Self::new(p[0], p[1], p[2])
    }
}

impl RawScalingParams {
    pub fn predict(&self, i: f64, ppi: f64) -> Result<f64> {
        check_inputs(i, ppi)?;
        Ok((self.alpha_i * i.ln() + self.beta_i) * (self.alpha_ppi * ppi.ln() + self.beta_ppi))
    }

    /// Applies the gauge transformation that leaves every prediction unchanged.
    pub fn regauge(&self, t: f64) -> Self {
        Self {
            alpha_i: t * self.alpha_i,
            beta_i: t * self.beta_i,
            alpha_ppi: self.alpha_ppi / t,
            beta_ppi: self.beta_ppi / t,
        }
    }
}

/// One observed (data amount, resolution, accuracy) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    /// Thousands of images.
    pub i: f64,
    pub ppi: f64,
    pub accuracy_pct: f64,
}

impl ScalingPoint {
    pub fn new(i: f64, ppi: f64, accuracy_pct: f64) -> Self {
        Self {
            i,
            ppi,
            accuracy_pct,
        }
    }
}

fn check_inputs(i: f64, ppi: f64) -> Result<()> {
    if !(i > 0.0 && i.is_finite()) {
        return Err(Error::domain(format!(
            "data amount i must be positive and finite, got {i}"
        )));
    }
    if !(ppi > 0.0 && ppi.is_finite()) {
        return Err(Error::domain(format!(
            "resolution ppi must be positive and finite, got {ppi}"
        )));
    }
    Ok(())
}

/// Unclamped prediction in percent.
pub fn predict(params: &CanonicalScalingParams, i: f64, ppi: f64) -> Result<f64> {
    check_inputs(i, ppi)?;
    Ok(params.c * (i.ln() + params.a) * (ppi.ln() + params.b))
}

/// Display view of a prediction, limited to [0, 100].
pub fn clamp_pct(x: f64) -> f64 {
    x.clamp(0.0, 100.0)
}

pub fn canonicalize(raw: &RawScalingParams) -> Result<CanonicalScalingParams> {
    if raw.alpha_i == 0.0 || raw.alpha_ppi == 0.0 {
        return Err(Error::domain(format!(
            "cannot canonicalize with alpha_i = {} and alpha_ppi = {}",
            raw.alpha_i, raw.alpha_ppi
        )));
    }
    Ok(CanonicalScalingParams {
        c: raw.alpha_i * raw.alpha_ppi,
        a: raw.beta_i / raw.alpha_i,
        b: raw.beta_ppi / raw.alpha_ppi,
    })
}

/// Raw representative with `alpha_ppi = 1`.
pub fn raw_of(p: &CanonicalScalingParams) -> RawScalingParams {
    RawScalingParams {
        alpha_i: p.c,
        beta_i: p.c * p.a,
        alpha_ppi: 1.0,
        beta_ppi: p.b,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdentifiabilityDefect {
    TooFewPoints(usize),
    INotVaried,
    PpiNotVaried,
}

impl fmt::Display for IdentifiabilityDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewPoints(_) => f.write_str("need ≥ 3 points for 3 parameters"),
            Self::INotVaried => f.write_str("i not varied"),
            Self::PpiNotVaried => f.write_str("ppi not varied"),
        }
    }
}

fn distinct(values: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

pub fn check_identifiability(points: &[ScalingPoint]) -> Result<(), IdentifiabilityDefect> {
    if points.len() < 3 {
        return Err(IdentifiabilityDefect::TooFewPoints(points.len()));
    }
    if distinct(points.iter().map(|p| p.ppi)) < 2 {
        return Err(IdentifiabilityDefect::PpiNotVaried);
    }
    if distinct(points.iter().map(|p| p.i)) < 2 {
        return Err(IdentifiabilityDefect::INotVaried);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartGrid {
    pub c: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Default for StartGrid {
    fn default() -> Self {
        let ab = vec![-10.0, -5.0, -2.0, 0.0, 2.0, 5.0, 10.0];
        Self {
            c: vec![0.1, 1.0, 10.0, -0.1, -1.0, -10.0],
            a: ab.clone(),
            b: ab,
        }
    }
}

impl StartGrid {
    /// Starts in evaluation order (c outermost, b innermost).
    pub fn starts(&self) -> Vec<CanonicalScalingParams> {
        let mut out = Vec::with_capacity(self.c.len() * self.a.len() * self.b.len());
        for &c in &self.c {
            for &a in &self.a {
                for &b in &self.b {
                    out.push(CanonicalScalingParams::new(c, a, b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub starts: StartGrid,
    /// A run converges once an accepted step is shorter than this.
    pub tol: f64,
    pub max_iterations: usize,
    /// Search box: every run is confined to |c|, |a|, |b| <= bound.
    pub bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: StartGrid::default(),
            tol: 1e-10,
            max_iterations: 2000,
            bound: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(flatten)]
    pub params: CanonicalScalingParams,
    pub rmse: f64,
    pub n_points: usize,
    #[serde(skip)]
    pub start_count: usize,
    pub objective: f64,
    /// Some parameter sits on the search box; the data do not pin the
    /// optimum down inside it.
    #[serde(default)]
    pub at_bound: bool,
}

impl FitResult {
    pub fn predict(&self, i: f64, ppi: f64) -> Result<f64> {
        predict(&self.params, i, ppi)
    }
}

/// Signed residuals `predict - observed`.
pub fn residuals(params: &CanonicalScalingParams, points: &[ScalingPoint]) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|p| Ok(predict(params, p.i, p.ppi)? - p.accuracy_pct))
        .collect()
}

pub fn objective(params: &CanonicalScalingParams, points: &[ScalingPoint]) -> Result<f64> {
    Ok(residuals(params, points)?.iter().map(|r| r * r).sum())
}

/// `J^T r` for the residual vector, with J the Jacobian in (c, a, b).
pub fn gradient(params: &CanonicalScalingParams, points: &[ScalingPoint]) -> Result<[f64; 3]> {
    let mut g = [0.0; 3];
    for p in points {
        check_inputs(p.i, p.ppi)?;
        let (u, v) = (p.i.ln() + params.a, p.ppi.ln() + params.b);
        let r = params.c * u * v - p.accuracy_pct;
        g[0] += u * v * r;
        g[1] += params.c * v * r;
        g[2] += params.c * u * r;
    }
    Ok(g)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunEnd {
    Converged,
    NonFinite,
    Stalled,
    IterationCap,
}

struct Problem {
    logs: Vec<(f64, f64, f64)>,
}

impl Problem {
    fn objective(&self, p: &[f64; 3]) -> f64 {
        self.logs
            .iter()
            .map(|&(li, lp, y)| {
                let r = p[0] * (li + p[1]) * (lp + p[2]) - y;
                r * r
            })
            .sum()
    }

    /// Returns (J^T J, J^T r).
    fn normal_equations(&self, p: &[f64; 3]) -> ([[f64; 3]; 3], [f64; 3]) {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for &(li, lp, y) in &self.logs {
            let (u, v) = (li + p[1], lp + p[2]);
            let row = [u * v, p[0] * v, p[0] * u];
            let r = p[0] * u * v - y;
            for a in 0..3 {
                jtr[a] += row[a] * r;
                for b in 0..3 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        (jtj, jtr)
    }

    /// Parameters pinned at the bound whose descent direction points out of
    /// the box; these are held fixed for the step.
    fn active_set(p: &[f64; 3], jtr: &[f64; 3], bound: f64) -> [bool; 3] {
        std::array::from_fn(|k| p[k].abs() >= bound && -jtr[k] * p[k].signum() > 0.0)
    }

    fn projected_gradient_norm(p: &[f64; 3], jtr: &[f64; 3], bound: f64) -> f64 {
        let active = Self::active_set(p, jtr, bound);
        (0..3)
            .filter(|&k| !active[k])
            .map(|k| jtr[k] * jtr[k])
            .sum::<f64>()
            .sqrt()
    }

    fn run(&self, start: [f64; 3], opts: &FitOptions) -> (RunEnd, [f64; 3], f64) {
        let clamp = |x: f64| x.clamp(-opts.bound, opts.bound);
        let mut p = start.map(clamp);
        let mut obj = self.objective(&p);
        let mut lambda = 1e-3;
        for _ in 0..opts.max_iterations {
            let (jtj, jtr) = self.normal_equations(&p);
            let active = Self::active_set(&p, &jtr, opts.bound);
            let grad_ok = Self::projected_gradient_norm(&p, &jtr, opts.bound) <= 1e-6 * (1.0 + obj);
            let scale = (0..3).map(|k| jtj[k][k]).fold(0.0, f64::max).max(1e-300);
            let mut accepted = None;
            while lambda < 1e20 {
                let mut a = Matrix::zeros(3, 3);
                for r in 0..3 {
                    for c in 0..3 {
                        if !active[r] && !active[c] {
                            a.data[r * 3 + c] = jtj[r][c];
                        }
                    }
                    a.data[r * 3 + r] += if active[r] {
                        1.0
                    } else {
                        lambda * jtj[r][r].max(1e-12 * scale)
                    };
                }
                let rhs = Matrix::from_vec(
                    3,
                    1,
                    (0..3)
                        .map(|k| if active[k] { 0.0 } else { -jtr[k] })
                        .collect(),
                );
                if let Ok(step) = solve_spd(&a, &rhs) {
                    let cand: [f64; 3] = std::array::from_fn(|k| clamp(p[k] + step.data[k]));
                    let cand_obj = self.objective(&cand);
                    if cand_obj.is_finite() && cand_obj <= obj {
                        let delta: [f64; 3] = std::array::from_fn(|k| cand[k] - p[k]);
                        accepted = Some((delta, cand, cand_obj));
                        break;
                    }
                }
                lambda *= 4.0;
            }
            let Some((delta, cand, cand_obj)) = accepted else {
                return (
                    if grad_ok {
                        RunEnd::Converged
                    } else {
                        RunEnd::Stalled
                    },
                    p,
                    obj,
                );
            };
            p = cand;
            obj = cand_obj;
            lambda = (lambda / 3.0).max(1e-15);
            if !p.iter().all(|x| x.is_finite()) || !obj.is_finite() {
                return (RunEnd::NonFinite, p, obj);
            }
            if norm(&delta) < opts.tol {
                let (_, g) = self.normal_equations(&p);
                if Self::projected_gradient_norm(&p, &g, opts.bound) <= 1e-6 * (1.0 + obj) {
                    return (RunEnd::Converged, p, obj);
                }
            }
        }
        (RunEnd::IterationCap, p, obj)
    }
}

/// Multi-start Levenberg-Marquardt fit of `(c, a, b)`.
///
/// Every start in `opts.starts` is run; the lowest-objective converged run
/// wins, ties going to the earlier start.
pub fn fit(points: &[ScalingPoint], opts: &FitOptions) -> Result<FitResult> {
    check_identifiability(points).map_err(|d| Error::Identifiability(d.to_string()))?;
    for p in points {
        check_inputs(p.i, p.ppi)?;
        if !p.accuracy_pct.is_finite() {
            return Err(Error::domain(format!(
                "non-finite accuracy at i={}, ppi={}",
                p.i, p.ppi
            )));
        }
    }
    if !(opts.tol > 0.0) || !(opts.bound > 0.0) {
        return Err(Error::domain("fit tolerance and bound must be positive"));
    }
    let starts = opts.starts.starts();
    if starts.is_empty() {
        return Err(Error::domain("empty start grid"));
    }
    let problem = Problem {
        logs: points
            .iter()
            .map(|p| (p.i.ln(), p.ppi.ln(), p.accuracy_pct))
            .collect(),
    };

    let mut best: Option<([f64; 3], f64)> = None;
    let mut tally = [0usize; 4];
    for s in &starts {
        let (end, p, obj) = problem.run(s.to_array(), opts);
        tally[end as usize] += 1;
        if end == RunEnd::Converged && best.map_or(true, |(_, b)| obj < b) {
            best = Some((p, obj));
        }
    }
    let Some((p, obj)) = best else {
        return Err(Error::Numeric(format!(
            "no start converged out of {}: {} non-finite, {} stalled, {} hit the {}-iteration cap",
            starts.len(),
            tally[RunEnd::NonFinite as usize],
            tally[RunEnd::Stalled as usize],
            tally[RunEnd::IterationCap as usize],
            opts.max_iterations,
        )));
    };
    log::debug!(
        "fit: {} of {} starts converged",
        tally[RunEnd::Converged as usize],
        starts.len()
    );
    Ok(FitResult {
        params: CanonicalScalingParams::from_array(p),
        rmse: (obj / points.len() as f64).sqrt(),
        n_points: points.len(),
        start_count: starts.len(),
        objective: obj,
        at_bound: p.iter().any(|x| x.abs() >= opts.bound),
    })
}

pub fn write_points_csv<W: Write>(points: &[ScalingPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(input: R) -> Result<Vec<ScalingPoint>> {
    let mut r = csv::Reader::from_reader(input);
    let points = r
        .deserialize()
        .collect::<std::result::Result<Vec<ScalingPoint>, _>>()?;
    Ok(points)
}

pub fn load_points_csv(path: &Path) -> Result<Vec<ScalingPoint>> {
    read_points_csv(std::fs::File::open(path)?)
}

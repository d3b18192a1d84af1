//! Hypothetical scale points, the human-level threshold, and inversion of
//! the fitted law for the data amount or resolution needed to reach it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scaling::{clamp_pct, predict, CanonicalScalingParams};

pub const HUMAN_LEVEL_PCT: f64 = 90.0;

pub const SCENARIO_HEADER: [&str; 5] =
    ["label", "i_thousands", "ppi", "param_count", "expected_pct"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub label: String,
    /// Thousands of images.
    pub i: f64,
    pub ppi: f64,
    /// Carried for reporting; the law has no model-size term.
    pub param_count: f64,
    pub expected_precision_pct: Option<f64>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.i > 0.0 && self.i.is_finite() && self.ppi > 0.0 && self.ppi.is_finite()) {
            return Err(Error::domain(format!(
                "scenario '{}' needs positive finite i and ppi, got i={} ppi={}",
                self.label, self.i, self.ppi
            )));
        }
        Ok(())
    }
}

pub fn builtin_table1() -> Vec<ScenarioSpec> {
    let row = |label: &str, i: f64, ppi: f64, params: f64, expected: f64| ScenarioSpec {
        label: label.to_string(),
        i,
        ppi,
        param_count: params,
        expected_precision_pct: Some(expected),
    };
    vec![
        row("Current Test", 200.0, 256.0, 0.3e9, 40.0),
        row("4 x Test", 2400.0, 1280.0, 9.6e9, 65.0),
        row("10 x Test", 12600.0, 4096.0, 522e9, 91.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioOutcome {
    pub label: String,
    pub i: f64,
    pub ppi: f64,
    pub param_count: f64,
    pub expected_pct: Option<f64>,
    pub predicted_pct: f64,
    pub clamped_pct: f64,
    pub human_level: bool,
    /// `predicted - expected`, when an expectation is given.
    pub residual_vs_expected: Option<f64>,
}

pub fn is_human_level(expected_or_predicted_pct: f64) -> bool {
    clamp_pct(expected_or_predicted_pct) >= HUMAN_LEVEL_PCT
}

pub fn evaluate_scenario(
    params: &CanonicalScalingParams,
    spec: &ScenarioSpec,
) -> Result<ScenarioOutcome> {
    spec.validate()?;
    let predicted = predict(params, spec.i, spec.ppi)?;
    let clamped = clamp_pct(predicted);
    Ok(ScenarioOutcome {
        label: spec.label.clone(),
        i: spec.i,
        ppi: spec.ppi,
        param_count: spec.param_count,
        expected_pct: spec.expected_precision_pct,
        predicted_pct: predicted,
        clamped_pct: clamped,
        human_level: clamped >= HUMAN_LEVEL_PCT,
        residual_vs_expected: spec.expected_precision_pct.map(|e| predicted - e),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdSolution {
    Reached(f64),
    Unreachable(String),
}

impl ThresholdSolution {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Reached(x) => Some(*x),
            Self::Unreachable(_) => None,
        }
    }
}

/// Solves `k * (ln x + offset) = threshold` for x, given the fixed factor k.
fn invert(k: f64, offset: f64, threshold: f64, fixed: &str, free: &str) -> ThresholdSolution {
    if !k.is_finite() {
        return ThresholdSolution::Unreachable(format!("fixed factor {fixed} is not finite"));
    }
    if k == 0.0 {
        return ThresholdSolution::Unreachable(format!(
            "{fixed} = 0, so the prediction is 0 for every {free}"
        ));
    }
    if k < 0.0 {
        return ThresholdSolution::Unreachable(format!(
            "{fixed} = {k} < 0, so accuracy falls as {free} grows"
        ));
    }
    let x = (threshold / k - offset).exp();
    if x.is_finite() && x > 0.0 {
        ThresholdSolution::Reached(x)
    } else {
        ThresholdSolution::Unreachable(format!(
            "{free} needed for {threshold}% is outside the floating-point range"
        ))
    }
}

fn check_threshold(threshold_pct: f64) -> Result<()> {
    if !(threshold_pct > 0.0 && threshold_pct.is_finite()) {
        return Err(Error::domain(format!(
            "threshold must be positive, got {threshold_pct}"
        )));
    }
    Ok(())
}

/// Resolution at which the law reaches `threshold_pct` for a fixed data amount.
pub fn solve_threshold_ppi(
    params: &CanonicalScalingParams,
    i: f64,
    threshold_pct: f64,
) -> Result<ThresholdSolution> {
    if !(i > 0.0 && i.is_finite()) {
        return Err(Error::domain(format!(
            "data amount i must be positive, got {i}"
        )));
    }
    check_threshold(threshold_pct)?;
    let k = params.c * (i.ln() + params.a);
    Ok(invert(k, params.b, threshold_pct, "c·(ln i + a)", "ppi"))
}

/// Data amount (thousands) at which the law reaches `threshold_pct` for a fixed resolution.
pub fn solve_threshold_i(
    params: &CanonicalScalingParams,
    ppi: f64,
    threshold_pct: f64,
) -> Result<ThresholdSolution> {
    if !(ppi > 0.0 && ppi.is_finite()) {
        return Err(Error::domain(format!(
            "resolution ppi must be positive, got {ppi}"
        )));
    }
    check_threshold(threshold_pct)?;
    let k = params.c * (ppi.ln() + params.b);
    Ok(invert(k, params.a, threshold_pct, "c·(ln ppi + b)", "i"))
}

/// Formats integral values without a fractional part, everything else in
/// shortest round-trip form.
pub(crate) fn fmt_num(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

pub fn write_scenarios_csv<W: Write>(specs: &[ScenarioSpec], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCENARIO_HEADER)?;
    for s in specs {
        w.write_record([
            s.label.clone(),
            fmt_num(s.i),
            fmt_num(s.ppi),
            fmt_num(s.param_count),
            s.expected_precision_pct.map(fmt_num).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field(what: &str, line: u64, raw: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| {
        Error::format(
            "scenario csv",
            format!("line {line}: {what} '{raw}' is not a number"),
        )
    })
}

pub fn read_scenarios_csv<R: Read>(input: R) -> Result<Vec<ScenarioSpec>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().map(str::trim).ne(SCENARIO_HEADER) {
        return Err(Error::format(
            "scenario csv",
            format!(
                "header must be {}, got {}",
                SCENARIO_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut specs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let expected = rec[4].trim();
        let spec = ScenarioSpec {
            label: rec[0].to_string(),
            i: parse_field("i_thousands", line, &rec[1])?,
            ppi: parse_field("ppi", line, &rec[2])?,
            param_count: parse_field("param_count", line, &rec[3])?,
            expected_precision_pct: if expected.is_empty() {
                None
            } else {
                Some(parse_field("expected_pct", line, expected)?)
            },
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

pub fn load_scenarios_csv(path: &Path) -> Result<Vec<ScenarioSpec>> {
    read_scenarios_csv(std::fs::File::open(path)?)
}

/// A scenario outcome tagged with the fit group it was evaluated under.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedOutcome {
    pub model: String,
    pub protocol: String,
    pub outcome: ScenarioOutcome,
}

pub fn write_outcomes_csv<W: Write>(rows: &[GroupedOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "protocol",
        "label",
        "i_thousands",
        "ppi",
        "param_count",
        "expected_pct",
        "predicted_pct",
        "clamped_pct",
        "human_level",
        "residual",
    ])?;
    let opt = |x: Option<f64>| x.map(fmt_num).unwrap_or_default();
    for g in rows {
        let o = &g.outcome;
        w.write_record([
            g.model.clone(),
            g.protocol.clone(),
            o.label.clone(),
            fmt_num(o.i),
            fmt_num(o.ppi),
            fmt_num(o.param_count),
            opt(o.expected_pct),
            format!("{}", o.predicted_pct),
            format!("{}", o.clamped_pct),
            o.human_level.to_string(),
            opt(o.residual_vs_expected),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn table1_rows() {
        let t = builtin_table1();
        assert_eq!(t.len(), 3);
        assert_eq!(
            (
                t[0].i,
                t[0].ppi,
                t[0].param_count,
                t[0].expected_precision_pct
            ),
            (200.0, 256.0, 0.3e9, Some(40.0))
        );
        let flagged: Vec<bool> = t
            .iter()
            .map(|s| is_human_level(s.expected_precision_pct.unwrap()))
            .collect();
        assert_eq!(flagged, [false, false, true]);
    }

    #[test]
    fn table1_csv_text() {
        let mut buf = Vec::new();
        write_scenarios_csv(&builtin_table1(), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "label,i_thousands,ppi,param_count,expected_pct\n\
             Current Test,200,256,300000000,40\n\
             4 x Test,2400,1280,9600000000,65\n\
             10 x Test,12600,4096,522000000000,91\n"
        );
        assert_eq!(read_scenarios_csv(&buf[..]).unwrap(), builtin_table1());
    }

    #[test]
    fn boundary_is_inclusive() {
        let p = CanonicalScalingParams::new(9.0, 0.0, 0.0);
        let spec = ScenarioSpec {
            label: "edge".into(),
            i: 2f64.exp(),
            ppi: 5f64.exp(),
            param_count: 1.0,
            expected_precision_pct: Some(90.0),
        };
        let o = evaluate_scenario(&p, &spec).unwrap();
        assert!((o.predicted_pct - 90.0).abs() < 1e-12);
        assert!(o.human_level);
        assert_eq!(o.residual_vs_expected, Some(o.predicted_pct - 90.0));
        // exact boundary on the clamped value itself
        assert!(is_human_level(90.0));
        assert!(!is_human_level(89.999_999));
    }

    #[test]
    fn closed_form_inversions() {
        let p = CanonicalScalingParams::new(9.0, 0.0, 0.0);
        let ppi = solve_threshold_ppi(&p, E * E, 90.0)
            .unwrap()
            .value()
            .unwrap();
        assert!((ppi - 5f64.exp()).abs() < 1e-9);
        let i = solve_threshold_i(&p, 5f64.exp(), 90.0)
            .unwrap()
            .value()
            .unwrap();
        assert!((i - E * E).abs() < 1e-9);
        let neg = CanonicalScalingParams::new(-1.0, 1.0, 1.0);
        assert!(matches!(
            solve_threshold_ppi(&neg, 10.0, 90.0).unwrap(),
            ThresholdSolution::Unreachable(_)
        ));
        let zero_b = CanonicalScalingParams::new(2.0, 1.0, -(300f64.ln()));
        assert!(matches!(
            solve_threshold_i(&zero_b, 300.0, 90.0).unwrap(),
            ThresholdSolution::Unreachable(_)
        ));
        assert!(solve_threshold_ppi(&p, 0.0, 90.0).is_err());
    }

    #[test]
    fn rejects_bad_header() {
        let text = "name,i,ppi,params,expected\nx,1,2,3,4\n";
        assert!(matches!(
            read_scenarios_csv(text.as_bytes()),
            Err(Error::Format { .. })
        ));
    }
}

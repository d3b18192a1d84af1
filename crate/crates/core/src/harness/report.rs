use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{render_protocol_chart, Series};
use super::{ExperimentResult, RunLedger};
use crate::error::{Error, Result};
use crate::eval::ProtocolKind;
use crate::scaling::{fit, FitOptions, FitResult, ScalingPoint};
use crate::scenarios::{evaluate_scenario, write_outcomes_csv, GroupedOutcome, ScenarioSpec};

/// A fitted law for one (model size, protocol) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub protocol: Option<ProtocolKind>,
    #[serde(flatten)]
    pub fit: FitResult,
}

impl FitEntry {
    pub fn group_label(&self) -> String {
        match self.protocol {
            Some(p) => format!("{}/{p}", self.model),
            None => self.model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitsReport {
    pub fits: Vec<FitEntry>,
    /// One line per group that could not be fitted.
    pub warnings: Vec<String>,
}

fn point_of(r: &ExperimentResult) -> Option<ScalingPoint> {
    let acc = r.accuracy_pct.filter(|_| r.status.is_ok())?;
    Some(ScalingPoint::new(
        r.n_images as f64 / 1000.0,
        r.cell.resolution as f64,
        acc,
    ))
}

/// Fits one law per (model, protocol) group from the ledger's successful
/// cells. Groups that cannot be fitted are skipped with a warning.
pub fn fit_from_ledger(ledger: &RunLedger, opts: &FitOptions) -> FitsReport {
    let mut groups: BTreeMap<(String, ProtocolKind), Vec<ScalingPoint>> = BTreeMap::new();
    for r in &ledger.results {
        let pts = groups
            .entry((r.cell.model_name.clone(), r.cell.protocol.kind))
            .or_default();
        pts.extend(point_of(r));
    }
    let mut report = FitsReport::default();
    for ((model, protocol), points) in groups {
        match fit(&points, opts) {
            Ok(fit) => {
                if fit.at_bound {
                    let msg = format!(
                        "{model}/{protocol}: optimum on the parameter bound |param| <= {}",
                        opts.bound
                    );
                    log::warn!("{msg}");
                    report.warnings.push(msg);
                }
                report.fits.push(FitEntry {
                    model,
                    protocol: Some(protocol),
                    fit,
                })
            }
            Err(e) => {
                let reason = match e {
                    Error::Identifiability(d) => d,
                    other => other.to_string(),
                };
                let msg = format!("{model}/{protocol}: {reason}");
                log::warn!("skipping fit for {msg}");
                report.warnings.push(msg);
            }
        }
    }
    report
}

pub fn save_fits(fits: &[FitEntry], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, fits)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads a fits file: either a list of entries or one bare fit object.
pub fn load_fits(path: &Path) -> Result<Vec<FitEntry>> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let fits = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    Ok(fits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub points_csv: PathBuf,
    pub fits_json: PathBuf,
    pub charts: Vec<PathBuf>,
    pub scenarios_csv: PathBuf,
}

fn write_points(ledger: &RunLedger, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "protocol",
        "fraction",
        "repeat_index",
        "resolution",
        "n_images",
        "i",
        "ppi",
        "accuracy_pct",
    ])?;
    for r in &ledger.results {
        if let Some(p) = point_of(r) {
            w.write_record([
                r.cell.model_name.clone(),
                r.cell.protocol.kind.to_string(),
                r.cell.fraction.to_string(),
                r.cell.repeat_index.to_string(),
                r.cell.resolution.to_string(),
                r.n_images.to_string(),
                p.i.to_string(),
                p.ppi.to_string(),
                p.accuracy_pct.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn geometric_mean(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// Writes points.csv, fits.json, one chart per protocol and scenarios.csv.
pub fn emit_report(
    ledger: &RunLedger,
    fits: &[FitEntry],
    scenarios: &[ScenarioSpec],
    out_dir: &Path,
) -> Result<ReportFiles> {
    if fits.is_empty() {
        return Err(Error::domain("report needs at least one fitted law"));
    }
    std::fs::create_dir_all(out_dir)?;
    let files = ReportFiles {
        points_csv: out_dir.join("points.csv"),
        fits_json: out_dir.join("fits.json"),
        charts: Vec::new(),
        scenarios_csv: out_dir.join("scenarios.csv"),
    };
    write_points(ledger, &files.points_csv)?;
    save_fits(fits, &files.fits_json)?;

    let mut protocols: Vec<ProtocolKind> = ledger
        .results
        .iter()
        .map(|r| r.cell.protocol.kind)
        .collect();
    protocols.sort();
    protocols.dedup();
    let mut charts = Vec::new();
    for protocol in protocols {
        let mut models: Vec<&str> = Vec::new();
        for r in ledger
            .results
            .iter()
            .filter(|r| r.cell.protocol.kind == protocol)
        {
            if !models.contains(&r.cell.model_name.as_str()) {
                models.push(&r.cell.model_name);
            }
        }
        let series: Vec<Series> = models
            .iter()
            .map(|&model| {
                let pts: Vec<ScalingPoint> = ledger
                    .results
                    .iter()
                    .filter(|r| r.cell.protocol.kind == protocol && r.cell.model_name == model)
                    .filter_map(point_of)
                    .collect();
                let law = fits
                    .iter()
                    .find(|f| f.model == model && f.protocol.map_or(true, |p| p == protocol))
                    .filter(|_| !pts.is_empty())
                    .map(|f| {
                        (
                            f.fit.params,
                            geometric_mean(&pts.iter().map(|p| p.ppi).collect::<Vec<_>>()),
                        )
                    });
                Series {
                    name: model.to_string(),
                    points: pts.iter().map(|p| (p.i, p.accuracy_pct)).collect(),
                    law,
                }
            })
            .collect();
        let path = out_dir.join(format!("accuracy_{protocol}.svg"));
        std::fs::write(&path, render_protocol_chart(protocol, &series))?;
        charts.push(path);
    }

    let mut rows = Vec::new();
    for f in fits {
        for spec in scenarios {
            rows.push(GroupedOutcome {
                model: f.model.clone(),
                protocol: f.protocol.map(|p| p.to_string()).unwrap_or_default(),
                outcome: evaluate_scenario(&f.fit.params, spec)?,
            });
        }
    }
    write_outcomes_csv(&rows, File::create(&files.scenarios_csv)?)?;
    Ok(ReportFiles { charts, ..files })
}

//! Experiment grid design, cell execution, the JSONL run ledger, per-group
//! law fits and static reports.
//!
//! Seeds for every cell come from the configured master seed through
//! [`rng::derive_seed`] applied to the cell's coordinates, so a cell's
//! randomness does not depend on where it sits in the grid. Pretraining
//! seeds ignore the protocol axis (both protocols evaluate the same
//! pretrained encoder). Initialization depends only on resolution and model
//! size, so fractions and repeats differ in data, not in starting weights.
//! The evaluation split is shared by all cells.

mod ledger;
mod report;
mod svg;

use std::borrow::Cow;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::corpus::{sample_subset, subset_size, CorpusManifest, SubsetSpec};
use crate::error::{Error, Result};
use crate::eval::{
    extract_features, finetune_two_percent, linear_probe, EvalProtocol, FinetuneOptions,
    ProtocolKind, DEFAULT_RIDGE, EVAL_FRACTION,
};
use crate::mae::{size_ladder, train, ParameterStore, TrainSchedule};
use crate::rng::{derive_seed, label_coord};

pub use ledger::{run_grid, LedgerHeader, RunLedger, RunOptions, RunSummary};
pub use report::{
    emit_report, fit_from_ledger, load_fits, save_fits, FitEntry, FitsReport, ReportFiles,
};

/// Subset draws per fraction below 1.0.
pub const REPEATS: u32 = 4;

const TAG_SUBSET: u64 = 0x5b5e7;
const TAG_INIT: u64 = 0x1417;
const TAG_TRAIN: u64 = 0x7a19;
const TAG_EVAL: u64 = 0xe7a1;
const TAG_FINETUNE: u64 = 0xf17e;

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

/// Fine-tuning hyperparameters; defaults follow [`FinetuneOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Penalty of the ridge fit that initializes the classification head.
    pub ridge: f64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let d = FinetuneOptions::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            ridge: d.ridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub fractions: Vec<f64>,
    pub resolutions: Vec<usize>,
    /// Ladder entry names, e.g. `TOY-A`.
    pub ladder: Vec<String>,
    pub protocols: Vec<ProtocolKind>,
    pub master_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub finetune: FinetuneSettings,
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: GridConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fractions.is_empty()
            || self.resolutions.is_empty()
            || self.ladder.is_empty()
            || self.protocols.is_empty()
        {
            return bad(
                "fractions, resolutions, ladder and protocols must all be non-empty".into(),
            );
        }
        for (k, f) in self.fractions.iter().enumerate() {
            if !(*f > 0.0 && *f <= 1.0) {
                return bad(format!("fraction {f} not in (0,1]"));
            }
            if self.fractions[..k].contains(f) {
                return bad(format!("fraction {f} listed twice"));
            }
        }
        for (k, &r) in self.resolutions.iter().enumerate() {
            if self.resolutions[..k].contains(&r) {
                return bad(format!("resolution {r} listed twice"));
            }
            let ladder =
                size_ladder(r).map_err(|e| Error::Config(format!("resolution {r}: {e}")))?;
            for name in &self.ladder {
                if ladder.get(name).is_none() {
                    let known: Vec<_> = ladder.names().collect();
                    return bad(format!(
                        "unknown model size {name:?}; the ladder has {}",
                        known.join(", ")
                    ));
                }
            }
        }
        for (k, name) in self.ladder.iter().enumerate() {
            if self.ladder[..k].contains(name) {
                return bad(format!("model size {name} listed twice"));
            }
        }
        for (k, p) in self.protocols.iter().enumerate() {
            if self.protocols[..k].contains(p) {
                return bad(format!("protocol {p} listed twice"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.finetune.batch_size == 0 {
            return bad("epochs and batch sizes must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            ));
        }
        if !(self.ridge.is_finite() && self.ridge > 0.0) {
            return bad(format!("ridge {} must be > 0", self.ridge));
        }
        let ft = &self.finetune;
        if !(ft.learning_rate.is_finite() && ft.learning_rate >= 0.0) {
            return bad(format!(
                "finetune.learning_rate {} must be finite and >= 0",
                ft.learning_rate
            ));
        }
        if !(ft.ridge.is_finite() && ft.ridge > 0.0) {
            return bad(format!("finetune.ridge {} must be > 0", ft.ridge));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Seed of the held-out split used by every cell.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.master_seed, &[TAG_EVAL])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSeeds {
    pub subset: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub fraction: f64,
    pub repeat_index: u32,
    pub resolution: usize,
    pub model_name: String,
    pub protocol: EvalProtocol,
    pub seeds: CellSeeds,
}

/// Identity of a cell within a grid, independent of its seeds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    fraction_bits: u64,
    repeat_index: u32,
    resolution: usize,
    model_name: String,
    protocol: ProtocolKind,
}

impl ExperimentCell {
    pub fn key(&self) -> CellKey {
        CellKey {
            fraction_bits: self.fraction.to_bits(),
            repeat_index: self.repeat_index,
            resolution: self.resolution,
            model_name: self.model_name.clone(),
            protocol: self.protocol.kind,
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "fraction={} repeat={} res={} model={} protocol={}",
            self.fraction, self.repeat_index, self.resolution, self.model_name, self.protocol.kind
        )
    }
}

/// Cartesian product of subset instances, resolutions, sizes and protocols.
///
/// Order: fractions descending, repeat, resolution ascending, the ladder's
/// size order, then [`ProtocolKind::ALL`] order.
pub fn design_grid(config: &GridConfig) -> Result<Vec<ExperimentCell>> {
    config.validate()?;
    let mut fractions = config.fractions.clone();
    fractions.sort_by(|a, b| b.total_cmp(a));
    let mut resolutions = config.resolutions.clone();
    resolutions.sort_unstable();
    let ladder = size_ladder(resolutions[0])?;
    let mut sizes: Vec<&str> = ladder
        .names()
        .filter(|n| config.ladder.iter().any(|c| c == n))
        .collect();
    sizes.dedup();
    let protocols: Vec<ProtocolKind> = ProtocolKind::ALL
        .into_iter()
        .filter(|p| config.protocols.contains(p))
        .collect();
    let m = config.master_seed;
    let eval = config.eval_seed();

    let mut cells = Vec::new();
    for &fraction in &fractions {
        let repeats = if fraction == 1.0 { 1 } else { REPEATS };
        for repeat_index in 0..repeats {
            let subset = derive_seed(
                m,
                &[TAG_SUBSET, fraction.to_bits(), u64::from(repeat_index)],
            );
            for &resolution in &resolutions {
                for &name in &sizes {
                    let coords = [
                        fraction.to_bits(),
                        u64::from(repeat_index),
                        resolution as u64,
                        label_coord(name),
                    ];
                    let init = derive_seed(m, &[TAG_INIT, resolution as u64, label_coord(name)]);
                    let train = derive_seed(m, &[&[TAG_TRAIN][..], &coords].concat());
                    for &p in &protocols {
                        cells.push(ExperimentCell {
                            fraction,
                            repeat_index,
                            resolution,
                            model_name: name.to_string(),
                            protocol: p.protocol(),
                            seeds: CellSeeds {
                                subset,
                                init,
                                train,
                                eval,
                            },
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

impl CellStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, CellStatus::Ok)
    }
}

impl Serialize for CellStatus {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CellStatus::Ok => s.serialize_str("ok"),
            CellStatus::Failed(reason) => s.collect_str(&format_args!("failed:{reason}")),
        }
    }
}

impl<'de> Deserialize<'de> for CellStatus {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "ok" {
            Ok(CellStatus::Ok)
        } else if let Some(reason) = s.strip_prefix("failed:") {
            Ok(CellStatus::Failed(reason.to_string()))
        } else {
            Err(serde::de::Error::custom(format!(
                "unknown cell status {s:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cell: ExperimentCell,
    /// Actual subset size divided by 1000.
    pub i_thousands: f64,
    pub n_images: usize,
    pub accuracy_pct: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub wall_seconds: f64,
    pub status: CellStatus,
}

/// Runs one cell: subset draw, pretraining, then the cell's protocol.
///
/// `manifest` may be at any resolution; it is re-rendered at the cell's
/// resolution when needed. Training and evaluation failures are reported
/// through the result's status. Only configuration problems are errors.
pub fn run_cell(
    cell: &ExperimentCell,
    manifest: &CorpusManifest,
    config: &GridConfig,
) -> Result<ExperimentResult> {
    let started = Instant::now();
    let ladder = size_ladder(cell.resolution).map_err(|e| Error::Config(e.to_string()))?;
    let model = *ladder
        .get(&cell.model_name)
        .ok_or_else(|| Error::Config(format!("unknown model size {:?}", cell.model_name)))?;
    let images: Cow<CorpusManifest> = if manifest.image_side() == Some(cell.resolution) {
        Cow::Borrowed(manifest)
    } else {
        Cow::Owned(manifest.render_at(cell.resolution)?)
    };
    let labels = images.labels()?;
    let n_images = subset_size(images.len(), cell.fraction)?;

    let mut final_loss = None;
    let outcome = (|| -> Result<f64> {
        let subset = sample_subset(
            &images,
            &SubsetSpec {
                fraction: cell.fraction,
                seed: cell.seeds.subset,
                repeat_index: cell.repeat_index,
            },
        )?;
        let init = ParameterStore::init(&model, cell.seeds.init)?;
        let schedule = TrainSchedule {
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            seed: cell.seeds.train,
        };
        let (params, trace) = train(init, &model, &subset, &schedule)?;
        final_loss = trace.last();
        let report = match cell.protocol.kind {
            ProtocolKind::NoFinetune => {
                let features = extract_features(&params, &model, &images)?;
                linear_probe(
                    &features,
                    &labels,
                    EVAL_FRACTION,
                    config.ridge,
                    cell.seeds.eval,
                )?
            }
            ProtocolKind::Finetune2Pct => {
                let opts = FinetuneOptions {
                    epochs: config.finetune.epochs,
                    batch_size: config.finetune.batch_size,
                    learning_rate: config.finetune.learning_rate,
                    seed: derive_seed(cell.seeds.train, &[TAG_FINETUNE]),
                    split_seed: cell.seeds.eval,
                    ridge: config.finetune.ridge,
                    ..FinetuneOptions::default()
                };
                finetune_two_percent(&params, &model, &images, &labels, &opts)?.report
            }
        };
        if !report.accuracy_pct.is_finite() {
            return Err(Error::Numeric("non-finite accuracy".into()));
        }
        Ok(report.accuracy_pct)
    })();

    let (accuracy_pct, status) = match outcome {
        Ok(acc) => (Some(acc), CellStatus::Ok),
        Err(Error::NonFiniteLoss { .. }) => (None, CellStatus::Failed("nan-loss".into())),
        Err(e) => (None, CellStatus::Failed(e.to_string())),
    };
    Ok(ExperimentResult {
        cell: cell.clone(),
        i_thousands: n_images as f64 / 1000.0,
        n_images,
        accuracy_pct,
        final_train_loss: final_loss.filter(|l| l.is_finite()),
        wall_seconds: started.elapsed().as_secs_f64(),
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config(
        fractions: &[f64],
        resolutions: &[usize],
        ladder: &[&str],
        protocols: &[ProtocolKind],
    ) -> GridConfig {
        GridConfig {
            fractions: fractions.to_vec(),
            resolutions: resolutions.to_vec(),
            ladder: ladder.iter().map(|s| s.to_string()).collect(),
            protocols: protocols.to_vec(),
            master_seed: 42,
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.05,
            ridge: DEFAULT_RIDGE,
            finetune: FinetuneSettings::default(),
        }
    }

    #[test]
    fn standard_grid_has_156_cells() {
        let c = config(
            &[1.0, 0.5, 0.25, 0.05],
            &[16, 24, 32],
            &["TOY-A", "TOY-B", "TOY-C", "TOY-D"],
            &[ProtocolKind::NoFinetune],
        );
        assert_eq!(design_grid(&c).unwrap().len(), 156);
    }

    #[test]
    fn single_cell_per_protocol() {
        let c = config(&[1.0], &[16], &["TOY-A"], &ProtocolKind::ALL);
        let cells = design_grid(&c).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].seeds, cells[1].seeds);
    }

    #[test]
    fn ordering_and_determinism() {
        let c = config(
            &[0.25, 1.0],
            &[24, 16],
            &["TOY-B", "TOY-A"],
            &[ProtocolKind::NoFinetune],
        );
        let cells = design_grid(&c).unwrap();
        assert_eq!(cells, design_grid(&c).unwrap());
        assert_eq!(cells[0].fraction, 1.0);
        assert_eq!(cells[0].model_name, "TOY-A");
        assert_eq!(cells[1].model_name, "TOY-B");
        assert_eq!(cells[2].resolution, 24);
        assert_eq!((cells[4].fraction, cells[4].repeat_index), (0.25, 0));
        assert!(cells
            .iter()
            .all(|c| c.fraction < 1.0 || c.repeat_index == 0));
        assert!(cells.iter().all(|c| c.repeat_index < REPEATS));
        // seeds follow coordinates, not position
        let mut other = c.clone();
        other.fractions = vec![0.25];
        let sub = design_grid(&other).unwrap();
        assert_eq!(sub[0].seeds, cells[4].seeds);
    }

    #[test]
    fn config_errors() {
        let mut c = config(&[1.0], &[16], &["TOY-A"], &[ProtocolKind::NoFinetune]);
        c.fractions.clear();
        assert!(matches!(design_grid(&c), Err(Error::Config(_))));
        let c = config(&[1.0], &[16], &["TOY-Z"], &[ProtocolKind::NoFinetune]);
        assert!(matches!(design_grid(&c), Err(Error::Config(_))));
        let c = config(&[1.5], &[16], &["TOY-A"], &[ProtocolKind::NoFinetune]);
        assert!(matches!(design_grid(&c), Err(Error::Config(_))));
        let c = config(&[1.0], &[18], &["TOY-A"], &[ProtocolKind::NoFinetune]);
        assert!(matches!(design_grid(&c), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_keys() {
        let json = r#"{"fractions":[1.0,0.25],"resolutions":[16],"ladder":["TOY-A"],"protocols":["NO_FINETUNE"],
            "master_seed":3,"epochs":2,"batch_size":8,"learning_rate":0.05}"#;
        let c: GridConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.ridge, DEFAULT_RIDGE);
        assert_eq!(c.finetune, FinetuneSettings::default());
        assert!(
            serde_json::from_str::<GridConfig>(&json.replace("\"epochs\"", "\"epoch\"")).is_err()
        );
    }

    #[test]
    fn status_strings() {
        assert_eq!(serde_json::to_string(&CellStatus::Ok).unwrap(), "\"ok\"");
        let f = CellStatus::Failed("nan-loss".into());
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, "\"failed:nan-loss\"");
        assert_eq!(serde_json::from_str::<CellStatus>(&s).unwrap(), f);
    }
}

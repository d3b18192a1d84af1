use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::{design_grid, run_cell, ExperimentResult, GridConfig};
use crate::corpus::{manifest_fingerprint, CorpusManifest};
use crate::error::{Error, Result};

const LEDGER_KIND: &str = "visionscale-ledger";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerHeader {
    pub kind: String,
    pub corpus_fingerprint: String,
    pub config_hash: String,
    pub tool_version: String,
}

impl LedgerHeader {
    pub fn new(manifest: &CorpusManifest, config: &GridConfig) -> Self {
        Self {
            kind: LEDGER_KIND.to_string(),
            corpus_fingerprint: manifest_fingerprint(manifest),
            config_hash: config.hash(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// A header line followed by one JSON result per line, in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub header: LedgerHeader,
    pub results: Vec<ExperimentResult>,
}

struct Loaded {
    ledger: RunLedger,
    /// Byte length of the well-formed prefix.
    valid_len: u64,
}

impl RunLedger {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(load_prefix(path)?.ledger)
    }

    pub fn ok_count(&self) -> usize {
        self.results.iter().filter(|r| r.status.is_ok()).count()
    }
}

/// Parses a ledger, tolerating one torn final line left by a crash.
fn load_prefix(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    let mut lines = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(off) => {
                lines.push((start, start + off, true));
                start += off + 1;
            }
            None => {
                lines.push((start, bytes.len(), false));
                start = bytes.len();
            }
        }
    }
    let Some(&(s, e, _)) = lines.first() else {
        return Err(Error::format(
            "ledger",
            format!("{} is empty", path.display()),
        ));
    };
    let header: LedgerHeader = serde_json::from_slice(&bytes[s..e]).map_err(|err| {
        Error::format(
            "ledger",
            format!("{}: bad header line: {err}", path.display()),
        )
    })?;
    if header.kind != LEDGER_KIND {
        return Err(Error::format(
            "ledger",
            format!("{} is not a run ledger", path.display()),
        ));
    }
    let mut results = Vec::new();
    let mut valid_len = (e + 1).min(bytes.len()) as u64;
    let n = lines.len();
    for (k, &(s, e, terminated)) in lines.iter().enumerate().skip(1) {
        match serde_json::from_slice::<ExperimentResult>(&bytes[s..e]) {
            Ok(r) if terminated => {
                results.push(r);
                valid_len = (e + 1) as u64;
            }
            Ok(_) | Err(_) if k == n - 1 => {
                log::warn!(
                    "{}: dropping incomplete final line {}",
                    path.display(),
                    k + 1
                );
            }
            Err(err) => {
                return Err(Error::format(
                    "ledger",
                    format!("{} line {}: {err}", path.display(), k + 1),
                ));
            }
            Ok(_) => unreachable!("only the last line can be unterminated"),
        }
    }
    Ok(Loaded {
        ledger: RunLedger { header, results },
        valid_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    /// Stop after this many newly appended cells, as if interrupted.
    pub stop_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub ledger: RunLedger,
    pub executed: usize,
    pub skipped: usize,
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Executes every grid cell not already in the ledger at `ledger_path`,
/// appending results in grid order whatever order workers finish in.
pub fn run_grid(
    config: &GridConfig,
    manifest: &CorpusManifest,
    ledger_path: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    if opts.workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let cells = design_grid(config)?;
    let fresh = LedgerHeader::new(manifest, config);

    let existing = if ledger_path.exists() && std::fs::metadata(ledger_path)?.len() > 0 {
        Some(load_prefix(ledger_path)?)
    } else {
        None
    };
    let (header, mut results, mut file) = match existing {
        Some(loaded) => {
            let old = &loaded.ledger.header;
            if old.corpus_fingerprint != fresh.corpus_fingerprint {
                return Err(Error::LedgerMismatch(format!(
                    "{} was written for a different corpus; refusing to resume",
                    ledger_path.display()
                )));
            }
            if old.config_hash != fresh.config_hash {
                return Err(Error::LedgerMismatch(format!(
                    "{} was written for a different grid config; refusing to resume",
                    ledger_path.display()
                )));
            }
            if old.tool_version != fresh.tool_version {
                log::warn!("resuming a ledger written by version {}", old.tool_version);
            }
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .open(ledger_path)?;
            f.set_len(loaded.valid_len)?;
            let mut w = BufWriter::new(f);
            w.seek(SeekFrom::End(-1))?;
            let mut last = [0u8];
            w.get_mut().read_exact(&mut last)?;
            w.seek(SeekFrom::End(0))?;
            if last[0] != b'\n' {
                w.write_all(b"\n")?;
            }
            (loaded.ledger.header, loaded.ledger.results, w)
        }
        None => {
            let mut w = BufWriter::new(File::create(ledger_path)?);
            write_line(&mut w, &fresh)?;
            (fresh, Vec::new(), w)
        }
    };

    let grid_keys: HashSet<_> = cells.iter().map(|c| c.key()).collect();
    let mut done = HashSet::new();
    for r in &results {
        let key = r.cell.key();
        if !grid_keys.contains(&key) {
            return Err(Error::LedgerMismatch(format!(
                "ledger holds a cell outside the grid: {}",
                r.cell.describe()
            )));
        }
        if !done.insert(key) {
            return Err(Error::LedgerMismatch(format!(
                "ledger holds a cell twice: {}",
                r.cell.describe()
            )));
        }
    }
    let pending: Vec<_> = cells.iter().filter(|c| !done.contains(&c.key())).collect();
    let skipped = cells.len() - pending.len();
    let limit = opts.stop_after.unwrap_or(usize::MAX).min(pending.len());
    if limit == 0 {
        return Ok(RunSummary {
            ledger: RunLedger { header, results },
            executed: 0,
            skipped,
        });
    }

    let mut rendered: BTreeMap<usize, CorpusManifest> = BTreeMap::new();
    for c in &pending[..limit] {
        if !rendered.contains_key(&c.resolution) {
            rendered.insert(c.resolution, manifest.render_at(c.resolution)?);
        }
    }

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<ExperimentResult>)>();
    let workers = opts.workers.min(limit);
    let mut written = 0;
    let outcome: Result<()> = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, pending, rendered) = (&next, &stop, &pending, &rendered);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= limit {
                    break;
                }
                let cell = pending[k];
                let res = run_cell(cell, &rendered[&cell.resolution], config);
                if tx.send((k, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer = BTreeMap::new();
        for (k, res) in rx.iter() {
            buffer.insert(k, res);
            while let Some(res) = buffer.remove(&written) {
                let result = match res {
                    Ok(r) => r,
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        return Err(e);
                    }
                };
                write_line(&mut file, &result)?;
                log::info!(
                    "[{}/{}] {} -> {}",
                    skipped + written + 1,
                    cells.len(),
                    result.cell.describe(),
                    result
                        .accuracy_pct
                        .map_or_else(|| format!("{:?}", result.status), |a| format!("{a:.2}%"))
                );
                results.push(result);
                written += 1;
                if written == limit {
                    stop.store(true, Ordering::SeqCst);
                    return Ok(());
                }
            }
        }
        Ok(())
    });
    outcome?;

    Ok(RunSummary {
        ledger: RunLedger { header, results },
        executed: written,
        skipped,
    })
}

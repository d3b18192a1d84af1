//! Checkpoint file: one line of JSON header, then the parameters as
//! little-endian `f64`s in layout order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MaeModelConfig;
use super::params::{MaeLayout, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: MaeModelConfig,
    n_params: usize,
    rng_seed: u64,
}

pub fn save_checkpoint(
    path: &Path,
    config: &MaeModelConfig,
    params: &ParameterStore,
) -> Result<()> {
    params.check_matches(config)?;
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        config: *config,
        n_params: params.len(),
        rng_seed: params.rng_seed,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MaeModelConfig, ParameterStore)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    let header: Header = serde_json::from_slice(&line)?;
    header.config.validate()?;
    let layout = MaeLayout::new(&header.config);
    if layout.total != header.n_params {
        return Err(Error::format(
            "checkpoint",
            format!(
                "header claims {} parameters, config implies {}",
                header.n_params, layout.total
            ),
        ));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * layout.total {
        return Err(Error::format(
            "checkpoint",
            format!(
                "expected {} payload bytes, found {}",
                8 * layout.total,
                bytes.len()
            ),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        header.config,
        ParameterStore {
            values,
            layout: layout.entries,
            rng_seed: header.rng_seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::size_ladder;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = *size_ladder(16).unwrap().get("TOY-B").unwrap();
        let params = ParameterStore::init(&config, 12).unwrap();
        save_checkpoint(&path, &config, &params).unwrap();
        let (c2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(c2, config);
        assert_eq!(p2, params);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let config = *size_ladder(8).unwrap().get("TOY-A").unwrap();
        save_checkpoint(&path, &config, &ParameterStore::init(&config, 0).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

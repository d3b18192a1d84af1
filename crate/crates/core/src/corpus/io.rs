//! On-disk manifest layout:
//!
//! ```text
//! <dir>/manifest.jsonl   one {id, source, width, height, label, gen_seed} object per line
//! <dir>/pixels.f32       little-endian f32 pixel payloads, row-major, in record order
//! <dir>/corpus.json      {mixture, class_count, channels}
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusManifest, ImageRecord, MixtureSpec, SourceTag};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PIXELS_FILE: &str = "pixels.f32";
pub const META_FILE: &str = "corpus.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    source: SourceTag,
    width: usize,
    height: usize,
    label: Option<u32>,
    gen_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    mixture: MixtureSpec,
    class_count: usize,
    channels: usize,
}

fn record_line(r: &ImageRecord) -> RecordLine {
    RecordLine {
        id: r.id.clone(),
        source: r.source,
        width: r.width,
        height: r.height,
        label: r.label,
        gen_seed: r.gen_seed,
    }
}

fn meta_of(m: &CorpusManifest) -> CorpusMeta {
    CorpusMeta {
        mixture: m.mixture.clone(),
        class_count: m.class_count,
        channels: m.channels,
    }
}

pub fn save_manifest(manifest: &CorpusManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut lines = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    let mut pixels = BufWriter::new(File::create(dir.join(PIXELS_FILE))?);
    for r in &manifest.records {
        serde_json::to_writer(&mut lines, &record_line(r))?;
        lines.write_all(b"\n")?;
        for v in &r.pixels {
            pixels.write_all(&v.to_le_bytes())?;
        }
    }
    lines.flush()?;
    pixels.flush()?;

    let meta = serde_json::to_string_pretty(&meta_of(manifest))?;
    fs::write(dir.join(META_FILE), meta + "\n")?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let meta: CorpusMeta =
        serde_json::from_reader(BufReader::new(File::open(dir.join(META_FILE))?))?;
    let mut pixels = BufReader::new(File::open(dir.join(PIXELS_FILE))?);

    let mut records = Vec::new();
    for (n, line) in BufReader::new(File::open(dir.join(MANIFEST_FILE))?)
        .lines()
        .enumerate()
    {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::format("manifest line", format!("line {}: {e}", n + 1)))?;
        let len = rec.width * rec.height * meta.channels;
        let mut buf = vec![0u8; len * 4];
        pixels.read_exact(&mut buf).map_err(|_| {
            Error::format("pixel sidecar", format!("truncated at record {}", rec.id))
        })?;
        let values = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(ImageRecord {
            id: rec.id,
            source: rec.source,
            width: rec.width,
            height: rec.height,
            label: rec.label,
            gen_seed: rec.gen_seed,
            pixels: values,
        });
    }
    if pixels.read(&mut [0u8; 1])? != 0 {
        return Err(Error::format(
            "pixel sidecar",
            "trailing bytes after last record",
        ));
    }

    let manifest = CorpusManifest {
        records,
        mixture: meta.mixture,
        class_count: meta.class_count,
        channels: meta.channels,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// SHA-256 over the manifest's serialized metadata and pixel payloads.
pub fn manifest_fingerprint(manifest: &CorpusManifest) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&meta_of(manifest)).expect("metadata serializes"));
    for r in &manifest.records {
        h.update(serde_json::to_vec(&record_line(r)).expect("record serializes"));
        h.update(b"\n");
        for v in &r.pixels {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_synthetic_corpus;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_synthetic_corpus(37, &MixtureSpec::standard(), 3, 8, 4).unwrap();
        save_manifest(&m, dir.path()).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(manifest_fingerprint(&back), manifest_fingerprint(&m));

        let first = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let first = first.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["gen_seed", "height", "id", "label", "source", "width"]
        );

        let bytes = fs::metadata(dir.path().join(PIXELS_FILE)).unwrap().len();
        assert_eq!(bytes, 37 * 64 * 4);
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_synthetic_corpus(5, &MixtureSpec::standard(), 2, 8, 4).unwrap();
        save_manifest(&m, dir.path()).unwrap();
        let path = dir.path().join(PIXELS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_manifest(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn fingerprint_sees_pixels() {
        let mut m = build_synthetic_corpus(5, &MixtureSpec::standard(), 2, 8, 4).unwrap();
        let before = manifest_fingerprint(&m);
        m.records[3].pixels[0] = 0.0;
        assert_ne!(before, manifest_fingerprint(&m));
    }
}

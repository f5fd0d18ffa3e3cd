//! On-disk formats: atomic file writes, JSON-lines, config hashing,
//! binary graymap export and model checkpoints.

mod checkpoint;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_map, write_map, FeatureMap};

pub use checkpoint::{
    load_grid_model, load_hypernet, read_checkpoint, save_grid_model, save_hypernet, write_checkpoint,
    CheckpointHeader, CheckpointKind, CHECKPOINT_MAGIC,
};

pub const FORMAT_VERSION: u32 = 1;
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Write to a sibling temporary file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Hex SHA-256 of the value's JSON form with object keys sorted.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    atomic_write(path, to_jsonl(items)?.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_map_file(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut buf = Vec::new();
    write_map(&mut buf, map)?;
    atomic_write(path, &buf)
}

pub fn read_map_file(path: &Path) -> Result<FeatureMap> {
    read_map(&mut BufReader::new(fs::File::open(path)?))
}

/// Binary 8-bit graymap of the first channel; values are clamped to
/// `[lo, hi]` and scaled to `0..=255`.
pub fn encode_pgm(map: &FeatureMap, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    for y in 0..map.height() {
        for x in 0..map.width() {
            let v = ((map.get(y, x, 0) - lo) / span).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, map: &FeatureMap, lo: f64, hi: f64) -> Result<()> {
    atomic_write(path, &encode_pgm(map, lo, hi))
}

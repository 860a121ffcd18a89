//! `CTNSR v1` tensor files.
//!
//! Layout: the 5-byte magic `CTNSR`, a version byte (1), a rank byte, `rank`
//! little-endian `u32` extents, then the row-major little-endian `f32`
//! payload. Named tensor sets are stored as one file per tensor plus a
//! `manifest.json` mapping names to file names.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"CTNSR";
pub const VERSION: u8 = 1;
pub const MANIFEST: &str = "manifest.json";

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "CTNSR",
        reason: reason.into(),
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 || &bytes[..5] != MAGIC {
        return Err(bad("missing magic"));
    }
    if bytes[5] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = &bytes[header..];
    let n: usize = shape.iter().product();
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

/// Writes every tensor to `dir/<name>.ctnsr` plus the JSON manifest.
pub fn save_named(dir: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = BTreeMap::new();
    for (name, t) in tensors {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
            return Err(Error::InvalidArgument(format!("unsafe tensor name {name:?}")));
        }
        let file = format!("{name}.ctnsr");
        save(dir.join(&file), t)?;
        manifest.insert(name.clone(), file);
    }
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_named(dir: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let dir = dir.as_ref();
    let manifest: BTreeMap<String, String> = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    manifest
        .into_iter()
        .map(|(name, file)| Ok((name, load(dir.join(file))?)))
        .collect()
}

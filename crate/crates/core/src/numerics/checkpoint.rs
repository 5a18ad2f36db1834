//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/manifest.txt        key = value lines; one `param` line per tensor
//! <dir>/params/NNNN.bin     flat little-endian values, manifest order
//! ```
//!
//! A `param` line reads `param = <name> <rows> <cols> <relative path>`.

use std::fs;
use std::path::Path;

use super::param::ParamStore;
use super::tensor::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "vidmod-checkpoint/1";
pub const MANIFEST: &str = "manifest.txt";
pub const NONLINEARITY: &str = "gelu-tanh";

pub fn write_checkpoint<T: Element>(dir: &Path, store: &ParamStore<T>, meta: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir.join("params"))?;
    let mut manifest = String::new();
    manifest.push_str(&format!("format = {FORMAT_TAG}\n"));
    manifest.push_str(&format!("dtype = {}\n", T::DTYPE.as_str()));
    manifest.push_str(&format!("nonlinearity = {NONLINEARITY}\n"));
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!("bad meta entry {k:?}")));
        }
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }
    for (i, p) in store.iter().enumerate() {
        if p.name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("parameter name {:?} has whitespace", p.name)));
        }
        let rel = format!("params/{i:04}.bin");
        let mut bytes = Vec::with_capacity(p.value.len() * T::DTYPE.size_of());
        for &v in p.value.data() {
            v.write_le(&mut bytes);
        }
        fs::write(dir.join(&rel), bytes)?;
        manifest.push_str(&format!(
            "param = {} {} {} {}\n",
            p.name,
            p.value.rows(),
            p.value.cols(),
            rel
        ));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// `meta.*` key/value pairs of a checkpoint manifest.
pub type Meta = Vec<(String, String)>;

/// Loads a checkpoint, converting stored values to `T` if the stored dtype
/// differs. Returns the parameters and the `meta.*` entries.
pub fn read_checkpoint<T: Element>(dir: &Path) -> Result<(ParamStore<T>, Meta)> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut dtype = None;
    let mut store = ParamStore::new();
    let mut meta = Vec::new();
    let mut format_ok = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: expected `key = value`", lineno + 1)))?;
        match key {
            "format" => {
                if value != FORMAT_TAG {
                    return Err(Error::Checkpoint(format!("unsupported format {value:?}")));
                }
                format_ok = true;
            }
            "dtype" => dtype = Some(value.parse::<DType>()?),
            "nonlinearity" => {
                if value != NONLINEARITY {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint built with {value}, this build uses {NONLINEARITY}"
                    )));
                }
            }
            "param" => {
                let dtype = dtype.ok_or_else(|| Error::Checkpoint("dtype must precede params".into()))?;
                let fields: Vec<&str> = value.split_whitespace().collect();
                let [name, rows, cols, rel] = fields[..] else {
                    return Err(Error::Checkpoint(format!(
                        "manifest line {}: bad param entry",
                        lineno + 1
                    )));
                };
                let rows: usize = rows
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad rows {rows:?}")))?;
                let cols: usize = cols
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad cols {cols:?}")))?;
                let bytes = fs::read(dir.join(rel))?;
                let width = dtype.size_of();
                if bytes.len() != rows * cols * width {
                    return Err(Error::Checkpoint(format!(
                        "{name}: expected {} bytes, found {}",
                        rows * cols * width,
                        bytes.len()
                    )));
                }
                let data: Vec<T> = match dtype {
                    DType::F32 => bytes
                        .chunks(4)
                        .map(|b| T::from_f64_lossy(f32::read_le(b) as f64))
                        .collect(),
                    DType::F64 => bytes.chunks(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
                };
                store.push(name, Tensor::from_vec(rows, cols, data)?);
            }
            k => match k.strip_prefix("meta.") {
                Some(m) => meta.push((m.to_string(), value.to_string())),
                None => return Err(Error::Checkpoint(format!("unknown manifest key {k:?}"))),
            },
        }
    }
    if !format_ok {
        return Err(Error::Checkpoint("missing format tag".into()));
    }
    Ok((store, meta))
}

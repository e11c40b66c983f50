//! Checkpoint directories: `model.bin` holds the named arrays and
//! `manifest.json` the configuration and step count.
//!
//! `model.bin` layout, all integers little-endian u32:
//!
//! ```text
//! b"TDSAPRM1" count
//! repeated: name_len name_bytes ndims dims[ndims] f32[product(dims)]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};
use crate::trainer::{init_rng, TrainConfig};

const MAGIC: &[u8; 8] = b"TDSAPRM1";
pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub step: usize,
    pub epochs_done: usize,
    pub config: TrainConfig,
    pub params: Vec<String>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

fn u32_of(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v).map(u32::to_le_bytes).map_err(|_| bad(format!("{v} exceeds u32")))
}

pub fn encode_params(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32_of(params.entries.len())?);
    for p in &params.entries {
        out.extend_from_slice(&u32_of(p.name.len())?);
        out.extend_from_slice(p.name.as_bytes());
        let dims = p.value.shape().dims();
        out.extend_from_slice(&u32_of(dims.len())?);
        for d in dims {
            out.extend_from_slice(&u32_of(d)?);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Named arrays in file order.
pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<(String, Tensor4<f32>)>> {
    let mut c = Cursor(bytes);
    if c.take(MAGIC.len())? != MAGIC {
        return Err(bad("bad magic"));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let ndims = c.u32()?;
        if ndims != 4 {
            return Err(bad(format!("{name}: expected 4 dims, found {ndims}")));
        }
        let d = [c.u32()?, c.u32()?, c.u32()?, c.u32()?];
        let shape = Shape::new(d[0], d[1], d[2], d[3]);
        let raw = c.take(shape.numel() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor4::from_vec(shape, data)?));
    }
    if !c.0.is_empty() {
        return Err(bad(format!("{} trailing bytes", c.0.len())));
    }
    Ok(out)
}

/// Fills a freshly built parameter set for `cfg` from decoded arrays,
/// requiring the same names and shapes.
pub fn params_from_arrays(cfg: &TrainConfig, arrays: Vec<(String, Tensor4<f32>)>) -> Result<ModelParams<f32>> {
    let mut params = backbone::init_params(&cfg.backbone, &mut init_rng(0))?;
    if arrays.len() != params.entries.len() {
        return Err(bad(format!(
            "{} arrays stored, configuration needs {}",
            arrays.len(),
            params.entries.len()
        )));
    }
    for (entry, (name, value)) in params.entries.iter_mut().zip(arrays) {
        if entry.name != name || entry.value.shape() != value.shape() {
            return Err(bad(format!(
                "array {name} {} does not match {} {}",
                value.shape(),
                entry.name,
                entry.value.shape()
            )));
        }
        entry.value = value;
    }
    params.ensure_finite()?;
    Ok(params)
}

pub fn save(dir: &Path, params: &ModelParams<f32>, cfg: &TrainConfig, step: usize, epochs_done: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = dir.join(MODEL_FILE);
    fs::write(&model, encode_params(params)?).map_err(|e| Error::io(&model, e))?;
    let manifest = Manifest {
        format: 1,
        step,
        epochs_done,
        config: cfg.clone(),
        params: params.entries.iter().map(|p| p.name.clone()).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<(ModelParams<f32>, Manifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let model = dir.join(MODEL_FILE);
    let bytes = fs::read(&model).map_err(|e| Error::io(&model, e))?;
    let params = params_from_arrays(&manifest.config, decode_arrays(&bytes)?)?;
    Ok((params, manifest))
}

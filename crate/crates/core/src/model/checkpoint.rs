use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KopeError, Result};
use crate::phase_attention::PAIR_LAYOUT;

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"KOPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layout: String,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes `MAGIC`, a little-endian `u32` version, a `u64` header length, the
/// JSON header, then every tensor as raw little-endian `f64` in declaration
/// order.
pub fn write_checkpoint<W: Write>(mut w: W, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let named = params.named();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        layout: PAIR_LAYOUT.to_string(),
        dtype: DTYPE.to_string(),
        config: config.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in &named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelConfig, ModelParams)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(KopeError::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(KopeError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.layout != PAIR_LAYOUT || header.dtype != DTYPE {
        return Err(KopeError::Checkpoint(format!(
            "layout {:?} / dtype {:?} not supported",
            header.layout, header.dtype
        )));
    }
    let mut params = ModelParams::init(&header.config, 0)
        .map_err(|e| KopeError::Checkpoint(format!("stored config is invalid: {e}")))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(KopeError::Checkpoint(format!(
            "{} tensors stored, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(KopeError::Checkpoint(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }
    let mut buf = [0u8; 8];
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(KopeError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((header.config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), config, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

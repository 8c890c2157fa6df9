//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes   "GRWCKPT1"
//! version  u32       currently 1
//! kind     u32       1 = extractor, 2 = rewriter
//! config   9 x u32   vocab_size d_model heads enc_layers extractor_layers
//!                    dec_layers d_ff max_positions k_max
//! dropout  f64
//! count    u32       number of parameter blocks
//! block    u32 name-len, name bytes, u32 ndim, u32 dims.., f32 data..
//! ```
//!
//! Values are stored as raw 32-bit floats, so save -> load round-trips are
//! bitwise exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};

use super::{ExtractorModel, ModelConfig, ModelError, RewriterModel};

const MAGIC: &[u8; 8] = b"GRWCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Extractor,
    Rewriter,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Extractor => 1,
            CheckpointKind::Rewriter => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self, ModelError> {
        match code {
            1 => Ok(CheckpointKind::Extractor),
            2 => Ok(CheckpointKind::Rewriter),
            other => Err(ModelError::Checkpoint(format!("unknown model kind {other}"))),
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_checkpoint(
    path: &Path,
    kind: CheckpointKind,
    config: &ModelConfig,
    store: &ParamStore<f32>,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, kind.code())?;
    for v in [
        config.vocab_size,
        config.d_model,
        config.heads,
        config.enc_layers,
        config.extractor_layers,
        config.dec_layers,
        config.d_ff,
        config.max_positions,
        config.k_max,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    w.write_all(&config.dropout.to_le_bytes())?;
    write_u32(&mut w, store.len() as u32)?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name)?;
        let tensor = store.value(id);
        write_u32(&mut w, tensor.ndim() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads kind, config and the named parameter blocks.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointKind, ModelConfig, HashMap<String, Tensor<f32>>), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {:?} in {}",
            &magic,
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = CheckpointKind::from_code(read_u32(&mut r)?)?;
    let mut fields = [0usize; 9];
    for f in &mut fields {
        *f = read_u32(&mut r)? as usize;
    }
    let mut dropout_bytes = [0u8; 8];
    r.read_exact(&mut dropout_bytes)?;
    let config = ModelConfig {
        vocab_size: fields[0],
        d_model: fields[1],
        heads: fields[2],
        enc_layers: fields[3],
        extractor_layers: fields[4],
        dec_layers: fields[5],
        d_ff: fields[6],
        max_positions: fields[7],
        k_max: fields[8],
        dropout: f64::from_le_bytes(dropout_bytes),
    };
    let count = read_u32(&mut r)? as usize;
    let mut blocks = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if blocks.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate parameter `{name}`")));
        }
    }
    Ok((kind, config, blocks))
}

/// Fills a freshly built store from named blocks, requiring an exact match
/// of names and shapes in both directions.
fn fill_store(
    store: &mut ParamStore<f32>,
    mut blocks: HashMap<String, Tensor<f32>>,
) -> Result<(), ModelError> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let tensor = blocks.remove(&name).ok_or_else(|| {
            ModelError::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if tensor.shape() != store.value(id).shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = tensor;
    }
    if let Some(name) = blocks.keys().next() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint has unknown parameter `{name}`"
        )));
    }
    Ok(())
}

impl ExtractorModel {
    pub fn save(&self, path: &Path, store: &ParamStore<f32>) -> Result<(), ModelError> {
        save_checkpoint(path, CheckpointKind::Extractor, &self.config, store)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>), ModelError> {
        let (kind, config, blocks) = load_checkpoint(path)?;
        if kind != CheckpointKind::Extractor {
            return Err(ModelError::Checkpoint(format!(
                "{} holds a rewriter checkpoint, not an extractor",
                path.display()
            )));
        }
        let mut store = ParamStore::new();
        let model = ExtractorModel::new(config, &mut store, 0)?;
        fill_store(&mut store, blocks)?;
        Ok((model, store))
    }
}

impl RewriterModel {
    pub fn save(&self, path: &Path, store: &ParamStore<f32>) -> Result<(), ModelError> {
        save_checkpoint(path, CheckpointKind::Rewriter, &self.config, store)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore<f32>), ModelError> {
        let (kind, config, blocks) = load_checkpoint(path)?;
        if kind != CheckpointKind::Rewriter {
            return Err(ModelError::Checkpoint(format!(
                "{} holds an extractor checkpoint, not a rewriter",
                path.display()
            )));
        }
        let mut store = ParamStore::new();
        let model = RewriterModel::new(config, &mut store, 0)?;
        fill_store(&mut store, blocks)?;
        Ok((model, store))
    }
}

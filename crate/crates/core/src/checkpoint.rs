//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `DSDNCKPT`, a little-endian `u32` format version,
//! a `u64` header length followed by a JSON header, a `u32` tensor count, and
//! then per tensor a `u32` name length, the UTF-8 name, `u64` rows, `u64`
//! cols, and `rows * cols` little-endian `f64` values in row-major order.
//!
//! Writes go to a temporary sibling file that is renamed into place, so a
//! checkpoint path never holds a partial file.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Schema;
use crate::error::{DsdnError, Result};
use crate::model::{DsdnModel, ModelConfig};
use crate::tensor::Matrix;
use crate::tokenizer::Vocab;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DSDNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Training provenance stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: u8,
    pub epoch: usize,
    pub dev_loss: f64,
    pub dev_joint_ga: Option<f64>,
    /// Parameter groups that were not updated while producing this checkpoint.
    pub frozen_modules: Vec<String>,
    pub train_config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    schema: Schema,
    schema_hash: String,
    vocab: Vocab,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: DsdnModel,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            model_config: self.model.config.clone(),
            schema: self.model.schema.clone(),
            schema_hash: self.model.schema.content_hash(),
            vocab: self.model.vocab.clone(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let tmp = temp_path(path);
        let write = |tmp: &Path| -> std::io::Result<()> {
            let mut w = BufWriter::new(fs::File::create(tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&FORMAT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            w.write_all(&(self.model.store.len() as u32).to_le_bytes())?;
            for (_, p) in self.model.store.iter() {
                w.write_all(&(p.name.len() as u32).to_le_bytes())?;
                w.write_all(p.name.as_bytes())?;
                w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
                w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
                for v in p.value.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()
        };
        if let Err(e) = write(&tmp) {
            let _ = fs::remove_file(&tmp);
            return Err(DsdnError::io(&tmp, e));
        }
        fs::rename(&tmp, path).map_err(|e| DsdnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| DsdnError::io(path, e))?;
        let mut r = BufReader::new(file);
        let corrupt = |what: &str| DsdnError::Checkpoint(format!("{}: {what}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = read_u32(&mut r).map_err(|_| corrupt("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let header_len = read_u64(&mut r).map_err(|_| corrupt("truncated header length"))? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(|_| corrupt("truncated header"))?;
        let mut header: Header =
            serde_json::from_slice(&header).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.schema.content_hash() != header.schema_hash {
            return Err(corrupt("stored schema does not match its hash"));
        }
        header.vocab.reindex();
        let n = read_u32(&mut r).map_err(|_| corrupt("truncated tensor count"))? as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(&mut r).map_err(|_| corrupt("truncated tensor name"))? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| corrupt("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rows = read_u64(&mut r).map_err(|_| corrupt("truncated tensor shape"))? as usize;
            let cols = read_u64(&mut r).map_err(|_| corrupt("truncated tensor shape"))? as usize;
            let mut data = vec![0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)
                    .map_err(|_| corrupt(&format!("truncated payload of `{name}`")))?;
                *v = f64::from_le_bytes(buf);
            }
            values.push((name, Matrix::from_vec(rows, cols, data)));
        }
        let model = DsdnModel::from_values(header.model_config, header.schema, header.vocab, values)?;
        Ok(Self {
            meta: header.meta,
            model,
        })
    }

    /// Fails unless `schema` is the schema this checkpoint was trained on.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        let (expected, found) = (self.model.schema.content_hash(), schema.content_hash());
        if expected != found {
            return Err(DsdnError::Compatibility { expected, found });
        }
        Ok(())
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

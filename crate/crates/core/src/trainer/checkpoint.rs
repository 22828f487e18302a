//! Binary checkpoint container.
//!
//! ```text
//! "ACTLUMOS-CKPT\n"
//! u32 LE   format version
//! u64 LE   header length, then the JSON header (stage, fingerprint, config,
//!          rng state, epoch, history, tensor names and dims)
//! f64 LE   tensor values, row-major, in header order
//! 32 bytes SHA-256 of everything above
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clipgen::Dims;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::rng::RngState;

use super::config::{Stage, TrainConfig};
use super::metrics::EpochRecord;

pub const MAGIC: &[u8] = b"ACTLUMOS-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    fingerprint: String,
    config: TrainConfig,
    dims: Dims,
    num_classes: usize,
    epoch: usize,
    rng: RngState,
    history: Vec<EpochRecord>,
    step_losses: Vec<f64>,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Saved state of any training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub fingerprint: String,
    pub config: TrainConfig,
    pub dims: Dims,
    pub num_classes: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    /// Total loss after every optimizer step.
    pub step_losses: Vec<f64>,
    pub params: Vec<(String, ArrayD<f64>)>,
    pub optimizer: Option<AdamW>,
}

const OPT_FIRST: &str = "optimizer.first.";
const OPT_SECOND: &str = "optimizer.second.";

impl Checkpoint {
    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Stage { expected: stage.to_string(), found: self.stage.to_string() });
        }
        Ok(())
    }

    /// Errors unless `config` hashes to the stored fingerprint.
    pub fn check_fingerprint(&self, config: &TrainConfig) -> Result<()> {
        let expected = config.fingerprint();
        if expected != self.fingerprint {
            return Err(Error::Fingerprint { expected, found: self.fingerprint.clone() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &ArrayD<f64>)> = self.params.iter().map(|(n, a)| (n.clone(), a)).collect();
        if let Some(opt) = &self.optimizer {
            for (i, a) in opt.first.iter().enumerate() {
                tensors.push((format!("{OPT_FIRST}{i}"), a));
            }
            for (i, a) in opt.second.iter().enumerate() {
                tensors.push((format!("{OPT_SECOND}{i}"), a));
            }
        }
        let header = Header {
            stage: self.stage,
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            dims: self.dims,
            num_classes: self.num_classes,
            epoch: self.epoch,
            rng: self.rng.clone(),
            history: self.history.clone(),
            step_losses: self.step_losses.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: tensors.iter().map(|(n, a)| TensorEntry { name: n.clone(), dims: a.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(json.len() as u64)?;
        out.write_all(&json)?;
        for (_, a) in &tensors {
            for v in a.iter() {
                out.write_f64::<LittleEndian>(*v)?;
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { path: origin.to_path_buf(), reason };
        if bytes.len() < MAGIC.len() + 12 + 32 || !bytes.starts_with(MAGIC) {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let mut r = &bytes[MAGIC.len()..];
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch".into()));
        }
        let mut r = &body[MAGIC.len() + 4..];
        let header_len = r.read_u64::<LittleEndian>()? as usize;
        if header_len > r.len() {
            return Err(corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..header_len]).map_err(|e| corrupt(format!("header: {e}")))?;
        r = &r[header_len..];
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for t in &header.tensors {
            let n: usize = t.dims.iter().product();
            let mut values = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut values).map_err(|_| corrupt(format!("truncated tensor {}", t.name)))?;
            let a = ArrayD::from_shape_vec(IxDyn(&t.dims), values).map_err(|e| corrupt(e.to_string()))?;
            if t.name.starts_with(OPT_FIRST) {
                first.push(a);
            } else if t.name.starts_with(OPT_SECOND) {
                second.push(a);
            } else {
                params.push((t.name.clone(), a));
            }
        }
        if !r.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", r.len())));
        }
        let optimizer = header.optimizer_step.map(|step| AdamW {
            config: header.config.optimizer.adamw,
            step,
            first,
            second,
        });
        Ok(Self {
            stage: header.stage,
            fingerprint: header.fingerprint,
            config: header.config,
            dims: header.dims,
            num_classes: header.num_classes,
            epoch: header.epoch,
            rng: header.rng,
            history: header.history,
            step_losses: header.step_losses,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::MissingArtifact(format!("checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

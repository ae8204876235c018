//! Binary checkpoint format.
//!
//! ```text
//! magic "T5CKPT\0\0" | version u32 | config | vocab hash [32] | phase u8 | step u64
//! | loss history (u64 count, f64 each) | optimizer step u64
//! | tensor count u32 | tensors: name (u32 len + utf8), rank u32, dims u32.., f32 data
//! ```
//!
//! All integers and floats are little-endian. Tensors are the model
//! parameters followed by the optimizer's first and second moments, named
//! `adam.m.<param>` and `adam.v.<param>`.

use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::ArrayViewD;

use super::{ModelConfig, ModelError, ModelParams};
use crate::training::OptimizerState;

const MAGIC: &[u8; 8] = b"T5CKPT\0\0";
const VERSION: u32 = 1;

/// Training phase a checkpoint's step counter refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab_hash: [u8; 32],
    pub phase: Phase,
    pub step: u64,
    pub loss_history: Vec<f64>,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// A step-zero checkpoint with fresh optimizer state.
    pub fn new(params: ModelParams, vocab_hash: [u8; 32]) -> Self {
        let optimizer = OptimizerState::new(&params);
        Checkpoint {
            vocab_hash,
            phase: Phase::Pretrain,
            step: 0,
            loss_history: Vec::new(),
            params,
            optimizer,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn check_vocab(&self, vocab_hash: &[u8; 32]) -> Result<(), ModelError> {
        if &self.vocab_hash != vocab_hash {
            return Err(ModelError::VocabMismatch);
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let c = self.config();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [
            c.num_layers,
            c.d_model,
            c.d_ff,
            c.d_kv,
            c.num_heads,
            c.vocab_size,
            c.num_rel_buckets,
            c.max_rel_distance,
            c.max_source_len,
            c.max_target_len,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.dropout_rate.to_le_bytes())?;
        w.write_all(&self.vocab_hash)?;
        w.write_all(&[match self.phase {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
        }])?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.loss_history.len() as u64).to_le_bytes())?;
        for loss in &self.loss_history {
            w.write_all(&loss.to_le_bytes())?;
        }
        w.write_all(&self.optimizer.step.to_le_bytes())?;

        let mut tensors: Vec<(String, ArrayViewD<'_, f64>)> = self.params.tensors();
        for (prefix, moments) in [("adam.m.", &self.optimizer.first), ("adam.v.", &self.optimizer.second)] {
            tensors.extend(
                moments
                    .tensors()
                    .into_iter()
                    .map(|(name, t)| (format!("{prefix}{name}"), t)),
            );
        }
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(tensor.len() * 4);
            for &v in tensor.iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut file = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut file = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut dims = [0usize; 10];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let dropout_rate = f64::from_le_bytes(read_array(r)?);
        let config = ModelConfig {
            num_layers: dims[0],
            d_model: dims[1],
            d_ff: dims[2],
            d_kv: dims[3],
            num_heads: dims[4],
            vocab_size: dims[5],
            num_rel_buckets: dims[6],
            max_rel_distance: dims[7],
            max_source_len: dims[8],
            max_target_len: dims[9],
            dropout_rate,
        };
        config.validate()?;
        let vocab_hash: [u8; 32] = read_array(r)?;
        let phase = match read_array::<1>(r)?[0] {
            0 => Phase::Pretrain,
            1 => Phase::Finetune,
            other => return Err(ModelError::Checkpoint(format!("unknown phase tag {other}"))),
        };
        let step = u64::from_le_bytes(read_array(r)?);
        let n_loss = u64::from_le_bytes(read_array(r)?) as usize;
        let loss_history = (0..n_loss)
            .map(|_| read_array(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        let optimizer_step = u64::from_le_bytes(read_array(r)?);

        let mut params = ModelParams::zeros(&config);
        let mut first = ModelParams::zeros(&config);
        let mut second = ModelParams::zeros(&config);
        let n_tensors = read_u32(r)? as usize;
        let expected = 3 * params.tensors().len();
        if n_tensors != expected {
            return Err(ModelError::Checkpoint(format!(
                "expected {expected} tensors, found {n_tensors}"
            )));
        }
        for (prefix, target) in [("", &mut params), ("adam.m.", &mut first), ("adam.v.", &mut second)] {
            for (name, mut tensor) in target.tensors_mut() {
                let stored_name = read_string(r)?;
                if stored_name != format!("{prefix}{name}") {
                    return Err(ModelError::Checkpoint(format!(
                        "expected tensor {prefix}{name}, found {stored_name}"
                    )));
                }
                let rank = read_u32(r)? as usize;
                let shape = (0..rank)
                    .map(|_| read_u32(r).map(|d| d as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                if shape != tensor.shape() {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor {stored_name} has shape {shape:?}, config implies {:?}",
                        tensor.shape()
                    )));
                }
                let mut buf = vec![0u8; tensor.len() * 4];
                r.read_exact(&mut buf)?;
                for (v, bytes) in tensor.iter_mut().zip(buf.chunks_exact(4)) {
                    *v = f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64;
                }
            }
        }
        Ok(Checkpoint {
            vocab_hash,
            phase,
            step,
            loss_history,
            params,
            optimizer: OptimizerState {
                first,
                second,
                step: optimizer_step,
            },
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_string(r: &mut impl Read) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(ModelError::Checkpoint("tensor name too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::toy(30);
        c.d_model = 8;
        c.d_ff = 16;
        c.d_kv = 4;
        c.num_heads = 2;
        c
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let params = init_params(&tiny_config(), 3);
        let mut ckpt = Checkpoint::new(params, [7; 32]);
        ckpt.step = 42;
        ckpt.phase = Phase::Finetune;
        ckpt.loss_history = vec![3.5, 2.25, 0.1];
        ckpt.optimizer.step = 42;
        ckpt.optimizer.first.embedding[[1, 1]] = 0.5;
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_corruption() {
        let ckpt = Checkpoint::new(init_params(&tiny_config(), 3), [0; 32]);
        let mut bytes = ckpt.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(ModelError::Checkpoint(_))
        ));
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let ckpt = Checkpoint::new(init_params(&tiny_config(), 3), [0; 32]);
        let mut bytes = ckpt.to_bytes();
        // d_ff lives at offset 8 (magic) + 4 (version) + 2 * 4.
        bytes[20..24].copy_from_slice(&32u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn vocab_hash_check() {
        let ckpt = Checkpoint::new(init_params(&tiny_config(), 3), [1; 32]);
        ckpt.check_vocab(&[1; 32]).unwrap();
        assert!(matches!(ckpt.check_vocab(&[2; 32]), Err(ModelError::VocabMismatch)));
    }
}

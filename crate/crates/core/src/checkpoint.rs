//! Binary checkpoints. All integers and doubles are little-endian:
//!
//! ```text
//! magic "VSMCKPT\0" | version u32 | config_len u32 | config TOML bytes
//! | epoch u32 | param_count u32
//! | per param: name_len u32, name, ndim u32, dims u32 * ndim, values f64 * n
//! | adam_step u64 | per param: m f64 * n, v f64 * n
//! | crc32 u32 of every preceding byte
//! ```

use std::path::Path;

use crate::model::Stage1Model;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VSMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("parameter {name}: checkpoint has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint parameters {found:?} do not match the model's {expected:?}")]
    ParamMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// TOML of the run configuration that produced the checkpoint.
    pub config: String,
    /// Completed training epochs.
    pub epoch: u32,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn capture(model: &Stage1Model, optimizer: &AdamState, epoch: u32, config: String) -> Self {
        let store = model.params();
        Self {
            config,
            epoch,
            params: store.names().iter().cloned().zip(store.values().iter().cloned()).collect(),
            optimizer: optimizer.clone(),
        }
    }

    /// Copies the parameters into `model` after checking names and shapes.
    pub fn restore_into(&self, model: &mut Stage1Model) -> Result<(), CheckpointError> {
        let names: Vec<String> = self.params.iter().map(|p| p.0.clone()).collect();
        if names != model.params().names() {
            return Err(CheckpointError::ParamMismatch {
                expected: model.params().names().to_vec(),
                found: names,
            });
        }
        for ((name, t), cur) in self.params.iter().zip(model.params().values()) {
            if t.shape() != cur.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: cur.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for ((_, t), cur) in self.params.iter().zip(model.params_mut().values_mut()) {
            *cur = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config.len() as u32);
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.epoch);
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f64s(&mut out, t.data());
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            put_f64s(&mut out, m.data());
            put_f64s(&mut out, v.data());
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::CorruptFile("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::CorruptFile("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config_len = r.u32()? as usize;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| CheckpointError::CorruptFile("config is not UTF-8".into()))?;
        let epoch = r.u32()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::CorruptFile("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().product();
            let t = Tensor::new(&shape, r.f64s(n)?).map_err(|e| CheckpointError::CorruptFile(e.to_string()))?;
            params.push((name, t));
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for (_, t) in &params {
            m.push(Tensor::new(t.shape(), r.f64s(t.len())?).expect("shape from parameter"));
            v.push(Tensor::new(t.shape(), r.f64s(t.len())?).expect("shape from parameter"));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::CorruptFile(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            params,
            optimizer: AdamState { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::CorruptFile("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::CorruptFile("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Stage1Config;

    fn small() -> Stage1Model {
        Stage1Model::new(Stage1Config {
            d_enc: 16,
            heads: 2,
            ff_hidden: 16,
            fusion_hidden: 16,
            gcn_channels: 8,
            gcn_blocks: 2,
            ..Stage1Config::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = small();
        let mut opt = AdamState::new(model.params().values());
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.125;
        let ck = Checkpoint::capture(&model, &opt, 3, "[train]\nepochs = 4\n".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
        let mut fresh = Stage1Model::new(Stage1Config { seed: 9, ..model.config().clone() }).unwrap();
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.params(), model.params());
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let model = small();
        let bytes = Checkpoint::capture(&model, &AdamState::new(model.params().values()), 0, String::new()).to_bytes();
        // flipping any bit of the body or the stored checksum is caught
        for i in (12..bytes.len()).step_by(997).chain([bytes.len() - 1]) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::CorruptFile(_))), "byte {i}");
        }
        let mut b = bytes.clone();
        b[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::VersionMismatch { found: 2, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(CheckpointError::CorruptFile(_))));
    }

    #[test]
    fn wrong_config_is_rejected() {
        let model = small();
        let ck = Checkpoint::capture(&model, &AdamState::new(model.params().values()), 0, String::new());
        let mut wider = Stage1Model::new(Stage1Config { d_enc: 24, ..model.config().clone() }).unwrap();
        assert!(matches!(ck.restore_into(&mut wider), Err(CheckpointError::ShapeMismatch { .. })));
        let mut no_lm = Stage1Model::new(Stage1Config { use_landmarks: false, ..model.config().clone() }).unwrap();
        assert!(matches!(ck.restore_into(&mut no_lm), Err(CheckpointError::ParamMismatch { .. })));
    }
}

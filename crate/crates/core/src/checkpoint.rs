//! Binary checkpoints.
//!
//! Layout: magic `DMANCKPT`, `u32` format version, `u64` header length, a
//! JSON header, then every parameter block and every velocity buffer as
//! little-endian `f64` in block order. All integers little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{read_file, write_atomic};
use crate::error::{DmanError, Result};
use crate::model::{DmanModel, ModelConfig};
use crate::optim::Parameterized;
use crate::tensor::Tensor;
use crate::trainer::{parameter_checksum, RngState};

pub const MAGIC: &[u8; 8] = b"DMANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    run: RunConfig,
    model: ModelConfig,
    epoch: usize,
    rng_seed: [u8; 32],
    /// Decimal string; JSON numbers cannot hold a `u128` portably.
    rng_word_pos: String,
    train_ids: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    checksum: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: DmanModel,
    pub velocity: Vec<Tensor>,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: RngState,
    /// Bundle node ids the model was trained on.
    pub train_ids: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let blocks = self.model.blocks();
        let header = Header {
            run: self.run.clone(),
            model: self.model.config.clone(),
            epoch: self.epoch,
            rng_seed: self.rng.seed,
            rng_word_pos: self.rng.word_pos.to_string(),
            train_ids: self.train_ids.clone(),
            shapes: blocks.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            checksum: parameter_checksum(&self.model),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blocks.iter().map(|(_, t)| *t).chain(&self.velocity) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |expected: usize| DmanError::Corrupt {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < 20 {
            return Err(corrupt(20));
        }
        if &bytes[..8] != MAGIC {
            return Err(DmanError::Parse {
                path: path.to_path_buf(),
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(DmanError::Version {
                what: path.display().to_string(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).ok_or_else(|| corrupt(usize::MAX))?;
        if bytes.len() < body {
            return Err(corrupt(body));
        }
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| DmanError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let floats: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let expected = body + 2 * floats * 8;
        if bytes.len() != expected {
            return Err(corrupt(expected));
        }
        let mut values = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |shape: &Vec<usize>| -> Result<Tensor> {
            let n = shape.iter().product();
            Ok(Tensor::new(shape.clone(), values.by_ref().take(n).collect())?)
        };
        let params = header.shapes.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        let velocity = header.shapes.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        let model = DmanModel::from_blocks(header.model, params)?;
        let actual = parameter_checksum(&model);
        if actual != header.checksum {
            return Err(DmanError::Parse {
                path: path.to_path_buf(),
                msg: format!("parameter checksum {actual} does not match header {}", header.checksum),
            });
        }
        let word_pos = header.rng_word_pos.parse().map_err(|_| DmanError::Parse {
            path: path.to_path_buf(),
            msg: format!("bad generator position `{}`", header.rng_word_pos),
        })?;
        Ok(Self {
            run: header.run,
            model,
            velocity,
            epoch: header.epoch,
            rng: RngState {
                seed: header.rng_seed,
                word_pos,
            },
            train_ids: header.train_ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let model = DmanModel::new(ModelConfig::new(5, 3, 4), 2).unwrap();
        let velocity = model
            .blocks()
            .iter()
            .map(|(_, t)| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * 0.5).collect()).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.set_word_pos(1234);
        Checkpoint {
            run: RunConfig::default(),
            model,
            velocity,
            epoch: 7,
            rng: RngState::capture(&rng),
            train_ids: vec![0, 2, 3],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.velocity, c.velocity);
        assert_eq!((back.epoch, back.rng, &back.train_ids), (7, c.rng, &c.train_ids));
        assert_eq!(back.run, c.run);
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample().to_bytes();
        let r = Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("x"));
        match r {
            Err(DmanError::Corrupt { expected, actual, .. }) => assert_eq!(expected - actual, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn flipped_parameter_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        // last byte of the first parameter block sits well before the velocities
        bytes[n / 2 - 1] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(DmanError::Version { found: 9, .. })
        ));
    }
}

//! Self-describing JSON checkpoints of a sub-model bank and the training
//! configuration that produced it.
//!
//! Floats are written with shortest round-trip formatting and parsed back
//! exactly, so a save/load cycle is bit-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::SubModelBank;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "rls-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub bank: SubModelBank,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct Envelope<'a> {
    format: &'a str,
    version: u32,
    #[serde(flatten)]
    body: &'a Checkpoint,
}

#[derive(Deserialize)]
struct OwnedEnvelope {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: Checkpoint,
}

pub fn to_bytes(checkpoint: &Checkpoint) -> Result<Vec<u8>> {
    let env = Envelope {
        format: CHECKPOINT_FORMAT,
        version: CHECKPOINT_VERSION,
        body: checkpoint,
    };
    Ok(serde_json::to_vec(&env)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let env: OwnedEnvelope = serde_json::from_slice(bytes).map_err(|e| Error::Format {
        context: "checkpoint".into(),
        reason: e.to_string(),
    })?;
    if env.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            context: "checkpoint".into(),
            reason: format!("unexpected format tag {:?}", env.format),
        });
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            context: "checkpoint".into(),
            reason: format!("unsupported version {}", env.version),
        });
    }
    env.body.bank.validate()?;
    env.body.train.validate()?;
    Ok(env.body)
}

pub fn save(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(checkpoint)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::layers::Architecture;

    fn bank() -> Checkpoint {
        let arch = Architecture::mlp(vec![1, 2, 3], &[7], 4);
        Checkpoint {
            bank: SubModelBank::build(arch, 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap(),
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = bank();
        let back = from_bytes(&to_bytes(&b).unwrap()).unwrap();
        for (x, y) in b.bank.params().iter().zip(back.bank.params()) {
            let xs: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let ys: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xs, ys);
        }
        assert_eq!(b, back);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let b = bank();
        save(&b, &path).unwrap();
        assert_eq!(load(&path).unwrap(), b);
    }

    #[test]
    fn wrong_tag_rejected() {
        let text = String::from_utf8(to_bytes(&bank()).unwrap())
            .unwrap()
            .replace(CHECKPOINT_FORMAT, "other");
        assert!(matches!(from_bytes(text.as_bytes()), Err(Error::Format { .. })));
    }

    #[test]
    fn garbage_rejected() {
        assert!(matches!(from_bytes(b"not json"), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load("/nonexistent/bank.json"), Err(Error::Io { .. })));
    }
}

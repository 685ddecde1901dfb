//! Named random streams split from one master seed.
//!
//! Each stream is seeded with `SHA-256(master_le ‖ name)`, so streams never
//! share state and adding a consumer of one leaves the others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const MASK: &str = "mask";
pub const SHUFFLE: &str = "shuffle";
pub const ATTACK: &str = "attack";
pub const DEFENSE: &str = "defense";
pub const EVAL: &str = "eval";
pub const DIVERSITY: &str = "diversity";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn key(&self, name: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update(name.as_bytes());
        h.finalize().into()
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key(name))
    }

    /// Stream for one labelled consumer inside a family, e.g. the attack
    /// stream for one row of the attack table.
    pub fn sub_stream(&self, family: &str, label: &str) -> ChaCha8Rng {
        self.stream(&format!("{family}/{label}"))
    }
}

pub fn seed_streams(master: u64) -> SeedStreams {
    SeedStreams::new(master)
}

//! Seed derivation for reproducible randomness.
//!
//! Every stochastic consumer (parameter init, dropout, batch sampling,
//! environment resets, exploration noise) draws from its own ChaCha8 stream.
//! Streams are addressed by a root seed, a label and a path of integer
//! indices; the stream key is the SHA-256 digest of that address, so sibling
//! streams never overlap and adding a new consumer never perturbs existing
//! ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Address of an independent random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedPath {
    root: u64,
    parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Label(String),
    Index(u64),
}

impl SeedPath {
    pub fn new(root: u64) -> Self {
        Self {
            root,
            parts: Vec::new(),
        }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Child stream named by `label`.
    pub fn child(&self, label: &str) -> Self {
        let mut parts = self.parts.clone();
        parts.push(Part::Label(label.to_owned()));
        Self {
            root: self.root,
            parts,
        }
    }

    /// Child stream addressed by an integer.
    pub fn index(&self, i: u64) -> Self {
        let mut parts = self.parts.clone();
        parts.push(Part::Index(i));
        Self {
            root: self.root,
            parts,
        }
    }

    /// 64-bit seed summarizing this address.
    pub fn seed_u64(&self) -> u64 {
        let key = self.key();
        u64::from_le_bytes(key[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::from_seed(self.key())
    }

    fn key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"offrl-seed-v1");
        h.update(self.root.to_le_bytes());
        for part in &self.parts {
            match part {
                Part::Label(s) => {
                    h.update([0u8]);
                    h.update((s.len() as u64).to_le_bytes());
                    h.update(s.as_bytes());
                }
                Part::Index(i) => {
                    h.update([1u8]);
                    h.update(i.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }
}

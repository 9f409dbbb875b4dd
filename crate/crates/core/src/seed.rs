//! Named random substreams derived from a single run seed.
//!
//! Each consumer (training, ordering, shuffles, ...) draws from its own stream
//! so that enabling one ablation never perturbs the randomness of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub const TRAINING: &str = "training";
pub const INIT: &str = "retriever-init";
pub const ORDERING: &str = "ordering";
pub const SHUFFLE: &str = "shuffle";
pub const RANDOM_DEMOS: &str = "random-demos";
pub const JITTER: &str = "jitter";

pub fn substream(seed: u64, name: &str) -> Rng {
    substream_indexed(seed, name, 0)
}

/// Stream for item `index` of a named family, e.g. one per relation.
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

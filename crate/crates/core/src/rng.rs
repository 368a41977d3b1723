//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by
//! `(master seed, purpose, client, round)`. Streams never share state, so the
//! numbers a client sees do not depend on how many threads run or in which
//! order tasks are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Partition = 3,
    Capability = 4,
    Selection = 5,
    Batch = 6,
    Pattern = 7,
    Bandit = 8,
    Jitter = 9,
    BanditInit = 10,
    Verify = 11,
}

/// Derive the stream for one `(purpose, client, round)` tuple.
pub fn stream(master: u64, purpose: Purpose, client: u64, round: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&client.to_le_bytes());
    key[24..32].copy_from_slice(&round.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

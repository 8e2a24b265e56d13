//! Keyed random streams.
//!
//! Every stream is a ChaCha8 generator whose 256-bit key is built from
//! `(seed, round, client, purpose, sub)`. Streams never share state, so the
//! order in which clients are simulated (or the number of worker threads)
//! cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Separates streams that share a `(seed, round, client)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    Local = 0,
    ClientSampling = 1,
    EvalSampling = 2,
    GroupLoss = 3,
    SnapshotIndex = 4,
    Init = 5,
    Data = 6,
    Holdout = 7,
    Partition = 8,
    Truth = 9,
}

/// Coordinate used for streams owned by the server rather than a client.
pub const SERVER: u64 = u64::MAX;

/// The stream keyed by `(seed, round, client)`.
pub fn rng_stream(seed: u64, round: u64, client: u64) -> Stream {
    keyed_stream(seed, round, client, Purpose::Local, 0)
}

pub fn keyed_stream(seed: u64, round: u64, client: u64, purpose: Purpose, sub: u32) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&round.to_le_bytes());
    key[16..24].copy_from_slice(&client.to_le_bytes());
    key[24..28].copy_from_slice(&(purpose as u32).to_le_bytes());
    key[28..32].copy_from_slice(&sub.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

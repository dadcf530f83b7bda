//! Seed derivation.
//!
//! Every random draw comes from a ChaCha8 generator seeded by
//! `derive(seed, stream, index)`: the run seed, a named [`Stream`], and an
//! index within that stream (record number, epoch, parameter slot). The
//! mixing is SplitMix64 applied three times, so streams never share a
//! generator and adding a record or parameter never shifts the draws of
//! another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Synthetic expression sampling; index = record number.
    Corpus = 1,
    /// Parameter initialization; index = hash of the parameter name.
    Init = 2,
    /// Observation noise of the toy source; index = (epoch, record) pair.
    SourceNoise = 3,
    /// Batch order; index = epoch.
    Shuffle = 4,
    /// Random fixtures in checks and the gradcheck command.
    Check = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

pub fn rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}

/// FNV-1a, used to turn parameter names into stream indices.
pub fn name_index(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Stream index for a (major, minor) pair such as (epoch, record).
pub fn pair_index(major: u64, minor: u64) -> u64 {
    splitmix64(major) ^ minor
}

//! Seed splitting.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from
//! `(root seed, purpose, index)`. The index is the iteration number for
//! per-iteration streams and the point id for simulator seeds. Because no
//! generator state is carried between iterations, a run resumed from a
//! checkpoint replays exactly the same random numbers.
//!
//! Derivation: `h = mix(root)`, `h = mix(h ^ purpose)`, `h = mix(h ^ index)`,
//! where `mix` is the SplitMix64 finalizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose tags for the derived streams. The discriminants are part of the
/// reproducibility contract and must never be renumbered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Design = 1,
    Pool = 2,
    Fantasy = 3,
    Hyperopt = 4,
    Reducer = 5,
    MeanNet = 6,
    Simulator = 7,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(root: u64, stream: Stream, index: u64) -> u64 {
    let h = mix(root);
    let h = mix(h ^ stream as u64);
    mix(h ^ index)
}

pub fn stream_rng(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, stream, index))
}

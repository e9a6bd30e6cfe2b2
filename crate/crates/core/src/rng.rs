//! Seeded random streams.
//!
//! Every tensor that consumes randomness draws from its own ChaCha8 stream,
//! keyed by the run seed and a fixed stream id. Streams never share state, so
//! the order in which tensors are generated (or the number of threads that
//! generate them) cannot change any value.
//!
//! | stream id            | consumer                                   |
//! |----------------------|--------------------------------------------|
//! | `POSITIONS`          | node coordinates of the static graph       |
//! | `PHASES`             | per-node, per-channel sinusoid phases      |
//! | `FEATURE_NOISE`      | innovation noise of the feature process    |
//! | `FEATURE_MASK`       | held-out feature draws                     |
//! | `EDGE_MASK`          | held-out edge draws                        |
//! | `ANCHORS`            | anchor node selection                      |
//! | `PARAM_INIT`         | parameter initialization (xor name hash)   |
//! | `EPOCH_BASE + e`     | window shuffling in epoch `e`              |
//! | `window_stream(...)` | reparameterization noise and initial state |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const POSITIONS: u64 = 1;
pub const PHASES: u64 = 2;
pub const FEATURE_NOISE: u64 = 3;
pub const FEATURE_MASK: u64 = 4;
pub const EDGE_MASK: u64 = 5;
pub const ANCHORS: u64 = 6;
pub const PARAM_INIT: u64 = 7;
pub const MF_INIT: u64 = 8;
pub const EPOCH_BASE: u64 = 1 << 32;
const WINDOW_BASE: u64 = 1 << 48;

/// A generator for stream `stream` of run `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for the stochastic parts of one forward pass over one window.
pub fn window_stream(seed: u64, epoch: u64, window_start: u64) -> Rng {
    stream(
        seed,
        WINDOW_BASE ^ (epoch.wrapping_mul(0x9E37_79B9) << 20) ^ window_start,
    )
}

/// FNV-1a, used to key per-parameter init streams by name.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

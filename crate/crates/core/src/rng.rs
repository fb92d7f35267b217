//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha stream addressed by
//! `(run seed, stage, time, series, draw)`. The stream for one address does
//! not depend on how many other addresses were visited before, so serial and
//! parallel execution produce identical draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which part of the filter cycle a stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    /// Prior draws used for forecasting.
    Forecast = 1,
    /// Posterior draws used for recoupling.
    Posterior = 2,
    /// Synthetic data generation.
    Simulation = 3,
    /// Free slot for tests and ad-hoc experiments.
    Auxiliary = 4,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for all streams of one `(seed, stage, time)` triple.
#[derive(Debug, Clone, Copy)]
pub struct StreamKey {
    key: [u8; 32],
}

impl StreamKey {
    pub fn new(seed: u64, stage: Stage, time: u64) -> Self {
        let mut state = seed;
        let a = splitmix64(&mut state);
        state ^= (stage as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
        let b = splitmix64(&mut state);
        state ^= time.wrapping_mul(0xA076_1D64_78BD_642F);
        let c = splitmix64(&mut state);
        let d = splitmix64(&mut state);
        let mut key = [0u8; 32];
        for (chunk, word) in key.chunks_exact_mut(8).zip([a, b, c, d]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        StreamKey { key }
    }

    /// Independent stream for one `(series, draw)` pair.
    pub fn stream(&self, series: usize, draw: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(((series as u64) << 32) | (draw as u64 & 0xFFFF_FFFF));
        rng
    }
}

/// Shorthand for a single addressed stream.
pub fn substream(seed: u64, stage: Stage, time: u64, series: usize, draw: usize) -> ChaCha8Rng {
    StreamKey::new(seed, stage, time).stream(series, draw)
}

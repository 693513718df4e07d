//! Seeded random streams.
//!
//! Every stochastic routine draws from a [`RngStream`], which is ChaCha8.
//! Parallel work is split into substreams keyed by a tuple of integers
//! (seed, purpose tag, path id, block index, ...); the key is hashed with
//! SplitMix64 into a 256-bit ChaCha seed. Because each block of work owns its
//! stream, results do not depend on scheduling or on the number of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// Purpose tags keep substreams for different jobs disjoint.
pub mod tag {
    pub const PATH_MOMENTS: u64 = 0x4d4f_4d45;
    pub const TRIAL: u64 = 0x5452_4941;
    pub const ORACLE: u64 = 0x4f52_4143;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream seeded directly from a user seed.
pub fn from_seed(seed: u64) -> RngStream {
    substream(seed, &[])
}

/// Independent stream for the given key path under `seed`.
pub fn substream(seed: u64, keys: &[u64]) -> RngStream {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &k in keys {
        state ^= k.wrapping_mul(0xd6e8_feb8_6659_fd93).rotate_left(17) ^ acc;
        acc = splitmix64(&mut state);
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Runs `f` on a dedicated rayon pool with `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `name` ("dataset", "init", "train", ...).
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Generator for one training iteration, so no RNG state has to be saved.
pub fn iteration_stream(seed: u64, name: &str, iteration: usize) -> ChaCha8Rng {
    let mut rng = substream(seed, name);
    rng.set_word_pos((iteration as u128) << 20);
    rng
}

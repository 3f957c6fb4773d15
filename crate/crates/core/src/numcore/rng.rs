//! Deterministic randomness plumbing.
//!
//! Every stochastic component takes an explicit u64 seed and owns a ChaCha12
//! stream derived from it. Derivation goes through splitmix64 so that nearby
//! seeds (base, base+1, ...) and nearby purpose tags produce statistically
//! unrelated streams. ChaCha12 is pinned directly (rather than `StdRng`) so a
//! rand upgrade can never silently change sampled bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type DetRng = ChaCha12Rng;

/// splitmix64 finalizer; good avalanche, stable forever.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with a purpose tag (and optional index) into a fresh seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// Stream for `(base, tag, index)`; the workhorse constructor.
pub fn stream(base: u64, tag: &str, index: u64) -> DetRng {
    DetRng::seed_from_u64(derive_seed(base, tag, index))
}

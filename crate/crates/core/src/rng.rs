//! Counter-based random streams.
//!
//! Every path owns an independent ChaCha8 stream selected by
//! `(master seed, path index)`. ChaCha is a counter-mode generator, so the
//! draws of path `p` are a pure function of the seed and `p` and do not depend
//! on which thread produced them or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifier for path `path` under `seed`.
pub fn path_stream(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Auxiliary stream family, disjoint from the path streams, for draws that
/// are not tied to a simulated path (sampling points, random directions).
pub fn aux_stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(tag);
    rng
}

//! Seeded random streams. All randomness derives from one run seed; each
//! consumer draws from its own named stream so it can be re-seeded alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SYNTH: &str = "synth";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";

fn stream_id(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn substream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

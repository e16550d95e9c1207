//! Deterministic random streams.
//!
//! Every random draw in a run comes from one run seed, split by a pipeline
//! stage id and an index within that stage. Streams for different
//! `(stage, index)` pairs never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stage identifiers used to split the run seed.
pub mod stage {
    pub const FALSIFY: u8 = 0;
    pub const MODEL_DATASET: u8 = 1;
    pub const FLOW_INIT: u8 = 2;
    pub const MH_CHAIN: u8 = 3;
    pub const SELECT_INITIAL: u8 = 4;
    pub const TRUE_SYSTEM: u8 = 5;
    pub const GPR_STARTS: u8 = 6;
    pub const NEXT_POINT: u8 = 7;
    pub const EVALUATE: u8 = 8;
    pub const MH_PILOT: u8 = 9;
}

const INDEX_BITS: u32 = 56;
const INDEX_MASK: u64 = (1 << INDEX_BITS) - 1;

/// Returns the stream for `(run_seed, stage, index)`.
///
/// The stage occupies the top 8 bits of the ChaCha stream id and the index
/// the low 56 bits, so indices must stay below 2^56.
pub fn seeded_rng(run_seed: u64, stage: u8, index: u64) -> Rng {
    debug_assert!(index <= INDEX_MASK, "stream index exceeds 56 bits");
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(((stage as u64) << INDEX_BITS) | (index & INDEX_MASK));
    rng
}

/// Derives a 64-bit seed for a sub-stream, used where a component takes a
/// plain `u64` seed (e.g. a simulator).
pub fn derive_seed(run_seed: u64, stage: u8, index: u64) -> u64 {
    use rand::RngCore;
    seeded_rng(run_seed, stage, index).next_u64()
}

//! Derivation of independent generator seeds from a run seed.
//!
//! Every random stream (epoch order, masking at a given step, queue init)
//! is keyed by `(run seed, stream, index)`, so resuming at step `s` needs no
//! saved generator state beyond `s` itself.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream as u64) ^ index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    EpochOrder = 1,
    Masking = 2,
    Queue = 3,
    Init = 4,
    Warmup = 5,
    Finetune = 6,
    Data = 7,
}

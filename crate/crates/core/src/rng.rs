//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose 256-bit
//! key is built from a small tuple of integers (run seed, epoch, example index,
//! purpose tag, ...). A stream is therefore a pure function of its key: the
//! order in which examples are processed and the number of worker threads
//! cannot change any value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for unrelated uses disjoint even when the
/// remaining key words coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Augment = 1,
    Shuffle = 2,
    Init = 3,
    Queue = 4,
    Synthetic = 5,
    Subset = 6,
    Classifier = 7,
    KCenters = 8,
}

/// Build a generator from a purpose tag and up to three key words.
pub fn keyed(stream: Stream, seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..32].copy_from_slice(&(stream as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Augmentation stream for one view of one example in one epoch.
pub fn augment_stream(seed: u64, epoch: u64, example_index: u64, view_id: u64) -> ChaCha8Rng {
    let mut rng = keyed(Stream::Augment, seed, epoch, example_index);
    // view_id selects the ChaCha stream so the two views never share draws.
    rng.set_stream(view_id);
    rng
}

/// Derive a child seed from a parent seed and an index (splitmix64 finalizer).
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut z = parent
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Shared training plumbing: named seed substreams, deterministic held-out
//! splits, and epoch batching.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Derives an independent seed for a named stage from a master seed. Pure:
/// the same (seed, name) always yields the same substream.
pub fn substream_seed(master: u64, name: &str) -> u64 {
    splitmix64(master ^ fnv1a(name))
}

/// Splits `0..n` into (train, held-out) index sets, holding out every
/// sequence whose salted index hash lands in the `1/every` bucket. Stable
/// across runs; independent of iteration order.
pub(crate) fn holdout_split(n: usize, every: usize, salt: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::with_capacity(n);
    let mut held = Vec::new();
    for i in 0..n {
        if splitmix64(i as u64 ^ salt) % every as u64 == 0 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

/// Shuffles the index set and chunks it into batches.
pub(crate) fn epoch_batches(
    indices: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    shuffled
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

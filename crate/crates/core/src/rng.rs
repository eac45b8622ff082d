//! Counter-based random streams.
//!
//! Every stochastic step draws from its own ChaCha stream keyed by
//! `(global seed, purpose tag, indices)`, so results never depend on the
//! order in which independent pieces of work run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the stream for `tag` at position `indices` under `seed`.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> Stream {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    h = splitmix(h ^ tag.len() as u64);
    let mut words = [h, 0, 0, 0];
    for (k, &i) in indices.iter().enumerate() {
        words[0] = splitmix(words[0] ^ i.wrapping_add(k as u64 + 1));
    }
    for k in 1..4 {
        words[k] = splitmix(words[k - 1] ^ (k as u64));
    }
    for (chunk, w) in key.chunks_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "aug", &[1, 2]).random();
        let b: u64 = stream(7, "aug", &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, stream(7, "aug", &[2, 1]).random::<u64>());
        assert_ne!(a, stream(7, "augx", &[1, 2]).random::<u64>());
        assert_ne!(a, stream(8, "aug", &[1, 2]).random::<u64>());
        assert_ne!(
            stream(7, "aug", &[]).random::<u64>(),
            stream(7, "aug", &[0]).random::<u64>()
        );
    }
}

//! Counter-based random streams keyed by `(seed, tag, indices)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const TAG_WORLD: u64 = 0x0077_6f72_6c64;
pub(crate) const TAG_MODEL: u64 = 0x006d_6f64_656c;
pub(crate) const TAG_TRIAL: u64 = 0x0074_7269_616c;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, tag, indices)` key.
pub(crate) fn stream(seed: u64, tag: u64, indices: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ splitmix(tag));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// FNV-1a over raw bytes.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

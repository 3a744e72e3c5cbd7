//! Character 3-gram feature hashing.
//!
//! Each 3-gram (Unicode scalar values; texts shorter than three characters are
//! one gram) is hashed with 64-bit FNV-1a over its UTF-8 bytes followed by the
//! seed as 8 little-endian bytes. With `h` the hash and `d` the dimension, the
//! gram adds `sign` to bucket `h mod d`, where `sign` is +1 when bit
//! `(h / d) & 1` is 0 and -1 otherwise. The counts are then L2-normalized.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn gram_hash(gram: &str, seed: u64) -> u64 {
    fnv1a64(gram.bytes().chain(seed.to_le_bytes()))
}

/// Un-normalized signed bucket counts.
pub(crate) fn signed_counts(text: &str, dimension: usize, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; dimension];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    if chars.is_empty() || dimension == 0 {
        return out;
    }
    let mut add = |gram: &str| {
        let h = gram_hash(gram, seed);
        let d = dimension as u64;
        let bucket = (h % d) as usize;
        let sign = if (h / d) & 1 == 0 { 1.0 } else { -1.0 };
        out[bucket] += sign;
    };
    if chars.len() < 3 {
        add(text);
    } else {
        for i in 0..=chars.len() - 3 {
            let start = chars[i].0;
            let end = chars.get(i + 3).map_or(text.len(), |c| c.0);
            add(&text[start..end]);
        }
    }
    out
}

/// Hashed 3-gram embedding, L2-normalized (all-zero for empty text).
pub fn hashed_test_embed(text: &str, dimension: usize, seed: u64) -> Vec<f64> {
    let mut v = signed_counts(text, dimension, seed);
    super::l2_normalize(&mut v);
    v
}

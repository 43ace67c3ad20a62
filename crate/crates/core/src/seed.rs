use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of tags.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

// Stream tags, kept distinct so that no two consumers share randomness.
pub(crate) const TAG_MAP_INIT: u64 = 1;
pub(crate) const TAG_WEIGHT_INIT: u64 = 2;
pub(crate) const TAG_SHUFFLE: u64 = 3;
pub(crate) const TAG_PERMUTATION: u64 = 4;
pub(crate) const TAG_VALIDATION: u64 = 5;
pub(crate) const TAG_GAUSSIAN: u64 = 6;
pub(crate) const TAG_FUZZY: u64 = 7;
pub(crate) const TAG_POOL: u64 = 8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_paths_give_distinct_seeds() {
        assert_ne!(derive(0, &[1, 2]), derive(0, &[2, 1]));
        assert_ne!(derive(0, &[1]), derive(1, &[1]));
        assert_eq!(derive(9, &[3, 4]), derive(9, &[3, 4]));
    }
}

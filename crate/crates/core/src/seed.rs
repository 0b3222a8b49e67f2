//! Named deterministic random streams.
//!
//! Every source of randomness in the pipeline draws from its own stream,
//! derived from the root seed and a stable name such as `"geo/organ_a/3"`.
//! Streams are therefore independent of each other and of evaluation order:
//! adding a consumer or reordering work never shifts anybody else's draws.

/// FNV-1a hash of a byte string.
pub fn fnv1a64(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; scrambles a seed into a well-mixed value.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the stream identified by `name` under the given root seed.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a64(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_stable() {
        // Frozen values: a change here would silently re-randomize every
        // artifact produced by existing configurations.
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(stream_seed(42, "tasks"), stream_seed(42, "tasks"));
    }

    #[test]
    fn distinct_names_give_distinct_streams() {
        let names = ["data", "tasks", "init", "protocol", "geo/organ_a/0", "geo/organ_a/1"];
        let mut seeds: Vec<u64> = names.iter().map(|n| stream_seed(7, n)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), names.len());
    }

    #[test]
    fn root_seed_changes_every_stream() {
        assert_ne!(stream_seed(1, "data"), stream_seed(2, "data"));
    }
}

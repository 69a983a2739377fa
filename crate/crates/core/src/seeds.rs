//! Deterministic seed derivation.
//!
//! All randomized behavior in a federated session (mini-batch shuffles,
//! DP noise, partitioners) is a pure function of the global seed plus
//! stable identifiers, so runs reproduce bit-for-bit across transports
//! and hosts. `DefaultHasher` is deliberately avoided: its algorithm is
//! not guaranteed stable across toolchains.

/// FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One splitmix64 step; good avalanche for combining words.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with an arbitrary label (e.g. a party id).
pub fn mix_label(seed: u64, label: &str) -> u64 {
    splitmix(seed ^ fnv1a(label.as_bytes()))
}

/// Mixes a base seed with a counter (e.g. an epoch or round index).
pub fn mix_index(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index))
}

/// Seed for a party's local work at a given step:
/// `hash(global_seed, party_id, index)`.
pub fn derive(global_seed: u64, party_id: &str, index: u64) -> u64 {
    mix_index(mix_label(global_seed, party_id), index)
}

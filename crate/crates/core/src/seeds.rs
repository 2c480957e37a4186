//! Deterministic seed derivation.
//!
//! Every random draw in a run flows from one master seed through
//! `sub_seed`, keyed by a domain tag and an index. Separate domains get
//! independent streams, so e.g. changing how many clients exist does
//! not disturb dataset generation.

/// Derive a child seed from a master seed, a domain tag and an index.
pub fn sub_seed(master: u64, domain: &str, index: u64) -> u64 {
    let mut tag: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain.as_bytes() {
        tag ^= u64::from(*b);
        tag = tag.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(tag ^ splitmix64(index)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

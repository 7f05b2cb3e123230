//! Deterministic seed derivation.
//!
//! Every random draw in a simulation run traces back to one experiment seed.
//! Sub-seeds for clients, rounds and training phases are derived with a
//! splitmix64 chain so that runs replay bit-identically.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from `base` and an ordered list of tags.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0xff51_afd7_ed55_8ccd));
    }
    s
}

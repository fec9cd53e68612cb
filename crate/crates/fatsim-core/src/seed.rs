//! Deterministic seed derivation.
//!
//! Every random decision in a simulation is keyed by the experiment's master
//! seed plus a path of integers (client id, round, restart index, ...), so
//! reruns are bit-identical and independent of scheduling order.

/// SplitMix64 step; the standard finalizer used to decorrelate seed streams.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a path of components.
///
/// Identical (master, path) pairs always yield the same seed; distinct paths
/// yield decorrelated seeds.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let mut out = splitmix64(&mut state);
    for &part in path {
        state ^= part.wrapping_mul(0x2545_f491_4f6c_dd1d);
        out ^= splitmix64(&mut state);
    }
    out
}

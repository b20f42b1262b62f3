//! FNV-1a 64-bit, for dataset manifests and checkpoint trailers.

pub(crate) const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub(crate) const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash = FNV_OFFSET;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Hash of a flat f64 slice, little-endian byte order.
pub(crate) fn fnv1a64_f64(values: &[f64]) -> u64 {
    fnv1a64(values.iter().flat_map(|v| v.to_le_bytes()))
}

//! Deterministic seed fan-out and config fingerprinting.
//!
//! One global seed drives every randomized component; per-component
//! seeds derive from it by hashing a stable label, so adding a component
//! never perturbs the streams of existing ones.

/// FNV-1a over the label bytes, folded with the global seed through a
/// splitmix64 finalizer. Stable across platforms and releases.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(global ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable 64-bit fingerprint of arbitrary bytes, hex-encoded. Used for
/// config hashes in reports; not cryptographic.
pub fn fingerprint(bytes: &[u8]) -> String {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    format!("{:016x}", splitmix64(h))
}

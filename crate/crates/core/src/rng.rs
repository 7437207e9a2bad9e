//! Named, independent random streams derived from a root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for the stream named by `labels` under `root`.
///
/// Uses FNV-1a and splitmix64 so the value never depends on the standard
/// library's hasher or the platform.
pub fn stream_seed(root: u64, labels: &[&str]) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in root.to_le_bytes() {
        h = (h ^ u64::from(byte)).wrapping_mul(FNV_PRIME);
    }
    for label in labels {
        for byte in label.bytes().chain(std::iter::once(0xff)) {
            h = (h ^ u64::from(byte)).wrapping_mul(FNV_PRIME);
        }
    }
    splitmix64(h)
}

pub fn stream_rng(root: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, labels))
}

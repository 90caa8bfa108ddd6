//! Hashes and small deterministic generators.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Derives an independent substream seed from a root seed, a purpose tag
/// and any number of key parts.
pub fn derive_seed(root: u64, purpose: &str, parts: &[&[u8]]) -> u64 {
    let mut buf = root.to_le_bytes().to_vec();
    buf.extend_from_slice(purpose.as_bytes());
    for p in parts {
        buf.push(0x1f);
        buf.extend_from_slice(p);
    }
    fnv1a64(&buf)
}

/// 64-bit linear congruential generator (Knuth's MMIX constants).
#[derive(Clone, Debug)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    const MUL: u64 = 6_364_136_223_846_793_005;
    const INC: u64 = 1_442_695_040_888_963_407;

    pub fn new(seed: u64) -> Self {
        Lcg64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(Self::MUL).wrapping_add(Self::INC);
        self.state
    }

    /// Uniform in `[-1, 1]` from the top 53 bits.
    pub fn next_signed_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / ((1u64 << 53) - 1) as f64;
        2.0 * u - 1.0
    }
}

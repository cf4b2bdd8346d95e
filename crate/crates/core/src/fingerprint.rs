//! User-specific fingerprint messages.

use crate::error::{Error, Result};

/// A multi-bit watermark message identifying one user's generator instance.
///
/// Bits are stored most-significant-bit-first; the canonical text rendering
/// is lowercase hex of that bit order, so two fingerprints are equal iff
/// their hex strings are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    bits: Vec<u8>,
}

impl Fingerprint {
    /// Build from raw bits. Every element must be exactly 0 or 1.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("fingerprint must have at least one bit".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("fingerprint bits must be 0 or 1".into()));
        }
        Ok(Fingerprint { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bits as ±-free reals (0.0 / 1.0), the target vector for the decoder.
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Threshold decoder logits into bits: 1 iff sigmoid(logit) > 0.5,
    /// i.e. iff the logit is strictly positive.
    pub fn from_logits(logits: &[f64]) -> Result<Fingerprint> {
        Fingerprint::from_bits(logits.iter().map(|&l| u8::from(l > 0.0)).collect())
    }

    pub fn complement(&self) -> Fingerprint {
        Fingerprint { bits: self.bits.iter().map(|&b| 1 - b).collect() }
    }

    /// Number of positions where `self` and `other` agree.
    pub fn matching_bits(&self, other: &Fingerprint) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "fingerprint lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| a == b).count())
    }

    /// Lowercase hex, MSB-first. Lengths not divisible by 4 are zero-padded
    /// at the tail (the bit count disambiguates on parse).
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.bits.len().div_ceil(4));
        for chunk in self.bits.chunks(4) {
            let mut v = 0u8;
            for (i, &b) in chunk.iter().enumerate() {
                v |= b << (3 - i);
            }
            s.push(char::from_digit(v as u32, 16).unwrap());
        }
        s
    }

    /// Parse a lowercase/uppercase hex string into a fingerprint of exactly
    /// `bit_len` bits.
    pub fn from_hex(hex: &str, bit_len: usize) -> Result<Self> {
        if bit_len == 0 {
            return Err(Error::InvalidArgument("bit length must be positive".into()));
        }
        if hex.len() != bit_len.div_ceil(4) {
            return Err(Error::Format(format!(
                "hex fingerprint has {} digits, expected {} for {} bits",
                hex.len(),
                bit_len.div_ceil(4),
                bit_len
            )));
        }
        let mut bits = Vec::with_capacity(bit_len);
        for c in hex.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| Error::Format(format!("invalid hex digit {c:?} in fingerprint")))?
                as u8;
            for i in 0..4 {
                bits.push((v >> (3 - i)) & 1);
            }
        }
        for &pad in &bits[bit_len..] {
            if pad != 0 {
                return Err(Error::Format("nonzero padding bits in fingerprint hex".into()));
            }
        }
        bits.truncate(bit_len);
        Fingerprint::from_bits(bits)
    }
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Sample a uniform random fingerprint of `bit_len` bits.
pub fn sample_fingerprint(rng: &mut impl rand::Rng, bit_len: usize) -> Result<Fingerprint> {
    if bit_len == 0 {
        return Err(Error::InvalidArgument("fingerprint bit length must be >= 1".into()));
    }
    let bits = (0..bit_len).map(|_| rng.gen_range(0..=1u8)).collect();
    Ok(Fingerprint { bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn rejects_zero_length() {
        let mut rng = derive_rng(0, "fp");
        assert!(matches!(sample_fingerprint(&mut rng, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_bit_degenerate_case() {
        // A one-bit fingerprint forced to 0 is just [0].
        let fp = Fingerprint::from_bits(vec![0]).unwrap();
        assert_eq!(fp.bits(), &[0]);
        assert_eq!(fp.to_hex(), "0");
    }

    #[test]
    fn keyspace_of_128_bits() {
        let mut rng = derive_rng(1, "fp");
        let fp = sample_fingerprint(&mut rng, 128).unwrap();
        assert_eq!(fp.len(), 128);
        // 2^128 distinct instances.
        assert!((2f64.powi(128) - 3.4e38).abs() / 3.4e38 < 0.01);
    }

    #[test]
    fn per_bit_mean_is_unbiased() {
        // Monte-Carlo oracle: per-bit empirical mean over 1e4 seeded draws.
        let mut rng = derive_rng(2, "fp-mc");
        let n = 10_000;
        let d = 32;
        let mut sums = vec![0u32; d];
        for _ in 0..n {
            let fp = sample_fingerprint(&mut rng, d).unwrap();
            for (s, &b) in sums.iter_mut().zip(fp.bits()) {
                *s += b as u32;
            }
        }
        for s in sums {
            let mean = s as f64 / n as f64;
            assert!((mean - 0.5).abs() < 0.02, "per-bit mean {mean} out of tolerance");
        }
    }

    #[test]
    fn identical_seeds_identical_outputs() {
        let a = sample_fingerprint(&mut derive_rng(3, "s"), 64).unwrap();
        let b = sample_fingerprint(&mut derive_rng(3, "s"), 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_pairs_differ_in_about_half_the_positions() {
        let mut rng = derive_rng(4, "pairs");
        let d = 128;
        let pairs = 2_000;
        let mut total_diff = 0usize;
        for _ in 0..pairs {
            let a = sample_fingerprint(&mut rng, d).unwrap();
            let b = sample_fingerprint(&mut rng, d).unwrap();
            total_diff += d - a.matching_bits(&b).unwrap();
        }
        let mean_diff = total_diff as f64 / pairs as f64;
        let expected = d as f64 / 2.0;
        assert!((mean_diff - expected).abs() < 0.10 * expected, "mean hamming {mean_diff}");
    }

    #[test]
    fn hex_round_trip() {
        let mut rng = derive_rng(5, "hex");
        for &d in &[1, 5, 32, 128] {
            let fp = sample_fingerprint(&mut rng, d).unwrap();
            let back = Fingerprint::from_hex(&fp.to_hex(), d).unwrap();
            assert_eq!(fp, back);
        }
    }

    #[test]
    fn hex_rejects_bad_input() {
        assert!(Fingerprint::from_hex("zz", 8).is_err());
        assert!(Fingerprint::from_hex("abc", 8).is_err()); // wrong digit count
        // 5-bit fingerprint is 2 hex digits with 3 zero padding bits; "ff" has them set.
        assert!(Fingerprint::from_hex("ff", 5).is_err());
    }
}

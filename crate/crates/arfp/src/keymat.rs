//! Secret keys, nonces, and the bit-level arithmetic used by the access
//! control and tamper evaluations.
//!
//! Keys and nonces are plain bit vectors. They drive conditioning and
//! integrity checks; nothing here is cryptographic key derivation and no
//! security claim beyond the empirical ones is made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default key length in bits.
pub const DEFAULT_KEY_BITS: usize = 256;
/// Default nonce length in bits.
pub const DEFAULT_NONCE_BITS: usize = 64;

/// A fixed-length vector of bits, each stored as 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitString {
    bits: Vec<u8>,
}

impl BitString {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("bit values must be 0 or 1"));
        }
        Ok(BitString { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Lowercase hex, big-endian bit order (most-significant bit first).
    /// A length that is not a multiple of 4 is zero-padded at the front.
    pub fn to_hex(&self) -> String {
        let pad = (4 - self.bits.len() % 4) % 4;
        let mut out = String::with_capacity((self.bits.len() + pad) / 4);
        let mut nibble = 0u8;
        let mut count = pad;
        for &b in &self.bits {
            nibble = (nibble << 1) | b;
            count += 1;
            if count == 4 {
                out.push(char::from_digit(nibble as u32, 16).unwrap());
                nibble = 0;
                count = 0;
            }
        }
        out
    }

    /// Parse a hex string produced by [`BitString::to_hex`], recovering
    /// exactly `n_bits` bits.
    pub fn from_hex(hex: &str, n_bits: usize) -> Result<Self> {
        let expected_digits = n_bits.div_ceil(4);
        if hex.len() != expected_digits {
            return Err(Error::invalid(format!(
                "hex string has {} digits, expected {} for {} bits",
                hex.len(),
                expected_digits,
                n_bits
            )));
        }
        let mut all = Vec::with_capacity(expected_digits * 4);
        for c in hex.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| Error::invalid(format!("invalid hex digit '{c}'")))? as u8;
            for shift in (0..4).rev() {
                all.push((v >> shift) & 1);
            }
        }
        let pad = expected_digits * 4 - n_bits;
        if all[..pad].iter().any(|&b| b != 0) {
            return Err(Error::invalid("hex string has nonzero padding bits"));
        }
        Ok(BitString {
            bits: all[pad..].to_vec(),
        })
    }
}

/// A user secret key: `n_k` bits (256 by default).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SecretKey(pub BitString);

/// A per-image nonce: `n_m` bits (64 by default).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Nonce(pub BitString);

impl SecretKey {
    pub fn bits(&self) -> &[u8] {
        self.0.bits()
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn to_hex(&self) -> String {
        self.0.to_hex()
    }
    pub fn from_hex(hex: &str, n_bits: usize) -> Result<Self> {
        Ok(SecretKey(BitString::from_hex(hex, n_bits)?))
    }

    /// Short identifier for report rows and image metadata: first 8 hex
    /// characters of the SHA-256 of the bit string.
    pub fn fingerprint(&self) -> String {
        fingerprint_bits(self.0.bits())
    }
}

impl Nonce {
    pub fn bits(&self) -> &[u8] {
        self.0.bits()
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn to_hex(&self) -> String {
        self.0.to_hex()
    }
    pub fn from_hex(hex: &str, n_bits: usize) -> Result<Self> {
        Ok(Nonce(BitString::from_hex(hex, n_bits)?))
    }
    pub fn fingerprint(&self) -> String {
        fingerprint_bits(self.0.bits())
    }
}

fn fingerprint_bits(bits: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bits);
    let digest = hasher.finalize();
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// ±1 encoding of a bit vector, the network-facing form of keys and nonces.
#[derive(Debug, Clone, PartialEq)]
pub struct BitSignal {
    pub values: Vec<f64>,
}

fn random_bits(seed: u64, n_bits: usize) -> Result<Vec<u8>> {
    if n_bits == 0 {
        return Err(Error::invalid("bit length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_bits).map(|_| rng.gen_range(0..2u8)).collect())
}

/// Sample a uniform key. Pure function of `(seed, n_bits)`.
pub fn generate_key(seed: u64, n_bits: usize) -> Result<SecretKey> {
    Ok(SecretKey(BitString {
        bits: random_bits(seed, n_bits)?,
    }))
}

/// Sample a uniform nonce. Pure function of `(seed, n_bits)`.
pub fn generate_nonce(seed: u64, n_bits: usize) -> Result<Nonce> {
    Ok(Nonce(BitString {
        bits: random_bits(seed, n_bits)?,
    }))
}

/// Number of differing positions between two equal-length bit vectors.
pub fn hamming(a: &[u8], b: &[u8]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Bit error rate: `hamming / length`.
pub fn ber(truth: &[u8], decoded: &[u8]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("bit vectors must be non-empty"));
    }
    Ok(hamming(truth, decoded)? as f64 / truth.len() as f64)
}

/// Flip exactly `flip_count` distinct positions, chosen deterministically
/// from `seed`. Applying the same perturbation twice restores the key.
pub fn perturb_key(key: &SecretKey, flip_count: usize, seed: u64) -> Result<SecretKey> {
    let n = key.len();
    if flip_count > n {
        return Err(Error::invalid(format!(
            "flip_count {flip_count} exceeds key length {n}"
        )));
    }
    let mut positions: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first flip_count entries are the flips.
    for i in 0..flip_count {
        let j = rng.gen_range(i..n);
        positions.swap(i, j);
    }
    let mut bits = key.bits().to_vec();
    for &p in &positions[..flip_count] {
        bits[p] ^= 1;
    }
    Ok(SecretKey(BitString { bits }))
}

/// Map bits elementwise to ±1: 0 → −1, 1 → +1.
pub fn bits_to_signal(bits: &[u8]) -> BitSignal {
    BitSignal {
        values: bits.iter().map(|&b| 2.0 * f64::from(b) - 1.0).collect(),
    }
}

/// Invert [`bits_to_signal`] by thresholding at 0: positive → 1, else 0.
pub fn signal_to_bits(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| u8::from(v > 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn generate_key_is_deterministic() {
        let a = generate_key(7, 4).unwrap();
        let b = generate_key(7, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn generate_key_rejects_zero_length() {
        assert!(generate_key(7, 0).is_err());
        assert!(generate_nonce(7, 0).is_err());
    }

    #[test]
    fn distinct_seeds_give_near_half_hamming() {
        let a = generate_key(7, 256).unwrap();
        let b = generate_key(8, 256).unwrap();
        let hd = hamming(a.bits(), b.bits()).unwrap() as f64;
        // Binomial(256, 0.5): mean 128, sigma 8.
        assert!((hd - 128.0).abs() <= 3.0 * 8.0, "hd = {hd}");
    }

    #[test]
    fn mean_hamming_over_many_pairs_is_half_length() {
        let n = 10_000;
        let mut total = 0usize;
        for i in 0..n {
            let a = generate_key(2 * i, 256).unwrap();
            let b = generate_key(2 * i + 1, 256).unwrap();
            total += hamming(a.bits(), b.bits()).unwrap();
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 128.0).abs() <= 0.5, "mean = {mean}");
    }

    #[test]
    fn nonce_basics() {
        let a = generate_nonce(0, 64).unwrap();
        assert_eq!(a.len(), 64);
        let b = generate_nonce(0, 64).unwrap();
        assert_eq!(hamming(a.bits(), b.bits()).unwrap(), 0);
        // Expectation across seeds is 32; allow 3 sigma (sigma = 4).
        let c = generate_nonce(1, 64).unwrap();
        let hd = hamming(a.bits(), c.bits()).unwrap() as f64;
        assert!((hd - 32.0).abs() <= 12.0, "hd = {hd}");
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap(), 0);
        assert_eq!(hamming(&[0, 0, 0, 0], &[1, 1, 1, 1]).unwrap(), 4);
        assert!(hamming(&[0, 1], &[0, 1, 1]).is_err());
        let k = generate_key(3, 256).unwrap();
        let p = perturb_key(&k, 16, 9).unwrap();
        assert_eq!(hamming(k.bits(), p.bits()).unwrap(), 16);
    }

    #[test]
    fn hamming_is_a_metric_on_4_bit_vectors() {
        let all: Vec<Vec<u8>> = (0..16u8)
            .map(|v| (0..4).rev().map(|s| (v >> s) & 1).collect())
            .collect();
        for a in &all {
            assert_eq!(hamming(a, a).unwrap(), 0);
            for b in &all {
                let dab = hamming(a, b).unwrap();
                assert_eq!(dab, hamming(b, a).unwrap());
                if a != b {
                    assert!(dab > 0);
                }
                for c in &all {
                    let dac = hamming(a, c).unwrap();
                    let dcb = hamming(c, b).unwrap();
                    assert!(dab <= dac + dcb);
                }
            }
        }
    }

    #[test]
    fn perturb_key_edge_counts() {
        let k = generate_key(11, 32).unwrap();
        assert_eq!(perturb_key(&k, 0, 5).unwrap(), k);
        let one = perturb_key(&k, 1, 5).unwrap();
        assert_eq!(hamming(k.bits(), one.bits()).unwrap(), 1);
        let full = perturb_key(&k, 32, 5).unwrap();
        let complement: Vec<u8> = k.bits().iter().map(|b| b ^ 1).collect();
        assert_eq!(full.bits(), &complement[..]);
        assert!(perturb_key(&k, 33, 5).is_err());
    }

    #[test]
    fn perturb_key_is_an_involution_for_fixed_seed() {
        let k = generate_key(21, 64).unwrap();
        let once = perturb_key(&k, 9, 77).unwrap();
        let twice = perturb_key(&once, 9, 77).unwrap();
        assert_eq!(twice, k);
    }

    #[test]
    fn ber_examples() {
        assert_eq!(ber(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 0.0);
        assert_eq!(ber(&[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap(), 1.0);
        assert!(ber(&[0, 1], &[1]).is_err());
    }

    #[test]
    fn ber_against_random_decoding_is_half() {
        let n = 10_000;
        let truth = generate_nonce(500_000, 64).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let decoded = generate_nonce(600_000 + i, 64).unwrap();
            total += ber(truth.bits(), decoded.bits()).unwrap();
        }
        let mean = total / n as f64;
        assert!((mean - 0.5).abs() <= 0.01, "mean = {mean}");
    }

    #[test]
    fn signal_mapping() {
        let s = bits_to_signal(&[0, 1]);
        assert_eq!(s.values, vec![-1.0, 1.0]);
        let z = bits_to_signal(&[0, 0, 0]);
        assert!(z.values.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn hex_round_trip() {
        let k = generate_key(123, 256).unwrap();
        let hex = k.to_hex();
        assert_eq!(hex.len(), 64);
        assert!(hex.chars().all(|c| c.is_ascii_hexdigit()));
        let back = SecretKey::from_hex(&hex, 256).unwrap();
        assert_eq!(back, k);
        // Non-multiple-of-4 lengths pad at the front.
        let small = generate_key(5, 6).unwrap();
        let back = SecretKey::from_hex(&small.to_hex(), 6).unwrap();
        assert_eq!(back, small);
    }

    proptest! {
        #[test]
        fn signal_round_trip(bits in proptest::collection::vec(0u8..2, 1..200)) {
            let signal = bits_to_signal(&bits);
            prop_assert_eq!(signal_to_bits(&signal.values), bits);
        }

        #[test]
        fn ber_is_hamming_over_length(
            pair in proptest::collection::vec((0u8..2, 0u8..2), 1..100)
        ) {
            let a: Vec<u8> = pair.iter().map(|p| p.0).collect();
            let b: Vec<u8> = pair.iter().map(|p| p.1).collect();
            let hd = hamming(&a, &b).unwrap();
            prop_assert_eq!(ber(&a, &b).unwrap(), hd as f64 / a.len() as f64);
        }
    }
}

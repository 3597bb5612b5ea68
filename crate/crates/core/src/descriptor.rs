//! 256-bit binary descriptors.
//!
//! Bit `p` lives in word `p / 64` at bit `p % 64`, least-significant bit
//! first. Substring values use the same order: bit `start` of a substring
//! becomes bit 0 of its value. Hex serialization writes word 0 first, each
//! word as 16 lowercase big-endian hex digits.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DescriptorError;

/// Descriptor width in bits.
pub const DESCRIPTOR_BITS: usize = 256;
const WORDS: usize = DESCRIPTOR_BITS / 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BinaryDescriptor([u64; WORDS]);

impl BinaryDescriptor {
    pub const fn zeros() -> Self {
        Self([0; WORDS])
    }

    pub const fn ones() -> Self {
        Self([u64::MAX; WORDS])
    }

    pub const fn from_words(words: [u64; WORDS]) -> Self {
        Self(words)
    }

    pub const fn words(&self) -> &[u64; WORDS] {
        &self.0
    }

    /// Uniformly random descriptor, deterministic per seed.
    pub fn random(seed: u64) -> Self {
        Self::random_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn random_with<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut words = [0u64; WORDS];
        for w in &mut words {
            *w = rng.next_u64();
        }
        Self(words)
    }

    pub fn bit(&self, pos: usize) -> bool {
        assert!(pos < DESCRIPTOR_BITS, "bit position {pos} out of range");
        (self.0[pos / 64] >> (pos % 64)) & 1 == 1
    }

    pub fn flip(&mut self, pos: usize) {
        assert!(pos < DESCRIPTOR_BITS, "bit position {pos} out of range");
        self.0[pos / 64] ^= 1 << (pos % 64);
    }

    pub fn with_flipped<I: IntoIterator<Item = usize>>(mut self, positions: I) -> Self {
        for p in positions {
            self.flip(p);
        }
        self
    }

    pub fn count_ones(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    pub fn hamming(&self, other: &Self) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Up to 64 bits starting at `start`, packed LSB-first. Bits past the
    /// descriptor end read as zero.
    fn bits_u64(&self, start: usize, len: usize) -> u64 {
        debug_assert!(len <= 64);
        if len == 0 || start >= DESCRIPTOR_BITS {
            return 0;
        }
        let word = start / 64;
        let offset = start % 64;
        let mut v = self.0[word] >> offset;
        if offset != 0 && word + 1 < WORDS {
            v |= self.0[word + 1] << (64 - offset);
        }
        if len < 64 {
            v &= (1u64 << len) - 1;
        }
        v
    }

    /// Value of bits `[start, start + width)`.
    pub fn extract(&self, start: usize, width: usize) -> SubstringValue {
        assert!(start + width <= DESCRIPTOR_BITS, "substring out of range");
        let mut out = [0u64; WORDS];
        let mut done = 0;
        let mut i = 0;
        while done < width {
            let len = (width - done).min(64);
            out[i] = self.bits_u64(start + done, len);
            done += len;
            i += 1;
        }
        SubstringValue(out)
    }

    /// Value of substring `table` when the descriptor is cut into `t` pieces.
    pub fn substring(&self, table: usize, t: usize) -> SubstringValue {
        let width = DESCRIPTOR_BITS / t;
        self.extract(table * width, width)
    }

    /// Splits into `t` disjoint contiguous substrings of `256 / t` bits.
    /// Trailing `256 - t * (256 / t)` bits are not covered.
    pub fn split_substrings(&self, t: usize) -> Result<Vec<SubstringView>, DescriptorError> {
        if t == 0 || t > DESCRIPTOR_BITS {
            return Err(DescriptorError::TableCount(t));
        }
        let width = DESCRIPTOR_BITS / t;
        Ok((0..t)
            .map(|i| SubstringView {
                table_index: i,
                width,
                value: self.extract(i * width, width),
            })
            .collect())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|w| format!("{w:016x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self, DescriptorError> {
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(DescriptorError::Hex(s.to_owned()));
        }
        let mut words = [0u64; WORDS];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u64::from_str_radix(&s[i * 16..(i + 1) * 16], 16)
                .map_err(|_| DescriptorError::Hex(s.to_owned()))?;
        }
        Ok(Self(words))
    }

    /// Applies a perturbation drawn from a seeded generator.
    pub fn perturb(&self, spec: PerturbationSpec, seed: u64) -> Self {
        self.perturb_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn perturb_with<R: Rng + ?Sized>(&self, spec: PerturbationSpec, rng: &mut R) -> Self {
        let mut out = *self;
        match spec.model {
            PerturbationModel::DistinctPositions => {
                for p in rand::seq::index::sample(rng, DESCRIPTOR_BITS, spec.epsilon) {
                    out.flip(p);
                }
            }
            PerturbationModel::BallsIntoBins => {
                for _ in 0..spec.epsilon {
                    out.flip(rng.random_range(0..DESCRIPTOR_BITS));
                }
            }
        }
        out
    }
}

impl fmt::Debug for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryDescriptor({})", self.to_hex())
    }
}

impl fmt::Display for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for BinaryDescriptor {
    type Err = DescriptorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

/// Substring value of up to 256 bits, LSB-first in word 0.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct SubstringValue([u64; WORDS]);

impl SubstringValue {
    pub const fn from_u64(v: u64) -> Self {
        Self([v, 0, 0, 0])
    }

    pub const fn from_words(words: [u64; WORDS]) -> Self {
        Self(words)
    }

    pub const fn words(&self) -> &[u64; WORDS] {
        &self.0
    }

    /// The value as a `u64` when it fits.
    pub fn as_u64(&self) -> Option<u64> {
        if self.0[1..].iter().all(|&w| w == 0) {
            Some(self.0[0])
        } else {
            None
        }
    }
}

impl fmt::Display for SubstringValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_u64() {
            Some(v) => write!(f, "{v}"),
            None => {
                let last = self.0.iter().rposition(|&w| w != 0).unwrap_or(0);
                write!(f, "0x{:x}", self.0[last])?;
                for w in self.0[..last].iter().rev() {
                    write!(f, "{w:016x}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct SubstringView {
    pub table_index: usize,
    pub width: usize,
    pub value: SubstringValue,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationModel {
    /// Exactly `epsilon` distinct positions are flipped.
    DistinctPositions,
    /// `epsilon` positions drawn with replacement; repeated draws cancel.
    BallsIntoBins,
}

impl fmt::Display for PerturbationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationModel::DistinctPositions => "distinct_positions",
            PerturbationModel::BallsIntoBins => "balls_into_bins",
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PerturbationSpec {
    pub epsilon: usize,
    pub model: PerturbationModel,
}

impl PerturbationSpec {
    pub fn new(epsilon: usize, model: PerturbationModel) -> Result<Self, DescriptorError> {
        if model == PerturbationModel::DistinctPositions && epsilon > DESCRIPTOR_BITS {
            return Err(DescriptorError::Epsilon(epsilon));
        }
        Ok(Self { epsilon, model })
    }

    pub fn distinct(epsilon: usize) -> Result<Self, DescriptorError> {
        Self::new(epsilon, PerturbationModel::DistinctPositions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hamming_fixtures() {
        let d = BinaryDescriptor::random(7);
        assert_eq!(d.hamming(&d), 0);
        assert_eq!(BinaryDescriptor::zeros().hamming(&BinaryDescriptor::ones()), 256);
        let flipped = d.with_flipped([3, 77, 200]);
        assert_eq!(d.hamming(&flipped), 3);
    }

    #[test]
    fn split_into_bytes() {
        let views = BinaryDescriptor::random(3).split_substrings(32).unwrap();
        assert_eq!(views.len(), 32);
        assert!(views.iter().all(|v| v.width == 8));

        let zero = BinaryDescriptor::zeros().split_substrings(32).unwrap();
        assert!(zero.iter().all(|v| v.value.as_u64() == Some(0)));
    }

    #[test]
    fn first_byte_follows_lsb_first_order() {
        // bits 0..7 = 1,0,1,1,0,0,0,1 read as bit0 first -> 0b1000_1101
        let d = BinaryDescriptor::zeros().with_flipped([0, 2, 3, 7]);
        let views = d.split_substrings(32).unwrap();
        assert_eq!(views[0].value.as_u64(), Some(0b1000_1101));
        assert!(views[1..].iter().all(|v| v.value.as_u64() == Some(0)));
    }

    #[test]
    fn split_rejects_bad_table_count() {
        let d = BinaryDescriptor::zeros();
        assert!(d.split_substrings(0).is_err());
        assert!(d.split_substrings(257).is_err());
        assert_eq!(d.split_substrings(256).unwrap().len(), 256);
    }

    #[test]
    fn non_dividing_table_count_leaves_dead_bits() {
        // t = 3 -> 85-bit substrings, bit 255 uncovered
        let d = BinaryDescriptor::zeros().with_flipped([255]);
        let views = d.split_substrings(3).unwrap();
        assert!(views.iter().all(|v| v.width == 85));
        assert!(views.iter().all(|v| v.value == SubstringValue::default()));
    }

    #[test]
    fn wide_substring_crosses_words() {
        let d = BinaryDescriptor::zeros().with_flipped([63, 64, 127]);
        let v = d.extract(63, 66);
        assert_eq!(v.words()[0], 0b11);
        assert_eq!(v.words()[1], 1 << 0);
        assert_eq!(v.as_u64(), None);
    }

    #[test]
    fn perturb_edge_cases() {
        let d = BinaryDescriptor::random(11);
        assert_eq!(d.perturb(PerturbationSpec::distinct(0).unwrap(), 5), d);
        let all = d.perturb(PerturbationSpec::distinct(256).unwrap(), 5);
        assert_eq!(all, d.with_flipped(0..256));
        let p = d.perturb(PerturbationSpec::distinct(40).unwrap(), 9);
        assert_eq!(d.hamming(&p), 40);
        assert!(PerturbationSpec::distinct(257).is_err());
        let b = PerturbationSpec::new(300, PerturbationModel::BallsIntoBins).unwrap();
        let q = d.perturb(b, 1);
        assert!(d.hamming(&q) <= 256);
        assert_eq!(d.hamming(&q) % 2, 0, "300 flips keep even parity");
    }

    #[test]
    fn random_is_seeded() {
        assert_eq!(BinaryDescriptor::random(1), BinaryDescriptor::random(1));
        assert_ne!(BinaryDescriptor::random(1), BinaryDescriptor::random(2));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let total: u64 = (0..10_000)
            .map(|_| BinaryDescriptor::random_with(&mut rng).count_ones() as u64)
            .sum();
        let mean = total as f64 / 10_000.0;
        assert!((mean - 128.0).abs() <= 3.0, "mean bit count {mean}");
    }

    #[test]
    fn hex_round_trip_and_layout() {
        let d = BinaryDescriptor::zeros().with_flipped([0, 255]);
        let hex = d.to_hex();
        assert_eq!(hex.len(), 64);
        assert!(hex.starts_with("0000000000000001"));
        assert!(hex.ends_with("8000000000000000"));
        assert_eq!(hex.parse::<BinaryDescriptor>().unwrap(), d);
        assert!(BinaryDescriptor::from_hex("xyz").is_err());
    }

    fn arb_descriptor() -> impl Strategy<Value = BinaryDescriptor> {
        any::<[u64; 4]>().prop_map(BinaryDescriptor::from_words)
    }

    proptest! {
        #[test]
        fn substrings_reconstruct_prefix(d in arb_descriptor(), t in 1usize..=256) {
            let views = d.split_substrings(t).unwrap();
            let width = 256 / t;
            for pos in 0..t * width {
                let v = &views[pos / width].value;
                let off = pos % width;
                let bit = (v.words()[off / 64] >> (off % 64)) & 1 == 1;
                prop_assert_eq!(bit, d.bit(pos));
            }
        }

        #[test]
        fn distinct_perturbation_is_exact(d in arb_descriptor(), k in 0usize..=256, seed in any::<u64>()) {
            let p = d.perturb(PerturbationSpec::distinct(k).unwrap(), seed);
            prop_assert_eq!(d.hamming(&p) as usize, k);
        }

        #[test]
        fn hamming_is_a_metric(a in arb_descriptor(), b in arb_descriptor(), c in arb_descriptor()) {
            prop_assert_eq!(a.hamming(&b), b.hamming(&a));
            prop_assert!(a.hamming(&c) <= a.hamming(&b) + b.hamming(&c));
            prop_assert_eq!(a.hamming(&b) == 0, a == b);
        }
    }
}

//! Binary vectors and the XOR-popcount linear primitive.
//!
//! `y = popcount(x ⊕ w) − d/2`. Matching bits lower the score, so identical
//! vectors give the minimum `−d/2`; with the ±1 decoding (`bit 1 ↦ +1`) this
//! is exactly `−dot(x, w) / 2`.

use crate::error::{Error, Result};

/// Default binarization threshold.
pub const DEFAULT_THRESHOLD: f32 = 0.05;

/// Bit vector of length `d`, LSB-first. Bits are held in little-endian
/// `u64` words, so byte `i` of the payload is bits `8i..8i+8`. Padding
/// beyond `d` is always zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitVector {
    len: usize,
    words: Vec<u64>,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        BitVector {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut v = BitVector::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                v.words[i / 64] |= 1 << (i % 64);
            }
        }
        v
    }

    /// Builds from an LSB-first byte payload; pad bits must be zero.
    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::shape(format!("{len} bits"), format!("{} bytes", bytes.len())));
        }
        let mut v = BitVector::zeros(len);
        for (i, &b) in bytes.iter().enumerate() {
            v.words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        if v.words.last().is_some_and(|&w| w & !v.tail_mask() != 0) {
            return Err(Error::Integrity("non-zero padding bits".into()));
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.len.div_ceil(8))
            .map(|i| (self.words[i / 8] >> (8 * (i % 8))) as u8)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn complement(&self) -> BitVector {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= self.tail_mask();
        }
        BitVector {
            len: self.len,
            words,
        }
    }

    /// ±1 decoding: `bit 1 ↦ +1`, `bit 0 ↦ −1`.
    pub fn to_signs(&self) -> Vec<f32> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { -1.0 }).collect()
    }

    fn tail_mask(&self) -> u64 {
        match self.len % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }
}

/// `bit i = 1` iff `x_i > threshold` (strict).
pub fn binarize(x: &[f32], threshold: f32) -> BitVector {
    let mut v = BitVector::zeros(x.len());
    for (i, &xi) in x.iter().enumerate() {
        if xi > threshold {
            v.words[i / 64] |= 1 << (i % 64);
        }
    }
    v
}

/// Hamming distance between equal-length vectors.
pub fn hamming(a: &BitVector, b: &BitVector) -> Result<u32> {
    if a.len != b.len {
        return Err(Error::shape(format!("x of {} bits", a.len), format!("w of {} bits", b.len)));
    }
    // Pad bits are zero in both operands, so they never contribute.
    Ok(a.words
        .iter()
        .zip(&b.words)
        .map(|(x, w)| (x ^ w).count_ones())
        .sum())
}

/// `popcount(x ⊕ w) − d/2`.
pub fn popcount_linear(x: &BitVector, w: &BitVector) -> Result<f32> {
    let h = hamming(x, w)?;
    Ok(h as f32 - x.len as f32 / 2.0)
}

/// `out_j = popcount_linear(x, rows[j]) + bias_j`.
pub fn bitwise_affine(x: &BitVector, rows: &[BitVector], bias: &[f32]) -> Result<Vec<f32>> {
    if bias.len() != rows.len() {
        return Err(Error::shape(format!("{} rows", rows.len()), format!("bias of {}", bias.len())));
    }
    rows.iter()
        .zip(bias)
        .map(|(w, b)| Ok(popcount_linear(x, w)? + b))
        .collect()
}

/// `out_j = scale_j · popcount_linear(x, rows[j]) + bias_j`, the form used
/// by post-training binarized layers.
pub fn scaled_bitwise_affine(
    x: &BitVector,
    rows: &[BitVector],
    scales: &[f32],
    bias: &[f32],
) -> Result<Vec<f32>> {
    if scales.len() != rows.len() || bias.len() != rows.len() {
        return Err(Error::shape(
            format!("{} rows", rows.len()),
            format!("{} scales / {} bias", scales.len(), bias.len()),
        ));
    }
    rows.iter()
        .zip(scales.iter().zip(bias))
        .map(|(w, (s, b))| Ok(s * popcount_linear(x, w)? + b))
        .collect()
}

/// Popcount words needed by a dense `m × n` binary layer.
pub fn popcount_words(in_dim: usize, out_dim: usize) -> u64 {
    (in_dim.div_ceil(64) * out_dim) as u64
}

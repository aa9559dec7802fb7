//! Binary masks and their run-length wire encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Contract(format!(
                "mask of {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// Thresholds a probability map (`p >= threshold` is foreground).
    pub fn from_probs<T: Scalar>(height: usize, width: usize, probs: &[T], threshold: f64) -> Result<Self> {
        let t = T::from_f64c(threshold);
        Self::from_bits(height, width, probs.iter().map(|&p| p >= t).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn xor(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a ^ b).collect();
        Ok(Self { height: self.height, width: self.width, bits })
    }

    pub fn and_count(&self, other: &Self) -> Result<usize> {
        self.check_shape(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    pub fn to_probs<T: Scalar>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }
}

/// Row-major run lengths, alternating background/foreground and starting
/// with background (a leading zero-length run when pixel 0 is foreground).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &b in &mask.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Self { height: mask.height, width: mask.width, counts }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total: usize = self.counts.iter().sum();
        if total != self.height * self.width {
            return Err(Error::Format(format!(
                "rle covers {total} pixels, expected {}",
                self.height * self.width
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c));
        }
        BinaryMask::from_bits(self.height, self.width, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_leading_foreground() {
        let m = BinaryMask::from_bits(1, 4, vec![true, true, false, true]).unwrap();
        let r = m.to_rle();
        assert_eq!(r.counts, vec![0, 2, 1, 1]);
        assert_eq!(r.decode().unwrap(), m);
    }

    #[test]
    fn rle_length_mismatch_is_format_error() {
        let r = Rle { height: 2, width: 2, counts: vec![1, 2] };
        assert!(matches!(r.decode(), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn rle_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let bits: Vec<bool> = (0..h * w).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let m = BinaryMask::from_bits(h, w, bits).unwrap();
            prop_assert_eq!(m.to_rle().decode().unwrap(), m);
        }
    }
}

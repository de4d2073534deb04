//! Binary masks on a pixel grid.

use crate::error::{Error, Result};

/// A dense boolean mask with row-major storage.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!(
                "mask data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(other.data.iter())
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(other.data.iter())
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// Set difference `self \ other`.
    pub fn minus(&self, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a && !b)
            .collect();
        Self {
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn union_with(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a |= b;
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// Builds a mask from real values using `v >= threshold`.
    pub fn from_f32(h: usize, w: usize, values: &[f32], threshold: f32) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape(format!(
                "value length {} does not match {h}x{w}",
                values.len()
            )));
        }
        Ok(Self {
            h,
            w,
            data: values.iter().map(|&v| v >= threshold).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_and_difference() {
        let big = BinaryMask::from_fn(4, 4, |y, x| y >= 1 && x >= 1);
        let small = BinaryMask::from_fn(4, 4, |y, x| y >= 2 && x >= 2);
        assert!(small.is_subset_of(&big));
        assert!(!big.is_subset_of(&small));
        let diff = big.minus(&small);
        assert_eq!(diff.count(), big.count() - small.count());
        assert!(diff.is_subset_of(&big));
        assert_eq!(diff.intersection_count(&small), 0);
    }

    #[test]
    fn threshold_convention_is_ge() {
        let m = BinaryMask::from_f32(1, 3, &[0.49, 0.5, 0.51], 0.5).unwrap();
        assert_eq!(m.data(), &[false, true, true]);
    }
}

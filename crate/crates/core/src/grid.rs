//! Image, label map and probability map containers shared by every stage.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Label value reserved for pixels whose class is not known.
pub const UNKNOWN: u8 = 255;

/// Largest usable label index (255 is reserved).
pub const MAX_LABEL: u8 = 254;

/// Single-channel intensity image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Image {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// True if every intensity lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Per-pixel labels in `0..=L` or [`UNKNOWN`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "label map has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn unknown(width: usize, height: usize) -> Self {
        Self::filled(width, height, UNKNOWN)
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        LabelMap {
            width,
            height,
            data: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_dims(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    pub fn count_known(&self) -> usize {
        self.data.iter().filter(|&&l| l != UNKNOWN).count()
    }

    pub fn count_unknown(&self) -> usize {
        self.len() - self.count_known()
    }

    pub fn has_unknown(&self) -> bool {
        self.data.contains(&UNKNOWN)
    }

    /// Largest known label, if any.
    pub fn max_label(&self) -> Option<u8> {
        self.data.iter().copied().filter(|&l| l != UNKNOWN).max()
    }

    /// Copy every known pixel of `seeds` over `self`.
    pub fn overwrite_with(&mut self, seeds: &LabelMap) {
        debug_assert!(seeds.same_dims(self.width, self.height));
        for (dst, &s) in self.data.iter_mut().zip(&seeds.data) {
            if s != UNKNOWN {
                *dst = s;
            }
        }
    }
}

/// Per-pixel categorical distribution stored label-major (`[label][pixel]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T> {
    width: usize,
    height: usize,
    num_labels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    pub fn new(width: usize, height: usize, num_labels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * num_labels {
            return Err(Error::Input(format!(
                "probability map has {} values, expected {}x{}x{}",
                data.len(),
                num_labels,
                width,
                height
            )));
        }
        Ok(ProbMap {
            width,
            height,
            num_labels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, num_labels: usize) -> Self {
        ProbMap {
            width,
            height,
            num_labels,
            data: vec![T::zero(); width * height * num_labels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, label: usize, pixel: usize) -> T {
        self.data[label * self.num_pixels() + pixel]
    }

    #[inline]
    pub fn set(&mut self, label: usize, pixel: usize, v: T) {
        let n = self.num_pixels();
        self.data[label * n + pixel] = v;
    }

    pub fn plane(&self, label: usize) -> &[T] {
        let n = self.num_pixels();
        &self.data[label * n..(label + 1) * n]
    }

    pub fn plane_mut(&mut self, label: usize) -> &mut [T] {
        let n = self.num_pixels();
        &mut self.data[label * n..(label + 1) * n]
    }

    /// Per-pixel argmax; ties go to the lowest label index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.num_pixels();
        let mut out = vec![0u8; n];
        for (p, o) in out.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = self.get(0, p);
            for l in 1..self.num_labels {
                let v = self.get(l, p);
                if v > best_v {
                    best = l;
                    best_v = v;
                }
            }
            *o = best as u8;
        }
        LabelMap {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    /// Largest deviation of a per-pixel sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.num_pixels())
            .map(|p| {
                let s: f64 = (0..self.num_labels).map(|l| self.get(l, p).as_f64()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        let pm = ProbMap::<f64>::new(2, 1, 3, vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
        assert_eq!(pm.argmax().data(), &[0, 2]);
    }

    #[test]
    fn overwrite_keeps_unknown_holes() {
        let mut a = LabelMap::new(3, 1, vec![0, 1, 2]).unwrap();
        let s = LabelMap::new(3, 1, vec![UNKNOWN, 2, UNKNOWN]).unwrap();
        a.overwrite_with(&s);
        assert_eq!(a.data(), &[0, 2, 2]);
    }

    #[test]
    fn dims_checked() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 5]).is_err());
    }
}

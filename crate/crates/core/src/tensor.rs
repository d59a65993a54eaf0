//! Dense four-dimensional tensors in N×C×H×W layout.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Extents of a 4-D tensor: batch, channels, rows, cols.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Element count, or a sizing error if any dimension is zero or the
    /// product overflows.
    pub fn checked_len(&self) -> Result<usize> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Sizing(format!("zero dimension in {self}")));
        }
        let len = [self.c, self.h, self.w]
            .iter()
            .try_fold(self.n, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Sizing(format!("element count of {self} overflows")))?;
        len.checked_mul(std::mem::size_of::<f64>())
            .filter(|&b| b <= isize::MAX as usize)
            .ok_or_else(|| Error::Sizing(format!("{self} exceeds addressable memory")))?;
        Ok(len)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Size of one H×W plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Size of one sample (C×H×W).
    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor of exactly `shape`.
    pub fn alloc(shape: Shape) -> Result<Self> {
        let len = shape.checked_len()?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    /// Like [`Tensor::alloc`] for shapes already known to be valid.
    pub fn zeros(shape: Shape) -> Self {
        Self::alloc(shape).expect("valid tensor shape")
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let len = shape.checked_len()?;
        if data.len() != len {
            return Err(shape_err(format!(
                "{} values supplied for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let o = self.shape.offset(n, c, h, w);
        &mut self.data[o]
    }

    /// The H×W plane of channel `c` in sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.shape.sample();
        &self.data[n * s..(n + 1) * s]
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Copies samples `[start, end)` into a new tensor.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape.n {
            return Err(shape_err(format!(
                "batch range {start}..{end} invalid for {}",
                self.shape
            )));
        }
        let s = self.shape.sample();
        Self::from_vec(
            Shape::new(end - start, self.shape.c, self.shape.h, self.shape.w),
            self.data[start * s..end * s].to_vec(),
        )
    }

    /// Gathers the listed samples, in order, into a new tensor.
    pub fn gather_samples(&self, indices: &[usize]) -> Result<Self> {
        let s = self.shape.sample();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            if i >= self.shape.n {
                return Err(shape_err(format!("sample {i} out of range for {}", self.shape)));
            }
            data.extend_from_slice(&self.data[i * s..(i + 1) * s]);
        }
        Self::from_vec(
            Shape::new(indices.len(), self.shape.c, self.shape.h, self.shape.w),
            data,
        )
    }

    /// Surfaces NaN/Inf as an error naming the producing operation.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_is_zero_filled() {
        let t = Tensor::alloc(Shape::new(1, 1, 2, 2)).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::alloc(Shape::new(2, 3, 4, 4)).unwrap();
        assert_eq!(t.len(), 96);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alloc_rejects_zero_dim_and_overflow() {
        assert!(matches!(
            Tensor::alloc(Shape::new(1, 0, 1, 1)),
            Err(Error::Sizing(_))
        ));
        assert!(matches!(
            Tensor::alloc(Shape::new(usize::MAX, 2, 1, 1)),
            Err(Error::Sizing(_))
        ));
    }

    #[test]
    fn offsets_are_row_major_nchw() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.offset(1, 2, 3, 4), s.len() - 1);
        assert_eq!(s.offset(0, 1, 0, 0), 20);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut t = Tensor::zeros(Shape::new(1, 1, 1, 2));
        t.data_mut()[1] = f64::NAN;
        assert!(matches!(
            t.ensure_finite("probe"),
            Err(Error::NonFinite { op: "probe" })
        ));
    }
}

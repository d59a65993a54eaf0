//! Matrix product and patch extraction used by every convolution.

use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Strided read-only view handed to the GEMM kernel.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize + 1
        }
    }
}

/// `c = alpha · a · b + beta · c` with `c` row-major `a.rows × b.cols`.
pub fn gemm_into(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) -> Result<()> {
    if a.cols != b.rows {
        return Err(shape_err(format!(
            "gemm inner dims {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if c.len() != m * n || a.data.len() < a.span() || b.data.len() < b.span() {
        return Err(shape_err(format!(
            "gemm buffers too small for {m}x{k}·{k}x{n}"
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return Ok(());
    }
    // SAFETY: every index the kernel touches, (m-1)·rs + (k-1)·cs for the
    // operands and m·n for the output, was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_into(
        1.0,
        View::row_major(&a.data, a.rows, a.cols),
        View::row_major(&b.data, b.rows, b.cols),
        0.0,
        &mut out.data,
    )?;
    Ok(out)
}

/// Output extent of a sliding window, or an error when the geometry
/// leaves no valid position.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(shape_err("kernel and stride must be at least 1"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(shape_err(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Geometry of one patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PatchGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            k,
            stride,
            pad,
            oh: conv_out_dim(h, k, stride, pad)?,
            ow: conv_out_dim(w, k, stride, pad)?,
        })
    }

    /// Range of output columns `ox` whose input column `ox·stride + kx - pad`
    /// lands inside `[0, w)`.
    fn valid_range(&self, kx: usize, w: usize) -> (usize, usize) {
        let lo_num = self.pad as isize - kx as isize;
        let lo = if lo_num <= 0 {
            0
        } else {
            (lo_num as usize).div_ceil(self.stride)
        };
        // ox·stride + kx - pad <= w - 1
        let hi_num = w as isize - 1 + self.pad as isize - kx as isize;
        let hi = if hi_num < 0 {
            0
        } else {
            (hi_num as usize / self.stride + 1).min(self.ow)
        };
        (lo.min(hi), hi)
    }
}

/// Patch matrix over the whole batch for channels `c0..c0+cc`: rows are
/// `(channel, ky, kx)`, columns are `(sample, oy, ox)`.
pub fn im2col_range(x: &Tensor, c0: usize, cc: usize, geom: &PatchGeom) -> Matrix {
    let s = x.shape();
    let k = geom.k;
    let ohw = geom.oh * geom.ow;
    let cols = s.n * ohw;
    let mut m = Matrix::zeros(cc * k * k, cols);
    for ci in 0..cc {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let (lo, hi) = geom.valid_range(kx, s.w);
                let dst_row = &mut m.data[row * cols..(row + 1) * cols];
                for n in 0..s.n {
                    let plane = x.plane(n, c0 + ci);
                    for oy in 0..geom.oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let dst = &mut dst_row[n * ohw + oy * geom.ow..n * ohw + (oy + 1) * geom.ow];
                        if geom.stride == 1 {
                            let start = lo + kx - geom.pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src[ox * geom.stride + kx - geom.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    m
}

/// Patch matrix for all channels of `x`.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Matrix> {
    let s = x.shape();
    let geom = PatchGeom::new(s.h, s.w, k, stride, pad)?;
    Ok(im2col_range(x, 0, s.c, &geom))
}

/// Adjoint of [`im2col_range`]: scatters-adds patch columns back into
/// channels `c0..c0+cc` of `dx`.
pub fn col2im_range(cols: &[f64], dx: &mut Tensor, c0: usize, cc: usize, geom: &PatchGeom) {
    let s: Shape = dx.shape();
    let k = geom.k;
    let ohw = geom.oh * geom.ow;
    let ncols = s.n * ohw;
    for ci in 0..cc {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let (lo, hi) = geom.valid_range(kx, s.w);
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..s.n {
                    let plane = dx.plane_mut(n, c0 + ci);
                    for oy in 0..geom.oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let src = &src_row[n * ohw + oy * geom.ow..n * ohw + (oy + 1) * geom.ow];
                        for ox in lo..hi {
                            dst[ox * geom.stride + kx - geom.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for p in 0..a.cols {
                    s += a.get(i, p) * b.get(p, j);
                }
                c.data[i * b.cols + j] = s;
            }
        }
        c
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_product() {
        let mut rng = Rng::new(0);
        let b = random(&mut rng, 3, 4);
        assert_eq!(gemm(&Matrix::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = Rng::new(1);
        for (m, k, n) in [(2, 3, 2), (5, 7, 3), (17, 33, 9)] {
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let got = gemm(&a, &b).unwrap();
            let want = naive(&a, &b);
            for (g, w) in got.data.iter().zip(&want.data) {
                assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn inner_dim_mismatch() {
        assert!(gemm(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn unit_kernel_im2col_is_reshape() {
        let mut rng = Rng::new(2);
        let shape = Shape::new(1, 3, 4, 5);
        let x = Tensor::from_vec(shape, (0..60).map(|_| rng.next_f64()).collect()).unwrap();
        let m = im2col(&x, 1, 1, 0).unwrap();
        assert_eq!((m.rows, m.cols), (3, 20));
        assert_eq!(m.data, x.data());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = Rng::new(3);
        for (h, w, k, stride, pad) in [(5, 6, 3, 1, 1), (7, 7, 3, 2, 0), (6, 5, 5, 2, 2)] {
            let shape = Shape::new(2, 2, h, w);
            let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.normal()).collect())
                .unwrap();
            let geom = PatchGeom::new(h, w, k, stride, pad).unwrap();
            let cols = im2col_range(&x, 0, 2, &geom);
            let y: Vec<f64> = (0..cols.data.len()).map(|_| rng.normal()).collect();
            let lhs: f64 = cols.data.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = Tensor::zeros(shape);
            col2im_range(&y, &mut dx, 0, 2, &geom);
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }
}

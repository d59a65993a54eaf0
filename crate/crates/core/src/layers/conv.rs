//! Grouped 2-D convolution via im2col + GEMM.

use crate::error::{config_err, shape_err, Result};
use crate::linalg::{col2im_range, gemm_into, im2col_range, PatchGeom, View};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub inch: usize,
    pub outch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    /// `(outch, inch / groups, k, k)`.
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

impl ConvParams {
    /// Zero-weight convolution without bias.
    pub fn new(
        inch: usize,
        outch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || inch % groups != 0 || outch % groups != 0 {
            return Err(config_err(format!(
                "groups={groups} must divide inch={inch} and outch={outch}"
            )));
        }
        if k == 0 || stride == 0 {
            return Err(config_err("kernel size and stride must be at least 1"));
        }
        let weight = Tensor::alloc(Shape::new(outch, inch / groups, k, k))?;
        Ok(Self {
            inch,
            outch,
            k,
            stride,
            pad,
            groups,
            weight,
            bias: None,
        })
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = Some(vec![0.0; self.outch]);
        self
    }

    pub fn fan_in(&self) -> usize {
        self.inch / self.groups * self.k * self.k
    }

    /// He fan-in uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, one
    /// draw per weight in storage order. Bias stays zero.
    pub fn he_init(&mut self, rng: &mut Rng) {
        let bound = (6.0 / self.fan_in() as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = rng.uniform(-bound, bound);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.inch {
            return Err(shape_err(format!(
                "conv expects {} input channels, got {input}",
                self.inch
            )));
        }
        let g = PatchGeom::new(input.h, input.w, self.k, self.stride, self.pad)?;
        Ok(Shape::new(input.n, self.outch, g.oh, g.ow))
    }

    fn geom(&self, input: Shape) -> Result<PatchGeom> {
        PatchGeom::new(input.h, input.w, self.k, self.stride, self.pad)
    }
}

/// Patch matrices from the forward pass, one per group.
#[derive(Clone, Debug)]
pub struct ConvCache {
    input_shape: Shape,
    geom: PatchGeom,
    cols: Vec<Vec<f64>>,
}

impl ConvCache {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub grad_x: Option<Tensor>,
    pub grad_w: Tensor,
    pub grad_b: Option<Vec<f64>>,
}

pub fn conv_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    conv_forward_cached(x, p).map(|(y, _)| y)
}

pub fn conv_forward_cached(x: &Tensor, p: &ConvParams) -> Result<(Tensor, ConvCache)> {
    let in_shape = x.shape();
    let out_shape = p.output_shape(in_shape)?;
    let geom = p.geom(in_shape)?;
    let (cin_g, oc_g) = (p.inch / p.groups, p.outch / p.groups);
    let kk = cin_g * p.k * p.k;
    let ohw = geom.oh * geom.ow;
    let ncols = in_shape.n * ohw;
    let mut y = Tensor::zeros(out_shape);
    let mut all_cols = Vec::with_capacity(p.groups);
    let mut tmp = vec![0.0; oc_g * ncols];
    for g in 0..p.groups {
        let cols = im2col_range(x, g * cin_g, cin_g, &geom);
        let w = &p.weight.data()[g * oc_g * kk..(g + 1) * oc_g * kk];
        gemm_into(
            1.0,
            View::row_major(w, oc_g, kk),
            View::row_major(&cols.data, kk, ncols),
            0.0,
            &mut tmp,
        )?;
        for o in 0..oc_g {
            let oc = g * oc_g + o;
            let b = p.bias.as_ref().map_or(0.0, |b| b[oc]);
            for n in 0..in_shape.n {
                let src = &tmp[o * ncols + n * ohw..o * ncols + (n + 1) * ohw];
                let dst = y.plane_mut(n, oc);
                if b == 0.0 {
                    dst.copy_from_slice(src);
                } else {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + b);
                }
            }
        }
        all_cols.push(cols.data);
    }
    Ok((
        y,
        ConvCache {
            input_shape: in_shape,
            geom,
            cols: all_cols,
        },
    ))
}

/// Reverse-mode gradients recomputing the patch matrices from `x`.
pub fn conv_backward(grad_out: &Tensor, x: &Tensor, p: &ConvParams) -> Result<ConvGrads> {
    let (_, cache) = conv_forward_cached(x, p)?;
    conv_backward_cached(grad_out, &cache, p, true)
}

pub fn conv_backward_cached(
    grad_out: &Tensor,
    cache: &ConvCache,
    p: &ConvParams,
    need_grad_x: bool,
) -> Result<ConvGrads> {
    let in_shape = cache.input_shape;
    let out_shape = p.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(shape_err(format!(
            "conv grad_out {} does not match forward output {out_shape}",
            grad_out.shape()
        )));
    }
    if cache.cols.len() != p.groups {
        return Err(crate::error::Error::StaleCache(
            "conv cache was produced with a different group count".into(),
        ));
    }
    let geom = cache.geom;
    let (cin_g, oc_g) = (p.inch / p.groups, p.outch / p.groups);
    let kk = cin_g * p.k * p.k;
    let ohw = geom.oh * geom.ow;
    let ncols = in_shape.n * ohw;
    let mut grad_w = Tensor::zeros(p.weight.shape());
    let mut grad_x = need_grad_x.then(|| Tensor::zeros(in_shape));
    let mut gmat = vec![0.0; oc_g * ncols];
    let mut gcols = if need_grad_x {
        vec![0.0; kk * ncols]
    } else {
        Vec::new()
    };
    for g in 0..p.groups {
        for o in 0..oc_g {
            for n in 0..in_shape.n {
                gmat[o * ncols + n * ohw..o * ncols + (n + 1) * ohw]
                    .copy_from_slice(grad_out.plane(n, g * oc_g + o));
            }
        }
        let cols = &cache.cols[g];
        gemm_into(
            1.0,
            View::row_major(&gmat, oc_g, ncols),
            View::transposed(cols, kk, ncols),
            0.0,
            &mut grad_w.data_mut()[g * oc_g * kk..(g + 1) * oc_g * kk],
        )?;
        if let Some(gx) = grad_x.as_mut() {
            let w = &p.weight.data()[g * oc_g * kk..(g + 1) * oc_g * kk];
            gemm_into(
                1.0,
                View::transposed(w, oc_g, kk),
                View::row_major(&gmat, oc_g, ncols),
                0.0,
                &mut gcols,
            )?;
            col2im_range(&gcols, gx, g * cin_g, cin_g, &geom);
        }
    }
    let grad_b = p.bias.as_ref().map(|_| {
        (0..p.outch)
            .map(|oc| {
                (0..in_shape.n)
                    .map(|n| grad_out.plane(n, oc).iter().sum::<f64>())
                    .sum()
            })
            .collect()
    });
    Ok(ConvGrads {
        grad_x,
        grad_w,
        grad_b,
    })
}

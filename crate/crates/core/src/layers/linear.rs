use crate::error::{config_err, shape_err, Error, Result};
use crate::linalg::{gemm_into, View};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Fully connected layer over flattened C×H×W features; output is
/// `(n, outf, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub inf: usize,
    pub outf: usize,
    /// Row-major `outf × inf`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn new(inf: usize, outf: usize) -> Result<Self> {
        if inf == 0 || outf == 0 {
            return Err(config_err("linear layer needs non-zero widths"));
        }
        Ok(Self {
            inf,
            outf,
            weight: vec![0.0; inf * outf],
            bias: vec![0.0; outf],
        })
    }

    /// He fan-in uniform weights, zero bias.
    pub fn he_init(&mut self, rng: &mut Rng) {
        let bound = (6.0 / self.inf as f64).sqrt();
        for w in &mut self.weight {
            *w = rng.uniform(-bound, bound);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub struct LinearGrads {
    pub grad_x: Tensor,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

pub fn linear_forward(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let s = x.shape();
    if s.sample() != p.inf {
        return Err(shape_err(format!("linear expects {} features, got {s}", p.inf)));
    }
    let mut y = Tensor::zeros(Shape::new(s.n, p.outf, 1, 1));
    for n in 0..s.n {
        y.data_mut()[n * p.outf..(n + 1) * p.outf].copy_from_slice(&p.bias);
    }
    gemm_into(
        1.0,
        View::row_major(x.data(), s.n, p.inf),
        View::transposed(&p.weight, p.outf, p.inf),
        1.0,
        y.data_mut(),
    )?;
    Ok(y)
}

pub fn linear_backward(grad_out: &Tensor, x: &Tensor, p: &LinearParams) -> Result<LinearGrads> {
    let s = x.shape();
    if grad_out.shape() != Shape::new(s.n, p.outf, 1, 1) {
        return Err(shape_err(format!("linear grad_out {}", grad_out.shape())));
    }
    let mut grad_x = Tensor::zeros(s);
    gemm_into(
        1.0,
        View::row_major(grad_out.data(), s.n, p.outf),
        View::row_major(&p.weight, p.outf, p.inf),
        0.0,
        grad_x.data_mut(),
    )?;
    let mut grad_w = vec![0.0; p.outf * p.inf];
    gemm_into(
        1.0,
        View::transposed(grad_out.data(), s.n, p.outf),
        View::row_major(x.data(), s.n, p.inf),
        0.0,
        &mut grad_w,
    )?;
    let mut grad_b = vec![0.0; p.outf];
    for n in 0..s.n {
        for (b, g) in grad_b.iter_mut().zip(&grad_out.data()[n * p.outf..(n + 1) * p.outf]) {
            *b += g;
        }
    }
    Ok(LinearGrads {
        grad_x,
        grad_w,
        grad_b,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let k = s.sample();
    if labels.len() != s.n {
        return Err(shape_err(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        let z = logits.sample(n);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - z[label];
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for i in 0..k {
            g[i] = (z[i] - lse).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_xent" });
    }
    Ok((loss, grad))
}

/// Index of the largest logit per sample (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape().n;
    (0..n)
        .map(|i| {
            let z = logits.sample(i);
            let mut best = 0;
            for j in 1..z.len() {
                if z[j] > z[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

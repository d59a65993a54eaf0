//! Order statistics of pooled responses and empirical invariance probes.
//!
//! Three levels: the closed-form variance of the maximum of `n` iid
//! `U(0, 1)` draws, Monte Carlo estimates of pooled dot products
//! `max_i ⟨x, g_i w⟩` under sampled unitary operators, and variance of a
//! network layer's channels across a sweep of input rotations.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, shape_err, Error, Result};
use crate::mnist::rotate;
use crate::model::{Layer, Model};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Moments of `X_(n) = max(X_1..X_n)`, `X_i ~ U(0, 1)` iid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformMaxStat {
    pub n: usize,
    pub e_max: f64,
    pub e_max_sq: f64,
    pub var_max: f64,
}

impl UniformMaxStat {
    pub fn new(n: usize) -> Result<Self> {
        Ok(Self {
            n,
            e_max: n as f64 / (n as f64 + 1.0),
            e_max_sq: n as f64 / (n as f64 + 2.0),
            var_max: var_max_closed_form(n)?,
        })
    }
}

/// `n / ((n + 2)(n + 1)²)`.
pub fn var_max_closed_form(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(config_err("pool size must be at least 1"));
    }
    let n = n as f64;
    Ok(n / ((n + 2.0) * (n + 1.0) * (n + 1.0)))
}

/// Sample variance with a batch-means standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

pub const MC_BATCHES: usize = 100;
pub const MC_MIN_SAMPLES: usize = 10_000;

fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Variance over all values; stderr from the spread of per-batch
/// variances over [`MC_BATCHES`] contiguous batches.
fn batched_variance(values: &[f64]) -> McEstimate {
    let per = values.len() / MC_BATCHES;
    let batch_vars: Vec<f64> = values.chunks_exact(per).take(MC_BATCHES).map(sample_var).collect();
    McEstimate {
        estimate: sample_var(values),
        stderr: (sample_var(&batch_vars) / MC_BATCHES as f64).sqrt(),
    }
}

pub fn mc_var_max_uniform(n: usize, samples: usize, rng: &mut Rng) -> Result<McEstimate> {
    if n == 0 {
        return Err(config_err("pool size must be at least 1"));
    }
    if samples < MC_MIN_SAMPLES {
        return Err(config_err(format!("need at least {MC_MIN_SAMPLES} samples")));
    }
    let maxima: Vec<f64> = (0..samples)
        .map(|_| (0..n).map(|_| rng.next_f64()).fold(0.0, f64::max))
        .collect();
    Ok(batched_variance(&maxima))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleFamily {
    /// Haar orthogonal matrices: QR of a Gaussian matrix with the signs of
    /// `diag(R)` folded into `Q`.
    Orthogonal,
    /// Rotations of a `p × p` patch by a uniformly drawn multiple of 90°,
    /// acting as permutation matrices on `d = p²`.
    PatchRotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitaryEnsemble {
    pub d: usize,
    pub family: EnsembleFamily,
}

impl UnitaryEnsemble {
    pub fn new(d: usize, family: EnsembleFamily) -> Result<Self> {
        if d < 2 {
            return Err(config_err("ensemble dimension must be at least 2"));
        }
        if family == EnsembleFamily::PatchRotation {
            let p = (d as f64).sqrt().round() as usize;
            if p * p != d {
                return Err(config_err(format!("patch rotations need a square dimension, got {d}")));
            }
        }
        Ok(Self { d, family })
    }

    pub fn sample(&self, rng: &mut Rng) -> DMatrix<f64> {
        match self.family {
            EnsembleFamily::Orthogonal => {
                let a = DMatrix::from_fn(self.d, self.d, |_, _| rng.normal());
                let qr = a.qr();
                let r = qr.r();
                let mut q = qr.q();
                for j in 0..self.d {
                    if r[(j, j)] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                q
            }
            EnsembleFamily::PatchRotation => {
                let p = (self.d as f64).sqrt().round() as usize;
                let k = rng.below(4);
                let mut g = DMatrix::zeros(self.d, self.d);
                for y in 0..p {
                    for x in 0..p {
                        let (ty, tx) = match k {
                            0 => (y, x),
                            1 => (p - 1 - x, y),
                            2 => (p - 1 - y, p - 1 - x),
                            _ => (x, p - 1 - y),
                        };
                        g[(ty * p + tx, y * p + x)] = 1.0;
                    }
                }
                g
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvarianceEstimate {
    pub pooled: McEstimate,
    pub unpooled: McEstimate,
}

impl InvarianceEstimate {
    /// `var_unpooled - var_pooled` in units of the combined stderr.
    pub fn margin_sigmas(&self) -> f64 {
        let se = (self.pooled.stderr.powi(2) + self.unpooled.stderr.powi(2)).sqrt();
        (self.unpooled.estimate - self.pooled.estimate) / se
    }
}

pub const UNITARY_TOL: f64 = 1e-10;

/// For each trial draws `n_pool` operators; `pooled` is the variance of
/// `max_i ⟨x, g_i w⟩`, `unpooled` that of `⟨x, g_1 w⟩`. Every sample is
/// checked for norm preservation and `⟨x, gw⟩ = ⟨g⁻¹x, w⟩`.
pub fn mc_invariance(
    x: &[f64],
    w: &[f64],
    ensemble: &UnitaryEnsemble,
    n_pool: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<InvarianceEstimate> {
    if x.len() != ensemble.d || w.len() != ensemble.d {
        return Err(shape_err(format!(
            "vectors of length {} and {} for an ensemble of dimension {}",
            x.len(),
            w.len(),
            ensemble.d
        )));
    }
    if n_pool == 0 {
        return Err(config_err("pool size must be at least 1"));
    }
    if trials < MC_BATCHES * 2 {
        return Err(config_err(format!("need at least {} trials", MC_BATCHES * 2)));
    }
    let xv = DVector::from_column_slice(x);
    let wv = DVector::from_column_slice(w);
    let wn = wv.norm();
    let mut pooled = Vec::with_capacity(trials);
    let mut unpooled = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut best = f64::NEG_INFINITY;
        let mut first = 0.0;
        for i in 0..n_pool {
            let g = ensemble.sample(rng);
            let gw = &g * &wv;
            let scale = wn.max(1.0);
            if (gw.norm() - wn).abs() > UNITARY_TOL * scale {
                return Err(Error::Ensemble(format!(
                    "sample changed a norm from {wn} to {}",
                    gw.norm()
                )));
            }
            let dot = xv.dot(&gw);
            let back = (g.transpose() * &xv).dot(&wv);
            if (dot - back).abs() > UNITARY_TOL * scale * xv.norm().max(1.0) {
                return Err(Error::Ensemble(format!(
                    "<x, gw> = {dot} but <g^-1 x, w> = {back}"
                )));
            }
            if i == 0 {
                first = dot;
            }
            best = best.max(dot);
        }
        pooled.push(best);
        unpooled.push(first);
    }
    Ok(InvarianceEstimate {
        pooled: batched_variance(&pooled),
        unpooled: batched_variance(&unpooled),
    })
}

/// Per-channel variance of a PRC-NPTN layer's maps across a rotation
/// sweep, averaged over positions and probe images.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub angles: Vec<f64>,
    /// One entry per expanded (pre-CMP) channel.
    pub pre_cmp: Vec<f64>,
    /// One entry per pooled (post-CMP) channel.
    pub post_cmp: Vec<f64>,
    /// Expanded channels pooled by each post-CMP channel.
    pub supports: Vec<Vec<usize>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl ProbeReport {
    pub fn mean_pre(&self) -> f64 {
        mean(&self.pre_cmp)
    }

    pub fn mean_post(&self) -> f64 {
        mean(&self.post_cmp)
    }

    /// Fraction of pooled channels whose variance does not exceed the
    /// largest variance inside their support.
    pub fn support_bound_fraction(&self) -> f64 {
        let ok = self
            .supports
            .iter()
            .zip(&self.post_cmp)
            .filter(|(s, &v)| v <= s.iter().map(|&c| self.pre_cmp[c]).fold(0.0, f64::max) * (1.0 + 1e-12))
            .count();
        ok as f64 / self.post_cmp.len() as f64
    }

    /// `stage,channel,variance,support` rows.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "stage,channel,variance,support")?;
        for (c, v) in self.pre_cmp.iter().enumerate() {
            writeln!(out, "pre_cmp,{c},{v:e},{c}")?;
        }
        for (j, (v, s)) in self.post_cmp.iter().zip(&self.supports).enumerate() {
            let s: Vec<String> = s.iter().map(usize::to_string).collect();
            writeln!(out, "post_cmp,{j},{v:e},{}", s.join(" "))?;
        }
        Ok(())
    }
}

/// Accumulates per-channel variance across the sweep axis.
struct SweepVariance {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    shape: Shape,
}

impl SweepVariance {
    fn new(shape: Shape) -> Self {
        Self {
            sum: vec![0.0; shape.len()],
            sum_sq: vec![0.0; shape.len()],
            shape,
        }
    }

    fn add(&mut self, t: &Tensor) {
        for ((s, q), v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(t.data()) {
            *s += v;
            *q += v * v;
        }
    }

    /// Population variance over `k` sweep points, averaged per channel.
    fn per_channel(&self, k: usize) -> Vec<f64> {
        let s = self.shape;
        let kf = k as f64;
        let mut out = vec![0.0; s.c];
        for n in 0..s.n {
            for (c, o) in out.iter_mut().enumerate() {
                let off = s.offset(n, c, 0, 0);
                for i in off..off + s.plane() {
                    let m = self.sum[i] / kf;
                    *o += (self.sum_sq[i] / kf - m * m).max(0.0);
                }
            }
        }
        let denom = (s.n * s.plane()) as f64;
        out.iter_mut().for_each(|o| *o /= denom);
        out
    }
}

/// Rotates every probe image by each angle, runs the model up to PRC-NPTN
/// layer `layer_idx` in eval mode, and measures variance across angles of
/// its expanded and channel-max-pooled maps.
pub fn layer_invariance_probe(
    model: &mut Model,
    layer_idx: usize,
    probes: &Tensor,
    angles: &[f64],
) -> Result<ProbeReport> {
    if angles.is_empty() {
        return Err(config_err("empty sweep"));
    }
    let Some(Layer::Prcn(layer)) = model.layers.get(layer_idx).cloned() else {
        return Err(config_err(format!("layer {layer_idx} is not a PRC-NPTN layer")));
    };
    let s = probes.shape();
    if s.c != 1 {
        return Err(shape_err(format!("probe images must have 1 channel, got {s}")));
    }
    let mut pre: Option<SweepVariance> = None;
    let mut post: Option<SweepVariance> = None;
    for &a in angles {
        let mut rotated = Tensor::alloc(s)?;
        for n in 0..s.n {
            rotated
                .plane_mut(n, 0)
                .copy_from_slice(&rotate(probes.plane(n, 0), s.h, s.w, a));
        }
        let input = model.forward_until(&rotated, layer_idx)?;
        let (z, m) = layer.forward_probe(&input)?;
        pre.get_or_insert_with(|| SweepVariance::new(z.shape())).add(&z);
        post.get_or_insert_with(|| SweepVariance::new(m.shape())).add(&m);
    }
    let k = angles.len();
    Ok(ProbeReport {
        angles: angles.to_vec(),
        pre_cmp: pre.expect("non-empty sweep").per_channel(k),
        post_cmp: post.expect("non-empty sweep").per_channel(k),
        supports: layer.connectome().supports().map(<[usize]>::to_vec).collect(),
    })
}

/// `-90, -75, ..., 90`.
pub fn default_sweep() -> Vec<f64> {
    (-6..=6).map(|i| i as f64 * 15.0).collect()
}

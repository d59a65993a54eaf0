//! Sequential models assembled from the layer catalog.

use crate::error::{shape_err, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv_backward_cached, conv_forward_cached,
    global_avgpool_backward, global_avgpool_forward, linear_backward, linear_forward,
    prelu_backward, prelu_forward, relu_backward, relu_forward, spatial_maxpool_backward,
    spatial_maxpool_forward, BatchNormState, BnCache, BnMode, ConvCache, ConvParams, LinearParams,
    MaxPoolCache, PReluParams,
};
use crate::prcn_layer::{NptnCache, NptnLayer, PrcnCache, PrcnLayer};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvParams),
    Prcn(PrcnLayer),
    Nptn(NptnLayer),
    BatchNorm(BatchNormState),
    PRelu(PReluParams),
    Relu,
    MaxPool(usize),
    GlobalAvgPool,
    Linear(LinearParams),
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv(ConvCache),
    Prcn(PrcnCache),
    Nptn(NptnCache),
    BatchNorm(BnCache),
    /// Activation input.
    Input(Tensor),
    MaxPool(MaxPoolCache),
    GlobalAvgPool(Shape),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Prcn(_) => "prcn",
            Layer::Nptn(_) => "nptn",
            Layer::BatchNorm(_) => "bn",
            Layer::PRelu(_) => "prelu",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::GlobalAvgPool => "gap",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Learnable parameter blocks in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(p) => conv_params(p),
            Layer::Prcn(l) => {
                let mut v = conv_params(&l.expand);
                for p in &l.pool_net {
                    v.extend(conv_params(p));
                }
                v
            }
            Layer::Nptn(l) => conv_params(&l.expand),
            Layer::BatchNorm(s) => vec![&s.gamma, &s.beta],
            Layer::PRelu(p) => vec![&p.slope],
            Layer::Linear(p) => vec![&p.weight, &p.bias],
            Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(p) => conv_params_mut(p),
            Layer::Prcn(l) => {
                let mut v = conv_params_mut(&mut l.expand);
                for p in &mut l.pool_net {
                    v.extend(conv_params_mut(p));
                }
                v
            }
            Layer::Nptn(l) => conv_params_mut(&mut l.expand),
            Layer::BatchNorm(s) => vec![&mut s.gamma, &mut s.beta],
            Layer::PRelu(p) => vec![&mut p.slope],
            Layer::Linear(p) => vec![&mut p.weight, &mut p.bias],
            Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => Vec::new(),
        }
    }

    /// Non-learnable state (BatchNorm running statistics).
    pub fn buffers(&self) -> Vec<&[f64]> {
        match self {
            Layer::BatchNorm(s) => vec![&s.running_mean, &s.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::BatchNorm(s) => vec![&mut s.running_mean, &mut s.running_var],
            _ => Vec::new(),
        }
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(p) => p.output_shape(s),
            Layer::Prcn(l) => l.output_shape(s),
            Layer::Nptn(l) => l.output_shape(s),
            Layer::BatchNorm(b) => expect_channels(s, b.channels(), "batchnorm"),
            Layer::PRelu(p) => expect_channels(s, p.slope.len(), "prelu"),
            Layer::Relu => Ok(s),
            Layer::MaxPool(k) => Ok(Shape::new(
                s.n,
                s.c,
                crate::layers::pool::pooled_dim(s.h, *k)?,
                crate::layers::pool::pooled_dim(s.w, *k)?,
            )),
            Layer::GlobalAvgPool => Ok(Shape::new(s.n, s.c, 1, 1)),
            Layer::Linear(p) => {
                if s.sample() != p.inf {
                    return Err(shape_err(format!("linear expects {} features, got {s}", p.inf)));
                }
                Ok(Shape::new(s.n, p.outf, 1, 1))
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Conv(p) => {
                let (y, c) = conv_forward_cached(x, p)?;
                (y, LayerCache::Conv(c))
            }
            Layer::Prcn(l) => {
                let (y, c) = l.forward(x)?;
                (y, LayerCache::Prcn(c))
            }
            Layer::Nptn(l) => {
                let (y, c) = l.forward(x)?;
                (y, LayerCache::Nptn(c))
            }
            Layer::BatchNorm(s) => {
                let (y, c) = batchnorm_forward(x, s, mode)?;
                (y, LayerCache::BatchNorm(c))
            }
            Layer::PRelu(p) => (prelu_forward(x, p)?, LayerCache::Input(x.clone())),
            Layer::Relu => (relu_forward(x), LayerCache::Input(x.clone())),
            Layer::MaxPool(k) => {
                let (y, c) = spatial_maxpool_forward(x, *k)?;
                (y, LayerCache::MaxPool(c))
            }
            Layer::GlobalAvgPool => (global_avgpool_forward(x), LayerCache::GlobalAvgPool(x.shape())),
            Layer::Linear(p) => (linear_forward(x, p)?, LayerCache::Input(x.clone())),
        })
    }

    /// Returns the input gradient (when requested) and parameter gradients
    /// in [`Layer::params`] order.
    pub fn backward(
        &self,
        g: &Tensor,
        cache: &LayerCache,
        need_grad_x: bool,
    ) -> Result<(Option<Tensor>, Vec<Vec<f64>>)> {
        let mismatch = || shape_err(format!("cache does not belong to a {} layer", self.name()));
        Ok(match (self, cache) {
            (Layer::Conv(p), LayerCache::Conv(c)) => {
                let gr = conv_backward_cached(g, c, p, need_grad_x)?;
                let mut grads = vec![gr.grad_w.into_vec()];
                grads.extend(gr.grad_b);
                (gr.grad_x, grads)
            }
            (Layer::Prcn(l), LayerCache::Prcn(c)) => {
                let gr = l.backward(g, c, need_grad_x)?;
                let mut grads = vec![gr.grad_expand.into_vec()];
                grads.extend(gr.grad_pool_net.into_iter().map(Tensor::into_vec));
                (gr.grad_x, grads)
            }
            (Layer::Nptn(l), LayerCache::Nptn(c)) => {
                let (gx, gw) = l.backward(g, c, need_grad_x)?;
                (gx, vec![gw.into_vec()])
            }
            (Layer::BatchNorm(s), LayerCache::BatchNorm(c)) => {
                let gr = batchnorm_backward(g, c, s)?;
                (Some(gr.grad_x), vec![gr.grad_gamma, gr.grad_beta])
            }
            (Layer::PRelu(p), LayerCache::Input(x)) => {
                let (gx, gs) = prelu_backward(g, x, p)?;
                (Some(gx), vec![gs])
            }
            (Layer::Relu, LayerCache::Input(x)) => (Some(relu_backward(g, x)?), Vec::new()),
            (Layer::MaxPool(_), LayerCache::MaxPool(c)) => {
                (Some(spatial_maxpool_backward(g, c)?), Vec::new())
            }
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(s)) => {
                (Some(global_avgpool_backward(g, *s)?), Vec::new())
            }
            (Layer::Linear(p), LayerCache::Input(x)) => {
                let gr = linear_backward(g, x, p)?;
                (Some(gr.grad_x), vec![gr.grad_w, gr.grad_b])
            }
            _ => return Err(mismatch()),
        })
    }
}

fn conv_params(p: &ConvParams) -> Vec<&[f64]> {
    let mut v: Vec<&[f64]> = vec![p.weight.data()];
    if let Some(b) = &p.bias {
        v.push(b);
    }
    v
}

fn conv_params_mut(p: &mut ConvParams) -> Vec<&mut [f64]> {
    let mut v: Vec<&mut [f64]> = vec![p.weight.data_mut()];
    if let Some(b) = &mut p.bias {
        v.push(b);
    }
    v
}

fn expect_channels(s: Shape, c: usize, what: &str) -> Result<Shape> {
    if s.c != c {
        return Err(shape_err(format!("{what} over {c} channels got {s}")));
    }
    Ok(s)
}

/// A feed-forward stack ending in class logits of shape `(n, classes, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    /// Per-sample input `(c, h, w)`.
    pub input: (usize, usize, usize),
    pub classes: usize,
}

pub struct ForwardTrace {
    caches: Vec<LayerCache>,
}

impl Model {
    /// Checks that every layer accepts its predecessor's output and that the
    /// stack ends in `classes` logits.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        let mut s = Shape::new(1, c, h, w);
        for (i, l) in self.layers.iter().enumerate() {
            s = l
                .output_shape(s)
                .map_err(|e| shape_err(format!("layer {i} ({}): {e}", l.name())))?;
        }
        if s.sample() != self.classes {
            return Err(shape_err(format!(
                "model emits {s} per batch, expected {} logits",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Block sizes of [`Model::params`].
    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<(Tensor, ForwardTrace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&cur, mode)?;
            caches.push(c);
            cur = y;
        }
        cur.ensure_finite("model forward")?;
        Ok((cur, ForwardTrace { caches }))
    }

    /// Eval-mode logits without keeping caches.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_until(x, self.layers.len())
    }

    /// Eval-mode output of the first `upto` layers.
    pub fn forward_until(&mut self, x: &Tensor, upto: usize) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &mut self.layers[..upto] {
            cur = layer.forward(&cur, BnMode::Eval)?.0;
        }
        Ok(cur)
    }

    /// Parameter gradients in [`Model::params`] order.
    pub fn backward(&self, grad_logits: &Tensor, trace: &ForwardTrace) -> Result<Vec<Vec<f64>>> {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad_logits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let (gx, grads) = layer.backward(&g, cache, i > 0)?;
            per_layer.push(grads);
            if let Some(gx) = gx {
                g = gx;
            }
        }
        per_layer.reverse();
        Ok(per_layer.into_iter().flatten().collect())
    }

    /// Index of the first PRC-NPTN layer.
    pub fn first_prcn(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::Prcn(_)))
    }
}

//! The PRC-NPTN layer: expansion convolution, permanent random channel
//! shuffle, channel max pooling over each support, then channel averaging
//! (or a 1×1 convolution) down to `outch`, optionally followed by a
//! two-layer 1×1 pooling network.
//!
//! Two expansion modes exist:
//! - mode A: grouped convolution, `groups = inch`, `E = inch·G`, average
//!   pool size `A = E / (cmp·outch)`;
//! - mode B: full convolution to `E = G·outch`, `cmp = G`, no averaging.

use serde::{Deserialize, Serialize};

use crate::connectome::Connectome;
use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{
    conv_backward_cached, conv_forward_cached, relu_backward, relu_forward, ConvCache, ConvParams,
};
use crate::pool_kernel::{cmp_backward, cmp_forward, naive_cmp_forward, ArgMaxMap, PoolPlan};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpansionMode {
    /// Grouped expansion, `inch·G` channels.
    A,
    /// Full expansion, `G·outch` channels with `cmp = G`.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolNet {
    None,
    /// Two 1×1 convolutions `outch → outch → outch` with a ReLU between.
    Two1x1,
    /// Replaces channel averaging with a 1×1 convolution `E/cmp → outch`.
    Conv1x1ReplaceAvg,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrcnLayerConfig {
    pub inch: usize,
    pub outch: usize,
    /// Filters per input channel (mode A) or per output channel (mode B).
    pub g: usize,
    pub cmp: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub mode: ExpansionMode,
    pub randomized: bool,
    pub pool_net: PoolNet,
}

impl PrcnLayerConfig {
    /// Mode-B layer with `cmp = G` and `pad = k / 2`.
    pub fn mode_b(inch: usize, outch: usize, g: usize, k: usize) -> Self {
        Self {
            inch,
            outch,
            g,
            cmp: g,
            k,
            pad: k / 2,
            stride: 1,
            mode: ExpansionMode::B,
            randomized: true,
            pool_net: PoolNet::None,
        }
    }

    /// Mode-A layer with `pad = k / 2`.
    pub fn mode_a(inch: usize, outch: usize, g: usize, cmp: usize, k: usize) -> Self {
        Self {
            inch,
            outch,
            g,
            cmp,
            k,
            pad: k / 2,
            stride: 1,
            mode: ExpansionMode::A,
            randomized: true,
            pool_net: PoolNet::None,
        }
    }

    pub fn expansion(&self) -> usize {
        match self.mode {
            ExpansionMode::A => self.inch * self.g,
            ExpansionMode::B => self.g * self.outch,
        }
    }

    /// Channels left after channel max pooling.
    pub fn pooled(&self) -> usize {
        self.expansion() / self.cmp
    }

    /// Channel-average window; 1 when averaging is absent.
    pub fn avg_size(&self) -> usize {
        match (self.mode, self.pool_net) {
            (ExpansionMode::B, _) | (_, PoolNet::Conv1x1ReplaceAvg) => 1,
            (ExpansionMode::A, _) => self.expansion() / (self.cmp * self.outch),
        }
    }

    fn uses_avg(&self) -> bool {
        self.mode == ExpansionMode::A && self.pool_net != PoolNet::Conv1x1ReplaceAvg
    }

    pub fn validate(&self) -> Result<()> {
        if [self.inch, self.outch, self.g, self.cmp, self.k, self.stride].contains(&0) {
            return Err(config_err(format!("zero-sized field in {self:?}")));
        }
        let e = self.expansion();
        if self.cmp > e || e % self.cmp != 0 {
            return Err(config_err(format!(
                "CMP={} must divide expansion {e}",
                self.cmp
            )));
        }
        match self.mode {
            ExpansionMode::B => {
                if self.cmp != self.g {
                    return Err(config_err(format!(
                        "mode B requires CMP == G, got CMP={} G={}",
                        self.cmp, self.g
                    )));
                }
            }
            ExpansionMode::A => {
                if self.uses_avg() && self.pooled() % self.outch != 0 {
                    return Err(config_err(format!(
                        "average pool size (inch·G)/(CMP·outch) = {}/{} is not a positive integer",
                        self.pooled(),
                        self.outch
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let kk = self.k * self.k;
        let expand = match self.mode {
            ExpansionMode::A => self.expansion() * kk,
            ExpansionMode::B => self.inch * self.expansion() * kk,
        };
        let net = match self.pool_net {
            PoolNet::None => 0,
            PoolNet::Two1x1 => 2 * self.outch * self.outch,
            PoolNet::Conv1x1ReplaceAvg => self.pooled() * self.outch,
        };
        expand + net
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrcnLayer {
    config: PrcnLayerConfig,
    pub expand: ConvParams,
    connectome: Connectome,
    plan: PoolPlan,
    /// Two 1×1 convolutions for [`PoolNet::Two1x1`], one for
    /// [`PoolNet::Conv1x1ReplaceAvg`].
    pub pool_net: Vec<ConvParams>,
}

#[derive(Clone, Debug)]
pub struct PrcnCache {
    conv: ConvCache,
    expanded_shape: Shape,
    argmax: ArgMaxMap,
    pooled_shape: Shape,
    /// Inputs to each pool-net convolution, in order.
    net_inputs: Vec<(Tensor, ConvCache)>,
    connectome_hash: u64,
}

#[derive(Clone, Debug)]
pub struct PrcnGrads {
    pub grad_x: Option<Tensor>,
    pub grad_expand: Tensor,
    pub grad_pool_net: Vec<Tensor>,
}

impl PrcnLayer {
    /// Zero-weight layer wired by `connectome`.
    pub fn with_connectome(config: PrcnLayerConfig, connectome: Connectome) -> Result<Self> {
        config.validate()?;
        let e = config.expansion();
        if connectome.expansion() != e || connectome.cmp() != config.cmp {
            return Err(config_err(format!(
                "connectome (E={}, CMP={}) does not fit layer (E={e}, CMP={})",
                connectome.expansion(),
                connectome.cmp(),
                config.cmp
            )));
        }
        if connectome.randomized() != config.randomized {
            return Err(config_err("connectome randomization flag disagrees with config"));
        }
        let groups = match config.mode {
            ExpansionMode::A => config.inch,
            ExpansionMode::B => 1,
        };
        let expand = ConvParams::new(config.inch, e, config.k, config.stride, config.pad, groups)?;
        let pool_net = match config.pool_net {
            PoolNet::None => Vec::new(),
            PoolNet::Two1x1 => vec![
                ConvParams::new(config.outch, config.outch, 1, 1, 0, 1)?,
                ConvParams::new(config.outch, config.outch, 1, 1, 0, 1)?,
            ],
            PoolNet::Conv1x1ReplaceAvg => {
                vec![ConvParams::new(config.pooled(), config.outch, 1, 1, 0, 1)?]
            }
        };
        let plan = PoolPlan::from_connectome(&connectome);
        Ok(Self {
            config,
            expand,
            connectome,
            plan,
            pool_net,
        })
    }

    /// Builds the connectome (one draw from `rng` as its seed) and
    /// He-initializes every convolution, in that order.
    pub fn new(config: PrcnLayerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let connectome =
            Connectome::build_from(rng, config.expansion(), config.cmp, config.randomized)?;
        let mut layer = Self::with_connectome(config, connectome)?;
        layer.expand.he_init(rng);
        for p in &mut layer.pool_net {
            p.he_init(rng);
        }
        Ok(layer)
    }

    pub fn config(&self) -> &PrcnLayerConfig {
        &self.config
    }

    pub fn connectome(&self) -> &Connectome {
        &self.connectome
    }

    pub fn plan(&self) -> &PoolPlan {
        &self.plan
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.pool_net.iter().map(ConvParams::param_count).sum::<usize>()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let s = self.expand.output_shape(input)?;
        Ok(Shape::new(s.n, self.config.outch, s.h, s.w))
    }

    /// Expanded maps before and after channel max pooling.
    pub fn forward_probe(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (z, _) = conv_forward_cached(x, &self.expand)?;
        let (m, _) = cmp_forward(&z, &self.plan)?;
        Ok((z, m))
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, PrcnCache)> {
        if x.shape().c != self.config.inch {
            return Err(shape_err(format!(
                "PRC-NPTN layer expects {} input channels, got {}",
                self.config.inch,
                x.shape()
            )));
        }
        let (z, conv) = conv_forward_cached(x, &self.expand)?;
        let (m, argmax) = cmp_forward(&z, &self.plan)?;
        let mut net_inputs = Vec::new();
        let mut y = match self.config.pool_net {
            PoolNet::Conv1x1ReplaceAvg => {
                let (y, c) = conv_forward_cached(&m, &self.pool_net[0])?;
                net_inputs.push((m.clone(), c));
                y
            }
            _ => channel_avg_forward(&m, self.config.avg_size()),
        };
        if self.config.pool_net == PoolNet::Two1x1 {
            let (u, c0) = conv_forward_cached(&y, &self.pool_net[0])?;
            let r = relu_forward(&u);
            let (out, c1) = conv_forward_cached(&r, &self.pool_net[1])?;
            net_inputs.push((u, c0));
            net_inputs.push((r, c1));
            y = out;
        }
        let cache = PrcnCache {
            conv,
            expanded_shape: z.shape(),
            argmax,
            pooled_shape: m.shape(),
            net_inputs,
            connectome_hash: self.connectome.index_hash(),
        };
        Ok((y, cache))
    }

    pub fn backward(&self, grad_out: &Tensor, cache: &PrcnCache, need_grad_x: bool) -> Result<PrcnGrads> {
        if cache.connectome_hash != self.connectome.index_hash() {
            return Err(Error::StaleCache(
                "cache was produced by a layer with a different connectome".into(),
            ));
        }
        let mut grad_pool_net = Vec::new();
        let mut g = grad_out.clone();
        if self.config.pool_net == PoolNet::Two1x1 {
            let (u, c0) = &cache.net_inputs[0];
            let (_, c1) = &cache.net_inputs[1];
            let g1 = conv_backward_cached(&g, c1, &self.pool_net[1], true)?;
            let gr = relu_backward(g1.grad_x.as_ref().expect("requested"), u)?;
            let g0 = conv_backward_cached(&gr, c0, &self.pool_net[0], true)?;
            g = g0.grad_x.expect("requested");
            grad_pool_net = vec![g0.grad_w, g1.grad_w];
        }
        let gm = match self.config.pool_net {
            PoolNet::Conv1x1ReplaceAvg => {
                let (_, c) = &cache.net_inputs[0];
                let gr = conv_backward_cached(&g, c, &self.pool_net[0], true)?;
                grad_pool_net = vec![gr.grad_w];
                gr.grad_x.expect("requested")
            }
            _ => channel_avg_backward(&g, cache.pooled_shape, self.config.avg_size())?,
        };
        let gz = cmp_backward(&gm, &cache.argmax, &self.plan)?;
        debug_assert_eq!(gz.shape(), cache.expanded_shape);
        let gc = conv_backward_cached(&gz, &cache.conv, &self.expand, need_grad_x)?;
        Ok(PrcnGrads {
            grad_x: gc.grad_x,
            grad_expand: gc.grad_w,
            grad_pool_net,
        })
    }

    /// Same computation with the shuffled tensor materialized and pooled
    /// contiguously.
    pub fn forward_explicit(&self, x: &Tensor) -> Result<Tensor> {
        let (z, _) = conv_forward_cached(x, &self.expand)?;
        let s = z.shape();
        let (m, _) = naive_cmp_forward(z.data(), s.n, s.plane(), &self.plan)?;
        let m = Tensor::from_vec(Shape::new(s.n, self.config.pooled(), s.h, s.w), m)?;
        let mut y = match self.config.pool_net {
            PoolNet::Conv1x1ReplaceAvg => conv_forward_cached(&m, &self.pool_net[0])?.0,
            _ => channel_avg_forward(&m, self.config.avg_size()),
        };
        if self.config.pool_net == PoolNet::Two1x1 {
            let u = conv_forward_cached(&y, &self.pool_net[0])?.0;
            y = conv_forward_cached(&relu_forward(&u), &self.pool_net[1])?.0;
        }
        Ok(y)
    }
}

/// Mean over groups of `size` consecutive channels.
pub fn channel_avg_forward(m: &Tensor, size: usize) -> Tensor {
    if size == 1 {
        return m.clone();
    }
    let s = m.shape();
    let out_c = s.c / size;
    let inv = 1.0 / size as f64;
    let mut y = Tensor::zeros(Shape::new(s.n, out_c, s.h, s.w));
    for n in 0..s.n {
        for o in 0..out_c {
            let dst = y.plane_mut(n, o);
            for a in 0..size {
                for (d, v) in dst.iter_mut().zip(m.plane(n, o * size + a)) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    y
}

pub fn channel_avg_backward(grad_out: &Tensor, input_shape: Shape, size: usize) -> Result<Tensor> {
    let s = input_shape;
    if grad_out.shape() != Shape::new(s.n, s.c / size, s.h, s.w) {
        return Err(shape_err(format!(
            "channel average grad {} for input {s}",
            grad_out.shape()
        )));
    }
    if size == 1 {
        return Ok(grad_out.clone());
    }
    let inv = 1.0 / size as f64;
    let mut gm = Tensor::zeros(s);
    for n in 0..s.n {
        for o in 0..s.c / size {
            let g = grad_out.plane(n, o).to_vec();
            for a in 0..size {
                gm.plane_mut(n, o * size + a)
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(d, v)| *d = v * inv);
            }
        }
    }
    Ok(gm)
}

/// A non-random transformation network layer: every (input, output) pair
/// owns `G` filters; output `o` sums, over input channels, the max of the
/// pair's filter responses.
///
/// Stored as a grouped convolution `inch → inch·outch·G` whose channel
/// `i·outch·G + o·G + g` holds filter `g` of pair `(i, o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NptnLayer {
    pub inch: usize,
    pub outch: usize,
    pub g: usize,
    pub expand: ConvParams,
    plan: PoolPlan,
}

#[derive(Clone, Debug)]
pub struct NptnCache {
    conv: ConvCache,
    argmax: ArgMaxMap,
    pooled_shape: Shape,
}

impl NptnLayer {
    pub fn new(inch: usize, outch: usize, g: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let mut layer = Self::zeroed(inch, outch, g, k, k / 2)?;
        layer.expand.he_init(rng);
        Ok(layer)
    }

    pub fn zeroed(inch: usize, outch: usize, g: usize, k: usize, pad: usize) -> Result<Self> {
        if g == 0 || outch == 0 {
            return Err(config_err("NPTN layer needs G >= 1 and outch >= 1"));
        }
        let e = inch * outch * g;
        let expand = ConvParams::new(inch, e, k, 1, pad, inch)?;
        let plan = PoolPlan::new((0..e).collect(), g)?;
        Ok(Self {
            inch,
            outch,
            g,
            expand,
            plan,
        })
    }

    /// Filter `g` of the pair (input `i`, output `o`).
    pub fn filter_channel(&self, i: usize, o: usize, g: usize) -> usize {
        (i * self.outch + o) * self.g + g
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count()
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let s = self.expand.output_shape(input)?;
        Ok(Shape::new(s.n, self.outch, s.h, s.w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, NptnCache)> {
        let (z, conv) = conv_forward_cached(x, &self.expand)?;
        let (m, argmax) = cmp_forward(&z, &self.plan)?;
        let s = m.shape();
        let mut y = Tensor::zeros(Shape::new(s.n, self.outch, s.h, s.w));
        for n in 0..s.n {
            for i in 0..self.inch {
                for o in 0..self.outch {
                    let src = m.plane(n, i * self.outch + o).to_vec();
                    y.plane_mut(n, o).iter_mut().zip(&src).for_each(|(d, v)| *d += v);
                }
            }
        }
        Ok((
            y,
            NptnCache {
                conv,
                argmax,
                pooled_shape: s,
            },
        ))
    }

    /// Returns `(grad_x, grad_expand)`.
    pub fn backward(
        &self,
        grad_out: &Tensor,
        cache: &NptnCache,
        need_grad_x: bool,
    ) -> Result<(Option<Tensor>, Tensor)> {
        let s = cache.pooled_shape;
        let mut gm = Tensor::zeros(s);
        for n in 0..s.n {
            for i in 0..self.inch {
                for o in 0..self.outch {
                    gm.plane_mut(n, i * self.outch + o)
                        .copy_from_slice(grad_out.plane(n, o));
                }
            }
        }
        let gz = cmp_backward(&gm, &cache.argmax, &self.plan)?;
        let gc = conv_backward_cached(&gz, &cache.conv, &self.expand, need_grad_x)?;
        Ok((gc.grad_x, gc.grad_w))
    }
}

/// Reference NPTN output computed straight from the definition with
/// direct loops: `out[o] = Σ_i max_g (x_i ⋆ w_{o,i,g})`.
pub fn nptn_reference_forward(x: &Tensor, layer: &NptnLayer) -> Result<Tensor> {
    let s = x.shape();
    if s.c != layer.inch {
        return Err(shape_err(format!(
            "NPTN expects {} input channels, got {s}",
            layer.inch
        )));
    }
    let p = &layer.expand;
    let out = layer.output_shape(s)?;
    let mut y = Tensor::zeros(out);
    for n in 0..s.n {
        for o in 0..layer.outch {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut total = 0.0;
                    for i in 0..layer.inch {
                        let mut best = f64::NEG_INFINITY;
                        for g in 0..layer.g {
                            let ch = layer.filter_channel(i, o, g);
                            let mut acc = 0.0;
                            for ky in 0..p.k {
                                for kx in 0..p.k {
                                    let iy = (oy + ky) as isize - p.pad as isize;
                                    let ix = (ox + kx) as isize - p.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    acc += p.weight.at(ch, 0, ky, kx)
                                        * x.at(n, i, iy as usize, ix as usize);
                                }
                            }
                            best = best.max(acc);
                        }
                        total += best;
                    }
                    *y.at_mut(n, o, oy, ox) = total;
                }
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::conv_forward;

    fn random(rng: &mut Rng, shape: Shape) -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn degenerate_layer_is_plain_convolution() {
        let mut rng = Rng::new(0);
        let mut cfg = PrcnLayerConfig::mode_a(1, 1, 1, 1, 3);
        cfg.randomized = false;
        let layer = PrcnLayer::new(cfg, &mut rng).unwrap();
        let x = random(&mut rng, Shape::new(2, 1, 6, 6));
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y, conv_forward(&x, &layer.expand).unwrap());
    }

    #[test]
    fn grouped_expansion_arithmetic() {
        // inch=24, G=12, CMP=2, outch=12: E=288, 144 after max, A=12.
        let cfg = PrcnLayerConfig::mode_a(24, 12, 12, 2, 3);
        assert_eq!(cfg.expansion(), 288);
        assert_eq!(cfg.pooled(), 144);
        assert_eq!(cfg.avg_size(), 12);
        let layer = PrcnLayer::new(cfg, &mut Rng::new(1)).unwrap();
        let x = random(&mut Rng::new(2), Shape::new(1, 24, 4, 4));
        assert_eq!(layer.forward(&x).unwrap().0.shape(), Shape::new(1, 12, 4, 4));
    }

    #[test]
    fn full_expansion_arithmetic() {
        let cfg = PrcnLayerConfig::mode_b(1, 18, 2, 5);
        assert_eq!(cfg.expansion(), 36);
        assert_eq!(cfg.pooled(), 18);
        assert_eq!(cfg.avg_size(), 1);
        let layer = PrcnLayer::new(cfg.clone(), &mut Rng::new(3)).unwrap();
        let x = random(&mut Rng::new(4), Shape::new(2, 1, 28, 28));
        assert_eq!(layer.forward(&x).unwrap().0.shape(), Shape::new(2, 18, 28, 28));
        // Equal weight counts across the layer-1 family.
        for (ch, g) in [(36, 1), (18, 2), (12, 3), (9, 4)] {
            assert_eq!(PrcnLayerConfig::mode_b(1, ch, g, 5).param_count(), 900);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        // A = (2·3)/(4·1) not an integer
        assert!(PrcnLayerConfig::mode_a(2, 1, 3, 4, 3).validate().is_err());
        // cmp does not divide E
        assert!(PrcnLayerConfig::mode_a(2, 1, 3, 4, 3).validate().is_err());
        let mut b = PrcnLayerConfig::mode_b(1, 4, 2, 3);
        b.cmp = 4;
        assert!(b.validate().is_err());
        // (inch·G)/(CMP·outch) = 12/(2·4) not integral
        assert!(PrcnLayerConfig::mode_a(2, 4, 6, 2, 3).validate().is_err());
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let mut cfg = PrcnLayerConfig::mode_a(2, 2, 4, 2, 3);
        cfg.pool_net = PoolNet::Two1x1;
        let layer = PrcnLayer::new(cfg, &mut rng).unwrap();
        let x = random(&mut rng, Shape::new(2, 2, 5, 5));
        let (y, cache) = layer.forward(&x).unwrap();
        let g = layer.backward(&Tensor::zeros(y.shape()), &cache, true).unwrap();
        assert!(g.grad_x.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad_expand.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_pool_net.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = Rng::new(6);
        let cfg = PrcnLayerConfig::mode_a(2, 2, 4, 2, 3);
        let a = PrcnLayer::new(cfg.clone(), &mut rng).unwrap();
        let b = PrcnLayer::new(cfg, &mut rng).unwrap();
        let x = random(&mut rng, Shape::new(1, 2, 4, 4));
        let (y, cache) = a.forward(&x).unwrap();
        assert!(matches!(
            b.backward(&y, &cache, true),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn nptn_unit_bank_is_convolution() {
        let mut rng = Rng::new(7);
        let layer = NptnLayer::new(1, 3, 1, 3, &mut rng).unwrap();
        let x = random(&mut rng, Shape::new(1, 1, 5, 5));
        let y = nptn_reference_forward(&x, &layer).unwrap();
        let mut conv = ConvParams::new(1, 3, 3, 1, 1, 1).unwrap();
        conv.weight = layer.expand.weight.clone();
        let c = conv_forward(&x, &conv).unwrap();
        assert!(y.max_abs_diff(&c) < 1e-12);
        let (fast, _) = layer.forward(&x).unwrap();
        assert!(fast.max_abs_diff(&y) < 1e-12);
        let zero = Tensor::zeros(x.shape());
        assert!(nptn_reference_forward(&zero, &layer).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nptn_layer_matches_reference() {
        let mut rng = Rng::new(8);
        for (inch, outch, g) in [(2, 3, 2), (3, 1, 4), (1, 2, 3)] {
            let layer = NptnLayer::new(inch, outch, g, 3, &mut rng).unwrap();
            let x = random(&mut rng, Shape::new(2, inch, 5, 6));
            let (y, _) = layer.forward(&x).unwrap();
            assert!(y.max_abs_diff(&nptn_reference_forward(&x, &layer).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn identity_connectome_reproduces_nptn() {
        // inch=2, outch=1: mode A with G' = outch·G filters per input, an
        // identity connectome and CMP=G gives A = inch, i.e. the NPTN sum
        // divided by inch.
        let mut rng = Rng::new(9);
        let (inch, outch, g) = (2, 1, 3);
        let nptn = NptnLayer::new(inch, outch, g, 3, &mut rng).unwrap();
        let mut cfg = PrcnLayerConfig::mode_a(inch, outch, outch * g, g, 3);
        cfg.randomized = false;
        let conn = Connectome::build(0, cfg.expansion(), g, false).unwrap();
        let mut prc = PrcnLayer::with_connectome(cfg, conn).unwrap();
        prc.expand.weight = nptn.expand.weight.clone();
        let x = random(&mut rng, Shape::new(1, 2, 5, 5));
        let (y, _) = prc.forward(&x).unwrap();
        let mut want = nptn_reference_forward(&x, &nptn).unwrap();
        want.scale(1.0 / inch as f64);
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn block_transpose_connectome_reproduces_nptn_for_many_outputs() {
        // With outch > 1 the pooled channels must be reordered output-major
        // before averaging; a fixed (non-random) permutation does that.
        let mut rng = Rng::new(10);
        let (inch, outch, g) = (3, 2, 2);
        let nptn = NptnLayer::new(inch, outch, g, 3, &mut rng).unwrap();
        let mut cfg = PrcnLayerConfig::mode_a(inch, outch, outch * g, g, 3);
        cfg.randomized = true;
        let mut perm = Vec::new();
        for o in 0..outch {
            for i in 0..inch {
                perm.extend((0..g).map(|k| nptn.filter_channel(i, o, k)));
            }
        }
        let conn = Connectome::from_perm(perm, g, 0, true).unwrap();
        let mut prc = PrcnLayer::with_connectome(cfg, conn).unwrap();
        prc.expand.weight = nptn.expand.weight.clone();
        let x = random(&mut rng, Shape::new(2, inch, 5, 5));
        let (y, _) = prc.forward(&x).unwrap();
        let mut want = nptn_reference_forward(&x, &nptn).unwrap();
        want.scale(1.0 / inch as f64);
        assert!(y.max_abs_diff(&want) < 1e-12);
    }
}

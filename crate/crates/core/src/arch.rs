//! Named architecture presets and their compilation into [`Model`]s.
//!
//! MNIST family: two blocks of `layer → BN → PReLU → 3×3 max pool` with
//! 5×5 kernels (pad 2), layer-2 width 16, then global average pooling and
//! a linear classifier to 10 classes.
//!
//! ETH family: 3×3 kernels (pad 1), each block followed by BN, ReLU and a
//! 2×2 max pool except the last before global average pooling, on 3×50×50
//! inputs with 8 classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{config_err, Error, Result};
use crate::layers::{BatchNormState, ConvParams, LinearParams, PReluParams};
use crate::model::{Layer, Model};
use crate::prcn_layer::{NptnLayer, PoolNet, PrcnLayer, PrcnLayerConfig};
use crate::rng::Rng;

pub const MNIST_KERNEL: usize = 5;
pub const MNIST_POOL: usize = 3;
pub const MNIST_LAYER2: usize = 16;
pub const MNIST_CLASSES: usize = 10;
pub const FC_POOL_WIDTH: usize = 36;
pub const ETH_INPUT: (usize, usize, usize) = (3, 50, 50);
pub const ETH_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EthFamily {
    B,
    C,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ModelSpec {
    ConvNet36,
    /// ConvNet(36) with a `1×1 → PReLU → 1×1` pooling network (hidden
    /// width 36) after each convolution.
    ConvNet36Fc,
    ConvNet512,
    Nptn { ch: usize, g: usize },
    /// Mode-B PRC-NPTN with `CMP = G`.
    Prcn {
        ch: usize,
        g: usize,
        randomized: bool,
        pool_net: bool,
    },
    EthConv(EthFamily),
    /// PRC variant of an ETH family: mode A with the channel average
    /// replaced by a 1×1 convolution.
    EthPrcn {
        family: EthFamily,
        g: usize,
        cmp: usize,
        randomized: bool,
    },
}

impl ModelSpec {
    pub fn prcn(ch: usize, g: usize) -> Self {
        ModelSpec::Prcn {
            ch,
            g,
            randomized: true,
            pool_net: false,
        }
    }

    /// The MNIST presets named in experiment configs.
    pub fn mnist_presets() -> Vec<ModelSpec> {
        let mut v = vec![ModelSpec::ConvNet36, ModelSpec::ConvNet36Fc, ModelSpec::ConvNet512];
        for (ch, g) in [(36, 1), (18, 2), (12, 3), (9, 4)] {
            v.push(ModelSpec::prcn(ch, g));
            v.push(ModelSpec::Prcn {
                ch,
                g,
                randomized: false,
                pool_net: false,
            });
        }
        v.push(ModelSpec::Nptn { ch: 12, g: 3 });
        v
    }

    pub fn eth_presets() -> Vec<ModelSpec> {
        let mut v = Vec::new();
        for family in [EthFamily::B, EthFamily::C] {
            v.push(ModelSpec::EthConv(family));
            v.push(ModelSpec::EthPrcn {
                family,
                g: 8,
                cmp: 4,
                randomized: true,
            });
        }
        v
    }

    pub fn input(&self) -> (usize, usize, usize) {
        match self {
            ModelSpec::EthConv(_) | ModelSpec::EthPrcn { .. } => ETH_INPUT,
            _ => (1, 28, 28),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::EthConv(_) | ModelSpec::EthPrcn { .. } => ETH_CLASSES,
            _ => MNIST_CLASSES,
        }
    }

    /// Builds the model; all draws (connectome seeds, weights) come from a
    /// stream seeded with `seed`, in layer order.
    pub fn compile(&self, seed: u64) -> Result<Model> {
        let mut rng = Rng::new(seed);
        let layers = match self {
            ModelSpec::EthConv(f) => eth_layers(*f, None, &mut rng)?,
            ModelSpec::EthPrcn {
                family,
                g,
                cmp,
                randomized,
            } => eth_layers(*family, Some((*g, *cmp, *randomized)), &mut rng)?,
            _ => mnist_layers(self, &mut rng)?,
        };
        let model = Model {
            layers,
            input: self.input(),
            classes: self.classes(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Exact learnable-parameter count.
    pub fn count_params(&self) -> Result<usize> {
        Ok(self.compile(0)?.param_count())
    }
}

fn block_err(i: usize, e: Error) -> Error {
    config_err(format!("block {i}: {e}"))
}

fn conv(inch: usize, outch: usize, k: usize, rng: &mut Rng) -> Result<ConvParams> {
    let mut p = ConvParams::new(inch, outch, k, 1, k / 2, 1)?;
    p.he_init(rng);
    Ok(p)
}

fn block_tail(ch: usize) -> [Layer; 3] {
    [
        Layer::BatchNorm(BatchNormState::new(ch)),
        Layer::PRelu(PReluParams::new(ch)),
        Layer::MaxPool(MNIST_POOL),
    ]
}

fn pool_network(ch: usize, hidden: usize, rng: &mut Rng) -> Result<Vec<Layer>> {
    Ok(vec![
        Layer::Conv(conv(ch, hidden, 1, rng)?),
        Layer::PRelu(PReluParams::new(hidden)),
        Layer::Conv(conv(hidden, ch, 1, rng)?),
    ])
}

fn mnist_layers(spec: &ModelSpec, rng: &mut Rng) -> Result<Vec<Layer>> {
    let k = MNIST_KERNEL;
    let mut layers = Vec::new();
    let width = match spec {
        ModelSpec::ConvNet36 | ModelSpec::ConvNet36Fc => 36,
        ModelSpec::ConvNet512 => 512,
        ModelSpec::Nptn { ch, .. } | ModelSpec::Prcn { ch, .. } => *ch,
        _ => unreachable!("not an MNIST preset"),
    };
    for (i, (inch, outch)) in [(1, width), (width, MNIST_LAYER2)].into_iter().enumerate() {
        let core = match spec {
            ModelSpec::ConvNet36 | ModelSpec::ConvNet512 => vec![Layer::Conv(conv(inch, outch, k, rng)?)],
            ModelSpec::ConvNet36Fc => {
                let mut v = vec![Layer::Conv(conv(inch, outch, k, rng)?)];
                v.extend(pool_network(outch, FC_POOL_WIDTH, rng)?);
                v
            }
            ModelSpec::Nptn { g, .. } => {
                vec![Layer::Nptn(NptnLayer::new(inch, outch, *g, k, rng).map_err(|e| block_err(i, e))?)]
            }
            ModelSpec::Prcn {
                g,
                randomized,
                pool_net,
                ..
            } => {
                let mut cfg = PrcnLayerConfig::mode_b(inch, outch, *g, k);
                cfg.randomized = *randomized;
                if *pool_net {
                    cfg.pool_net = PoolNet::Two1x1;
                }
                vec![Layer::Prcn(PrcnLayer::new(cfg, rng).map_err(|e| block_err(i, e))?)]
            }
            _ => unreachable!(),
        };
        layers.extend(core);
        layers.extend(block_tail(outch));
    }
    layers.push(Layer::GlobalAvgPool);
    let mut head = LinearParams::new(MNIST_LAYER2, MNIST_CLASSES)?;
    head.he_init(rng);
    layers.push(Layer::Linear(head));
    Ok(layers)
}

fn eth_layers(family: EthFamily, prc: Option<(usize, usize, bool)>, rng: &mut Rng) -> Result<Vec<Layer>> {
    let widths: &[usize] = match family {
        EthFamily::B => &[12, 24, 48, 48],
        EthFamily::C => &[12, 24, 48, 64, 128],
    };
    let fcs: &[usize] = match family {
        EthFamily::B => &[300, 200],
        EthFamily::C => &[],
    };
    let mut layers = Vec::new();
    let mut inch = ETH_INPUT.0;
    for (i, &w) in widths.iter().enumerate() {
        let core = match prc {
            Some((g, cmp, randomized)) if i > 0 => {
                let mut cfg = PrcnLayerConfig::mode_a(inch, w, g, cmp, 3);
                cfg.randomized = randomized;
                cfg.pool_net = PoolNet::Conv1x1ReplaceAvg;
                Layer::Prcn(PrcnLayer::new(cfg, rng).map_err(|e| block_err(i, e))?)
            }
            _ => Layer::Conv(conv(inch, w, 3, rng)?),
        };
        layers.push(core);
        layers.push(Layer::BatchNorm(BatchNormState::new(w)));
        layers.push(Layer::Relu);
        if i + 1 < widths.len() {
            layers.push(Layer::MaxPool(2));
        }
        inch = w;
    }
    layers.push(Layer::GlobalAvgPool);
    let mut inf = inch;
    for &outf in fcs.iter().chain(std::iter::once(&ETH_CLASSES)) {
        let mut p = LinearParams::new(inf, outf)?;
        p.he_init(rng);
        layers.push(Layer::Linear(p));
        if outf != ETH_CLASSES {
            layers.push(Layer::Relu);
        }
        inf = outf;
    }
    Ok(layers)
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = |x: &EthFamily| match x {
            EthFamily::B => "b",
            EthFamily::C => "c",
        };
        match self {
            ModelSpec::ConvNet36 => write!(f, "convnet36"),
            ModelSpec::ConvNet36Fc => write!(f, "convnet36_fc"),
            ModelSpec::ConvNet512 => write!(f, "convnet512"),
            ModelSpec::Nptn { ch, g } => write!(f, "nptn({ch},{g})"),
            ModelSpec::Prcn {
                ch,
                g,
                randomized,
                pool_net,
            } => {
                write!(f, "prcn({ch},{g})")?;
                if !randomized {
                    write!(f, ":norand")?;
                }
                if *pool_net {
                    write!(f, ":poolnet")?;
                }
                Ok(())
            }
            ModelSpec::EthConv(x) => write!(f, "eth_{}", fam(x)),
            ModelSpec::EthPrcn {
                family,
                g,
                cmp,
                randomized,
            } => {
                write!(f, "eth_{}_prcn({g},{cmp})", fam(family))?;
                if !randomized {
                    write!(f, ":norand")?;
                }
                Ok(())
            }
        }
    }
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let inner = s.strip_prefix('(')?.strip_suffix(')')?;
    let (a, b) = inner.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || config_err(format!("unknown model '{s}'"));
        let mut parts = s.trim().split(':');
        let head = parts.next().ok_or_else(bad)?;
        let mut randomized = true;
        let mut pool_net = false;
        for opt in parts {
            match opt {
                "norand" => randomized = false,
                "poolnet" => pool_net = true,
                _ => return Err(config_err(format!("unknown model option '{opt}' in '{s}'"))),
            }
        }
        let plain = randomized && !pool_net;
        let spec = match head {
            "convnet36" if plain => ModelSpec::ConvNet36,
            "convnet36_fc" if plain => ModelSpec::ConvNet36Fc,
            "convnet512" if plain => ModelSpec::ConvNet512,
            "eth_b" if plain => ModelSpec::EthConv(EthFamily::B),
            "eth_c" if plain => ModelSpec::EthConv(EthFamily::C),
            _ => {
                if let Some(rest) = head.strip_prefix("nptn") {
                    if !plain {
                        return Err(bad());
                    }
                    let (ch, g) = parse_pair(rest).ok_or_else(bad)?;
                    ModelSpec::Nptn { ch, g }
                } else if let Some(rest) = head.strip_prefix("prcn") {
                    let (ch, g) = parse_pair(rest).ok_or_else(bad)?;
                    ModelSpec::Prcn {
                        ch,
                        g,
                        randomized,
                        pool_net,
                    }
                } else if let Some(rest) = head.strip_prefix("eth_") {
                    let (fam, rest) = rest.split_once("_prcn").ok_or_else(bad)?;
                    let family = match fam {
                        "b" => EthFamily::B,
                        "c" => EthFamily::C,
                        _ => return Err(bad()),
                    };
                    if pool_net {
                        return Err(bad());
                    }
                    let (g, cmp) = parse_pair(rest).ok_or_else(bad)?;
                    ModelSpec::EthPrcn {
                        family,
                        g,
                        cmp,
                        randomized,
                    }
                } else {
                    return Err(bad());
                }
            }
        };
        Ok(spec)
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

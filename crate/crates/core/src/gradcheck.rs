//! Central finite-difference gradient checks.
//!
//! The checker only ever evaluates the scalar function it is given, so it
//! stays independent of any backward implementation it is compared with.

use crate::error::{config_err, Result};
use crate::layers::{softmax_xent, BatchNormState, BnMode, ConvParams, LinearParams, PReluParams};
use crate::model::Layer;
use crate::prcn_layer::{ExpansionMode, NptnLayer, PoolNet, PrcnLayer, PrcnLayerConfig};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Step used for central differences in 64-bit.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest absolute difference between analytic and numeric entries.
    pub max_abs_err: f64,
    /// Max-norm of the numeric gradient (the normalizer).
    pub scale: f64,
    /// `max_abs_err / max(scale, ‖analytic‖∞)`; zero when both vanish.
    pub rel_err: f64,
    pub worst_index: usize,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }

    /// Combines checks of several parameter blocks of one configuration.
    pub fn merge(self, other: GradCheck) -> GradCheck {
        if other.rel_err > self.rel_err {
            GradCheck {
                entries: self.entries + other.entries,
                ..other
            }
        } else {
            GradCheck {
                entries: self.entries + other.entries,
                ..self
            }
        }
    }
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn check_gradient(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe);
        probe[i] = orig - FD_STEP;
        let down = f(&probe);
        probe[i] = orig;
        numeric[i] = (up - down) / (2.0 * FD_STEP);
    }
    compare(analytic, &numeric)
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let mut max_abs_err = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = (a - n).abs();
        if e > max_abs_err || e.is_nan() {
            max_abs_err = e;
            worst_index = i;
        }
    }
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = norm(numeric).max(norm(analytic));
    let rel_err = if max_abs_err == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        max_abs_err / scale
    };
    GradCheck {
        max_abs_err,
        scale,
        rel_err,
        worst_index,
        entries: analytic.len(),
    }
}

/// Tolerance the suite applies to every check.
pub const SUITE_TOL: f64 = 1e-6;

/// One layer configuration checked against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub kind: &'static str,
    pub case: usize,
    pub description: String,
    pub check: GradCheck,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.check.passes(SUITE_TOL)
    }
}

/// Layer kinds covered by [`run_suite`].
pub const SUITE_KINDS: [&str; 10] = [
    "conv", "prcn", "nptn", "batchnorm", "prelu", "relu", "maxpool", "gap", "linear", "xent",
];

fn random_tensor(shape: Shape, rng: &mut Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.normal()).collect()).expect("sized")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks input and parameter gradients of `layer` under the loss
/// `Σ r ⊙ layer(x)` for a random `r`.
pub fn check_layer(layer: &Layer, x: &Tensor, rng: &mut Rng) -> Result<GradCheck> {
    let mode = BnMode::Train;
    let (y, cache) = layer.clone().forward(x, mode)?;
    let r = random_tensor(y.shape(), rng);
    let (gx, gp) = layer.backward(&r, &cache, true)?;
    let gx = gx.ok_or_else(|| config_err("input gradient missing"))?;
    let loss = |l: &Layer, input: &Tensor| -> f64 {
        let (out, _) = l.clone().forward(input, mode).expect("forward on checked shapes");
        dot(out.data(), r.data())
    };
    let mut result = check_gradient(x.data(), gx.data(), |v| {
        loss(layer, &Tensor::from_vec(x.shape(), v.to_vec()).expect("sized"))
    });
    let blocks: Vec<Vec<f64>> = layer.params().iter().map(|p| p.to_vec()).collect();
    for (j, (block, grad)) in blocks.iter().zip(&gp).enumerate() {
        let c = check_gradient(block, grad, |v| {
            let mut l = layer.clone();
            l.params_mut()[j].copy_from_slice(v);
            loss(&l, x)
        });
        result = result.merge(c);
    }
    Ok(result)
}

fn pick<T: Copy>(rng: &mut Rng, xs: &[T]) -> T {
    xs[rng.below(xs.len())]
}

fn random_prcn_config(rng: &mut Rng) -> PrcnLayerConfig {
    loop {
        let inch = 1 + rng.below(3);
        let outch = 1 + rng.below(3);
        let g = 1 + rng.below(4);
        let k = pick(rng, &[1, 3]);
        let mut cfg = if rng.below(2) == 0 {
            PrcnLayerConfig::mode_b(inch, outch, g, k)
        } else {
            PrcnLayerConfig::mode_a(inch, outch, g, 1 + rng.below(4), k)
        };
        cfg.randomized = rng.below(4) != 0;
        cfg.pool_net = pick(rng, &[PoolNet::None, PoolNet::Two1x1, PoolNet::Conv1x1ReplaceAvg]);
        if cfg.pool_net == PoolNet::Conv1x1ReplaceAvg && cfg.mode == ExpansionMode::B {
            cfg.pool_net = PoolNet::None;
        }
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

/// Builds one random case of `kind`: the layer and an input for it.
pub fn random_case(kind: &str, rng: &mut Rng) -> Result<(Layer, Tensor, String)> {
    let n = 2 + rng.below(2);
    let hw = 5 + rng.below(3);
    let (layer, c, desc) = match kind {
        "conv" => {
            let groups = 1 + rng.below(2);
            let inch = groups * (1 + rng.below(2));
            let outch = groups * (1 + rng.below(2));
            let k = pick(rng, &[1, 3, 5]);
            let stride = 1 + rng.below(2);
            let pad = rng.below(k / 2 + 1);
            let mut p = ConvParams::new(inch, outch, k, stride, pad, groups)?;
            if rng.below(2) == 0 {
                p = p.with_bias();
            }
            p.he_init(rng);
            if let Some(b) = &mut p.bias {
                b.iter_mut().for_each(|v| *v = rng.normal());
            }
            let d = format!("conv {inch}->{outch} k{k} s{stride} p{pad} g{groups}");
            (Layer::Conv(p), inch, d)
        }
        "prcn" => {
            let cfg = random_prcn_config(rng);
            let d = format!("{cfg:?}");
            let c = cfg.inch;
            (Layer::Prcn(PrcnLayer::new(cfg, rng)?), c, d)
        }
        "nptn" => {
            let (inch, outch, g) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
            let d = format!("nptn {inch}->{outch} G{g}");
            (Layer::Nptn(NptnLayer::new(inch, outch, g, 3, rng)?), inch, d)
        }
        "batchnorm" => {
            let c = 1 + rng.below(4);
            let mut s = BatchNormState::new(c);
            s.gamma.iter_mut().for_each(|v| *v = rng.uniform(0.5, 1.5));
            s.beta.iter_mut().for_each(|v| *v = rng.normal());
            (Layer::BatchNorm(s), c, format!("batchnorm c{c}"))
        }
        "prelu" => {
            let c = 1 + rng.below(4);
            let mut p = PReluParams::new(c);
            p.slope.iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
            (Layer::PRelu(p), c, format!("prelu c{c}"))
        }
        "relu" => (Layer::Relu, 1 + rng.below(3), "relu".to_string()),
        "maxpool" => {
            let k = 2 + rng.below(2);
            (Layer::MaxPool(k), 1 + rng.below(3), format!("maxpool {k}"))
        }
        "gap" => (Layer::GlobalAvgPool, 1 + rng.below(3), "global avg pool".to_string()),
        "linear" | "xent" => {
            let c = 1 + rng.below(3);
            let outf = 2 + rng.below(4);
            let mut p = LinearParams::new(c * hw * hw, outf)?;
            p.he_init(rng);
            p.bias.iter_mut().for_each(|v| *v = rng.normal());
            (Layer::Linear(p), c, format!("linear {}->{outf}", c * hw * hw))
        }
        other => return Err(config_err(format!("unknown layer kind {other:?}"))),
    };
    Ok((layer, random_tensor(Shape::new(n, c, hw, hw), rng), desc))
}

fn check_xent(logits: &Tensor, rng: &mut Rng) -> Result<GradCheck> {
    let s = logits.shape();
    let labels: Vec<usize> = (0..s.n).map(|_| rng.below(s.c)).collect();
    let (_, g) = softmax_xent(logits, &labels)?;
    Ok(check_gradient(logits.data(), g.data(), |v| {
        let t = Tensor::from_vec(s, v.to_vec()).expect("sized");
        softmax_xent(&t, &labels).expect("valid labels").0
    }))
}

/// Checks `cases` random configurations of every kind in [`SUITE_KINDS`].
pub fn run_suite(seed: u64, cases: usize) -> Result<Vec<CaseResult>> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    for (k, kind) in SUITE_KINDS.iter().enumerate() {
        let mut rng = root.fork(k as u64 + 1);
        for case in 0..cases {
            let (layer, x, description) = random_case(kind, &mut rng)?;
            let check = if *kind == "xent" {
                let (y, _) = layer.clone().forward(&x, BnMode::Train)?;
                check_xent(&y, &mut rng)?
            } else {
                check_layer(&layer, &x, &mut rng)?
            };
            out.push(CaseResult {
                kind,
                case,
                description,
                check,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = [1.0, -2.0, 0.5];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let c = check_gradient(&x, &grad, |v| v.iter().map(|a| a * a).sum());
        assert!(c.passes(1e-9), "{c:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = [1.0, 2.0];
        let c = check_gradient(&x, &[1.0, 1.0], |v| v[0] * v[1]);
        assert!(!c.passes(1e-6));
        assert_eq!(c.worst_index, 0);
    }

    #[test]
    fn suite_passes_on_a_few_cases() {
        let results = run_suite(3, 3).unwrap();
        assert_eq!(results.len(), 3 * SUITE_KINDS.len());
        for r in &results {
            assert!(r.passes(), "{} case {}: {} {:?}", r.kind, r.case, r.description, r.check);
        }
    }
}

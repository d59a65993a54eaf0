use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    /// γ=1, β=0, running stats (0, 1), momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: BnMode,
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub struct BnGrads {
    pub grad_x: Tensor,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

/// Train mode normalizes with batch statistics (biased variance) and folds
/// the unbiased variance into the running estimate; eval mode reads the
/// running statistics only.
pub fn batchnorm_forward(
    x: &Tensor,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let s = x.shape();
    if s.c != state.channels() {
        return Err(shape_err(format!(
            "batchnorm over {} channels got {s}",
            state.channels()
        )));
    }
    let count = (s.n * s.plane()) as f64;
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let mut inv_std = vec![0.0; s.c];
    for c in 0..s.c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mean = (0..s.n).map(|n| x.plane(n, c).iter().sum::<f64>()).sum::<f64>() / count;
                let var = (0..s.n)
                    .map(|n| x.plane(n, c).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let m = state.momentum;
                state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean;
                state.running_var[c] = (1.0 - m) * state.running_var[c] + m * unbiased;
                (mean, var)
            }
            BnMode::Eval => (state.running_mean[c], state.running_var[c]),
        };
        let is = 1.0 / (var + state.eps).sqrt();
        inv_std[c] = is;
        let (g, b) = (state.gamma[c], state.beta[c]);
        for n in 0..s.n {
            let src = x.plane(n, c);
            let xh = xhat.plane_mut(n, c);
            let yp = y.plane_mut(n, c);
            for ((h, y), &v) in xh.iter_mut().zip(yp.iter_mut()).zip(src) {
                *h = (v - mean) * is;
                *y = g * *h + b;
            }
        }
    }
    Ok((y, BnCache { mode, xhat, inv_std }))
}

pub fn batchnorm_backward(
    grad_out: &Tensor,
    cache: &BnCache,
    state: &BatchNormState,
) -> Result<BnGrads> {
    let s = grad_out.shape();
    grad_out.check_same(&cache.xhat)?;
    let count = (s.n * s.plane()) as f64;
    let mut grad_x = Tensor::zeros(s);
    let mut grad_gamma = vec![0.0; s.c];
    let mut grad_beta = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..s.n {
            for (g, xh) in grad_out.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        grad_beta[c] = sum_g;
        grad_gamma[c] = sum_gx;
        let scale = state.gamma[c] * cache.inv_std[c];
        for n in 0..s.n {
            let xh = cache.xhat.plane(n, c);
            let g = grad_out.plane(n, c);
            let dst = grad_x.plane_mut(n, c);
            match cache.mode {
                BnMode::Train => {
                    let (mg, mgx) = (sum_g / count, sum_gx / count);
                    for ((d, &gv), &h) in dst.iter_mut().zip(g).zip(xh) {
                        *d = scale * (gv - mg - h * mgx);
                    }
                }
                BnMode::Eval => {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = scale * gv;
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        grad_x,
        grad_gamma,
        grad_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::rng::Rng;
    use crate::tensor::Shape;

    fn random(rng: &mut Rng, shape: Shape) -> Tensor {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.uniform(-2.0, 3.0)).collect())
            .unwrap()
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::filled(Shape::new(3, 2, 2, 2), 4.5);
        let mut st = BatchNormState::new(2);
        st.beta = vec![0.25, -1.0];
        st.gamma = vec![3.0, 7.0];
        let (y, _) = batchnorm_forward(&x, &mut st, BnMode::Train).unwrap();
        for n in 0..3 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.0));
        }
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = Rng::new(0);
        let x = random(&mut rng, Shape::new(4, 3, 5, 5));
        let mut st = BatchNormState::new(3);
        st.eps = 0.0;
        let (y, _) = batchnorm_forward(&x, &mut st, BnMode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats_only() {
        let mut rng = Rng::new(1);
        let x = random(&mut rng, Shape::new(2, 1, 3, 3));
        let mut st = BatchNormState::new(1);
        st.running_mean = vec![0.5];
        st.running_var = vec![4.0];
        st.eps = 0.0;
        let before = st.clone();
        let (y, _) = batchnorm_forward(&x, &mut st, BnMode::Eval).unwrap();
        assert_eq!(st, before);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (b - 0.5) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn running_var_stays_non_negative() {
        let mut rng = Rng::new(2);
        let mut st = BatchNormState::new(2);
        for _ in 0..20 {
            let x = random(&mut rng, Shape::new(2, 2, 2, 2));
            batchnorm_forward(&x, &mut st, BnMode::Train).unwrap();
        }
        assert!(st.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let shape = Shape::new(2 + rng.below(2), 1 + rng.below(3), 2 + rng.below(3), 3);
            let x = random(&mut rng, shape);
            let mut st = BatchNormState::new(shape.c);
            for c in 0..shape.c {
                st.gamma[c] = rng.uniform(0.5, 2.0);
                st.beta[c] = rng.normal();
            }
            let proj = random(&mut rng, shape);
            for mode in [BnMode::Train, BnMode::Eval] {
                let mut st0 = st.clone();
                let (_, cache) = batchnorm_forward(&x, &mut st0, mode).unwrap();
                let grads = batchnorm_backward(&proj, &cache, &st).unwrap();
                let loss = |x: &Tensor, st: &BatchNormState| -> f64 {
                    let mut s = st.clone();
                    let (y, _) = batchnorm_forward(x, &mut s, mode).unwrap();
                    y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
                };
                let c = check_gradient(x.data(), grads.grad_x.data(), |v| {
                    loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &st)
                });
                assert!(c.passes(1e-6), "{mode:?} grad_x {c:?}");
                let c = check_gradient(&st.gamma, &grads.grad_gamma, |v| {
                    let mut s = st.clone();
                    s.gamma = v.to_vec();
                    loss(&x, &s)
                });
                assert!(c.passes(1e-6), "{mode:?} grad_gamma {c:?}");
                let c = check_gradient(&st.beta, &grads.grad_beta, |v| {
                    let mut s = st.clone();
                    s.beta = v.to_vec();
                    loss(&x, &s)
                });
                assert!(c.passes(1e-6), "{mode:?} grad_beta {c:?}");
            }
        }
    }
}

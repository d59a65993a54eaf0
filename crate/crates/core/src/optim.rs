//! SGD with momentum, coupled weight decay, global-norm clipping and a
//! step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Fractions of the run after which the rate is multiplied by
    /// `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            clip_norm: Some(1.0),
            decay_points: vec![0.5, 0.75],
            decay_factor: 0.1,
            batch_size: 64,
        }
    }
}

/// Rate for `epoch` of `total`: one decay per point `p` with
/// `epoch >= ceil(p · total)`.
pub fn lr_at(epoch: usize, total: usize, cfg: &SgdConfig) -> f64 {
    let passed = cfg
        .decay_points
        .iter()
        .filter(|&&p| epoch as f64 >= (p * total as f64).ceil())
        .count();
    cfg.lr * cfg.decay_factor.powi(passed as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    pub velocity: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl OptimState {
    pub fn new(config: SgdConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// `g ← clip(g)`, `v ← μv + (g + λw)`, `w ← w − lr·v`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &mut [Vec<f64>], lr: f64) -> Result<StepInfo> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(shape_err(format!(
                "{} parameter blocks, {} gradient blocks, {} velocity blocks",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        let mut sq = 0.0;
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.len() != g.len() || p.len() != self.velocity[i].len() {
                return Err(shape_err(format!("block {i}: parameter/gradient size mismatch")));
            }
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        let mut clipped = false;
        if let Some(c) = self.config.clip_norm {
            if grad_norm > c {
                let s = c / grad_norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
                clipped = true;
            }
        }
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in params.into_iter().zip(grads.iter()).zip(&mut self.velocity) {
            for ((w, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + (g + wd * *w);
                *w -= lr * *v;
            }
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            momentum,
            weight_decay: wd,
            clip_norm: None,
            ..SgdConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut w = vec![0.3, -2.0];
        let mut st = OptimState::new(plain(0.9, 0.0), &[2]);
        st.step(vec![&mut w], &mut [vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(w, [0.3, -2.0]);
    }

    #[test]
    fn scalar_step() {
        let mut w = vec![1.0];
        let mut st = OptimState::new(plain(0.0, 0.0), &[1]);
        st.step(vec![&mut w], &mut [vec![1.0]], 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn clipping_to_unit_norm() {
        let mut cfg = plain(0.0, 0.0);
        cfg.clip_norm = Some(1.0);
        let mut st = OptimState::new(cfg, &[1, 1]);
        let (mut a, mut b) = (vec![0.0], vec![0.0]);
        let mut g = [vec![3.0], vec![4.0]];
        let info = st.step(vec![&mut a, &mut b], &mut g, 1.0).unwrap();
        assert!((info.grad_norm - 5.0).abs() < 1e-12 && info.clipped);
        let applied = (a[0] * a[0] + b[0] * b[0]).sqrt();
        assert!((applied - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_simulation() {
        let (mu, wd, lr) = (0.9, 1e-2, 0.05);
        let mut st = OptimState::new(plain(mu, wd), &[1]);
        let mut w = vec![0.7];
        let (mut sw, mut sv) = (0.7f64, 0.0f64);
        for t in 0..10 {
            let g = (t as f64 * 0.37).sin();
            st.step(vec![&mut w], &mut [vec![g]], lr).unwrap();
            sv = mu * sv + g + wd * sw;
            sw -= lr * sv;
            assert!((w[0] - sw).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut w = vec![1.0];
        let mut st = OptimState::new(plain(0.9, 0.0), &[1]);
        assert!(matches!(
            st.step(vec![&mut w], &mut [vec![f64::NAN]], 0.1),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(w, [1.0]);
    }

    #[test]
    fn step_schedule() {
        let c = SgdConfig::default();
        assert_eq!(lr_at(0, 300, &c), 0.1);
        assert!((lr_at(149, 300, &c) - 0.1).abs() < 1e-15);
        assert!((lr_at(150, 300, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(225, 300, &c) - 0.001).abs() < 1e-15);
        // ceil(0.5·5) = 3, ceil(0.75·5) = 4
        let lrs: Vec<f64> = (0..5).map(|e| lr_at(e, 5, &c)).collect();
        assert_eq!(lrs[2], 0.1);
        assert!((lrs[3] - 0.01).abs() < 1e-15 && (lrs[4] - 0.001).abs() < 1e-15);
    }
}

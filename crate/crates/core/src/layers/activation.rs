use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Per-channel leaky slopes for negative inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PReluParams {
    pub slope: Vec<f64>,
}

impl PReluParams {
    pub fn new(channels: usize) -> Self {
        Self {
            slope: vec![PRELU_INIT_SLOPE; channels],
        }
    }
}

fn check_channels(x: &Tensor, p: &PReluParams) -> Result<()> {
    if x.shape().c != p.slope.len() {
        return Err(shape_err(format!(
            "prelu over {} channels got {}",
            p.slope.len(),
            x.shape()
        )));
    }
    Ok(())
}

pub fn prelu_forward(x: &Tensor, p: &PReluParams) -> Result<Tensor> {
    check_channels(x, p)?;
    let s = x.shape();
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let a = p.slope[c];
            y.plane_mut(n, c)
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { *v } else { a * *v });
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_slope)`.
pub fn prelu_backward(grad_out: &Tensor, x: &Tensor, p: &PReluParams) -> Result<(Tensor, Vec<f64>)> {
    check_channels(x, p)?;
    grad_out.check_same(x)?;
    let s = x.shape();
    let mut gx = Tensor::zeros(s);
    let mut gs = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let a = p.slope[c];
            let xs = x.plane(n, c);
            let g = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            let mut lanes = [0.0; 4];
            for (k, ((d, &gv), &xv)) in dst.iter_mut().zip(g).zip(xs).enumerate() {
                *d = if xv > 0.0 { gv } else { a * gv };
                lanes[k & 3] += xv.min(0.0) * gv;
            }
            let acc: f64 = lanes.iter().sum();
            gs[c] += acc;
        }
    }
    Ok((gx, gs))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
    y
}

pub fn relu_backward(grad_out: &Tensor, x: &Tensor) -> Result<Tensor> {
    grad_out.check_same(x)?;
    let mut gx = grad_out.clone();
    gx.data_mut()
        .iter_mut()
        .zip(x.data())
        .for_each(|(g, &v)| {
            if v <= 0.0 {
                *g = 0.0
            }
        });
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::rng::Rng;
    use crate::tensor::Shape;

    /// Values bounded away from the kink at zero so finite differences
    /// never straddle it.
    fn away_from_zero(rng: &mut Rng, shape: Shape) -> Tensor {
        let data = (0..shape.len())
            .map(|_| {
                let m = rng.uniform(0.1, 2.0);
                if rng.below(2) == 0 { m } else { -m }
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn unit_slope_is_identity() {
        let mut rng = Rng::new(0);
        let x = away_from_zero(&mut rng, Shape::new(2, 3, 2, 2));
        let p = PReluParams { slope: vec![1.0; 3] };
        assert_eq!(prelu_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn elementwise_definition() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![-2.0, 3.0, -1.0, 0.5]).unwrap();
        let p = PReluParams { slope: vec![0.25, 0.5] };
        let y = prelu_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[-0.5, 3.0, -0.5, 0.5]);
    }

    #[test]
    fn prelu_gradients() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let shape = Shape::new(2, 1 + rng.below(3), 3, 2);
            let x = away_from_zero(&mut rng, shape);
            let p = PReluParams {
                slope: (0..shape.c).map(|_| rng.uniform(0.0, 0.5)).collect(),
            };
            let proj = away_from_zero(&mut rng, shape);
            let (gx, gs) = prelu_backward(&proj, &x, &p).unwrap();
            let loss = |x: &Tensor, p: &PReluParams| -> f64 {
                prelu_forward(x, p).unwrap().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            };
            let c = check_gradient(x.data(), gx.data(), |v| {
                loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &p)
            });
            assert!(c.passes(1e-6), "{c:?}");
            let c = check_gradient(&p.slope, &gs, |v| loss(&x, &PReluParams { slope: v.to_vec() }));
            assert!(c.passes(1e-6), "{c:?}");
        }
    }

    #[test]
    fn relu_gradient() {
        let mut rng = Rng::new(9);
        let shape = Shape::new(2, 2, 3, 3);
        let x = away_from_zero(&mut rng, shape);
        let proj = away_from_zero(&mut rng, shape);
        let gx = relu_backward(&proj, &x).unwrap();
        let c = check_gradient(x.data(), gx.data(), |v| {
            relu_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap())
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(c.passes(1e-6), "{c:?}");
    }
}

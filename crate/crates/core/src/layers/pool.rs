//! Spatial max pooling and global average pooling.

use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Output extent with stride equal to the window: incomplete trailing
/// windows are dropped.
pub fn pooled_dim(input: usize, window: usize) -> Result<usize> {
    if window == 0 || input < window {
        return Err(shape_err(format!(
            "pool window {window} does not fit input extent {input}"
        )));
    }
    Ok(input / window)
}

/// Flat input index of each output's winning element.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    input_shape: Shape,
    argmax: Vec<usize>,
}

impl MaxPoolCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Window × window max pool with stride = window. Ties go to the first
/// element in row-major scan order.
pub fn spatial_maxpool_forward(x: &Tensor, window: usize) -> Result<(Tensor, MaxPoolCache)> {
    let s = x.shape();
    let (oh, ow) = (pooled_dim(s.h, window)?, pooled_dim(s.w, window)?);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut y = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.len()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.offset(n, c, 0, 0);
            let plane = x.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for ky in 0..window {
                        let row = (oy * window + ky) * s.w;
                        for kx in 0..window {
                            let i = row + ox * window + kx;
                            if plane[i] > best {
                                best = plane[i];
                                arg = i;
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    argmax[o] = base + arg;
                    o += 1;
                }
            }
        }
    }
    Ok((
        y,
        MaxPoolCache {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn spatial_maxpool_backward(grad_out: &Tensor, cache: &MaxPoolCache) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(shape_err(format!(
            "maxpool grad_out {} does not match cached forward",
            grad_out.shape()
        )));
    }
    let mut gx = Tensor::zeros(cache.input_shape);
    let d = gx.data_mut();
    for (&i, &g) in cache.argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

/// Mean over H×W, producing `(n, c, 1, 1)`.
pub fn global_avgpool_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let inv = 1.0 / s.plane() as f64;
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            *y.at_mut(n, c, 0, 0) = x.plane(n, c).iter().sum::<f64>() * inv;
        }
    }
    y
}

pub fn global_avgpool_backward(grad_out: &Tensor, input_shape: Shape) -> Result<Tensor> {
    let s = input_shape;
    if grad_out.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(shape_err(format!(
            "avgpool grad_out {} for input {s}",
            grad_out.shape()
        )));
    }
    let inv = 1.0 / s.plane() as f64;
    let mut gx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.at(n, c, 0, 0) * inv;
            gx.plane_mut(n, c).fill(g);
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::rng::Rng;

    fn brute_force(x: &Tensor, window: usize) -> Tensor {
        let s = x.shape();
        let (oh, ow) = (s.h / window, s.w / window);
        let mut y = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for ky in 0..window {
                            for kx in 0..window {
                                m = m.max(x.at(n, c, oy * window + ky, ox * window + kx));
                            }
                        }
                        *y.at_mut(n, c, oy, ox) = m;
                    }
                }
            }
        }
        y
    }

    /// Distinct values, well separated, so no finite-difference step can
    /// change a window's winner.
    fn distinct(rng: &mut Rng, shape: Shape) -> Tensor {
        let mut vals: Vec<f64> = (0..shape.len()).map(|i| i as f64 * 0.1).collect();
        rng.shuffle(&mut vals);
        Tensor::from_vec(shape, vals).unwrap()
    }

    #[test]
    fn forward_matches_scan_and_drops_partial_windows() {
        let mut rng = Rng::new(0);
        for window in [2, 3] {
            let x = distinct(&mut rng, Shape::new(2, 3, 8, 7));
            let (y, cache) = spatial_maxpool_forward(&x, window).unwrap();
            assert_eq!(y.shape(), Shape::new(2, 3, 8 / window, 7 / window));
            assert_eq!(y, brute_force(&x, window));
            // one deposit per window
            let g = Tensor::filled(y.shape(), 1.0);
            let gx = spatial_maxpool_backward(&g, &cache).unwrap();
            assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), y.len());
            assert_eq!(gx.data().iter().sum::<f64>(), y.len() as f64);
        }
    }

    #[test]
    fn ties_route_to_first_in_scan() {
        let x = Tensor::filled(Shape::new(1, 1, 3, 3), 2.0);
        let (_, cache) = spatial_maxpool_forward(&x, 3).unwrap();
        assert_eq!(cache.argmax(), &[0]);
    }

    #[test]
    fn maxpool_gradient() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let window = 2 + rng.below(2);
            let shape = Shape::new(2, 2, window * 2 + rng.below(2), window * 2);
            let x = distinct(&mut rng, shape);
            let (y, cache) = spatial_maxpool_forward(&x, window).unwrap();
            let proj: Vec<f64> = (0..y.len()).map(|_| rng.normal()).collect();
            let gx = spatial_maxpool_backward(&Tensor::from_vec(y.shape(), proj.clone()).unwrap(), &cache)
                .unwrap();
            let c = check_gradient(x.data(), gx.data(), |v| {
                let (y, _) =
                    spatial_maxpool_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap(), window)
                        .unwrap();
                y.data().iter().zip(&proj).map(|(a, b)| a * b).sum()
            });
            assert!(c.passes(1e-6), "{c:?}");
        }
    }

    #[test]
    fn gap_gradient() {
        let mut rng = Rng::new(3);
        let shape = Shape::new(2, 3, 4, 5);
        let x = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.normal()).collect()).unwrap();
        let proj: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let g = Tensor::from_vec(Shape::new(2, 3, 1, 1), proj.clone()).unwrap();
        let gx = global_avgpool_backward(&g, shape).unwrap();
        let c = check_gradient(x.data(), gx.data(), |v| {
            global_avgpool_forward(&Tensor::from_vec(shape, v.to_vec()).unwrap())
                .data()
                .iter()
                .zip(&proj)
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(c.passes(1e-6), "{c:?}");
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        assert!(spatial_maxpool_forward(&Tensor::zeros(Shape::new(1, 1, 2, 2)), 3).is_err());
    }
}

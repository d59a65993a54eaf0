//! Indirect channel max pooling.
//!
//! Pools over permuted, non-contiguous channel planes by reading them in
//! place through the connectome's index map. The permuted tensor is never
//! materialized: the only allocations are the output and the argmax map.
//! [`naive_cmp_forward`] is the gather-then-pool reference it is checked
//! against.

use std::time::Instant;

use crate::alloc_track::measure_peak;
use crate::connectome::{index_hash, Connectome};
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Element types the kernel runs on.
pub trait PoolElem: Copy + PartialOrd + Default + std::ops::AddAssign + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
}

impl PoolElem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl PoolElem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

pub const DEFAULT_TILE_CHANNELS: usize = 8;
pub const DEFAULT_TILE_SPATIAL: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolPlan {
    perm: Vec<usize>,
    cmp: usize,
    /// Output channels handled per tile.
    pub tile_channels: usize,
    /// Plane elements handled per tile.
    pub tile_spatial: usize,
    fingerprint: u64,
}

impl PoolPlan {
    pub fn new(perm: Vec<usize>, cmp: usize) -> Result<Self> {
        // Validates bijection and divisibility.
        let c = Connectome::from_perm(perm, cmp, 0, true)?;
        Ok(Self::from_connectome(&c))
    }

    pub fn from_connectome(c: &Connectome) -> Self {
        Self {
            perm: c.perm().to_vec(),
            cmp: c.cmp(),
            tile_channels: DEFAULT_TILE_CHANNELS,
            tile_spatial: DEFAULT_TILE_SPATIAL,
            fingerprint: c.index_hash() ^ c.cmp() as u64,
        }
    }

    pub fn with_tiles(mut self, tile_channels: usize, tile_spatial: usize) -> Result<Self> {
        if tile_channels == 0 || tile_spatial == 0 {
            return Err(config_err("tile sizes must be positive"));
        }
        self.tile_channels = tile_channels;
        self.tile_spatial = tile_spatial;
        Ok(self)
    }

    pub fn expansion(&self) -> usize {
        self.perm.len()
    }

    pub fn cmp(&self) -> usize {
        self.cmp
    }

    pub fn outputs(&self) -> usize {
        self.perm.len() / self.cmp
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn index_hash(&self) -> u64 {
        index_hash(&self.perm)
    }
}

/// Winning offsets within each support, stored compactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Offsets {
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl Offsets {
    fn zeros(len: usize, cmp: usize) -> Self {
        if cmp <= u8::MAX as usize {
            Offsets::U8(vec![0; len])
        } else {
            Offsets::U32(vec![0; len])
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Offsets::U8(v) => v.len(),
            Offsets::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> usize {
        match self {
            Offsets::U8(v) => v[i] as usize,
            Offsets::U32(v) => v[i] as usize,
        }
    }

    pub fn bytes(&self) -> usize {
        match self {
            Offsets::U8(v) => v.len(),
            Offsets::U32(v) => 4 * v.len(),
        }
    }
}

/// Argmax map of one forward pass: for every output cell, the position
/// `0..cmp` inside its support that won.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgMaxMap {
    pub n: usize,
    pub outputs: usize,
    pub plane: usize,
    pub offsets: Offsets,
    fingerprint: u64,
}

impl ArgMaxMap {
    fn check(&self, plan: &PoolPlan, grad_len: usize) -> Result<()> {
        if self.fingerprint != plan.fingerprint || self.outputs != plan.outputs() {
            return Err(Error::StaleCache(
                "argmax map was produced by a different pooling plan".into(),
            ));
        }
        if grad_len != self.n * self.outputs * self.plane {
            return Err(Error::StaleCache(format!(
                "gradient of {grad_len} elements does not match argmax map of {}",
                self.n * self.outputs * self.plane
            )));
        }
        Ok(())
    }

    /// The original (un-permuted) channel that won output `(n, j, p)`.
    pub fn source_channel(&self, plan: &PoolPlan, n: usize, j: usize, p: usize) -> usize {
        let o = (n * self.outputs + j) * self.plane + p;
        plan.perm[j * plan.cmp + self.offsets.get(o)]
    }
}

fn check_input(len: usize, n: usize, plane: usize, plan: &PoolPlan) -> Result<()> {
    if n == 0 || plane == 0 || len != n * plan.expansion() * plane {
        return Err(shape_err(format!(
            "input of {len} elements is not n={n} × E={} × plane={plane}",
            plan.expansion()
        )));
    }
    Ok(())
}

/// `out[n, j, p] = max_i x[n, perm[j·cmp + i], p]`, reading source planes
/// in place. Ties keep the lowest position `i`.
pub fn indirect_cmp_forward<T: PoolElem>(
    x: &[T],
    n: usize,
    plane: usize,
    plan: &PoolPlan,
) -> Result<(Vec<T>, ArgMaxMap)> {
    check_input(x.len(), n, plane, plan)?;
    let e = plan.expansion();
    let cmp = plan.cmp;
    let outputs = plan.outputs();
    let mut out = vec![T::default(); n * outputs * plane];
    let mut offsets = Offsets::zeros(out.len(), cmp);
    for b in 0..n {
        let xb = &x[b * e * plane..(b + 1) * e * plane];
        for j0 in (0..outputs).step_by(plan.tile_channels) {
            let j1 = (j0 + plan.tile_channels).min(outputs);
            for s0 in (0..plane).step_by(plan.tile_spatial) {
                let s1 = (s0 + plan.tile_spatial).min(plane);
                for j in j0..j1 {
                    let o0 = (b * outputs + j) * plane;
                    let dst = &mut out[o0 + s0..o0 + s1];
                    let support = &plan.perm[j * cmp..(j + 1) * cmp];
                    let first = support[0] * plane;
                    dst.copy_from_slice(&xb[first + s0..first + s1]);
                    match &mut offsets {
                        Offsets::U8(arg) => {
                            let arg = &mut arg[o0 + s0..o0 + s1];
                            arg.fill(0);
                            for (i, &ch) in support.iter().enumerate().skip(1) {
                                let src = &xb[ch * plane + s0..ch * plane + s1];
                                for p in 0..dst.len() {
                                    if src[p] > dst[p] {
                                        dst[p] = src[p];
                                        arg[p] = i as u8;
                                    }
                                }
                            }
                        }
                        Offsets::U32(arg) => {
                            let arg = &mut arg[o0 + s0..o0 + s1];
                            arg.fill(0);
                            for (i, &ch) in support.iter().enumerate().skip(1) {
                                let src = &xb[ch * plane + s0..ch * plane + s1];
                                for p in 0..dst.len() {
                                    if src[p] > dst[p] {
                                        dst[p] = src[p];
                                        arg[p] = i as u32;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        out,
        ArgMaxMap {
            n,
            outputs,
            plane,
            offsets,
            fingerprint: plan.fingerprint,
        },
    ))
}

/// Routes each output gradient to the winning original channel; every
/// other entry of the result is zero.
pub fn indirect_cmp_backward<T: PoolElem>(
    grad_out: &[T],
    argmax: &ArgMaxMap,
    plan: &PoolPlan,
) -> Result<Vec<T>> {
    argmax.check(plan, grad_out.len())?;
    let (n, outputs, plane, cmp) = (argmax.n, argmax.outputs, argmax.plane, plan.cmp);
    let e = plan.expansion();
    let mut gx = vec![T::default(); n * e * plane];
    for b in 0..n {
        for j in 0..outputs {
            let o0 = (b * outputs + j) * plane;
            let support = &plan.perm[j * cmp..(j + 1) * cmp];
            for p in 0..plane {
                let ch = support[argmax.offsets.get(o0 + p)];
                gx[(b * e + ch) * plane + p] += grad_out[o0 + p];
            }
        }
    }
    Ok(gx)
}

/// Reference path: materializes the permuted tensor, then pools
/// contiguous channel blocks.
pub fn naive_cmp_forward<T: PoolElem>(
    x: &[T],
    n: usize,
    plane: usize,
    plan: &PoolPlan,
) -> Result<(Vec<T>, ArgMaxMap)> {
    check_input(x.len(), n, plane, plan)?;
    let e = plan.expansion();
    let mut shuffled = Vec::with_capacity(x.len());
    for b in 0..n {
        for &ch in &plan.perm {
            let src = (b * e + ch) * plane;
            shuffled.extend_from_slice(&x[src..src + plane]);
        }
    }
    let cmp = plan.cmp;
    let outputs = plan.outputs();
    let mut out = Vec::with_capacity(n * outputs * plane);
    let mut offsets = Offsets::zeros(n * outputs * plane, cmp);
    for b in 0..n {
        for j in 0..outputs {
            for p in 0..plane {
                let mut best = shuffled[(b * e + j * cmp) * plane + p];
                let mut arg = 0;
                for i in 1..cmp {
                    let v = shuffled[(b * e + j * cmp + i) * plane + p];
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                let o = out.len();
                out.push(best);
                match &mut offsets {
                    Offsets::U8(a) => a[o] = arg as u8,
                    Offsets::U32(a) => a[o] = arg as u32,
                }
            }
        }
    }
    Ok((
        out,
        ArgMaxMap {
            n,
            outputs,
            plane,
            offsets,
            fingerprint: plan.fingerprint,
        },
    ))
}

/// Reference backward: scatter into the permuted layout, then un-permute.
pub fn naive_cmp_backward<T: PoolElem>(
    grad_out: &[T],
    argmax: &ArgMaxMap,
    plan: &PoolPlan,
) -> Result<Vec<T>> {
    argmax.check(plan, grad_out.len())?;
    let (n, outputs, plane, cmp) = (argmax.n, argmax.outputs, argmax.plane, plan.cmp);
    let e = plan.expansion();
    let mut g_shuffled = vec![T::default(); n * e * plane];
    for b in 0..n {
        for j in 0..outputs {
            for p in 0..plane {
                let o = (b * outputs + j) * plane + p;
                let i = argmax.offsets.get(o);
                g_shuffled[(b * e + j * cmp + i) * plane + p] += grad_out[o];
            }
        }
    }
    let mut gx = vec![T::default(); n * e * plane];
    for b in 0..n {
        for (pos, &ch) in plan.perm.iter().enumerate() {
            let src = (b * e + pos) * plane;
            let dst = (b * e + ch) * plane;
            for p in 0..plane {
                gx[dst + p] += g_shuffled[src + p];
            }
        }
    }
    Ok(gx)
}

/// Tensor-level forward on `(n, E, h, w)`.
pub fn cmp_forward(x: &Tensor, plan: &PoolPlan) -> Result<(Tensor, ArgMaxMap)> {
    let s = x.shape();
    if s.c != plan.expansion() {
        return Err(shape_err(format!(
            "pooling plan over {} channels got {s}",
            plan.expansion()
        )));
    }
    let (out, am) = indirect_cmp_forward(x.data(), s.n, s.plane(), plan)?;
    Ok((Tensor::from_vec(Shape::new(s.n, plan.outputs(), s.h, s.w), out)?, am))
}

pub fn cmp_backward(grad_out: &Tensor, argmax: &ArgMaxMap, plan: &PoolPlan) -> Result<Tensor> {
    let s = grad_out.shape();
    if s.c != plan.outputs() || s.plane() != argmax.plane {
        return Err(Error::StaleCache(format!(
            "gradient {s} does not match pooling plan output"
        )));
    }
    let gx = indirect_cmp_backward(grad_out.data(), argmax, plan)?;
    Tensor::from_vec(Shape::new(s.n, plan.expansion(), s.h, s.w), gx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchPath {
    Naive,
    Indirect,
}

impl BenchPath {
    pub fn name(self) -> &'static str {
        match self {
            BenchPath::Naive => "naive",
            BenchPath::Indirect => "indirect",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocReport {
    pub config: String,
    pub naive_median_ns: u128,
    pub indirect_median_ns: u128,
    /// `None` when the counting allocator is not installed.
    pub naive_peak_bytes: Option<usize>,
    pub indirect_peak_bytes: Option<usize>,
    /// Bytes of one expanded (input-sized) tensor.
    pub expanded_bytes: usize,
    /// Bytes of the pooled output plus the argmax map.
    pub output_bytes: usize,
    pub speedup: f64,
}

impl AllocReport {
    pub const CSV_HEADER: &'static str = "config,path,median_ns,peak_transient_bytes,speedup";

    /// Two CSV rows: the naive path (speedup 1) and the indirect path.
    pub fn csv_rows(&self) -> [String; 2] {
        let fmt_peak = |p: Option<usize>| p.map_or_else(|| "NA".to_string(), |b| b.to_string());
        [
            format!(
                "{},naive,{},{},1.000",
                self.config,
                self.naive_median_ns,
                fmt_peak(self.naive_peak_bytes)
            ),
            format!(
                "{},indirect,{},{},{:.3}",
                self.config,
                self.indirect_median_ns,
                fmt_peak(self.indirect_peak_bytes),
                self.speedup
            ),
        ]
    }
}

fn median(mut v: Vec<u128>) -> u128 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times both paths on a random `(n, E, h, w)` input and records the peak
/// transient allocation of each.
pub fn bench<T: PoolElem>(
    plan: &PoolPlan,
    n: usize,
    h: usize,
    w: usize,
    reps: usize,
    seed: u64,
) -> Result<AllocReport> {
    if reps < 10 {
        return Err(config_err("benchmark needs at least 10 repetitions"));
    }
    let plane = h * w;
    let mut rng = Rng::new(seed);
    let x: Vec<T> = (0..n * plan.expansion() * plane)
        .map(|_| T::from_f64(rng.normal()))
        .collect();
    let mut times = [Vec::with_capacity(reps), Vec::with_capacity(reps)];
    let mut peaks: [Option<usize>; 2] = [None, None];
    for _ in 0..reps {
        for (k, path) in [BenchPath::Naive, BenchPath::Indirect].into_iter().enumerate() {
            let t0 = Instant::now();
            let (r, peak) = measure_peak(|| match path {
                BenchPath::Naive => naive_cmp_forward(&x, n, plane, plan),
                BenchPath::Indirect => indirect_cmp_forward(&x, n, plane, plan),
            });
            let elapsed = t0.elapsed().as_nanos();
            let (out, _) = r?;
            std::hint::black_box(&out);
            times[k].push(elapsed);
            peaks[k] = match (peaks[k], peak) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (_, p) => p,
            };
        }
    }
    let [naive_t, indirect_t] = times;
    let (naive_median_ns, indirect_median_ns) = (median(naive_t), median(indirect_t));
    let elem = std::mem::size_of::<T>();
    let out_len = n * plan.outputs() * plane;
    let offset_bytes = if plan.cmp <= u8::MAX as usize { 1 } else { 4 };
    Ok(AllocReport {
        config: format!(
            "E={}_cmp={}_n={n}_h={h}_w={w}_{}",
            plan.expansion(),
            plan.cmp,
            std::any::type_name::<T>()
        ),
        naive_median_ns,
        indirect_median_ns,
        naive_peak_bytes: peaks[0],
        indirect_peak_bytes: peaks[1],
        expanded_bytes: n * plan.expansion() * plane * elem,
        output_bytes: out_len * (elem + offset_bytes),
        speedup: naive_median_ns as f64 / indirect_median_ns.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    #[test]
    fn identity_unit_window_is_passthrough() {
        let plan = PoolPlan::new((0..3).collect(), 1).unwrap();
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let (out, am) = indirect_cmp_forward(&x, 1, 4, &plan).unwrap();
        assert_eq!(out, x);
        assert!((0..am.offsets.len()).all(|i| am.offsets.get(i) == 0));
    }

    #[test]
    fn hand_evaluated_example() {
        // E=4, cmp=2, perm=[2,0,3,1]; channel c is constant 10·(c+1).
        let plan = PoolPlan::new(vec![2, 0, 3, 1], 2).unwrap();
        let plane = 3;
        let x: Vec<f64> = (0..4).flat_map(|c| vec![10.0 * (c + 1) as f64; plane]).collect();
        let (out, am) = indirect_cmp_forward(&x, 1, plane, &plan).unwrap();
        assert_eq!(out, [vec![30.0; plane], vec![40.0; plane]].concat());
        assert_eq!(am.source_channel(&plan, 0, 0, 0), 2);
        assert_eq!(am.source_channel(&plan, 0, 1, 0), 3);
        let (naive, _) = naive_cmp_forward(&x, 1, plane, &plan).unwrap();
        assert_eq!(naive, out);
    }

    #[test]
    fn tiling_does_not_change_results() {
        let mut rng = Rng::new(4);
        let perm = rng.permutation(24).unwrap();
        let base = PoolPlan::new(perm, 3).unwrap();
        let x: Vec<f64> = (0..2 * 24 * 30).map(|_| rng.normal()).collect();
        let reference = indirect_cmp_forward(&x, 2, 30, &base).unwrap();
        for (tc, ts) in [(1, 1), (3, 7), (100, 1000), (5, 30)] {
            let plan = base.clone().with_tiles(tc, ts).unwrap();
            assert_eq!(indirect_cmp_forward(&x, 2, 30, &plan).unwrap(), reference);
        }
    }

    #[test]
    fn zero_grad_and_unit_window_backward() {
        let mut rng = Rng::new(5);
        let plan = PoolPlan::new(rng.permutation(6).unwrap(), 1).unwrap();
        let x: Vec<f64> = (0..6 * 4).map(|_| rng.normal()).collect();
        let (_, am) = indirect_cmp_forward(&x, 1, 4, &plan).unwrap();
        let gx = indirect_cmp_backward(&[0.0; 24], &am, &plan).unwrap();
        assert!(gx.iter().all(|&v| v == 0.0));
        // cmp=1: gradient is un-permuted.
        let g: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let gx = indirect_cmp_backward(&g, &am, &plan).unwrap();
        for (j, &ch) in plan.perm().iter().enumerate() {
            assert_eq!(&gx[ch * 4..ch * 4 + 4], &g[j * 4..j * 4 + 4]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let cmp = 1 + rng.below(4);
            let e = cmp * (1 + rng.below(4));
            let plan = PoolPlan::new(rng.permutation(e).unwrap(), cmp).unwrap();
            let (n, plane) = (1 + rng.below(2), 1 + rng.below(6));
            // distinct, well separated values
            let mut x: Vec<f64> = (0..n * e * plane).map(|i| i as f64 * 0.01).collect();
            rng.shuffle(&mut x);
            let (out, am) = indirect_cmp_forward(&x, n, plane, &plan).unwrap();
            let proj: Vec<f64> = (0..out.len()).map(|_| rng.normal()).collect();
            let gx = indirect_cmp_backward(&proj, &am, &plan).unwrap();
            let c = check_gradient(&x, &gx, |v| {
                let (o, _) = indirect_cmp_forward(v, n, plane, &plan).unwrap();
                o.iter().zip(&proj).map(|(a, b)| a * b).sum()
            });
            assert!(c.passes(1e-6), "{c:?}");
        }
    }

    #[test]
    fn stale_argmax_rejected() {
        let a = PoolPlan::new(vec![1, 0, 2, 3], 2).unwrap();
        let b = PoolPlan::new(vec![0, 1, 2, 3], 2).unwrap();
        let (_, am) = indirect_cmp_forward(&[0.0f64; 8], 1, 2, &a).unwrap();
        assert!(matches!(
            indirect_cmp_backward(&[0.0; 4], &am, &b),
            Err(Error::StaleCache(_))
        ));
        assert!(indirect_cmp_backward(&[0.0; 3], &am, &a).is_err());
    }

    #[test]
    fn wide_windows_use_u32_offsets() {
        let plan = PoolPlan::new((0..300).collect(), 300).unwrap();
        let mut x = vec![0.0f32; 300];
        x[299] = 1.0;
        let (out, am) = indirect_cmp_forward(&x, 1, 1, &plan).unwrap();
        assert_eq!(out, vec![1.0]);
        assert!(matches!(am.offsets, Offsets::U32(_)));
        assert_eq!(am.offsets.get(0), 299);
    }

    #[test]
    fn bench_needs_ten_reps() {
        let plan = PoolPlan::new(vec![0, 1], 2).unwrap();
        assert!(bench::<f64>(&plan, 1, 2, 2, 9, 0).is_err());
        let r = bench::<f32>(&plan, 1, 2, 2, 10, 0).unwrap();
        assert_eq!(r.csv_rows()[0].split(',').count(), 5);
    }
}

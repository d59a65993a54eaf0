use proptest::prelude::*;

use prcn::connectome::Connectome;
use prcn::pool_kernel::{
    indirect_cmp_backward, indirect_cmp_forward, naive_cmp_backward, naive_cmp_forward, PoolElem,
    PoolPlan,
};
use prcn::prcn_layer::{ExpansionMode, PoolNet, PrcnLayer, PrcnLayerConfig};
use prcn::rng::Rng;
use prcn::{Shape, Tensor};

fn random_tensor(shape: Shape, rng: &mut Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.normal()).collect()).unwrap()
}

fn lattice() -> Vec<PrcnLayerConfig> {
    let mut out = Vec::new();
    for inch in 1..=4 {
        for outch in 1..=4 {
            for g in 1..=4 {
                for cmp in 1..=4 {
                    for mode in [ExpansionMode::A, ExpansionMode::B] {
                        for pool_net in [PoolNet::None, PoolNet::Two1x1, PoolNet::Conv1x1ReplaceAvg] {
                            let mut c = match mode {
                                ExpansionMode::A => PrcnLayerConfig::mode_a(inch, outch, g, cmp, 3),
                                ExpansionMode::B => PrcnLayerConfig::mode_b(inch, outch, g, 3),
                            };
                            c.cmp = cmp;
                            c.pool_net = pool_net;
                            out.push(c);
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn every_valid_config_emits_outch_channels() {
    let mut rng = Rng::new(11);
    let mut valid = 0;
    for cfg in lattice() {
        if cfg.validate().is_err() {
            assert!(PrcnLayer::new(cfg.clone(), &mut rng).is_err(), "{cfg:?}");
            continue;
        }
        valid += 1;
        let layer = PrcnLayer::new(cfg.clone(), &mut rng).unwrap();
        let x = random_tensor(Shape::new(2, cfg.inch, 5, 6), &mut rng);
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, cfg.outch, 5, 6), "{cfg:?}");
        assert_eq!(layer.output_shape(x.shape()).unwrap(), y.shape());
        assert_eq!(layer.param_count(), cfg.param_count());
    }
    assert!(valid > 100, "only {valid} valid configs in the lattice");
}

fn prcn_config() -> impl Strategy<Value = PrcnLayerConfig> {
    (1usize..4, 1usize..4, 1usize..5, 1usize..5, any::<bool>(), 0usize..3, any::<bool>(), prop::sample::select(vec![1usize, 3]))
        .prop_map(|(inch, outch, g, cmp, mode_a, net, randomized, k)| {
            let mut c = if mode_a {
                PrcnLayerConfig::mode_a(inch, outch, g, cmp, k)
            } else {
                PrcnLayerConfig::mode_b(inch, outch, g, k)
            };
            c.randomized = randomized;
            c.pool_net = [PoolNet::None, PoolNet::Two1x1, PoolNet::Conv1x1ReplaceAvg][net];
            c
        })
        .prop_filter("valid layer", |c| c.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn fused_forward_equals_explicit_shuffle(cfg in prcn_config(), seed in any::<u64>(), n in 1usize..3, h in 3usize..7) {
        let mut rng = Rng::new(seed);
        let layer = PrcnLayer::new(cfg.clone(), &mut rng).unwrap();
        let x = random_tensor(Shape::new(n, cfg.inch, h, h + 1), &mut rng);
        let (fused, _) = layer.forward(&x).unwrap();
        let explicit = layer.forward_explicit(&x).unwrap();
        prop_assert_eq!(fused.data(), explicit.data());
    }
}

fn oracle_case<T: PoolElem + std::fmt::Debug>(seed: u64, outputs: usize, cmp: usize, n: usize, plane: usize, tiles: (usize, usize), randomized: bool) {
    let mut rng = Rng::new(seed);
    let conn = Connectome::build(seed, outputs * cmp, cmp, randomized).unwrap();
    let plan = PoolPlan::from_connectome(&conn).with_tiles(tiles.0, tiles.1).unwrap();
    let x: Vec<T> = (0..n * outputs * cmp * plane).map(|_| T::from_f64(rng.normal())).collect();
    let (fast, am_fast) = indirect_cmp_forward(&x, n, plane, &plan).unwrap();
    let (slow, am_slow) = naive_cmp_forward(&x, n, plane, &plan).unwrap();
    assert_eq!(fast, slow);
    assert_eq!(am_fast, am_slow);
    let g: Vec<T> = (0..fast.len()).map(|_| T::from_f64(rng.normal())).collect();
    assert_eq!(
        indirect_cmp_backward(&g, &am_fast, &plan).unwrap(),
        naive_cmp_backward(&g, &am_slow, &plan).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn indirect_kernel_matches_naive(
        seed in any::<u64>(),
        outputs in 1usize..9,
        cmp in 1usize..7,
        n in 1usize..4,
        plane in 1usize..50,
        tiles in (1usize..10, 1usize..64),
        randomized in any::<bool>(),
        single in any::<bool>(),
    ) {
        if single {
            oracle_case::<f32>(seed, outputs, cmp, n, plane, tiles, randomized);
        } else {
            oracle_case::<f64>(seed, outputs, cmp, n, plane, tiles, randomized);
        }
    }
}

#[test]
fn ties_resolve_to_the_first_support_position() {
    let plan = PoolPlan::new(vec![3, 1, 0, 2], 4).unwrap();
    let x = vec![1.0f64; 4 * 3];
    let (_, am) = indirect_cmp_forward(&x, 1, 3, &plan).unwrap();
    for p in 0..3 {
        assert_eq!(am.source_channel(&plan, 0, 0, p), 3);
    }
}

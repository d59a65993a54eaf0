use prcn::arch::ModelSpec;
use prcn::layers::BnMode;
use prcn::{Shape, Tensor};

#[test]
fn wide_baseline_runs_forward() {
    let spec = ModelSpec::ConvNet512;
    let mut m = spec.compile(0).unwrap();
    let x = Tensor::filled(Shape::new(2, 1, 28, 28), 0.3);
    let y = m.predict(&x).unwrap();
    assert_eq!(y.shape(), Shape::new(2, 10, 1, 1));
    let widths: Vec<usize> = m
        .layers
        .iter()
        .filter_map(|l| match l {
            prcn::model::Layer::Conv(p) => Some(p.outch),
            _ => None,
        })
        .collect();
    assert_eq!(widths, [512, 16]);
    assert!(m.param_count() > 4 * ModelSpec::ConvNet36.count_params().unwrap());
}

#[test]
fn compile_is_deterministic_per_seed() {
    for spec in ModelSpec::mnist_presets() {
        if spec == ModelSpec::ConvNet512 {
            continue;
        }
        assert_eq!(spec.compile(5).unwrap(), spec.compile(5).unwrap(), "{spec}");
        assert_ne!(spec.compile(5).unwrap(), spec.compile(6).unwrap(), "{spec}");
    }
}

#[test]
fn mnist_family_is_within_five_percent_of_the_baseline() {
    let base = ModelSpec::ConvNet36.count_params().unwrap() as f64;
    for (ch, g) in [(36, 1), (18, 2), (12, 3), (9, 4)] {
        for spec in [ModelSpec::prcn(ch, g), format!("prcn({ch},{g}):norand").parse().unwrap()] {
            let p = spec.count_params().unwrap() as f64;
            assert!((p - base).abs() / base <= 0.05, "{spec}: {p} vs {base}");
        }
    }
}

#[test]
fn eth_presets_emit_eight_logits() {
    for spec in ModelSpec::eth_presets() {
        let mut m = spec.compile(1).unwrap();
        let (c, h, w) = spec.input();
        let x = Tensor::filled(Shape::new(2, c, h, w), 0.1);
        let (y, _) = m.forward(&x, BnMode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 8, 1, 1), "{spec}");
    }
}

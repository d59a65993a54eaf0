//! Mini-batch training and evaluation.
//!
//! Every random choice in a run derives from one seed through named child
//! streams: [`STREAM_INIT`] for weights and connectomes, [`STREAM_SHUFFLE`]
//! for batch order, [`STREAM_AUGMENT`] for training augmentation and
//! [`STREAM_TEST`] for the one-off test-set augmentation.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{argmax_rows, softmax_xent, BnMode};
use crate::mnist::{augment_batch, AugmentSpec, IdxDataset};
use crate::model::Model;
use crate::optim::{lr_at, OptimState, SgdConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_AUGMENT: u64 = 3;
pub const STREAM_TEST: u64 = 4;

/// Seed used to build the model of run `seed`.
pub fn init_seed(seed: u64) -> u64 {
    Rng::new(seed).fork(STREAM_INIT).seed()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub augment: AugmentSpec,
    pub seed: u64,
    /// Evaluate the test set every this many epochs (the last epoch is
    /// always evaluated).
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    /// NaN when the test set was not evaluated this epoch.
    pub test_err: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub train_err: f64,
    pub test_err: f64,
    pub seconds: f64,
}

/// Fraction of misclassified samples, in eval mode.
pub fn evaluate(model: &mut Model, images: &Tensor, labels: &[usize], batch: usize) -> Result<f64> {
    let n = images.shape().n;
    let mut wrong = 0usize;
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch).min(n);
        let logits = model.predict(&images.batch_slice(start, end)?)?;
        wrong += argmax_rows(&logits)
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(wrong as f64 / n as f64)
}

/// The test images as seen by run `seed`: augmented once with the
/// dedicated test stream.
pub fn prepare_test(test: &IdxDataset, augment: &AugmentSpec, seed: u64) -> Result<Tensor> {
    if augment.is_identity() {
        return Ok(test.images.clone());
    }
    augment_batch(&test.images, augment, &mut Rng::new(seed).fork(STREAM_TEST))
}

/// Runs SGD for `cfg.epochs` epochs, calling `on_epoch` after each one.
pub fn train(
    model: &mut Model,
    train_set: &IdxDataset,
    test_set: &IdxDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<RunMetrics> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(crate::error::config_err("training and test sets must be non-empty"));
    }
    cfg.augment.validate()?;
    let start = Instant::now();
    let root = Rng::new(cfg.seed);
    let mut shuffle = root.fork(STREAM_SHUFFLE);
    let mut aug = root.fork(STREAM_AUGMENT);
    let test_images = prepare_test(test_set, &cfg.augment, cfg.seed)?;
    let test_labels = test_set.labels_usize();
    let train_labels = train_set.labels_usize();
    let bs = cfg.sgd.batch_size.max(1);
    let mut opt = OptimState::new(cfg.sgd.clone(), &model.param_sizes());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_train_err = f64::NAN;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, cfg.epochs, &cfg.sgd);
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let mut x = train_set.images.gather_samples(chunk)?;
            if !cfg.augment.is_identity() {
                x = augment_batch(&x, &cfg.augment, &mut aug)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite { op } => Error::Divergence {
                    epoch,
                    msg: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let (logits, trace) = model.forward(&x, BnMode::Train).map_err(diverged)?;
            let (loss, grad) = softmax_xent(&logits, &labels).map_err(diverged)?;
            wrong += argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p != l)
                .count();
            loss_sum += loss * chunk.len() as f64;
            let mut grads = model.backward(&grad, &trace)?;
            opt.step(model.params_mut(), &mut grads, lr).map_err(diverged)?;
        }
        let n = train_set.len() as f64;
        last_train_err = wrong as f64 / n;
        let last = epoch + 1 == cfg.epochs;
        let test_err = if last || (epoch + 1) % cfg.eval_every.max(1) == 0 {
            evaluate(model, &test_images, &test_labels, bs)?
        } else {
            f64::NAN
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_err: last_train_err,
            test_err,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&m, model)?;
        history.push(m);
    }

    let test_err = match history.last() {
        Some(m) => m.test_err,
        None => evaluate(model, &test_images, &test_labels, bs)?,
    };
    Ok(RunMetrics {
        seed: cfg.seed,
        epochs: history,
        train_err: last_train_err,
        test_err,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-epoch metrics CSV: `epoch,lr,train_loss,train_err,test_err,seconds`.
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_path(path)?,
        })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        self.writer.serialize(m)?;
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LinearParams;
    use crate::model::Layer;
    use crate::tensor::Shape;

    fn linear_model(seed: u64, inf: usize, classes: usize) -> Model {
        let mut p = LinearParams::new(inf, classes).unwrap();
        p.he_init(&mut Rng::new(seed));
        Model {
            layers: vec![Layer::Linear(p)],
            input: (1, 1, inf),
            classes,
        }
    }

    fn separable(n: usize, seed: u64) -> IdxDataset {
        let mut rng = Rng::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            data.push(sign * rng.uniform(0.2, 1.0));
            data.push(rng.uniform(-1.0, 1.0));
            labels.push(label);
        }
        IdxDataset {
            images: Tensor::from_vec(Shape::new(n, 1, 1, 2), data).unwrap(),
            labels,
        }
    }

    fn cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            sgd: SgdConfig {
                batch_size: 16,
                ..SgdConfig::default()
            },
            augment: AugmentSpec::default(),
            seed,
            eval_every: 1,
        }
    }

    #[test]
    fn separable_toy_reaches_zero_error() {
        let data = separable(200, 1);
        let mut m = linear_model(2, 2, 2);
        let r = train(&mut m, &data, &data, &cfg(50, 3), |_, _| Ok(())).unwrap();
        assert_eq!(r.train_err, 0.0);
        assert_eq!(r.test_err, 0.0);
    }

    #[test]
    fn zero_epochs_is_untrained_baseline() {
        let data = separable(100, 1);
        let mut m = linear_model(2, 2, 2);
        let before = evaluate(&mut m.clone(), &data.images, &data.labels_usize(), 7).unwrap();
        let r = train(&mut m, &data, &data, &cfg(0, 3), |_, _| Ok(())).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.test_err, before);
    }

    #[test]
    fn same_seed_same_metrics() {
        let data = separable(64, 5);
        let run = || {
            let mut m = linear_model(1, 2, 2);
            let mut r = train(&mut m, &data, &data, &cfg(3, 8), |_, _| Ok(())).unwrap();
            r.seconds = 0.0;
            r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
            (r, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = separable(32, 5);
        let mut m = linear_model(1, 2, 2);
        let mut c = cfg(3, 1);
        c.sgd.lr = 1e300;
        c.sgd.clip_norm = None;
        c.sgd.momentum = 0.0;
        match train(&mut m, &data, &data, &c, |_, _| Ok(())) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch < 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let spec = crate::arch::ModelSpec::prcn(9, 4);
        let mut m = spec.compile(0).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::from_vec(
            Shape::new(8, 1, 28, 28),
            (0..8 * 784).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..8).map(|i| i % 10).collect();
        let (logits, trace) = m.forward(&x, BnMode::Train).unwrap();
        let (l0, g) = softmax_xent(&logits, &labels).unwrap();
        let mut grads = m.backward(&g, &trace).unwrap();
        let mut opt = OptimState::new(
            SgdConfig {
                momentum: 0.0,
                weight_decay: 0.0,
                clip_norm: None,
                ..SgdConfig::default()
            },
            &m.param_sizes(),
        );
        opt.step(m.params_mut(), &mut grads, 1e-4).unwrap();
        let (logits, _) = m.forward(&x, BnMode::Train).unwrap();
        let (l1, _) = softmax_xent(&logits, &labels).unwrap();
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn metrics_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&p).unwrap();
        log.append(&EpochMetrics {
            epoch: 0,
            lr: 0.1,
            train_loss: 1.0,
            train_err: 0.5,
            test_err: 0.4,
            seconds: 2.0,
        })
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,train_err,test_err,seconds\n"));
    }
}

//! Mini-batch SGD training for both networks.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::arch::{NetworkSpec, OutputKind};
use crate::dataset::{LabelKind, PatchSample};
use crate::error::{Error, Result};
use crate::network::{output_locations, patch_tensor, Init, Network};
use crate::nn::{softmax2_xent_scaled, LayerParams, OptimizerState, SgdConfig};
use crate::par;
use crate::seed::{stream_rng, stream_seed};
use crate::tensor::Tensor;

/// Samples per gradient work unit. Batches are cut into chunks of this size,
/// each chunk's gradient is summed sequentially, and chunk gradients are then
/// added in chunk order, so the result does not depend on the thread count.
pub const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Halve the learning rate after every `n` epochs.
    HalveEvery(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn classifier() -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            epochs: 25,
            schedule: Schedule::HalveEvery(5),
            seed: 0,
        }
    }

    pub fn segmenter() -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 100,
            schedule: Schedule::Constant,
            seed: 0,
        }
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::HalveEvery(n) => {
                let halvings = (epoch.max(1) - 1) / n.max(1);
                self.learning_rate * 0.5f64.powi(halvings as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.schedule == Schedule::HalveEvery(0) {
            return Err(Error::invalid("halving period must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there is no validation set.
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss,lr`; a missing validation loss is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
            writeln!(out, "{},{:.9},{},{}", e.epoch, e.train_loss, val, e.learning_rate).unwrap();
        }
        out
    }
}

fn expected_label(output: OutputKind) -> LabelKind {
    match output {
        OutputKind::ScalarProbability => LabelKind::Class,
        OutputKind::DenseProbabilityMap => LabelKind::Mask,
    }
}

fn check_labels(samples: &[PatchSample], output: OutputKind) -> Result<()> {
    let want = expected_label(output);
    if let Some(bad) = samples.iter().find(|s| s.label.kind() != want) {
        return Err(Error::invalid(format!(
            "sample from {:?} has a {:?} label but the network needs {want:?}",
            bad.raster_id,
            bad.label.kind()
        )));
    }
    Ok(())
}

/// Summed gradient and summed loss of `samples`, each loss term divided by `denom`.
fn chunk_gradient(net: &Network<f32>, samples: &[&PatchSample], denom: usize) -> Result<(Vec<LayerParams<f32>>, f64)> {
    let mut grads = net.zero_grads();
    let mut loss = 0.0;
    for s in samples {
        let x = patch_tensor::<f32>(&s.pixels)?;
        let (logits, trace) = net.forward_trace(&x)?;
        let xent = softmax2_xent_scaled(&logits, s.label.targets(), denom)?;
        loss += xent.loss;
        net.backward(&trace, &xent.grad, &mut grads)?;
    }
    Ok((grads, loss))
}

/// Mean cross-entropy gradient of one mini-batch, and its mean loss.
pub fn batch_gradient(net: &Network<f32>, batch: &[&PatchSample]) -> Result<(Vec<LayerParams<f32>>, f64)> {
    let denom = batch.len() * output_locations(net.spec().output());
    let chunks: Vec<&[&PatchSample]> = batch.chunks(GRAD_CHUNK).collect();
    let parts = par::map_slice(&chunks, |c| chunk_gradient(net, c, denom));
    let mut total: Option<(Vec<LayerParams<f32>>, f64)> = None;
    for part in parts {
        let (g, l) = part?;
        match total.as_mut() {
            None => total = Some((g, l)),
            Some((tg, tl)) => {
                for (a, b) in tg.iter_mut().zip(&g) {
                    a.weight.add_assign(&b.weight)?;
                    a.bias.add_assign(&b.bias)?;
                }
                *tl += l;
            }
        }
    }
    total.ok_or_else(|| Error::invalid("empty mini-batch"))
}

/// Mean per-location cross-entropy of `samples` (forward passes only).
pub fn evaluate_loss(net: &Network<f32>, samples: &[PatchSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate loss on an empty set"));
    }
    let losses = par::map_slice(samples, |s| -> Result<f64> {
        let logits = net.logits(&patch_tensor::<f32>(&s.pixels)?)?;
        Ok(softmax2_xent_scaled(&logits, s.label.targets(), s.label.targets().len())?.loss)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / samples.len() as f64)
}

/// Initializes a network from `config.seed` and trains it.
pub fn train(
    spec: &NetworkSpec,
    train_set: &[PatchSample],
    val_set: &[PatchSample],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(Network<f32>, TrainReport)> {
    let mut net = Network::new(
        spec,
        Init::FanInUniform {
            seed: stream_seed(config.seed, 0),
        },
    );
    let report = train_network(&mut net, train_set, val_set, config, on_epoch)?;
    Ok((net, report))
}

/// Runs `config.epochs` epochs of shuffled mini-batch SGD on `net`.
pub fn train_network(
    net: &mut Network<f32>,
    train_set: &[PatchSample],
    val_set: &[PatchSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let output = net.spec().output();
    check_labels(train_set, output)?;
    check_labels(val_set, output)?;

    let shapes: Vec<Vec<usize>> = net
        .params()
        .iter()
        .flat_map(|p| [p.weight.shape().to_vec(), p.bias.shape().to_vec()])
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let sgd = SgdConfig {
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let mut opt = OptimizerState::<f32>::new(sgd, &shape_refs)?;
    let decay: Vec<bool> = (0..shapes.len()).map(|i| i % 2 == 0).collect();

    let mut rng = stream_rng(config.seed, 1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        config: config.clone(),
        epochs: Vec::with_capacity(config.epochs),
    };
    for epoch in 1..=config.epochs {
        let lr = config.learning_rate_at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PatchSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (grads, loss) = batch_gradient(net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            loss_sum += loss * batch.len() as f64;
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().flat_map(|g| [&g.weight, &g.bias]).collect();
            let mut param_refs: Vec<&mut Tensor<f32>> = net
                .params_mut()
                .iter_mut()
                .flat_map(|p| [&mut p.weight, &mut p.bias])
                .collect();
            opt.step(&mut param_refs, &grad_refs, &decay)?;
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(net, val_set)?)
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            learning_rate: lr,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{classifier_with, segmenter_with, PATCH};
    use crate::dataset::Label;
    use crate::network::Prediction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(pixels: Vec<u8>, label: Label) -> PatchSample {
        PatchSample {
            pixels,
            label,
            raster_id: "t".into(),
            center: (20, 20),
            rotation_deg: 0.0,
        }
    }

    /// Bright-centered patches are class 1, dark-centered class 0, both noisy.
    fn two_class(n: usize, seed: u64) -> Vec<PatchSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = (i % 2) as u8;
                let pixels = (0..PATCH * PATCH)
                    .flat_map(|p| {
                        let (r, c) = (p / PATCH, p % PATCH);
                        let centre = r.abs_diff(20) <= 6 && c.abs_diff(20) <= 6;
                        let base: f64 = if centre && class == 1 { 200.0 } else { 90.0 };
                        let v = (base + rng.random_range(-40.0..40.0)).clamp(0.0, 255.0) as u8;
                        [v, v, v]
                    })
                    .collect();
                sample(pixels, Label::Class(class))
            })
            .collect()
    }

    #[test]
    fn halving_schedule_values() {
        let cfg = TrainConfig::classifier();
        assert_eq!(cfg.learning_rate_at(1), 0.001);
        assert_eq!(cfg.learning_rate_at(5), 0.001);
        assert_eq!(cfg.learning_rate_at(6), 0.0005);
        assert_eq!(cfg.learning_rate_at(10), 0.0005);
        assert_eq!(cfg.learning_rate_at(21), 0.0000625);
        assert_eq!(cfg.learning_rate_at(25), 0.0000625);
        let seg = TrainConfig::segmenter();
        assert_eq!(seg.learning_rate_at(100), 0.001);
        assert_eq!((seg.weight_decay, seg.epochs, seg.batch_size), (0.0005, 100, 100));
    }

    #[test]
    fn one_step_decreases_loss() {
        let spec = segmenter_with(&[4, 4, 4], &[4, 4, 4]).unwrap();
        let mut net = Network::new(&spec, Init::FanInUniform { seed: 5 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels: Vec<u8> = (0..PATCH * PATCH * 3).map(|_| rng.random()).collect();
        let mask: Vec<u8> = (0..PATCH * PATCH).map(|i| u8::from((i / PATCH) > 20)).collect();
        let set = vec![sample(pixels, Label::Mask(mask)); 3];
        let before = evaluate_loss(&net, &set).unwrap();
        let cfg = TrainConfig {
            batch_size: 3,
            learning_rate: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 1,
            schedule: Schedule::Constant,
            seed: 0,
        };
        train_network(&mut net, &set, &[], &cfg, |_| {}).unwrap();
        assert!(evaluate_loss(&net, &set).unwrap() < before);
    }

    #[test]
    fn two_class_problem_reaches_high_accuracy() {
        let spec = classifier_with(&[4, 8, 8], &[16, 8]).unwrap();
        let data = two_class(200, 11);
        let cfg = TrainConfig {
            batch_size: 10,
            learning_rate: 0.01,
            epochs: 25,
            seed: 3,
            ..TrainConfig::classifier()
        };
        let (net, report) = train(&spec, &data, &[], &cfg, |_| {}).unwrap();
        assert_eq!(report.epochs.len(), 25);
        let correct = data
            .iter()
            .filter(|s| {
                let Prediction::Scalar(p) = net.predict(&patch_tensor(&s.pixels).unwrap()).unwrap() else {
                    unreachable!()
                };
                (p >= 0.5) == s.is_positive()
            })
            .count();
        assert!(correct >= 190, "accuracy {correct}/200");
    }

    #[test]
    fn reruns_are_bit_identical_and_thread_independent() {
        let spec = classifier_with(&[4, 4, 4], &[8, 4]).unwrap();
        let data = two_class(30, 2);
        let val = two_class(6, 9);
        let cfg = TrainConfig {
            batch_size: 7,
            epochs: 3,
            seed: 17,
            ..TrainConfig::classifier()
        };
        let (a, ra) = train(&spec, &data, &val, &cfg, |_| {}).unwrap();
        let (b, rb) = par::sequential(|| train(&spec, &data, &val, &cfg, |_| {})).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.to_records(), b.to_records());
        assert_eq!(ra.to_csv().lines().count(), 4);
        assert!(ra.epochs.iter().all(|e| e.val_loss.is_some()));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let spec = classifier_with(&[4, 4, 4], &[4]).unwrap();
        let cfg = TrainConfig::classifier();
        assert!(train(&spec, &[], &[], &cfg, |_| {}).is_err());
        let masked = vec![sample(vec![0; PATCH * PATCH * 3], Label::Mask(vec![0; PATCH * PATCH]))];
        assert!(train(&spec, &masked, &[], &cfg, |_| {}).is_err());
        let zero_batch = TrainConfig { batch_size: 0, ..cfg };
        assert!(train(&spec, &two_class(2, 0), &[], &zero_batch, |_| {}).is_err());
    }

    #[test]
    fn diverging_run_reports_non_finite_loss() {
        let spec = classifier_with(&[4, 4, 4], &[4]).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e30,
            momentum: 0.0,
            epochs: 5,
            schedule: Schedule::Constant,
            ..TrainConfig::classifier()
        };
        let err = train(&spec, &two_class(8, 1), &[], &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }
}

//! Decoupled-weight-decay Adam, validation-plateau LR scheduling, and the
//! best-checkpoint training loop.

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetItem;
use crate::error::{Error, Result};
use crate::model::{batch_from_items, Batch, Model};
use crate::nn::tensor::{Parameter, Real};
use crate::nn::Phase;
use crate::rng::RngStream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scheduler_factor: 0.5,
            scheduler_patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || self.weight_decay < 0.0
            || self.batch_size == 0
            || self.epochs == 0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
            || !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0)
        {
            return Err(Error::Config("invalid training hyperparameters".into()));
        }
        if self.scheduler_patience < 1 {
            return Err(Error::Config("scheduler patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay:
/// `w <- w - lr*wd*w - lr*mhat/(sqrt(vhat) + eps)`.
pub struct AdamW<T: Real> {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[Parameter<T>], config: &TrainConfig) -> Self {
        AdamW {
            lr: config.lr,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            m: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            t: 0,
        }
    }

    /// Apply one update from the gradients currently stored on `params`,
    /// then clear them. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Parameter<T>]) -> Result<()> {
        self.t += 1;
        let b1 = T::cast(self.beta1);
        let b2 = T::cast(self.beta2);
        let one = T::one();
        let bc1 = T::cast(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let bc2 = T::cast(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = T::cast(self.lr);
        let wd = T::cast(self.lr * self.weight_decay);
        let eps = T::cast(self.eps);
        for (i, p) in params.iter().enumerate() {
            let Some(grad) = p.tensor.grad() else {
                continue;
            };
            for &g in &grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} at step {}",
                        p.name, self.t
                    )));
                }
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.tensor.with_data_mut(|w| {
                for j in 0..w.len() {
                    let g = grad[j];
                    m[j] = b1 * m[j] + (one - b1) * g;
                    v[j] = b2 * v[j] + (one - b2) * g * g;
                    let m_hat = m[j] * bc1;
                    let v_hat = v[j] * bc2;
                    w[j] = w[j] - wd * w[j] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

/// Multiply the learning rate by `factor` after `patience` consecutive
/// epochs without the validation loss improving by at least 1e-8.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub firings: usize,
    threshold: f64,
    best: f64,
    counter: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            firings: 0,
            threshold: 1e-8,
            best: f64::INFINITY,
            counter: 0,
        }
    }

    /// Call once per epoch with that epoch's validation loss.
    pub fn step(&mut self, validation_loss: f64) -> f64 {
        if validation_loss < self.best - self.threshold {
            self.best = validation_loss;
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter >= self.patience {
                self.lr *= self.factor;
                self.counter = 0;
                self.firings += 1;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub wall_seconds: f64,
    /// Epoch whose parameters the trained model carries.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr
            ));
        }
        out
    }
}

/// Mean loss and accuracy over a labeled item set, eval mode, no graph.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    items: &[DatasetItem],
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let n_modalities = model.config.modalities.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut pos = 0usize;
    while pos < items.len() {
        let end = (pos + batch_size).min(items.len());
        let slice: Vec<&DatasetItem> = items[pos..end].iter().collect();
        let batch: Batch<T> = batch_from_items(&slice, &labels[pos..end], n_modalities)?;
        let logits = model.infer(&batch)?;
        let loss = crate::nn::softmax_cross_entropy(&logits, &batch.targets)?;
        loss_sum += loss.item().f64() * (end - pos) as f64;
        correct += count_correct(&logits.to_vec(), &batch.targets, model.config.num_classes);
        pos = end;
    }
    Ok((loss_sum / items.len() as f64, correct as f64 / items.len() as f64))
}

/// Predicted class per row of a flattened `[B,C]` logit buffer.
pub fn argmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0usize;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn count_correct<T: Real>(logits: &[T], targets: &[usize], classes: usize) -> usize {
    argmax_rows(logits, classes)
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count()
}

/// Train with seeded epoch shuffles, AdamW, plateau scheduling, and
/// best-validation-loss checkpoint selection. `train_items` must already be
/// augmented (the CV harness owns augmentation); train/val must be disjoint.
pub fn train_model<T: Real>(
    model: &Model<T>,
    train_items: &[DatasetItem],
    train_labels: &[usize],
    val_items: &[DatasetItem],
    val_labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if train_items.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val_items.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let start = std::time::Instant::now();
    let n_modalities = model.config.modalities.len();
    let params = model.parameters();
    let mut optimizer = AdamW::new(&params, config);
    let mut scheduler =
        PlateauScheduler::new(config.lr, config.scheduler_factor, config.scheduler_patience);
    let stream = RngStream::new(config.seed).split("train");

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = model.snapshot();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr_epoch = scheduler.lr;
        optimizer.lr = lr_epoch;

        let mut order: Vec<usize> = (0..train_items.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream.split("shuffle").split_index(epoch as u64).rng());
        }

        let mut train_loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let slice: Vec<&DatasetItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let batch: Batch<T> = batch_from_items(&slice, &labels, n_modalities)?;
            let mut dropout_rng = stream
                .split("dropout")
                .split_index(epoch as u64)
                .split_index(batch_idx as u64)
                .rng();
            for p in &params {
                p.tensor.zero_grad();
            }
            let logits = model.forward(&batch, Phase::Train, Some(&mut dropout_rng))?;
            let loss = crate::nn::softmax_cross_entropy(&logits, &batch.targets)?;
            let loss_value = loss.item().f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss.backward();
            optimizer.step(&params)?;
            train_loss_sum += loss_value * chunk.len() as f64;
        }
        let train_loss = train_loss_sum / train_items.len() as f64;

        let (val_loss, val_acc) =
            evaluate_model(model, val_items, val_labels, config.batch_size)?;
        scheduler.step(val_loss);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_snapshot = model.snapshot();
        }
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr: lr_epoch,
        });
    }

    model.restore(&best_snapshot);
    Ok(TrainLog {
        epochs,
        wall_seconds: start.elapsed().as_secs_f64(),
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, Modality, SynthSpec};
    use crate::model::{build_model, ModalityConfig, NetConfig};
    use crate::nn::tensor::Tensor;

    #[test]
    fn adamw_hand_example() {
        let config = TrainConfig::default();
        let p = Parameter::new("w", Tensor::from_vec(vec![1], vec![1.0f64]).requires_grad());
        let mut opt = AdamW::new(std::slice::from_ref(&p), &config);
        opt.weight_decay = 0.0;

        // inject g = 2 directly
        let loss = crate::nn::ops::affine(&p.tensor, 2.0, 0.0);
        loss.backward();
        opt.step(std::slice::from_ref(&p)).unwrap();
        let w = p.tensor.to_vec()[0];
        assert!((w - 0.999).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn adamw_decoupled_decay() {
        let config = TrainConfig::default();
        let p = Parameter::new("w", Tensor::from_vec(vec![1], vec![1.0f64]).requires_grad());
        let mut opt = AdamW::new(std::slice::from_ref(&p), &config);
        opt.weight_decay = 1e-4;
        let loss = crate::nn::ops::affine(&p.tensor, 2.0, 0.0);
        loss.backward();
        opt.step(std::slice::from_ref(&p)).unwrap();
        let w = p.tensor.to_vec()[0];
        assert!((w - 0.9989999).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let config = TrainConfig::default();
        let p = Parameter::new("w", Tensor::from_vec(vec![2], vec![3.0f64, -4.0]).requires_grad());
        let mut opt = AdamW::new(std::slice::from_ref(&p), &config);
        opt.weight_decay = 0.0;
        for _ in 0..5 {
            let loss = crate::nn::ops::affine(&p.tensor, 0.0, 1.0);
            loss.backward();
            opt.step(std::slice::from_ref(&p)).unwrap();
        }
        assert_eq!(p.tensor.to_vec(), vec![3.0, -4.0]);
    }

    #[test]
    fn nonfinite_gradient_aborts() {
        let config = TrainConfig::default();
        let p = Parameter::new("w", Tensor::from_vec(vec![1], vec![1.0f64]).requires_grad());
        let mut opt = AdamW::new(std::slice::from_ref(&p), &config);
        let loss = crate::nn::ops::affine(&p.tensor, f64::INFINITY, 0.0);
        loss.backward();
        assert!(matches!(
            opt.step(std::slice::from_ref(&p)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn scheduler_halves_after_patience() {
        let mut s = PlateauScheduler::new(0.001, 0.5, 15);
        s.step(1.0); // establishes the best
        for _ in 0..14 {
            assert_eq!(s.step(1.0), 0.001);
        }
        assert_eq!(s.step(1.0), 0.0005);
    }

    #[test]
    fn improvement_resets_counter() {
        let mut s = PlateauScheduler::new(0.001, 0.5, 15);
        s.step(1.0);
        for _ in 0..13 {
            s.step(1.0);
        }
        s.step(0.5); // improvement at the 14th stagnant epoch
        assert_eq!(s.lr, 0.001);
        for _ in 0..14 {
            s.step(0.5);
        }
        assert_eq!(s.step(0.5), 0.0005);
    }

    #[test]
    fn two_plateaus_quarter_the_rate() {
        let mut s = PlateauScheduler::new(0.001, 0.5, 15);
        s.step(1.0);
        for _ in 0..30 {
            s.step(1.0);
        }
        assert!((s.lr - 0.00025).abs() < 1e-12);
        assert_eq!(s.firings, 2);
        assert!((s.lr - 0.001 * 0.5f64.powi(s.firings as i32)).abs() < 1e-15);
    }

    #[test]
    fn tiny_improvement_below_threshold_counts_as_stagnation() {
        let mut s = PlateauScheduler::new(0.001, 0.5, 2);
        s.step(1.0);
        s.step(1.0 - 1e-12);
        s.step(1.0 - 2e-12);
        assert_eq!(s.lr, 0.0005);
    }

    fn overfit_setup() -> (NetConfig, SynthSpec) {
        let mut mc = ModalityConfig::tiny(Modality::Eeg);
        mc.feature_maps = 8;
        mc.cbam_reduction = 4;
        mc.resnet_blocks = 3;
        mc.gru_hidden = 8;
        let mut net = NetConfig::unimodal(mc, 2);
        net.dropout = 0.0;
        let spec = SynthSpec {
            subjects: 2,
            trials_per_subject: 1,
            classes: 2,
            modalities: vec![Modality::Eeg],
            windows_per_trial: 16,
            sample_rates: Some(vec![32]),
        };
        (net, spec)
    }

    #[test]
    fn overfits_a_32_window_probe() {
        let (net, spec) = overfit_setup();
        let ds = generate_synthetic(&spec, 21).unwrap();
        assert_eq!(ds.len(), 32);
        let items: Vec<DatasetItem> = ds.items().to_vec();
        let labels: Vec<usize> = (0..ds.len()).map(|i| ds.label(i)).collect();
        let model = build_model::<f32>(&net, 1).unwrap();
        let config = TrainConfig {
            epochs: 200,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        // train == val probe: capacity check only
        let log = train_model(&model, &items, &labels, &items, &labels, &config).unwrap();
        let min_train = log.epochs.iter().map(|e| e.train_loss).fold(f64::MAX, f64::min);
        assert!(min_train < 0.05, "best train loss {min_train}");
    }

    #[test]
    fn training_is_deterministic_and_returns_best_checkpoint() {
        let (net, spec) = overfit_setup();
        let ds = generate_synthetic(&spec, 22).unwrap();
        let items: Vec<DatasetItem> = ds.items().to_vec();
        let labels: Vec<usize> = (0..ds.len()).map(|i| ds.label(i)).collect();
        let (train_items, val_items) = items.split_at(24);
        let (train_labels, val_labels) = labels.split_at(24);
        let config = TrainConfig {
            epochs: 8,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        };

        let model_a = build_model::<f32>(&net, 3).unwrap();
        let log_a =
            train_model(&model_a, train_items, train_labels, val_items, val_labels, &config)
                .unwrap();
        let model_b = build_model::<f32>(&net, 3).unwrap();
        let log_b =
            train_model(&model_b, train_items, train_labels, val_items, val_labels, &config)
                .unwrap();
        assert_eq!(log_a.epochs, log_b.epochs);
        assert_eq!(
            crate::nn::checkpoint::encode_state(&model_a.state()),
            crate::nn::checkpoint::encode_state(&model_b.state())
        );

        // returned parameters reproduce the best epoch's validation loss
        let best = log_a
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(log_a.epochs[log_a.best_epoch].val_loss, best);
        let (val_loss, _) = evaluate_model(&model_a, val_items, val_labels, 8).unwrap();
        assert!((val_loss - best).abs() < 1e-5, "restored {val_loss} vs best {best}");
    }

    #[test]
    fn lr_sequence_is_non_increasing() {
        let (net, spec) = overfit_setup();
        let ds = generate_synthetic(&spec, 23).unwrap();
        let items: Vec<DatasetItem> = ds.items().to_vec();
        let labels: Vec<usize> = (0..ds.len()).map(|i| ds.label(i)).collect();
        let model = build_model::<f32>(&net, 4).unwrap();
        let config = TrainConfig {
            epochs: 6,
            batch_size: 16,
            scheduler_patience: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let log = train_model(&model, &items, &labels, &items, &labels, &config).unwrap();
        for pair in log.epochs.windows(2) {
            assert!(pair[1].lr <= pair[0].lr);
        }
    }

    #[test]
    fn empty_train_set_is_config_error() {
        let (net, spec) = overfit_setup();
        let ds = generate_synthetic(&spec, 24).unwrap();
        let items: Vec<DatasetItem> = ds.items().to_vec();
        let labels: Vec<usize> = (0..ds.len()).map(|i| ds.label(i)).collect();
        let model = build_model::<f32>(&net, 5).unwrap();
        let config = TrainConfig::default();
        assert!(matches!(
            train_model(&model, &[], &[], &items, &labels, &config),
            Err(Error::Config(_))
        ));
    }
}

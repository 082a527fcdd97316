//! Metrics and the cross-validation harness.

use serde::{Deserialize, Serialize};

use crate::augment::{augment_training_fold, AugmentPolicy};
use crate::dataset::{DatasetItem, FoldPlan, LabeledDataset, Protocol};
use crate::error::{Error, Result};
use crate::model::{batch_from_items, build_model, NetConfig};
use crate::nn::tensor::Real;
use crate::rng::RngStream;
use crate::train::{argmax_rows, train_model, TrainConfig, TrainLog};

/// Row = truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn add(&mut self, truth: usize, prediction: usize) {
        self.counts[truth][prediction] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }
}

/// Accuracy, macro-F1 (per-class F1 set to 0 when precision+recall is 0),
/// and the confusion matrix.
pub fn compute_metrics(
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
) -> Result<(f64, f64, ConfusionMatrix)> {
    if predictions.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Validation(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::Validation(format!(
                "label out of range: prediction {p}, truth {t}, classes {classes}"
            )));
        }
        confusion.add(t, p);
    }
    let accuracy = confusion.trace() as f64 / confusion.total() as f64;
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = confusion.counts[c][c] as f64;
        let fp = (0..classes)
            .filter(|&t| t != c)
            .map(|t| confusion.counts[t][c])
            .sum::<u64>() as f64;
        let fn_ = (0..classes)
            .filter(|&p| p != c)
            .map(|p| confusion.counts[c][p])
            .sum::<u64>() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        } else {
            log::debug!("class {c}: precision+recall = 0, per-class F1 set to 0");
        }
    }
    Ok((accuracy, f1_sum / classes as f64, confusion))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subject: Option<u32>,
    pub failed: bool,
    pub error: Option<String>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_train_original: usize,
    pub n_train_augmented: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub protocol: String,
    pub label_scheme: String,
    pub modalities: Vec<String>,
    pub seed: u64,
    /// F1 averaging convention used throughout.
    pub f1_averaging: String,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
    pub any_fold_failed: bool,
    pub config_echo: serde_json::Value,
}

impl CvReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One summary row per report: protocol, modalities, accuracy, F1.
    pub fn summary_csv(&self) -> String {
        format!(
            "protocol,modalities,label_scheme,mean_accuracy,std_accuracy,mean_macro_f1,std_macro_f1,folds,failed_folds\n{},{},{},{},{},{},{},{},{}\n",
            self.protocol,
            self.modalities.join("+"),
            self.label_scheme,
            self.mean_accuracy,
            self.std_accuracy,
            self.mean_macro_f1,
            self.std_macro_f1,
            self.folds.len(),
            self.folds.iter().filter(|f| f.failed).count(),
        )
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The result of training and scoring one fold.
struct FoldOutcome {
    report: FoldReport,
    train_log: Option<TrainLog>,
}

/// A finished cross-validation run: the report plus per-fold training logs
/// (absent for failed folds).
pub struct CvOutcome {
    pub report: CvReport,
    pub train_logs: Vec<Option<TrainLog>>,
}

#[allow(clippy::too_many_arguments)]
fn run_fold<T: Real>(
    ds: &LabeledDataset,
    plan: &FoldPlan,
    fold: usize,
    net_config: &NetConfig,
    train_config: &TrainConfig,
    augment: Option<&AugmentPolicy>,
    seed: u64,
) -> Result<(FoldReport, TrainLog)> {
    let test_idx = plan.test_indices(fold);
    let pool_idx = plan.train_indices(fold);
    // fold integrity: test and train pools are disjoint and cover the dataset
    {
        use std::collections::HashSet;
        let test: HashSet<usize> = test_idx.iter().copied().collect();
        let pool: HashSet<usize> = pool_idx.iter().copied().collect();
        assert!(test.is_disjoint(&pool), "fold {fold}: test/train overlap");
        assert_eq!(test.len() + pool.len(), ds.len(), "fold {fold}: not a partition");
    }
    if test_idx.is_empty() || pool_idx.is_empty() {
        return Err(Error::Config(format!("fold {fold} has an empty partition")));
    }

    // carve the inner validation split (10%, seeded) from the training pool
    let fold_stream = RngStream::new(seed).split("fold").split_index(fold as u64);
    let mut carve = pool_idx.clone();
    {
        use rand::seq::SliceRandom;
        carve.shuffle(&mut fold_stream.split("val_carve").rng());
    }
    let n_val = ((carve.len() as f64 * 0.1).round() as usize).clamp(1, carve.len() - 1);
    let (val_idx, train_idx) = carve.split_at(n_val);

    if plan.protocol == Protocol::Loso {
        use std::collections::HashSet;
        let test_subjects: HashSet<u32> =
            test_idx.iter().map(|&i| ds.item(i).subject_id()).collect();
        assert_eq!(test_subjects.len(), 1, "fold {fold}: LOSO test set must be one subject");
        for &i in train_idx.iter().chain(val_idx) {
            assert!(
                !test_subjects.contains(&ds.item(i).subject_id()),
                "fold {fold}: test subject leaked into training"
            );
        }
    }

    let train_items: Vec<DatasetItem> = train_idx.iter().map(|&i| ds.item(i).clone()).collect();
    let train_labels_orig: Vec<usize> = train_idx.iter().map(|&i| ds.label(i)).collect();
    let val_items: Vec<DatasetItem> = val_idx.iter().map(|&i| ds.item(i).clone()).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| ds.label(i)).collect();

    // augmentation touches the training partition only
    let (train_items, train_labels) = match augment {
        Some(policy) => {
            let augmented = augment_training_fold(&train_items, policy, &fold_stream)?;
            use std::collections::HashSet;
            let train_keys: HashSet<(u32, u32, u32)> =
                train_items.iter().map(|it| it.key()).collect();
            let labels: Vec<usize> = augmented
                .iter()
                .map(|it| {
                    assert!(
                        train_keys.contains(&it.key()),
                        "fold {fold}: augmented window outside the training partition"
                    );
                    crate::dataset::map_label(it.rating(), ds.label_scheme)
                })
                .collect::<Result<_>>()?;
            (augmented, labels)
        }
        None => (train_items, train_labels_orig.clone()),
    };

    let model_seed = fold_stream.split("model").rng_u64();
    let model = build_model::<T>(net_config, model_seed)?;
    let fold_train_config = TrainConfig {
        seed: fold_stream.split("train").rng_u64(),
        ..train_config.clone()
    };
    let train_log = train_model(
        &model,
        &train_items,
        &train_labels,
        &val_items,
        &val_labels,
        &fold_train_config,
    )?;

    // score the held-out fold in eval mode
    let test_items: Vec<&DatasetItem> = test_idx.iter().map(|&i| ds.item(i)).collect();
    let test_labels: Vec<usize> = test_idx.iter().map(|&i| ds.label(i)).collect();
    let mut predictions = Vec::with_capacity(test_items.len());
    let mut pos = 0usize;
    while pos < test_items.len() {
        let end = (pos + train_config.batch_size).min(test_items.len());
        let batch = batch_from_items::<T>(
            &test_items[pos..end],
            &test_labels[pos..end],
            net_config.modalities.len(),
        )?;
        let logits = model.infer(&batch)?;
        predictions.extend(argmax_rows(&logits.to_vec(), net_config.num_classes));
        pos = end;
    }
    let (accuracy, macro_f1, confusion) =
        compute_metrics(&predictions, &test_labels, net_config.num_classes)?;

    Ok((
        FoldReport {
            fold,
            test_subject: plan.fold_subjects[fold],
            failed: false,
            error: None,
            accuracy,
            macro_f1,
            confusion: confusion.counts,
            n_train_original: train_idx.len(),
            n_train_augmented: train_items.len(),
            n_val: val_items.len(),
            n_test: test_idx.len(),
            best_epoch: train_log.best_epoch,
        },
        train_log,
    ))
}

/// Train and evaluate every fold of the plan. Fold failures are isolated:
/// the fold is marked failed and the run continues. `jobs > 1` trains folds
/// on worker threads; results are independent of scheduling because every
/// random stream is derived from `(seed, fold)`.
pub fn run_cross_validation<T: Real>(
    ds: &LabeledDataset,
    plan: &FoldPlan,
    net_config: &NetConfig,
    train_config: &TrainConfig,
    augment: Option<&AugmentPolicy>,
    jobs: usize,
) -> Result<CvOutcome> {
    net_config.validate()?;
    train_config.validate()?;
    if let Some(policy) = augment {
        policy.validate()?;
    }
    if plan.assignments.len() != ds.len() {
        return Err(Error::Config(
            "fold plan was built for a different dataset".into(),
        ));
    }
    let seed = plan.seed;
    let n_folds = plan.n_folds;
    let jobs = jobs.max(1).min(n_folds);

    let run_one = |fold: usize| -> FoldOutcome {
        match run_fold::<T>(ds, plan, fold, net_config, train_config, augment, seed) {
            Ok((report, log)) => FoldOutcome {
                report,
                train_log: Some(log),
            },
            Err(e) => FoldOutcome {
                report: FoldReport {
                    fold,
                    test_subject: plan.fold_subjects[fold],
                    failed: true,
                    error: Some(e.to_string()),
                    accuracy: 0.0,
                    macro_f1: 0.0,
                    confusion: Vec::new(),
                    n_train_original: 0,
                    n_train_augmented: 0,
                    n_val: 0,
                    n_test: 0,
                    best_epoch: 0,
                },
                train_log: None,
            },
        }
    };

    let mut outcomes: Vec<Option<FoldOutcome>> = (0..n_folds).map(|_| None).collect();
    if jobs == 1 {
        for (fold, slot) in outcomes.iter_mut().enumerate() {
            *slot = Some(run_one(fold));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(Vec::<(usize, FoldOutcome)>::new());
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let fold = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if fold >= n_folds {
                        break;
                    }
                    let outcome = run_one(fold);
                    results.lock().expect("no poisoned locks").push((fold, outcome));
                });
            }
        });
        for (fold, outcome) in results.into_inner().expect("no poisoned locks") {
            outcomes[fold] = Some(outcome);
        }
    }
    let mut outcomes: Vec<FoldOutcome> = outcomes
        .into_iter()
        .map(|o| o.expect("every fold ran"))
        .collect();

    let train_logs: Vec<Option<TrainLog>> =
        outcomes.iter_mut().map(|o| o.train_log.take()).collect();
    let folds: Vec<FoldReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let ok: Vec<&FoldReport> = folds.iter().filter(|f| !f.failed).collect();
    let (mean_accuracy, std_accuracy) =
        mean_std(&ok.iter().map(|f| f.accuracy).collect::<Vec<_>>());
    let (mean_macro_f1, std_macro_f1) =
        mean_std(&ok.iter().map(|f| f.macro_f1).collect::<Vec<_>>());
    let any_fold_failed = folds.iter().any(|f| f.failed);
    if any_fold_failed {
        log::warn!(
            "{} of {} folds failed",
            folds.iter().filter(|f| f.failed).count(),
            folds.len()
        );
    }

    Ok(CvReport {
        protocol: plan.protocol.to_string(),
        label_scheme: ds.label_scheme.to_string(),
        modalities: ds.modalities.iter().map(|m| m.to_string()).collect(),
        seed,
        f1_averaging: "macro".into(),
        folds,
        mean_accuracy,
        std_accuracy,
        mean_macro_f1,
        std_macro_f1,
        any_fold_failed,
        config_echo: serde_json::json!({
            "net": net_config,
            "train": train_config,
            "augment": augment,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, make_folds, Modality, SynthSpec};
    use crate::model::ModalityConfig;

    #[test]
    fn perfect_predictions() {
        let (acc, f1, confusion) = compute_metrics(&[0, 1, 0, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(f1, 1.0);
        assert_eq!(confusion.trace(), 4);
    }

    #[test]
    fn degenerate_all_one_class_predictions() {
        // 50/50 truths, everything predicted class 0
        let truths: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let preds = vec![0usize; 100];
        let (acc, f1, confusion) = compute_metrics(&preds, &truths, 2).unwrap();
        assert_eq!(acc, 0.5);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-4, "macro F1 {f1}");
        assert_eq!(confusion.row_sum(0), 50);
        assert_eq!(confusion.row_sum(1), 50);
    }

    #[test]
    fn single_class_truths_with_perfect_predictions() {
        let truths = vec![0usize; 10];
        let preds = vec![0usize; 10];
        let (acc, f1, _) = compute_metrics(&preds, &truths, 2).unwrap();
        assert_eq!(acc, 1.0);
        assert!((f1 - 0.5).abs() < 1e-12, "only the present class scores: {f1}");
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(
            compute_metrics(&[], &[], 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn confusion_rows_match_truth_counts() {
        let truths = vec![0, 0, 1, 2, 2, 2];
        let preds = vec![0, 1, 1, 2, 0, 2];
        let (acc, _, confusion) = compute_metrics(&preds, &truths, 3).unwrap();
        assert_eq!(confusion.row_sum(0), 2);
        assert_eq!(confusion.row_sum(1), 1);
        assert_eq!(confusion.row_sum(2), 3);
        assert_eq!(acc, confusion.trace() as f64 / confusion.total() as f64);
    }

    fn smoke_setup() -> (LabeledDataset, NetConfig, TrainConfig) {
        let spec = SynthSpec {
            subjects: 3,
            trials_per_subject: 1,
            classes: 2,
            modalities: vec![Modality::Eeg],
            windows_per_trial: 12,
            sample_rates: Some(vec![32]),
        };
        let ds = generate_synthetic(&spec, 40).unwrap();
        let mut mc = ModalityConfig::tiny(Modality::Eeg);
        mc.feature_maps = 8;
        mc.cbam_reduction = 4;
        mc.resnet_blocks = 3;
        mc.gru_hidden = 8;
        let net = NetConfig::unimodal(mc, 2);
        let train = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        (ds, net, train)
    }

    #[test]
    fn loso_cv_has_subject_pure_folds_and_is_deterministic() {
        let (ds, net, train) = smoke_setup();
        let plan = make_folds(&ds, Protocol::Loso, 11).unwrap();
        let policy = AugmentPolicy::default();
        let report =
            run_cross_validation::<f32>(&ds, &plan, &net, &train, Some(&policy), 1).unwrap();
        assert_eq!(report.folds.len(), 3);
        assert!(!report.any_fold_failed);
        let subjects: Vec<Option<u32>> = report.folds.iter().map(|f| f.test_subject).collect();
        assert_eq!(subjects, vec![Some(1), Some(2), Some(3)]);
        for fold in &report.folds {
            assert_eq!(fold.n_train_augmented, 2 * fold.n_train_original);
            assert!(fold.n_test > 0);
        }
        // mean is reproducible from the stored per-fold values
        let mean = report.folds.iter().map(|f| f.accuracy).sum::<f64>()
            / report.folds.len() as f64;
        assert!((mean - report.mean_accuracy).abs() < 1e-12);

        let report2 =
            run_cross_validation::<f32>(&ds, &plan, &net, &train, Some(&policy), 1).unwrap();
        assert_eq!(report.to_json(), report2.to_json());
    }

    #[test]
    fn parallel_jobs_reproduce_serial_results() {
        let (ds, net, train) = smoke_setup();
        let plan = make_folds(&ds, Protocol::KFold(3), 5).unwrap();
        let serial = run_cross_validation::<f32>(&ds, &plan, &net, &train, None, 1).unwrap();
        let parallel = run_cross_validation::<f32>(&ds, &plan, &net, &train, None, 3).unwrap();
        assert_eq!(serial.to_json(), parallel.to_json());
    }

    #[test]
    fn summary_csv_has_one_data_row() {
        let (ds, net, train) = smoke_setup();
        let plan = make_folds(&ds, Protocol::KFold(3), 5).unwrap();
        let report = run_cross_validation::<f32>(&ds, &plan, &net, &train, None, 1).unwrap();
        let csv = report.summary_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("protocol,"));
        assert!(csv.contains("kfold3,eeg,binary,"));
    }
}

//! Training loops: noisy-label pre-training, per-fold fine-tuning with
//! subject-held-out early stopping and best-weights restoration, and
//! eval-mode scoring.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentConfig;
use crate::batch::{iterate_batches, mix_seed, BatchSettings, ImageStore};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::metrics::ScoreMatrix;
use crate::network::Network;
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::splits::FoldAssignment;

const TAG_PRETRAIN_SPLIT: u64 = 0x505245;
const TAG_VAL_SUBJECTS: u64 = 0x56414c;
const TAG_DROPOUT: u64 = 0x44524f;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: Option<usize>,
    /// Relative train-loss improvement over a 5-epoch window below which
    /// training counts as converged.
    pub convergence_tol: f64,
    /// Fraction held out for monitoring: of images (pre-training) or of
    /// train-split subjects (fine-tuning).
    pub val_fraction: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    /// Pre-training stage defaults: Adam at lr 0.005, batch 32, up to 500
    /// epochs, 95/5 train/test split.
    pub fn pretrain_defaults() -> Self {
        TrainConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 500,
            early_stop_patience: None,
            convergence_tol: 1e-4,
            val_fraction: 0.05,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    /// Fine-tuning stage defaults: Adam at lr 0.0001, early stopping with
    /// patience 10 on a subject-held-out validation slice.
    pub fn finetune_defaults() -> Self {
        TrainConfig {
            lr: 1e-4,
            early_stop_patience: Some(10),
            ..TrainConfig::pretrain_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if let Some(p) = self.early_stop_patience {
            if p == 0 {
                return Err(Error::config("early_stop_patience must be >= 1 when set"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction <= 0.0 {
            return Err(Error::config(format!("val_fraction {} not in (0,1)", self.val_fraction)));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::config("convergence_tol must be positive"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxEpochs,
    EarlyStopped,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopped => "early_stopped",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub stop_reason: StopReason,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub train_subjects: BTreeSet<String>,
    pub val_subjects: BTreeSet<String>,
}

impl TrainHistory {
    /// Line-delimited log: `epoch,train_loss,val_loss,seconds` plus a final
    /// stop line.
    pub fn render_log(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{},{:.3}\n",
                e.epoch,
                e.train_loss,
                e.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                e.seconds
            ));
        }
        out.push_str(&format!(
            "stop_reason={} best_epoch={}\n",
            self.stop_reason.as_str(),
            self.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into())
        ));
        out
    }
}

fn subjects_of(manifest: &Manifest) -> BTreeSet<String> {
    manifest.records.iter().map(|r| r.subject_id.clone()).collect()
}

/// One pass over the training split; returns the mean train loss.
fn train_epoch<T: Scalar>(
    net: &Network<T>,
    adam: &mut AdamState<T>,
    data: &Manifest,
    store: &ImageStore<T>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let settings = BatchSettings {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        training: true,
        augment: Some(cfg.augment),
    };
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_DROPOUT, epoch as u64]));
    let params = net.parameters();
    let mut loss_sum = 0.0f64;
    let mut n_seen = 0usize;
    for batch in iterate_batches(data, store, &settings, epoch as u64)? {
        let batch = batch?;
        net.zero_grad();
        let preds = net.forward(&batch.images, true, &mut dropout_rng)?;
        let loss = preds.bce_loss(&batch.labels)?;
        loss.backward()?;
        adam.step(&params)?;
        let b = batch.indices.len();
        loss_sum += loss.item()?.to_f64_lossy() * b as f64;
        n_seen += b;
    }
    Ok(loss_sum / n_seen.max(1) as f64)
}

/// Mean eval-mode BCE over a manifest.
pub fn eval_loss<T: Scalar>(
    net: &Network<T>,
    data: &Manifest,
    store: &ImageStore<T>,
    batch_size: usize,
) -> Result<f64> {
    let settings = BatchSettings { batch_size, seed: 0, training: false, augment: None };
    let mut loss_sum = 0.0f64;
    let mut n_seen = 0usize;
    for batch in iterate_batches(data, store, &settings, 0)? {
        let batch = batch?;
        let preds = net.infer(&batch.images)?;
        let loss = preds.bce_loss(&batch.labels)?;
        let b = batch.indices.len();
        loss_sum += loss.item()?.to_f64_lossy() * b as f64;
        n_seen += b;
    }
    Ok(loss_sum / n_seen.max(1) as f64)
}

/// Relative improvement of the train loss over a 5-epoch window.
pub fn converged(losses: &[f64], tol: f64) -> bool {
    const WINDOW: usize = 5;
    if losses.len() <= WINDOW {
        return false;
    }
    let old = losses[losses.len() - 1 - WINDOW];
    let new = losses[losses.len() - 1];
    (old - new) / old.abs().max(1e-12) < tol
}

/// Early-stopping policy: stop after `patience` consecutive epochs without
/// a strict improvement of the monitored validation loss.
pub struct EarlyStopper {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

/// What one epoch's observation means for the loop.
pub struct StopDecision {
    /// The monitored loss strictly improved; snapshot the weights.
    pub improved: bool,
    /// Patience is exhausted; stop after this epoch.
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision { improved: true, stop: false }
        } else {
            self.stale += 1;
            StopDecision {
                improved: false,
                stop: self.patience.is_some_and(|p| self.stale >= p),
            }
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Noisy-label pre-training: an internal train/test split of `data` (95/5 at
/// the default `val_fraction`), Adam/BCE with online augmentation, stopping
/// at convergence or `max_epochs`. The network is updated in place.
pub fn pretrain<T: Scalar>(
    net: &Network<T>,
    data: &Manifest,
    store: &ImageStore<T>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.label_width() != net.num_outputs() {
        return Err(Error::config(format!(
            "manifest has {} label columns, network emits {}",
            data.label_width(),
            net.num_outputs()
        )));
    }
    if data.is_empty() {
        return Err(Error::config("pre-training manifest is empty"));
    }

    // Image-levelholdout split.
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_PRETRAIN_SPLIT]));
    order.shuffle(&mut rng);
    let n_train = ((data.len() as f64 * (1.0 - cfg.val_fraction)).round().max(1.0) as usize).min(data.len());
    let train_data = data.subset(&order[..n_train]);
    let val_data = data.subset(&order[n_train..]);

    let params = net.parameters();
    let mut adam = AdamState::new(
        &params,
        T::from_f64_lossy(cfg.lr),
        T::from_f64_lossy(cfg.beta1),
        T::from_f64_lossy(cfg.beta2),
        T::from_f64_lossy(cfg.eps),
    )?;

    let mut history = TrainHistory {
        epochs: Vec::new(),
        stop_reason: StopReason::MaxEpochs,
        best_epoch: None,
        best_val_loss: None,
        train_subjects: subjects_of(&train_data),
        val_subjects: subjects_of(&val_data),
    };
    let mut train_losses = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let train_loss = train_epoch(net, &mut adam, &train_data, store, cfg, epoch)?;
        let val_loss = if val_data.is_empty() {
            None
        } else {
            Some(eval_loss(net, &val_data, store, cfg.batch_size)?)
        };
        train_losses.push(train_loss);
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if converged(&train_losses, cfg.convergence_tol) {
            history.stop_reason = StopReason::Converged;
            break;
        }
    }
    Ok(history)
}

/// One fold's fine-tuning outcome.
pub struct FoldRun<T: Scalar> {
    pub fold: usize,
    pub network: Network<T>,
    pub history: TrainHistory,
    pub test_data: Manifest,
}

/// Subject-independent fine-tuning over every fold of the assignment.
pub fn finetune<T: Scalar>(
    pretrained: &Network<T>,
    data: &Manifest,
    folds: &FoldAssignment,
    store: &ImageStore<T>,
    cfg: &TrainConfig,
) -> Result<Vec<FoldRun<T>>> {
    let all: Vec<usize> = (0..folds.k).collect();
    finetune_subset(pretrained, data, folds, store, cfg, &all)
}

/// Subject-independent fine-tuning: for each requested fold, train on that
/// fold's train split (with a subject-held-out validation slice for early
/// stopping), restore the best-validation weights, and carry the untouched
/// test split along for evaluation. Replaces the head when the label width
/// differs from the pre-trained network's output width.
pub fn finetune_subset<T: Scalar>(
    pretrained: &Network<T>,
    data: &Manifest,
    folds: &FoldAssignment,
    store: &ImageStore<T>,
    cfg: &TrainConfig,
    fold_ids: &[usize],
) -> Result<Vec<FoldRun<T>>> {
    cfg.validate()?;
    for subject in data.subjects() {
        if !folds.fold_of_subject.contains_key(&subject) {
            return Err(Error::config(format!("subject {subject} missing from fold assignment")));
        }
    }
    if let Some(&bad) = fold_ids.iter().find(|&&f| f >= folds.k) {
        return Err(Error::config(format!("fold {bad} out of range for k={}", folds.k)));
    }

    let mut runs = Vec::with_capacity(fold_ids.len());
    for &fold in fold_ids {
        // Width mismatch means the label set changed: swap in a fresh head.
        let net = if pretrained.num_outputs() == data.label_width() {
            pretrained.clone_detached()
        } else {
            pretrained.replace_head(data.label_width(), mix_seed(&[cfg.seed, fold as u64]))?
        };

        let train_all = folds.train_split(data, fold);
        let test_data = folds.test_split(data, fold);

        // Hold out whole subjects from the train split for early stopping;
        // the test fold is never consulted during training.
        let mut train_subjects = train_all.subjects();
        let n_val = ((train_subjects.len() as f64 * cfg.val_fraction).ceil() as usize)
            .clamp(1, train_subjects.len().saturating_sub(1).max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_VAL_SUBJECTS, fold as u64]));
        train_subjects.shuffle(&mut rng);
        let val_subjects: BTreeSet<String> = train_subjects[..n_val].iter().cloned().collect();
        let val_data = train_all.filtered(|r| val_subjects.contains(&r.subject_id));
        let train_data = train_all.filtered(|r| !val_subjects.contains(&r.subject_id));
        if train_data.is_empty() || val_data.is_empty() {
            return Err(Error::config(format!(
                "fold {fold}: train/validation split is empty (train {} rows, val {} rows)",
                train_data.len(),
                val_data.len()
            )));
        }

        let params = net.parameters();
        let mut adam = AdamState::new(
            &params,
            T::from_f64_lossy(cfg.lr),
            T::from_f64_lossy(cfg.beta1),
            T::from_f64_lossy(cfg.beta2),
            T::from_f64_lossy(cfg.eps),
        )?;

        let mut history = TrainHistory {
            epochs: Vec::new(),
            stop_reason: StopReason::MaxEpochs,
            best_epoch: None,
            best_val_loss: None,
            train_subjects: subjects_of(&train_data),
            val_subjects: subjects_of(&val_data),
        };
        let mut best_snapshot = net.snapshot();
        let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
        let mut train_losses = Vec::new();

        for epoch in 0..cfg.max_epochs {
            let start = Instant::now();
            let train_loss = train_epoch(&net, &mut adam, &train_data, store, cfg, epoch)?;
            let val_loss = eval_loss(&net, &val_data, store, cfg.batch_size)?;
            train_losses.push(train_loss);
            history.epochs.push(EpochStats {
                epoch,
                train_loss,
                val_loss: Some(val_loss),
                seconds: start.elapsed().as_secs_f64(),
            });

            let decision = stopper.observe(epoch, val_loss);
            if decision.improved {
                best_snapshot = net.snapshot();
            }
            if decision.stop {
                history.stop_reason = StopReason::EarlyStopped;
                break;
            }
            if converged(&train_losses, cfg.convergence_tol) {
                history.stop_reason = StopReason::Converged;
                break;
            }
        }

        net.restore(&best_snapshot)?;
        let (best_epoch, best_val) = stopper.best();
        history.best_epoch = Some(best_epoch);
        history.best_val_loss = Some(best_val);
        runs.push(FoldRun { fold, network: net, history, test_data });
    }
    Ok(runs)
}

/// Eval-mode scoring of every test image, aligned with binarized ground
/// truth and subject ids.
pub fn evaluate_model<T: Scalar>(
    net: &Network<T>,
    test_data: &Manifest,
    store: &ImageStore<T>,
    batch_size: usize,
) -> Result<ScoreMatrix> {
    if test_data.label_width() != net.num_outputs() {
        return Err(Error::config(format!(
            "test manifest has {} label columns, network emits {}",
            test_data.label_width(),
            net.num_outputs()
        )));
    }
    let settings = BatchSettings { batch_size, seed: 0, training: false, augment: None };
    let width = test_data.label_width();
    let mut scores = Vec::with_capacity(test_data.len() * width);
    let mut labels = Vec::with_capacity(test_data.len() * width);
    let mut subjects = Vec::with_capacity(test_data.len());
    for batch in iterate_batches(test_data, store, &settings, 0)? {
        let batch = batch?;
        let preds = net.infer(&batch.images)?;
        preds.with_data(|d| scores.extend(d.iter().map(|v| v.to_f64_lossy())));
        batch.labels.with_data(|d| labels.extend(d.iter().map(|v| v.to_f64_lossy() as u8)));
        subjects.extend(batch.indices.iter().map(|&i| test_data.records[i].subject_id.clone()));
    }
    Ok(ScoreMatrix {
        au_names: test_data.au_columns.clone(),
        scores,
        labels,
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strictly_improving_never_stops() {
        let mut stopper = EarlyStopper::new(Some(10));
        for epoch in 0..50 {
            let d = stopper.observe(epoch, 1.0 / (epoch + 1) as f64);
            assert!(d.improved);
            assert!(!d.stop, "stopped at epoch {epoch}");
        }
        assert_eq!(stopper.best().0, 49);
    }

    #[test]
    fn constant_loss_stops_at_exact_patience_exhaustion() {
        let mut stopper = EarlyStopper::new(Some(10));
        assert!(stopper.observe(0, 0.7).improved);
        for epoch in 1..=9 {
            let d = stopper.observe(epoch, 0.7);
            assert!(!d.improved);
            assert!(!d.stop, "stopped early at epoch {epoch}");
        }
        let d = stopper.observe(10, 0.7);
        assert!(d.stop, "patience of 10 must exhaust at the 10th stale epoch");
        assert_eq!(stopper.best(), (0, 0.7));
    }

    #[test]
    fn no_patience_never_stops() {
        let mut stopper = EarlyStopper::new(None);
        for epoch in 0..100 {
            assert!(!stopper.observe(epoch, 1.0).stop);
        }
    }

    #[test]
    fn convergence_window_semantics() {
        // Needs more than 5 entries, then compares across the window.
        let mut losses = vec![1.0, 0.9, 0.8, 0.7, 0.6];
        assert!(!converged(&losses, 1e-4));
        losses.push(0.5999); // (1.0 - 0.5999) / 1.0 well above tol
        assert!(!converged(&losses, 1e-4));

        let flat = vec![0.5; 10];
        assert!(converged(&flat, 1e-4));

        // Improvement just below tolerance over the window.
        let slow: Vec<f64> = (0..10).map(|i| 1.0 - 1e-6 * i as f64).collect();
        assert!(converged(&slow, 1e-4));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::pretrain_defaults();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::finetune_defaults();
        assert_eq!(cfg.early_stop_patience, Some(10));
        assert!((cfg.lr - 1e-4).abs() < 1e-12);
        cfg.early_stop_patience = Some(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_defaults_match_the_training_protocol() {
        let pre = TrainConfig::pretrain_defaults();
        assert!((pre.lr - 0.005).abs() < 1e-12);
        assert!((pre.beta1 - 0.9).abs() < 1e-12);
        assert_eq!(pre.batch_size, 32);
        assert_eq!(pre.max_epochs, 500);
        assert!((pre.val_fraction - 0.05).abs() < 1e-12);
        assert!(pre.early_stop_patience.is_none());
    }
}

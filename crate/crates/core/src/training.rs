//! Loss, Adam, the mini-batch training loop, k-fold index splitting, and a
//! finite-difference gradient checker.
//!
//! The loop is deterministic by construction: shuffling comes from one
//! seeded stream, each example's dropout stream is keyed by its position in
//! the input slice (not by visitation order), and per-example gradients are
//! reduced in input order no matter how many worker threads computed them.
//! Consequences worth knowing: rerunning with the same seed is bitwise
//! reproducible at any thread count, and with batch_size >= n the whole
//! epoch is invariant to the shuffle stream.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, ClassLabel, LoadedUtterance};
use crate::error::{Result, RhymeError};
use crate::metrics::compute_eer;
use crate::network::{
    backward, forward, init_params, log_sum_exp2, GradientStore, Mode, ModelConfig, ParameterStore,
};

const SHUFFLE_TAG: u64 = 0x5348_5546;
const DROPOUT_TAG: u64 = 0x4452_4F50;
const VAL_SPLIT_TAG: u64 = 0x5641_4C53;
const KFOLD_TAG: u64 = 0x4B46_4C44;
const CHECK_INPUT_TAG: u64 = 0x4743_494E;
const CHECK_LABEL_TAG: u64 = 0x4743_4C42;
const CHECK_DROP_TAG: u64 = 0x4743_4450;

// ─── loss ────────────────────────────────────────────────────────────────

/// Negative log-likelihood of `label` under the distribution `y_hat`.
/// A zero probability at the label yields +inf; the training loop treats
/// any non-finite loss as a numeric failure rather than stepping on it.
pub fn cross_entropy(y_hat: &[f64], label: usize) -> Result<f64> {
    if y_hat.is_empty() {
        return Err(RhymeError::Shape("cross_entropy: empty distribution".into()));
    }
    if label >= y_hat.len() {
        return Err(RhymeError::InvalidArgument(format!(
            "cross_entropy: label {label} out of range for {} classes",
            y_hat.len()
        )));
    }
    let mut sum = 0.0;
    for &p in y_hat {
        if !p.is_finite() || p < -1e-12 {
            return Err(RhymeError::InvalidArgument(
                "cross_entropy: y_hat is not a probability distribution".into(),
            ));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(RhymeError::InvalidArgument(format!(
            "cross_entropy: probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(-(y_hat[label].max(0.0)).ln())
}

/// Same loss straight from logits via log-sum-exp, which is what the
/// training loop uses so extreme logits cannot round through zero.
pub fn loss_from_logits(logits: [f64; 2], label: ClassLabel) -> f64 {
    log_sum_exp2(logits) - logits[label.index()]
}

// ─── optimizer ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update, elementwise over the flat store.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &GradientStore,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(RhymeError::InvalidArgument(format!("adam_step: bad learning rate {lr}")));
    }
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
        return Err(RhymeError::InvalidArgument(
            "adam_step: betas must lie in [0, 1) and eps must be positive".into(),
        ));
    }
    let n = params.values().len();
    if grads.values().len() != n || state.m.len() != n || state.v.len() != n {
        return Err(RhymeError::Shape(format!(
            "adam_step: size mismatch, params {n}, grads {}, state {}",
            grads.values().len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    let values = params.values_mut();
    for i in 0..n {
        let g = grads.values()[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

// ─── configuration and log ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    /// Fraction carved out of the training set when no explicit
    /// validation set is supplied. Zero disables the carve-out, which
    /// also disables early stopping.
    pub val_fraction: f64,
    pub folds: usize,
    pub seed: u64,
    /// Separate stream for epoch shuffling; derived from `seed` when None.
    /// Kept apart from the dropout stream so reordering batches and
    /// regularization noise can be varied independently.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 50,
            patience: 5,
            val_fraction: 0.1,
            folds: 5,
            seed: 7,
            shuffle_seed: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(RhymeError::Config(format!("train config: bad learning rate {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(RhymeError::Config("train config: batch_size must be positive".into()));
        }
        if !self.val_fraction.is_finite() || !(0.0..1.0).contains(&self.val_fraction)
        {
            return Err(RhymeError::Config(format!(
                "train config: val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(RhymeError::Config("train config: bad Adam constants".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_eer_percent: Option<f64>,
    pub wall_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub early_stopped: bool,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// Copy with wall-clock fields cleared, for reproducibility diffs.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochStats { wall_secs: None, ..e.clone() })
                .collect(),
            early_stopped: self.early_stopped,
            best_epoch: self.best_epoch,
        }
    }
}

// ─── training loop ───────────────────────────────────────────────────────

fn has_both_classes(items: &[&LoadedUtterance]) -> bool {
    let mut bona = false;
    let mut spoof = false;
    for it in items {
        match it.label {
            ClassLabel::Bonafide => bona = true,
            ClassLabel::Spoof => spoof = true,
        }
    }
    bona && spoof
}

/// Stratified carve-out: per class, a seeded shuffle donates
/// floor(count * fraction) items to validation.
fn carve_validation<'a>(
    items: &'a [LoadedUtterance],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a LoadedUtterance>, Vec<&'a LoadedUtterance>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, VAL_SPLIT_TAG));
    let mut val_idx = Vec::new();
    for class in [ClassLabel::Bonafide, ClassLabel::Spoof] {
        let mut idx: Vec<usize> =
            (0..items.len()).filter(|&i| items[i].label == class).collect();
        idx.shuffle(&mut rng);
        let take = (idx.len() as f64 * fraction).floor() as usize;
        val_idx.extend_from_slice(&idx[..take]);
    }
    val_idx.sort_unstable();
    let mut in_val = vec![false; items.len()];
    for &i in &val_idx {
        in_val[i] = true;
    }
    let train = items.iter().enumerate().filter(|(i, _)| !in_val[*i]).map(|(_, it)| it).collect();
    let val = val_idx.iter().map(|&i| &items[i]).collect();
    (train, val)
}

fn mean_in_order(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Eval-mode losses and spoof scores for a fixed item list, in input order.
fn evaluate_set(
    items: &[&LoadedUtterance],
    params: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<Vec<(f64, f64)>> {
    items
        .par_iter()
        .map(|it| {
            let tr = forward(&it.seq, params, cfg, Mode::Eval, None)?;
            Ok((loss_from_logits(tr.logits, it.label), tr.probs[1]))
        })
        .collect()
}

/// Trains a fresh model on `items`, optionally validating on
/// `explicit_val`; without one, `val_fraction` is carved out of `items`
/// (stratified). Validation drives early stopping and the returned
/// parameters come from the best validation epoch; with no validation
/// items at all the loop runs every epoch and returns the final state.
pub fn train(
    items: &[LoadedUtterance],
    explicit_val: Option<&[LoadedUtterance]>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ParameterStore, TrainLog)> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(RhymeError::Config("empty training set".into()));
    }

    let (train_items, val_items): (Vec<&LoadedUtterance>, Vec<&LoadedUtterance>) =
        match explicit_val {
            Some(val) => (items.iter().collect(), val.iter().collect()),
            None => carve_validation(items, cfg.val_fraction, cfg.seed),
        };
    if !has_both_classes(&train_items) {
        return Err(RhymeError::Config(
            "training set must contain both bonafide and spoof examples".into(),
        ));
    }

    let mut params = init_params(model_cfg, cfg.seed)?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }

    let val_has_eer = has_both_classes(&val_items);
    let shuffle_seed = cfg.shuffle_seed.unwrap_or_else(|| mix_seed(cfg.seed, SHUFFLE_TAG));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let dropout_base = mix_seed(cfg.seed, DROPOUT_TAG);

    let mut adam = AdamState::new(params.values().len());
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ParameterStore> = None;
    let mut stale_epochs = 0usize;

    let n = train_items.len();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);

        let mut losses = vec![0.0f64; n];
        for chunk in order.chunks(cfg.batch_size) {
            let mut results: Vec<(usize, f64, GradientStore)> = chunk
                .par_iter()
                .map(|&idx| {
                    let it = train_items[idx];
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        mix_seed(dropout_base, epoch as u64),
                        idx as u64,
                    ));
                    let tr = forward(&it.seq, &params, model_cfg, Mode::Train, Some(&mut rng))?;
                    let loss = loss_from_logits(tr.logits, it.label);
                    if !loss.is_finite() {
                        return Err(RhymeError::numeric("loss", "training loss diverged"));
                    }
                    let g = backward(&tr, &params, model_cfg, it.label)?;
                    Ok((idx, loss, g))
                })
                .collect::<Result<_>>()?;
            // reduce in input order so the sum is identical for any thread
            // count and any shuffle of a full batch
            results.sort_unstable_by_key(|(idx, _, _)| *idx);
            let mut grad = params.zeros_like();
            for (idx, loss, g) in &results {
                losses[*idx] = *loss;
                grad.add_scaled(g, 1.0)?;
            }
            grad.scale(1.0 / results.len() as f64);
            adam_step(&mut params, &grad, &mut adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)?;
        }
        let train_loss = mean_in_order(&losses);

        let (val_loss, val_eer) = if val_items.is_empty() {
            (None, None)
        } else {
            let evals = evaluate_set(&val_items, &params, model_cfg)?;
            let loss = mean_in_order(&evals.iter().map(|e| e.0).collect::<Vec<_>>());
            let eer = if val_has_eer {
                let scored: Vec<(f64, ClassLabel)> = evals
                    .iter()
                    .zip(&val_items)
                    .map(|((_, score), it)| (*score, it.label))
                    .collect();
                Some(compute_eer(&scored)?.eer_percent)
            } else {
                None
            };
            (Some(loss), eer)
        };

        log.epochs.push(EpochStats {
            train_loss,
            val_loss,
            val_eer_percent: val_eer,
            wall_secs: Some(started.elapsed().as_secs_f64()),
        });

        if let Some(vl) = val_loss {
            if vl < best_val {
                best_val = vl;
                best_params = Some(params.clone());
                log.best_epoch = Some(epoch);
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= cfg.patience {
                    log.early_stopped = true;
                    break;
                }
            }
        }
    }

    Ok((best_params.unwrap_or(params), log))
}

// ─── k-fold splitting ────────────────────────────────────────────────────

/// Label-stratified k-fold partition of `0..labels.len()`. Every index
/// lands in exactly one validation fold; per-class counts differ by at
/// most one across folds. Index lists come back sorted.
pub fn kfold_split(
    labels: &[ClassLabel],
    folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(RhymeError::InvalidArgument(format!("kfold_split: need >= 2 folds, got {folds}")));
    }
    if folds > labels.len() {
        return Err(RhymeError::InvalidArgument(format!(
            "kfold_split: {folds} folds exceed {} records",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, KFOLD_TAG));
    let mut fold_of = vec![0usize; labels.len()];
    for class in [ClassLabel::Bonafide, ClassLabel::Spoof] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let val: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let tr: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        out.push((tr, val));
    }
    Ok(out)
}

// ─── gradient checking ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < tol)
    }
}

/// Compares `backward` against central finite differences of the loss on
/// one random utterance, coordinate by coordinate, and reports the worst
/// relative error per tensor. Cost is two forwards per parameter, so run
/// it on small configs. Dropout is active and replayed identically for
/// every evaluation.
pub fn grad_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    grad_check_inner(cfg, seed, false)
}

/// Test fixture: same check with a deliberately corrupted analytic
/// gradient, to prove the checker notices.
#[doc(hidden)]
pub fn grad_check_corrupted(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    grad_check_inner(cfg, seed, true)
}

fn grad_check_inner(cfg: &ModelConfig, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    cfg.validate()?;
    let t_frames = 4;
    let mut input_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, CHECK_INPUT_TAG));
    let frames = ndarray::Array2::from_shape_fn((t_frames, cfg.input_dim), |_| {
        let v: f64 = input_rng.sample(rand_distr::StandardNormal);
        v as f32
    });
    let seq = crate::data::EmbeddingSequence::new(frames)?;
    let label = if ChaCha8Rng::seed_from_u64(mix_seed(seed, CHECK_LABEL_TAG)).gen::<bool>() {
        ClassLabel::Spoof
    } else {
        ClassLabel::Bonafide
    };
    let dropout_seed = mix_seed(seed, CHECK_DROP_TAG);
    let params = init_params(cfg, seed)?;

    let loss_at = |theta: &[f64]| -> Result<f64> {
        let mut probe = params.clone();
        probe.values_mut().copy_from_slice(theta);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let tr = forward(&seq, &probe, cfg, Mode::Train, Some(&mut rng))?;
        Ok(loss_from_logits(tr.logits, label))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let trace = forward(&seq, &params, cfg, Mode::Train, Some(&mut rng))?;
    let mut analytic = backward(&trace, &params, cfg, label)?;
    if corrupt {
        for v in analytic.get_mut("cls.weight") {
            *v = 1.5 * *v + 1e-3;
        }
    }

    let h = 1e-5;
    let mut theta = params.values().to_vec();
    let entries = params.layout().entries().to_vec();
    let mut groups = Vec::with_capacity(entries.len());
    for entry in &entries {
        let mut worst = 0.0f64;
        for i in entry.offset..entry.offset + entry.len {
            let orig = theta[i];
            theta[i] = orig + h;
            let up = loss_at(&theta)?;
            theta[i] = orig - h;
            let down = loss_at(&theta)?;
            theta[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.values()[i];
            // the floor keeps finite-difference roundoff (about 1e-10 per
            // probe at this step size) from dominating coordinates whose
            // true gradient is smaller than the probe noise
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            worst = worst.max(rel);
        }
        groups.push(GroupCheck { name: entry.name.clone(), max_rel_err: worst });
    }
    Ok(GradCheckReport { groups })
}

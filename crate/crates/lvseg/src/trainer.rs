//! Training loops for the segmentation network: the compound Dice +
//! cross-entropy loss with deep supervision, from-scratch training, transfer
//! fine-tuning with frozen blocks, and multi-center training-set composition.
//!
//! Conventions shared by every loop in this module:
//!
//! * One **epoch** visits every training slice exactly once, in an order
//!   reshuffled each epoch from the run seed. Slices are grouped into
//!   mini-batches; the last batch of an epoch may be smaller.
//! * Per-slice augmentation seeds derive from the run seed and a global
//!   sample counter, so a whole run is reproducible bit for bit on the same
//!   inputs regardless of batch size.
//! * After every epoch the model is scored on the validation cases (mean
//!   per-case volumetric Dice of blood pool and myocardium, computed without
//!   any post-processing). The weights of the best validation epoch are the
//!   ones returned — later epochs can only replace them by strictly
//!   improving the mean of the two Dice scores.
//! * A non-finite training loss aborts the run with a diagnostic error
//!   rather than continuing on poisoned weights.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{sample_pipeline, AugmentationConfig};
use crate::core::{CaseRecord, LabelMap, Labels2D, MixCount, Slice2D};
use crate::error::{Error, Result};
use crate::evalkit::{argmax_labels, dice_3d};
use crate::nn::ops::{softmax_backward, softmax_channels};
use crate::nn::{Adam, NamedGrads, Tensor};
use crate::segnet::{
    build_network, set_trainable, slice_to_tensor, ModelBundle, NetworkConfig, Part, Provenance,
};
use crate::util::{config_hash, derive_seed, derive_seed_n};

/// Probabilities are clamped to `[CE_CLIP, 1 - CE_CLIP]` inside the
/// cross-entropy term; outside the band the gradient is exactly zero.
const CE_CLIP: f64 = 1e-4;

/// Additive smoothing in the soft-Dice numerator and denominator, so empty
/// classes score 1 instead of 0/0.
const DICE_SMOOTH: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Settings for one from-scratch training run. The optimizer (Adam with
/// default moment decay) and the loss (compound Dice + cross-entropy over all
/// supervision heads) are fixed; only budget, batch size, step size and seed
/// vary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 250,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Settings for fine-tuning a trained parent model on cases from a new
/// center. `part` + `k_blocks` select which blocks stay trainable (see
/// [`set_trainable`]); `data_fraction` subsamples the new center's training
/// cases; `epochs` replaces the from-scratch budget.
///
/// `parent` is the on-disk location of the parent weights for flows that
/// load it from a file (the command line does); callers that already hold
/// the parent bundle in memory ignore it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub parent: PathBuf,
    pub part: Part,
    pub k_blocks: usize,
    pub data_fraction: f64,
    pub epochs: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            parent: PathBuf::new(),
            part: Part::Encoder,
            k_blocks: 5,
            data_fraction: 1.0,
            epochs: 50,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self, network: &NetworkConfig) -> Result<()> {
        if !self.data_fraction.is_finite() || self.data_fraction <= 0.0 || self.data_fraction > 1.0 {
            return Err(Error::config(format!(
                "data_fraction must be in (0, 1], got {}",
                self.data_fraction
            )));
        }
        let levels = network.effective().levels;
        if self.k_blocks == 0 || self.k_blocks > levels {
            return Err(Error::config(format!(
                "k_blocks must be in 1..={levels} for a {levels}-level network, got {}",
                self.k_blocks
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("fine-tuning epochs must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

/// Per-epoch measurements, recorded after the optimizer step(s) of that
/// epoch. Dice values are means over validation cases of the volumetric
/// per-class Dice, without post-processing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice_pool: f64,
    pub val_dice_myo: f64,
    pub seconds: f64,
}

/// Full record of one training run: per-epoch rows plus the identifiers
/// needed to reproduce it (seed, configuration digest, retained epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    /// 1-based epoch whose weights the returned bundle carries.
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Mean of pool and myocardium validation Dice at the retained epoch.
    pub fn best_val_dice(&self) -> f64 {
        self.epochs
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map(|r| 0.5 * (r.val_dice_pool + r.val_dice_myo))
            .unwrap_or(f64::NAN)
    }

    /// Write the per-epoch table as CSV with a fixed header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_loss,val_dice_pool,val_dice_myo,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_dice_pool, r.val_dice_myo, r.seconds
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Run header for the JSON sidecar of the CSV table.
    pub fn header_json(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "config_hash": self.config_hash,
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice(),
            "epochs_run": self.epochs.len(),
        })
    }
}

// ---------------------------------------------------------------------------
// Compound loss
// ---------------------------------------------------------------------------

/// Relative weights of the supervision heads (main head first), halving per
/// level and normalized to sum to 1.
fn head_weights(num_heads: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_heads).map(|h| 0.5f64.powi(h as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Downsample a label image by an integer factor, picking the label at the
/// center of each `factor` x `factor` cell. Factor 1 reproduces the input.
fn downsample_labels(labels: &Labels2D, factor: usize) -> Labels2D {
    let rows = labels.rows / factor;
    let cols = labels.cols / factor;
    let mut out = Labels2D::zeros(rows, cols);
    let off = factor / 2;
    for r in 0..rows {
        for c in 0..cols {
            out.set(r, c, labels.get(r * factor + off, c * factor + off));
        }
    }
    out
}

/// Shape/content checks shared by the loss entry points. Returns the number
/// of classes.
fn check_heads(heads: &[Tensor], labels: &Labels2D) -> Result<usize> {
    if heads.is_empty() {
        return Err(Error::parameter("loss needs at least one prediction head"));
    }
    let classes = heads[0].c;
    if classes < 2 {
        return Err(Error::parameter(format!(
            "prediction heads must have at least 2 class channels, got {classes}"
        )));
    }
    for (h, head) in heads.iter().enumerate() {
        if head.c != classes || head.h << h != labels.rows || head.w << h != labels.cols {
            return Err(Error::ShapeMismatch {
                context: format!("loss head {h} (half resolution per auxiliary level)"),
                expected: vec![classes, labels.rows >> h, labels.cols >> h],
                actual: vec![head.c, head.h, head.w],
            });
        }
    }
    if let Some(&bad) = labels.codes.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::validation(format!(
            "label code {bad} is outside the {classes}-class range of the prediction"
        )));
    }
    Ok(classes)
}

/// Cross-entropy and Dice-loss terms of one head, on class probabilities.
/// Returns `(ce, dice_loss)`, each averaged as described on
/// [`compound_loss`].
fn head_terms(probs: &Tensor, target: &Labels2D) -> (f64, f64) {
    let classes = probs.c;
    let pixels = probs.h * probs.w;

    let mut ce = 0.0;
    for i in 0..pixels {
        let t = target.codes[i] as usize;
        let p = probs.data[t * pixels + i].clamp(CE_CLIP, 1.0 - CE_CLIP);
        ce -= p.ln();
    }
    ce /= pixels as f64;

    let mut dice_sum = 0.0;
    for c in 0..classes {
        let plane = &probs.data[c * pixels..(c + 1) * pixels];
        let mut inter = 0.0;
        let mut p_sum = 0.0;
        let mut t_sum = 0.0;
        for i in 0..pixels {
            let p = plane[i];
            p_sum += p;
            if target.codes[i] as usize == c {
                inter += p;
                t_sum += 1.0;
            }
        }
        dice_sum += (2.0 * inter + DICE_SMOOTH) / (p_sum + t_sum + DICE_SMOOTH);
    }
    (ce, 1.0 - dice_sum / classes as f64)
}

/// Compound segmentation loss on class **probabilities**: for every
/// supervision head, pixel-mean cross-entropy of the true class (clamped to
/// `[1e-4, 1 - 1e-4]`) plus one minus the class-mean soft Dice
/// (`(2*overlap + s) / (pred + truth + s)`, `s = 1e-5`). Head h is compared
/// against the labels downsampled by `2^h` and the per-head sums are combined
/// with weights 1, 1/2, 1/4, ... normalized to sum to 1.
///
/// A perfect one-hot prediction scores near zero (the clamp leaves a
/// residual cross-entropy of `-ln(1 - 1e-4)`); a uniform prediction scores
/// `ln(num_classes)` on the cross-entropy term.
pub fn compound_loss(heads: &[Tensor], labels: &Labels2D) -> Result<f64> {
    check_heads(heads, labels)?;
    let weights = head_weights(heads.len());
    let mut total = 0.0;
    for (h, head) in heads.iter().enumerate() {
        let target = downsample_labels(labels, 1 << h);
        let (ce, dice_loss) = head_terms(head, &target);
        total += weights[h] * (ce + dice_loss);
    }
    Ok(total)
}

/// [`compound_loss`] applied to raw network outputs: softmax first.
pub(crate) fn loss_from_logits(logits: &[Tensor], labels: &Labels2D) -> Result<f64> {
    let probs: Vec<Tensor> = logits.iter().map(softmax_channels).collect();
    compound_loss(&probs, labels)
}

/// Loss and its gradient with respect to the **logits** of every head, for
/// the backward pass. The value equals [`loss_from_logits`] exactly; the
/// gradient chains the probability-space gradient of both terms through the
/// softmax.
pub(crate) fn loss_and_grad_from_logits(
    logits: &[Tensor],
    labels: &Labels2D,
) -> Result<(f64, Vec<Tensor>)> {
    let probs: Vec<Tensor> = logits.iter().map(softmax_channels).collect();
    let classes = check_heads(&probs, labels)?;
    let weights = head_weights(probs.len());

    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (h, p) in probs.iter().enumerate() {
        let target = downsample_labels(labels, 1 << h);
        let (ce, dice_loss) = head_terms(p, &target);
        total += weights[h] * (ce + dice_loss);

        let pixels = p.h * p.w;
        let mut gp = Tensor::zeros(p.c, p.h, p.w);

        // Cross-entropy: d(-ln p_t)/dp_t = -1/p_t inside the clamp band,
        // zero outside it; mean over pixels.
        let ce_scale = weights[h] / pixels as f64;
        for i in 0..pixels {
            let t = target.codes[i] as usize;
            let pt = p.data[t * pixels + i];
            if pt > CE_CLIP && pt < 1.0 - CE_CLIP {
                gp.data[t * pixels + i] -= ce_scale / pt;
            }
        }

        // Soft Dice: with I = sum(p*t), U = sum(p) + sum(t),
        // d D/dp_i = (2 t_i (U + s) - (2 I + s)) / (U + s)^2, and the loss
        // term is -mean over classes of D.
        let dice_scale = weights[h] / classes as f64;
        for c in 0..classes {
            let plane = c * pixels;
            let mut inter = 0.0;
            let mut p_sum = 0.0;
            let mut t_sum = 0.0;
            for i in 0..pixels {
                let pv = p.data[plane + i];
                p_sum += pv;
                if target.codes[i] as usize == c {
                    inter += pv;
                    t_sum += 1.0;
                }
            }
            let denom = p_sum + t_sum + DICE_SMOOTH;
            let num = 2.0 * inter + DICE_SMOOTH;
            let inv_d2 = 1.0 / (denom * denom);
            for i in 0..pixels {
                let t = if target.codes[i] as usize == c { 1.0 } else { 0.0 };
                let dd = (2.0 * t * denom - num) * inv_d2;
                gp.data[plane + i] -= dice_scale * dd;
            }
        }

        grads.push(softmax_backward(p, &gp));
    }
    Ok((total, grads))
}

// ---------------------------------------------------------------------------
// Case preparation
// ---------------------------------------------------------------------------

/// A case reduced to per-slice arrays ready for the network: every slice
/// center-cropped/padded to the working size, intensities min-max normalized
/// to [0, 1] over the whole (cropped) volume.
#[derive(Clone, Debug)]
pub(crate) struct PreparedCase {
    pub case_id: String,
    pub images: Vec<Slice2D>,
    pub labels: Option<Vec<Labels2D>>,
    /// In-plane pixel spacing (mm) of the source volume, for the rescale
    /// augmentation.
    pub native_mm: f64,
}

impl PreparedCase {
    pub fn rows(&self) -> usize {
        self.images.first().map_or(0, |s| s.rows)
    }

    pub fn cols(&self) -> usize {
        self.images.first().map_or(0, |s| s.cols)
    }

    /// Stack the per-slice labels back into a volume.
    pub fn truth_map(&self) -> Option<LabelMap> {
        let labels = self.labels.as_ref()?;
        let mut map = LabelMap::new((self.rows(), self.cols(), labels.len()), vec![
            0;
            self.rows() * self.cols() * labels.len()
        ])
        .expect("consistent prepared shape");
        for (s, l) in labels.iter().enumerate() {
            map.set_slice(s, l);
        }
        Some(map)
    }
}

/// Crop/pad every slice of a case to `rows` x `cols` and min-max normalize
/// the cropped intensities to [0, 1] (volume-level: one min/max per case).
/// Already-normalized volumes pass through unchanged; a constant volume maps
/// to all zeros.
pub(crate) fn prepare_case(case: &CaseRecord, rows: usize, cols: usize) -> PreparedCase {
    let n = case.image.num_slices();
    let mut images: Vec<Slice2D> = (0..n)
        .map(|s| case.image.slice(s).crop_or_pad(rows, cols))
        .collect();

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for img in &images {
        for &v in &img.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    for img in &mut images {
        for v in &mut img.values {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }

    let labels = case
        .labels
        .as_ref()
        .map(|lm| (0..n).map(|s| lm.slice(s).crop_or_pad(rows, cols)).collect());

    PreparedCase {
        case_id: case.case_id.clone(),
        images,
        labels,
        native_mm: case.image.spacing.0 as f64,
    }
}

fn prepare_labeled(cases: &[CaseRecord], rows: usize, cols: usize, role: &str) -> Result<Vec<PreparedCase>> {
    cases
        .iter()
        .map(|case| {
            if case.labels.is_none() {
                return Err(Error::validation(format!(
                    "{role} case '{}' has no labels; training requires labeled cases",
                    case.case_id
                )));
            }
            Ok(prepare_case(case, rows, cols))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Train a freshly initialized network. Returns the bundle carrying the
/// weights of the best validation epoch, plus the full per-epoch log.
pub fn train(
    train_cases: &[CaseRecord],
    val_cases: &[CaseRecord],
    network: &NetworkConfig,
    cfg: &TrainingConfig,
    aug: &AugmentationConfig,
) -> Result<(ModelBundle, TrainLog)> {
    network.validate()?;
    cfg.validate()?;
    aug.validate()?;

    let mut bundle = build_network(network, cfg.seed)?;
    bundle.provenance = Provenance {
        origin: "trained".into(),
        training_centers: centers_of(train_cases),
        epochs: cfg.epochs,
        seed: cfg.seed,
        parent: None,
    };
    let hash = config_hash(&json!({
        "network": network,
        "training": cfg,
        "augmentation": aug,
    }));
    run_training(bundle, train_cases, val_cases, cfg.epochs, cfg, aug, hash)
}

/// Fine-tune a trained parent on cases from a new center: keep only the
/// blocks selected by `transfer.part`/`transfer.k_blocks` trainable,
/// subsample the new center's training cases to `transfer.data_fraction`,
/// and train for `transfer.epochs` (the budget in `cfg.epochs` is ignored).
/// The parent bundle itself is never modified.
pub fn finetune(
    parent: &ModelBundle,
    train_cases: &[CaseRecord],
    val_cases: &[CaseRecord],
    transfer: &TransferConfig,
    cfg: &TrainingConfig,
    aug: &AugmentationConfig,
) -> Result<(ModelBundle, TrainLog)> {
    transfer.validate(&parent.config)?;
    cfg.validate()?;
    aug.validate()?;

    let n = subsample_count(transfer.data_fraction, train_cases.len());
    let mut order: Vec<usize> = (0..train_cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        "finetune-subsample",
    )));
    order.truncate(n);
    let selected: Vec<CaseRecord> = order.iter().map(|&i| train_cases[i].clone()).collect();

    let mut bundle = set_trainable(parent.clone(), transfer.part, transfer.k_blocks)?;
    bundle.provenance = Provenance {
        origin: "finetuned".into(),
        training_centers: centers_of(&selected),
        epochs: transfer.epochs,
        seed: cfg.seed,
        parent: Some(parent.bundle_id()),
    };
    let hash = config_hash(&json!({
        "network": parent.config,
        "training": cfg,
        "transfer": transfer,
        "augmentation": aug,
    }));
    run_training(bundle, &selected, val_cases, transfer.epochs, cfg, aug, hash)
}

/// Number of cases a fraction selects from a pool of `n`: rounded half up,
/// but never below one case.
pub fn subsample_count(fraction: f64, n: usize) -> usize {
    crate::util::round_half_up(fraction * n as f64).max(1)
}

fn centers_of(cases: &[CaseRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = cases.iter().map(|c| c.center_id.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

fn run_training(
    mut bundle: ModelBundle,
    train_cases: &[CaseRecord],
    val_cases: &[CaseRecord],
    epochs: usize,
    cfg: &TrainingConfig,
    aug: &AugmentationConfig,
    hash: String,
) -> Result<(ModelBundle, TrainLog)> {
    if train_cases.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if val_cases.is_empty() {
        return Err(Error::validation(
            "validation set is empty; epoch selection needs validation cases",
        ));
    }
    let (rows, cols) = aug.crop_size;
    let divisor = bundle.config.spatial_divisor();
    if rows == 0 || cols == 0 || rows % divisor != 0 || cols % divisor != 0 {
        return Err(Error::config(format!(
            "working size {rows}x{cols} is not divisible by the network's spatial factor {divisor}"
        )));
    }

    let train = prepare_labeled(train_cases, rows, cols, "training")?;
    let val = prepare_labeled(val_cases, rows, cols, "validation")?;

    // Flat index of every training slice.
    let mut order: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.images.len()).map(move |si| (ci, si)))
        .collect();
    if order.is_empty() {
        return Err(Error::validation("training cases contain no slices"));
    }

    let seed = cfg.seed;
    let mut adam = Adam::new(cfg.learning_rate);
    let flags = bundle.trainable_blocks().clone();
    let trainable = |name: &str| {
        flags
            .get(crate::segnet::UNet::block_of(name))
            .copied()
            .unwrap_or(false)
    };

    let mut log = TrainLog {
        seed,
        config_hash: hash,
        best_epoch: 0,
        epochs: Vec::with_capacity(epochs),
    };
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_net = bundle.net.clone();
    let mut sample_counter: u64 = 0;

    for epoch in 1..=epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(seed, "epoch-shuffle", epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = NamedGrads::new();
            for &(ci, si) in batch {
                sample_counter += 1;
                let case = &train[ci];
                let labels = &case.labels.as_ref().expect("prepared with labels")[si];
                let sample = sample_pipeline(
                    &case.images[si],
                    labels,
                    aug,
                    case.native_mm,
                    derive_seed_n(seed, "augment", sample_counter),
                )?;
                let x = slice_to_tensor(&sample.image);
                let (logits, tape) = bundle.net.forward_logits(&x, true)?;
                let (loss, dlogits) = loss_and_grad_from_logits(&logits, &sample.labels)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        reason: format!(
                            "loss became non-finite ({loss}) at epoch {epoch}, case '{}' slice {si}",
                            case.case_id
                        ),
                    });
                }
                bundle
                    .net
                    .backward(tape.as_ref().expect("tape requested"), &dlogits, &mut grads);
                loss_sum += loss;
            }
            // Mean gradient over the batch.
            let inv = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            adam.step(bundle.net.params_mut(), &grads, &trainable);
        }
        let train_loss = loss_sum / order.len() as f64;

        let (val_loss, val_dice_pool, val_dice_myo) = validate_epoch(&bundle, &val)?;
        let mean_dice = 0.5 * (val_dice_pool + val_dice_myo);
        if mean_dice > best_dice {
            best_dice = mean_dice;
            log.best_epoch = epoch;
            best_net = bundle.net.clone();
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_dice_pool,
            val_dice_myo,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    bundle.net = best_net;
    Ok((bundle, log))
}

/// Mean validation loss over slices, and mean per-case volumetric Dice of
/// blood pool and myocardium (argmax decode, no post-processing).
fn validate_epoch(bundle: &ModelBundle, val: &[PreparedCase]) -> Result<(f64, f64, f64)> {
    let mut loss_sum = 0.0;
    let mut slices = 0usize;
    let mut pool_sum = 0.0;
    let mut myo_sum = 0.0;
    for case in val {
        let labels = case.labels.as_ref().expect("prepared with labels");
        let mut pred = LabelMap::new(
            (case.rows(), case.cols(), case.images.len()),
            vec![0; case.rows() * case.cols() * case.images.len()],
        )?;
        for (si, image) in case.images.iter().enumerate() {
            let x = slice_to_tensor(image);
            let (logits, _) = bundle.net.forward_logits(&x, false)?;
            loss_sum += loss_from_logits(&logits, &labels[si])?;
            slices += 1;
            pred.set_slice(si, &argmax_labels(&softmax_channels(&logits[0])));
        }
        let truth = case.truth_map().expect("prepared with labels");
        let score = dice_3d(&pred, &truth)?;
        pool_sum += score.pool.dice;
        myo_sum += score.myo.dice;
    }
    let n = val.len() as f64;
    Ok((loss_sum / slices as f64, pool_sum / n, myo_sum / n))
}

// ---------------------------------------------------------------------------
// Multi-center composition
// ---------------------------------------------------------------------------

/// The available training and validation cases of one center, from which
/// [`mix_centers`] draws.
#[derive(Clone, Debug)]
pub struct CenterPool {
    pub center_id: String,
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
}

/// Compose a multi-center training/validation set by drawing the requested
/// number of cases from each center's pool (uniformly, without replacement,
/// deterministic in `seed`) and shuffling the merged result. The output
/// sizes are exactly the sums of the requested counts; a request that
/// exceeds a pool's size is an error naming the center.
pub fn mix_centers(
    pools: &[CenterPool],
    counts: &[MixCount],
    seed: u64,
) -> Result<(Vec<CaseRecord>, Vec<CaseRecord>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for count in counts {
        let pool = pools
            .iter()
            .find(|p| p.center_id == count.center_id)
            .ok_or_else(|| {
                Error::parameter(format!("unknown center '{}' in mix request", count.center_id))
            })?;
        train.extend(draw(&pool.train, count.train, seed, &count.center_id, "training")?);
        val.extend(draw(&pool.val, count.val, seed, &count.center_id, "validation")?);
    }
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "mix-merge-train")));
    val.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "mix-merge-val")));
    Ok((train, val))
}

fn draw(
    pool: &[CaseRecord],
    count: usize,
    seed: u64,
    center: &str,
    role: &str,
) -> Result<Vec<CaseRecord>> {
    if count > pool.len() {
        return Err(Error::parameter(format!(
            "center '{center}': requested {count} {role} cases but only {} are available",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &format!("mix-draw-{role}:{center}"),
    )));
    order.truncate(count);
    Ok(order.into_iter().map(|i| pool[i].clone()).collect())
}

/// Cases each center contributes when a fixed total budget is split evenly
/// over `centers` centers (rounded half up).
pub fn per_center_count(budget: usize, centers: usize) -> usize {
    crate::util::round_half_up(budget as f64 / centers as f64)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Volume, BLOOD_POOL, MYOCARDIUM};
    use rand::Rng;

    fn one_hot(target: &Labels2D, classes: usize) -> Tensor {
        let mut t = Tensor::zeros(classes, target.rows, target.cols);
        let pixels = target.rows * target.cols;
        for i in 0..pixels {
            t.data[target.codes[i] as usize * pixels + i] = 1.0;
        }
        t
    }

    fn random_labels(rows: usize, cols: usize, classes: u8, rng: &mut ChaCha8Rng) -> Labels2D {
        let mut l = Labels2D::zeros(rows, cols);
        for v in l.codes.iter_mut() {
            *v = rng.random_range(0..classes);
        }
        l
    }

    /// Two-slice ring phantom: bright pool disk inside a mid-gray myocardium
    /// annulus on a dark background, with slight per-case jitter.
    fn toy_case(id: usize, center: &str) -> CaseRecord {
        let (rows, cols, slices) = (16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(900 + id as u64);
        let cr = 7.5 + rng.random_range(-1.0..=1.0);
        let cc = 7.5 + rng.random_range(-1.0..=1.0);
        let r_pool = 2.5 + rng.random_range(-0.5..=0.5);
        let r_myo = r_pool + 2.0;
        let mut voxels = vec![0.0f32; rows * cols * slices];
        let mut labels = vec![0u8; rows * cols * slices];
        for s in 0..slices {
            for r in 0..rows {
                for c in 0..cols {
                    let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                    let i = c + cols * r + rows * cols * s;
                    let (v, l) = if d <= r_pool {
                        (0.9, BLOOD_POOL)
                    } else if d <= r_myo {
                        (0.45, MYOCARDIUM)
                    } else {
                        (0.1, 0)
                    };
                    voxels[i] = v as f32 + rng.random_range(-0.02..=0.02) as f32;
                    labels[i] = l;
                }
            }
        }
        CaseRecord {
            case_id: format!("toy{id:02}"),
            center_id: center.into(),
            image: Volume::new((rows, cols, slices), (1.0, 1.0, 8.0), voxels).unwrap(),
            labels: Some(LabelMap::new((rows, cols, slices), labels).unwrap()),
            split: crate::core::Split::Train,
        }
    }

    fn toy_aug(rows: usize, cols: usize) -> AugmentationConfig {
        AugmentationConfig {
            crop_size: (rows, cols),
            ..AugmentationConfig::disabled()
        }
    }

    #[test]
    fn defaults_match_contract() {
        let t = TrainingConfig::default();
        assert_eq!((t.epochs, t.batch_size), (250, 16));
        assert_eq!(t.learning_rate, 1e-3);
        let f = TransferConfig::default();
        assert_eq!(f.part, Part::Encoder);
        assert_eq!(f.k_blocks, 5);
        assert_eq!(f.data_fraction, 1.0);
        assert_eq!(f.epochs, 50);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TrainingConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        for lr in [0.0, -1.0, f64::NAN] {
            let cfg = TrainingConfig { learning_rate: lr, ..Default::default() };
            assert!(cfg.validate().is_err(), "lr {lr} accepted");
        }
        let net = NetworkConfig::default(); // 6 levels
        for bad in [
            TransferConfig { data_fraction: 0.0, ..Default::default() },
            TransferConfig { data_fraction: 1.2, ..Default::default() },
            TransferConfig { data_fraction: f64::NAN, ..Default::default() },
            TransferConfig { k_blocks: 0, ..Default::default() },
            TransferConfig { k_blocks: 7, ..Default::default() },
            TransferConfig { epochs: 0, ..Default::default() },
        ] {
            assert!(bad.validate(&net).is_err(), "accepted {bad:?}");
        }
        // Default k_blocks = 5 fits a 6-level network but not a 4-level one.
        assert!(TransferConfig::default().validate(&net).is_ok());
        assert!(TransferConfig::default().validate(&NetworkConfig::desk()).is_err());
    }

    #[test]
    fn head_weights_halve_and_sum_to_one() {
        let w = head_weights(4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 1..w.len() {
            assert!((w[i - 1] / w[i] - 2.0).abs() < 1e-12);
        }
        assert_eq!(head_weights(1), vec![1.0]);
    }

    #[test]
    fn label_downsampling_picks_cell_centers() {
        // 4x4 labels in 2x2 blocks; factor 2 picks the center (odd) pixel.
        let mut l = Labels2D::zeros(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                l.set(r, c, (2 * (r / 2) + c / 2) as u8);
            }
        }
        let d = downsample_labels(&l, 2);
        assert_eq!((d.rows, d.cols), (2, 2));
        assert_eq!(d.codes, vec![0, 1, 2, 3]);
        assert_eq!(downsample_labels(&l, 1).codes, l.codes);
    }

    #[test]
    fn perfect_one_hot_prediction_scores_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = random_labels(16, 16, 3, &mut rng);
        // Three supervision heads, each an exact one-hot of its own target.
        let heads: Vec<Tensor> = (0..3)
            .map(|h| one_hot(&downsample_labels(&labels, 1 << h), 3))
            .collect();
        for head in &heads {
            let target = downsample_labels(&labels, labels.rows / head.h);
            let (ce, dice_loss) = head_terms(head, &target);
            assert!(ce <= 1e-3, "cross-entropy {ce} above tolerance");
            assert!(dice_loss <= 1e-3, "dice loss {dice_loss} above tolerance");
        }
        let total = compound_loss(&heads, &labels).unwrap();
        assert!(total <= 2e-3, "total {total}");
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = random_labels(8, 8, 3, &mut rng);
        let uniform = Tensor::from_vec(3, 8, 8, vec![1.0 / 3.0; 3 * 64]);
        let (ce, _) = head_terms(&uniform, &labels);
        assert!((ce - 3.0f64.ln()).abs() < 1e-12, "ce {ce} != ln 3");
    }

    #[test]
    fn loss_rejects_mismatched_heads_and_labels() {
        let labels = Labels2D::zeros(8, 8);
        // Wrong spatial size.
        assert!(compound_loss(&[Tensor::zeros(3, 4, 8)], &labels).is_err());
        // Wrong auxiliary resolution (must halve per head).
        let heads = [Tensor::zeros(3, 8, 8), Tensor::zeros(3, 8, 8)];
        assert!(compound_loss(&heads, &labels).is_err());
        // Single-channel prediction.
        assert!(compound_loss(&[Tensor::zeros(1, 8, 8)], &labels).is_err());
        // No heads at all.
        assert!(compound_loss(&[], &labels).is_err());
        // Label code outside the class range.
        let mut bad = Labels2D::zeros(8, 8);
        bad.set(0, 0, 7);
        assert!(compound_loss(&[Tensor::from_vec(3, 8, 8, vec![1.0 / 3.0; 192])], &bad).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // Analytic gradient through network + loss vs central differences on
        // a spread of parameters, on the small-profile network.
        let mut bundle = build_network(&NetworkConfig::desk(), 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // On an 8x8 input the deepest stage runs at 1x1 spatial resolution,
        // where instance norm emits exactly its shift parameter. With the
        // shift at its zero init that lands every deep activation exactly on
        // the LeakyReLU kink, where central differences are invalid. Jitter
        // all parameters so activations sit at generic positions.
        for (_, v) in bundle.net.params_mut() {
            for x in v.iter_mut() {
                *x += rng.random_range(-0.05..=0.05);
            }
        }
        let mut x = Tensor::zeros(1, 8, 8);
        for v in x.data.iter_mut() {
            *v = rng.random_range(0.0..=1.0);
        }
        let labels = random_labels(8, 8, 3, &mut rng);

        let (logits, tape) = bundle.net.forward_logits(&x, true).unwrap();
        let (loss, dlogits) = loss_and_grad_from_logits(&logits, &labels).unwrap();
        assert!(
            (loss - loss_from_logits(&logits, &labels).unwrap()).abs() < 1e-12,
            "gradient path and value path disagree on the loss"
        );
        let mut grads = NamedGrads::new();
        bundle.net.backward(tape.as_ref().unwrap(), &dlogits, &mut grads);

        let eval = |name: &str, j: usize, delta: f64| -> f64 {
            let mut net = bundle.net.clone();
            for (n, v) in net.params_mut() {
                if n == name {
                    v[j] += delta;
                }
            }
            let (logits, _) = net.forward_logits(&x, false).unwrap();
            loss_from_logits(&logits, &labels).unwrap()
        };

        let shapes: Vec<(String, usize)> = bundle
            .net
            .params()
            .iter()
            .map(|(n, v)| (n.clone(), v.len()))
            .collect();
        let h = 1e-5;
        for probe in 0..20 {
            let (name, len) = &shapes[(probe * 7919) % shapes.len()];
            let j = rng.random_range(0..*len);
            let analytic = grads.get(name).map_or(0.0, |g| g[j]);
            let fd = (eval(name, j, h) - eval(name, j, -h)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-8 {
                continue;
            }
            let rel = (analytic - fd).abs() / denom;
            assert!(rel < 1e-3, "{name}[{j}]: analytic {analytic}, fd {fd}, rel {rel}");
        }
    }

    #[test]
    fn training_runs_logs_and_repeats_bitwise() {
        let cases: Vec<CaseRecord> = (0..6).map(|i| toy_case(i, "toyA")).collect();
        let (train_cases, val_cases) = cases.split_at(4);
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 7,
        };
        let net = NetworkConfig::desk();
        let aug = toy_aug(16, 16);

        let (bundle_a, log_a) = train(train_cases, val_cases, &net, &cfg, &aug).unwrap();
        assert_eq!(log_a.epochs.len(), 3);
        for (i, r) in log_a.epochs.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
            for v in [r.train_loss, r.val_loss, r.val_dice_pool, r.val_dice_myo] {
                assert!(v.is_finite());
            }
        }
        // The retained epoch is the best mean validation Dice in the log.
        let best = log_a
            .epochs
            .iter()
            .map(|r| 0.5 * (r.val_dice_pool + r.val_dice_myo))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((log_a.best_val_dice() - best).abs() < 1e-12);
        assert!((1..=3).contains(&log_a.best_epoch));
        assert_eq!(bundle_a.provenance.origin, "trained");
        assert_eq!(bundle_a.provenance.training_centers, vec!["toyA".to_string()]);

        // Identical seed and data: identical curves and identical weights.
        let (bundle_b, log_b) = train(train_cases, val_cases, &net, &cfg, &aug).unwrap();
        for (a, b) in log_a.epochs.iter().zip(&log_b.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_dice_pool.to_bits(), b.val_dice_pool.to_bits());
            assert_eq!(a.val_dice_myo.to_bits(), b.val_dice_myo.to_bits());
        }
        assert_eq!(bundle_a.bundle_id(), bundle_b.bundle_id());
    }

    #[test]
    fn training_rejects_degenerate_setups() {
        let cases: Vec<CaseRecord> = (0..3).map(|i| toy_case(i, "toyA")).collect();
        let cfg = TrainingConfig { epochs: 1, batch_size: 2, ..Default::default() };
        let net = NetworkConfig::desk();
        let aug = toy_aug(16, 16);
        // Empty training or validation set.
        assert!(train(&[], &cases[2..], &net, &cfg, &aug).is_err());
        assert!(train(&cases[..2], &[], &net, &cfg, &aug).is_err());
        // Working size not divisible by the downsampling factor (desk: 8).
        assert!(train(&cases[..2], &cases[2..], &net, &cfg, &toy_aug(12, 12)).is_err());
        // Unlabeled training case.
        let mut unlabeled = cases.clone();
        unlabeled[0].labels = None;
        assert!(train(&unlabeled[..2], &cases[2..], &net, &cfg, &aug).is_err());
        // Zero-epoch budget.
        let bad = TrainingConfig { epochs: 0, ..cfg };
        assert!(train(&cases[..2], &cases[2..], &net, &bad, &aug).is_err());
    }

    #[test]
    fn finetuning_updates_only_selected_blocks() {
        let parent = build_network(&NetworkConfig::desk(), 3).unwrap();
        let cases: Vec<CaseRecord> = (0..6).map(|i| toy_case(i, "toyB")).collect();
        let (train_cases, val_cases) = cases.split_at(4);
        let transfer = TransferConfig {
            part: Part::Encoder,
            k_blocks: 2,
            data_fraction: 0.6,
            epochs: 2,
            ..Default::default()
        };
        let cfg = TrainingConfig { batch_size: 4, seed: 11, ..Default::default() };
        let aug = toy_aug(16, 16);

        let (child, log) = finetune(&parent, train_cases, val_cases, &transfer, &cfg, &aug).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(child.provenance.origin, "finetuned");
        assert_eq!(child.provenance.parent.as_deref(), Some(parent.bundle_id().as_str()));
        assert_eq!(child.provenance.epochs, 2);

        // Frozen parameters are bitwise identical to the parent; at least one
        // trainable parameter moved.
        let parent_params = parent.net.params();
        let mut trainable_changed = false;
        for ((name, before), (_, after)) in parent_params.iter().zip(child.net.params()) {
            let same = before
                .iter()
                .zip(after.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if child.is_trainable(name) {
                trainable_changed |= !same;
            } else {
                assert!(same, "frozen parameter {name} changed");
            }
        }
        assert!(trainable_changed, "no trainable parameter moved");
        assert_eq!(
            child.trainable_blocks().iter().filter(|(_, &t)| t).map(|(b, _)| b.as_str()).collect::<Vec<_>>(),
            vec!["enc1", "enc2"]
        );
    }

    #[test]
    fn subsample_counts_round_half_up_with_floor_one() {
        assert_eq!(subsample_count(1.0, 12), 12);
        assert_eq!(subsample_count(0.1, 12), 1);
        assert_eq!(subsample_count(0.5, 5), 3);
        assert_eq!(subsample_count(0.01, 10), 1);
        assert_eq!(subsample_count(0.25, 68), 17);
    }

    #[test]
    fn per_center_counts_split_budgets_evenly() {
        assert_eq!(per_center_count(20, 2), 10);
        assert_eq!(per_center_count(44, 4), 11);
        assert_eq!(per_center_count(46, 4), 12);
    }

    #[test]
    fn center_mixing_is_exact_deterministic_and_guarded() {
        let pool = |center: &str, train: usize, val: usize| CenterPool {
            center_id: center.into(),
            train: (0..train).map(|i| toy_case(i, center)).collect(),
            val: (100..100 + val).map(|i| toy_case(i, center)).collect(),
        };
        let pools = [pool("a", 5, 2), pool("b", 4, 2)];
        let counts = [
            MixCount { center_id: "a".into(), train: 3, val: 1 },
            MixCount { center_id: "b".into(), train: 3, val: 1 },
        ];
        let (train, val) = mix_centers(&pools, &counts, 42).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(val.len(), 2);
        assert_eq!(train.iter().filter(|c| c.center_id == "a").count(), 3);
        assert_eq!(train.iter().filter(|c| c.center_id == "b").count(), 3);

        let (train2, _) = mix_centers(&pools, &counts, 42).unwrap();
        let ids = |cs: &[CaseRecord]| cs.iter().map(|c| c.case_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));

        let over = [MixCount { center_id: "b".into(), train: 5, val: 0 }];
        let err = mix_centers(&pools, &over, 42).unwrap_err().to_string();
        assert!(err.contains("'b'"), "error does not name the center: {err}");

        let unknown = [MixCount { center_id: "zz".into(), train: 1, val: 0 }];
        assert!(mix_centers(&pools, &unknown, 42).is_err());
    }

    #[test]
    fn train_log_round_trips_through_csv_and_header() {
        let log = TrainLog {
            seed: 9,
            config_hash: "abc123def456".into(),
            best_epoch: 2,
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 1.25,
                    val_loss: 1.5,
                    val_dice_pool: 0.25,
                    val_dice_myo: 0.15,
                    seconds: 0.5,
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 0.75,
                    val_loss: 1.0,
                    val_dice_pool: 0.5,
                    val_dice_myo: 0.3,
                    seconds: 0.5,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,train_loss,val_loss,val_dice_pool,val_dice_myo,seconds");
        assert!(lines[2].starts_with("2,0.750000,1.000000,0.500000,0.300000,"));

        let header = log.header_json();
        assert_eq!(header["seed"], 9);
        assert_eq!(header["best_epoch"], 2);
        assert!((header["best_val_dice"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    }
}

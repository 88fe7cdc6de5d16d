//! The four comparison experiments: each runs a grid of (training setting x
//! test center) evaluations from one declarative config and writes a CSV
//! report plus chart images. All grids share the same protocol: models are
//! fitted on train/val pools only, scored on test pools only, and a case can
//! never appear on both sides of that line.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::AugmentationConfig;
use crate::core::{CaseRecord, ExperimentConfig, Split, SplitSpec};
use crate::data_io::{assign_splits, load_dataset, load_manifest, minmax_normalize};
use crate::error::{Error, Result};
use crate::harmonize::{build_reference_histogram, train_translator};
use crate::segnet::{ModelBundle, Part};
use crate::trainer::{
    finetune, mix_centers, per_center_count, subsample_count, train, CenterPool, TransferConfig,
};
use crate::util::{config_hash, derive_seed};

use super::plot::{render_charts, Chart, ChartKind, Series};
use super::{evaluate, Harmonizer, Segmenter};

// ---------------------------------------------------------------------------
// Experiment identity
// ---------------------------------------------------------------------------

/// The four comparisons, named by the generalization strategy under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    /// How far training-time augmentation carries a single-center model.
    Exp1Augmentation,
    /// Test-time intensity harmonization toward the training center.
    Exp2Harmonization,
    /// Fine-tuning a pretrained model on the target center.
    Exp3Transfer,
    /// Training on several centers at a fixed total budget.
    Exp4Multicenter,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [
        ExperimentId::Exp1Augmentation,
        ExperimentId::Exp2Harmonization,
        ExperimentId::Exp3Transfer,
        ExperimentId::Exp4Multicenter,
    ];

    /// Stable identifier used in file names and the report CSV.
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::Exp1Augmentation => "exp1_augmentation",
            ExperimentId::Exp2Harmonization => "exp2_harmonization",
            ExperimentId::Exp3Transfer => "exp3_transfer",
            ExperimentId::Exp4Multicenter => "exp4_multicenter",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    /// Accepts the full identifier or the short form `exp1` ... `exp4`.
    fn from_str(s: &str) -> Result<Self> {
        for id in ExperimentId::ALL {
            let full = id.as_str();
            let short = &full[..4];
            if s == full || s == short {
                return Ok(id);
            }
        }
        Err(Error::parameter(format!(
            "unknown experiment '{s}' (expected exp1_augmentation, exp2_harmonization, \
             exp3_transfer or exp4_multicenter)"
        )))
    }
}

// ---------------------------------------------------------------------------
// Center pools
// ---------------------------------------------------------------------------

/// One center's cases partitioned into the three roles.
#[derive(Clone, Debug)]
pub struct CenterData {
    pub center_id: String,
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
}

impl CenterData {
    fn can_train(&self) -> bool {
        !self.train.is_empty() && !self.val.is_empty()
    }
}

/// Assign splits within one center's case list and partition it. All cases
/// must belong to the same center.
pub fn split_center(cases: Vec<CaseRecord>, spec: &SplitSpec) -> Result<CenterData> {
    let Some(first) = cases.first() else {
        return Err(Error::validation("cannot split an empty case list"));
    };
    let center_id = first.center_id.clone();
    if let Some(other) = cases.iter().find(|c| c.center_id != center_id) {
        return Err(Error::validation(format!(
            "split_center got cases from both '{center_id}' and '{}'",
            other.center_id
        )));
    }
    let assigned = assign_splits(cases, spec)?;
    let mut data = CenterData {
        center_id,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for case in assigned {
        match case.split {
            Split::Train => data.train.push(case),
            Split::Val => data.val.push(case),
            Split::Test => data.test.push(case),
            Split::Unassigned => unreachable!("assign_splits leaves no case unassigned"),
        }
    }
    Ok(data)
}

/// Load every dataset of the config, min-max normalize each image to [0, 1]
/// (the working intensity space of everything downstream), and split each
/// center with its own seed derived from the split seed and the center id,
/// so adding a center never reshuffles the others. Any missing file or
/// malformed manifest fails here, before any training starts.
pub fn load_centers(cfg: &ExperimentConfig) -> Result<Vec<CenterData>> {
    cfg.validate()?;
    let mut centers = Vec::with_capacity(cfg.datasets.len());
    for ds in &cfg.datasets {
        let manifest = load_manifest(&ds.manifest)?;
        if manifest.center_id != ds.center_id {
            return Err(Error::validation(format!(
                "dataset '{}' points at a manifest for center '{}'",
                ds.center_id, manifest.center_id
            )));
        }
        let mut cases = load_dataset(&manifest)?;
        for case in &mut cases {
            case.image = minmax_normalize(&case.image)?;
        }
        let spec = SplitSpec {
            seed: derive_seed(cfg.split.seed, &format!("split:{}", ds.center_id)),
            ..cfg.split.clone()
        };
        centers.push(split_center(cases, &spec)?);
    }
    Ok(centers)
}

/// Refuse to score a model on any case that took part in fitting it. Case
/// identity is the (center, case id) pair.
fn ensure_disjoint(fitted: &[&[CaseRecord]], test: &[CaseRecord]) -> Result<()> {
    let fitted_ids: BTreeSet<(&str, &str)> = fitted
        .iter()
        .flat_map(|part| part.iter())
        .map(|c| (c.center_id.as_str(), c.case_id.as_str()))
        .collect();
    for case in test {
        if fitted_ids.contains(&(case.center_id.as_str(), case.case_id.as_str())) {
            return Err(Error::validation(format!(
                "case '{}' of center '{}' is in both the fitting and the test set",
                case.case_id, case.center_id
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One grid cell: a training setting scored on one center's test pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub train_setting: String,
    pub test_center: String,
    pub cases: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
}

/// A finished experiment: all grid cells plus the identity of the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    /// Write the grid as CSV, six decimals, deterministic byte-for-byte.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("experiment,train_setting,test_center,cases,mean_dice,std_dice\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6}\n",
                self.experiment.as_str(),
                r.train_setting,
                r.test_center,
                r.cases,
                r.mean_dice,
                r.std_dice
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Mean Dice of one grid cell, if present.
    pub fn dice(&self, train_setting: &str, test_center: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.train_setting == train_setting && r.test_center == test_center)
            .map(|r| r.mean_dice)
    }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct ExpOutput {
    rows: Vec<ReportRow>,
    /// (file name, panels) per chart image.
    charts: Vec<(String, Vec<Chart>)>,
    /// (file name, contents) for extra CSV files beyond the main report.
    extra_csv: Vec<(String, String)>,
}

/// Load the config's datasets and run one experiment into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, id: ExperimentId, out_dir: &Path) -> Result<ExperimentReport> {
    let centers = load_centers(cfg)?;
    run_experiment_on(cfg, id, &centers, out_dir)
}

/// Run one experiment over already-loaded center pools, writing into
/// `out_dir`: `<id>.csv` (the grid), `<id>.json` (the same report plus run
/// identity), chart PNGs, and any experiment-specific extra CSVs. The same
/// config and data produce byte-identical outputs.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    id: ExperimentId,
    centers: &[CenterData],
    out_dir: &Path,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let output = match id {
        ExperimentId::Exp1Augmentation => exp1(cfg, centers)?,
        ExperimentId::Exp2Harmonization => exp2(cfg, centers)?,
        ExperimentId::Exp3Transfer => exp3(cfg, centers)?,
        ExperimentId::Exp4Multicenter => exp4(cfg, centers)?,
    };

    let report = ExperimentReport {
        experiment: id,
        seed: cfg.seed,
        config_hash: config_hash(&json!({ "experiment": id, "config": cfg })),
        rows: output.rows,
    };
    report.write_csv(&out_dir.join(format!("{}.csv", id.as_str())))?;
    let json_path = out_dir.join(format!("{}.json", id.as_str()));
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    for (name, contents) in &output.extra_csv {
        let path = out_dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    }
    for (name, panels) in &output.charts {
        render_charts(panels, &out_dir.join(name))?;
    }
    Ok(report)
}

/// Score a fitted model on one center's test pool and append the row.
/// Returns the row's mean Dice for chart assembly.
fn score_on(
    rows: &mut Vec<ReportRow>,
    train_setting: &str,
    bundle: &ModelBundle,
    fitted_on: &[&[CaseRecord]],
    center: &CenterData,
    harmonizer: &Harmonizer,
    size: (usize, usize),
) -> Result<f64> {
    ensure_disjoint(fitted_on, &center.test)?;
    let eval = evaluate(&Segmenter::Network(bundle), &center.test, harmonizer, size)?;
    if eval.cases.is_empty() {
        return Err(Error::validation(format!(
            "center '{}' has no labeled test cases to score",
            center.center_id
        )));
    }
    rows.push(ReportRow {
        train_setting: train_setting.to_string(),
        test_center: center.center_id.clone(),
        cases: eval.cases.len(),
        mean_dice: eval.mean_dice,
        std_dice: eval.std_dice,
    });
    Ok(eval.mean_dice)
}

fn trainable<'a>(centers: &'a [CenterData]) -> Vec<&'a CenterData> {
    centers.iter().filter(|c| c.can_train()).collect()
}

fn testable<'a>(centers: &'a [CenterData]) -> Vec<&'a CenterData> {
    centers.iter().filter(|c| !c.test.is_empty()).collect()
}

// ---------------------------------------------------------------------------
// Experiment 1: augmentation
// ---------------------------------------------------------------------------

/// The three augmentation settings compared in experiment 1, applied on top
/// of the config's augmentation parameters.
fn augmentation_modes(base: &AugmentationConfig) -> [(&'static str, AugmentationConfig); 3] {
    [
        (
            "none",
            AugmentationConfig {
                enable_spatial: false,
                enable_intensity: false,
                ..base.clone()
            },
        ),
        (
            "spatial",
            AugmentationConfig {
                enable_spatial: true,
                enable_intensity: false,
                ..base.clone()
            },
        ),
        (
            "spatial+intensity",
            AugmentationConfig {
                enable_spatial: true,
                enable_intensity: true,
                ..base.clone()
            },
        ),
    ]
}

/// For every center with training data: train one model per augmentation
/// setting and score each on every center's test pool. Shows how much of the
/// cross-center gap augmentation alone closes.
fn exp1(cfg: &ExperimentConfig, centers: &[CenterData]) -> Result<ExpOutput> {
    let sources = trainable(centers);
    let targets = testable(centers);
    if sources.is_empty() {
        return Err(Error::validation("experiment needs a center with train and val cases"));
    }
    if targets.is_empty() {
        return Err(Error::validation("experiment needs a center with test cases"));
    }
    let size = cfg.augmentation.crop_size;
    let mut rows = Vec::new();
    let mut charts = Vec::new();

    for source in &sources {
        let mut panel = Chart::unit(
            format!("trained on {}: dice by test center", source.center_id),
            ChartKind::Bars,
            targets.iter().map(|c| c.center_id.clone()).collect(),
        );
        for (mode, aug) in augmentation_modes(&cfg.augmentation) {
            let (bundle, _) = train(&source.train, &source.val, &cfg.network, &cfg.training, &aug)?;
            let setting = format!("{}|aug:{mode}", source.center_id);
            let mut values = Vec::new();
            for target in &targets {
                let dice = score_on(
                    &mut rows,
                    &setting,
                    &bundle,
                    &[source.train.as_slice(), source.val.as_slice()],
                    target,
                    &Harmonizer::None,
                    size,
                )?;
                values.push(dice);
            }
            panel.series.push(Series {
                label: format!("aug:{mode}"),
                values,
            });
        }
        charts.push((
            format!("exp1_augmentation_{}_all.png", source.center_id),
            vec![panel],
        ));
    }
    Ok(ExpOutput {
        rows,
        charts,
        extra_csv: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Experiment 2: test-time harmonization
// ---------------------------------------------------------------------------

/// Train once on the first center, then score every other center's test pool
/// three ways: unchanged, histogram-matched onto the source distribution,
/// and passed through a learned translation toward the source domain. The
/// translator for each target is trained on the source and target train
/// pools only.
fn exp2(cfg: &ExperimentConfig, centers: &[CenterData]) -> Result<ExpOutput> {
    let source = centers
        .first()
        .filter(|c| c.can_train())
        .ok_or_else(|| Error::validation("the first dataset must have train and val cases"))?;
    let targets: Vec<&CenterData> = centers[1..].iter().filter(|c| !c.test.is_empty()).collect();
    if targets.is_empty() {
        return Err(Error::validation(
            "harmonization needs a second center with test cases",
        ));
    }
    let size = cfg.augmentation.crop_size;
    if size.0 != size.1 || size.0 != cfg.translator.image_size {
        return Err(Error::config(format!(
            "translator image_size {} must equal the square crop size {}x{}",
            cfg.translator.image_size, size.0, size.1
        )));
    }

    let (bundle, _) = train(&source.train, &source.val, &cfg.network, &cfg.training, &cfg.augmentation)?;
    let reference = build_reference_histogram(&source.train)?;
    let fitted: [&[CaseRecord]; 2] = [&source.train, &source.val];

    let mut rows = Vec::new();
    // Within-center reference point, no harmonization.
    if !source.test.is_empty() {
        score_on(
            &mut rows,
            &format!("{}|harmonize:none", source.center_id),
            &bundle,
            &fitted,
            source,
            &Harmonizer::None,
            size,
        )?;
    }

    let mut panel = Chart::unit(
        format!("trained on {}: dice under harmonization", source.center_id),
        ChartKind::Bars,
        targets.iter().map(|c| c.center_id.clone()).collect(),
    );
    let mut none_values = Vec::new();
    let mut hist_values = Vec::new();
    let mut trans_values = Vec::new();

    for target in &targets {
        let setting = |mode: &str| format!("{}|harmonize:{mode}", source.center_id);
        none_values.push(score_on(
            &mut rows,
            &setting("none"),
            &bundle,
            &fitted,
            target,
            &Harmonizer::None,
            size,
        )?);
        hist_values.push(score_on(
            &mut rows,
            &setting("histogram"),
            &bundle,
            &fitted,
            target,
            &Harmonizer::Histogram(&reference),
            size,
        )?);
        if target.train.is_empty() {
            eprintln!(
                "notice: center '{}' has no train cases to fit a translator; skipping that row",
                target.center_id
            );
            trans_values.push(f64::NAN);
            continue;
        }
        let translator = train_translator(&source.train, &target.train, &cfg.translator)?;
        trans_values.push(score_on(
            &mut rows,
            &setting("translator"),
            &bundle,
            &fitted,
            target,
            &Harmonizer::Translator(&translator),
            size,
        )?);
    }

    for (label, values) in [
        ("none", none_values),
        ("histogram", hist_values),
        ("translator", trans_values),
    ] {
        panel.series.push(Series {
            label: label.into(),
            values,
        });
    }
    Ok(ExpOutput {
        rows,
        charts: vec![(
            format!("exp2_harmonization_{}_all.png", source.center_id),
            vec![panel],
        )],
        extra_csv: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Experiment 3: transfer learning
// ---------------------------------------------------------------------------

const TRANSFER_FRACTIONS: [f64; 4] = [0.1, 0.25, 0.5, 1.0];

fn part_label(part: Part) -> &'static str {
    match part {
        Part::Encoder => "encoder",
        Part::Decoder => "decoder",
    }
}

/// Fallback fine-tuning setting when the config gives none: retune every
/// encoder block except the bottleneck, which transfers best across centers.
fn default_transfer(levels: usize) -> TransferConfig {
    TransferConfig {
        k_blocks: levels.saturating_sub(1).max(1),
        ..TransferConfig::default()
    }
}

/// Pretrain on the first center, then adapt to the second center's train
/// pool: a sweep over which blocks stay trainable (encoder vs decoder, first
/// k blocks) at the full target budget, and a sweep over the target data
/// fraction comparing fine-tuning against training from scratch on exactly
/// the same subsample. Everything is scored on the target's test pool.
fn exp3(cfg: &ExperimentConfig, centers: &[CenterData]) -> Result<ExpOutput> {
    if centers.len() < 2 {
        return Err(Error::validation("transfer needs two centers: parent then target"));
    }
    let parent_center = &centers[0];
    let target = &centers[1];
    if !parent_center.can_train() {
        return Err(Error::validation("the parent center must have train and val cases"));
    }
    if !target.can_train() || target.test.is_empty() {
        return Err(Error::validation("the target center must have train, val and test cases"));
    }
    let size = cfg.augmentation.crop_size;
    let levels = cfg.network.effective().levels;
    let base_transfer = cfg.transfer.clone().unwrap_or_else(|| default_transfer(levels));
    let pair = format!("{}->{}", parent_center.center_id, target.center_id);

    let (parent, _) = train(
        &parent_center.train,
        &parent_center.val,
        &cfg.network,
        &cfg.training,
        &cfg.augmentation,
    )?;

    let mut rows = Vec::new();
    // The untuned parent on the target: what transfer starts from.
    let parent_fitted: [&[CaseRecord]; 2] = [&parent_center.train, &parent_center.val];
    let both_fitted: [&[CaseRecord]; 4] = [
        &parent_center.train,
        &parent_center.val,
        &target.train,
        &target.val,
    ];
    score_on(
        &mut rows,
        &format!("{}|transfer:none", parent_center.center_id),
        &parent,
        &parent_fitted,
        target,
        &Harmonizer::None,
        size,
    )?;

    // Which blocks to retune, at the full target budget.
    let mut depth_panel = Chart::unit(
        format!("{pair}: trainable blocks vs dice"),
        ChartKind::Lines,
        (1..=levels).map(|k| format!("k{k}")).collect(),
    );
    for part in [Part::Encoder, Part::Decoder] {
        let mut values = Vec::new();
        for k in 1..=levels {
            let transfer = TransferConfig {
                part,
                k_blocks: k,
                data_fraction: 1.0,
                ..base_transfer.clone()
            };
            let (tuned, _) = finetune(
                &parent,
                &target.train,
                &target.val,
                &transfer,
                &cfg.training,
                &cfg.augmentation,
            )?;
            values.push(score_on(
                &mut rows,
                &format!("{pair}|tune:{}:k{k}", part_label(part)),
                &tuned,
                &both_fitted,
                target,
                &Harmonizer::None,
                size,
            )?);
        }
        depth_panel.series.push(Series {
            label: part_label(part).into(),
            values,
        });
    }

    // Data-fraction sweep: fine-tuning vs from-scratch on the same subsample.
    let mut fraction_panel = Chart::unit(
        format!("{pair}: target data fraction vs dice"),
        ChartKind::Bars,
        TRANSFER_FRACTIONS.iter().map(|f| format!("{:.0}%", f * 100.0)).collect(),
    );
    let mut tune_values = Vec::new();
    let mut scratch_values = Vec::new();
    let mut fraction_csv = String::from("target_center,fraction,finetune_dice,scratch_dice\n");
    for &fraction in &TRANSFER_FRACTIONS {
        let transfer = TransferConfig {
            data_fraction: fraction,
            ..base_transfer.clone()
        };
        let (tuned, _) = finetune(
            &parent,
            &target.train,
            &target.val,
            &transfer,
            &cfg.training,
            &cfg.augmentation,
        )?;
        let tuned_dice = score_on(
            &mut rows,
            &format!("{pair}|tune:f{fraction:.2}"),
            &tuned,
            &both_fitted,
            target,
            &Harmonizer::None,
            size,
        )?;
        tune_values.push(tuned_dice);

        // The identical subsample the fine-tuning run saw: same seed tag,
        // same shuffle-and-truncate selection.
        let n = subsample_count(fraction, target.train.len());
        let mut order: Vec<usize> = (0..target.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.training.seed,
            "finetune-subsample",
        )));
        order.truncate(n);
        let subsample: Vec<CaseRecord> = order.iter().map(|&i| target.train[i].clone()).collect();

        let (scratch, _) = train(&subsample, &target.val, &cfg.network, &cfg.training, &cfg.augmentation)?;
        let scratch_dice = score_on(
            &mut rows,
            &format!("{}|scratch:f{fraction:.2}", target.center_id),
            &scratch,
            &[subsample.as_slice(), target.val.as_slice()],
            target,
            &Harmonizer::None,
            size,
        )?;
        scratch_values.push(scratch_dice);
        fraction_csv.push_str(&format!(
            "{},{:.2},{:.6},{:.6}\n",
            target.center_id, fraction, tuned_dice, scratch_dice
        ));
    }
    fraction_panel.series.push(Series {
        label: "finetune".into(),
        values: tune_values,
    });
    fraction_panel.series.push(Series {
        label: "scratch".into(),
        values: scratch_values,
    });

    Ok(ExpOutput {
        rows,
        charts: vec![(
            format!(
                "exp3_transfer_{}_{}.png",
                parent_center.center_id, target.center_id
            ),
            vec![depth_panel, fraction_panel],
        )],
        extra_csv: vec![("exp3_fractions.csv".into(), fraction_csv)],
    })
}

// ---------------------------------------------------------------------------
// Experiment 4: multi-center training
// ---------------------------------------------------------------------------

/// Train on growing prefixes of the center list at a fixed total budget (the
/// smallest train pool among the contributing centers, split evenly), and
/// score each model on every center's test pool. Shows what adding a center
/// buys when the amount of data is held constant.
fn exp4(cfg: &ExperimentConfig, centers: &[CenterData]) -> Result<ExpOutput> {
    let sources = trainable(centers);
    let targets = testable(centers);
    if sources.len() < 2 {
        return Err(Error::validation(
            "multi-center training needs at least two centers with train and val cases",
        ));
    }
    if targets.is_empty() {
        return Err(Error::validation("experiment needs a center with test cases"));
    }
    let size = cfg.augmentation.crop_size;
    let budget_train = sources.iter().map(|c| c.train.len()).min().unwrap();
    let budget_val = sources.iter().map(|c| c.val.len()).min().unwrap();
    let pools: Vec<CenterPool> = sources
        .iter()
        .map(|c| CenterPool {
            center_id: c.center_id.clone(),
            train: c.train.clone(),
            val: c.val.clone(),
        })
        .collect();

    let mut rows = Vec::new();
    let mut dice_by_target: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    let mut combo_labels = Vec::new();

    for k in 1..=sources.len() {
        let combo = &sources[..k];
        let label = combo
            .iter()
            .map(|c| c.center_id.as_str())
            .collect::<Vec<_>>()
            .join("+");
        combo_labels.push(label.clone());
        let counts: Vec<crate::core::MixCount> = combo
            .iter()
            .map(|c| crate::core::MixCount {
                center_id: c.center_id.clone(),
                train: per_center_count(budget_train, k),
                val: per_center_count(budget_val, k).max(1),
            })
            .collect();
        let (train_set, val_set) = mix_centers(&pools, &counts, derive_seed(cfg.seed, &format!("mix:{k}")))?;
        let (bundle, _) = train(&train_set, &val_set, &cfg.network, &cfg.training, &cfg.augmentation)?;
        let setting = format!("{label}|centers:{k}");
        for (t, target) in targets.iter().enumerate() {
            let dice = score_on(
                &mut rows,
                &setting,
                &bundle,
                &[train_set.as_slice(), val_set.as_slice()],
                target,
                &Harmonizer::None,
                size,
            )?;
            dice_by_target[t].push(dice);
        }
    }

    let mut panel = Chart::unit(
        "dice vs number of training centers (fixed budget)",
        ChartKind::Lines,
        combo_labels,
    );
    for (t, target) in targets.iter().enumerate() {
        panel.series.push(Series {
            label: format!("test:{}", target.center_id),
            values: dice_by_target[t].clone(),
        });
    }
    Ok(ExpOutput {
        rows,
        charts: vec![("exp4_multicenter_all_all.png".into(), vec![panel])],
        extra_csv: Vec::new(),
    })
}

// ---------------------------------------------------------------------------

//! Domain types shared by every other module: volumes, label maps, center
//! metadata, case records, split specifications and the experiment config.
//!
//! Axis convention: all 3D arrays are indexed as (row, col, slice) with the
//! column index fastest in memory; slices are the short-axis stack direction.
//! Label codes are fixed project-wide: 0 = background, 1 = LV blood pool,
//! 2 = myocardium. Source datasets with extra codes (e.g. scar, no-reflow)
//! are collapsed onto myocardium at ingestion.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::harmonize::TranslatorConfig;
use crate::segnet::NetworkConfig;
use crate::trainer::{TrainingConfig, TransferConfig};

pub const BACKGROUND: u8 = 0;
pub const BLOOD_POOL: u8 = 1;
pub const MYOCARDIUM: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// A 3D scalar image with per-axis physical spacing in millimetres.
///
/// Intensities are in arbitrary scanner units before normalization and in
/// [0,1] afterwards. Storage is a flat `Vec<f32>` with the column index
/// fastest: `voxels[c + cols*(r + rows*s)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Vec<f32>,
    /// (rows, cols, slices)
    pub shape: (usize, usize, usize),
    /// (row mm, col mm, slice thickness mm)
    pub spacing: (f32, f32, f32),
}

impl Volume {
    pub fn new(shape: (usize, usize, usize), spacing: (f32, f32, f32), voxels: Vec<f32>) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if voxels.len() != n {
            return Err(Error::ShapeMismatch {
                context: "volume construction".into(),
                expected: vec![n],
                actual: vec![voxels.len()],
            });
        }
        Ok(Volume { voxels, shape, spacing })
    }

    pub fn zeros(shape: (usize, usize, usize), spacing: (f32, f32, f32)) -> Self {
        Volume {
            voxels: vec![0.0; shape.0 * shape.1 * shape.2],
            shape,
            spacing,
        }
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize, s: usize) -> usize {
        c + self.shape.1 * (r + self.shape.0 * s)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, s: usize) -> f32 {
        self.voxels[self.idx(r, c, s)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, s: usize, v: f32) {
        let i = self.idx(r, c, s);
        self.voxels[i] = v;
    }

    pub fn num_slices(&self) -> usize {
        self.shape.2
    }

    /// Extract slice `s` as an f64 image (rows x cols, col fastest).
    pub fn slice(&self, s: usize) -> Slice2D {
        let (rows, cols, _) = self.shape;
        let start = cols * rows * s;
        let values = self.voxels[start..start + rows * cols]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Slice2D { rows, cols, values }
    }

    pub fn set_slice(&mut self, s: usize, slice: &Slice2D) {
        let (rows, cols, _) = self.shape;
        assert_eq!((slice.rows, slice.cols), (rows, cols), "slice shape mismatch");
        let start = cols * rows * s;
        for (dst, &src) in self.voxels[start..start + rows * cols].iter_mut().zip(&slice.values) {
            *dst = src as f32;
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn has_non_finite(&self) -> bool {
        self.voxels.iter().any(|v| !v.is_finite())
    }
}

/// A 3D integer label map aligned voxel-for-voxel with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub labels: Vec<u8>,
    /// (rows, cols, slices) — same convention as [`Volume`].
    pub shape: (usize, usize, usize),
}

impl LabelMap {
    pub fn new(shape: (usize, usize, usize), labels: Vec<u8>) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                context: "label map construction".into(),
                expected: vec![n],
                actual: vec![labels.len()],
            });
        }
        Ok(LabelMap { labels, shape })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        LabelMap {
            labels: vec![0; shape.0 * shape.1 * shape.2],
            shape,
        }
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize, s: usize) -> usize {
        c + self.shape.1 * (r + self.shape.0 * s)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, s: usize) -> u8 {
        self.labels[self.idx(r, c, s)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, s: usize, v: u8) {
        let i = self.idx(r, c, s);
        self.labels[i] = v;
    }

    pub fn slice(&self, s: usize) -> Labels2D {
        let (rows, cols, _) = self.shape;
        let start = cols * rows * s;
        Labels2D {
            rows,
            cols,
            codes: self.labels[start..start + rows * cols].to_vec(),
        }
    }

    pub fn set_slice(&mut self, s: usize, slice: &Labels2D) {
        let (rows, cols, _) = self.shape;
        assert_eq!((slice.rows, slice.cols), (rows, cols), "label slice shape mismatch");
        let start = cols * rows * s;
        self.labels[start..start + rows * cols].copy_from_slice(&slice.codes);
    }

    /// True when every code is one of {0, 1, 2}.
    pub fn codes_valid(&self) -> bool {
        self.labels.iter().all(|&l| l <= MYOCARDIUM)
    }
}

/// One 2D image slice, f64 intensities, col index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Slice2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Slice2D {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        c + self.cols * r
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[self.idx(r, c)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let i = self.idx(r, c);
        self.values[i] = v;
    }

    /// Center-crop and/or zero-pad to exactly (rows, cols); per axis, excess
    /// is cropped symmetrically and deficit padded symmetrically (the extra
    /// pixel of an odd difference goes to the bottom/right).
    pub fn crop_or_pad(&self, rows: usize, cols: usize) -> Slice2D {
        let mut out = Slice2D::zeros(rows, cols);
        let (src_r0, dst_r0, nr) = crop_axis(self.rows, rows);
        let (src_c0, dst_c0, nc) = crop_axis(self.cols, cols);
        for r in 0..nr {
            for c in 0..nc {
                let v = self.get(src_r0 + r, src_c0 + c);
                out.set(dst_r0 + r, dst_c0 + c, v);
            }
        }
        out
    }
}

/// For one axis of a centered crop/pad from length `n` to `m`: returns
/// (source start, destination start, copied length).
pub(crate) fn crop_axis(n: usize, m: usize) -> (usize, usize, usize) {
    if n >= m {
        ((n - m) / 2, 0, m)
    } else {
        (0, (m - n) / 2, n)
    }
}

/// One 2D label slice, u8 codes, col index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels2D {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u8>,
}

impl Labels2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Labels2D {
            rows,
            cols,
            codes: vec![0; rows * cols],
        }
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        c + self.cols * r
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.codes[self.idx(r, c)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        let i = self.idx(r, c);
        self.codes[i] = v;
    }

    /// Center-crop and/or background-pad to exactly (rows, cols); same
    /// geometry as [`Slice2D::crop_or_pad`].
    pub fn crop_or_pad(&self, rows: usize, cols: usize) -> Labels2D {
        let mut out = Labels2D::zeros(rows, cols);
        let (src_r0, dst_r0, nr) = crop_axis(self.rows, rows);
        let (src_c0, dst_c0, nc) = crop_axis(self.cols, cols);
        for r in 0..nr {
            for c in 0..nc {
                let v = self.get(src_r0 + r, src_c0 + c);
                out.set(dst_r0 + r, dst_c0 + c, v);
            }
        }
        out
    }
}

/// Metadata describing one clinical (or synthetic) center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterProfile {
    pub center_id: String,
    pub country: String,
    pub scanner: String,
    /// Acquisition time after contrast injection, when reported.
    pub imaging_time_minutes: Option<f32>,
    /// (min, max) in-plane resolution in mm.
    pub typical_in_plane_mm: (f32, f32),
    /// (min, max) slice thickness in mm.
    pub typical_thickness_mm: (f32, f32),
}

impl CenterProfile {
    pub fn validate(&self) -> Result<()> {
        if self.center_id.is_empty() {
            return Err(Error::validation("center_id must be non-empty"));
        }
        if self.typical_in_plane_mm.0 > self.typical_in_plane_mm.1 {
            return Err(Error::validation(format!(
                "center {}: in-plane range min > max",
                self.center_id
            )));
        }
        if self.typical_thickness_mm.0 > self.typical_thickness_mm.1 {
            return Err(Error::validation(format!(
                "center {}: thickness range min > max",
                self.center_id
            )));
        }
        Ok(())
    }
}

/// Registry of center profiles keyed by id; duplicate ids are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CenterRegistry {
    centers: BTreeMap<String, CenterProfile>,
}

impl CenterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, profile: CenterProfile) -> Result<()> {
        profile.validate()?;
        if self.centers.contains_key(&profile.center_id) {
            return Err(Error::validation(format!(
                "duplicate center_id '{}' in registry",
                profile.center_id
            )));
        }
        self.centers.insert(profile.center_id.clone(), profile);
        Ok(())
    }

    pub fn get(&self, center_id: &str) -> Option<&CenterProfile> {
        self.centers.get(center_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.centers.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// The four clinical centers this project models, with published
    /// acquisition characteristics.
    pub fn clinical() -> Self {
        let mut reg = Self::new();
        for profile in [
            CenterProfile {
                center_id: "emidec".into(),
                country: "France".into(),
                scanner: "1.5T and 3T Siemens".into(),
                imaging_time_minutes: Some(10.0),
                typical_in_plane_mm: (1.37, 1.88),
                typical_thickness_mm: (8.0, 13.0),
            },
            CenterProfile {
                center_id: "mscmr".into(),
                country: "China".into(),
                scanner: "1.5T Philips".into(),
                imaging_time_minutes: None,
                typical_in_plane_mm: (0.75, 0.75),
                typical_thickness_mm: (5.0, 5.0),
            },
            CenterProfile {
                center_id: "vh".into(),
                country: "Spain".into(),
                scanner: "1.5T GE".into(),
                imaging_time_minutes: Some(10.0),
                typical_in_plane_mm: (1.48, 1.68),
                typical_thickness_mm: (10.0, 10.0),
            },
            CenterProfile {
                center_id: "stpau".into(),
                country: "Spain".into(),
                scanner: "1.5T Philips".into(),
                // Reported as a 7-10 minute window; midpoint kept here.
                imaging_time_minutes: Some(8.5),
                typical_in_plane_mm: (1.18, 1.18),
                typical_thickness_mm: (5.0, 5.0),
            },
        ] {
            reg.register(profile).expect("builtin profiles are valid");
        }
        reg
    }
}

/// Which partition of a dataset a case belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

/// One subject: image volume, optional ground truth, center identity, split.
#[derive(Clone, Debug)]
pub struct CaseRecord {
    pub case_id: String,
    pub center_id: String,
    pub image: Volume,
    pub labels: Option<LabelMap>,
    pub split: Split,
}

/// Check all type invariants of a case; returns a (possibly empty) list of
/// human-readable violations. Never fails on content — reporting only.
pub fn validate_case(case: &CaseRecord) -> Vec<String> {
    let mut report = Vec::new();
    if case.case_id.is_empty() {
        report.push("case_id empty".to_string());
    }
    let (rows, cols, slices) = case.image.shape;
    if rows == 0 || cols == 0 || slices == 0 {
        report.push(format!("shape components must be >= 1, got {:?}", case.image.shape));
    }
    let (sr, sc, ss) = case.image.spacing;
    if sr <= 0.0 || sc <= 0.0 || ss <= 0.0 {
        report.push(format!("spacing components must be > 0, got {:?}", case.image.spacing));
    }
    if case.image.has_non_finite() {
        report.push("voxels contain NaN/Inf".to_string());
    }
    if let Some(labels) = &case.labels {
        if labels.shape != case.image.shape {
            report.push(format!(
                "shape mismatch: labels {:?} vs image {:?}",
                labels.shape, case.image.shape
            ));
        }
        if !labels.codes_valid() {
            let bad: std::collections::BTreeSet<u8> = labels
                .labels
                .iter()
                .copied()
                .filter(|&l| l > MYOCARDIUM)
                .collect();
            report.push(format!("label codes outside {{0,1,2}}: {bad:?}"));
        }
    }
    report
}

/// How a dataset is partitioned: `test_count` cases are drawn first, the
/// remainder is split train/val by the two fractions (which must sum to 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.2,
            test_count: 15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "train_fraction + val_fraction must equal 1.0, got {} + {}",
                self.train_fraction, self.val_fraction
            )));
        }
        if self.train_fraction < 0.0 || self.val_fraction < 0.0 {
            return Err(Error::validation("split fractions must be non-negative"));
        }
        Ok(())
    }
}

/// Reference to one dataset manifest on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub center_id: String,
    pub manifest: PathBuf,
}

/// Test-time harmonization mode for a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarmonizationMode {
    #[default]
    None,
    HistogramMatch,
    CycleTranslate,
}

/// Requested number of training/validation cases drawn from one center when
/// building a balanced multi-center training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixCount {
    pub center_id: String,
    pub train: usize,
    pub val: usize,
}

/// Declarative description of one run: which datasets, which generalization
/// strategy switches, network and training settings, one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetRef>,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub harmonization: HarmonizationMode,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    #[serde(default)]
    pub translator: TranslatorConfig,
    #[serde(default)]
    pub multicenter_mix: Option<Vec<MixCount>>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::validation("config lists no datasets"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.center_id.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate dataset center_id '{}'",
                    d.center_id
                )));
            }
        }
        if let Some(mix) = &self.multicenter_mix {
            for m in mix {
                if !seen.contains(m.center_id.as_str()) {
                    return Err(Error::validation(format!(
                        "multicenter_mix references unknown center '{}'",
                        m.center_id
                    )));
                }
            }
        }
        self.augmentation.validate()?;
        self.network.validate()?;
        self.training.validate()?;
        self.split.validate()?;
        self.translator.validate()?;
        if let Some(t) = &self.transfer {
            t.validate(&self.network)?;
        }
        Ok(())
    }
}

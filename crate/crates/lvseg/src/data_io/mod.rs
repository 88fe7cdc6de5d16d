//! Dataset ingestion and deterministic pre-processing: manifest-driven
//! loading of volumetric cases, reproducible train/val/test assignment, and
//! the fixed crop -> min-max normalization pipeline applied before any model
//! sees a voxel.

pub mod nifti;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{validate_case, CaseRecord, LabelMap, Split, SplitSpec, Volume, MYOCARDIUM};
use crate::error::{Error, Result};
use crate::util::derive_seed;

pub use nifti::{read_labels, read_volume, write_labels, write_volume};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// One row of a dataset manifest. Paths are as written in the file; after
/// [`load_manifest`] they are resolved relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

/// Description of one center's dataset: where its cases live and how the
/// source label codes map onto the working classes {0: background, 1: blood
/// pool, 2: myocardium}. Codes not listed in `label_remap` pass through
/// unchanged (and must already be working classes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub center_id: String,
    pub cases: Vec<ManifestCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_remap: Option<BTreeMap<u8, u8>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.center_id.is_empty() {
            return Err(Error::validation("manifest center_id is empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for case in &self.cases {
            if case.id.is_empty() {
                return Err(Error::validation("manifest contains a case with an empty id"));
            }
            if !seen.insert(&case.id) {
                return Err(Error::validation(format!("duplicate case id '{}' in manifest", case.id)));
            }
        }
        if let Some(remap) = &self.label_remap {
            for (&from, &to) in remap {
                if to > MYOCARDIUM {
                    return Err(Error::validation(format!(
                        "label_remap {from} -> {to} targets a code outside {{0,1,2}}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Read and validate a manifest JSON file, resolving relative case paths
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut manifest: DatasetManifest =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    manifest.validate().map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    for case in &mut manifest.cases {
        case.image = resolve(base, &case.image);
        case.labels = case.labels.take().map(|l| resolve(base, &l));
    }
    Ok(manifest)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load every case of a manifest: read image and labels, apply the label
/// remap, and check case invariants. Splits are left unassigned.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<CaseRecord>> {
    manifest.validate()?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for row in &manifest.cases {
        let image = read_volume(&row.image)?;
        let labels = match &row.labels {
            None => None,
            Some(path) => {
                let (mut map, _) = read_labels(path)?;
                if let Some(remap) = &manifest.label_remap {
                    for code in map.labels.iter_mut() {
                        if let Some(&to) = remap.get(code) {
                            *code = to;
                        }
                    }
                }
                if let Some(&bad) = map.labels.iter().find(|&&c| c > MYOCARDIUM) {
                    return Err(Error::validation(format!(
                        "case '{}': label code {bad} has no remap entry and is outside {{0,1,2}}",
                        row.id
                    )));
                }
                Some(map)
            }
        };
        let case = CaseRecord {
            case_id: row.id.clone(),
            center_id: manifest.center_id.clone(),
            image,
            labels,
            split: Split::Unassigned,
        };
        let report = validate_case(&case);
        if !report.is_empty() {
            return Err(Error::validation(format!(
                "case '{}' fails invariants: {}",
                row.id,
                report.join("; ")
            )));
        }
        cases.push(case);
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Split assignment
// ---------------------------------------------------------------------------

/// Partition cases into train/val/test: exactly `test_count` test cases are
/// drawn first (uniformly, deterministic in the seed), then the remainder is
/// split by the configured fractions with the validation share rounded down
/// (the leftover case of an odd split goes to training). Case order is
/// preserved; only the split field changes.
pub fn assign_splits(mut cases: Vec<CaseRecord>, spec: &SplitSpec) -> Result<Vec<CaseRecord>> {
    spec.validate()?;
    let n = cases.len();
    if spec.test_count >= n {
        return Err(Error::validation(format!(
            "test_count {} must be below the population size {n}",
            spec.test_count
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "split")));

    let remaining = n - spec.test_count;
    let val_count = (spec.val_fraction * remaining as f64).floor() as usize;
    for (rank, &idx) in order.iter().enumerate() {
        cases[idx].split = if rank < spec.test_count {
            Split::Test
        } else if rank < spec.test_count + val_count {
            Split::Val
        } else {
            Split::Train
        };
    }
    Ok(cases)
}

/// Cases of one split, cloned out of a mixed list.
pub fn cases_in_split(cases: &[CaseRecord], split: Split) -> Vec<CaseRecord> {
    cases.iter().filter(|c| c.split == split).cloned().collect()
}

/// Export `case_id,center_id,split` rows as CSV.
pub fn export_splits_csv(cases: &[CaseRecord], path: &Path) -> Result<()> {
    let mut out = String::from("case_id,center_id,split\n");
    for case in cases {
        out.push_str(&format!("{},{},{}\n", case.case_id, case.center_id, case.split.as_str()));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Pre-processing
// ---------------------------------------------------------------------------

/// Min-max normalize a volume to [0, 1]; a constant volume maps to all
/// zeros. Inputs must be finite.
pub fn minmax_normalize(volume: &Volume) -> Result<Volume> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &volume.voxels {
        if !v.is_finite() {
            return Err(Error::validation(format!("cannot normalize: non-finite voxel value {v}")));
        }
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
    let voxels = volume
        .voxels
        .iter()
        .map(|&v| ((v as f64 - lo) * scale) as f32)
        .collect();
    Volume::new(volume.shape, volume.spacing, voxels)
}

/// Center-crop/zero-pad every slice of a volume (and its labels, if given)
/// to the working in-plane size. Slice count and spacing are unchanged.
pub fn crop_or_pad(
    volume: &Volume,
    labels: Option<&LabelMap>,
    size: (usize, usize),
) -> Result<(Volume, Option<LabelMap>)> {
    let (rows, cols) = size;
    let slices = volume.num_slices();
    let mut voxels = Vec::with_capacity(rows * cols * slices);
    for s in 0..slices {
        let cropped = volume.slice(s).crop_or_pad(rows, cols);
        voxels.extend(cropped.values.iter().map(|&v| v as f32));
    }
    let out_vol = Volume::new((rows, cols, slices), volume.spacing, voxels)?;

    let out_labels = match labels {
        None => None,
        Some(map) => {
            let mut codes = Vec::with_capacity(rows * cols * map.shape.2);
            for s in 0..map.shape.2 {
                codes.extend(map.slice(s).crop_or_pad(rows, cols).codes);
            }
            Some(LabelMap::new((rows, cols, map.shape.2), codes)?)
        }
    };
    Ok((out_vol, out_labels))
}

/// Write a case's image (`<id>.nii.gz`) and labels (`<id>_gt.nii.gz`) into a
/// directory. Returns the written paths.
pub fn save_case(dir: &Path, case: &CaseRecord) -> Result<(PathBuf, Option<PathBuf>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image_path = dir.join(format!("{}.nii.gz", case.case_id));
    write_volume(&image_path, &case.image)?;
    let labels_path = match &case.labels {
        None => None,
        Some(map) => {
            let p = dir.join(format!("{}_gt.nii.gz", case.case_id));
            write_labels(&p, map, case.image.spacing)?;
            Some(p)
        }
    };
    Ok((image_path, labels_path))
}

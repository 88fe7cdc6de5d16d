//! Test-time intensity harmonization across centers.
//!
//! Scanners and acquisition protocols differ between centers, so the same
//! tissue lands at different positions of the intensity scale. This module
//! reshapes unseen-center images toward a reference center at prediction
//! time, leaving the segmentation model untouched. Two mechanisms:
//!
//! - histogram matching (here): a monotone intensity remap that makes an
//!   image's empirical distribution follow a stored reference distribution;
//! - learned translation ([`translator`]): an unpaired slice-to-slice
//!   translation network with cycle consistency.
//!
//! The reference distribution is stored as 256 pooled quantile values — an
//! inverse CDF sampled at evenly spaced probabilities — built from the
//! reference center's training images. Matching composes the inverse of the
//! input's own quantile function with the reference quantile function, so
//! the remap is monotone (pixel rank order is preserved) and its error is
//! bounded by the quantile bin width.

pub mod translator;

pub use translator::{
    load_translator, save_translator, train_translator, translate, translate_slice, Direction,
    GanEpochRecord, GanLog, TranslatorBundle, TranslatorConfig,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{CaseRecord, Volume};
use crate::error::{Error, Result};

/// Number of quantile levels describing an intensity distribution.
pub const HISTOGRAM_BINS: usize = 256;

/// A center's pooled intensity distribution, stored as its quantile function
/// sampled at probabilities k/255 for k = 0..=255. Values are monotone
/// non-decreasing and lie in [0,1] (normalized intensity scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceHistogram {
    pub center_id: String,
    pub quantile_values: Vec<f64>,
}

impl ReferenceHistogram {
    /// Check the stored invariants: exactly [`HISTOGRAM_BINS`] values, all
    /// finite, inside [0,1], and monotone non-decreasing.
    pub fn validate(&self) -> Result<()> {
        if self.quantile_values.len() != HISTOGRAM_BINS {
            return Err(Error::validation(format!(
                "reference histogram has {} quantile values, expected {HISTOGRAM_BINS}",
                self.quantile_values.len()
            )));
        }
        for (i, &v) in self.quantile_values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "quantile value {i} is {v}, outside [0,1]"
                )));
            }
        }
        if self.quantile_values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::validation(
                "quantile values are not monotone non-decreasing",
            ));
        }
        Ok(())
    }

    /// Write the histogram as JSON, creating parent directories as needed.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("reference histogram {}: {e}", path.display())))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read a histogram previously written by [`ReferenceHistogram::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let hist: ReferenceHistogram = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("reference histogram {}: {e}", path.display())))?;
        hist.validate()?;
        Ok(hist)
    }
}

/// Quantiles of a sorted sample at probabilities k/(bins-1), with linear
/// interpolation between order statistics.
fn quantiles_of_sorted(sorted: &[f64], bins: usize) -> Vec<f64> {
    assert!(!sorted.is_empty(), "quantiles of an empty sample");
    let n = sorted.len();
    (0..bins)
        .map(|k| {
            let p = k as f64 / (bins - 1) as f64;
            let h = p * (n - 1) as f64;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            if lo + 1 < n {
                sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
            } else {
                sorted[n - 1]
            }
        })
        .collect()
}

/// Pool every voxel of the given volumes (clamped into [0,1]) and return the
/// sorted sample.
fn pooled_sorted(volumes: &[&Volume]) -> Vec<f64> {
    let total: usize = volumes.iter().map(|v| v.voxels.len()).sum();
    let mut pool = Vec::with_capacity(total);
    for v in volumes {
        pool.extend(v.voxels.iter().map(|&x| (x as f64).max(0.0).min(1.0)));
    }
    pool.sort_by(f64::total_cmp);
    pool
}

fn joined_center_ids(cases: &[CaseRecord]) -> String {
    let mut ids: Vec<&str> = cases.iter().map(|c| c.center_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.join("+")
}

/// Build the pooled intensity distribution of a center's training images.
///
/// Every voxel of every case contributes to one pooled population whose 256
/// quantiles form the reference. Inputs are expected on the normalized [0,1]
/// scale; stray values are clamped into range rather than rejected. The
/// result is deterministic and independent of case order.
pub fn build_reference_histogram(cases: &[CaseRecord]) -> Result<ReferenceHistogram> {
    if cases.is_empty() {
        return Err(Error::validation(
            "cannot build a reference histogram from an empty case list",
        ));
    }
    let volumes: Vec<&Volume> = cases.iter().map(|c| &c.image).collect();
    let pool = pooled_sorted(&volumes);
    let hist = ReferenceHistogram {
        center_id: joined_center_ids(cases),
        quantile_values: quantiles_of_sorted(&pool, HISTOGRAM_BINS),
    };
    hist.validate()?;
    Ok(hist)
}

/// Fractional position of `x` in the quantile table `q` (the inverse
/// quantile function). Exact hits on a flat run map to the run's midpoint,
/// which keeps the lookup monotone and well-defined under ties.
fn inverse_quantile(q: &[f64], x: f64) -> f64 {
    let n = q.len();
    if x < q[0] {
        return 0.0;
    }
    if x > q[n - 1] {
        return (n - 1) as f64;
    }
    let hi = q.partition_point(|&v| v <= x); // first index with q[i] > x
    let lo = q.partition_point(|&v| v < x); // first index with q[i] >= x
    if lo < hi {
        // q[lo..hi] all equal x: midpoint of the run.
        return (lo as f64 + (hi - 1) as f64) / 2.0;
    }
    // Strictly inside the segment (q[hi-1], q[hi]).
    let i = hi - 1;
    i as f64 + (x - q[i]) / (q[i + 1] - q[i])
}

/// Value of the quantile table `q` at a fractional index `t` in [0, len-1].
fn quantile_at(q: &[f64], t: f64) -> f64 {
    let lo = t.floor() as usize;
    if lo + 1 >= q.len() {
        return q[q.len() - 1];
    }
    let frac = t - lo as f64;
    q[lo] * (1.0 - frac) + q[lo + 1] * frac
}

/// Remap a volume's intensities so their distribution follows `reference`.
///
/// Each voxel is sent through the inverse of the volume's own quantile
/// function and then through the reference quantile function. The remap is
/// monotone — pixel rank order is preserved, ties stay ties — and matching a
/// volume against its own histogram reproduces it up to one quantile bin.
/// Output values lie in [0,1]. Shape and spacing are unchanged.
pub fn histogram_match(v: &Volume, reference: &ReferenceHistogram) -> Volume {
    assert!(
        !reference.quantile_values.is_empty(),
        "reference histogram has no quantile values"
    );
    let src = quantiles_of_sorted(&pooled_sorted(&[v]), HISTOGRAM_BINS);
    let dst = &reference.quantile_values;
    let scale = (dst.len() - 1) as f64 / (src.len() - 1) as f64;
    let voxels: Vec<f32> = v
        .voxels
        .iter()
        .map(|&x| {
            let t = inverse_quantile(&src, (x as f64).max(0.0).min(1.0));
            quantile_at(dst, t * scale).max(0.0).min(1.0) as f32
        })
        .collect();
    Volume::new(v.shape, v.spacing, voxels).expect("shape is unchanged")
}

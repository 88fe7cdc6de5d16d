//! Spatial and intensity data augmentation for 2D short-axis slices.
//!
//! Eight operators — flips, rotation, spacing rescale, random crop, bilateral
//! smoothing, Gaussian noise, (inverse) gamma, brightness/contrast — each
//! included independently with a configurable probability per training
//! sample, spatial operators before intensity operators. Spatial operators
//! move image and labels through the same geometric map (linear interpolation
//! for intensities, nearest-neighbor for labels, background fill); intensity
//! operators never touch labels and keep intensities clipped to [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::core::{Labels2D, Slice2D};
use crate::error::{Error, Result};

/// Switches and parameter ranges for the augmentation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enable_spatial: bool,
    pub enable_intensity: bool,
    /// Probability that each individual operator is included in a sample.
    pub per_op_probability: f64,
    /// Rotation angles are sampled uniformly from ±this many degrees.
    pub rotation_limit_deg: f64,
    /// Simulated in-plane spacings (mm) the rescale operator samples from.
    pub rescale_mm_range: (f64, f64),
    /// Gaussian noise standard deviation range (intensity units).
    pub noise_sigma_range: (f64, f64),
    /// Gamma exponent range, shared by the forward and inverse variants.
    pub gamma_range: (f64, f64),
    /// Brightness offsets and contrast factors are both drawn from this range.
    pub brightness_contrast_range: (f64, f64),
    /// Output size of the random-crop operator (rows, cols).
    pub crop_size: (usize, usize),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enable_spatial: true,
            enable_intensity: true,
            per_op_probability: 0.2,
            rotation_limit_deg: 30.0,
            rescale_mm_range: (0.75, 1.88),
            noise_sigma_range: (0.0, 0.03),
            gamma_range: (0.7, 1.5),
            brightness_contrast_range: (-0.5, 0.5),
            crop_size: (256, 256),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// A configuration with every operator switched off (the pipeline becomes
    /// the identity).
    pub fn disabled() -> Self {
        AugmentationConfig {
            enable_spatial: false,
            enable_intensity: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_op_probability) {
            return Err(Error::validation(format!(
                "per_op_probability must be in [0,1], got {}",
                self.per_op_probability
            )));
        }
        if !self.rotation_limit_deg.is_finite() || self.rotation_limit_deg < 0.0 {
            return Err(Error::validation("rotation_limit_deg must be finite and >= 0"));
        }
        let ranges = [
            ("rescale_mm_range", self.rescale_mm_range),
            ("noise_sigma_range", self.noise_sigma_range),
            ("gamma_range", self.gamma_range),
            ("brightness_contrast_range", self.brightness_contrast_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::validation(format!("{name} must satisfy min <= max")));
            }
        }
        if self.noise_sigma_range.0 < 0.0 {
            return Err(Error::validation("noise sigmas must be >= 0"));
        }
        if self.rescale_mm_range.0 <= 0.0 {
            return Err(Error::validation("rescale spacings must be > 0"));
        }
        if self.gamma_range.0 <= 0.0 {
            return Err(Error::validation("gamma exponents must be > 0"));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::validation("crop_size must be >= 1 in both dimensions"));
        }
        Ok(())
    }
}

/// One augmented training sample plus a record of what produced it.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub image: Slice2D,
    pub labels: Labels2D,
    /// (operator name, sampled parameters) in application order.
    pub applied_ops: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    /// Mirror columns: column c maps to (cols - 1 - c).
    Horizontal,
    /// Mirror rows.
    Vertical,
}

impl FlipAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            FlipAxis::Horizontal => "horizontal",
            FlipAxis::Vertical => "vertical",
        }
    }
}

/// Mirror image and labels along the given axis.
pub fn flip(image: &Slice2D, labels: &Labels2D, axis: FlipAxis) -> (Slice2D, Labels2D) {
    debug_assert_eq!((image.rows, image.cols), (labels.rows, labels.cols));
    let mut img = Slice2D::zeros(image.rows, image.cols);
    let mut lab = Labels2D::zeros(labels.rows, labels.cols);
    for r in 0..image.rows {
        for c in 0..image.cols {
            let (sr, sc) = match axis {
                FlipAxis::Horizontal => (r, image.cols - 1 - c),
                FlipAxis::Vertical => (image.rows - 1 - r, c),
            };
            img.set(r, c, image.get(sr, sc));
            lab.set(r, c, labels.get(sr, sc));
        }
    }
    (img, lab)
}

/// Bilinear sample with zero fill outside the image.
fn sample_bilinear(image: &Slice2D, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let r = y0 as isize + dy;
            let c = x0 as isize + dx;
            if r >= 0 && (r as usize) < image.rows && c >= 0 && (c as usize) < image.cols {
                acc += wy * wx * image.get(r as usize, c as usize);
            }
        }
    }
    acc
}

/// Nearest-neighbor sample with background fill outside the image.
fn sample_nearest(labels: &Labels2D, y: f64, x: f64) -> u8 {
    let r = y.round();
    let c = x.round();
    if r >= 0.0 && (r as usize) < labels.rows && c >= 0.0 && (c as usize) < labels.cols {
        labels.get(r as usize, c as usize)
    } else {
        0
    }
}

/// Rotate image and labels about the image center by `theta_deg` degrees
/// (positive = counter-clockwise on screen). `limit_deg` is the configured
/// maximum magnitude; exceeding it is a parameter error.
pub fn rotate(
    image: &Slice2D,
    labels: &Labels2D,
    theta_deg: f64,
    limit_deg: f64,
) -> Result<(Slice2D, Labels2D)> {
    if !theta_deg.is_finite() || theta_deg.abs() > limit_deg + 1e-12 {
        return Err(Error::parameter(format!(
            "rotation angle {theta_deg} deg exceeds the +/-{limit_deg} deg limit"
        )));
    }
    let (sin_t, cos_t) = theta_deg.to_radians().sin_cos();
    let cy = (image.rows as f64 - 1.0) / 2.0;
    let cx = (image.cols as f64 - 1.0) / 2.0;
    let mut img = Slice2D::zeros(image.rows, image.cols);
    let mut lab = Labels2D::zeros(labels.rows, labels.cols);
    for r in 0..image.rows {
        for c in 0..image.cols {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // Inverse map: rotate the output coordinate by -theta.
            let sx = cos_t * dx + sin_t * dy + cx;
            let sy = -sin_t * dx + cos_t * dy + cy;
            img.set(r, c, sample_bilinear(image, sy, sx));
            lab.set(r, c, sample_nearest(labels, sy, sx));
        }
    }
    Ok((img, lab))
}

/// Resize by the ratio of axis lengths; exact identity when sizes match.
fn resize_bilinear(image: &Slice2D, rows: usize, cols: usize) -> Slice2D {
    let mut out = Slice2D::zeros(rows, cols);
    let ry = image.rows as f64 / rows as f64;
    let rx = image.cols as f64 / cols as f64;
    for r in 0..rows {
        let sy = (r as f64 + 0.5) * ry - 0.5;
        for c in 0..cols {
            let sx = (c as f64 + 0.5) * rx - 0.5;
            out.set(r, c, sample_bilinear(image, sy, sx));
        }
    }
    out
}

fn resize_nearest(labels: &Labels2D, rows: usize, cols: usize) -> Labels2D {
    let mut out = Labels2D::zeros(rows, cols);
    let ry = labels.rows as f64 / rows as f64;
    let rx = labels.cols as f64 / cols as f64;
    for r in 0..rows {
        let sy = (r as f64 + 0.5) * ry - 0.5;
        for c in 0..cols {
            let sx = (c as f64 + 0.5) * rx - 0.5;
            out.set(r, c, sample_nearest(labels, sy, sx));
        }
    }
    out
}

/// Simulate acquisition at a different in-plane spacing: zoom by
/// `native_mm / target_mm`, then center-crop/pad back to the original shape.
pub fn rescale(
    image: &Slice2D,
    labels: &Labels2D,
    target_mm: f64,
    native_mm: f64,
    range_mm: (f64, f64),
) -> Result<(Slice2D, Labels2D)> {
    if !(native_mm.is_finite() && native_mm > 0.0) {
        return Err(Error::parameter(format!("native spacing must be > 0, got {native_mm}")));
    }
    if target_mm < range_mm.0 - 1e-12 || target_mm > range_mm.1 + 1e-12 {
        return Err(Error::parameter(format!(
            "target spacing {target_mm} mm outside the [{}, {}] mm range",
            range_mm.0, range_mm.1
        )));
    }
    let zoom = native_mm / target_mm;
    let new_rows = ((image.rows as f64 * zoom).round() as usize).max(1);
    let new_cols = ((image.cols as f64 * zoom).round() as usize).max(1);
    let img = resize_bilinear(image, new_rows, new_cols).crop_or_pad(image.rows, image.cols);
    let lab = resize_nearest(labels, new_rows, new_cols).crop_or_pad(labels.rows, labels.cols);
    Ok((img, lab))
}

/// Crop a window of `size` at a uniformly sampled offset (zero-padding first
/// when the input is smaller than the window). Returns the sampled offset as
/// well, so callers can reproduce or log the draw. An input already at
/// `size` admits only the zero offset, making the operator the identity.
pub fn random_crop(
    image: &Slice2D,
    labels: &Labels2D,
    size: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> (Slice2D, Labels2D, (usize, usize)) {
    let work_rows = image.rows.max(size.0);
    let work_cols = image.cols.max(size.1);
    let (img, lab) = if (work_rows, work_cols) != (image.rows, image.cols) {
        (
            image.crop_or_pad(work_rows, work_cols),
            labels.crop_or_pad(work_rows, work_cols),
        )
    } else {
        (image.clone(), labels.clone())
    };
    let off_r = rng.random_range(0..=(work_rows - size.0));
    let off_c = rng.random_range(0..=(work_cols - size.1));
    let mut out_img = Slice2D::zeros(size.0, size.1);
    let mut out_lab = Labels2D::zeros(size.0, size.1);
    for r in 0..size.0 {
        for c in 0..size.1 {
            out_img.set(r, c, img.get(off_r + r, off_c + c));
            out_lab.set(r, c, lab.get(off_r + r, off_c + c));
        }
    }
    (out_img, out_lab, (off_r, off_c))
}

/// Edge-preserving smoothing: each output pixel is a weighted average of its
/// neighborhood, weights falling off with both spatial distance and
/// intensity difference. Either sigma at zero degenerates to the identity.
pub fn bilateral_filter(image: &Slice2D, spatial_sigma: f64, range_sigma: f64) -> Slice2D {
    if spatial_sigma <= 0.0 || range_sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * spatial_sigma).ceil() as isize;
    let inv_2ss = 1.0 / (2.0 * spatial_sigma * spatial_sigma);
    let inv_2rs = 1.0 / (2.0 * range_sigma * range_sigma);
    let mut out = Slice2D::zeros(image.rows, image.cols);
    for r in 0..image.rows {
        for c in 0..image.cols {
            let v0 = image.get(r, c);
            let mut num = 0.0;
            let mut den = 0.0;
            for dr in -radius..=radius {
                let rr = r as isize + dr;
                if rr < 0 || rr >= image.rows as isize {
                    continue;
                }
                for dc in -radius..=radius {
                    let cc = c as isize + dc;
                    if cc < 0 || cc >= image.cols as isize {
                        continue;
                    }
                    let v = image.get(rr as usize, cc as usize);
                    let dv = v - v0;
                    let w = (-((dr * dr + dc * dc) as f64) * inv_2ss - dv * dv * inv_2rs).exp();
                    num += w * v;
                    den += w;
                }
            }
            out.set(r, c, num / den);
        }
    }
    out
}

/// Add i.i.d. Gaussian noise with the given standard deviation, clipped back
/// to [0, 1]. `sigma` must lie in the configured range.
pub fn gaussian_noise(
    image: &Slice2D,
    sigma: f64,
    sigma_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Slice2D> {
    if sigma < sigma_range.0 - 1e-12 || sigma > sigma_range.1 + 1e-12 {
        return Err(Error::parameter(format!(
            "noise sigma {sigma} outside the [{}, {}] range",
            sigma_range.0, sigma_range.1
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let dist = Normal::new(0.0, sigma).expect("valid normal");
    let mut out = image.clone();
    for v in &mut out.values {
        *v = (*v + dist.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Gamma transform on [0, 1] intensities: `x^g`, or the inverse variant
/// applied to the negated image, `1 - (1 - x)^g`. `g` must lie in the
/// configured range.
pub fn gamma(image: &Slice2D, g: f64, inverse: bool, gamma_range: (f64, f64)) -> Result<Slice2D> {
    if g < gamma_range.0 - 1e-12 || g > gamma_range.1 + 1e-12 {
        return Err(Error::parameter(format!(
            "gamma exponent {g} outside the [{}, {}] range",
            gamma_range.0, gamma_range.1
        )));
    }
    let mut out = image.clone();
    for v in &mut out.values {
        let x = v.clamp(0.0, 1.0);
        *v = if inverse { 1.0 - (1.0 - x).powf(g) } else { x.powf(g) };
    }
    Ok(out)
}

/// Linear brightness/contrast adjustment pivoting contrast at mid-gray:
/// `clip((x - 0.5) * (1 + c) + 0.5 + b, 0, 1)`.
pub fn brightness_contrast(
    image: &Slice2D,
    b: f64,
    c: f64,
    range: (f64, f64),
) -> Result<Slice2D> {
    for (name, v) in [("brightness", b), ("contrast", c)] {
        if v < range.0 - 1e-12 || v > range.1 + 1e-12 {
            return Err(Error::parameter(format!(
                "{name} {v} outside the [{}, {}] range",
                range.0, range.1
            )));
        }
    }
    let mut out = image.clone();
    for v in &mut out.values {
        *v = ((*v - 0.5) * (1.0 + c) + 0.5 + b).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Draw one augmented sample: each enabled operator is included independently
/// with `per_op_probability`, spatial operators first, parameters sampled
/// uniformly from the configured ranges. `native_mm` is the slice's acquired
/// in-plane spacing, which anchors the rescale operator. Deterministic in
/// (inputs, config, seed).
pub fn sample_pipeline(
    image: &Slice2D,
    labels: &Labels2D,
    cfg: &AugmentationConfig,
    native_mm: f64,
    seed: u64,
) -> Result<AugmentedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.per_op_probability;
    let fire = |rng: &mut ChaCha8Rng| rng.random::<f64>() < p;

    let mut img = image.clone();
    let mut lab = labels.clone();
    let mut applied: Vec<(String, String)> = Vec::new();

    if cfg.enable_spatial {
        if fire(&mut rng) {
            let axis = if rng.random::<f64>() < 0.5 {
                FlipAxis::Horizontal
            } else {
                FlipAxis::Vertical
            };
            (img, lab) = flip(&img, &lab, axis);
            applied.push(("flip".into(), format!("axis={}", axis.as_str())));
        }
        if fire(&mut rng) {
            let limit = cfg.rotation_limit_deg;
            let theta = rng.random_range(-limit..=limit);
            (img, lab) = rotate(&img, &lab, theta, limit)?;
            applied.push(("rotate".into(), format!("theta_deg={theta:.4}")));
        }
        if fire(&mut rng) {
            let (lo, hi) = cfg.rescale_mm_range;
            let target = rng.random_range(lo..=hi);
            (img, lab) = rescale(&img, &lab, target, native_mm, cfg.rescale_mm_range)?;
            applied.push((
                "rescale".into(),
                format!("target_mm={target:.4},native_mm={native_mm:.4}"),
            ));
        }
        if fire(&mut rng) {
            let (ci, cl, offset) = random_crop(&img, &lab, cfg.crop_size, &mut rng);
            img = ci;
            lab = cl;
            applied.push((
                "random_crop".into(),
                format!("offset=({},{}),size=({},{})", offset.0, offset.1, cfg.crop_size.0, cfg.crop_size.1),
            ));
        }
    }
    if cfg.enable_intensity {
        if fire(&mut rng) {
            let spatial_sigma = rng.random_range(0.5..=2.0);
            let range_sigma = rng.random_range(0.05..=0.2);
            img = bilateral_filter(&img, spatial_sigma, range_sigma);
            applied.push((
                "bilateral_filter".into(),
                format!("spatial_sigma={spatial_sigma:.4},range_sigma={range_sigma:.4}"),
            ));
        }
        if fire(&mut rng) {
            let (lo, hi) = cfg.noise_sigma_range;
            let sigma = rng.random_range(lo..=hi);
            img = gaussian_noise(&img, sigma, cfg.noise_sigma_range, &mut rng)?;
            applied.push(("gaussian_noise".into(), format!("sigma={sigma:.4}")));
        }
        if fire(&mut rng) {
            let (lo, hi) = cfg.gamma_range;
            let g = rng.random_range(lo..=hi);
            let inverse = rng.random::<f64>() < 0.5;
            img = gamma(&img, g, inverse, cfg.gamma_range)?;
            applied.push(("gamma".into(), format!("g={g:.4},inverse={inverse}")));
        }
        if fire(&mut rng) {
            let (lo, hi) = cfg.brightness_contrast_range;
            let b = rng.random_range(lo..=hi);
            let c = rng.random_range(lo..=hi);
            img = brightness_contrast(&img, b, c, cfg.brightness_contrast_range)?;
            applied.push(("brightness_contrast".into(), format!("b={b:.4},c={c:.4}")));
        }
    }

    Ok(AugmentedSample {
        image: img,
        labels: lab,
        applied_ops: applied,
    })
}

//! Segmentation network: configuration, weight bundles, persistence and
//! block-level trainability control.
//!
//! The network itself (an encoder-decoder with skip connections and deep
//! supervision, see [`UNet`]) lives in [`unet`]; this module wraps it in a
//! [`ModelBundle`] that pairs weights with their configuration, provenance
//! and per-block trainable flags, and persists everything through a single
//! archive file so a bundle reloads bit-identically.
//!
//! Blocks are the unit of freezing for transfer learning: the encoder part
//! is `enc1..enc{L-1}` plus the bottleneck, the decoder part is
//! `dec1..dec{L-1}` plus the bottleneck (the bottleneck belongs to both).
//! [`set_trainable`] marks the shallowest `k` blocks of one part trainable
//! and freezes the rest; selections for the two parts compose by union, so
//! requesting all `L` blocks of both parts makes the whole network trainable.

pub mod archive;
mod unet;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::core::Slice2D;
use crate::error::{Error, Result};
use crate::nn::{ops, Tensor};

pub use unet::{stage_width, Tape, UNet};

/// Feature-width cap: stages never grow wider than this many channels.
pub const MAX_FEATURES: usize = 1024;

/// Architecture hyper-parameters.
///
/// `desk_scale` swaps in a configuration small enough to train on a laptop
/// CPU in seconds per epoch (4 levels, 8 base features, auxiliary heads
/// clamped to fit) while keeping every structural property of the full-size
/// network: same block layout, same loss wiring, same freezing semantics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Resolution levels, i.e. encoder stages including the bottleneck.
    pub levels: usize,
    /// Feature channels of the first stage; doubled per level, capped at
    /// [`MAX_FEATURES`].
    pub base_features: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Negative slope of the LeakyReLU activations.
    pub leaky_slope: f64,
    /// Auxiliary deep-supervision heads on decoder stages 2, 3, ... (the
    /// main head on decoder stage 1 is always present and not counted).
    pub deep_supervision_heads: usize,
    /// Use the reduced laptop-scale architecture instead of `levels` /
    /// `base_features`.
    pub desk_scale: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 6,
            base_features: 32,
            in_channels: 1,
            num_classes: 3,
            leaky_slope: 0.01,
            deep_supervision_heads: 3,
            desk_scale: false,
        }
    }
}

/// Architecture values after resolving the `desk_scale` profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EffectiveArch {
    pub levels: usize,
    pub base_features: usize,
    pub aux_heads: usize,
}

impl NetworkConfig {
    /// The laptop-scale profile as an explicit config.
    pub fn desk() -> Self {
        NetworkConfig {
            desk_scale: true,
            ..Self::default()
        }
    }

    /// Resolve `desk_scale` and head clamping into concrete values.
    pub fn effective(&self) -> EffectiveArch {
        let (levels, base) = if self.desk_scale {
            (4, 8)
        } else {
            (self.levels, self.base_features)
        };
        let aux_heads = self.deep_supervision_heads.min(levels.saturating_sub(2));
        EffectiveArch {
            levels,
            base_features: base,
            aux_heads,
        }
    }

    /// Feature widths per stage (1-based stages, so index 0 is stage 1).
    pub fn feature_widths(&self) -> Vec<usize> {
        let eff = self.effective();
        (1..=eff.levels).map(|s| stage_width(eff.base_features, s)).collect()
    }

    /// Spatial divisor inputs must satisfy: 2^(levels-1).
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.effective().levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.desk_scale {
            if self.levels < 2 {
                return Err(Error::config("network needs at least 2 levels"));
            }
            if self.levels > 10 {
                return Err(Error::config("more than 10 levels is not supported"));
            }
            if self.base_features == 0 {
                return Err(Error::config("base_features must be positive"));
            }
            if self.deep_supervision_heads + 2 > self.levels {
                return Err(Error::config(format!(
                    "deep_supervision_heads must be at most levels - 2 \
                     ({} heads do not fit in {} levels)",
                    self.deep_supervision_heads, self.levels
                )));
            }
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::config("leaky_slope must be in [0, 1)"));
        }
        Ok(())
    }
}

/// The two freezable parts of the network. Both include the bottleneck as
/// their deepest block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Encoder,
    Decoder,
}

impl Part {
    pub fn as_str(&self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Part::Encoder),
            "decoder" => Ok(Part::Decoder),
            other => Err(Error::parameter(format!(
                "unknown network part {other:?} (expected \"encoder\" or \"decoder\")"
            ))),
        }
    }
}

/// Where a bundle's weights came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    /// "fresh", "trained", "finetuned".
    pub origin: String,
    /// Centers whose data contributed to these weights.
    pub training_centers: Vec<String>,
    /// Training epochs applied on top of the parent (or from scratch).
    pub epochs: usize,
    /// Seed the weights were initialized or trained with.
    pub seed: u64,
    /// Bundle id of the parent weights, for fine-tuned models.
    pub parent: Option<String>,
}

/// A network plus everything needed to reuse it: configuration, per-block
/// trainable flags and provenance.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: NetworkConfig,
    pub(crate) net: UNet,
    trainable: BTreeMap<String, bool>,
    trainable_spec: Vec<(Part, usize)>,
    pub provenance: Provenance,
}

/// Block names for an architecture: `enc1..enc{L-1}`, `bottleneck`,
/// `dec1..dec{L-1}`.
pub fn block_names(levels: usize) -> Vec<String> {
    (1..levels)
        .map(|s| format!("enc{s}"))
        .chain(std::iter::once("bottleneck".to_string()))
        .chain((1..levels).map(|s| format!("dec{s}")))
        .collect()
}

impl ModelBundle {
    /// Read access to the underlying network.
    pub fn network(&self) -> &UNet {
        &self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// All block names of this architecture.
    pub fn block_names(&self) -> Vec<String> {
        block_names(self.config.effective().levels)
    }

    /// Parameter names grouped by the block they belong to.
    pub fn block_index(&self) -> BTreeMap<String, Vec<String>> {
        let mut index: BTreeMap<String, Vec<String>> = self
            .block_names()
            .into_iter()
            .map(|b| (b, Vec::new()))
            .collect();
        for (name, _) in self.net.params() {
            let block = UNet::block_of(&name).to_string();
            index.get_mut(&block).expect("known block").push(name);
        }
        index
    }

    /// Per-block trainable flags.
    pub fn trainable_blocks(&self) -> &BTreeMap<String, bool> {
        &self.trainable
    }

    /// The (part, k) selections currently in force; empty means everything
    /// is trainable.
    pub fn trainable_spec(&self) -> &[(Part, usize)] {
        &self.trainable_spec
    }

    /// Whether the block owning this parameter is trainable.
    pub fn is_trainable(&self, param_name: &str) -> bool {
        let block = UNet::block_of(param_name);
        *self.trainable.get(block).unwrap_or(&false)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.net
            .params()
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Content hash over configuration and weights; two bundles share an id
    /// exactly when they are architecturally and numerically identical.
    pub fn bundle_id(&self) -> String {
        let mut hasher = Sha256::new();
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        hasher.update(cfg.as_bytes());
        for (name, values) in self.net.params() {
            hasher.update(name.as_bytes());
            let mut bytes = Vec::with_capacity(values.len() * 8);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            hasher.update(&bytes);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Build a freshly initialized network (all blocks trainable).
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let eff = config.effective();
    let net = UNet::new(
        eff.levels,
        eff.base_features,
        config.in_channels,
        config.num_classes,
        config.leaky_slope,
        eff.aux_heads,
        seed,
    );
    let trainable = block_names(eff.levels).into_iter().map(|b| (b, true)).collect();
    Ok(ModelBundle {
        config: config.clone(),
        net,
        trainable,
        trainable_spec: Vec::new(),
        provenance: Provenance {
            origin: "fresh".to_string(),
            training_centers: Vec::new(),
            epochs: 0,
            seed,
            parent: None,
        },
    })
}

/// Convert a 2D image slice into a single-channel network input tensor.
pub fn slice_to_tensor(slice: &Slice2D) -> Tensor {
    Tensor::from_vec(1, slice.rows, slice.cols, slice.values.clone())
}

/// Inference forward pass: per-head class probability maps, main head first,
/// auxiliary heads after it by increasing downsampling factor. Channels of
/// each map sum to one at every pixel.
pub fn forward(bundle: &ModelBundle, image: &Tensor) -> Result<Vec<Tensor>> {
    let (logits, _) = bundle.net.forward_logits(image, false)?;
    Ok(logits.iter().map(ops::softmax_channels).collect())
}

/// Mark the shallowest `k_blocks` blocks of `part` trainable and freeze the
/// rest of that part, composing with any earlier selection for the other
/// part by union. `k_blocks` counts the bottleneck as the deepest block, so
/// `k_blocks == levels` selects the entire part.
pub fn set_trainable(mut bundle: ModelBundle, part: Part, k_blocks: usize) -> Result<ModelBundle> {
    let levels = bundle.config.effective().levels;
    if k_blocks == 0 {
        return Err(Error::parameter(
            "k_blocks must be at least 1; freezing every block would leave nothing trainable",
        ));
    }
    if k_blocks > levels {
        return Err(Error::parameter(format!(
            "k_blocks is {k_blocks} but the network has only {levels} blocks per part"
        )));
    }
    bundle.trainable_spec.retain(|(p, _)| *p != part);
    bundle.trainable_spec.push((part, k_blocks));

    let mut flags: BTreeMap<String, bool> =
        block_names(levels).into_iter().map(|b| (b, false)).collect();
    for (p, k) in &bundle.trainable_spec {
        let prefix = match p {
            Part::Encoder => "enc",
            Part::Decoder => "dec",
        };
        for s in 1..=(*k).min(levels - 1) {
            flags.insert(format!("{prefix}{s}"), true);
        }
        if *k == levels {
            flags.insert("bottleneck".to_string(), true);
        }
    }
    bundle.trainable = flags;
    Ok(bundle)
}

/// Per-block interface signature used for compatibility checks:
/// (input channels, output channels, has classification head).
fn block_signatures(config: &NetworkConfig) -> BTreeMap<String, (usize, usize, bool)> {
    let eff = config.effective();
    let w = |s: usize| stage_width(eff.base_features, s);
    let mut sig = BTreeMap::new();
    for s in 1..eff.levels {
        let in_c = if s == 1 { config.in_channels } else { w(s - 1) };
        sig.insert(format!("enc{s}"), (in_c, w(s), false));
    }
    sig.insert("bottleneck".to_string(), (w(eff.levels - 1), w(eff.levels), false));
    for s in 1..eff.levels {
        let has_head = s == 1 || s <= eff.aux_heads + 1;
        sig.insert(format!("dec{s}"), (w(s + 1), w(s), has_head));
    }
    sig
}

/// Check that a bundle's weights fit the architecture `config` describes.
/// On mismatch the error lists every block that differs or exists on only
/// one side.
pub fn check_compatible(bundle: &ModelBundle, config: &NetworkConfig) -> Result<()> {
    config.validate()?;
    let have = block_signatures(&bundle.config);
    let want = block_signatures(config);
    let mut mismatched: Vec<String> = Vec::new();
    for (block, sig) in &want {
        match have.get(block) {
            None => mismatched.push(format!("{block} (missing from bundle)")),
            Some(s) if s != sig => mismatched.push(format!(
                "{block} (bundle has in={} out={} head={}, config needs in={} out={} head={})",
                s.0, s.1, s.2, sig.0, sig.1, sig.2
            )),
            Some(_) => {}
        }
    }
    for block in have.keys() {
        if !want.contains_key(block) {
            mismatched.push(format!("{block} (not present in config)"));
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        mismatched.sort();
        Err(Error::Incompatible {
            reason: format!("mismatched blocks: {}", mismatched.join(", ")),
        })
    }
}

/// Persist a bundle (weights, config, trainable flags, provenance).
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "segnet",
        "config": bundle.config,
        "trainable": bundle.trainable,
        "trainable_spec": bundle.trainable_spec,
        "provenance": bundle.provenance,
        "bundle_id": bundle.bundle_id(),
    });
    let shapes = bundle.net.param_shapes();
    let params = bundle.net.params();
    let tensors: Vec<(String, Vec<usize>, &[f64])> = params
        .iter()
        .zip(&shapes)
        .map(|((name, values), (_, shape))| (name.clone(), shape.clone(), values.as_slice()))
        .collect();
    archive::save_named(path, &meta, &tensors)
}

/// Load a bundle saved by [`save_bundle`]; weights reload bit-identically.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let (meta, mut tensors) = archive::load_named(path)?;
    let archive_err = |reason: String| Error::Archive {
        path: path.to_path_buf(),
        reason,
    };

    let kind = meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if kind != "segnet" {
        return Err(archive_err(format!(
            "expected a segmentation network archive, found kind {kind:?}"
        )));
    }
    let config: NetworkConfig = serde_json::from_value(
        meta.get("config").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| archive_err(format!("config metadata: {e}")))?;
    let trainable: BTreeMap<String, bool> = serde_json::from_value(
        meta.get("trainable").cloned().unwrap_or(serde_json::Value::Null),
    )
    .map_err(|e| archive_err(format!("trainable metadata: {e}")))?;
    let trainable_spec: Vec<(Part, usize)> = match meta.get("trainable_spec") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| archive_err(format!("trainable_spec metadata: {e}")))?,
        None => Vec::new(),
    };
    let provenance: Provenance = match meta.get("provenance") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| archive_err(format!("provenance metadata: {e}")))?,
        None => Provenance::default(),
    };

    let mut bundle = build_network(&config, 0)?;
    let mut missing = Vec::new();
    {
        let expected = bundle.net.param_shapes();
        let params = bundle.net.params_mut();
        for ((name, slot), (_, shape)) in params.into_iter().zip(&expected) {
            match tensors.remove(&name) {
                Some((stored_shape, values)) => {
                    if &stored_shape != shape || values.len() != slot.len() {
                        return Err(archive_err(format!(
                            "tensor {name}: stored shape {stored_shape:?} does not match \
                             architecture shape {shape:?}"
                        )));
                    }
                    slot.copy_from_slice(&values);
                }
                None => missing.push(name),
            }
        }
    }
    if !missing.is_empty() {
        return Err(archive_err(format!("missing tensors: {}", missing.join(", "))));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.into_keys().collect();
        return Err(archive_err(format!("unexpected tensors: {}", extra.join(", "))));
    }
    bundle.trainable = trainable;
    bundle.trainable_spec = trainable_spec;
    bundle.provenance = provenance;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths_double_and_cap() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.feature_widths(), vec![32, 64, 128, 256, 512, 1024]);
        let deep = NetworkConfig {
            levels: 7,
            ..NetworkConfig::default()
        };
        assert_eq!(deep.feature_widths(), vec![32, 64, 128, 256, 512, 1024, 1024]);
    }

    #[test]
    fn desk_profile_is_small_but_structurally_complete() {
        let cfg = NetworkConfig::desk();
        let eff = cfg.effective();
        assert_eq!((eff.levels, eff.base_features, eff.aux_heads), (4, 8, 2));
        let bundle = build_network(&cfg, 0).unwrap();
        assert!(bundle.param_count() < 1_000_000, "got {}", bundle.param_count());

        // Analytic parameter count from the block structure.
        let w = |s: usize| stage_width(8, s);
        let unit = |in_c: usize, out_c: usize| in_c * out_c * 9 + out_c + 2 * out_c;
        let mut expected = 0usize;
        for s in 1..4 {
            let in_c = if s == 1 { 1 } else { w(s - 1) };
            expected += unit(in_c, w(s)) + unit(w(s), w(s));
        }
        expected += unit(w(3), w(4)) + unit(w(4), w(4));
        for s in 1..4 {
            expected += w(s + 1) * w(s) * 4 + w(s); // transposed conv
            expected += unit(2 * w(s), w(s)) + unit(w(s), w(s));
            if s == 1 || s <= eff.aux_heads + 1 {
                expected += 3 * w(s) + 3; // head
            }
        }
        assert_eq!(bundle.param_count(), expected);
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let cfg = NetworkConfig::desk();
        let a = build_network(&cfg, 7).unwrap();
        let b = build_network(&cfg, 7).unwrap();
        assert_eq!(a.bundle_id(), b.bundle_id());
        let c = build_network(&cfg, 8).unwrap();
        assert_ne!(a.bundle_id(), c.bundle_id());
    }

    #[test]
    fn forward_probabilities_sum_to_one_per_pixel() {
        let cfg = NetworkConfig::desk();
        let bundle = build_network(&cfg, 3).unwrap();
        let x = Tensor::from_vec(1, 16, 16, (0..256).map(|i| (i as f64) / 255.0).collect());
        let heads = forward(&bundle, &x).unwrap();
        assert_eq!(heads.len(), 3);
        assert_eq!(heads[0].shape(), (3, 16, 16));
        assert_eq!(heads[1].shape(), (3, 8, 8));
        for head in &heads {
            for y in 0..head.h {
                for xx in 0..head.w {
                    let s: f64 = (0..head.c).map(|c| head.get(c, y, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        // Inference is deterministic.
        let again = forward(&bundle, &x).unwrap();
        for (a, b) in heads.iter().zip(&again) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn trainable_selection_counts_blocks_and_composes_by_union() {
        let cfg = NetworkConfig {
            levels: 6,
            base_features: 2,
            deep_supervision_heads: 3,
            ..NetworkConfig::default()
        };
        let bundle = build_network(&cfg, 0).unwrap();
        assert!(bundle.trainable_blocks().values().all(|&t| t));

        // Encoder k=5: enc1..enc5 trainable, bottleneck and decoder frozen.
        let b = set_trainable(bundle.clone(), Part::Encoder, 5).unwrap();
        let on: Vec<&String> = b.trainable_blocks().iter().filter(|(_, &t)| t).map(|(k, _)| k).collect();
        assert_eq!(on, ["enc1", "enc2", "enc3", "enc4", "enc5"]);
        assert!(b.is_trainable("enc3.1.conv.weight"));
        assert!(!b.is_trainable("bottleneck.2.norm.gamma"));
        assert!(!b.is_trainable("dec1.head.weight"));

        // Encoder k=6 pulls in the bottleneck.
        let b = set_trainable(bundle.clone(), Part::Encoder, 6).unwrap();
        assert!(b.is_trainable("bottleneck.1.conv.bias"));
        assert!(!b.is_trainable("dec5.up.weight"));

        // Decoder k=2 on top of encoder k=3: union of both selections.
        let b = set_trainable(bundle.clone(), Part::Encoder, 3).unwrap();
        let b = set_trainable(b, Part::Decoder, 2).unwrap();
        let on: Vec<&String> = b.trainable_blocks().iter().filter(|(_, &t)| t).map(|(k, _)| k).collect();
        assert_eq!(on, ["dec1", "dec2", "enc1", "enc2", "enc3"]);

        // Re-selecting the same part replaces its previous selection.
        let b = set_trainable(b, Part::Decoder, 1).unwrap();
        let on: Vec<&String> = b.trainable_blocks().iter().filter(|(_, &t)| t).map(|(k, _)| k).collect();
        assert_eq!(on, ["dec1", "enc1", "enc2", "enc3"]);

        // Both parts at k=levels: everything trainable.
        let b = set_trainable(bundle.clone(), Part::Encoder, 6).unwrap();
        let b = set_trainable(b, Part::Decoder, 6).unwrap();
        assert!(b.trainable_blocks().values().all(|&t| t));

        assert!(set_trainable(bundle.clone(), Part::Encoder, 0).is_err());
        assert!(set_trainable(bundle, Part::Decoder, 7).is_err());
    }

    #[test]
    fn bundle_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lvw");
        let cfg = NetworkConfig::desk();
        let mut bundle = build_network(&cfg, 11).unwrap();
        bundle.provenance.origin = "trained".to_string();
        bundle.provenance.training_centers = vec!["synthA".to_string()];
        bundle.provenance.epochs = 12;
        let bundle = set_trainable(bundle, Part::Encoder, 3).unwrap();

        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded.bundle_id(), bundle.bundle_id());
        assert_eq!(loaded.config, bundle.config);
        assert_eq!(loaded.trainable_blocks(), bundle.trainable_blocks());
        assert_eq!(loaded.trainable_spec(), bundle.trainable_spec());
        assert_eq!(loaded.provenance, bundle.provenance);
        for ((n1, v1), (n2, v2)) in loaded.net.params().iter().zip(bundle.net.params().iter()) {
            assert_eq!(n1, n2);
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn compatibility_check_names_the_differing_blocks() {
        let desk = NetworkConfig::desk();
        let bundle = build_network(&desk, 0).unwrap();
        assert!(check_compatible(&bundle, &desk).is_ok());

        let other = NetworkConfig {
            levels: 5,
            base_features: 8,
            deep_supervision_heads: 3,
            ..NetworkConfig::default()
        };
        let err = check_compatible(&bundle, &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc4"), "{msg}");
        assert!(msg.contains("bottleneck"), "{msg}");

        let wider = NetworkConfig {
            levels: 4,
            base_features: 16,
            deep_supervision_heads: 2,
            ..NetworkConfig::default()
        };
        let err = check_compatible(&bundle, &wider).unwrap_err();
        assert!(err.to_string().contains("enc1"), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = NetworkConfig::default;
        for bad in [
            NetworkConfig { deep_supervision_heads: 5, ..base() },
            NetworkConfig { levels: 1, ..base() },
            NetworkConfig { num_classes: 1, ..base() },
            NetworkConfig { leaky_slope: 1.5, ..base() },
            NetworkConfig { in_channels: 0, ..base() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be invalid");
        }
        // The desk profile clamps heads instead of failing.
        let desk = NetworkConfig::desk();
        assert!(desk.validate().is_ok());
        assert_eq!(desk.effective().aux_heads, 2);
    }
}

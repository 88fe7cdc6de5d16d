//! Unpaired slice-to-slice intensity translation between two centers.
//!
//! Two residual generators (source→target and target→source) are trained
//! adversarially against per-domain patch discriminators, with a cycle
//! consistency penalty tying the directions together: translating a slice
//! to the other domain and back must reproduce it. No paired data is
//! needed — each training step consumes one slice from each center.
//!
//! Generators are residual: the network predicts an intensity correction
//! that is added to its input, so an untrained generator is close to the
//! identity map and training only has to learn the cross-center change.
//! Discriminators output a grid of patch logits judged with a least-squares
//! objective, which keeps gradients smooth. Both generators and both
//! discriminators are persisted together in one weight archive.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{CaseRecord, Slice2D, Volume};
use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{
    accumulate, Adam, Conv2d, ConvTranspose2x2, InstanceNorm2d, NamedGrads, NormCache, Tensor,
};
use crate::segnet::{archive, slice_to_tensor};
use crate::util::{config_hash, derive_seed, derive_seed_n};

/// Scale of each generator's output-projection initialization; the weight
/// standard deviation is this value divided by the square root of the
/// layer's fan-in, which makes the untrained residual magnitude (roughly
/// 0.56 times this value per pixel) independent of the network width. Small
/// enough that an untrained generator stays near the identity map, large
/// enough that the initial cycle-reconstruction error is measurable.
const RESIDUAL_INIT_SCALE: f64 = 0.04;

/// Negative slope of the discriminators' LeakyReLU activations.
const DISC_SLOPE: f64 = 0.2;

/// Hyper-parameters of the translation networks and their training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    /// Side length of the square slices the generators accept. Must be a
    /// multiple of 4 (the networks downsample twice).
    pub image_size: usize,
    /// Feature maps of the first generator stage and the first
    /// discriminator stage; deeper stages double it twice.
    pub base_features: usize,
    /// Residual blocks at the generator's lowest resolution.
    pub residual_blocks: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of the cycle-consistency L1 term relative to the adversarial
    /// term.
    pub cycle_weight: f64,
    pub seed: u64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            image_size: 256,
            base_features: 32,
            residual_blocks: 9,
            epochs: 50,
            learning_rate: 2e-4,
            cycle_weight: 10.0,
            seed: 0,
        }
    }
}

impl TranslatorConfig {
    /// Reduced profile for CPU-speed tests and demos.
    pub fn desk() -> Self {
        TranslatorConfig {
            image_size: 16,
            base_features: 6,
            residual_blocks: 1,
            epochs: 8,
            ..TranslatorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(Error::parameter(format!(
                "image_size is {}; it must be a multiple of 4 and at least 8",
                self.image_size
            )));
        }
        if self.base_features == 0 {
            return Err(Error::parameter("base_features must be at least 1"));
        }
        if self.residual_blocks == 0 {
            return Err(Error::parameter("residual_blocks must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::parameter("epochs must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::parameter(format!(
                "learning_rate is {}; it must be positive",
                self.learning_rate
            )));
        }
        if !self.cycle_weight.is_finite() || self.cycle_weight < 0.0 {
            return Err(Error::parameter(format!(
                "cycle_weight is {}; it must be non-negative",
                self.cycle_weight
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Act {
    None,
    Relu,
    LRelu(f64),
}

/// conv -> optional instance norm -> activation.
#[derive(Clone, Debug)]
struct ConvLayer {
    conv: Conv2d,
    norm: Option<InstanceNorm2d>,
    act: Act,
}

struct LayerCache {
    x: Tensor,
    z: Tensor,
    stats: Option<NormCache>,
    a: Tensor,
}

impl ConvLayer {
    fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, norm: bool, act: Act) -> Self {
        ConvLayer {
            conv: Conv2d::new(in_c, out_c, k, stride, pad),
            norm: norm.then(|| InstanceNorm2d::new(out_c)),
            act,
        }
    }

    fn apply_act(&self, a: &Tensor) -> Tensor {
        match self.act {
            Act::None => a.clone(),
            Act::Relu => ops::relu(a),
            Act::LRelu(s) => ops::leaky_relu(a, s),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, LayerCache) {
        let z = self.conv.forward(x);
        let (a, stats) = match &self.norm {
            Some(norm) => {
                let (a, stats) = norm.forward(&z);
                (a, Some(stats))
            }
            None => (z.clone(), None),
        };
        let y = self.apply_act(&a);
        (
            y,
            LayerCache {
                x: x.clone(),
                z,
                stats,
                a,
            },
        )
    }

    fn backward(&self, cache: &LayerCache, gy: &Tensor, grads: &mut NamedGrads, prefix: &str) -> Tensor {
        let ga = match self.act {
            Act::None => gy.clone(),
            Act::Relu => ops::relu_backward(&cache.a, gy),
            Act::LRelu(s) => ops::leaky_relu_backward(&cache.a, gy, s),
        };
        let gz = match &self.norm {
            Some(norm) => {
                let mut ggamma = vec![0.0; norm.channels];
                let mut gbeta = vec![0.0; norm.channels];
                let gz = norm.backward(
                    &cache.z,
                    cache.stats.as_ref().expect("norm layer cached stats"),
                    &ga,
                    &mut ggamma,
                    &mut gbeta,
                );
                accumulate(grads, &format!("{prefix}.norm.gamma"), &ggamma);
                accumulate(grads, &format!("{prefix}.norm.beta"), &gbeta);
                gz
            }
            None => ga,
        };
        let mut gw = vec![0.0; self.conv.weight.len()];
        let mut gb = vec![0.0; self.conv.bias.len()];
        let gx = self.conv.backward(&cache.x, &gz, &mut gw, &mut gb);
        accumulate(grads, &format!("{prefix}.conv.weight"), &gw);
        accumulate(grads, &format!("{prefix}.conv.bias"), &gb);
        gx
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Vec<f64>)>) {
        out.push((format!("{prefix}.conv.weight"), self.conv.weight.clone()));
        out.push((format!("{prefix}.conv.bias"), self.conv.bias.clone()));
        if let Some(norm) = &self.norm {
            out.push((format!("{prefix}.norm.gamma"), norm.gamma.clone()));
            out.push((format!("{prefix}.norm.beta"), norm.beta.clone()));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        let Conv2d { weight, bias, .. } = &mut self.conv;
        out.push((format!("{prefix}.conv.weight"), weight));
        out.push((format!("{prefix}.conv.bias"), bias));
        if let Some(norm) = &mut self.norm {
            out.push((format!("{prefix}.norm.gamma"), &mut norm.gamma));
            out.push((format!("{prefix}.norm.beta"), &mut norm.beta));
        }
    }
}

/// Residual block: two 3x3 conv units whose output is added to the input.
#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvLayer,
    b: ConvLayer,
}

struct ResCache {
    a: LayerCache,
    b: LayerCache,
}

impl ResBlock {
    fn new(c: usize) -> Self {
        ResBlock {
            a: ConvLayer::new(c, c, 3, 1, 1, true, Act::Relu),
            b: ConvLayer::new(c, c, 3, 1, 1, true, Act::None),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, ResCache) {
        let (h, ca) = self.a.forward(x);
        let (r, cb) = self.b.forward(&h);
        (ops::add(x, &r), ResCache { a: ca, b: cb })
    }

    fn backward(&self, cache: &ResCache, gy: &Tensor, grads: &mut NamedGrads, prefix: &str) -> Tensor {
        let gh = self.b.backward(&cache.b, gy, grads, &format!("{prefix}.b"));
        let gx = self.a.backward(&cache.a, &gh, grads, &format!("{prefix}.a"));
        ops::add(&gx, gy)
    }
}

/// 2x upsampling unit: transposed conv -> instance norm -> ReLU.
#[derive(Clone, Debug)]
struct UpLayer {
    up: ConvTranspose2x2,
    norm: InstanceNorm2d,
}

struct UpCache {
    x: Tensor,
    z: Tensor,
    stats: NormCache,
    a: Tensor,
}

impl UpLayer {
    fn new(in_c: usize, out_c: usize) -> Self {
        UpLayer {
            up: ConvTranspose2x2::new(in_c, out_c),
            norm: InstanceNorm2d::new(out_c),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, UpCache) {
        let z = self.up.forward(x);
        let (a, stats) = self.norm.forward(&z);
        let y = ops::relu(&a);
        (
            y,
            UpCache {
                x: x.clone(),
                z,
                stats,
                a,
            },
        )
    }

    fn backward(&self, cache: &UpCache, gy: &Tensor, grads: &mut NamedGrads, prefix: &str) -> Tensor {
        let ga = ops::relu_backward(&cache.a, gy);
        let mut ggamma = vec![0.0; self.norm.channels];
        let mut gbeta = vec![0.0; self.norm.channels];
        let gz = self.norm.backward(&cache.z, &cache.stats, &ga, &mut ggamma, &mut gbeta);
        accumulate(grads, &format!("{prefix}.norm.gamma"), &ggamma);
        accumulate(grads, &format!("{prefix}.norm.beta"), &gbeta);
        let mut gw = vec![0.0; self.up.weight.len()];
        let mut gb = vec![0.0; self.up.bias.len()];
        let gx = self.up.backward(&cache.x, &gz, &mut gw, &mut gb);
        accumulate(grads, &format!("{prefix}.up.weight"), &gw);
        accumulate(grads, &format!("{prefix}.up.bias"), &gb);
        gx
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Vec<f64>)>) {
        out.push((format!("{prefix}.up.weight"), self.up.weight.clone()));
        out.push((format!("{prefix}.up.bias"), self.up.bias.clone()));
        out.push((format!("{prefix}.norm.gamma"), self.norm.gamma.clone()));
        out.push((format!("{prefix}.norm.beta"), self.norm.beta.clone()));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        let ConvTranspose2x2 { weight, bias, .. } = &mut self.up;
        out.push((format!("{prefix}.up.weight"), weight));
        out.push((format!("{prefix}.up.bias"), bias));
        out.push((format!("{prefix}.norm.gamma"), &mut self.norm.gamma));
        out.push((format!("{prefix}.norm.beta"), &mut self.norm.beta));
    }
}

// ---------------------------------------------------------------------------
// Generator and discriminator
// ---------------------------------------------------------------------------

/// Residual translation generator. The body computes an intensity
/// correction at full resolution which is added to the input slice:
/// stem (7x7) -> two stride-2 downsamplings -> residual blocks -> two 2x
/// upsamplings -> 7x7 projection to one channel.
#[derive(Clone, Debug)]
pub(crate) struct Generator {
    stem: ConvLayer,
    down1: ConvLayer,
    down2: ConvLayer,
    res: Vec<ResBlock>,
    up1: UpLayer,
    up2: UpLayer,
    out: ConvLayer,
}

pub(crate) struct GenTape {
    stem: LayerCache,
    down1: LayerCache,
    down2: LayerCache,
    res: Vec<ResCache>,
    up1: UpCache,
    up2: UpCache,
    out: LayerCache,
}

impl Generator {
    fn new(base: usize, blocks: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = base;
        let mut gen = Generator {
            stem: ConvLayer::new(1, f, 7, 1, 3, true, Act::Relu),
            down1: ConvLayer::new(f, 2 * f, 3, 2, 1, true, Act::Relu),
            down2: ConvLayer::new(2 * f, 4 * f, 3, 2, 1, true, Act::Relu),
            res: (0..blocks).map(|_| ResBlock::new(4 * f)).collect(),
            up1: UpLayer::new(4 * f, 2 * f),
            up2: UpLayer::new(2 * f, f),
            out: ConvLayer::new(f, 1, 7, 1, 3, false, Act::None),
        };
        gen.stem.conv.init_he(rng, 0.0);
        gen.down1.conv.init_he(rng, 0.0);
        gen.down2.conv.init_he(rng, 0.0);
        for blk in &mut gen.res {
            blk.a.conv.init_he(rng, 0.0);
            blk.b.conv.init_he(rng, 0.0);
        }
        gen.up1.up.init_he(rng, 0.0);
        gen.up2.up.init_he(rng, 0.0);
        let out_fan_in = f as f64 * 7.0 * 7.0;
        gen.out.conv.init_small(rng, RESIDUAL_INIT_SCALE / out_fan_in.sqrt());
        gen
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<GenTape>) {
        let (h, c_stem) = self.stem.forward(x);
        let (h, c_d1) = self.down1.forward(&h);
        let (mut h, c_d2) = self.down2.forward(&h);
        let mut c_res = Vec::with_capacity(self.res.len());
        for blk in &self.res {
            let (hn, c) = blk.forward(&h);
            h = hn;
            c_res.push(c);
        }
        let (h, c_u1) = self.up1.forward(&h);
        let (h, c_u2) = self.up2.forward(&h);
        let (r, c_out) = self.out.forward(&h);
        let y = ops::add(x, &r);
        let tape = train.then_some(GenTape {
            stem: c_stem,
            down1: c_d1,
            down2: c_d2,
            res: c_res,
            up1: c_u1,
            up2: c_u2,
            out: c_out,
        });
        (y, tape)
    }

    /// Accumulate parameter gradients under `prefix` and return the gradient
    /// with respect to the input slice.
    pub(crate) fn backward(
        &self,
        tape: &GenTape,
        gy: &Tensor,
        grads: &mut NamedGrads,
        prefix: &str,
    ) -> Tensor {
        let g = self.out.backward(&tape.out, gy, grads, &format!("{prefix}.out"));
        let g = self.up2.backward(&tape.up2, &g, grads, &format!("{prefix}.up2"));
        let mut g = self.up1.backward(&tape.up1, &g, grads, &format!("{prefix}.up1"));
        for (i, blk) in self.res.iter().enumerate().rev() {
            g = blk.backward(&tape.res[i], &g, grads, &format!("{prefix}.res{}", i + 1));
        }
        let g = self.down2.backward(&tape.down2, &g, grads, &format!("{prefix}.down2"));
        let g = self.down1.backward(&tape.down1, &g, grads, &format!("{prefix}.down1"));
        let g = self.stem.backward(&tape.stem, &g, grads, &format!("{prefix}.stem"));
        // The input feeds both the body and the additive skip.
        ops::add(&g, gy)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Vec<f64>)>) {
        self.stem.params(&format!("{prefix}.stem"), out);
        self.down1.params(&format!("{prefix}.down1"), out);
        self.down2.params(&format!("{prefix}.down2"), out);
        for (i, blk) in self.res.iter().enumerate() {
            blk.a.params(&format!("{prefix}.res{}.a", i + 1), out);
            blk.b.params(&format!("{prefix}.res{}.b", i + 1), out);
        }
        self.up1.params(&format!("{prefix}.up1"), out);
        self.up2.params(&format!("{prefix}.up2"), out);
        self.out.params(&format!("{prefix}.out"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        self.stem.params_mut(&format!("{prefix}.stem"), out);
        self.down1.params_mut(&format!("{prefix}.down1"), out);
        self.down2.params_mut(&format!("{prefix}.down2"), out);
        for (i, blk) in self.res.iter_mut().enumerate() {
            blk.a.params_mut(&format!("{prefix}.res{}.a", i + 1), out);
            blk.b.params_mut(&format!("{prefix}.res{}.b", i + 1), out);
        }
        self.up1.params_mut(&format!("{prefix}.up1"), out);
        self.up2.params_mut(&format!("{prefix}.up2"), out);
        self.out.params_mut(&format!("{prefix}.out"), out);
    }
}

/// Patch discriminator: stride-2 convolutions shrink the slice to a grid of
/// logits, each judging the realism of one receptive field.
#[derive(Clone, Debug)]
pub(crate) struct Discriminator {
    d1: ConvLayer,
    d2: ConvLayer,
    d3: ConvLayer,
    d4: ConvLayer,
}

pub(crate) struct DiscTape {
    caches: Vec<LayerCache>,
}

impl Discriminator {
    fn new(base: usize, rng: &mut ChaCha8Rng) -> Self {
        let f = base;
        let mut disc = Discriminator {
            d1: ConvLayer::new(1, f, 4, 2, 1, false, Act::LRelu(DISC_SLOPE)),
            d2: ConvLayer::new(f, 2 * f, 4, 2, 1, true, Act::LRelu(DISC_SLOPE)),
            d3: ConvLayer::new(2 * f, 4 * f, 3, 1, 1, true, Act::LRelu(DISC_SLOPE)),
            d4: ConvLayer::new(4 * f, 1, 3, 1, 1, false, Act::None),
        };
        disc.d1.conv.init_he(rng, DISC_SLOPE);
        disc.d2.conv.init_he(rng, DISC_SLOPE);
        disc.d3.conv.init_he(rng, DISC_SLOPE);
        disc.d4.conv.init_he(rng, DISC_SLOPE);
        disc
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<DiscTape>) {
        let (h, c1) = self.d1.forward(x);
        let (h, c2) = self.d2.forward(&h);
        let (h, c3) = self.d3.forward(&h);
        let (y, c4) = self.d4.forward(&h);
        let tape = train.then_some(DiscTape {
            caches: vec![c1, c2, c3, c4],
        });
        (y, tape)
    }

    pub(crate) fn backward(
        &self,
        tape: &DiscTape,
        gy: &Tensor,
        grads: &mut NamedGrads,
        prefix: &str,
    ) -> Tensor {
        let g = self.d4.backward(&tape.caches[3], gy, grads, &format!("{prefix}.d4"));
        let g = self.d3.backward(&tape.caches[2], &g, grads, &format!("{prefix}.d3"));
        let g = self.d2.backward(&tape.caches[1], &g, grads, &format!("{prefix}.d2"));
        self.d1.backward(&tape.caches[0], &g, grads, &format!("{prefix}.d1"))
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Vec<f64>)>) {
        self.d1.params(&format!("{prefix}.d1"), out);
        self.d2.params(&format!("{prefix}.d2"), out);
        self.d3.params(&format!("{prefix}.d3"), out);
        self.d4.params(&format!("{prefix}.d4"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
        self.d1.params_mut(&format!("{prefix}.d1"), out);
        self.d2.params_mut(&format!("{prefix}.d2"), out);
        self.d3.params_mut(&format!("{prefix}.d3"), out);
        self.d4.params_mut(&format!("{prefix}.d4"), out);
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// One epoch of translator training, averaged over steps. `cycle_error` is
/// the unweighted mean absolute reconstruction error (per pixel) of the
/// round trips in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochRecord {
    pub epoch: usize,
    pub disc_loss: f64,
    pub adv_loss: f64,
    pub cycle_error: f64,
    pub seconds: f64,
}

/// Training history of a translator bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLog {
    pub seed: u64,
    pub config_hash: String,
    /// Cases consumed per side after balancing.
    pub cases_per_side: usize,
    /// Present when the input case counts were unequal and the larger side
    /// was subsampled.
    pub balance_note: Option<String>,
    pub epochs: Vec<GanEpochRecord>,
}

impl GanLog {
    /// Write the history as CSV (one row per epoch).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        let mut text = String::from("epoch,disc_loss,adv_loss,cycle_error,seconds\n");
        for r in &self.epochs {
            text.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.disc_loss, r.adv_loss, r.cycle_error, r.seconds
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Translation direction, named from the bundle's point of view: the
/// "source" center supplied the segmentation model's training data, the
/// "target" center is the unseen one. Harmonization maps target-center
/// images into the source domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

/// A trained pair of translation generators with their discriminators,
/// center identities and training history.
#[derive(Clone, Debug)]
pub struct TranslatorBundle {
    pub config: TranslatorConfig,
    pub source_center: String,
    pub target_center: String,
    pub log: GanLog,
    pub(crate) gen_st: Generator,
    pub(crate) gen_ts: Generator,
    pub(crate) disc_source: Discriminator,
    pub(crate) disc_target: Discriminator,
}

impl TranslatorBundle {
    /// All parameters in a fixed order, names prefixed by network.
    pub(crate) fn named_params(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.gen_st.params("gen_st", &mut out);
        self.gen_ts.params("gen_ts", &mut out);
        self.disc_source.params("disc_source", &mut out);
        self.disc_target.params("disc_target", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        self.gen_st.params_mut("gen_st", &mut out);
        self.gen_ts.params_mut("gen_ts", &mut out);
        self.disc_source.params_mut("disc_source", &mut out);
        self.disc_target.params_mut("disc_target", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.len()).sum()
    }
}

/// Freshly initialized translator bundle (no training history).
pub(crate) fn new_translator(
    config: &TranslatorConfig,
    source_center: &str,
    target_center: &str,
) -> TranslatorBundle {
    let f = config.base_features;
    let r = config.residual_blocks;
    let rng = |tag: &str| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, tag));
    TranslatorBundle {
        config: config.clone(),
        source_center: source_center.to_string(),
        target_center: target_center.to_string(),
        log: GanLog {
            seed: config.seed,
            config_hash: config_hash(config),
            cases_per_side: 0,
            balance_note: None,
            epochs: Vec::new(),
        },
        gen_st: Generator::new(f, r, &mut rng("gen-st")),
        gen_ts: Generator::new(f, r, &mut rng("gen-ts")),
        disc_source: Discriminator::new(f, &mut rng("disc-source")),
        disc_target: Discriminator::new(f, &mut rng("disc-target")),
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared distance of every element to `target`, with its gradient.
fn mse_toward(y: &Tensor, target: f64) -> (f64, Tensor) {
    let n = y.numel() as f64;
    let mut g = Tensor::zeros(y.c, y.h, y.w);
    let mut loss = 0.0;
    for (i, &v) in y.data.iter().enumerate() {
        let d = v - target;
        loss += d * d;
        g.data[i] = 2.0 * d / n;
    }
    (loss / n, g)
}

/// Mean absolute difference to `target`, with its gradient w.r.t. `y`.
fn l1_toward(y: &Tensor, target: &Tensor) -> (f64, Tensor) {
    debug_assert_eq!(y.shape(), target.shape());
    let n = y.numel() as f64;
    let mut g = Tensor::zeros(y.c, y.h, y.w);
    let mut loss = 0.0;
    for i in 0..y.data.len() {
        let d = y.data[i] - target.data[i];
        loss += d.abs();
        g.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    (loss / n, g)
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    t.map(|v| v * s)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub(crate) struct GeneratorPhase {
    pub adv_st: f64,
    pub adv_ts: f64,
    pub cycle_a: f64,
    pub cycle_b: f64,
    pub fake_a: Tensor,
    pub fake_b: Tensor,
    pub grads: NamedGrads,
}

/// Forward the generator objective for one (source, target) slice pair and
/// accumulate its gradients: both adversarial terms (each fake judged by the
/// opposite domain's discriminator against the "real" target) plus the
/// weighted cycle-consistency terms. Discriminator parameters receive no
/// gradient here.
pub(crate) fn generator_phase(
    bundle: &TranslatorBundle,
    a: &Tensor,
    b: &Tensor,
    cycle_weight: f64,
) -> GeneratorPhase {
    let mut grads = NamedGrads::new();
    let mut scratch = NamedGrads::new();

    // Source -> target direction with its cycle back to the source domain.
    let (fake_b, tape_st) = bundle.gen_st.forward(a, true);
    let (rec_a, tape_cycle_a) = bundle.gen_ts.forward(&fake_b, true);
    let (db, tape_db) = bundle.disc_target.forward(&fake_b, true);
    let (adv_st, g_db) = mse_toward(&db, 1.0);
    let g_fake_b_adv =
        bundle
            .disc_target
            .backward(tape_db.as_ref().expect("tape"), &g_db, &mut scratch, "frozen");
    let (cycle_a, g_rec_a) = l1_toward(&rec_a, a);
    let g_fake_b_cyc = bundle.gen_ts.backward(
        tape_cycle_a.as_ref().expect("tape"),
        &scaled(&g_rec_a, cycle_weight),
        &mut grads,
        "gen_ts",
    );
    let g_fake_b = ops::add(&g_fake_b_adv, &g_fake_b_cyc);
    bundle
        .gen_st
        .backward(tape_st.as_ref().expect("tape"), &g_fake_b, &mut grads, "gen_st");

    // Target -> source direction with its cycle back to the target domain.
    let (fake_a, tape_ts) = bundle.gen_ts.forward(b, true);
    let (rec_b, tape_cycle_b) = bundle.gen_st.forward(&fake_a, true);
    let (da, tape_da) = bundle.disc_source.forward(&fake_a, true);
    let (adv_ts, g_da) = mse_toward(&da, 1.0);
    let g_fake_a_adv =
        bundle
            .disc_source
            .backward(tape_da.as_ref().expect("tape"), &g_da, &mut scratch, "frozen");
    let (cycle_b, g_rec_b) = l1_toward(&rec_b, b);
    let g_fake_a_cyc = bundle.gen_st.backward(
        tape_cycle_b.as_ref().expect("tape"),
        &scaled(&g_rec_b, cycle_weight),
        &mut grads,
        "gen_st",
    );
    let g_fake_a = ops::add(&g_fake_a_adv, &g_fake_a_cyc);
    bundle
        .gen_ts
        .backward(tape_ts.as_ref().expect("tape"), &g_fake_a, &mut grads, "gen_ts");

    GeneratorPhase {
        adv_st,
        adv_ts,
        cycle_a,
        cycle_b,
        fake_a,
        fake_b,
        grads,
    }
}

/// Discriminator objective for one slice pair given fixed fakes: each
/// discriminator pushes real slices of its domain toward 1 and fakes toward
/// 0. The loss is halved so discriminators and generators see comparable
/// gradient scales.
pub(crate) fn discriminator_phase(
    bundle: &TranslatorBundle,
    a: &Tensor,
    b: &Tensor,
    fake_a: &Tensor,
    fake_b: &Tensor,
) -> (f64, NamedGrads) {
    let mut grads = NamedGrads::new();
    let mut loss = 0.0;
    let mut judge = |disc: &Discriminator, prefix: &str, x: &Tensor, real: bool| {
        let (logits, tape) = disc.forward(x, true);
        let (l, g) = mse_toward(&logits, if real { 1.0 } else { 0.0 });
        disc.backward(tape.as_ref().expect("tape"), &scaled(&g, 0.5), &mut grads, prefix);
        loss += 0.5 * l;
    };
    judge(&bundle.disc_source, "disc_source", a, true);
    judge(&bundle.disc_source, "disc_source", fake_a, false);
    judge(&bundle.disc_target, "disc_target", b, true);
    judge(&bundle.disc_target, "disc_target", fake_b, false);
    (loss, grads)
}

/// Subsample the larger side so both centers contribute equally many cases.
/// Selection is seeded and order-preserving; a note describes what happened
/// when the sides were unequal.
pub(crate) fn balance_cases<'a>(
    source: &'a [CaseRecord],
    target: &'a [CaseRecord],
    seed: u64,
) -> (Vec<&'a CaseRecord>, Vec<&'a CaseRecord>, Option<String>) {
    let m = source.len().min(target.len());
    let note = (source.len() != target.len()).then(|| {
        format!(
            "unequal case counts ({} source, {} target); subsampled the larger side to {m}",
            source.len(),
            target.len()
        )
    });
    let pick = |cases: &'a [CaseRecord], tag: &str| -> Vec<&'a CaseRecord> {
        if cases.len() == m {
            return cases.iter().collect();
        }
        let mut idx: Vec<usize> = (0..cases.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
        idx.shuffle(&mut rng);
        idx.truncate(m);
        idx.sort_unstable();
        idx.into_iter().map(|i| &cases[i]).collect()
    };
    (
        pick(source, "balance-source"),
        pick(target, "balance-target"),
        note,
    )
}

fn center_of(cases: &[&CaseRecord]) -> String {
    let mut ids: Vec<&str> = cases.iter().map(|c| c.center_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.join("+")
}

/// Train a translation pair between two centers on unpaired slices.
///
/// Volumes are expected in the standard ingested form (intensities min-max
/// normalized to [0,1]); training and inference both operate directly in
/// that space so a trained bundle sees test images on the same scale it was
/// fit on. Cases are balanced to equal counts per side (with a warning when
/// the larger side had to be subsampled), slices are center-cropped or
/// padded to the configured size, and each epoch pairs shuffled source
/// slices with shuffled target slices. Training is deterministic for a
/// given configuration. A non-finite loss aborts with a training error.
pub fn train_translator(
    source_cases: &[CaseRecord],
    target_cases: &[CaseRecord],
    cfg: &TranslatorConfig,
) -> Result<TranslatorBundle> {
    cfg.validate()?;
    if source_cases.is_empty() || target_cases.is_empty() {
        return Err(Error::validation(
            "translator training needs at least one case on each side",
        ));
    }
    let (src, tgt, note) = balance_cases(source_cases, target_cases, cfg.seed);
    if let Some(n) = &note {
        eprintln!("warning: {n}");
    }

    let s = cfg.image_size;
    let collect = |cases: &[&CaseRecord]| -> Vec<Slice2D> {
        cases
            .iter()
            .flat_map(|case| {
                (0..case.image.num_slices()).map(|k| case.image.slice(k).crop_or_pad(s, s))
            })
            .collect()
    };
    let src_slices = collect(&src);
    let tgt_slices = collect(&tgt);

    let mut bundle = new_translator(cfg, &center_of(&src), &center_of(&tgt));
    bundle.log.cases_per_side = src.len();
    bundle.log.balance_note = note;

    let mut adam_g = Adam::new_gan(cfg.learning_rate);
    let mut adam_d = Adam::new_gan(cfg.learning_rate);

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_n(cfg.seed, "gan-epoch", epoch as u64));
        let mut order_s: Vec<usize> = (0..src_slices.len()).collect();
        let mut order_t: Vec<usize> = (0..tgt_slices.len()).collect();
        order_s.shuffle(&mut rng);
        order_t.shuffle(&mut rng);
        let pairs = order_s.len().min(order_t.len());

        let (mut disc_sum, mut adv_sum, mut cycle_sum) = (0.0, 0.0, 0.0);
        for i in 0..pairs {
            let a = slice_to_tensor(&src_slices[order_s[i]]);
            let b = slice_to_tensor(&tgt_slices[order_t[i]]);

            let phase = generator_phase(&bundle, &a, &b, cfg.cycle_weight);
            adam_g.step(
                {
                    let mut params = Vec::new();
                    bundle.gen_st.params_mut("gen_st", &mut params);
                    bundle.gen_ts.params_mut("gen_ts", &mut params);
                    params
                },
                &phase.grads,
                &|_| true,
            );

            let (disc_loss, dgrads) =
                discriminator_phase(&bundle, &a, &b, &phase.fake_a, &phase.fake_b);
            adam_d.step(
                {
                    let mut params = Vec::new();
                    bundle.disc_source.params_mut("disc_source", &mut params);
                    bundle.disc_target.params_mut("disc_target", &mut params);
                    params
                },
                &dgrads,
                &|_| true,
            );

            let adv = 0.5 * (phase.adv_st + phase.adv_ts);
            let cycle = 0.5 * (phase.cycle_a + phase.cycle_b);
            if !disc_loss.is_finite() || !adv.is_finite() || !cycle.is_finite() {
                return Err(Error::Training {
                    reason: format!(
                        "non-finite loss in epoch {epoch} (disc {disc_loss}, adv {adv}, cycle {cycle})"
                    ),
                });
            }
            disc_sum += disc_loss;
            adv_sum += adv;
            cycle_sum += cycle;
        }

        let n = pairs.max(1) as f64;
        bundle.log.epochs.push(GanEpochRecord {
            epoch,
            disc_loss: disc_sum / n,
            adv_loss: adv_sum / n,
            cycle_error: cycle_sum / n,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Translate one slice with the generator for `direction`, clipping the
/// output into [0,1]. The slice must match the configured image size.
pub fn translate_slice(
    slice: &Slice2D,
    bundle: &TranslatorBundle,
    direction: Direction,
) -> Result<Slice2D> {
    let s = bundle.config.image_size;
    if slice.rows != s || slice.cols != s {
        return Err(Error::ShapeMismatch {
            context: "translator input slice".into(),
            expected: vec![s, s],
            actual: vec![slice.rows, slice.cols],
        });
    }
    let gen = match direction {
        Direction::SourceToTarget => &bundle.gen_st,
        Direction::TargetToSource => &bundle.gen_ts,
    };
    let (y, _) = gen.forward(&slice_to_tensor(slice), false);
    Ok(Slice2D {
        rows: s,
        cols: s,
        values: y.data.iter().map(|&v| v.max(0.0).min(1.0)).collect(),
    })
}

/// Translate a volume slice by slice (slices are independent), preserving
/// shape and spacing. The in-plane shape must match the configured size.
pub fn translate(v: &Volume, bundle: &TranslatorBundle, direction: Direction) -> Result<Volume> {
    let s = bundle.config.image_size;
    if v.shape.0 != s || v.shape.1 != s {
        return Err(Error::ShapeMismatch {
            context: "translator input volume".into(),
            expected: vec![s, s],
            actual: vec![v.shape.0, v.shape.1],
        });
    }
    let mut out = Volume::zeros(v.shape, v.spacing);
    for k in 0..v.num_slices() {
        let translated = translate_slice(&v.slice(k), bundle, direction)?;
        out.set_slice(k, &translated);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Persist a translator bundle (all four networks, config, centers, log).
pub fn save_translator(bundle: &TranslatorBundle, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "translator",
        "config": bundle.config,
        "source_center": bundle.source_center,
        "target_center": bundle.target_center,
        "log": bundle.log,
    });
    let named = bundle.named_params();
    let tensors: Vec<(String, Vec<usize>, &[f64])> = named
        .iter()
        .map(|(n, v)| (n.clone(), vec![v.len()], v.as_slice()))
        .collect();
    archive::save_named(path, &meta, &tensors)
}

/// Load a bundle saved by [`save_translator`]; weights reload bit-identically.
pub fn load_translator(path: &Path) -> Result<TranslatorBundle> {
    let (meta, mut tensors) = archive::load_named(path)?;
    let archive_err = |reason: String| Error::Archive {
        path: path.to_path_buf(),
        reason,
    };

    let kind = meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if kind != "translator" {
        return Err(archive_err(format!(
            "expected a translator archive, found kind {kind:?}"
        )));
    }
    let config: TranslatorConfig =
        serde_json::from_value(meta.get("config").cloned().unwrap_or(serde_json::Value::Null))
            .map_err(|e| archive_err(format!("config metadata: {e}")))?;
    config.validate()?;
    let field = |name: &str| -> String {
        meta.get(name)
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string()
    };
    let log: GanLog =
        serde_json::from_value(meta.get("log").cloned().unwrap_or(serde_json::Value::Null))
            .map_err(|e| archive_err(format!("log metadata: {e}")))?;

    let mut bundle = new_translator(&config, &field("source_center"), &field("target_center"));
    bundle.log = log;
    let mut missing = Vec::new();
    for (name, slot) in bundle.named_params_mut() {
        match tensors.remove(&name) {
            Some((_, values)) => {
                if values.len() != slot.len() {
                    return Err(archive_err(format!(
                        "tensor {name}: stored {} values, architecture needs {}",
                        values.len(),
                        slot.len()
                    )));
                }
                slot.copy_from_slice(&values);
            }
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(archive_err(format!("missing tensors: {}", missing.join(", "))));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.into_keys().collect();
        return Err(archive_err(format!("unexpected tensors: {}", extra.join(", "))));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{LabelMap, Split};
    use crate::nn::testutil::{numeric_grad, rel_err};
    use rand::Rng;

    fn random_slice_tensor(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(1, n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    /// Ring phantom case: bright pool inside a mid-intensity ring on a dark
    /// background, optionally re-exposed through a gamma + brightness change
    /// to fake a second center.
    fn phantom_case(id: usize, center: &str, n: usize, slices: usize, shifted: bool) -> CaseRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(3_000 + id as u64);
        let mut voxels = vec![0.0f32; n * n * slices];
        let half = n as f64 / 2.0;
        for s in 0..slices {
            let cr = half - 0.5 + rng.random_range(-1.5..=1.5);
            let cc = half - 0.5 + rng.random_range(-1.5..=1.5);
            let r_pool = n as f64 * 0.14 + rng.random_range(-0.5..=0.5);
            let r_myo = r_pool + n as f64 * 0.12;
            for r in 0..n {
                for c in 0..n {
                    let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                    let base: f64 = if d <= r_pool {
                        0.85
                    } else if d <= r_myo {
                        0.5
                    } else {
                        0.15
                    };
                    let mut v = (base + rng.random_range(-0.03..=0.03)).clamp(0.0, 1.0);
                    if shifted {
                        v = (v.powf(1.4) * 0.8 + 0.18).min(1.0);
                    }
                    voxels[c + n * (r + n * s)] = v as f32;
                }
            }
        }
        CaseRecord {
            case_id: format!("{center}-{id:02}"),
            center_id: center.to_string(),
            image: Volume::new((n, n, slices), (1.0, 1.0, 8.0), voxels).unwrap(),
            labels: None::<LabelMap>,
            split: Split::Train,
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(TranslatorConfig::default().validate().is_ok());
        assert!(TranslatorConfig::desk().validate().is_ok());
        let bad = |f: &dyn Fn(&mut TranslatorConfig)| {
            let mut cfg = TranslatorConfig::desk();
            f(&mut cfg);
            cfg.validate().is_err()
        };
        assert!(bad(&|c| c.image_size = 18));
        assert!(bad(&|c| c.image_size = 4));
        assert!(bad(&|c| c.base_features = 0));
        assert!(bad(&|c| c.residual_blocks = 0));
        assert!(bad(&|c| c.epochs = 0));
        assert!(bad(&|c| c.learning_rate = 0.0));
        assert!(bad(&|c| c.cycle_weight = -1.0));
    }

    #[test]
    fn untrained_generator_is_close_to_identity() {
        let bundle = new_translator(&TranslatorConfig::desk(), "A", "B");
        for seed in [1, 2, 3] {
            let x = random_slice_tensor(16, seed);
            for gen in [&bundle.gen_st, &bundle.gen_ts] {
                let (y, _) = gen.forward(&x, false);
                assert_eq!(y.shape(), x.shape());
                let mean_diff: f64 = x
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / x.numel() as f64;
                assert!(mean_diff < 0.05, "mean abs diff {mean_diff}");
            }
        }
    }

    #[test]
    fn generator_keeps_input_shape_at_any_valid_size() {
        let bundle = new_translator(&TranslatorConfig::desk(), "A", "B");
        for n in [8usize, 12, 16, 20] {
            let x = random_slice_tensor(n, 7);
            let (y, _) = bundle.gen_st.forward(&x, false);
            assert_eq!(y.shape(), (1, n, n));
        }
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut gen = Generator::new(3, 1, &mut rng);
        // Give the output projection real weight so its path carries signal.
        for w in &mut gen.out.conv.weight {
            *w = rng.random_range(-0.3..=0.3);
        }
        let x = random_slice_tensor(8, 42);
        let probe: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..=1.0)).collect();

        let loss_of = |g: &Generator| -> f64 {
            let (y, _) = g.forward(&x, false);
            y.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };

        let (y, tape) = gen.forward(&x, true);
        let gy = Tensor::from_vec(y.c, y.h, y.w, probe.clone());
        let mut grads = NamedGrads::new();
        gen.backward(tape.as_ref().unwrap(), &gy, &mut grads, "g");

        let picks = [
            ("g.stem.conv.weight", 2usize),
            ("g.down1.norm.gamma", 1),
            ("g.res1.a.conv.weight", 5),
            ("g.res1.b.norm.beta", 2),
            ("g.up1.up.weight", 3),
            ("g.up2.norm.gamma", 0),
            ("g.out.conv.weight", 4),
            ("g.out.conv.bias", 0),
        ];
        for (name, idx) in picks {
            let analytic = grads.get(name).unwrap_or_else(|| panic!("no grad {name}"))[idx];
            let mut vals = {
                let mut all = Vec::new();
                gen.params("g", &mut all);
                all.into_iter().find(|(n, _)| n == name).unwrap().1
            };
            let num = numeric_grad(
                |v| {
                    let mut g2 = gen.clone();
                    let mut params = Vec::new();
                    g2.params_mut("g", &mut params);
                    let (_, slot) = params.into_iter().find(|(n, _)| n == name).unwrap();
                    slot.copy_from_slice(v);
                    loss_of(&g2)
                },
                &mut vals,
                idx,
                1e-5,
            );
            if analytic.abs().max(num.abs()) < 1e-8 {
                continue;
            }
            assert!(
                rel_err(analytic, num) < 1e-4,
                "{name}[{idx}]: analytic {analytic} vs numeric {num}"
            );
        }
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let disc = Discriminator::new(3, &mut rng);
        let x = random_slice_tensor(8, 52);

        let loss_of = |d: &Discriminator| -> f64 {
            let (y, _) = d.forward(&x, false);
            mse_toward(&y, 1.0).0
        };

        let (y, tape) = disc.forward(&x, true);
        let (_, gy) = mse_toward(&y, 1.0);
        let mut grads = NamedGrads::new();
        disc.backward(tape.as_ref().unwrap(), &gy, &mut grads, "d");

        let picks = [
            ("d.d1.conv.weight", 3usize),
            ("d.d1.conv.bias", 0),
            ("d.d2.norm.beta", 1),
            ("d.d3.conv.weight", 7),
            ("d.d4.conv.weight", 2),
            ("d.d4.conv.bias", 0),
        ];
        for (name, idx) in picks {
            let analytic = grads.get(name).unwrap_or_else(|| panic!("no grad {name}"))[idx];
            let mut vals = {
                let mut all = Vec::new();
                disc.params("d", &mut all);
                all.into_iter().find(|(n, _)| n == name).unwrap().1
            };
            let num = numeric_grad(
                |v| {
                    let mut d2 = disc.clone();
                    let mut params = Vec::new();
                    d2.params_mut("d", &mut params);
                    let (_, slot) = params.into_iter().find(|(n, _)| n == name).unwrap();
                    slot.copy_from_slice(v);
                    loss_of(&d2)
                },
                &mut vals,
                idx,
                1e-5,
            );
            if analytic.abs().max(num.abs()) < 1e-8 {
                continue;
            }
            assert!(
                rel_err(analytic, num) < 1e-4,
                "{name}[{idx}]: analytic {analytic} vs numeric {num}"
            );
        }
    }

    #[test]
    fn assembled_generator_objective_gradient_matches_finite_differences() {
        // The full generator objective (two adversarial terms plus weighted
        // cycle terms) against central differences, exercising the exact
        // gradient assembly used in training.
        let cfg = TranslatorConfig {
            image_size: 8,
            base_features: 3,
            residual_blocks: 1,
            ..TranslatorConfig::desk()
        };
        let mut bundle = new_translator(&cfg, "A", "B");
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for gen in [&mut bundle.gen_st, &mut bundle.gen_ts] {
            for w in &mut gen.out.conv.weight {
                *w = rng.random_range(-0.2..=0.2);
            }
        }
        let a = random_slice_tensor(8, 62);
        let b = random_slice_tensor(8, 63);
        let lambda = 10.0;

        let objective = |bundle: &TranslatorBundle| -> f64 {
            let (fake_b, _) = bundle.gen_st.forward(&a, false);
            let (rec_a, _) = bundle.gen_ts.forward(&fake_b, false);
            let (fake_a, _) = bundle.gen_ts.forward(&b, false);
            let (rec_b, _) = bundle.gen_st.forward(&fake_a, false);
            let adv_st = mse_toward(&bundle.disc_target.forward(&fake_b, false).0, 1.0).0;
            let adv_ts = mse_toward(&bundle.disc_source.forward(&fake_a, false).0, 1.0).0;
            let cyc = l1_toward(&rec_a, &a).0 + l1_toward(&rec_b, &b).0;
            adv_st + adv_ts + lambda * cyc
        };

        let phase = generator_phase(&bundle, &a, &b, lambda);
        let picks = [
            ("gen_st.stem.conv.weight", 4usize),
            ("gen_st.res1.a.conv.weight", 9),
            ("gen_st.out.conv.weight", 2),
            ("gen_ts.down2.norm.gamma", 1),
            ("gen_ts.up2.up.weight", 5),
            ("gen_ts.out.conv.bias", 0),
        ];
        for (name, idx) in picks {
            let analytic = phase.grads.get(name).unwrap_or_else(|| panic!("no grad {name}"))[idx];
            let mut vals = bundle
                .named_params()
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap()
                .1;
            let num = numeric_grad(
                |v| {
                    let mut b2 = bundle.clone();
                    let (_, slot) = b2
                        .named_params_mut()
                        .into_iter()
                        .find(|(n, _)| n == name)
                        .unwrap();
                    slot.copy_from_slice(v);
                    objective(&b2)
                },
                &mut vals,
                idx,
                1e-5,
            );
            if analytic.abs().max(num.abs()) < 1e-8 {
                continue;
            }
            assert!(
                rel_err(analytic, num) < 1e-3,
                "{name}[{idx}]: analytic {analytic} vs numeric {num}"
            );
        }
    }

    #[test]
    fn balancing_subsamples_the_larger_side_only() {
        let source: Vec<CaseRecord> = (0..24).map(|i| phantom_case(i, "A", 8, 1, false)).collect();
        let target: Vec<CaseRecord> = (0..24).map(|i| phantom_case(i, "B", 8, 1, true)).collect();
        let (s, t, note) = balance_cases(&source, &target, 9);
        assert_eq!((s.len(), t.len()), (24, 24));
        assert!(note.is_none());

        let bigger: Vec<CaseRecord> = (0..30).map(|i| phantom_case(i, "B", 8, 1, true)).collect();
        let (s, t, note) = balance_cases(&source, &bigger, 9);
        assert_eq!((s.len(), t.len()), (24, 24));
        let note = note.unwrap();
        assert!(note.contains("24 source") && note.contains("30 target"), "{note}");
        // Deterministic and order-preserving.
        let (_, t2, _) = balance_cases(&source, &bigger, 9);
        let ids: Vec<&str> = t.iter().map(|c| c.case_id.as_str()).collect();
        let ids2: Vec<&str> = t2.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids, ids2);
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted, "subsampling must preserve case order");
    }

    fn toy_training_config() -> TranslatorConfig {
        TranslatorConfig {
            image_size: 16,
            base_features: 6,
            residual_blocks: 1,
            epochs: 30,
            seed: 5,
            ..TranslatorConfig::default()
        }
    }

    /// Put a phantom case into the standard ingested form: intensities
    /// min-max normalized to [0,1], the space every harmonization operator
    /// works in.
    fn normalized(mut case: CaseRecord) -> CaseRecord {
        case.image = crate::data_io::minmax_normalize(&case.image).unwrap();
        case
    }

    #[test]
    fn training_reduces_cycle_error_and_aligns_first_moments() {
        let source: Vec<CaseRecord> =
            (0..4).map(|i| normalized(phantom_case(i, "A", 16, 3, false))).collect();
        let target: Vec<CaseRecord> =
            (10..14).map(|i| normalized(phantom_case(i, "B", 16, 3, true))).collect();
        let cfg = toy_training_config();
        let bundle = train_translator(&source, &target, &cfg).unwrap();

        assert_eq!(bundle.source_center, "A");
        assert_eq!(bundle.target_center, "B");
        assert_eq!(bundle.log.cases_per_side, 4);
        assert!(bundle.log.balance_note.is_none());
        assert_eq!(bundle.log.epochs.len(), cfg.epochs);
        for r in &bundle.log.epochs {
            assert!(
                r.disc_loss.is_finite() && r.adv_loss.is_finite() && r.cycle_error.is_finite(),
                "non-finite entry {r:?}"
            );
        }

        // The cycle term dominates the objective, so the round-trip error
        // must come down substantially from its untrained starting level.
        let first = bundle.log.epochs.first().unwrap().cycle_error;
        let last = bundle.log.epochs.last().unwrap().cycle_error;
        assert!(
            last <= 0.5 * first,
            "cycle error did not halve: first {first}, last {last}"
        );

        // Translating an unseen target-center volume toward the source
        // domain must move its mean intensity toward the source mean. The
        // per-volume normalization cancels the affine part of the domain
        // shift; what remains (the gamma curve) is what the translator has
        // to undo.
        let eval_target = normalized(phantom_case(99, "B", 16, 3, true));
        let eval_source = normalized(phantom_case(98, "A", 16, 3, false));
        let mean = |v: &Volume| -> f64 {
            v.voxels.iter().map(|&x| x as f64).sum::<f64>() / v.voxels.len() as f64
        };
        let source_mean = mean(&eval_source.image);
        let translated = translate(&eval_target.image, &bundle, Direction::TargetToSource).unwrap();
        let before = (mean(&eval_target.image) - source_mean).abs();
        let after = (mean(&translated) - source_mean).abs();
        assert!(
            after < before,
            "translation did not move the mean toward the source domain: {before} -> {after}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let source: Vec<CaseRecord> = (0..2).map(|i| phantom_case(i, "A", 16, 2, false)).collect();
        let target: Vec<CaseRecord> =
            (20..22).map(|i| phantom_case(i, "B", 16, 2, true)).collect();
        let cfg = TranslatorConfig {
            epochs: 2,
            ..toy_training_config()
        };
        let b1 = train_translator(&source, &target, &cfg).unwrap();
        let b2 = train_translator(&source, &target, &cfg).unwrap();
        for ((n1, v1), (n2, v2)) in b1.named_params().into_iter().zip(b2.named_params()) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = v1.iter().map(|f| f.to_bits()).collect();
            let bits2: Vec<u64> = v2.iter().map(|f| f.to_bits()).collect();
            assert_eq!(bits1, bits2, "parameter {n1} differs between runs");
        }
        // Identical histories, wall-clock timing aside.
        for (r1, r2) in b1.log.epochs.iter().zip(&b2.log.epochs) {
            assert_eq!(
                (r1.epoch, r1.disc_loss, r1.adv_loss, r1.cycle_error),
                (r2.epoch, r2.disc_loss, r2.adv_loss, r2.cycle_error)
            );
        }
    }

    #[test]
    fn unbalanced_sides_are_subsampled_with_a_note() {
        let source: Vec<CaseRecord> = (0..2).map(|i| phantom_case(i, "A", 16, 2, false)).collect();
        let target: Vec<CaseRecord> =
            (30..33).map(|i| phantom_case(i, "B", 16, 2, true)).collect();
        let cfg = TranslatorConfig {
            epochs: 1,
            ..toy_training_config()
        };
        let bundle = train_translator(&source, &target, &cfg).unwrap();
        assert_eq!(bundle.log.cases_per_side, 2);
        assert!(bundle.log.balance_note.is_some());

        assert!(train_translator(&[], &target, &cfg).is_err());
    }

    #[test]
    fn volume_translation_equals_slice_by_slice_translation() {
        let bundle = new_translator(&toy_training_config(), "A", "B");
        let case = phantom_case(7, "B", 16, 4, true);
        let whole = translate(&case.image, &bundle, Direction::TargetToSource).unwrap();
        for k in 0..case.image.num_slices() {
            let single =
                translate_slice(&case.image.slice(k), &bundle, Direction::TargetToSource).unwrap();
            // Volumes store f32 voxels, so compare at storage precision.
            let stored: Vec<f64> = single.values.iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(whole.slice(k).values, stored, "slice {k} differs");
        }
        assert_eq!(whole.shape, case.image.shape);
        assert_eq!(whole.spacing, case.image.spacing);
    }

    #[test]
    fn translation_output_is_clipped_into_unit_range() {
        let mut bundle = new_translator(&toy_training_config(), "A", "B");
        // Force the residual far out of range.
        bundle.gen_ts.out.conv.bias[0] = 5.0;
        let case = phantom_case(8, "B", 16, 2, true);
        let out = translate(&case.image, &bundle, Direction::TargetToSource).unwrap();
        assert!(out.voxels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.voxels.iter().any(|&v| v == 1.0), "bias should saturate");
    }

    #[test]
    fn wrong_slice_shape_is_rejected() {
        let bundle = new_translator(&toy_training_config(), "A", "B");
        let case = phantom_case(9, "B", 12, 2, true);
        let err = translate(&case.image, &bundle, Direction::TargetToSource).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("16") && msg.contains("12"), "{msg}");
    }

    #[test]
    fn bundle_round_trips_through_the_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("translator.lvw");
        let source: Vec<CaseRecord> = (0..2).map(|i| phantom_case(i, "A", 16, 2, false)).collect();
        let target: Vec<CaseRecord> =
            (40..42).map(|i| phantom_case(i, "B", 16, 2, true)).collect();
        let cfg = TranslatorConfig {
            epochs: 1,
            ..toy_training_config()
        };
        let bundle = train_translator(&source, &target, &cfg).unwrap();
        save_translator(&bundle, &path).unwrap();
        let back = load_translator(&path).unwrap();

        assert_eq!(back.config, bundle.config);
        assert_eq!(back.source_center, "A");
        assert_eq!(back.target_center, "B");
        assert_eq!(back.log, bundle.log);
        for ((n1, v1), (n2, v2)) in bundle.named_params().into_iter().zip(back.named_params()) {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = v1.iter().map(|f| f.to_bits()).collect();
            let bits2: Vec<u64> = v2.iter().map(|f| f.to_bits()).collect();
            assert_eq!(bits1, bits2, "parameter {n1} changed across the round trip");
        }

        // Translations agree bit for bit after reload.
        let case = phantom_case(41, "B", 16, 2, true);
        let a = translate(&case.image, &bundle, Direction::TargetToSource).unwrap();
        let b = translate(&case.image, &back, Direction::TargetToSource).unwrap();
        assert_eq!(a.voxels, b.voxels);
    }

    #[test]
    fn archive_kind_mismatches_are_rejected_both_ways() {
        let dir = tempfile::tempdir().unwrap();

        let seg_path = dir.path().join("seg.lvw");
        let seg = crate::segnet::build_network(&crate::segnet::NetworkConfig::desk(), 1).unwrap();
        crate::segnet::save_bundle(&seg, &seg_path).unwrap();
        let err = load_translator(&seg_path).unwrap_err();
        assert!(err.to_string().contains("kind"), "{err}");

        let tr_path = dir.path().join("tr.lvw");
        let bundle = new_translator(&toy_training_config(), "A", "B");
        save_translator(&bundle, &tr_path).unwrap();
        let err = crate::segnet::load_bundle(&tr_path).unwrap_err();
        assert!(err.to_string().contains("kind"), "{err}");
    }
}

//! Encoder-decoder segmentation network with skip connections, instance
//! normalization, LeakyReLU activations and deep-supervision heads.
//!
//! Structure for `L` levels: encoder stages 1..L-1 plus a bottleneck stage
//! (stage L), then decoder stages L-1..1. Each stage is two conv(3x3) ->
//! instance-norm -> LeakyReLU units; stages deeper than 1 downsample with a
//! stride-2 first convolution, decoder stages upsample with a 2x2 stride-2
//! transposed convolution and concatenate the matching encoder skip.
//! The main classification head sits on decoder stage 1 (full resolution);
//! auxiliary head k sits on decoder stage k+1 (resolution divided by 2^k).
//!
//! Parameters are named `<block>.<layer>.<field>` where `<block>` is one of
//! `enc1..enc{L-1}`, `bottleneck`, `dec1..dec{L-1}`; a head's parameters
//! belong to the decoder block it is attached to.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{accumulate, Conv2d, ConvTranspose2x2, InstanceNorm2d, NamedGrads, NormCache, Tensor};

/// conv -> instance norm -> LeakyReLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvUnit {
    pub conv: Conv2d,
    pub norm: InstanceNorm2d,
}

pub(crate) struct UnitCache {
    x: Tensor,
    z: Tensor,
    stats: NormCache,
    a: Tensor,
}

impl ConvUnit {
    fn new(in_c: usize, out_c: usize, stride: usize) -> Self {
        ConvUnit {
            conv: Conv2d::new(in_c, out_c, 3, stride, 1),
            norm: InstanceNorm2d::new(out_c),
        }
    }

    fn init(&mut self, rng: &mut ChaCha8Rng, slope: f64) {
        self.conv.init_he(rng, slope);
    }

    fn forward(&self, x: &Tensor, slope: f64) -> (Tensor, UnitCache) {
        let z = self.conv.forward(x);
        let (a, stats) = self.norm.forward(&z);
        let y = ops::leaky_relu(&a, slope);
        (
            y,
            UnitCache {
                x: x.clone(),
                z,
                stats,
                a,
            },
        )
    }

    fn backward(
        &self,
        cache: &UnitCache,
        gy: &Tensor,
        slope: f64,
        grads: &mut NamedGrads,
        prefix: &str,
    ) -> Tensor {
        let ga = ops::leaky_relu_backward(&cache.a, gy, slope);
        let mut ggamma = vec![0.0; self.norm.channels];
        let mut gbeta = vec![0.0; self.norm.channels];
        let gz = self.norm.backward(&cache.z, &cache.stats, &ga, &mut ggamma, &mut gbeta);
        accumulate(grads, &format!("{prefix}.norm.gamma"), &ggamma);
        accumulate(grads, &format!("{prefix}.norm.beta"), &gbeta);
        let mut gw = vec![0.0; self.conv.weight.len()];
        let mut gb = vec![0.0; self.conv.bias.len()];
        let gx = self.conv.backward(&cache.x, &gz, &mut gw, &mut gb);
        accumulate(grads, &format!("{prefix}.conv.weight"), &gw);
        accumulate(grads, &format!("{prefix}.conv.bias"), &gb);
        gx
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EncStage {
    pub unit1: ConvUnit,
    pub unit2: ConvUnit,
}

impl EncStage {
    fn new(in_c: usize, out_c: usize, downsample: bool) -> Self {
        EncStage {
            unit1: ConvUnit::new(in_c, out_c, if downsample { 2 } else { 1 }),
            unit2: ConvUnit::new(out_c, out_c, 1),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DecStage {
    pub up: ConvTranspose2x2,
    pub unit1: ConvUnit,
    pub unit2: ConvUnit,
    pub head: Option<Conv2d>,
}

pub(crate) struct EncCache {
    u1: UnitCache,
    u2: UnitCache,
}

pub(crate) struct DecCache {
    up_in: Tensor,
    u1: UnitCache,
    u2: UnitCache,
    out: Tensor,
}

/// Activation tape recorded by a training-mode forward pass.
pub struct Tape {
    enc: Vec<EncCache>,        // stages 1..L-1
    bottleneck: EncCache,      // stage L
    dec: Vec<DecCache>,        // index s-1 holds decoder stage s
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub levels: usize,
    pub base: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub slope: f64,
    /// Number of auxiliary deep-supervision heads (main head not counted).
    pub aux_heads: usize,
    pub(crate) enc: Vec<EncStage>,
    pub(crate) bottleneck: EncStage,
    pub(crate) dec: Vec<DecStage>,
}

/// Feature width of stage `s` (1-based): base * 2^(s-1), capped at 1024.
pub fn stage_width(base: usize, s: usize) -> usize {
    (base << (s - 1)).min(1024)
}

impl UNet {
    pub fn new(
        levels: usize,
        base: usize,
        in_channels: usize,
        num_classes: usize,
        slope: f64,
        aux_heads: usize,
        seed: u64,
    ) -> Self {
        assert!(levels >= 2, "network needs at least 2 levels");
        assert!(aux_heads + 1 < levels, "too many supervision heads for depth");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = |s: usize| stage_width(base, s);

        let mut enc = Vec::with_capacity(levels - 1);
        for s in 1..levels {
            let in_c = if s == 1 { in_channels } else { w(s - 1) };
            let mut stage = EncStage::new(in_c, w(s), s > 1);
            stage.unit1.init(&mut rng, slope);
            stage.unit2.init(&mut rng, slope);
            enc.push(stage);
        }
        let mut bottleneck = EncStage::new(w(levels - 1), w(levels), true);
        bottleneck.unit1.init(&mut rng, slope);
        bottleneck.unit2.init(&mut rng, slope);

        let mut dec = Vec::with_capacity(levels - 1);
        for s in 1..levels {
            let mut up = ConvTranspose2x2::new(w(s + 1), w(s));
            up.init_he(&mut rng, slope);
            let mut unit1 = ConvUnit::new(2 * w(s), w(s), 1);
            unit1.init(&mut rng, slope);
            let mut unit2 = ConvUnit::new(w(s), w(s), 1);
            unit2.init(&mut rng, slope);
            let head = if s == 1 || s <= aux_heads + 1 {
                let mut h = Conv2d::new(w(s), num_classes, 1, 1, 0);
                h.init_he(&mut rng, slope);
                Some(h)
            } else {
                None
            };
            dec.push(DecStage { up, unit1, unit2, head });
        }

        UNet {
            levels,
            base,
            in_channels,
            num_classes,
            slope,
            aux_heads,
            enc,
            bottleneck,
            dec,
        }
    }

    /// Minimum spatial divisor required of inputs: 2^(levels-1).
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = self.spatial_divisor();
        if x.c != self.in_channels || x.h % d != 0 || x.w % d != 0 || x.h < d || x.w < d {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "network input (channels must be {}, spatial dims divisible by {})",
                    self.in_channels, d
                ),
                expected: vec![self.in_channels, d, d],
                actual: vec![x.c, x.h, x.w],
            });
        }
        Ok(())
    }

    /// Forward pass returning per-head logits, ordered main head first, then
    /// auxiliary heads by increasing downsampling factor. With `want_tape`
    /// the activation tape for [`UNet::backward`] is returned as well.
    pub fn forward_logits(&self, x: &Tensor, want_tape: bool) -> Result<(Vec<Tensor>, Option<Tape>)> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.levels - 1);
        let mut enc_caches = Vec::with_capacity(self.levels - 1);
        let mut cur = x.clone();
        for stage in &self.enc {
            let (y1, c1) = stage.unit1.forward(&cur, self.slope);
            let (y2, c2) = stage.unit2.forward(&y1, self.slope);
            skips.push(y2.clone());
            enc_caches.push(EncCache { u1: c1, u2: c2 });
            cur = y2;
        }
        let (b1, cb1) = self.bottleneck.unit1.forward(&cur, self.slope);
        let (b2, cb2) = self.bottleneck.unit2.forward(&b1, self.slope);
        let bottleneck_cache = EncCache { u1: cb1, u2: cb2 };
        cur = b2;

        let mut dec_caches: Vec<Option<DecCache>> = (0..self.levels - 1).map(|_| None).collect();
        let mut logits: Vec<Option<Tensor>> = vec![None; self.aux_heads + 1];
        for s in (1..self.levels).rev() {
            let stage = &self.dec[s - 1];
            let up_in = cur;
            let up_out = stage.up.forward(&up_in);
            let cat = ops::concat_channels(&up_out, &skips[s - 1]);
            let (y1, c1) = stage.unit1.forward(&cat, self.slope);
            let (y2, c2) = stage.unit2.forward(&y1, self.slope);
            if let Some(head) = &stage.head {
                let z = head.forward(&y2);
                if s == 1 {
                    logits[0] = Some(z);
                } else {
                    logits[s - 1] = Some(z);
                }
            }
            dec_caches[s - 1] = Some(DecCache {
                up_in,
                u1: c1,
                u2: c2,
                out: y2.clone(),
            });
            cur = y2;
        }

        let logits: Vec<Tensor> = logits.into_iter().map(|l| l.expect("head logits")).collect();
        let tape = if want_tape {
            Some(Tape {
                enc: enc_caches,
                bottleneck: bottleneck_cache,
                dec: dec_caches.into_iter().map(|c| c.expect("dec cache")).collect(),
            })
        } else {
            None
        };
        Ok((logits, tape))
    }

    /// Backward pass from per-head logit gradients; accumulates parameter
    /// gradients into `grads` (creating entries as needed).
    pub fn backward(&self, tape: &Tape, dlogits: &[Tensor], grads: &mut NamedGrads) {
        assert_eq!(dlogits.len(), self.aux_heads + 1, "one gradient per head");

        // Head contributions to each decoder stage's output gradient.
        let mut g_out: Vec<Option<Tensor>> = (0..self.levels - 1).map(|_| None).collect();
        for (h, dz) in dlogits.iter().enumerate() {
            let s = if h == 0 { 1 } else { h + 1 };
            let stage = &self.dec[s - 1];
            let head = stage.head.as_ref().expect("head exists");
            let mut gw = vec![0.0; head.weight.len()];
            let mut gb = vec![0.0; head.bias.len()];
            let gx = head.backward(&tape.dec[s - 1].out, dz, &mut gw, &mut gb);
            accumulate(grads, &format!("dec{s}.head.weight"), &gw);
            accumulate(grads, &format!("dec{s}.head.bias"), &gb);
            g_out[s - 1] = Some(gx);
        }

        // Decoder chain: stage 1 upward; each stage passes gradient to the
        // next deeper stage through its transposed convolution, and to the
        // encoder through its skip split.
        let mut g_skips: Vec<Option<Tensor>> = (0..self.levels - 1).map(|_| None).collect();
        let mut g_bottleneck: Option<Tensor> = None;
        for s in 1..self.levels {
            let stage = &self.dec[s - 1];
            let cache = &tape.dec[s - 1];
            let g = g_out[s - 1].take().unwrap_or_else(|| {
                let o = &cache.out;
                Tensor::zeros(o.c, o.h, o.w)
            });
            let prefix = format!("dec{s}");
            let g1 = stage.unit2.backward(&cache.u2, &g, self.slope, grads, &format!("{prefix}.2"));
            let gcat = stage.unit1.backward(&cache.u1, &g1, self.slope, grads, &format!("{prefix}.1"));
            let up_channels = stage.up.out_c;
            let (g_up_out, g_skip) = ops::split_channels(&gcat, up_channels);
            g_skips[s - 1] = Some(g_skip);

            let mut gw = vec![0.0; stage.up.weight.len()];
            let mut gb = vec![0.0; stage.up.bias.len()];
            let g_up_in = stage.up.backward(&cache.up_in, &g_up_out, &mut gw, &mut gb);
            accumulate(grads, &format!("{prefix}.up.weight"), &gw);
            accumulate(grads, &format!("{prefix}.up.bias"), &gb);
            if s == self.levels - 1 {
                g_bottleneck = Some(g_up_in);
            } else {
                match &mut g_out[s] {
                    Some(acc) => *acc = ops::add(acc, &g_up_in),
                    None => g_out[s] = Some(g_up_in),
                }
            }
        }

        // Bottleneck, then encoder stages from deep to shallow.
        let gb = g_bottleneck.expect("bottleneck gradient");
        let g1 = self
            .bottleneck
            .unit2
            .backward(&tape.bottleneck.u2, &gb, self.slope, grads, "bottleneck.2");
        let mut g_down = self
            .bottleneck
            .unit1
            .backward(&tape.bottleneck.u1, &g1, self.slope, grads, "bottleneck.1");
        for s in (1..self.levels).rev() {
            let stage = &self.enc[s - 1];
            let cache = &tape.enc[s - 1];
            let g_total = ops::add(&g_down, g_skips[s - 1].as_ref().expect("skip grad"));
            let prefix = format!("enc{s}");
            let g1 = stage
                .unit2
                .backward(&cache.u2, &g_total, self.slope, grads, &format!("{prefix}.2"));
            g_down = stage
                .unit1
                .backward(&cache.u1, &g1, self.slope, grads, &format!("{prefix}.1"));
        }
        // g_down is now the gradient w.r.t. the network input; unused.
    }

    fn unit_entries<'a>(
        prefix: &str,
        unit: &'a ConvUnit,
        out: &mut Vec<(String, &'a Vec<f64>)>,
    ) {
        out.push((format!("{prefix}.conv.weight"), &unit.conv.weight));
        out.push((format!("{prefix}.conv.bias"), &unit.conv.bias));
        out.push((format!("{prefix}.norm.gamma"), &unit.norm.gamma));
        out.push((format!("{prefix}.norm.beta"), &unit.norm.beta));
    }

    fn unit_entries_mut<'a>(
        prefix: &str,
        unit: &'a mut ConvUnit,
        out: &mut Vec<(String, &'a mut Vec<f64>)>,
    ) {
        out.push((format!("{prefix}.conv.weight"), &mut unit.conv.weight));
        out.push((format!("{prefix}.conv.bias"), &mut unit.conv.bias));
        out.push((format!("{prefix}.norm.gamma"), &mut unit.norm.gamma));
        out.push((format!("{prefix}.norm.beta"), &mut unit.norm.beta));
    }

    /// All parameters as (name, values), in a fixed deterministic order.
    pub fn params(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (i, stage) in self.enc.iter().enumerate() {
            let s = i + 1;
            Self::unit_entries(&format!("enc{s}.1"), &stage.unit1, &mut out);
            Self::unit_entries(&format!("enc{s}.2"), &stage.unit2, &mut out);
        }
        Self::unit_entries("bottleneck.1", &self.bottleneck.unit1, &mut out);
        Self::unit_entries("bottleneck.2", &self.bottleneck.unit2, &mut out);
        for (i, stage) in self.dec.iter().enumerate() {
            let s = i + 1;
            out.push((format!("dec{s}.up.weight"), &stage.up.weight));
            out.push((format!("dec{s}.up.bias"), &stage.up.bias));
            Self::unit_entries(&format!("dec{s}.1"), &stage.unit1, &mut out);
            Self::unit_entries(&format!("dec{s}.2"), &stage.unit2, &mut out);
            if let Some(head) = &stage.head {
                out.push((format!("dec{s}.head.weight"), &head.weight));
                out.push((format!("dec{s}.head.bias"), &head.bias));
            }
        }
        out
    }

    /// Mutable variant of [`UNet::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, stage) in self.enc.iter_mut().enumerate() {
            let s = i + 1;
            Self::unit_entries_mut(&format!("enc{s}.1"), &mut stage.unit1, &mut out);
            Self::unit_entries_mut(&format!("enc{s}.2"), &mut stage.unit2, &mut out);
        }
        Self::unit_entries_mut("bottleneck.1", &mut self.bottleneck.unit1, &mut out);
        Self::unit_entries_mut("bottleneck.2", &mut self.bottleneck.unit2, &mut out);
        for (i, stage) in self.dec.iter_mut().enumerate() {
            let s = i + 1;
            out.push((format!("dec{s}.up.weight"), &mut stage.up.weight));
            out.push((format!("dec{s}.up.bias"), &mut stage.up.bias));
            Self::unit_entries_mut(&format!("dec{s}.1"), &mut stage.unit1, &mut out);
            Self::unit_entries_mut(&format!("dec{s}.2"), &mut stage.unit2, &mut out);
            if let Some(head) = &mut stage.head {
                out.push((format!("dec{s}.head.weight"), &mut head.weight));
                out.push((format!("dec{s}.head.bias"), &mut head.bias));
            }
        }
        out
    }

    /// Parameter shapes, aligned with [`UNet::params`] order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let unit_shapes = |prefix: &str, unit: &ConvUnit, out: &mut Vec<(String, Vec<usize>)>| {
            let c = &unit.conv;
            out.push((format!("{prefix}.conv.weight"), vec![c.out_c, c.in_c, c.k, c.k]));
            out.push((format!("{prefix}.conv.bias"), vec![c.out_c]));
            out.push((format!("{prefix}.norm.gamma"), vec![unit.norm.channels]));
            out.push((format!("{prefix}.norm.beta"), vec![unit.norm.channels]));
        };
        for (i, stage) in self.enc.iter().enumerate() {
            let s = i + 1;
            unit_shapes(&format!("enc{s}.1"), &stage.unit1, &mut out);
            unit_shapes(&format!("enc{s}.2"), &stage.unit2, &mut out);
        }
        unit_shapes("bottleneck.1", &self.bottleneck.unit1, &mut out);
        unit_shapes("bottleneck.2", &self.bottleneck.unit2, &mut out);
        for (i, stage) in self.dec.iter().enumerate() {
            let s = i + 1;
            out.push((format!("dec{s}.up.weight"), vec![stage.up.in_c, stage.up.out_c, 2, 2]));
            out.push((format!("dec{s}.up.bias"), vec![stage.up.out_c]));
            unit_shapes(&format!("dec{s}.1"), &stage.unit1, &mut out);
            unit_shapes(&format!("dec{s}.2"), &stage.unit2, &mut out);
            if let Some(head) = &stage.head {
                out.push((format!("dec{s}.head.weight"), vec![head.out_c, head.in_c, 1, 1]));
                out.push((format!("dec{s}.head.bias"), vec![head.out_c]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }

    /// Block a parameter belongs to: the name segment before the first dot.
    pub fn block_of(param_name: &str) -> &str {
        param_name.split('.').next().unwrap_or(param_name)
    }
}

//! Two-stage conditional generator.
//!
//! `G_m`: strided conv encoder (BN + ReLU) → residual stack → three synthesis
//! blocks (transposed conv, AGM, skip concat with the resized condition, conv,
//! SCA) → head producing the half-resolution image.
//! `G_l`: encodes the full-resolution condition, adds it to the `G_m` trunk
//! and decodes the full-resolution image. Its parameters live under `gl.`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormMode, Var};
use crate::data::{CONDITION_CHANNELS, NUM_GRADES};
use crate::error::{config_err, validation_err, Result};
use crate::grading::{split_styles, MappingNetwork, FEATURE_DIM};
use crate::nn::{BatchNorm2d, Binder, Conv2d, ConvTranspose2d, ParamId, ParamKind, ParamStore};
use crate::rng::{stream, tag};
use crate::sca::{clip_reduction, ScaBlock};
use crate::tensor::Tensor;

pub const ADAIN_EPS: f64 = 1e-5;
pub const ENHANCER_PREFIX: &str = "gl.";
/// Synthesis blocks carrying SCA; the head is one more AGM site.
pub const SCA_BLOCKS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub full_resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub n_residual_blocks: usize,
    pub sca_reductions: [usize; 3],
    pub noise_fraction: f64,
    pub style_dim: usize,
    pub mapping_hidden: usize,
    /// `false` replaces AGM by instance norm with a learned per-channel affine.
    pub agm: bool,
    pub sca: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            full_resolution: 256,
            base_channels: 16,
            max_channels: 256,
            n_residual_blocks: 7,
            sca_reductions: [8, 16, 32],
            noise_fraction: 0.25,
            style_dim: FEATURE_DIM,
            mapping_hidden: 128,
            agm: true,
            sca: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.full_resolution == 0 || self.full_resolution % 16 != 0 {
            return Err(config_err!("full_resolution {} not divisible by 16", self.full_resolution));
        }
        if self.n_residual_blocks == 0 {
            return Err(config_err!("n_residual_blocks must be ≥ 1"));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(config_err!("channel widths base={} max={}", self.base_channels, self.max_channels));
        }
        if !(self.noise_fraction > 0.0 && self.noise_fraction <= 1.0) {
            return Err(config_err!("noise_fraction {} outside (0, 1]", self.noise_fraction));
        }
        Ok(())
    }

    /// Width of encoder level `k` (0-based), also used by the decoder.
    pub fn width(&self, k: usize) -> usize {
        (self.base_channels << k).min(self.max_channels)
    }

    /// Channel widths of the AGM sites: three synthesis blocks then the head.
    pub fn block_widths(&self) -> [usize; 4] {
        [self.width(3), self.width(2), self.width(1), self.width(0)]
    }

    pub fn style_len(&self) -> usize {
        self.block_widths().iter().map(|w| 2 * w).sum()
    }
}

/// `γ ⊙ (x − μ(x)) / max(σ(x), eps) + β` per sample and channel; `gamma` and
/// `beta` are `[N, C]` or `[1, C]`.
pub fn adain(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let n = g.normalize(x, NormMode::InstanceFloor { eps: ADAIN_EPS });
    g.channel_affine(n, gamma, beta)
}

/// Differentiable 2× nearest-neighbour upsampling.
pub fn upsample_nearest2(g: &mut Graph, x: Var) -> Var {
    let c = g.shape(x)[1];
    let mut w = Tensor::zeros(&[c, c, 2, 2]);
    for i in 0..c {
        w.data_mut()[(i * c + i) * 4..(i * c + i + 1) * 4].fill(1.0);
    }
    let w = g.constant(w);
    g.conv_transpose2d(x, w, None, 2, 0, 0)
}

/// Noise injection, 1×1 fusion and AdaIN at one synthesis site.
#[derive(Clone, Debug)]
pub struct Agm {
    pub channels: usize,
    pub noise_channels: usize,
    pub fuse: Conv2d,
}

impl Agm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, noise_fraction: f64, rng: &mut R) -> Self {
        let noise_channels = (libm::round(channels as f64 * noise_fraction) as usize).max(1);
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), channels + noise_channels, channels, 1, 1, 0, true, rng);
        Self { channels, noise_channels, fuse }
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, b: &mut Binder, feat: Var, gamma: Var, beta: Var, rng: &mut R) -> Var {
        let [n, _, h, w] = g.value(feat).dims4();
        let noise = g.constant(Tensor::randn(&[n, self.noise_channels, h, w], 1.0, rng));
        let cat = g.concat(&[feat, noise]);
        let fused = self.fuse.forward(g, b, cat);
        adain(g, fused, gamma, beta)
    }
}

/// Instance norm with a learned per-channel affine; the "w/o AGM" variant.
#[derive(Clone, Debug)]
pub struct PlainNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl PlainNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, channels], 1.0), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, channels]), ParamKind::Trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let gamma = b.var(g, self.gamma);
        let beta = b.var(g, self.beta);
        adain(g, x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub enum Modulation {
    Agm(Agm),
    Plain(PlainNorm),
}

impl Modulation {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        if cfg.agm {
            Modulation::Agm(Agm::new(store, name, channels, cfg.noise_fraction, rng))
        } else {
            Modulation::Plain(PlainNorm::new(store, name, channels))
        }
    }

    fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, b: &mut Binder, x: Var, style: (Var, Var), rng: &mut R) -> Var {
        match self {
            Modulation::Agm(a) => a.forward(g, b, x, style.0, style.1, rng),
            Modulation::Plain(p) => p.forward(g, b, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    /// `x + conv2(relu(conv1(x)))`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let h = self.conv1.forward(g, b, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisBlock {
    pub up: ConvTranspose2d,
    pub modulation: Modulation,
    pub conv: Conv2d,
    pub sca: Option<ScaBlock>,
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub conv_in: Conv2d,
    pub conv_down: Conv2d,
    pub up: ConvTranspose2d,
    pub out: ConvTranspose2d,
}

/// Encoder pyramid: levels at `R/2, R/4, R/8, R/16`; the last is the bottleneck.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub levels: Vec<Var>,
}

impl EncoderFeatures {
    pub fn bottleneck(&self) -> Var {
        *self.levels.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// `G_m` only; the full image is the nearest-upsampled mid image.
    Global,
    /// `G_m` followed by `G_l`.
    Full,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    pub mid: Var,
    pub full: Var,
    pub trunk: Var,
    pub grade_logits: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    pub encoder: Vec<(Conv2d, BatchNorm2d)>,
    pub residual: Vec<ResidualBlock>,
    pub blocks: Vec<SynthesisBlock>,
    pub head_up: ConvTranspose2d,
    pub head_mod: Modulation,
    pub to_mid: Conv2d,
    pub grade_head: Conv2d,
    pub mapping: MappingNetwork,
    pub enhancer: Enhancer,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(&[tag::INIT, seed, 0x67]);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = CONDITION_CHANNELS;

        let mut encoder = Vec::new();
        let mut cin = c;
        for k in 0..4 {
            let (kernel, pad) = if k == 0 { (7, 3) } else { (3, 1) };
            let w = config.width(k);
            let conv = Conv2d::new(s, &format!("enc{k}.conv"), cin, w, kernel, 2, pad, false, rng);
            encoder.push((conv, BatchNorm2d::new(s, &format!("enc{k}.bn"), w)));
            cin = w;
        }

        let wb = config.width(3);
        let residual = (0..config.n_residual_blocks)
            .map(|i| ResidualBlock {
                conv1: Conv2d::same(s, &format!("res{i}.conv1"), wb, wb, 3, rng),
                conv2: Conv2d::same(s, &format!("res{i}.conv2"), wb, wb, 3, rng),
            })
            .collect();

        let widths = config.block_widths();
        let mut blocks = Vec::new();
        let mut prev = wb;
        for (i, &w) in widths[..SCA_BLOCKS].iter().enumerate() {
            let name = format!("syn{i}");
            let up = if i == 0 {
                ConvTranspose2d::new(s, &format!("{name}.up"), prev, w, 3, 1, 1, 0, rng)
            } else {
                ConvTranspose2d::up2(s, &format!("{name}.up"), prev, w, rng)
            };
            let modulation = Modulation::new(s, &format!("{name}.agm"), w, &config, rng);
            // skip from the encoder level at the same scale
            let skip = config.width(3 - i);
            let conv = Conv2d::same(s, &format!("{name}.conv"), w + skip + c, w, 3, rng);
            let sca = if config.sca {
                let d = clip_reduction(w, config.sca_reductions[i]);
                Some(ScaBlock::new(s, &format!("{name}.sca"), w, d, rng)?)
            } else {
                None
            };
            blocks.push(SynthesisBlock { up, modulation, conv, sca });
            prev = w;
        }
        let wh = widths[SCA_BLOCKS];
        let head_up = ConvTranspose2d::up2(s, "head.up", prev, wh, rng);
        let head_mod = Modulation::new(s, "head.agm", wh, &config, rng);
        let to_mid = Conv2d::same(s, "head.to_mid", wh, 3, 7, rng);
        let grade_head = Conv2d::same(s, "grade_head", wb, NUM_GRADES, 3, rng);
        let mapping = MappingNetwork::new(s, "mapping", config.style_dim, config.mapping_hidden, config.style_len(), rng);

        let p = ENHANCER_PREFIX;
        let enhancer = Enhancer {
            conv_in: Conv2d::same(s, &format!("{p}conv_in"), c, wh, 7, rng),
            conv_down: Conv2d::new(s, &format!("{p}conv_down"), wh, wh, 3, 2, 1, true, rng),
            up: ConvTranspose2d::up2(s, &format!("{p}up"), wh, wh, rng),
            out: ConvTranspose2d::new(s, &format!("{p}out"), wh, 3, 7, 1, 3, 0, rng),
        };

        Ok(Self { config, store, encoder, residual, blocks, head_up, head_mod, to_mid, grade_head, mapping, enhancer })
    }

    /// Spatial size at each SCA-bearing synthesis block: `R/16, R/8, R/4`.
    pub fn synthesis_sizes(&self) -> [usize; SCA_BLOCKS] {
        let r = self.config.full_resolution;
        [r / 16, r / 8, r / 4]
    }

    fn check_condition(&self, g: &Graph, c: Var) -> Result<()> {
        let shape = g.value(c).shape();
        if shape.len() != 4 || shape[1] != CONDITION_CHANNELS {
            return Err(validation_err!("condition must be [N, 8, R, R], got {shape:?}"));
        }
        let r = self.config.full_resolution;
        if shape[2] != r || shape[3] != r {
            return Err(validation_err!("condition is {}x{}, generator expects {r}x{r}", shape[2], shape[3]));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, b: &mut Binder, c: Var) -> Result<EncoderFeatures> {
        self.check_condition(g, c)?;
        let mut levels = Vec::with_capacity(4);
        let mut h = c;
        for (conv, bn) in &self.encoder {
            h = conv.forward(g, b, h);
            h = bn.forward(g, b, h);
            h = g.relu(h);
            levels.push(h);
        }
        Ok(EncoderFeatures { levels })
    }

    pub fn residual_stack(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        self.residual.iter().fold(x, |h, block| block.forward(g, b, h))
    }

    /// 5-way grade logits from the bottleneck: conv then global average pooling.
    pub fn predict_grade(&self, g: &mut Graph, b: &mut Binder, feats: &EncoderFeatures) -> Var {
        let h = self.grade_head.forward(g, b, feats.bottleneck());
        g.global_avg_pool(h)
    }

    /// Style pairs from grading vectors `z: [N, style_dim]`.
    pub fn styles(&self, g: &mut Graph, b: &mut Binder, z: Var) -> Result<Vec<(Var, Var)>> {
        let raw = self.mapping.forward(g, b, z);
        split_styles(g, raw, &self.config.block_widths())
    }

    /// Decoder of `G_m`. Returns `(mid image, trunk)`; the trunk is the head
    /// feature map at `R/2` that `G_l` builds on.
    pub fn synthesize_mid<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        c: Var,
        feats: &EncoderFeatures,
        styles: &[(Var, Var)],
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        if styles.len() != SCA_BLOCKS + 1 {
            return Err(config_err!("{} style pairs for {} modulation sites", styles.len(), SCA_BLOCKS + 1));
        }
        // condition at R/2 .. R/16
        let mut resized = Vec::with_capacity(4);
        let mut cr = c;
        for _ in 0..4 {
            cr = g.avg_pool2(cr);
            resized.push(cr);
        }
        let mut h = self.residual_stack(g, b, feats.bottleneck());
        for (i, block) in self.blocks.iter().enumerate() {
            let level = 3 - i;
            h = block.up.forward(g, b, h);
            h = block.modulation.forward(g, b, h, styles[i], rng);
            h = g.relu(h);
            h = g.concat(&[h, feats.levels[level], resized[level]]);
            h = block.conv.forward(g, b, h);
            h = g.relu(h);
            if let Some(sca) = &block.sca {
                let a = sca.forward(g, b, h);
                h = g.add(h, a);
            }
        }
        h = self.head_up.forward(g, b, h);
        h = self.head_mod.forward(g, b, h, styles[SCA_BLOCKS], rng);
        let trunk = g.relu(h);
        let mid = self.to_mid.forward(g, b, trunk);
        Ok((g.tanh(mid), trunk))
    }

    /// `G_l`: full-resolution image from the condition and the `G_m` trunk.
    pub fn enhance(&self, g: &mut Graph, b: &mut Binder, c: Var, trunk: Option<Var>) -> Result<Var> {
        let trunk = trunk.ok_or_else(|| crate::Error::State("enhance called without G_m trunk features".into()))?;
        let e = &self.enhancer;
        let h = e.conv_in.forward(g, b, c);
        let h = g.relu(h);
        let h = e.conv_down.forward(g, b, h);
        let h = g.relu(h);
        let fused = g.add(trunk, h);
        let h = e.up.forward(g, b, fused);
        let h = g.relu(h);
        let h = e.out.forward(g, b, h);
        Ok(g.tanh(h))
    }

    /// Full forward with styles from `z: [N, style_dim]`.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, b: &mut Binder, c: Var, z: Var, stage: Stage, rng: &mut R) -> Result<GeneratorOutput> {
        let feats = self.encode(g, b, c)?;
        let grade_logits = self.predict_grade(g, b, &feats);
        let styles = self.styles(g, b, z)?;
        let (mid, trunk) = self.synthesize_mid(g, b, c, &feats, &styles, rng)?;
        let full = match stage {
            Stage::Full => self.enhance(g, b, c, Some(trunk))?,
            Stage::Global => upsample_nearest2(g, mid),
        };
        Ok(GeneratorOutput { mid, full, trunk, grade_logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(r: usize) -> GeneratorConfig {
        GeneratorConfig { full_resolution: r, base_channels: 4, max_channels: 32, n_residual_blocks: 2, style_dim: 6, mapping_hidden: 8, ..Default::default() }
    }

    #[test]
    fn shape_law() {
        let gen = Generator::new(tiny(32), 0).unwrap();
        let mut rng = stream(&[1]);
        let mut g = Graph::new();
        let mut b = Binder::eval(&gen.store);
        let c = g.constant(Tensor::uniform(&[2, 8, 32, 32], 0.0, 1.0, &mut rng));
        let z = g.constant(Tensor::randn(&[2, 6], 1.0, &mut rng));
        let out = gen.forward(&mut g, &mut b, c, z, Stage::Full, &mut rng).unwrap();
        assert_eq!(g.value(out.mid).shape(), &[2, 3, 16, 16]);
        assert_eq!(g.value(out.full).shape(), &[2, 3, 32, 32]);
        assert_eq!(g.value(out.grade_logits).shape(), &[2, 5]);
        assert!(g.value(out.full).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn wrong_condition_is_rejected() {
        let gen = Generator::new(tiny(32), 0).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::eval(&gen.store);
        let c = g.constant(Tensor::zeros(&[1, 7, 32, 32]));
        assert!(matches!(gen.encode(&mut g, &mut b, c), Err(crate::Error::Validation(_))));
        let c = g.constant(Tensor::zeros(&[1, 8, 16, 16]));
        assert!(matches!(gen.encode(&mut g, &mut b, c), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(matches!(Generator::new(GeneratorConfig { full_resolution: 40, ..tiny(32) }, 0), Err(crate::Error::Config(_))));
        assert!(matches!(Generator::new(GeneratorConfig { n_residual_blocks: 0, ..tiny(32) }, 0), Err(crate::Error::Config(_))));
    }
}

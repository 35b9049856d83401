//! Three conditional discriminators over an average-pooled pyramid of
//! `concat(c, x)`. Each has four strided leaky-ReLU convs, global average
//! pooling, a real/fake head and a 5-way grade head.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{CONDITION_CHANNELS, NUM_GRADES};
use crate::error::{config_err, validation_err, Result};
use crate::nn::{Binder, Conv2d, Linear, ParamStore};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub n_scales: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { n_scales: 3, conv_layers: 4, kernel: 4, stride: 2, leaky_slope: 0.2, base_channels: 16, max_channels: 256 }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 || self.conv_layers == 0 || self.kernel == 0 || self.stride == 0 || self.base_channels == 0 {
            return Err(config_err!("discriminator sizes must be positive: {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self, layer: usize) -> usize {
        (self.base_channels << layer).min(self.max_channels)
    }

    /// Receptive field, in input pixels of its own scale, of one neuron after
    /// the conv stack.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for _ in 0..self.conv_layers {
            rf += (self.kernel - 1) * jump;
            jump *= self.stride;
        }
        rf
    }

    /// Share of the full-resolution image area covered by that receptive field
    /// at pyramid level `scale`.
    pub fn receptive_area_fraction(&self, scale: usize, resolution: usize) -> f64 {
        let side = (self.receptive_field() << scale) as f64 / resolution as f64;
        side * side
    }

    /// Smallest pyramid base the conv stack accepts at every scale.
    pub fn min_resolution(&self) -> usize {
        (1usize << self.conv_layers) << (self.n_scales - 1)
    }
}

#[derive(Clone, Debug)]
pub struct ScaleDiscriminator {
    pub convs: Vec<Conv2d>,
    pub rf_head: Linear,
    pub grade_head: Linear,
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `[N]`
    pub rf_logit: Var,
    /// Post-activation output of every conv layer.
    pub features: Vec<Var>,
    /// `[N, 5]`
    pub grade_logits: Var,
}

#[derive(Clone, Debug)]
pub struct MultiScaleDiscriminator {
    pub config: DiscConfig,
    pub store: ParamStore,
    pub scales: Vec<ScaleDiscriminator>,
}

impl MultiScaleDiscriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(&[tag::INIT, seed, 0x64]);
        let mut store = ParamStore::new();
        let pad = (config.kernel - 1) / 2;
        let scales = (0..config.n_scales)
            .map(|n| {
                let mut cin = CONDITION_CHANNELS + 3;
                let convs = (0..config.conv_layers)
                    .map(|l| {
                        let w = config.width(l);
                        let conv = Conv2d::new(&mut store, &format!("d{n}.conv{l}"), cin, w, config.kernel, config.stride, pad, true, &mut rng);
                        cin = w;
                        conv
                    })
                    .collect();
                let rf_head = Linear::new(&mut store, &format!("d{n}.rf"), cin, 1, &mut rng);
                let grade_head = Linear::new(&mut store, &format!("d{n}.grade"), cin, NUM_GRADES, &mut rng);
                ScaleDiscriminator { convs, rf_head, grade_head }
            })
            .collect();
        Ok(Self { config, store, scales })
    }

    /// `concat(c, x)` at full, half and quarter resolution (for three scales).
    pub fn build_pyramid(&self, g: &mut Graph, x: Var, c: Var) -> Result<Vec<Var>> {
        let xs = g.shape(x).to_vec();
        let cs = g.shape(c).to_vec();
        if xs.len() != 4 || cs.len() != 4 || xs[1] != 3 || cs[1] != CONDITION_CHANNELS || xs[0] != cs[0] || xs[2..] != cs[2..] {
            return Err(validation_err!("pyramid needs x [N,3,R,R] and c [N,8,R,R] of equal size, got {xs:?} and {cs:?}"));
        }
        if xs[2] < self.config.min_resolution() || xs[2] % (1 << (self.config.n_scales - 1)) != 0 {
            return Err(validation_err!("input size {} too small for the discriminator pyramid", xs[2]));
        }
        let mut level = g.concat(&[c, x]);
        let mut out = Vec::with_capacity(self.config.n_scales);
        for n in 0..self.config.n_scales {
            if n > 0 {
                level = g.avg_pool2(level);
            }
            out.push(level);
        }
        Ok(out)
    }

    pub fn discriminate(&self, g: &mut Graph, b: &mut Binder, pyramid: &[Var]) -> Result<Vec<DiscOutput>> {
        if pyramid.len() != self.scales.len() {
            return Err(validation_err!("{} pyramid levels for {} discriminators", pyramid.len(), self.scales.len()));
        }
        Ok(self
            .scales
            .iter()
            .zip(pyramid)
            .map(|(d, &input)| {
                let mut h = input;
                let mut features = Vec::with_capacity(d.convs.len());
                for conv in &d.convs {
                    h = conv.forward(g, b, h);
                    h = g.leaky_relu(h, self.config.leaky_slope);
                    features.push(h);
                }
                let pooled = g.global_avg_pool(h);
                let rf = d.rf_head.forward(g, b, pooled);
                let n = g.shape(rf)[0];
                let rf_logit = g.reshape(rf, &[n]);
                let grade_logits = d.grade_head.forward(g, b, pooled);
                DiscOutput { rf_logit, features, grade_logits }
            })
            .collect())
    }

    /// Pyramid plus all discriminators.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var, c: Var) -> Result<Vec<DiscOutput>> {
        let pyr = self.build_pyramid(g, x, c)?;
        self.discriminate(g, b, &pyr)
    }
}

/// Tensor-level pyramid of `concat(c, x)` for `x: [N,3,R,R]`, `c: [N,8,R,R]`.
pub fn build_pyramid(x: &Tensor, c: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    if x.ndim() != 4 || c.ndim() != 4 || x.shape()[0] != c.shape()[0] || x.shape()[2..] != c.shape()[2..] {
        return Err(validation_err!("pyramid shape mismatch {:?} vs {:?}", x.shape(), c.shape()));
    }
    let mut level = Tensor::concat_channels(&[c, x]);
    let mut out = Vec::with_capacity(levels);
    for n in 0..levels {
        if n > 0 {
            level = level.avg_pool2();
        }
        out.push(level.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_grows_with_scale() {
        let cfg = DiscConfig::default();
        assert_eq!(cfg.receptive_field(), 46);
        let ratio = cfg.receptive_area_fraction(2, 256) / cfg.receptive_area_fraction(0, 256);
        assert!(ratio >= 4.0);
        assert_eq!(cfg.min_resolution(), 64);
    }

    #[test]
    fn parameters_are_disjoint_per_scale() {
        let d = MultiScaleDiscriminator::new(DiscConfig::default(), 0).unwrap();
        for n in 0..3 {
            let prefix = format!("d{n}.");
            let count = d.store.iter().filter(|(_, p)| p.name.starts_with(&prefix)).count();
            assert_eq!(count, 4 * 2 + 4);
        }
        let mut ids: Vec<usize> = d.scales.iter().flat_map(|s| s.convs.iter().map(|c| c.weight.index())).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
    }
}

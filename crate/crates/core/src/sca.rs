//! Spatial and channel attention block.
//!
//! Spatial branch: two 1×1 projections to `C/d` channels give the map
//! `a[i][j] = softmax_j(Σ_c q[c,i]·k[c,j])` over positions; a third 1×1
//! projection keeps all `C` channels and is mixed as `I + V·aᵀ`.
//! Channel branch: `a = softmax(I·Iᵀ)` over channels, output `I + a·I`.
//! The block returns `w_s·conv_s(I^s) + w_c·conv_c(I^c)`.

use alloc::format;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, Result};
use crate::nn::{Binder, Conv2d, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Largest divisor of `channels` that does not exceed `reduction`.
pub fn clip_reduction(channels: usize, reduction: usize) -> usize {
    (1..=reduction.max(1).min(channels)).rev().find(|d| channels % d == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct ScaBlock {
    pub channels: usize,
    pub reduction: usize,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub out_spatial: Conv2d,
    pub out_channel: Conv2d,
    pub w_spatial: ParamId,
    pub w_channel: ParamId,
}

impl ScaBlock {
    /// `channels` must be divisible by `reduction`; see [`clip_reduction`].
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(config_err!("{name}: {channels} channels not divisible by reduction {reduction}"));
        }
        let inner = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            query: Conv2d::new(store, &format!("{name}.query"), channels, inner, 1, 1, 0, false, rng),
            key: Conv2d::new(store, &format!("{name}.key"), channels, inner, 1, 1, 0, false, rng),
            value: Conv2d::new(store, &format!("{name}.value"), channels, channels, 1, 1, 0, false, rng),
            out_spatial: Conv2d::same(store, &format!("{name}.out_spatial"), channels, channels, 3, rng),
            out_channel: Conv2d::same(store, &format!("{name}.out_channel"), channels, channels, 3, rng),
            w_spatial: store.add(format!("{name}.w_spatial"), Tensor::zeros(&[1]), ParamKind::Trainable),
            w_channel: store.add(format!("{name}.w_channel"), Tensor::zeros(&[1]), ParamKind::Trainable),
        })
    }

    /// Returns `(I^s, a^s)` with `a^s: [N, HW, HW]`.
    pub fn spatial_attention(&self, g: &mut Graph, b: &mut Binder, x: Var) -> (Var, Var) {
        let [n, c, h, w] = g.value(x).dims4();
        let hw = h * w;
        let inner = c / self.reduction;
        let q = self.query.forward(g, b, x);
        let q = g.reshape(q, &[n, inner, hw]);
        let k = self.key.forward(g, b, x);
        let k = g.reshape(k, &[n, inner, hw]);
        let energy = g.bmm(q, k, true, false);
        let attn = g.softmax_rows(energy);
        let v = self.value.forward(g, b, x);
        let v = g.reshape(v, &[n, c, hw]);
        let mixed = g.bmm(v, attn, false, true);
        let mixed = g.reshape(mixed, &[n, c, h, w]);
        (g.add(x, mixed), attn)
    }

    /// Returns `(I^c, a^c)` with `a^c: [N, C, C]`.
    pub fn channel_attention(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        channel_attention(g, x)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let (s, _) = self.spatial_attention(g, b, x);
        let (c, _) = channel_attention(g, x);
        let s = self.out_spatial.forward(g, b, s);
        let c = self.out_channel.forward(g, b, c);
        let ws = b.var(g, self.w_spatial);
        let wc = b.var(g, self.w_channel);
        let s = g.mul_scalar_var(s, ws);
        let c = g.mul_scalar_var(c, wc);
        g.add(s, c)
    }
}

/// Parameter-free channel attention: `(I + softmax(I·Iᵀ)·I, map)`.
pub fn channel_attention(g: &mut Graph, x: Var) -> (Var, Var) {
    let [n, c, h, w] = g.value(x).dims4();
    let flat = g.reshape(x, &[n, c, h * w]);
    let energy = g.bmm(flat, flat, false, true);
    let attn = g.softmax_rows(energy);
    let mixed = g.bmm(attn, flat, false, false);
    let mixed = g.reshape(mixed, &[n, c, h, w]);
    (g.add(x, mixed), attn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn reduction_clipping() {
        assert_eq!(clip_reduction(64, 8), 8);
        assert_eq!(clip_reduction(12, 8), 6);
        assert_eq!(clip_reduction(4, 32), 4);
        assert_eq!(clip_reduction(7, 8), 7);
        assert_eq!(clip_reduction(5, 4), 1);
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let mut store = ParamStore::new();
        let err = ScaBlock::new(&mut store, "sca", 12, 8, &mut stream(&[0])).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn zero_fusion_weights_give_zero_output() {
        let mut rng = stream(&[1]);
        let mut store = ParamStore::new();
        let sca = ScaBlock::new(&mut store, "sca", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::eval(&store);
        let x = g.constant(Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng));
        let y = sca.forward(&mut g, &mut b, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_attention_doubles_input() {
        let mut rng = stream(&[2]);
        let mut g = Graph::new();
        let t = Tensor::randn(&[1, 1, 2, 3], 1.0, &mut rng);
        let x = g.constant(t.clone());
        let (y, a) = channel_attention(&mut g, x);
        assert_eq!(g.value(a).data(), &[1.0]);
        assert!(g.value(y).max_abs_diff(&t.map(|v| 2.0 * v)) < 1e-15);
    }
}

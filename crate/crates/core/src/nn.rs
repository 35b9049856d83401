//! Parameter storage, graph binding and the handful of layers the networks
//! are built from.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, NormMode, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; never receives gradients.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named parameters of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.value.numel()).sum()
    }

    /// Replace values by name; every name in `self` must be present in `values`
    /// with an identical shape.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> crate::Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in values {
            let id = self
                .find(name)
                .ok_or_else(|| crate::error::validation_err!("unknown parameter {name}"))?;
            if self.params[id.0].value.shape() != t.shape() {
                return Err(crate::error::validation_err!(
                    "parameter {name}: shape {:?} != stored {:?}",
                    t.shape(),
                    self.params[id.0].value.shape()
                ));
            }
            self.params[id.0].value = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(crate::error::validation_err!("missing parameter {}", self.params[i].name));
        }
        Ok(())
    }

    /// FNV-1a over names and value bits; used to assert parameters are untouched.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

/// Running-statistics update recorded by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Binds a [`ParamStore`] into a [`Graph`]: each parameter becomes one leaf,
/// created on first use.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    frozen: Vec<bool>,
    training: bool,
    updates: Vec<StatUpdate>,
}

impl<'a> Binder<'a> {
    /// All trainable parameters receive gradients; batch norm uses batch statistics.
    pub fn train(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            frozen: store.params.iter().map(|p| p.kind == ParamKind::Buffer).collect(),
            training: true,
            updates: Vec::new(),
        }
    }

    /// No gradients; batch norm uses running statistics.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.len()], frozen: vec![true; store.len()], training: false, updates: Vec::new() }
    }

    /// Training-mode forward (batch statistics) without parameter gradients.
    pub fn frozen_train(store: &'a ParamStore) -> Self {
        Self { frozen: vec![true; store.len()], ..Self::train(store) }
    }

    pub fn freeze_prefix(mut self, prefix: &str) -> Self {
        for (id, p) in self.store.iter() {
            if p.name.starts_with(prefix) {
                self.frozen[id.0] = true;
            }
        }
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.store.get(id).clone(), !self.frozen[id.0]);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn record(&mut self, update: StatUpdate) {
        self.updates.push(update);
    }

    pub fn take_updates(&mut self) -> Vec<StatUpdate> {
        core::mem::take(&mut self.updates)
    }

    /// Per-parameter gradients aligned with the store; `None` for parameters
    /// that were unused or frozen.
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .zip(&self.frozen)
            .map(|(v, &frozen)| match v {
                Some(v) if !frozen => grads.get(*v).cloned(),
                _ => None,
            })
            .collect()
    }
}

/// Applies recorded running-statistic updates with momentum `m`
/// (`running = (1 − m)·running + m·batch`).
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, libm::sqrt(2.0 / fan_in.max(1) as f64), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(name.to_string() + ".weight", he_normal(&shape, in_channels * kernel * kernel, rng), ParamKind::Trainable);
        let bias = bias.then(|| store.add(name.to_string() + ".bias", Tensor::zeros(&[out_channels]), ParamKind::Trainable));
        Self { weight, bias, stride, pad, in_channels, out_channels, kernel }
    }

    /// "Same" padding, stride 1.
    pub fn same<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, kernel, 1, kernel / 2, true, rng)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let w = b.var(g, self.weight);
        let bias = self.bias.map(|id| b.var(g, id));
        g.conv2d(x, w, bias, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut R,
    ) -> Self {
        let shape = [in_channels, out_channels, kernel, kernel];
        let fan_in = in_channels * kernel * kernel / (stride * stride).max(1);
        let weight = store.add(name.to_string() + ".weight", he_normal(&shape, fan_in, rng), ParamKind::Trainable);
        let bias = Some(store.add(name.to_string() + ".bias", Tensor::zeros(&[out_channels]), ParamKind::Trainable));
        Self { weight, bias, stride, pad, out_pad }
    }

    /// Kernel 3, stride 2, padding 1, output padding 1: exact 2× upsampling.
    pub fn up2<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 3, 2, 1, 1, rng)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let w = b.var(g, self.weight);
        let bias = self.bias.map(|id| b.var(g, id));
        g.conv_transpose2d(x, w, bias, self.stride, self.pad, self.out_pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(name.to_string() + ".gamma", Tensor::full(&[1, channels], 1.0), ParamKind::Trainable),
            beta: store.add(name.to_string() + ".beta", Tensor::zeros(&[1, channels]), ParamKind::Trainable),
            running_mean: store.add(name.to_string() + ".running_mean", Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(name.to_string() + ".running_var", Tensor::full(&[channels], 1.0), ParamKind::Buffer),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let normalized = if b.is_training() {
            let [n, c, h, w] = g.value(x).dims4();
            let hw = h * w;
            let count = (n * hw) as f64;
            let xd = g.value(x).data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let m = (0..n).map(|s| xd[(s * c + ci) * hw..(s * c + ci + 1) * hw].iter().sum::<f64>()).sum::<f64>() / count;
                let v = (0..n)
                    .map(|s| xd[(s * c + ci) * hw..(s * c + ci + 1) * hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                mean[ci] = m;
                var[ci] = if count > 1.0 { v * count / (count - 1.0) } else { v };
            }
            b.record(StatUpdate { mean_id: self.running_mean, var_id: self.running_var, mean, var });
            g.normalize(x, NormMode::Batch { eps: self.eps })
        } else {
            // inference: affine map with the running statistics
            let c = g.value(x).shape()[1];
            let rm = b.store().get(self.running_mean).data().to_vec();
            let rv = b.store().get(self.running_var).data().to_vec();
            let scale: Vec<f64> = rv.iter().map(|v| 1.0 / libm::sqrt(v + self.eps)).collect();
            let shift: Vec<f64> = rm.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let s = g.constant(Tensor::from_vec(&[1, c], scale));
            let t = g.constant(Tensor::from_vec(&[1, c], shift));
            g.channel_affine(x, s, t)
        };
        let gamma = b.var(g, self.gamma);
        let beta = b.var(g, self.beta);
        g.channel_affine(normalized, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        let weight = store.add(name.to_string() + ".weight", he_normal(&[fin, fout], fin, rng), ParamKind::Trainable);
        let bias = store.add(name.to_string() + ".bias", Tensor::zeros(&[fout]), ParamKind::Trainable);
        Self { weight, bias, in_features: fin, out_features: fout }
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Var {
        let w = b.var(g, self.weight);
        let bias = b.var(g, self.bias);
        let y = g.bmm(x, w, false, false);
        g.add_bias(y, bias)
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are left
/// untouched, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: Vec<u64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: vec![0; store.len()],
            m: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len(), "gradient list does not match the store");
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.params[i].value.data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_prefix_yields_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = Linear::new(&mut store, "a", 3, 2, &mut rng);
        let b = Linear::new(&mut store, "b", 2, 1, &mut rng);
        let mut g = Graph::new();
        let mut bind = Binder::train(&store).freeze_prefix("a.");
        let x = g.constant(Tensor::full(&[2, 3], 0.5));
        let h = a.forward(&mut g, &mut bind, x);
        let y = b.forward(&mut g, &mut bind, h);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let collected = bind.collect(&grads);
        assert!(collected[a.weight.index()].is_none());
        assert!(collected[b.weight.index()].is_some());
    }

    #[test]
    fn adam_skips_parameters_without_gradients() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::full(&[2], 1.0), ParamKind::Trainable);
        let q = store.add("q", Tensor::full(&[2], 1.0), ParamKind::Trainable);
        let mut adam = Adam::new(&store, 0.1, 0.5, 0.999);
        adam.step(&mut store, &[Some(Tensor::full(&[2], 1.0)), None]);
        assert!((store.get(p).data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(store.get(q).data(), &[1.0, 1.0]);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut store = ParamStore::new();
        let p = store.add("gl.w", Tensor::zeros(&[3]), ParamKind::Trainable);
        store.add("gm.w", Tensor::zeros(&[3]), ParamKind::Trainable);
        let before = store.fingerprint("gl.");
        store.get_mut(p).data_mut()[1] = 1e-300;
        assert_ne!(before, store.fingerprint("gl."));
    }
}

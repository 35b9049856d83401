//! Grade classifier, per-grade latent Gaussians and the mapping network that
//! turns a grading vector into per-block AdaIN styles.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Dataset, GradeLabel, NUM_GRADES};
use crate::error::{config_err, validation_err, Result};
use crate::nn::{apply_stat_updates, Adam, BatchNorm2d, Binder, Conv2d, Linear, ParamStore};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
const WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Penultimate feature width of [`GradingBackbone`].
pub const FEATURE_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub holdout_fraction: f64,
    /// Held-out accuracy below this raises [`GraderReport::below_gate`].
    pub accuracy_gate: f64,
    pub seed: u64,
}

impl Default for GraderConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, lr: 1e-3, beta1: 0.5, holdout_fraction: 0.2, accuracy_gate: 0.80, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraderReport {
    pub accuracy: f64,
    pub below_gate: bool,
    pub train_size: usize,
    pub holdout_size: usize,
    pub final_loss: f64,
}

/// Small convolutional 5-way image classifier: four stride-2
/// conv/BN/ReLU stages, global average pooling, one linear head.
#[derive(Clone, Debug)]
pub struct GradingBackbone {
    pub store: ParamStore,
    convs: Vec<(Conv2d, BatchNorm2d)>,
    head: Linear,
    pub achieved_accuracy: f64,
}

impl GradingBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(&[tag::INIT, seed, 0x6772]);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in WIDTHS.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("conv{i}"), cin, w, 3, 2, 1, false, &mut rng);
            let bn = BatchNorm2d::new(&mut store, &format!("bn{i}"), w);
            convs.push((conv, bn));
            cin = w;
        }
        let head = Linear::new(&mut store, "head", FEATURE_DIM, NUM_GRADES, &mut rng);
        Self { store, convs, head, achieved_accuracy: 0.0 }
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    /// `images: [N, 3, H, W]` in [-1, 1] → `(features [N, F], logits [N, 5])`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, images: Var) -> (Var, Var) {
        let mut h = images;
        for (conv, bn) in &self.convs {
            h = conv.forward(g, b, h);
            h = bn.forward(g, b, h);
            h = g.relu(h);
        }
        let feats = g.global_avg_pool(h);
        let logits = self.head.forward(g, b, feats);
        (feats, logits)
    }

    fn eval_chunks(&self, images: &Tensor) -> (Tensor, Tensor) {
        let n = images.shape()[0];
        let mut feats = Vec::with_capacity(n * FEATURE_DIM);
        let mut logits = Vec::with_capacity(n * NUM_GRADES);
        for start in (0..n).step_by(64) {
            let items: Vec<Tensor> = (start..(start + 64).min(n)).map(|i| images.index_first(i)).collect();
            let refs: Vec<&Tensor> = items.iter().collect();
            let mut g = Graph::new();
            let mut b = Binder::eval(&self.store);
            let x = g.constant(Tensor::stack(&refs));
            let (f, l) = self.forward(&mut g, &mut b, x);
            feats.extend_from_slice(g.value(f).data());
            logits.extend_from_slice(g.value(l).data());
        }
        (Tensor::from_vec(&[n, FEATURE_DIM], feats), Tensor::from_vec(&[n, NUM_GRADES], logits))
    }

    /// Penultimate features `[N, F]` in inference mode.
    pub fn features(&self, images: &Tensor) -> Tensor {
        self.eval_chunks(images).0
    }

    pub fn predict(&self, images: &Tensor) -> Vec<usize> {
        let logits = self.eval_chunks(images).1;
        logits.data().chunks(NUM_GRADES).map(argmax).collect()
    }

    pub fn accuracy(&self, ds: &Dataset, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let pred = self.predict(&ds.image_batch(indices));
        let hits = indices.iter().zip(&pred).filter(|(&i, &p)| ds.samples[i].grade.index() == p).count();
        hits as f64 / indices.len() as f64
    }

    /// One epoch-based fit on `train` with cross-entropy. Returns the last batch loss.
    pub fn fit(&mut self, ds: &Dataset, train: &[usize], cfg: &GraderConfig) -> Result<f64> {
        let mut adam = Adam::new(&self.store, cfg.lr, cfg.beta1, 0.999);
        let mut order = train.to_vec();
        let mut last = f64::NAN;
        let ones = [1.0; NUM_GRADES];
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut stream(&[tag::DATA, cfg.seed, epoch as u64]));
            for batch in order.chunks(cfg.batch_size.max(2)) {
                if batch.len() < 2 {
                    continue;
                }
                let labels: Vec<usize> = batch.iter().map(|&i| ds.samples[i].grade.index()).collect();
                let mut g = Graph::new();
                let mut b = Binder::train(&self.store);
                let mut images = ds.image_batch(batch);
                flip_augment(&mut images, &mut stream(&[tag::DATA, cfg.seed, epoch as u64, step as u64]));
                step += 1;
                let x = g.constant(images);
                let (_, logits) = self.forward(&mut g, &mut b, x);
                let loss = g.focal(logits, &labels, 0.0, &ones);
                last = g.value(loss).item();
                if !last.is_finite() {
                    return Err(crate::Error::Numeric(format!("grader loss not finite at epoch {epoch}")));
                }
                let grads = g.backward(loss);
                let collected = b.collect(&grads);
                let updates = b.take_updates();
                adam.step(&mut self.store, &collected);
                apply_stat_updates(&mut self.store, &updates, BN_MOMENTUM);
            }
        }
        self.recalibrate_norm(ds, train);
        Ok(last)
    }

    /// Replaces batch-norm running statistics by their average over `indices`
    /// at the final weights.
    pub fn recalibrate_norm(&mut self, ds: &Dataset, indices: &[usize]) {
        for (k, chunk) in indices.chunks(64).enumerate() {
            let mut g = Graph::new();
            let mut b = Binder::frozen_train(&self.store);
            let x = g.constant(ds.image_batch(chunk));
            self.forward(&mut g, &mut b, x);
            let updates = b.take_updates();
            apply_stat_updates(&mut self.store, &updates, 1.0 / (k + 1) as f64);
        }
    }
}

/// Random horizontal and vertical flips per sample of `[N, C, H, W]`.
pub fn flip_augment<R: Rng + ?Sized>(images: &mut Tensor, rng: &mut R) {
    let [n, c, h, w] = images.dims4();
    let d = images.data_mut();
    for s in 0..n {
        let (fx, fy) = (rng.random::<bool>(), rng.random::<bool>());
        for ch in 0..c {
            let plane = &mut d[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            if fx {
                plane.chunks_mut(w).for_each(|row| row.reverse());
            }
            if fy {
                for y in 0..h / 2 {
                    for x in 0..w {
                        plane.swap(y * w + x, (h - 1 - y) * w + x);
                    }
                }
            }
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

/// Errors if any grade has no sample.
pub fn require_all_grades(ds: &Dataset) -> Result<()> {
    let counts = ds.counts_per_grade();
    let missing: Vec<String> = (0..NUM_GRADES).filter(|&g| counts[g] == 0).map(|g| format!("{g}")).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(validation_err!("dataset has no samples of grade {}", missing.join(", ")))
    }
}

/// Stratified split: roughly `fraction` of every grade goes to the second list.
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for g in 0..NUM_GRADES {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].grade.index() == g).collect();
        idx.shuffle(&mut stream(&[tag::SPLIT, seed, g as u64]));
        let k = if idx.len() >= 2 { (libm::round(idx.len() as f64 * fraction) as usize).clamp(1, idx.len() - 1) } else { 0 };
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

/// Trains a fresh backbone and measures held-out accuracy.
pub fn pretrain_grader(ds: &Dataset, cfg: &GraderConfig) -> Result<(GradingBackbone, GraderReport)> {
    require_all_grades(ds)?;
    if cfg.epochs == 0 || cfg.lr <= 0.0 {
        return Err(config_err!("grader needs epochs ≥ 1 and lr > 0"));
    }
    let (train, held) = stratified_split(ds, cfg.holdout_fraction, cfg.seed);
    let mut net = GradingBackbone::new(cfg.seed);
    let final_loss = net.fit(ds, &train, cfg)?;
    let accuracy = net.accuracy(ds, &held);
    net.achieved_accuracy = accuracy;
    let report = GraderReport {
        accuracy,
        below_gate: accuracy < cfg.accuracy_gate,
        train_size: train.len(),
        holdout_size: held.len(),
        final_loss,
    };
    if report.below_gate {
        log::warn!("grader held-out accuracy {accuracy:.3} is below the {:.2} gate", cfg.accuracy_gate);
    }
    Ok((net, report))
}

/// Diagonal Gaussian over backbone features for one grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeSpace {
    pub grade: GradeLabel,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub n: usize,
}

impl GradeSpace {
    /// Plug-in mean and population variance of `rows`.
    pub fn fit(grade: GradeLabel, rows: &[&[f64]]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(validation_err!("grade {} has {} samples, need at least 2", grade.level(), rows.len()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(validation_err!("feature rows differ in length"));
        }
        if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(validation_err!("non-finite feature for grade {}", grade.level()));
        }
        let n = rows.len() as f64;
        let mut mu = vec![0.0; dim];
        for r in rows {
            for (m, v) in mu.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let mut sigma2 = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in sigma2.iter_mut().zip(r.iter()).zip(&mu) {
                *s += (v - m) * (v - m);
            }
        }
        sigma2.iter_mut().for_each(|s| *s /= n);
        Ok(Self { grade, mu, sigma2, n: rows.len() })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `z = μ + σ ⊙ n`, `n ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma2)
            .map(|(m, s2)| {
                let n: f64 = StandardNormal.sample(rng);
                m + libm::sqrt(*s2) * n
            })
            .collect()
    }
}

pub fn sample_grade_vector<R: Rng + ?Sized>(space: &GradeSpace, rng: &mut R) -> Vec<f64> {
    space.sample(rng)
}

/// Fits one space per grade from `features: [N, F]` and matching labels.
pub fn fit_spaces_from_features(features: &Tensor, labels: &[usize]) -> Result<Vec<GradeSpace>> {
    let n = features.shape()[0];
    if labels.len() != n {
        return Err(validation_err!("{} labels for {n} feature rows", labels.len()));
    }
    let dim = features.numel() / n.max(1);
    let rows: Vec<&[f64]> = features.data().chunks(dim.max(1)).collect();
    GradeLabel::all()
        .iter()
        .map(|&g| {
            let members: Vec<&[f64]> = labels.iter().zip(&rows).filter(|(l, _)| **l == g.index()).map(|(_, r)| *r).collect();
            GradeSpace::fit(g, &members)
        })
        .collect()
}

pub fn fit_grading_spaces(backbone: &GradingBackbone, ds: &Dataset) -> Result<Vec<GradeSpace>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let feats = backbone.features(&ds.image_batch(&all));
    fit_spaces_from_features(&feats, &ds.labels())
}

/// Per-block `(γ, β)` pairs, each `[N, C_b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSet {
    pub blocks: Vec<(Tensor, Tensor)>,
}

/// Four linear layers with leaky ReLU between them.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub layers: [Linear; 4],
    pub out_dim: usize,
}

impl MappingNetwork {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        let dims = [in_dim, hidden, hidden, hidden, out_dim];
        let layers = core::array::from_fn(|i| Linear::new(store, &format!("{name}.fc{i}"), dims[i], dims[i + 1], rng));
        // small last layer so untrained styles start near identity
        let last = layers[3].weight;
        store.get_mut(last).scale_in_place(0.1);
        Self { layers, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, z: Var) -> Var {
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, b, h);
            if i < 3 {
                h = g.leaky_relu(h, 0.2);
            }
        }
        h
    }
}

fn check_widths(len: usize, widths: &[usize]) -> Result<()> {
    let need: usize = widths.iter().map(|w| 2 * w).sum();
    if need != len {
        return Err(config_err!("mapping output has {len} entries, block widths {widths:?} need {need}"));
    }
    Ok(())
}

/// Splits raw mapping output `[N, Σ 2·C_b]` into per-block `γ = 1 + out[o..o+C_b]`,
/// `β = out[o+C_b..o+2C_b]`.
pub fn split_styles(g: &mut Graph, raw: Var, widths: &[usize]) -> Result<Vec<(Var, Var)>> {
    check_widths(g.value(raw).shape()[1], widths)?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        let gamma = g.narrow(raw, offset, w);
        let gamma = g.add_scalar(gamma, 1.0);
        let beta = g.narrow(raw, offset + w, w);
        out.push((gamma, beta));
        offset += 2 * w;
    }
    Ok(out)
}

/// Tensor-level [`split_styles`].
pub fn styles_from_raw(raw: &Tensor, widths: &[usize]) -> Result<StyleSet> {
    let mut g = Graph::new();
    let r = g.constant(raw.clone());
    let pairs = split_styles(&mut g, r, widths)?;
    Ok(StyleSet { blocks: pairs.into_iter().map(|(a, b)| (g.value(a).clone(), g.value(b).clone())).collect() })
}

/// Runs the mapping network on `z: [N, F]` and splits the result.
pub fn map_to_styles(z: &Tensor, net: &MappingNetwork, store: &ParamStore, widths: &[usize]) -> Result<StyleSet> {
    check_widths(net.out_dim, widths)?;
    let mut g = Graph::new();
    let mut b = Binder::eval(store);
    let zv = g.constant(z.clone());
    let raw = net.forward(&mut g, &mut b, zv);
    styles_from_raw(g.value(raw), widths)
}

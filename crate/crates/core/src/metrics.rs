//! Evaluation metrics: FID over embeddings, Laplacian-pyramid SWD, quadratic
//! weighted kappa, per-class TPR and the real/real+synthetic A/B harness.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Dataset, NUM_GRADES};
use crate::error::{validation_err, Result};
use crate::grading::{argmax, GraderConfig, GradingBackbone};
use crate::nn::{Binder, Conv2d, ParamStore};
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::Tensor;

/// Eigenvalues of the covariance product above this (negative) value are
/// treated as round-off and clipped to zero.
pub const EIGEN_CLIP_TOLERANCE: f64 = -1e-8;
pub const SWD_LEVELS: usize = 3;
pub const SWD_PATCH: usize = 7;
pub const SWD_PATCHES_PER_IMAGE: usize = 128;
pub const SWD_PROJECTIONS: usize = 64;
pub const SWD_REPORT_SCALE: f64 = 1e3;

/// Feature rows `[N, F]` of one image set.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub features: Tensor,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(features: Tensor, source: impl Into<String>) -> Result<Self> {
        let source = source.into();
        if features.ndim() != 2 || features.shape()[0] < 2 {
            return Err(validation_err!("embedding set {source} needs [N ≥ 2, F] features, got {:?}", features.shape()));
        }
        if !features.all_finite() {
            return Err(validation_err!("embedding set {source} has non-finite features"));
        }
        Ok(Self { features, source })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim(), self.features.data())
    }
}

/// Sample mean and unbiased covariance.
pub fn moments(set: &EmbeddingSet) -> (DVector<f64>, DMatrix<f64>) {
    let x = set.matrix();
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two embedding sets. The
/// cross term uses `Tr((√A B √A)^½)`, which equals `Tr((AB)^½)` and keeps
/// every decomposition symmetric.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(validation_err!("embedding dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    if a.len() < a.dim() || b.len() < b.dim() {
        log::warn!("FID with fewer samples than feature dimensions ({} / {} vs {}); covariances are singular", a.len(), b.len(), a.dim());
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < EIGEN_CLIP_TOLERANCE {
            log::warn!("clipping covariance-product eigenvalue {v:e}");
        }
        cross += libm::sqrt(v.max(0.0));
    }
    let d = mu_a - mu_b;
    let value = d.dot(&d) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Maps images `[N, 3, R, R]` in [0, 1] to feature rows.
pub trait Embedding {
    fn embed(&self, images: &Tensor) -> Tensor;

    fn embed_set(&self, images: &Tensor, source: &str) -> Result<EmbeddingSet> {
        EmbeddingSet::new(self.embed(images), source)
    }
}

/// Seeded random conv stack (3→8→16→32, k3, strides 2/2/2, ReLU); the
/// features are the global means of every layer, 56 values per image.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedding {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl RandomConvEmbedding {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(&[tag::EMBED, seed]);
        let mut store = ParamStore::new();
        let convs = [(3, 8), (8, 16), (16, 32)]
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2d::new(&mut store, &format!("e{i}"), cin, cout, 3, 2, 1, true, &mut rng))
            .collect();
        Self { store, convs }
    }

    pub fn feature_dim(&self) -> usize {
        56
    }
}

impl Embedding for RandomConvEmbedding {
    fn embed(&self, images: &Tensor) -> Tensor {
        let n = images.shape()[0];
        let mut rows = vec![Vec::new(); n];
        for start in (0..n).step_by(64) {
            let end = (start + 64).min(n);
            let chunk = Tensor::stack(&(start..end).map(|i| images.index_first(i)).collect::<Vec<_>>().iter().collect::<Vec<_>>());
            let mut g = Graph::new();
            let mut b = Binder::eval(&self.store);
            let mut h = g.constant(chunk.map(|v| 2.0 * v - 1.0));
            for conv in &self.convs {
                h = conv.forward(&mut g, &mut b, h);
                h = g.relu(h);
                let pooled = g.global_avg_pool(h);
                let v = g.value(pooled);
                let c = v.numel() / (end - start);
                for (k, row) in rows[start..end].iter_mut().enumerate() {
                    row.extend_from_slice(&v.data()[k * c..(k + 1) * c]);
                }
            }
        }
        Tensor::from_vec(&[n, self.feature_dim()], rows.concat())
    }
}

/// Unweighted mean of per-grade FIDs; grades with fewer than two images on
/// either side are skipped. Returns the mean and the per-grade values.
pub fn per_grade_fid(real: &Dataset, fake: &Dataset, embedding: &dyn Embedding) -> Result<(f64, [Option<f64>; NUM_GRADES])> {
    let mut per = [None; NUM_GRADES];
    for (grade, slot) in per.iter_mut().enumerate() {
        let pick = |ds: &Dataset| -> Vec<usize> { (0..ds.len()).filter(|&i| ds.samples[i].grade.index() == grade).collect() };
        let (ri, fi) = (pick(real), pick(fake));
        if ri.len() < 2 || fi.len() < 2 {
            continue;
        }
        let a = embedding.embed_set(&images01(real, &ri), "real")?;
        let b = embedding.embed_set(&images01(fake, &fi), "fake")?;
        *slot = Some(fid(&a, &b)?);
    }
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(validation_err!("no grade has at least two images in both sets"));
    }
    Ok((vals.iter().sum::<f64>() / vals.len() as f64, per))
}

/// Images of the selected samples stacked `[N, 3, R, R]` in [0, 1].
pub fn images01(ds: &Dataset, indices: &[usize]) -> Tensor {
    Tensor::stack(&indices.iter().map(|&i| &ds.samples[i].image).collect::<Vec<_>>())
}

// ---------------------------------------------------------------- SWD

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn blur_plane(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5).map(|k| BINOMIAL[k] * src[y * w + clamp(x as isize + k as isize - 2, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5).map(|k| BINOMIAL[k] * tmp[clamp(y as isize + k as isize - 2, h) * w + x]).sum();
        }
    }
    out
}

fn blur(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.dims4();
    let data = t.data().chunks(h * w).flat_map(|p| blur_plane(p, h, w)).collect();
    Tensor::from_vec(&[n, c, h, w], data)
}

fn pyr_down(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.dims4();
    let b = blur(t);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in b.data().chunks(h * w) {
        for y in 0..ho {
            for x in 0..wo {
                out.push(p[2 * y * w + 2 * x]);
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], out)
}

fn pyr_up(t: &Tensor) -> Tensor {
    // zero insertion, blurred and divided by the blurred insertion mask so
    // constants survive at the borders
    let [n, c, h, w] = t.dims4();
    let (ho, wo) = (h * 2, w * 2);
    let mut z = vec![0.0; n * c * ho * wo];
    let mut mask = vec![0.0; ho * wo];
    for (p, src) in t.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for x in 0..w {
                z[p * ho * wo + 2 * y * wo + 2 * x] = src[y * w + x];
                mask[2 * y * wo + 2 * x] = 1.0;
            }
        }
    }
    let weight = blur_plane(&mask, ho, wo);
    let mut out = blur(&Tensor::from_vec(&[n, c, ho, wo], z));
    for plane in out.data_mut().chunks_mut(ho * wo) {
        plane.iter_mut().zip(&weight).for_each(|(v, w)| *v /= w);
    }
    out
}

/// Band-pass levels from fine to coarse; the last level is the low-pass residual.
pub fn laplacian_pyramid(images: &Tensor, levels: usize) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(levels);
    let mut current = images.clone();
    for _ in 1..levels {
        let down = pyr_down(&current);
        let up = pyr_up(&down);
        out.push(current.zip_map(&up, |a, b| a - b));
        current = down;
    }
    out.push(current);
    out
}

/// Random `k×k` patches, `per_image` per image, flattened channel-major:
/// rows of length `3·k·k`.
pub fn extract_patches<R: Rng + ?Sized>(level: &Tensor, per_image: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let [n, c, h, w] = level.dims4();
    let d = level.data();
    let mut out = Vec::with_capacity(n * per_image);
    for i in 0..n {
        for _ in 0..per_image {
            let y0 = rng.random_range(0..=h - k);
            let x0 = rng.random_range(0..=w - k);
            let mut row = Vec::with_capacity(c * k * k);
            for ch in 0..c {
                for y in y0..y0 + k {
                    let base = ((i * c + ch) * h + y) * w;
                    row.extend_from_slice(&d[base + x0..base + x0 + k]);
                }
            }
            out.push(row);
        }
    }
    out
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions,
/// `∫ |F_a − F_b|`, for sorted inputs of any sizes.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = if j >= b.len() || (i < a.len() && a[i] <= b[j]) { a[i] } else { b[j] };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    total
}

fn project_sorted(rows: &[Vec<f64>], dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = rows.iter().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
    p.sort_by(f64::total_cmp);
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwdResult {
    /// Fine to coarse, raw scale.
    pub per_level: Vec<f64>,
    pub average: f64,
}

impl SwdResult {
    /// Values in the customary ×10³ reporting convention.
    pub fn scaled(&self) -> (Vec<f64>, f64) {
        (self.per_level.iter().map(|v| v * SWD_REPORT_SCALE).collect(), self.average * SWD_REPORT_SCALE)
    }
}

/// Sliced Wasserstein distance between patch distributions of two image
/// sets `[N, 3, R, R]`, level by level. Both sets draw patch positions from
/// the same sub-stream, and both are standardized per channel with the
/// statistics of `real` so that shifts in any level stay visible.
pub fn swd<R: RngCore + ?Sized>(real: &Tensor, fake: &Tensor, n_projections: usize, rng: &mut R) -> Result<SwdResult> {
    if real.ndim() != 4 || fake.ndim() != 4 || real.shape()[1..] != fake.shape()[1..] {
        return Err(validation_err!("SWD needs equal-resolution image sets, got {:?} and {:?}", real.shape(), fake.shape()));
    }
    let res = real.shape()[2];
    if res >> (SWD_LEVELS - 1) < SWD_PATCH {
        return Err(validation_err!("resolution {res} too small for {SWD_LEVELS} levels of {SWD_PATCH}px patches"));
    }
    if real.shape()[0] < 16 || fake.shape()[0] < 16 {
        log::warn!("SWD on fewer than 16 images per side");
    }
    let seed = rng.next_u64();
    let pr = laplacian_pyramid(real, SWD_LEVELS);
    let pf = laplacian_pyramid(fake, SWD_LEVELS);
    let channels = real.shape()[1];
    let kk = SWD_PATCH * SWD_PATCH;
    let mut per_level = Vec::with_capacity(SWD_LEVELS);
    for (level, (lr, lf)) in pr.iter().zip(&pf).enumerate() {
        let mut a = extract_patches(lr, SWD_PATCHES_PER_IMAGE, SWD_PATCH, &mut stream(&[tag::PATCHES, seed, level as u64]));
        let mut b = extract_patches(lf, SWD_PATCHES_PER_IMAGE, SWD_PATCH, &mut stream(&[tag::PATCHES, seed, level as u64]));
        for ch in 0..channels {
            let vals = a.iter().flat_map(|r| r[ch * kk..(ch + 1) * kk].iter().copied());
            let count = (a.len() * kk) as f64;
            let mean = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let std = libm::sqrt(var).max(1e-8);
            for row in a.iter_mut().chain(b.iter_mut()) {
                for v in &mut row[ch * kk..(ch + 1) * kk] {
                    *v = (*v - mean) / std;
                }
            }
        }
        let mut dir_rng = stream(&[tag::PATCHES, seed, 1000 + level as u64]);
        let mut total = 0.0;
        for _ in 0..n_projections {
            let mut dir: Vec<f64> = (0..channels * kk).map(|_| dir_rng.sample(StandardNormal)).collect();
            let norm = libm::sqrt(dir.iter().map(|v| v * v).sum::<f64>());
            dir.iter_mut().for_each(|v| *v /= norm);
            total += wasserstein_1d_sorted(&project_sorted(&a, &dir), &project_sorted(&b, &dir));
        }
        per_level.push(total / n_projections as f64);
    }
    let average = per_level.iter().sum::<f64>() / per_level.len() as f64;
    Ok(SwdResult { per_level, average })
}

// ---------------------------------------------------------------- grading metrics

fn check_labels(pred: &[usize], truth: &[usize], k: usize) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(validation_err!("need equal non-empty label vectors, got {} and {}", pred.len(), truth.len()));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&l| l >= k) {
        return Err(validation_err!("label {bad} outside 0..{k}"));
    }
    Ok(())
}

/// `m[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_labels(pred, truth, k)?;
    let mut m = vec![vec![0; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Quadratic weighted kappa. When the expected disagreement is zero (a single
/// class on both sides) the sets agree perfectly and the result is 1.
pub fn quadratic_weighted_kappa(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    let m = confusion_matrix(pred, truth, k)?;
    let n = pred.len() as f64;
    let rows: Vec<f64> = m.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| m.iter().map(|r| r[j]).sum::<usize>() as f64).collect();
    let (mut observed, mut expected) = (0.0, 0.0);
    let denom = ((k - 1) * (k - 1)) as f64;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom;
            observed += w * m[i][j] as f64;
            expected += w * rows[i] * cols[j] / n;
        }
    }
    if expected == 0.0 {
        return Ok(if observed == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - observed / expected)
}

/// Recall per class; `None` for classes absent from `truth`.
pub fn tpr_per_class(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    let m = confusion_matrix(pred, truth, k)?;
    Ok(m.iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len().max(1) as f64
}

/// Mean over defined entries; `None` if none is defined.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: Option<f64>,
    /// ×10³.
    pub swd_per_level: Option<Vec<f64>>,
    /// ×10³.
    pub swd_avg: Option<f64>,
    pub kappa: Option<f64>,
    pub tpr: Option<Vec<Option<f64>>>,
    pub accuracy: Option<f64>,
    pub seed: u64,
    pub counts: Vec<usize>,
}

impl MetricReport {
    pub fn empty(seed: u64) -> Self {
        Self { fid: None, swd_per_level: None, swd_avg: None, kappa: None, tpr: None, accuracy: None, seed, counts: Vec::new() }
    }

    pub fn with_grading(mut self, pred: &[usize], truth: &[usize]) -> Result<Self> {
        self.kappa = Some(quadratic_weighted_kappa(pred, truth, NUM_GRADES)?);
        self.tpr = Some(tpr_per_class(pred, truth, NUM_GRADES)?);
        self.accuracy = Some(accuracy(pred, truth));
        Ok(self)
    }

    pub fn with_swd(mut self, s: &SwdResult) -> Self {
        let (levels, avg) = s.scaled();
        self.swd_per_level = Some(levels);
        self.swd_avg = Some(avg);
        self
    }
}

// ---------------------------------------------------------------- augmentation A/B

/// A grade classifier trained from scratch for each arm and seed.
pub trait GradeClassifier {
    /// Trains on `train` and returns predictions for `test`.
    fn train_and_predict(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<usize>>;
}

/// The small conv grader used for the grading spaces.
#[derive(Clone, Debug, Default)]
pub struct BackboneClassifier {
    pub config: GraderConfig,
}

impl GradeClassifier for BackboneClassifier {
    fn train_and_predict(&self, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<usize>> {
        let mut net = GradingBackbone::new(seed);
        let cfg = GraderConfig { seed, ..self.config.clone() };
        let all: Vec<usize> = (0..train.len()).collect();
        net.fit(train, &all, &cfg)?;
        let mut pred = Vec::with_capacity(test.len());
        let idx: Vec<usize> = (0..test.len()).collect();
        for chunk in idx.chunks(64) {
            pred.extend(net.predict(&test.image_batch(chunk)));
        }
        Ok(pred)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub seed: u64,
    pub accuracy: f64,
    pub kappa: f64,
    /// Augmented minus baseline TPR; `None` where either is undefined.
    pub tpr: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub baseline: Vec<MetricReport>,
    pub augmented: Vec<MetricReport>,
    pub deltas: Vec<ArmDelta>,
}

impl AbReport {
    /// Median over seeds of the mean TPR delta of `classes`.
    pub fn median_tpr_delta(&self, classes: &[usize]) -> Option<f64> {
        let mut v: Vec<f64> = self
            .deltas
            .iter()
            .filter_map(|d| mean_defined(&classes.iter().map(|&c| d.tpr[c]).collect::<Vec<_>>()))
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }
}

/// Trains `classifier` on `real` and on `real ∪ fake` for every seed and
/// evaluates both on `test`.
pub fn augmentation_ab(real: &Dataset, fake: &Dataset, test: &Dataset, classifier: &dyn GradeClassifier, seeds: &[u64]) -> Result<AbReport> {
    let test_ids: alloc::collections::BTreeSet<&str> = test.samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = real.samples.iter().chain(&fake.samples).find(|s| test_ids.contains(s.id.as_str())) {
        return Err(validation_err!("sample id {} appears in both training and test sets", s.id));
    }
    let truth = test.labels();
    let mut merged = real.clone();
    merged.extend(fake.clone());
    let mut report = AbReport { baseline: Vec::new(), augmented: Vec::new(), deltas: Vec::new() };
    for &seed in seeds {
        let arm_seed = derive_seed(&[seed]);
        let base_pred = classifier.train_and_predict(real, test, arm_seed)?;
        let aug_pred = classifier.train_and_predict(&merged, test, arm_seed)?;
        let mut base = MetricReport::empty(seed).with_grading(&base_pred, &truth)?;
        base.counts = real.counts_per_grade().to_vec();
        let mut aug = MetricReport::empty(seed).with_grading(&aug_pred, &truth)?;
        aug.counts = merged.counts_per_grade().to_vec();
        let (bt, at) = (base.tpr.clone().unwrap_or_default(), aug.tpr.clone().unwrap_or_default());
        report.deltas.push(ArmDelta {
            seed,
            accuracy: aug.accuracy.unwrap_or(0.0) - base.accuracy.unwrap_or(0.0),
            kappa: aug.kappa.unwrap_or(0.0) - base.kappa.unwrap_or(0.0),
            tpr: bt.iter().zip(&at).map(|(b, a)| Some((*a)? - (*b)?)).collect(),
        });
        report.baseline.push(base);
        report.augmented.push(aug);
    }
    Ok(report)
}

/// Argmax rows of `[N, K]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(argmax).collect()
}

//! Adversarial, feature-matching, perceptual and focal terms and their
//! weighted combination.
//!
//! Reductions: mean over the batch, mean over the layers of one network, sum
//! over discriminator scales.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::discriminator::DiscOutput;
use crate::error::{validation_err, Result};
use crate::nn::Conv2d;
use crate::nn::{Binder, ParamStore};
use crate::rng::{stream, tag};

pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Feature matching.
    pub lambda1: f64,
    /// Perceptual.
    pub lambda2: f64,
    /// Grade classification.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 10.0, lambda2: 10.0, lambda3: 1.0 }
    }
}

/// Ablation switches. All `false` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_lesion_masks: bool,
    pub no_agm: bool,
    pub no_perceptual: bool,
    pub no_cls: bool,
    pub no_sca: bool,
}

impl Ablations {
    pub fn parse_flag(&mut self, name: &str) -> Result<()> {
        match name {
            "no_lesion_masks" => self.no_lesion_masks = true,
            "no_agm" => self.no_agm = true,
            "no_perceptual" => self.no_perceptual = true,
            "no_cls" => self.no_cls = true,
            "no_sca" => self.no_sca = true,
            other => return Err(crate::Error::Config(format!("unknown ablation flag {other}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub feat_match: f64,
    pub perceptual: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 8] = ["adv_d", "adv_g", "feat_match", "perceptual", "cls_real", "cls_fake", "total_g", "total_d"];

    pub fn values(&self) -> [f64; 8] {
        [self.adv_d, self.adv_g, self.feat_match, self.perceptual, self.cls_real, self.cls_fake, self.total_g, self.total_d]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Effective multipliers of each term after ablation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub feat_match: f64,
    pub perceptual: f64,
    pub cls: f64,
}

pub fn coefficients(w: &LossWeights, ab: &Ablations) -> Coefficients {
    Coefficients {
        feat_match: w.lambda1,
        perceptual: if ab.no_perceptual { 0.0 } else { w.lambda2 },
        cls: if ab.no_cls { 0.0 } else { w.lambda3 },
    }
}

/// `(total_g, total_d)` from component values. The classification terms only
/// enter the discriminator objective.
pub fn total(r: &LossReport, w: &LossWeights, ab: &Ablations) -> (f64, f64) {
    let k = coefficients(w, ab);
    let g = r.adv_g + k.feat_match * r.feat_match + k.perceptual * r.perceptual;
    let d = r.adv_d + k.cls * (r.cls_real + r.cls_fake);
    (g, d)
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(crate::Error::Numeric(format!("non-finite {what}")))
    }
}

/// `Σ_n [mean softplus(−r_n) + mean softplus(f_n)]`, i.e. `−Σ E log σ(r) + E log(1 − σ(f))`.
pub fn adversarial_d(g: &mut Graph, real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(validation_err!("{} real vs {} fake discriminator outputs", real.len(), fake.len()));
    }
    let mut terms = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        check_finite(g, r.rf_logit, "real logit")?;
        check_finite(g, f.rf_logit, "fake logit")?;
        let nr = g.scale(r.rf_logit, -1.0);
        let sr = g.softplus(nr);
        terms.push(g.mean(sr));
        let sf = g.softplus(f.rf_logit);
        terms.push(g.mean(sf));
    }
    Ok(sum_vars(g, &terms))
}

/// Non-saturating generator term `Σ_n mean softplus(−f_n)`.
pub fn adversarial_g(g: &mut Graph, fake: &[DiscOutput]) -> Result<Var> {
    if fake.is_empty() {
        return Err(validation_err!("no discriminator outputs"));
    }
    let mut terms = Vec::with_capacity(fake.len());
    for f in fake {
        check_finite(g, f.rf_logit, "fake logit")?;
        let nf = g.scale(f.rf_logit, -1.0);
        let s = g.softplus(nf);
        terms.push(g.mean(s));
    }
    Ok(sum_vars(g, &terms))
}

pub fn adversarial_terms(g: &mut Graph, real: &[DiscOutput], fake: &[DiscOutput]) -> Result<(Var, Var)> {
    Ok((adversarial_d(g, real, fake)?, adversarial_g(g, fake)?))
}

/// Scalar oracle of the adversarial terms from per-scale logit lists.
pub fn adversarial_scalar(real: &[Vec<f64>], fake: &[Vec<f64>]) -> (f64, f64) {
    let softplus = |x: f64| if x > 0.0 { x + libm::log1p(libm::exp(-x)) } else { libm::log1p(libm::exp(x)) };
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|x| f(*x)).sum::<f64>() / v.len() as f64;
    let d = real.iter().zip(fake).map(|(r, f)| mean(r, &|x| softplus(-x)) + mean(f, &softplus)).sum();
    let gen = fake.iter().map(|f| mean(f, &|x| softplus(-x))).sum();
    (d, gen)
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Per scale: mean over layers of the batch-mean L2 distance between real and
/// fake features; summed over scales. Real features are detached.
pub fn feature_matching(g: &mut Graph, real: &[DiscOutput], fake: &[DiscOutput]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(validation_err!("{} real vs {} fake discriminator outputs", real.len(), fake.len()));
    }
    let mut per_scale = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        if r.features.len() != f.features.len() {
            return Err(validation_err!("feature list lengths differ"));
        }
        let mut layers = Vec::with_capacity(r.features.len());
        for (&rf, &ff) in r.features.iter().zip(&f.features) {
            if g.shape(rf) != g.shape(ff) {
                return Err(validation_err!("feature shapes {:?} vs {:?}", g.shape(rf), g.shape(ff)));
            }
            let rd = g.detach(rf);
            let diff = g.sub(ff, rd);
            let norms = g.row_l2_norm(diff);
            layers.push(g.mean(norms));
        }
        let s = sum_vars(g, &layers);
        per_scale.push(g.scale(s, 1.0 / layers.len() as f64));
    }
    Ok(sum_vars(g, &per_scale))
}

/// Fixed feature extractor for the perceptual term.
pub trait PerceptualNet {
    /// Feature maps of `x: [N, 3, H, W]`.
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var>;
}

/// Passes the image through unchanged as a single layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPerceptual;

impl PerceptualNet for IdentityPerceptual {
    fn features(&self, _g: &mut Graph, x: Var) -> Vec<Var> {
        alloc::vec![x]
    }
}

/// Seeded random conv stack (3→8→16→32, ReLU, strides 1/2/2); never trained.
#[derive(Clone, Debug)]
pub struct RandomConvPerceptual {
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl RandomConvPerceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(&[tag::PERCEPTUAL, seed]);
        let mut store = ParamStore::new();
        let convs = [(3, 8, 1), (8, 16, 2), (16, 32, 2)]
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| Conv2d::new(&mut store, &format!("p{i}"), cin, cout, 3, stride, 1, true, &mut rng))
            .collect();
        Self { store, convs }
    }
}

impl PerceptualNet for RandomConvPerceptual {
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut b = Binder::eval(&self.store);
        let mut h = x;
        self.convs
            .iter()
            .map(|c| {
                h = c.forward(g, &mut b, h);
                h = g.relu(h);
                h
            })
            .collect()
    }
}

/// Mean over layers of mean `|F(real) − F(fake)|`; gradients reach `fake` only.
pub fn perceptual(g: &mut Graph, real: Var, fake: Var, net: &dyn PerceptualNet) -> Var {
    let real = g.detach(real);
    let fr = net.features(g, real);
    let ff = net.features(g, fake);
    let mut layers = Vec::with_capacity(fr.len());
    for (&a, &b) in fr.iter().zip(&ff) {
        let a = g.detach(a);
        let d = g.sub(b, a);
        let d = g.abs(d);
        layers.push(g.mean(d));
    }
    let s = sum_vars(g, &layers);
    g.scale(s, 1.0 / layers.len() as f64)
}

/// `N / (K · n_k)` per class; classes without samples get 1.
pub fn class_balanced_alpha(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    counts.iter().map(|&c| if c == 0 { 1.0 } else { n as f64 / (k * c as f64) }).collect()
}

/// Batch mean of `−α_y (1 − p_y)^γ ln p_y`.
pub fn focal(g: &mut Graph, logits: Var, labels: &[usize], gamma: f64, alpha: &[f64]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != alpha.len() {
        return Err(validation_err!("focal: logits {shape:?}, {} labels, {} alphas", labels.len(), alpha.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(validation_err!("label {bad} outside 0..{}", shape[1]));
    }
    check_finite(g, logits, "classification logits")?;
    Ok(g.focal(logits, labels, gamma, alpha))
}

/// Scalar oracle of [`focal`] on one row.
pub fn focal_scalar(logits: &[f64], label: usize, gamma: f64, alpha: f64) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| libm::exp(v - m)).sum();
    let p = libm::exp(logits[label] - m) / z;
    -alpha * libm::pow(1.0 - p, gamma) * libm::log(p)
}

/// Sum of the per-scale focal terms on grade heads.
pub fn classification(g: &mut Graph, outs: &[DiscOutput], labels: &[usize], alpha: &[f64]) -> Result<Var> {
    let terms = outs.iter().map(|o| focal(g, o.grade_logits, labels, FOCAL_GAMMA, alpha)).collect::<Result<Vec<_>>>()?;
    Ok(sum_vars(g, &terms))
}

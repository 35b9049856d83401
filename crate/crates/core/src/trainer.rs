//! Adversarial training: one discriminator step then one generator step per
//! batch, stage 1 (`G_m`, `G_l` frozen) followed by stage 2 (both).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{generate_toy_sample, Dataset, GradeLabel, Sample, CONDITION_CHANNELS, NUM_GRADES};
use crate::discriminator::{DiscConfig, MultiScaleDiscriminator};
use crate::error::{config_err, validation_err, Result};
use crate::generator::{Generator, GeneratorConfig, Stage, ENHANCER_PREFIX};
use crate::grading::{argmax, GradeSpace, GraderConfig, BN_MOMENTUM};
use crate::losses::{
    adversarial_d, adversarial_g, class_balanced_alpha, classification, coefficients, feature_matching, focal, perceptual, Ablations,
    LossReport, LossWeights, RandomConvPerceptual,
};
use crate::nn::{apply_stat_updates, Adam, Binder, ParamStore};
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscConfig,
    /// Grader used to fit the grading spaces before GAN training.
    pub grader: GraderConfig,
    pub weights: LossWeights,
    pub ablations: Ablations,
    pub lr_gan: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Weight of the cross-entropy that trains the generator's grade predictor.
    pub grade_head_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            discriminator: DiscConfig::default(),
            grader: GraderConfig::default(),
            weights: LossWeights::default(),
            ablations: Ablations::default(),
            lr_gan: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            epochs_stage1: 2,
            epochs_stage2: 2,
            grade_head_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if !(self.lr_gan > 0.0) {
            return Err(config_err!("lr_gan must be > 0"));
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(config_err!("both stages need at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be ≥ 1"));
        }
        if self.generator.full_resolution < self.discriminator.min_resolution() {
            return Err(config_err!(
                "resolution {} below the discriminator minimum {}",
                self.generator.full_resolution,
                self.discriminator.min_resolution()
            ));
        }
        let w = &self.weights;
        if [w.lambda1, w.lambda2, w.lambda3].iter().any(|l| !(*l >= 0.0)) {
            return Err(config_err!("loss weights must be ≥ 0"));
        }
        Ok(())
    }

    /// Generator config with the ablation switches applied.
    pub fn effective_generator(&self) -> GeneratorConfig {
        GeneratorConfig { agm: self.generator.agm && !self.ablations.no_agm, sca: self.generator.sca && !self.ablations.no_sca, ..self.generator.clone() }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStage {
    Pretrain,
    Gm,
    GmGl,
}

impl RunStage {
    pub fn generator_stage(self) -> Stage {
        match self {
            RunStage::GmGl => Stage::Full,
            _ => Stage::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub stage: RunStage,
    /// Last step whose losses were all finite.
    pub last_good_step: Option<u64>,
}

impl Default for RunState {
    fn default() -> Self {
        Self { step: 0, epoch: 0, stage: RunStage::Pretrain, last_good_step: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage: RunStage,
    pub losses: LossReport,
    /// Cross-entropy of the generator's grade predictor; not part of `total_g`.
    pub grade_head: f64,
}

/// Hooks for logging and checkpointing.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _model: &GanModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Keeps every step record in memory.
#[derive(Default, Debug)]
pub struct RecordingObserver {
    pub records: Vec<StepRecord>,
}

impl TrainObserver for RecordingObserver {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Generator, discriminators, optimizers, grade spaces and run state.
#[derive(Clone, Debug)]
pub struct GanModel {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: MultiScaleDiscriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub spaces: Vec<GradeSpace>,
    pub state: RunState,
    pub perceptual: RandomConvPerceptual,
    /// Per-grade counts of the training set, for the focal α.
    pub class_counts: [usize; NUM_GRADES],
}

impl GanModel {
    pub fn new(config: TrainConfig, spaces: Vec<GradeSpace>) -> Result<Self> {
        config.validate()?;
        check_spaces(&spaces, config.generator.style_dim)?;
        let generator = Generator::new(config.effective_generator(), config.seed)?;
        let discriminator = MultiScaleDiscriminator::new(config.discriminator.clone(), config.seed)?;
        let opt_g = Adam::new(&generator.store, config.lr_gan, config.beta1, config.beta2);
        let opt_d = Adam::new(&discriminator.store, config.lr_gan, config.beta1, config.beta2);
        Ok(Self {
            perceptual: RandomConvPerceptual::new(config.seed),
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            spaces,
            state: RunState::default(),
            class_counts: [0; NUM_GRADES],
        })
    }

    pub fn resolution(&self) -> usize {
        self.config.generator.full_resolution
    }

    /// Every tensor needed to resume: parameters and optimizer moments.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore, opt: &Adam| {
            for (id, p) in store.iter() {
                out.push((format!("{prefix}.{}", p.name), p.value.clone()));
                out.push((format!("{prefix}_adam_m.{}", p.name), opt.m[id.index()].clone()));
                out.push((format!("{prefix}_adam_v.{}", p.name), opt.v[id.index()].clone()));
                out.push((format!("{prefix}_adam_t.{}", p.name), Tensor::from_vec(&[1], vec![opt.steps[id.index()] as f64])));
            }
        };
        push("g", &self.generator.store, &self.opt_g);
        push("d", &self.discriminator.store, &self.opt_d);
        out
    }

    /// Inverse of [`named_tensors`](Self::named_tensors).
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let load = |prefix: &str, store: &mut ParamStore, opt: &mut Adam| -> Result<()> {
            let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
            for (id, name) in ids {
                let get = |kind: &str| find(&format!("{prefix}{kind}.{name}")).ok_or_else(|| validation_err!("checkpoint lacks {prefix}{kind}.{name}"));
                let value = get("")?;
                if value.shape() != store.get(id).shape() {
                    return Err(validation_err!("checkpoint tensor {prefix}.{name} has shape {:?}", value.shape()));
                }
                *store.get_mut(id) = value.clone();
                opt.m[id.index()] = get("_adam_m")?.clone();
                opt.v[id.index()] = get("_adam_v")?.clone();
                opt.steps[id.index()] = get("_adam_t")?.data()[0] as u64;
            }
            Ok(())
        };
        load("g", &mut self.generator.store, &mut self.opt_g)?;
        load("d", &mut self.discriminator.store, &mut self.opt_d)
    }

    fn condition_for_model(&self, c: Tensor) -> Tensor {
        if self.config.ablations.no_lesion_masks {
            zero_lesion_channels(c)
        } else {
            c
        }
    }

    /// One grading vector per requested grade, stacked `[N, F]`.
    fn latents(&self, grades: &[usize], rng: &mut impl Rng) -> Tensor {
        let dim = self.config.generator.style_dim;
        let mut data = Vec::with_capacity(grades.len() * dim);
        for &g in grades {
            data.extend(self.spaces[g].sample(rng));
        }
        Tensor::from_vec(&[grades.len(), dim], data)
    }

    /// Grade space index per sample: the label, or uniform when lesion masks are ablated.
    fn space_choice(&self, labels: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        if self.config.ablations.no_lesion_masks {
            labels.iter().map(|_| rng.random_range(0..NUM_GRADES)).collect()
        } else {
            labels.to_vec()
        }
    }

    /// Generator grade prediction for conditions `[N, 8, R, R]`.
    pub fn predict_grades(&self, cond: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let mut b = Binder::eval(&self.generator.store);
        let c = g.constant(self.condition_for_model(cond.clone()));
        let feats = self.generator.encode(&mut g, &mut b, c)?;
        let logits = self.generator.predict_grade(&mut g, &mut b, &feats);
        Ok(g.value(logits).data().chunks(NUM_GRADES).map(argmax).collect())
    }

    /// Images `[N, 3, R, R]` in [-1, 1] for conditions `[N, 8, R, R]`. Without
    /// `grades` the grade predictor picks each latent space (uniformly random
    /// when lesion masks are ablated).
    pub fn synthesize(&self, cond: &Tensor, grades: Option<&[usize]>, seed: u64) -> Result<Tensor> {
        let n = cond.shape()[0];
        let mut rng = stream(&[tag::SYNTH, seed]);
        let chosen = match grades {
            Some(gs) => {
                if gs.len() != n || gs.iter().any(|&g| g >= NUM_GRADES) {
                    return Err(validation_err!("forced grades must be {n} values in 0..5"));
                }
                gs.to_vec()
            }
            None if self.config.ablations.no_lesion_masks => (0..n).map(|_| rng.random_range(0..NUM_GRADES)).collect(),
            None => self.predict_grades(cond)?,
        };
        let z = self.latents(&chosen, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::eval(&self.generator.store);
        let c = g.constant(self.condition_for_model(cond.clone()));
        let zv = g.constant(z);
        let out = self.generator.forward(&mut g, &mut b, c, zv, self.state.stage.generator_stage(), &mut rng)?;
        Ok(g.value(out.full).clone())
    }
}

pub fn zero_lesion_channels(mut c: Tensor) -> Tensor {
    let [n, ch, h, w] = c.dims4();
    let hw = h * w;
    let d = c.data_mut();
    for s in 0..n {
        d[(s * ch + 2) * hw..(s + 1) * ch * hw].fill(0.0);
    }
    c
}

fn check_spaces(spaces: &[GradeSpace], dim: usize) -> Result<()> {
    if spaces.len() != NUM_GRADES {
        return Err(validation_err!("expected {NUM_GRADES} grade spaces, got {}", spaces.len()));
    }
    for (i, s) in spaces.iter().enumerate() {
        if s.grade.index() != i || s.dim() != dim || s.sigma2.len() != dim {
            return Err(validation_err!("grade space {i} has grade {} and dimension {}, expected {dim}", s.grade.level(), s.dim()));
        }
    }
    Ok(())
}

fn stage_for_epoch(cfg: &TrainConfig, epoch: usize) -> RunStage {
    if epoch < cfg.epochs_stage1 {
        RunStage::Gm
    } else {
        RunStage::GmGl
    }
}

fn validate_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if ds.is_empty() {
        return Err(validation_err!("training set is empty"));
    }
    let r = cfg.generator.full_resolution;
    if let Some(s) = ds.samples.iter().find(|s| s.resolution() != r) {
        return Err(validation_err!("sample {} is {}px, config expects {r}px", s.id, s.resolution()));
    }
    Ok(())
}

/// Runs (or resumes) adversarial training until all configured epochs are done.
pub fn train(model: &mut GanModel, ds: &Dataset, observer: &mut dyn TrainObserver) -> Result<()> {
    validate_dataset(ds, &model.config)?;
    model.class_counts = ds.counts_per_grade();
    let cfg = model.config.clone();
    while model.state.epoch < cfg.total_epochs() {
        let epoch = model.state.epoch;
        let stage = stage_for_epoch(&cfg, epoch);
        model.state.stage = stage;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream(&[tag::DATA, cfg.seed, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let record = train_step(model, ds, batch, stage)?;
            observer.on_step(&record)?;
        }
        model.state.epoch += 1;
        observer.on_epoch_end(model)?;
    }
    Ok(())
}

fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

/// One discriminator update followed by one generator update.
pub fn train_step(model: &mut GanModel, ds: &Dataset, batch: &[usize], stage: RunStage) -> Result<StepRecord> {
    let cfg = model.config.clone();
    let step = model.state.step;
    let labels: Vec<usize> = batch.iter().map(|&i| ds.samples[i].grade.index()).collect();
    let mut real = ds.image_batch(batch);
    if stage == RunStage::Gm {
        // half-resolution content at full size, like the stage-1 output
        real = real.avg_pool2().upsample_nearest2();
    }
    let cond = model.condition_for_model(ds.condition_batch(batch));
    let mut latent_rng = stream(&[tag::LATENT, cfg.seed, step]);
    let spaces = model.space_choice(&labels, &mut latent_rng);
    let z = model.latents(&spaces, &mut latent_rng);
    let alpha = class_balanced_alpha(&model.class_counts);
    let coef = coefficients(&cfg.weights, &cfg.ablations);
    let numeric = |what: &str, last: Option<u64>| {
        crate::Error::Numeric(match last {
            Some(s) => format!("{what} not finite at step {step}; last good step {s}"),
            None => format!("{what} not finite at step {step}; no good step yet"),
        })
    };

    // generator forward, kept for the generator update
    let mut gg = Graph::new();
    let mut gb = Binder::train(&model.generator.store);
    if stage != RunStage::GmGl {
        gb = gb.freeze_prefix(ENHANCER_PREFIX);
    }
    let c_g = gg.constant(cond.clone());
    let z_g = gg.constant(z);
    let out = model.generator.forward(&mut gg, &mut gb, c_g, z_g, stage.generator_stage(), &mut stream(&[tag::NOISE, cfg.seed, step]))?;
    let fake_value = gg.value(out.full).clone();
    if !fake_value.all_finite() {
        return Err(numeric("generator output", model.state.last_good_step));
    }

    // discriminator update on the detached fake
    let (adv_d_v, cls_real_v, cls_fake_v, total_d_v) = {
        let mut g = Graph::new();
        let mut b = Binder::train(&model.discriminator.store);
        let c = g.constant(cond.clone());
        let xr = g.constant(real.clone());
        let xf = g.constant(fake_value);
        let dr = model.discriminator.forward(&mut g, &mut b, xr, c)?;
        let df = model.discriminator.forward(&mut g, &mut b, xf, c)?;
        let adv = adversarial_d(&mut g, &dr, &df).map_err(|_| numeric("discriminator logits", model.state.last_good_step))?;
        let cr = classification(&mut g, &dr, &labels, &alpha)?;
        let cf = classification(&mut g, &df, &labels, &alpha)?;
        let cls = g.add(cr, cf);
        let cls = g.scale(cls, coef.cls);
        let total = g.add(adv, cls);
        let vals = (value(&g, adv), value(&g, cr), value(&g, cf), value(&g, total));
        if !vals.3.is_finite() {
            return Err(numeric("discriminator loss", model.state.last_good_step));
        }
        let grads = b.collect(&g.backward(total));
        model.opt_d.step(&mut model.discriminator.store, &grads);
        vals
    };

    // generator update through the frozen, just-updated discriminators
    let (adv_g_v, fm_v, perc_v, grade_v, total_g_v) = {
        let mut db = Binder::eval(&model.discriminator.store);
        let c = gg.constant(cond);
        let xr = gg.constant(real);
        let dr = model.discriminator.forward(&mut gg, &mut db, xr, c)?;
        let df = model.discriminator.forward(&mut gg, &mut db, out.full, c)?;
        let adv = adversarial_g(&mut gg, &df).map_err(|_| numeric("discriminator logits", model.state.last_good_step))?;
        let fm = feature_matching(&mut gg, &dr, &df)?;
        let perc = perceptual(&mut gg, xr, out.full, &model.perceptual);
        let ones = [1.0; NUM_GRADES];
        let grade = focal(&mut gg, out.grade_logits, &labels, 0.0, &ones)?;
        let fm_w = gg.scale(fm, coef.feat_match);
        let perc_w = gg.scale(perc, coef.perceptual);
        let total = gg.add(adv, fm_w);
        let total = gg.add(total, perc_w);
        let grade_w = gg.scale(grade, cfg.grade_head_weight);
        let objective = gg.add(total, grade_w);
        let vals = (value(&gg, adv), value(&gg, fm), value(&gg, perc), value(&gg, grade), value(&gg, total));
        if !value(&gg, objective).is_finite() {
            return Err(numeric("generator loss", model.state.last_good_step));
        }
        let grads = gb.collect(&gg.backward(objective));
        let updates = gb.take_updates();
        model.opt_g.step(&mut model.generator.store, &grads);
        apply_stat_updates(&mut model.generator.store, &updates, BN_MOMENTUM);
        vals
    };

    let losses = LossReport {
        adv_d: adv_d_v,
        adv_g: adv_g_v,
        feat_match: fm_v,
        perceptual: perc_v,
        cls_real: cls_real_v,
        cls_fake: cls_fake_v,
        total_g: total_g_v,
        total_d: total_d_v,
    };
    model.state.step += 1;
    model.state.last_good_step = Some(step);
    Ok(StepRecord { step, epoch: model.state.epoch, stage, losses, grade_head: grade_v })
}

/// Condition for synthesized sample `i` of grade `g`, from the toy policy generator.
pub fn synthesis_condition(seed: u64, grade: usize, index: usize, resolution: usize) -> Result<Tensor> {
    Ok(generate_toy_sample(derive_seed(&[tag::SYNTH, seed, grade as u64, index as u64]), grade as u8, resolution)?.condition.into_tensor())
}

/// Lazily synthesizes `per_grade` samples of each grade, grade-major, in
/// batches; the order and content depend only on the seed.
pub struct SynthesisStream<'a> {
    model: &'a GanModel,
    per_grade: usize,
    seed: u64,
    next: usize,
    batch: usize,
    buffer: Vec<Sample>,
}

impl<'a> SynthesisStream<'a> {
    pub fn new(model: &'a GanModel, per_grade: usize, seed: u64) -> Self {
        Self { model, per_grade, seed, next: 0, batch: 8, buffer: Vec::new() }
    }

    fn fill(&mut self) -> Result<()> {
        let total = self.per_grade * NUM_GRADES;
        let r = self.model.resolution();
        let end = (self.next + self.batch).min(total);
        let jobs: Vec<(usize, usize)> = (self.next..end).map(|k| (k / self.per_grade, k % self.per_grade)).collect();
        let conds = jobs.iter().map(|&(g, i)| synthesis_condition(self.seed, g, i, r)).collect::<Result<Vec<_>>>()?;
        let stacked = Tensor::stack(&conds.iter().collect::<Vec<_>>());
        let grades: Vec<usize> = jobs.iter().map(|j| j.0).collect();
        let images = self.model.synthesize(&stacked, Some(&grades), derive_seed(&[self.seed, self.next as u64]))?;
        for (k, ((g, i), cond)) in jobs.into_iter().zip(conds).enumerate() {
            let img = images.index_first(k).map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
            let cond = crate::data::ConditionMap::from_tensor(cond)?;
            self.buffer.push(Sample::new(cond, img, GradeLabel::new(g as u8)?, format!("syn-g{g}-{i:05}"))?);
        }
        self.buffer.reverse();
        self.next = end;
        Ok(())
    }
}

impl Iterator for SynthesisStream<'_> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.buffer.is_empty() {
            if self.next >= self.per_grade * NUM_GRADES {
                return None;
            }
            if let Err(e) = self.fill() {
                self.next = usize::MAX;
                return Some(Err(e));
            }
        }
        self.buffer.pop().map(Ok)
    }
}

/// Balanced synthesized corpus with forced grades.
pub fn synthesize_corpus(model: &GanModel, per_grade: usize, seed: u64) -> Result<Dataset> {
    Ok(Dataset::new(SynthesisStream::new(model, per_grade, seed).collect::<Result<Vec<_>>>()?))
}

/// Lesion-channel sanity: returns an error if the condition batch is not `[N, 8, R, R]`.
pub fn check_condition_batch(c: &Tensor, resolution: usize) -> Result<()> {
    let s = c.shape();
    if s.len() != 4 || s[1] != CONDITION_CHANNELS || s[2] != resolution || s[3] != resolution {
        return Err(validation_err!("condition batch {s:?} does not match [N, 8, {resolution}, {resolution}]"));
    }
    Ok(())
}

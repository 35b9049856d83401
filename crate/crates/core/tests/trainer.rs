use drgan_core::data::{generate_corpus, NUM_GRADES};
use drgan_core::generator::ENHANCER_PREFIX;
use drgan_core::grading::{fit_spaces_from_features, GradeSpace};
use drgan_core::rng::stream;
use drgan_core::tensor::Tensor;
use drgan_core::trainer::{synthesize_corpus, train, GanModel, RecordingObserver, RunStage, TrainConfig};
use drgan_core::Error;

fn spaces(dim: usize) -> Vec<GradeSpace> {
    let n = 40;
    let feats = Tensor::randn(&[n, dim], 1.0, &mut stream(&[99]));
    let labels: Vec<usize> = (0..n).map(|i| i % NUM_GRADES).collect();
    fit_spaces_from_features(&feats, &labels).unwrap()
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.generator.full_resolution = 64;
    cfg.generator.base_channels = 4;
    cfg.generator.max_channels = 32;
    cfg.generator.n_residual_blocks = 1;
    cfg.generator.style_dim = 16;
    cfg.generator.mapping_hidden = 16;
    cfg.discriminator.base_channels = 4;
    cfg.discriminator.max_channels = 16;
    cfg.epochs_stage1 = 1;
    cfg.epochs_stage2 = 1;
    cfg.batch_size = 2;
    cfg
}

fn corpus() -> drgan_core::data::Dataset {
    generate_corpus(5, [2, 1, 1, 1, 1], 64).unwrap()
}

#[test]
fn stage_one_leaves_enhancer_untouched() {
    let cfg = TrainConfig { epochs_stage2: 1, ..tiny_config() };
    let ds = corpus();
    let mut model = GanModel::new(cfg.clone(), spaces(16)).unwrap();
    let before = model.generator.store.fingerprint(ENHANCER_PREFIX);
    let enc_before = model.generator.store.fingerprint("enc0.");
    struct Probe {
        gl_after_stage1: Option<u64>,
    }
    impl drgan_core::trainer::TrainObserver for Probe {
        fn on_epoch_end(&mut self, m: &GanModel) -> drgan_core::Result<()> {
            if m.state.epoch == 1 {
                self.gl_after_stage1 = Some(m.generator.store.fingerprint(ENHANCER_PREFIX));
            }
            Ok(())
        }
    }
    let mut probe = Probe { gl_after_stage1: None };
    train(&mut model, &ds, &mut probe).unwrap();
    assert_eq!(probe.gl_after_stage1, Some(before));
    assert_ne!(model.generator.store.fingerprint(ENHANCER_PREFIX), before, "stage 2 must update G_l");
    assert_ne!(model.generator.store.fingerprint("enc0."), enc_before);
    assert_eq!(model.state.stage, RunStage::GmGl);
    assert_eq!(model.state.step, 6);
}

#[test]
fn all_losses_finite_and_ablated_terms_vanish() {
    let ds = corpus();
    let mut cfg = tiny_config();
    cfg.ablations.no_perceptual = true;
    cfg.ablations.no_cls = true;
    let mut model = GanModel::new(cfg.clone(), spaces(16)).unwrap();
    let mut obs = RecordingObserver::default();
    train(&mut model, &ds, &mut obs).unwrap();
    assert_eq!(obs.records.len(), 6);
    for r in &obs.records {
        assert!(r.losses.all_finite() && r.grade_head.is_finite());
        let expect_g = r.losses.adv_g + cfg.weights.lambda1 * r.losses.feat_match;
        assert!((r.losses.total_g - expect_g).abs() < 1e-9);
        assert!((r.losses.total_d - r.losses.adv_d).abs() < 1e-9);
    }
    assert_eq!(obs.records[0].stage, RunStage::Gm);
    assert_eq!(obs.records[5].stage, RunStage::GmGl);
}

#[test]
fn training_is_deterministic() {
    let ds = corpus();
    let run = || {
        let mut model = GanModel::new(tiny_config(), spaces(16)).unwrap();
        let mut obs = RecordingObserver::default();
        train(&mut model, &ds, &mut obs).unwrap();
        (obs.records, model.generator.store.fingerprint(""), model.discriminator.store.fingerprint(""))
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_from_tensors_matches_uninterrupted_run() {
    let ds = corpus();
    let mut full = GanModel::new(tiny_config(), spaces(16)).unwrap();
    train(&mut full, &ds, &mut ()).unwrap();

    let half_cfg = TrainConfig { epochs_stage2: 1, ..tiny_config() };
    let mut first = GanModel::new(half_cfg, spaces(16)).unwrap();
    struct Stop;
    impl drgan_core::trainer::TrainObserver for Stop {
        fn on_epoch_end(&mut self, _m: &GanModel) -> drgan_core::Result<()> {
            Err(Error::State("stop".into()))
        }
    }
    assert!(train(&mut first, &ds, &mut Stop).is_err());
    assert_eq!(first.state.epoch, 1);

    let mut resumed = GanModel::new(tiny_config(), spaces(16)).unwrap();
    resumed.load_tensors(&first.named_tensors()).unwrap();
    resumed.state = first.state.clone();
    train(&mut resumed, &ds, &mut ()).unwrap();
    assert_eq!(resumed.generator.store.fingerprint(""), full.generator.store.fingerprint(""));
    assert_eq!(resumed.discriminator.store.fingerprint(""), full.discriminator.store.fingerprint(""));
}

#[test]
fn synthesized_corpus_is_balanced_and_deterministic() {
    let model = GanModel::new(tiny_config(), spaces(16)).unwrap();
    let a = synthesize_corpus(&model, 2, 3).unwrap();
    let b = synthesize_corpus(&model, 2, 3).unwrap();
    assert_eq!(a.counts_per_grade(), [2; NUM_GRADES]);
    assert_eq!(a.samples[0].id, "syn-g0-00000");
    assert_eq!(a.samples[9].id, "syn-g4-00001");
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.image, y.image);
        assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn wrong_resolution_and_bad_spaces_are_rejected() {
    let mut model = GanModel::new(tiny_config(), spaces(16)).unwrap();
    let ds = generate_corpus(1, [1, 1, 1, 1, 1], 128).unwrap();
    assert!(matches!(train(&mut model, &ds, &mut ()), Err(Error::Validation(_))));
    assert!(GanModel::new(tiny_config(), spaces(8)).is_err());
    let mut low = tiny_config();
    low.generator.full_resolution = 32;
    assert!(matches!(GanModel::new(low, spaces(16)), Err(Error::Config(_))));
}

#[test]
fn nan_aborts_with_numeric_error() {
    let ds = corpus();
    let mut model = GanModel::new(tiny_config(), spaces(16)).unwrap();
    let id = model.discriminator.store.find("d0.rf.weight").expect("rf head weight");
    model.discriminator.store.get_mut(id).data_mut()[0] = f64::NAN;
    match train(&mut model, &ds, &mut ()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step 0"), "{msg}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

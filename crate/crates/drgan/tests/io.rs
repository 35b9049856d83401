use std::fs;

use drgan::checkpoint::{decode_tensors, encode_tensors, load_checkpoint, read_spaces, save_checkpoint, write_spaces};
use drgan::config::{apply_override, resolve};
use drgan::dataset_io::{load_dataset, save_dataset};
use drgan::Error;
use drgan_core::data::{generate_corpus, NUM_GRADES};
use drgan_core::grading::fit_spaces_from_features;
use drgan_core::rng::stream;
use drgan_core::tensor::Tensor;
use drgan_core::trainer::{train, GanModel, TrainConfig};

#[test]
fn dataset_round_trip_quantizes_to_8_bit() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_corpus(4, [1, 1, 0, 0, 1], 64).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.grade, b.grade);
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
        assert!(a.condition.tensor().max_abs_diff(b.condition.tensor()) <= 0.5 / 255.0 + 1e-12);
    }
    // a second save of the loaded set is byte-identical
    let again = tempfile::tempdir().unwrap();
    save_dataset(&back, again.path()).unwrap();
    for s in &back.samples {
        for f in ["image.png", "ma.png", "meta.json"] {
            assert_eq!(fs::read(dir.path().join(&s.id).join(f)).unwrap(), fs::read(again.path().join(&s.id).join(f)).unwrap());
        }
    }
}

#[test]
fn ingestion_errors_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_corpus(1, [0, 0, 2, 0, 0], 64).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let victim = &ds.samples[1].id;
    fs::remove_file(dir.path().join(victim).join("optic_disk.png")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Ingestion { id, message }) => {
            assert_eq!(&id, victim);
            assert!(message.contains("optic_disk"));
        }
        other => panic!("{other:?}"),
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(load_dataset(empty.path()).unwrap().is_empty());
}

#[test]
fn mismatched_mask_size_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_corpus(1, [1, 0, 0, 0, 0], 64).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    image::GrayImage::new(32, 32).save(dir.path().join(&ds.samples[0].id).join("he.png")).unwrap();
    let e = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(e, Error::Core(drgan_core::Error::Validation(_))), "{e:?}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn blob_encoding_round_trips_and_rejects_garbage() {
    let t = vec![("a.w".to_string(), Tensor::randn(&[2, 3, 4], 1.0, &mut stream(&[1]))), ("b".to_string(), Tensor::scalar(f64::MIN_POSITIVE))];
    let bytes = encode_tensors(&t);
    assert_eq!(decode_tensors(&bytes).unwrap(), t);
    assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_none());
    assert!(decode_tensors(b"nonsense").is_none());
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.generator.full_resolution = 64;
    cfg.generator.base_channels = 4;
    cfg.generator.max_channels = 16;
    cfg.generator.n_residual_blocks = 1;
    cfg.generator.style_dim = 8;
    cfg.generator.mapping_hidden = 8;
    cfg.discriminator.base_channels = 4;
    cfg.discriminator.max_channels = 8;
    cfg.epochs_stage1 = 1;
    cfg.epochs_stage2 = 1;
    cfg
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let feats = Tensor::randn(&[20, 8], 1.0, &mut stream(&[2]));
    let labels: Vec<usize> = (0..20).map(|i| i % NUM_GRADES).collect();
    let spaces = fit_spaces_from_features(&feats, &labels).unwrap();
    let ds = generate_corpus(3, [2, 1, 1, 1, 1], 64).unwrap();
    let mut model = GanModel::new(tiny_config(), spaces).unwrap();
    train(&mut model, &ds, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.state, model.state);
    assert_eq!(loaded.named_tensors(), model.named_tensors());
    let cond = ds.condition_batch(&[0, 5]);
    let a = model.synthesize(&cond, None, 7).unwrap();
    let b = loaded.synthesize(&cond, None, 7).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let path = dir.path().join("spaces.json");
    write_spaces(&path, &model.spaces).unwrap();
    assert_eq!(read_spaces(&path).unwrap(), model.spaces);
}

#[test]
fn dotted_overrides_apply_and_reject_unknown_keys() {
    let cfg = resolve(None, &["generator.base_channels=8".into(), "lr_gan=0.0002".into(), "ablations.no_sca=true".into()]).unwrap();
    assert_eq!(cfg.generator.base_channels, 8);
    assert_eq!(cfg.lr_gan, 2e-4);
    assert!(cfg.ablations.no_sca);
    assert!(matches!(resolve(None, &["generator.nope=1".into()]), Err(Error::Usage(_))));
    assert!(matches!(resolve(None, &["lr_gan=-1".into()]), Err(Error::Core(drgan_core::Error::Config(_)))));
    let mut v = serde_json::json!({"a": {"b": 1}});
    apply_override(&mut v, "a.b=text").unwrap();
    assert_eq!(v["a"]["b"], "text");
    assert!(apply_override(&mut v, "a.b").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"batch_size": 2, "generator": {"full_resolution": 64}}"#).unwrap();
    let cfg = resolve(Some(&path), &["seed=5".into()]).unwrap();
    assert_eq!((cfg.batch_size, cfg.generator.full_resolution, cfg.seed), (2, 64, 5));
    assert_eq!(cfg.generator.base_channels, TrainConfig::default().generator.base_channels);
}

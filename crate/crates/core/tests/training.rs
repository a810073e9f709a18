use sfcam::bench::chi_square_uniform;
use sfcam::classifier::{cls_grad, cls_loss, logits, read_checkpoint, sgd_step, write_checkpoint};
use sfcam::sfc::{bank_sample, msdw_total, train, DCVector, ExperimentConfig, ImageBank, TrainConfig};
use sfcam::synthworld::{class_counts, export_dataset, generate, import_dataset, make_basis, LongTailSpec};
use sfcam::{ClassifierState, Dataset, GradientBundle};

fn small_world(seed: u64) -> Dataset {
    let mut spec = LongTailSpec::with_counts(vec![12, 6, 3], seed);
    spec.image_h = 12;
    spec.image_w = 12;
    generate(&spec, &make_basis(3, 6, seed).unwrap()).unwrap()
}

fn short_sfc(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        warmup_epochs: 2,
        batch_size: 4,
        n_ibr: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn checkpoint_bytes(state: &ClassifierState) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, state).unwrap();
    buf
}

#[test]
fn training_is_bitwise_reproducible() {
    let ds = small_world(4);
    let cfg = short_sfc(9);
    let (a, log_a) = train(&ds, &cfg).unwrap();
    let (b, log_b) = train(&ds, &cfg).unwrap();
    assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));
    assert_eq!(log_a.to_csv(), log_b.to_csv());
    assert_eq!(log_a.epochs.len(), 4);
    // the consistency terms switch on after the warm-up
    assert!(log_a.epochs[..2].iter().all(|r| r.dw_p == 0.0 && r.dw_w == 0.0));
    assert!(log_a.epochs[2..].iter().all(|r| r.dw_p > 0.0 && r.dw_w > 0.0));

    let (c, _) = train(&ds, &short_sfc(10)).unwrap();
    assert_ne!(checkpoint_bytes(&a), checkpoint_bytes(&c));
}

#[test]
fn checkpoint_round_trip() {
    let ds = small_world(1);
    let (state, _) = train(&ds, &short_sfc(1)).unwrap();
    let bytes = checkpoint_bytes(&state);
    let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, state);
}

#[test]
fn cls_only_training_is_plain_gradient_descent() {
    let ds = small_world(2);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: ds.len(),
        ..TrainConfig::cls_only()
    };
    let (trained, log) = train(&ds, &cfg).unwrap();

    // one full batch per epoch, so shuffling only changes summation order
    let c = ds.class_count();
    let mut manual = ClassifierState::new(c, ds.basis.depth, cfg.proto_threshold);
    for _ in 0..cfg.epochs {
        let grads: Vec<GradientBundle> = ds
            .scenes
            .iter()
            .map(|s| cls_grad(&manual, s, &s.labels(c)).unwrap())
            .collect();
        let mean = GradientBundle::mean(&manual, &grads);
        sgd_step(&mut manual, &mean, cfg.lr);
    }
    for (a, b) in trained.weights().iter().zip(manual.weights()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(trained.projection(), manual.projection());
    assert!(log.epochs.iter().all(|r| r.dw_p == 0.0 && r.dw_w == 0.0 && r.total == r.cls));
}

#[test]
fn disabled_consistency_leaves_the_classification_objective() {
    let ds = small_world(3);
    let cfg = TrainConfig::cls_only();
    let mut state = ClassifierState::new(3, ds.basis.depth, 0.3);
    state.weights_mut().iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.37).sin());
    let scene = &ds.scenes[0];
    let y = scene.labels(3);
    let (parts, grads) = msdw_total(&state, scene, &DCVector::plain(3), &cfg).unwrap();
    let z = logits(&state, scene).unwrap();
    assert_eq!(parts.cls, cls_loss(&z, &y));
    assert_eq!(parts.total(), parts.cls);
    assert_eq!(grads, cls_grad(&state, scene, &y).unwrap());
}

#[test]
fn training_rejects_bad_input() {
    let ds = small_world(5);
    let bad = TrainConfig {
        scale_factor: 1.5,
        ..TrainConfig::default()
    };
    assert!(train(&ds, &bad).is_err());
    let empty = Dataset {
        scenes: Vec::new(),
        label_matrix: Vec::new(),
        ..ds.clone()
    };
    assert!(train(&empty, &TrainConfig::default()).is_err());
    let zero = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (state, log) = train(&ds, &zero).unwrap();
    assert!(state.weights().iter().all(|&w| w == 0.0));
    assert!(log.epochs.is_empty());
}

#[test]
fn dataset_export_import_round_trip() {
    let ds = small_world(6);
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let back = import_dataset(dir.path()).unwrap();
    assert_eq!(back.label_matrix, ds.label_matrix);
    assert_eq!(back.basis, ds.basis);
    assert_eq!(class_counts(&back), class_counts(&ds));
    for (a, b) in back.scenes.iter().zip(&ds.scenes) {
        assert_eq!(a.features, b.features);
        assert_eq!(a.gt_mask, b.gt_mask);
        assert_eq!(a.present_classes, b.present_classes);
        assert_eq!(a.composition, b.composition);
    }
}

#[test]
fn experiment_config_from_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let cfg = ExperimentConfig::default_long_tail();
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);

    let mut shallow = cfg.clone();
    shallow.depth = 7;
    std::fs::write(&path, serde_json::to_string(&shallow).unwrap()).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}

#[test]
fn bank_draws_are_uniform_over_slots() {
    let mut bank = ImageBank::new(21, 77);
    for c in 1..=21 {
        bank.fill(c, 100 + c);
    }
    let mut counts = vec![0u64; 21];
    for s in bank_sample(&mut bank, 100_000) {
        counts[s - 101] += 1;
    }
    let (_, p) = chi_square_uniform(&counts);
    assert!(p > 0.01, "p = {p}");
}

use decaps_core::capsnet::ConvBlock;
use decaps_core::config::RunConfig;
use decaps_core::data::{dataset_digest, generate, load_manifest, save_manifest, DatasetSpec};
use decaps_core::experiment::{evaluate_run, load_checkpoint, load_dataset, new_trainer, resume_trainer, train, Split};
use decaps_core::metrics::{evaluate, EvalReport};
use decaps_core::training::{Checkpoint, PeekabooConfig};
use decaps_core::{CapsNet, ModelConfig};

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.image_size = 16;
    c.model.backbone = vec![ConvBlock::new(4, 2), ConvBlock::new(8, 2)];
    c.model.num_heads = 2;
    c.model.pose_dim = 8;
    c.model.class_dim = 4;
    c.data.spec.num_samples = 24;
    c.data.spec.size = (5, 7);
    c.data.test_samples = 16;
    c.optim.epochs = 2;
    c.optim.batch_size = 4;
    c
}

fn unit_interval(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

fn assert_report_ranges(r: &EvalReport) {
    let mut values: Vec<f64> = r.auc_per_class.iter().flatten().copied().collect();
    values.extend(r.auc_mean);
    values.extend([r.miou_level1_mean, r.miou_level1_std, r.accuracy_exact_match, r.accuracy_per_class_mean]);
    values.extend(r.miou_level2_mean);
    values.extend(r.ap_level1());
    values.extend(r.ap_level2().into_iter().flatten());
    values.extend(&r.accuracy_per_class);
    assert!(values.iter().all(|&v| unit_interval(v)), "{values:?}");
}

#[test]
fn untrained_model_is_at_chance() {
    let data = generate(&DatasetSpec {
        num_samples: 120,
        seed: 11,
        ..DatasetSpec::default()
    })
    .unwrap();
    let mut aucs = Vec::new();
    for seed in 1..=5 {
        let net = CapsNet::new(ModelConfig::default(), seed).unwrap();
        let (r, _) = evaluate(&net, &data, &PeekabooConfig::default(), "", seed).unwrap();
        assert_report_ranges(&r);
        aucs.push(r.auc_mean.unwrap());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((0.35..=0.65).contains(&mean), "{aucs:?}");
}

#[test]
fn checkpoint_reload_reproduces_the_report() {
    let cfg = tiny();
    let data = load_dataset(&cfg, Split::Train).unwrap();
    let test = load_dataset(&cfg, Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = new_trainer(&cfg).unwrap();
    train(&cfg, &mut t, &data, Some(dir.path()), |_| {}).unwrap();
    let (before, _) = evaluate_run(&cfg, &t, &test).unwrap();
    assert_report_ranges(&before);

    let (saved, ckpt) = load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(saved, cfg);
    let bytes = ckpt.to_bytes();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    let restored = resume_trainer(&saved, ckpt).unwrap();
    let (after, _) = evaluate_run(&saved, &restored, &test).unwrap();
    assert_eq!(before.to_json(), after.to_json());
    assert_eq!(EvalReport::from_json(&after.to_json()).unwrap().to_json(), after.to_json());
}

#[test]
fn manifest_datasets_evaluate_like_generated_ones() {
    let cfg = tiny();
    let test = load_dataset(&cfg, Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test").join("manifest.jsonl");
    save_manifest(&path, &test).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(dataset_digest(&loaded), dataset_digest(&test));

    let mut from_disk = cfg.clone();
    from_disk.data.test_manifest = path;
    let t = new_trainer(&cfg).unwrap();
    let (a, _) = evaluate_run(&cfg, &t, &test).unwrap();
    let (b, _) = evaluate_run(&cfg, &t, &load_dataset(&from_disk, Split::Test).unwrap()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn distillation_off_reports_no_level_two() {
    let mut cfg = tiny();
    cfg.peekaboo.distill = false;
    let test = load_dataset(&cfg, Split::Test).unwrap();
    let t = new_trainer(&cfg).unwrap();
    let (r, preds) = evaluate_run(&cfg, &t, &test).unwrap();
    assert!(r.miou_level2_mean.is_none() && r.ap_level2().is_none());
    assert!(preds.iter().all(|p| p.output.distilled == p.output.coarse));
}

#[test]
fn wrong_sized_manifest_is_a_data_error() {
    let cfg = tiny();
    let other = generate(&DatasetSpec {
        num_samples: 3,
        height: 32,
        width: 32,
        ..DatasetSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    save_manifest(&path, &other).unwrap();
    let mut c = cfg.clone();
    c.data.manifest = path;
    let err = load_dataset(&c, Split::Train).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

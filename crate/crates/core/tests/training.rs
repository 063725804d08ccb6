use elgs_core::backbone::{predict_block, BlockInput, ModelParams, NetworkConfig, Variant};
use elgs_core::cloud::{generate_synthetic_scene, SceneSpec};
use elgs_core::gradcheck::tiny_network;
use elgs_core::tensor::Precision;
use elgs_core::train::{
    evaluate_dataset, init_params, prepare_dataset, run_ablation, train, train_from, DataConfig, TrainConfig,
};
use elgs_core::Error;

fn setup() -> (Vec<BlockInput>, NetworkConfig, TrainConfig) {
    let net = NetworkConfig {
        num_classes: 2,
        ..tiny_network()
    };
    let data = DataConfig {
        block_points: 32,
        ..DataConfig::default()
    };
    let cloud = generate_synthetic_scene(&SceneSpec::two_planes(64, 0.0), 0).unwrap();
    let dataset = prepare_dataset(&cloud, &data, &net, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    (dataset, net, cfg)
}

fn bytes(p: &ModelParams) -> Vec<u8> {
    p.to_bytes().unwrap()
}

#[test]
fn frozen_run_keeps_initial_parameters() {
    let (dataset, net, cfg) = setup();
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        ..cfg
    };
    let out = train(&dataset, &net, &cfg).unwrap();
    assert_eq!(bytes(&out.params), bytes(&init_params(&net, cfg.seed).unwrap()));
}

#[test]
fn same_seed_same_run() {
    let (dataset, net, cfg) = setup();
    let a = train(&dataset, &net, &cfg).unwrap();
    let b = train(&dataset, &net, &cfg).unwrap();
    assert_eq!(a.final_loss().to_bits(), b.final_loss().to_bits());
    assert_eq!(bytes(&a.params), bytes(&b.params));
    assert_eq!(a.order_hash, b.order_hash);

    let c = train(&dataset, &net, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(bytes(&a.params), bytes(&c.params));
}

#[test]
fn threads_do_not_change_the_result() {
    let (dataset, net, cfg) = setup();
    let one = train(&dataset, &net, &cfg).unwrap();
    let two = train(&dataset, &net, &TrainConfig { threads: 2, ..cfg }).unwrap();
    assert_eq!(bytes(&one.params), bytes(&two.params));
}

#[test]
fn epochs_are_reported_in_order() {
    let (dataset, net, cfg) = setup();
    let mut seen = Vec::new();
    let out = train_from(&dataset, &net, &cfg, init_params(&net, 0).unwrap(), &mut |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.oa)));
}

#[test]
fn single_variant_suite_is_plain_training() {
    let (dataset, net, cfg) = setup();
    let rows = run_ablation(&dataset, &net, &cfg, &[Variant::Full]).unwrap();
    let out = train(&dataset, &net, &cfg).unwrap();
    let report = evaluate_dataset(&out.params, &net, &dataset, cfg.precision).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].report, report);
    assert_eq!(rows[0].final_loss.to_bits(), out.final_loss().to_bits());
}

#[test]
fn variants_share_the_data_order() {
    let (dataset, net, cfg) = setup();
    let cfg = TrainConfig { epochs: 2, ..cfg };
    let rows = run_ablation(&dataset, &net, &cfg, &Variant::ALL).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.order_hash == rows[0].order_hash));
    assert!(run_ablation(&dataset, &net, &cfg, &[]).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (dataset, net, cfg) = setup();
    let out = train(&dataset, &net, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    out.params.save(&p1).unwrap();
    let loaded = ModelParams::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    for input in &dataset {
        assert_eq!(
            predict_block(&out.params, &net, input, Precision::F64).unwrap(),
            predict_block(&loaded, &net, input, Precision::F64).unwrap()
        );
    }
}

#[test]
fn non_finite_parameters_are_reported() {
    let (dataset, net, cfg) = setup();
    let mut params = init_params(&net, 0).unwrap();
    params.get_mut("head.classifier.b").unwrap().data_mut()[0] = f64::NAN;
    match train_from(&dataset, &net, &cfg, params, &mut |_| {}) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let (dataset, net, cfg) = setup();
    let other = NetworkConfig {
        num_classes: 3,
        ..net.clone()
    };
    let params = init_params(&other, 0).unwrap();
    assert!(train_from(&dataset, &net, &cfg, params, &mut |_| {}).is_err());
}

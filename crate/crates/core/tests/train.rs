use repose_core::datagen::{generate_dataset, DatagenConfig, ObjectClass};
use repose_core::error::CoreError;
use repose_core::evalmetrics::l1_distance;
use repose_core::generator::{DISC_PREFIX, GEN_PREFIX};
use repose_core::train::{
    compute_correspondences, log_from_csv, log_to_csv, prepare, split_prepared, Checkpoint, Phase, Pipeline, TrainConfig, TrainSample, Trainer,
    LATEST, LOG_FILE,
};
use repose_core::warp::WARP_PREFIX;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 11,
        resolution: 32,
        k: 5,
        warp_epochs: 1,
        gen_epochs: 1,
        e2e_epochs: 1,
        warp_batch: 3,
        gen_batch: 3,
        lr: 1e-3,
        warp_width: 4,
        gen_width: 4,
        disc_width: 4,
        ..TrainConfig::default()
    }
}

fn tiny_samples(cfg: &TrainConfig, pairs: usize) -> Vec<repose_core::datagen::PairedSample> {
    generate_dataset(&DatagenConfig {
        classes: vec![ObjectClass::Vase, ObjectClass::Briefcase],
        pairs,
        height: cfg.resolution,
        width: cfg.resolution,
        seed: 5,
        models_per_class: Some(4),
    })
    .unwrap()
}

fn tiny_data(cfg: &TrainConfig, pairs: usize) -> Vec<TrainSample> {
    let samples = tiny_samples(cfg, pairs);
    let corrs = compute_correspondences(&samples, cfg).unwrap();
    prepare(&samples, &corrs, cfg).unwrap()
}

fn mean_warp_l1(t: &Trainer) -> f64 {
    let warped = t.warped_images().unwrap();
    let n = warped.len() as f64;
    warped.iter().zip(t.data()).map(|(w, s)| l1_distance(w, &s.gt).unwrap()).sum::<f64>() / n
}

#[test]
fn checkpoint_bytes_round_trip_exactly() {
    let cfg = tiny_config();
    let mut t = Trainer::new(cfg, tiny_data(&tiny_config(), 6)).unwrap();
    t.train_warp().unwrap();
    let ck = t.checkpoint(Phase::Warp);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params, ck.params);
    assert_eq!(back.meta, ck.meta);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);

    let mut cut = bytes.clone();
    cut.truncate(bytes.len() / 2);
    assert!(Checkpoint::from_bytes(&cut).is_err());
    assert!(Checkpoint::from_bytes(b"garbage").is_err());
}

#[test]
fn zero_epochs_leave_the_initial_parameters() {
    let cfg = TrainConfig {
        warp_epochs: 0,
        gen_epochs: 0,
        e2e_epochs: 0,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg.clone(), tiny_data(&cfg, 4)).unwrap();
    t.run().unwrap();
    assert_eq!(t.step(), 0);
    assert_eq!(t.completed(), [0, 0, 0]);
    assert!(t.log.is_empty());
    assert_eq!(t.checkpoint(Phase::E2e).params, Pipeline::new(&cfg).params);
}

#[test]
fn generator_phase_freezes_the_warp_and_e2e_unfreezes_it() {
    let cfg = TrainConfig {
        warp_epochs: 1,
        gen_epochs: 2,
        e2e_epochs: 1,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg.clone(), tiny_data(&cfg, 6)).unwrap();
    t.train_warp().unwrap();
    let warp_before = t.pipeline.params.fingerprint(WARP_PREFIX);
    let gen_before = t.pipeline.params.fingerprint(GEN_PREFIX);
    let disc_before = t.pipeline.params.fingerprint(DISC_PREFIX);
    t.train_gen().unwrap();
    assert_eq!(t.pipeline.params.fingerprint(WARP_PREFIX), warp_before);
    assert_ne!(t.pipeline.params.fingerprint(GEN_PREFIX), gen_before);
    assert_ne!(t.pipeline.params.fingerprint(DISC_PREFIX), disc_before);

    let snapshot = t.pipeline.params.subset(WARP_PREFIX);
    t.finetune_e2e().unwrap();
    assert_ne!(t.pipeline.params.fingerprint(WARP_PREFIX), warp_before);
    // Adam leaves a tensor untouched only when its gradient is zero
    for (name, old) in snapshot.iter() {
        assert_ne!(t.pipeline.params.get(name).unwrap(), old, "{name} received no gradient");
    }
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_run() {
    let cfg = TrainConfig {
        warp_epochs: 2,
        gen_epochs: 2,
        e2e_epochs: 1,
        ..tiny_config()
    };
    let data = tiny_data(&cfg, 6);
    let dir = tempfile::tempdir().unwrap();

    let mut full = Trainer::new(cfg.clone(), data.clone()).unwrap().with_run_dir(dir.path());
    full.run().unwrap();
    assert!(dir.path().join(LOG_FILE).is_file());
    assert!(dir.path().join(LATEST).is_file());

    for mid in ["warp-001.ckpt", "warp-002.ckpt", "gen-001.ckpt"] {
        let ck = Checkpoint::load(&dir.path().join(mid)).unwrap();
        let mut resumed = Trainer::resume(&ck, data.clone()).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.pipeline.params, full.pipeline.params, "resumed from {mid}");
        assert_eq!(resumed.step(), full.step());
        // the resumed log is the tail of the uninterrupted one
        let tail = &full.log[full.log.len() - resumed.log.len()..];
        assert_eq!(resumed.log.as_slice(), tail, "resumed from {mid}");
    }
}

#[test]
fn non_finite_parameters_stop_training_with_the_last_good_checkpoint() {
    let cfg = TrainConfig {
        warp_epochs: 1,
        ..tiny_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone(), tiny_data(&cfg, 4)).unwrap().with_run_dir(dir.path());
    t.train_warp().unwrap();

    let name = t
        .pipeline
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .find(|n| n.starts_with(WARP_PREFIX))
        .unwrap();
    t.pipeline.params.get_mut(&name).unwrap().data_mut().fill(f32::NAN);
    t.cfg.warp_epochs = 2;
    match t.train_warp() {
        Err(CoreError::NonFinite { phase, last_good, .. }) => {
            assert_eq!(phase, "warp");
            assert!(last_good.ends_with("warp-001.ckpt"), "{last_good}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }

    let mut fresh = Trainer::new(cfg.clone(), tiny_data(&cfg, 4)).unwrap();
    fresh.pipeline.params.get_mut(&name).unwrap().data_mut().fill(f32::INFINITY);
    let err = fresh.train_warp().unwrap_err();
    assert!(err.to_string().contains("initial"), "{err}");
}

#[test]
fn a_warp_epoch_reduces_the_reconstruction_error() {
    let cfg = TrainConfig {
        warp_epochs: 3,
        warp_batch: 2,
        lr: 3e-3,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg.clone(), tiny_data(&cfg, 8)).unwrap();
    let before = mean_warp_l1(&t);
    t.train_warp().unwrap();
    let after = mean_warp_l1(&t);
    assert!(after < before, "L1 {before} -> {after}");
}

#[test]
fn a_hundred_generator_steps_stay_finite() {
    let cfg = TrainConfig {
        warp_epochs: 0,
        gen_epochs: 25,
        e2e_epochs: 0,
        gen_batch: 1,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg.clone(), tiny_data(&cfg, 4)).unwrap();
    t.run().unwrap();
    assert_eq!(t.step(), 100);
    assert!(t.log.iter().all(|r| r.value.is_finite()));
    assert!(t.pipeline.params.iter().all(|(_, p)| p.all_finite()));
    for s in t.data() {
        assert!(t.pipeline.infer(s).unwrap().generated.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn config_files_round_trip() {
    let cfg = TrainConfig {
        k: 15,
        lr: 2.5e-4,
        ablate_pose_input: true,
        ..tiny_config()
    };
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(TrainConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, "resolution = 30").unwrap();
    let err = TrainConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("c.toml"), "{err}");
}

#[test]
fn split_keeps_model_pairs_apart_and_augments_only_training() {
    let cfg = TrainConfig {
        test_fraction: 0.25,
        ..tiny_config()
    };
    let samples = tiny_samples(&cfg, 16);
    let corrs = compute_correspondences(&samples, &cfg).unwrap();
    let plain = split_prepared(
        &samples,
        &corrs,
        &TrainConfig {
            role_augment: false,
            ..cfg.clone()
        },
    )
    .unwrap();
    let aug = split_prepared(&samples, &corrs, &cfg).unwrap();
    assert_eq!(plain.train.len() + plain.test.len(), 16);
    assert!(!plain.test.is_empty());
    assert_eq!(aug.train.len(), 4 * plain.train.len());
    assert_eq!(aug.test.len(), plain.test.len());
    let pair = |s: &TrainSample| {
        (
            s.meta.class,
            s.meta.model_ids[0].min(s.meta.model_ids[1]),
            s.meta.model_ids[0].max(s.meta.model_ids[1]),
        )
    };
    for t in &aug.test {
        assert!(aug.train.iter().all(|s| pair(s) != pair(t)));
    }
    // every variant keeps appearance and ground truth on one model
    for s in &aug.train {
        assert_eq!(s.gt.shape(), s.appearance.shape());
        assert_ne!(s.meta.model_ids[0], s.meta.model_ids[1]);
    }
}

#[test]
fn csv_log_round_trips() {
    let rows = vec![
        repose_core::train::LogRow {
            step: 1,
            name: "wrp_l1".into(),
            value: 0.1 + 0.2,
        },
        repose_core::train::LogRow {
            step: 2,
            name: "disc".into(),
            value: 1e-300,
        },
    ];
    assert_eq!(log_from_csv(&log_to_csv(&rows)).unwrap(), rows);
    assert!(log_from_csv("").is_err());
    assert!(log_from_csv("step,loss_name,value\n1,x\n").is_err());
    assert!(log_from_csv("step,loss_name,value\nz,x,1\n").is_err());
}

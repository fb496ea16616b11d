use std::fs;

use jointcorr::loss::{joint_loss, AblationRow};
use jointcorr::trainer::{
    ablate, generate_pair, train, Model, TrainConfig, KERNEL_FILE, METRICS_FILE, PROJECTOR_FILE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        h: 6,
        w: 6,
        dim: 6,
        channels: 4,
        eval_every: 0,
        eval_pairs: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let cfg = TrainConfig {
        lr_feature: 0.0,
        lr_agg: 0.0,
        weight_decay: 0.0,
        ..small(1)
    };
    let out = train(&cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Model::init(&cfg, &mut rng).unwrap();
    init.zero_grad();
    assert_eq!(out.model, init);

    let pair = generate_pair(&mut rng, cfg.grid().unwrap(), cfg.channels, &cfg.synthetic).unwrap();
    let fwd = init.forward(&pair.source, &pair.target).unwrap();
    let expect = joint_loss(
        &fwd.c_raw,
        &fwd.c_agg,
        cfg.consistency_params().unwrap(),
        cfg.loss_params().unwrap(),
    )
    .unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0], expect.report);
    assert_eq!(out.metrics_csv().lines().count(), 2);
}

#[test]
fn identical_configs_give_identical_files() {
    let cfg = small(40);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train(&cfg).unwrap().write_to_dir(d.path()).unwrap();
    }
    for name in [METRICS_FILE, PROJECTOR_FILE, KERNEL_FILE] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        let b = fs::read(dirs[1].path().join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn seed_changes_the_run() {
    let a = train(&small(5)).unwrap();
    let b = train(&TrainConfig {
        seed: 8,
        ..small(5)
    })
    .unwrap();
    assert_ne!(a.metrics_csv(), b.metrics_csv());
}

#[test]
fn checkpoints_reload_to_the_same_model() {
    let out = train(&small(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.model.save(dir.path()).unwrap();
    assert_eq!(Model::load(dir.path()).unwrap(), out.model);
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(
        &path,
        "# small run\nsteps = 12\nloss_config=b\n\nh=5 # trailing comment\n",
    )
    .unwrap();
    let mut cfg = TrainConfig::from_file(&path).unwrap();
    assert_eq!((cfg.steps, cfg.h, cfg.loss_config), (12, 5, AblationRow::B));
    cfg.apply_override("steps=3").unwrap();
    cfg.apply_override("steps=4").unwrap();
    assert_eq!(cfg.steps, 4);
    assert!(cfg.apply_override("no_such_key=1").is_err());

    let round = TrainConfig::parse_str(&cfg.to_config_string()).unwrap();
    assert_eq!(round, cfg);
}

#[test]
fn log_tracks_mask_counts() {
    let out = train(&small(30)).unwrap();
    let cells = 36;
    for r in &out.log {
        assert!(r.n_c <= cells && r.n_a <= cells);
        assert!(r.total.is_finite() && r.total >= 0.0);
    }
    assert_eq!(out.heldout.len(), 2);
    assert_eq!(out.heldout[1].step, 30);
}

#[test]
fn ablation_runs_every_row_from_one_start() {
    let rows = ablate(&small(8)).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.row).collect::<Vec<_>>(),
        AblationRow::ALL.to_vec()
    );
    for r in &rows[1..] {
        assert_eq!(r.initial, rows[0].initial);
    }
}

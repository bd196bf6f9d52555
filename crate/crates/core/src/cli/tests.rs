use super::*;
use crate::train::EpochMetrics;

fn small_run(dir: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::from_preset("A", seed).unwrap();
    cfg.out = dir.to_path_buf();
    cfg.data.num_sequences = 96;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 32;
    cfg.train.validation_sequences = 32;
    cfg.train.beta = 0.01;
    let model = cfg.model.as_mut().unwrap();
    model.encoder_channels = 8;
    model.encoder_hidden = 8;
    model.decoder_hidden = 8;
    model.prior_hidden = 8;
    model.flow_hidden = 4;
    cfg.resolve().unwrap();
    cfg
}

fn metrics(dir: &Path) -> Vec<EpochMetrics> {
    std::fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn without_time(mut m: Vec<EpochMetrics>) -> Vec<EpochMetrics> {
    m.iter_mut().for_each(|e| e.wall_time_s = 0.0);
    m
}

#[test]
fn seeds_flow_from_the_root_seed() {
    let a = RunConfig::from_preset("A", 5).unwrap();
    let b = RunConfig::from_preset("A", 5).unwrap();
    let c = RunConfig::from_preset("A", 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.process.seed, c.process.seed);
    assert_ne!(a.sample_seed, c.sample_seed);
    assert_ne!(a.train.seed, c.train.seed);
    assert_ne!(a.eval_seed, c.eval_seed);
    assert_eq!(a.train.seed, substream(5, "train"));
}

#[test]
fn unknown_preset_lists_presets() {
    let e = RunConfig::from_preset("Z", 0).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let msg = e.to_string();
    for p in ["A", "B", "C", "D", "E", "F", "G"] {
        assert!(msg.contains(p), "{msg}");
    }
}

#[test]
fn config_file_round_trip_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_preset("B", 3).unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);

    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    v["train"]["learning_rat"] = serde_json::json!(0.1);
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap_err().exit_code(), 2);

    let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
    v["extra"] = serde_json::json!(1);
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap_err().exit_code(), 2);
}

#[test]
fn inconsistent_sections_are_rejected() {
    let mut cfg = RunConfig::from_preset("A", 0).unwrap();
    cfg.model.as_mut().unwrap().dims_per_layer = vec![2, 4];
    assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
}

#[test]
fn generate_is_bit_reproducible() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (p1, s1) = cmd_generate(&small_run(d1.path(), 9)).unwrap();
    let (p2, s2) = cmd_generate(&small_run(d2.path(), 9)).unwrap();
    assert_eq!(s1.fingerprint, s2.fingerprint);
    assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    assert!(d1.path().join(CONFIG_FILE).exists());
    let echoed = RunConfig::load(&d1.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed.data.num_sequences, 96);
}

#[test]
fn train_requires_a_matching_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 1);
    let Err(e) = cmd_train(&cfg, None, false) else { panic!("trained without a dataset") };
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains(DATASET_FILE), "{e}");

    cmd_generate(&cfg).unwrap();
    let other = small_run(dir.path(), 2);
    let Err(e) = cmd_train(&other, None, false) else { panic!("trained on a foreign dataset") };
    assert!(matches!(e, Error::Integrity(_)), "{e}");
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let cfg = small_run(d.path(), 4);
        cmd_generate(&cfg).unwrap();
        let state = cmd_train(&cfg, None, false).unwrap();
        assert_eq!(state.metrics.len(), 2);
    }
    let m1 = metrics(d1.path());
    assert_eq!(m1.len(), 2);
    assert_eq!(without_time(m1), without_time(metrics(d2.path())));
    assert_eq!(
        std::fs::read(d1.path().join(LAST_CHECKPOINT)).unwrap().len(),
        std::fs::read(d2.path().join(LAST_CHECKPOINT)).unwrap().len()
    );

    // a second fresh run replaces the log instead of appending to it
    let cfg = small_run(d1.path(), 4);
    cmd_train(&cfg, None, false).unwrap();
    assert_eq!(metrics(d1.path()).len(), 2);

    let data = d1.path().join(DATASET_FILE);
    let ckpt = d1.path().join(BEST_CHECKPOINT);
    let eval = EvalConfig { sequences: 32, generated_sequences: 16, ..EvalConfig::default() };
    let report = cmd_evaluate(&ckpt, &data, &eval, 0, d1.path()).unwrap();
    assert_eq!(report.mcc_per_layer.len(), 2);
    assert!(report.correlational_score.is_some());
    assert!(d1.path().join(REPORT_FILE).exists());

    let args = InterpolateArgs { layer: 1, component: 0, grid: vec![-1.0, -0.5, 0.0, 0.5, 1.0], sequence: 3, step: None };
    let r = cmd_interpolate(&ckpt, &data, &args, d1.path()).unwrap();
    assert_eq!(r.series.len(), 5);
    let csv = std::fs::read_to_string(d1.path().join(INTERPOLATION_FILE)).unwrap();
    let grid_values: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(grid_values.len(), 5);

    let bad = InterpolateArgs { component: 3, ..args };
    assert_eq!(cmd_interpolate(&ckpt, &data, &bad, d1.path()).unwrap_err().exit_code(), 2);
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path(), 8);
    cfg.train.checkpoint_every = 1;
    cmd_generate(&cfg).unwrap();
    cmd_train(&cfg, None, false).unwrap();
    let before = metrics(dir.path());
    let mut longer = cfg.clone();
    longer.train.epochs = 3;
    // a different train config cannot resume
    assert!(cmd_train(&longer, None, true).is_err());
    let state = cmd_train(&cfg, None, true).unwrap();
    assert_eq!(state.epoch, 2);
    assert_eq!(metrics(dir.path()), before);
}

#[test]
fn spectral_preset_flips_at_two() {
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_spectral(&SpectralSource::Preset("two-layer-min-window".into()), 3, 0, dir.path()).unwrap();
    assert_eq!(transition_point(&rows), Some(2));
    let csv = std::fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
    let flags: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(flags, ["false", "true", "true"]);

    let chain = dir.path().join("chain.json");
    let again = cmd_spectral(&SpectralSource::Instance(chain), 2, 0, dir.path()).unwrap();
    assert_eq!(again.len(), 2);
    assert!(again[1].rank_ok);

    let e = cmd_spectral(&SpectralSource::Preset("nope".into()), 2, 0, dir.path()).unwrap_err();
    assert!(e.to_string().contains("two-layer-min-window"));
}

#[test]
fn flags_parse() {
    let cli = Cli::try_parse_from(["child", "train", "--preset", "A", "--variant", "no-context", "--seed", "3"]).unwrap();
    let Command::Train { run, .. } = cli.command else { panic!("wrong command") };
    let cfg = run.resolve().unwrap();
    assert_eq!(cfg.train.variant, Variant::NoContext);
    assert_eq!(cfg.seed, 3);

    let cli = Cli::try_parse_from(["child", "train", "--preset", "A", "--variant", "no-kl"]).unwrap();
    let Command::Train { run, .. } = cli.command else { panic!("wrong command") };
    assert_eq!(run.resolve().unwrap().train.variant, Variant::NoKl);

    let cli = Cli::try_parse_from([
        "child", "interpolate", "--checkpoint", "c", "--dataset", "d", "--layer", "1", "--component", "0", "--grid", "-1,0,2.5",
    ])
    .unwrap();
    let Command::Interpolate { grid, .. } = cli.command else { panic!("wrong command") };
    assert_eq!(grid, vec![-1.0, 0.0, 2.5]);

    assert!(Cli::try_parse_from(["child", "train", "--variant", "bogus"]).is_err());
    let cli = Cli::try_parse_from(["child", "generate"]).unwrap();
    let Command::Generate(args) = cli.command else { panic!("wrong command") };
    assert_eq!(args.resolve().unwrap_err().exit_code(), 2);
}

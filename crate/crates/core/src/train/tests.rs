use super::*;
use crate::process::{build_process, preset};

fn small_model(spec: &crate::process::ProcessSpec) -> ModelConfig {
    ModelConfig {
        encoder_channels: 8,
        encoder_hidden: 8,
        decoder_hidden: 8,
        prior_hidden: 8,
        prior_depth: 2,
        flow_hidden: 4,
        ..ModelConfig::for_process(spec)
    }
}

fn small_series(name: &str, n: usize) -> GroundTruthSeries {
    let spec = preset(name).unwrap();
    build_process(&spec).unwrap().sample_series(n, 6, 3).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 4,
        validation_sequences: 20,
        seed: 5,
        ..Default::default()
    }
}

fn without_time(m: &[EpochMetrics]) -> Vec<EpochMetrics> {
    m.iter().map(|e| EpochMetrics { wall_time_s: 0.0, ..e.clone() }).collect()
}

#[test]
fn config_validation_rejects_bad_values() {
    assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    let json = r#"{"learning_rate": 0.01, "variant": "NO_KL"}"#;
    let c: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c.variant, Variant::NoKl);
    assert_eq!(c.batch_size, 64);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let series = small_series("A", 4);
    let model = ChildModel::new(small_model(&series.spec), 1, DType::F64).unwrap();
    let checks = gradient_check(&model, series.observations.view(), 2, 10, 3).unwrap();
    assert_eq!(checks.len(), 10);
    for c in checks {
        assert!(c.relative_error < 1e-3, "{c:?}");
    }
}

#[test]
fn kl_estimate_is_nonnegative_on_average() {
    let series = small_series("A", 1);
    let model = ChildModel::new(small_model(&series.spec), 4, DType::F64).unwrap();
    let draws = 10_000;
    let x = series.observations.broadcast((draws, 6, series.obs_dim())).unwrap().to_owned();
    let (_, kl) = per_sequence_terms(&model, x.view(), 9).unwrap();
    let mean = kl.iter().sum::<f64>() / draws as f64;
    let var = kl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    assert!(mean >= -3.0 * se, "KL estimate {mean} with standard error {se}");
}

#[test]
fn training_is_deterministic() {
    let series = small_series("B", 120);
    let mc = small_model(&series.spec);
    let a = train(&series, &mc, &quick_config(), None).unwrap();
    let b = train(&series, &mc, &quick_config(), None).unwrap();
    assert_eq!(without_time(&a.metrics), without_time(&b.metrics));
    assert_eq!(a.model.export_parameters().unwrap(), b.model.export_parameters().unwrap());
    assert!(a.metrics.iter().all(|m| m.val_mcc.is_some() && m.recon.is_finite()));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let series = small_series("A", 120);
    let mc = small_model(&series.spec);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&series, &mc, &quick_config(), None).unwrap();
    let mut first = Trainer::new(&series, &mc, &quick_config()).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let path = dir.path().join("interrupted.safetensors");
    save_checkpoint(&first.state, &path).unwrap();
    let state = load_checkpoint(&path, Some(first.state.model.config())).unwrap();
    assert_eq!(state.epoch, 2);
    let mut trainer = Trainer::resume(&series, state).unwrap();
    trainer.run(Some(dir.path())).unwrap();
    assert_eq!(without_time(&trainer.state.metrics), without_time(&full.metrics));
    assert_eq!(trainer.state.model.export_parameters().unwrap(), full.model.export_parameters().unwrap());
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let logged: Vec<EpochMetrics> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(without_time(&logged), without_time(&full.metrics[2..]));
}

#[test]
fn checkpoint_round_trip_preserves_elbo() {
    let series = small_series("A", 60);
    let mc = small_model(&series.spec);
    let state = train(&series, &mc, &TrainConfig { epochs: 1, ..quick_config() }, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path, None).unwrap();
    let x = state.normalizer.apply(series.observations.view());
    let a = elbo_terms(&state.model, x.view(), 11).unwrap();
    let b = elbo_terms(&loaded.model, x.view(), 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(loaded.step, state.step);
    assert_eq!(loaded.best.as_ref().map(|b| b.epoch), state.best.as_ref().map(|b| b.epoch));
    let other = ModelConfig { encoder_channels: 9, ..mc };
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Shape(_))));
}

#[test]
fn no_kl_variant_leaves_prior_untouched_but_reports_kl() {
    let series = small_series("A", 60);
    let mc = small_model(&series.spec);
    let cfg = TrainConfig { epochs: 1, variant: Variant::NoKl, ..quick_config() };
    let before = ChildModel::new(cfg.adapt_model(&mc), rng::substream(cfg.seed, "init"), DType::F32).unwrap();
    let state = train(&series, &mc, &cfg, None).unwrap();
    let after = state.model.export_parameters().unwrap();
    for ((name, _, a), (_, _, b)) in before.export_parameters().unwrap().iter().zip(&after) {
        // Only the path from observations through the bottom layer to the
        // reconstruction receives gradient.
        let frozen = name.starts_with("prior") || name.starts_with("encoder.layer1");
        assert_eq!(a == b, frozen, "{name}");
    }
    assert!(state.metrics[0].kl.is_finite() && state.metrics[0].kl != 0.0);
}

#[test]
fn no_context_variant_uses_pointwise_encoder() {
    let series = small_series("A", 60);
    let cfg = TrainConfig { epochs: 1, variant: Variant::NoContext, ..quick_config() };
    let state = train(&series, &small_model(&series.spec), &cfg, None).unwrap();
    assert!(!state.model.config().contextual);
}

#[test]
fn divergence_halts_and_keeps_last_good_parameters() {
    let series = small_series("A", 60);
    let mc = small_model(&series.spec);
    let cfg = TrainConfig { divergence_threshold: 1e-12, ..quick_config() };
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(&series, &mc, &cfg).unwrap();
    let init = trainer.state.model.export_parameters().unwrap();
    let err = trainer.run(Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert_eq!(err.exit_code(), 4);
    assert_eq!(trainer.state.model.export_parameters().unwrap(), init);
    let saved = load_checkpoint(&dir.path().join("checkpoint_last_good.safetensors"), None).unwrap();
    assert_eq!(saved.model.export_parameters().unwrap(), init);
}

#[test]
fn split_rejects_too_few_sequences() {
    let series = small_series("A", 10);
    let r = Trainer::new(&series, &small_model(&series.spec), &quick_config());
    assert!(matches!(r, Err(Error::Shape(_))));
}

//! Training loop, checkpoints and configuration handling.

use adajudge_core::data::{generate_synthetic, Regime};
use adajudge_core::eval::pairwise_accuracy;
use adajudge_core::training::{latest_checkpoint, load_checkpoint, save_checkpoint, train, TrainConfig};
use adajudge_core::{AdaJudge, Dataset, Error, ModelConfig, StepMetrics, SyntheticSpec, Variant};

fn terminal_set(n: usize, signal: f64) -> Dataset {
    let mut spec = SyntheticSpec::new(Regime::Terminal, 16, n, 5);
    spec.signal_strength = signal;
    let (store, pairs) = generate_synthetic(&spec).unwrap();
    Dataset::new(store, pairs).unwrap()
}

fn small_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        model: ModelConfig::tiny(16, 2),
        ..Default::default()
    }
}

#[test]
fn separable_set_is_fit_within_200_steps() {
    let data = terminal_set(20, 1.0);
    let out = train(&data, &small_cfg(200), None).unwrap();
    assert_eq!(pairwise_accuracy(&out.model, &data).unwrap().overall.accuracy, 1.0);
    let first = out.log[..10].iter().map(|m| m.loss).sum::<f64>();
    let last = out.log[190..].iter().map(|m| m.loss).sum::<f64>();
    assert!(last < first);
}

#[test]
fn checkpoints_follow_the_cadence_and_the_final_step() {
    let data = terminal_set(10, 2.0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 25,
        ..small_cfg(60)
    };
    let out = train(&data, &cfg, Some(dir.path())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("ckpt-"))
        .collect();
    names.sort();
    assert_eq!(names, ["ckpt-000025.adjc", "ckpt-000050.adjc", "ckpt-000060.adjc"]);
    assert!(latest_checkpoint(dir.path()).unwrap().ends_with("ckpt-000060.adjc"));

    let log: Vec<StepMetrics> = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log, out.log);
    assert_eq!(log.iter().map(|m| m.step).collect::<Vec<_>>(), (1..=60).collect::<Vec<_>>());
    assert!(log.iter().all(|m| m.alpha_mean.len() == 2 && (m.pi_mean.iter().sum::<f64>() - 1.0).abs() < 1e-9));
}

#[test]
fn zero_step_run_still_writes_a_checkpoint() {
    let data = terminal_set(4, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&data, &small_cfg(0), Some(dir.path())).unwrap();
    assert!(out.log.is_empty());
    assert!(dir.path().join("ckpt-000000.adjc").exists());
}

#[test]
fn static_variants_log_no_depth_weights() {
    let data = terminal_set(4, 1.0);
    let cfg = TrainConfig {
        variant: Variant::NoRefine,
        ..small_cfg(3)
    };
    let out = train(&data, &cfg, None).unwrap();
    assert!(out.log.iter().all(|m| m.alpha_mean.is_empty()));
}

#[test]
fn non_finite_inputs_abort_with_a_numeric_error() {
    let mut data = terminal_set(4, 1.0);
    let id = data.pairs[0].chosen;
    let mut seq = data.store.get(id).unwrap().clone();
    seq.embeddings_mut()[0] = f64::NAN;
    let mut store = adajudge_core::EmbeddingStore::new(16);
    for other in data.store.ids().collect::<Vec<_>>() {
        let s = if other == id { seq.clone() } else { data.store.get(other).unwrap().clone() };
        store.insert(other, s).unwrap();
    }
    data = Dataset::new(store, data.pairs).unwrap();
    let cfg = TrainConfig {
        batch_pairs: 4,
        ..small_cfg(5)
    };
    let err = train(&data, &cfg, None).err().expect("training must fail");
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.is_numeric());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = AdaJudge::new(ModelConfig::tiny(16, 2), Variant::Full, 0).unwrap();
    let state = adajudge_core::training::OptimizerState::new(model.store());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.adjc");
    save_checkpoint(&model, &state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path, &model).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(load_checkpoint(&path, &model).is_err());

    let other = AdaJudge::new(ModelConfig::tiny(16, 3), Variant::Full, 0).unwrap();
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path, &other).is_err());
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = small_cfg(42);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1}"#).is_err());
    let partial: TrainConfig = serde_json::from_str(r#"{"total_steps": 7}"#).unwrap();
    assert_eq!(partial.total_steps, 7);
    assert_eq!(partial.lr, TrainConfig::default().lr);
}

#[test]
fn invalid_configs_fail_validation() {
    for cfg in [
        TrainConfig { warmup_ratio: 0.0, ..Default::default() },
        TrainConfig { batch_pairs: 0, ..Default::default() },
        TrainConfig { max_grad_norm: 0.0, ..Default::default() },
        TrainConfig { beta2: 1.0, ..Default::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
}

//! Analytic pair-loss gradients against central finite differences.

use adajudge_core::gradcheck::{check_pair_loss, random_pair_problem};
use adajudge_core::objective::{EntropyTarget, LossConfig};
use adajudge_core::{AdaJudge, GradCheckConfig, ModelConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_passes(model: &AdaJudge, seed: u64, magnitude: i64, loss: &LossConfig) {
    let (_, c, r) = random_pair_problem(model.config().d, 9, model.config().k_blocks, seed).unwrap();
    let report = check_pair_loss(model, &c, &r, magnitude, loss, &GradCheckConfig::default()).unwrap();
    let failing: Vec<_> = report.failing().map(|p| (&p.name, p.max_rel_error)).collect();
    assert!(report.passed(), "{:?}: {failing:?}", model.variant());
}

fn randomized(config: ModelConfig, variant: Variant, seed: u64) -> AdaJudge {
    let mut m = AdaJudge::new(config, variant, seed).unwrap();
    m.store_mut().randomize(&mut ChaCha8Rng::seed_from_u64(seed + 100), 0.5);
    m
}

#[test]
fn every_variant_has_correct_gradients() {
    for variant in Variant::ALL {
        let m = randomized(ModelConfig::tiny(8, 2), variant, 1);
        assert_passes(&m, 1, 1, &LossConfig::default());
    }
}

#[test]
fn causal_blocks_have_correct_gradients() {
    let config = ModelConfig {
        causal: true,
        ..ModelConfig::tiny(8, 3)
    };
    assert_passes(&randomized(config, Variant::Full, 2), 2, 3, &LossConfig::default());
}

#[test]
fn loss_options_have_correct_gradients() {
    let m = randomized(ModelConfig::tiny(8, 2), Variant::Full, 3);
    let configs = [
        LossConfig::plain_bt(),
        LossConfig {
            entropy_target: EntropyTarget::ChosenOnly,
            entropy_coef: 0.5,
            target_entropy: 1.09,
            ..LossConfig::default()
        },
        LossConfig {
            gamma: 2.0,
            temperature: 0.5,
            ..LossConfig::default()
        },
    ];
    for cfg in &configs {
        assert_passes(&m, 3, 4, cfg);
    }
}

#[test]
fn gradients_hold_at_initialization() {
    let m = AdaJudge::new(ModelConfig::tiny(8, 2), Variant::Full, 5).unwrap();
    assert_passes(&m, 5, 1, &LossConfig::default());
}

#[test]
fn a_corrupted_gradient_is_reported_by_name() {
    let (m, c, r) = random_pair_problem(8, 12, 2, 0).unwrap();
    let cfg = GradCheckConfig {
        corrupt_param: Some("head.mean.w1".into()),
        ..Default::default()
    };
    let report = check_pair_loss(&m, &c, &r, 1, &LossConfig::default(), &cfg).unwrap();
    assert!(!report.passed());
    let failing: Vec<&str> = report.failing().map(|p| p.name.as_str()).collect();
    assert_eq!(failing, ["head.mean.w1"]);
}

#[test]
fn verdict_is_stable_across_step_sizes() {
    let (m, c, r) = random_pair_problem(8, 12, 2, 7).unwrap();
    for step in [1e-3, 1e-4, 1e-5] {
        let cfg = GradCheckConfig {
            step,
            ..Default::default()
        };
        let report = check_pair_loss(&m, &c, &r, 1, &LossConfig::default(), &cfg).unwrap();
        assert!(report.passed(), "step {step}: {}", report.max_rel_error);
    }
}

//! Focal Bradley–Terry pairwise loss with magnitude weighting and a
//! routing-entropy floor.
//!
//! ```text
//! p = σ((r⁺ − r⁻) / τ_bt)
//! L = −w_m (1 − p)^γ ln p + λ · max(0, η − H(π))²
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RewardOutput, RewardTrace};
use crate::tape::{log_sigmoid, sigmoid, Tape, Var};

/// Floor applied to `1 − p` inside the focal factor.
pub const FOCAL_FLOOR: f64 = 1e-12;

/// Whose routing distribution enters the entropy penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyTarget {
    /// Mean of the chosen and rejected penalties.
    #[default]
    Both,
    ChosenOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Bradley–Terry temperature `τ_bt`.
    pub temperature: f64,
    /// Focusing exponent `γ`.
    pub gamma: f64,
    /// Entropy coefficient `λ`.
    pub entropy_coef: f64,
    /// Target entropy `η`.
    pub target_entropy: f64,
    pub entropy_target: EntropyTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 1.3,
            gamma: 0.9,
            entropy_coef: 0.01,
            target_entropy: 0.7,
            entropy_target: EntropyTarget::Both,
        }
    }
}

impl LossConfig {
    /// Plain Bradley–Terry negative log-likelihood.
    pub fn plain_bt() -> Self {
        LossConfig {
            temperature: 1.0,
            gamma: 0.0,
            entropy_coef: 0.0,
            target_entropy: 0.0,
            entropy_target: EntropyTarget::Both,
        }
    }

    /// Errors on invalid values; returns warnings for valid but degenerate ones.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.entropy_coef >= 0.0) || !(self.target_entropy >= 0.0) {
            return Err(Error::Config("entropy coefficient and target must be >= 0".into()));
        }
        let mut warnings = Vec::new();
        if self.target_entropy > 3f64.ln() && self.entropy_coef > 0.0 {
            warnings.push(format!(
                "target entropy {} exceeds ln 3; the entropy penalty can never vanish",
                self.target_entropy
            ));
        }
        Ok(warnings)
    }
}

/// `σ((r⁺ − r⁻)/τ)`.
pub fn bt_probability(r_plus: f64, r_minus: f64, temperature: f64) -> f64 {
    sigmoid((r_plus - r_minus) / temperature)
}

/// `√max(m, 1)`; a magnitude of zero means "not annotated".
pub fn magnitude_weight(magnitude: i64) -> Result<f64> {
    if magnitude < 0 {
        return Err(Error::data(format!("negative preference magnitude {magnitude}")));
    }
    Ok((magnitude.max(1) as f64).sqrt())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn routing_entropy(pi: &[f64]) -> f64 {
    -pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// `λ · max(0, η − H)²`.
pub fn entropy_penalty(entropy: f64, target: f64, coef: f64) -> f64 {
    let gap = (target - entropy).max(0.0);
    coef * gap * gap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLossBreakdown {
    pub p: f64,
    /// `−w_m (1 − p)^γ ln p`.
    pub focal_term: f64,
    pub entropy_chosen: f64,
    pub entropy_rejected: f64,
    pub penalty: f64,
    pub w_m: f64,
    pub total: f64,
}

/// Loss for one pair evaluated from plain outputs (no gradients).
///
/// `routed` is false for variants whose `π` is fixed; the penalty is then zero.
pub fn pair_loss(
    chosen: &RewardOutput,
    rejected: &RewardOutput,
    magnitude: i64,
    cfg: &LossConfig,
    routed: bool,
) -> Result<PairLossBreakdown> {
    let w_m = magnitude_weight(magnitude)?;
    let x = (chosen.reward - rejected.reward) / cfg.temperature;
    let p = sigmoid(x);
    let log_q = log_sigmoid(-x).max(FOCAL_FLOOR.ln());
    let focal_term = -w_m * (cfg.gamma * log_q).exp() * log_sigmoid(x);
    let entropy_chosen = routing_entropy(&chosen.pi);
    let entropy_rejected = routing_entropy(&rejected.pi);
    let penalty = if routed {
        let pc = entropy_penalty(entropy_chosen, cfg.target_entropy, cfg.entropy_coef);
        match cfg.entropy_target {
            EntropyTarget::Both => {
                0.5 * (pc + entropy_penalty(entropy_rejected, cfg.target_entropy, cfg.entropy_coef))
            }
            EntropyTarget::ChosenOnly => pc,
        }
    } else {
        0.0
    };
    Ok(PairLossBreakdown {
        p,
        focal_term,
        entropy_chosen,
        entropy_rejected,
        penalty,
        w_m,
        total: focal_term + penalty,
    })
}

/// Records `−Σ π ln π` for a `1 × 3` routing row.
fn entropy_var(tape: &mut Tape, pi: Var) -> Result<Var> {
    let xl = tape.xlogx(pi)?;
    let s = tape.sum(xl);
    Ok(tape.scale(s, -1.0))
}

fn penalty_var(tape: &mut Tape, entropy: Var, cfg: &LossConfig) -> Result<Var> {
    let neg = tape.scale(entropy, -1.0);
    let gap = tape.add_scalar(neg, cfg.target_entropy);
    let gap = tape.relu(gap);
    let sq = tape.mul(gap, gap)?;
    Ok(tape.scale(sq, cfg.entropy_coef))
}

/// Records the pair loss on `tape`, differentiable through both reward traces.
pub fn pair_loss_var(
    tape: &mut Tape,
    chosen: &RewardTrace,
    rejected: &RewardTrace,
    magnitude: i64,
    cfg: &LossConfig,
    routed: bool,
) -> Result<(Var, PairLossBreakdown)> {
    let w_m = magnitude_weight(magnitude)?;
    let diff = tape.sub(chosen.reward, rejected.reward)?;
    let x = tape.scale(diff, 1.0 / cfg.temperature);
    let log_p = tape.log_sigmoid(x);
    let neg_x = tape.scale(x, -1.0);
    let log_q = tape.log_sigmoid(neg_x);
    let log_q = tape.clamp_min(log_q, FOCAL_FLOOR.ln());
    let focal_w = tape.scale(log_q, cfg.gamma);
    let focal_w = tape.exp(focal_w);
    let focal = tape.mul(focal_w, log_p)?;
    let focal = tape.scale(focal, -w_m);

    let h_c = entropy_var(tape, chosen.pi)?;
    let h_r = entropy_var(tape, rejected.pi)?;
    let (total, penalty) = if routed {
        let pc = penalty_var(tape, h_c, cfg)?;
        let pen = match cfg.entropy_target {
            EntropyTarget::Both => {
                let pr = penalty_var(tape, h_r, cfg)?;
                let s = tape.add(pc, pr)?;
                tape.scale(s, 0.5)
            }
            EntropyTarget::ChosenOnly => pc,
        };
        (tape.add(focal, pen)?, tape.item(pen))
    } else {
        (focal, 0.0)
    };

    let breakdown = PairLossBreakdown {
        p: sigmoid(tape.item(x)),
        focal_term: tape.item(focal),
        entropy_chosen: tape.item(h_c),
        entropy_rejected: tape.item(h_r),
        penalty,
        w_m,
        total: tape.item(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bt_examples() {
        assert_eq!(bt_probability(0.4, 0.4, 1.3), 0.5);
        assert!((bt_probability(1.0, 0.0, 1.0) - 0.731_059).abs() < 1e-6);
        for (a, b) in [(0.3, -2.0), (5.0, 5.5), (-40.0, 3.0)] {
            assert_eq!(bt_probability(a, b, 0.7) + bt_probability(b, a, 0.7), 1.0);
        }
    }

    #[test]
    fn magnitude_examples() {
        assert_eq!(magnitude_weight(1).unwrap(), 1.0);
        assert!((magnitude_weight(2).unwrap() - 1.414_214).abs() < 1e-6);
        assert_eq!(magnitude_weight(0).unwrap(), 1.0);
        assert!(magnitude_weight(-1).is_err());
    }

    #[test]
    fn entropy_examples() {
        let u = 1.0 / 3.0;
        assert!((routing_entropy(&[u, u, u]) - 1.098_612).abs() < 1e-6);
        assert_eq!(routing_entropy(&[1.0, 0.0, 0.0]), 0.0);
        // −(0.98 ln 0.98 + 2 · 0.01 ln 0.01)
        let oracle = -(0.98f64 * 0.98f64.ln() + 2.0 * 0.01 * 0.01f64.ln());
        assert!((oracle - 0.111_902).abs() < 1e-6);
        assert!((routing_entropy(&[0.98, 0.01, 0.01]) - oracle).abs() < 1e-15);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(entropy_penalty(3f64.ln(), 0.7, 0.01), 0.0);
        assert!((entropy_penalty(0.111_902, 0.7, 0.01) - 0.003_459).abs() < 1e-6);
        assert_eq!(entropy_penalty(0.0, 0.7, 0.0), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().unwrap().is_empty());
        let bad = LossConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let high = LossConfig {
            target_entropy: 1.2,
            ..Default::default()
        };
        assert_eq!(high.validate().unwrap().len(), 1);
    }
}

//! Central finite-difference validation of tape gradients.

use serde::Serialize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{AdaJudge, ModelConfig, Variant};
use crate::objective::{pair_loss_var, LossConfig};
use crate::params::Bound;
use crate::sequence::TokenSequence;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: perturbs the analytic gradient of the named parameter so the
    /// failure path can be exercised end to end.
    pub corrupt_param: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            corrupt_param: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements too small for a relative comparison that agreed to within the
    /// finite-difference roundoff floor.
    pub below_noise: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct KinkWarning {
    pub name: String,
    pub index: usize,
    pub left: f64,
    pub right: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub warnings: Vec<KinkWarning>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub noise_floor: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance)
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` with the fourth-order central difference
/// `(8[f(θ+h) − f(θ−h)] − [f(θ+2h) − f(θ−2h)]) / 12h` for every element of
/// every parameter.
///
/// `f` receives a fresh tape and one leaf per parameter and returns the scalar
/// output. Points where the one-sided differences disagree are reported as
/// non-differentiable warnings instead of errors.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[(String, Tensor)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {}", cfg.step)));
    }
    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    fn eval<F: FnMut(&mut Tape, &[Var]) -> Result<Var>>(f: &mut F, values: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    }

    let base = eval(&mut f, &values)?;
    let again = eval(&mut f, &values)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Usage(format!(
            "function is not deterministic: {base:e} then {again:e}"
        )));
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(&values)
            .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };

    let h = cfg.step;
    let noise_floor = 100.0 * f64::EPSILON * (base.abs() + 1.0) / h;
    let resolvable = noise_floor / cfg.tolerance;
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        warnings: Vec::new(),
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        noise_floor,
    };

    for (pi, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            below_noise: 0,
        };
        for k in 0..values[pi].numel() {
            let orig = values[pi].data()[k];
            let mut at = |offset: f64| {
                values[pi].data_mut()[k] = orig + offset;
                eval(&mut f, &values)
            };
            let plus = at(h)?;
            let minus = at(-h)?;
            let plus2 = at(2.0 * h)?;
            let minus2 = at(-2.0 * h)?;
            values[pi].data_mut()[k] = orig;

            let numeric = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * h);
            let mut a = analytic[pi][k];
            if cfg.corrupt_param.as_deref() == Some(name.as_str()) && k == 0 {
                a += 1e-2 * a.abs().max(1.0);
            }

            let right = (plus - base) / h;
            let left = (base - minus) / h;
            if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1.0) {
                report.warnings.push(KinkWarning {
                    name: name.clone(),
                    index: k,
                    left,
                    right,
                });
                continue;
            }
            // Below `resolvable`, finite differences cannot resolve a relative
            // error of `tolerance`; such elements only need to agree to within
            // the roundoff floor.
            if a.abs().max(numeric.abs()) < resolvable && (a - numeric).abs() <= noise_floor {
                check.below_noise += 1;
                continue;
            }
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

/// Checks the full pair loss of `model` on `(chosen, rejected)` against
/// finite differences over every model parameter.
pub fn check_pair_loss(
    model: &AdaJudge,
    chosen: &TokenSequence,
    rejected: &TokenSequence,
    magnitude: i64,
    loss: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let params: Vec<(String, Tensor)> = model.store().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let routed = model.variant().routes();
    finite_diff_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let c = model.trace(tape, &bound, chosen)?;
            let r = model.trace(tape, &bound, rejected)?;
            Ok(pair_loss_var(tape, &c, &r, magnitude, loss, routed)?.0)
        },
        &params,
        cfg,
    )
}

/// Randomly initialized full model of width `d` with `k` blocks plus two random
/// sequences of `len` tokens (a third of them prompt), for gradient checking.
/// Parameters are drawn with a large standard deviation so that no pathway is
/// switched off by the zero initialization of output projections.
pub fn random_pair_problem(d: usize, len: usize, k: usize, seed: u64) -> Result<(AdaJudge, TokenSequence, TokenSequence)> {
    if len < 2 {
        return Err(Error::Config(format!("sequence length must be >= 2, got {len}")));
    }
    let config = ModelConfig::tiny(d, k);
    let mut model = AdaJudge::new(config, Variant::Full, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    model.store_mut().randomize(&mut rng, 0.5);
    let prompt = (len / 3).max(1);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut seq = || {
        let data: Vec<f64> = (0..len * d).map(|_| normal.sample(&mut rng)).collect();
        TokenSequence::from_prompt_response(Tensor::new(vec![len, d], data)?, prompt)
    };
    let chosen = seq()?;
    let rejected = seq()?;
    Ok((model, chosen, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(t: &mut Tape, v: &[Var]) -> Result<Var> {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    }

    #[test]
    fn quadratic_is_exact() {
        let params = vec![("w".to_string(), Tensor::scalar(3.0))];
        let r = finite_diff_check(square, &params, &GradCheckConfig::default()).unwrap();
        assert!(r.params[0].max_rel_error < 1e-8, "{r:?}");
        assert!(r.passed());
    }

    #[test]
    fn abs_at_zero_is_a_warning() {
        let params = vec![("w".to_string(), Tensor::scalar(0.0))];
        let r = finite_diff_check(
            |t, v| {
                let a = t.abs(v[0]);
                Ok(t.sum(a))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(r.passed());
    }

    #[test]
    fn nondeterminism_is_detected() {
        let params = vec![("w".to_string(), Tensor::scalar(1.0))];
        let mut calls = 0.0;
        let err = finite_diff_check(
            |t, v| {
                calls += 1.0;
                let s = t.scale(v[0], calls);
                Ok(t.sum(s))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let params = vec![("w".to_string(), Tensor::scalar(3.0))];
        let cfg = GradCheckConfig {
            corrupt_param: Some("w".into()),
            ..Default::default()
        };
        let r = finite_diff_check(square, &params, &cfg).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failing().next().unwrap().name, "w");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let params = vec![("w".to_string(), Tensor::scalar(3.0))];
        let cfg = GradCheckConfig {
            step: 0.0,
            ..Default::default()
        };
        assert!(finite_diff_check(square, &params, &cfg).is_err());
    }
}

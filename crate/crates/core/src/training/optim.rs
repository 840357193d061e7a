//! AdamW with decoupled weight decay, warmup schedule and global-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.95,
            eps: ADAM_EPS,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments per parameter, plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn bitwise_eq(&self, other: &OptimizerState) -> bool {
        let eq = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.step == other.step && eq(&self.m, &other.m) && eq(&self.v, &other.v)
    }
}

/// Linear ramp from 0 to `base` over `round(warmup_ratio · total_steps)` steps,
/// constant afterwards.
pub fn lr_at(step: u64, base: f64, warmup_ratio: f64, total_steps: u64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).round() as u64;
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns `(norm before clipping, factor applied)`.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<(f64, f64)> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_grad_norm must be > 0, got {max_norm}")));
    }
    let norm = store.grad_norm();
    if !norm.is_finite() {
        let bad: Vec<&str> = store
            .iter()
            .filter(|p| p.grad.iter().any(|g| !g.is_finite()))
            .map(|p| p.name.as_str())
            .collect();
        return Err(Error::NonFinite(format!(
            "gradient norm is {norm}; non-finite gradients in {}",
            bad.join(", ")
        )));
    }
    let factor = if norm > max_norm { max_norm / norm } else { 1.0 };
    if factor != 1.0 {
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
    Ok((norm, factor))
}

/// One bias-corrected AdamW update:
/// `θ ← θ − lr · (m̂ / (√v̂ + ε) + λ θ)`, with `λ` applied only where `decay` is set.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64, hp: &AdamWParams) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let wd = if p.decay { hp.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
            let g = p.grad[k];
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g;
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + wd * *theta);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::Init;

    fn single(value: f64, decay: bool) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let id = s.add(&mut rng, "w", &[1], Init::Zeros, decay);
        s.get_mut(id).value.data_mut()[0] = value;
        s
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(15, 2.0, 0.03, 1000), 1.0);
        assert_eq!(lr_at(30, 2.0, 0.03, 1000), 2.0);
        assert_eq!(lr_at(999, 2.0, 0.03, 1000), 2.0);
        assert_eq!(lr_at(0, 2.0, 0.03, 10), 2.0);
        let lrs: Vec<f64> = (0..100).map(|s| lr_at(s, 1.0, 0.2, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[20..].iter().all(|&l| l == 1.0));
    }

    #[test]
    fn clip_factors() {
        let mut s = single(0.0, true);
        s.iter_mut().next().unwrap().grad[0] = 4.0;
        let (norm, f) = clip_global_norm(&mut s, 2.0).unwrap();
        assert_eq!((norm, f), (4.0, 0.5));
        assert_eq!(s.grad_norm(), 2.0);

        let mut s = single(0.0, true);
        s.iter_mut().next().unwrap().grad[0] = 1.0;
        assert_eq!(clip_global_norm(&mut s, 2.0).unwrap().1, 1.0);
    }

    #[test]
    fn clip_rejects_nan() {
        let mut s = single(0.0, true);
        s.iter_mut().next().unwrap().grad[0] = f64::NAN;
        assert!(matches!(clip_global_norm(&mut s, 2.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn pure_decay_step() {
        let mut s = single(1.0, true);
        let mut st = OptimizerState::new(&s);
        adamw_step(&mut s, &mut st, 0.01, &AdamWParams::default());
        assert!((s.iter().next().unwrap().value.data()[0] - 0.999).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn no_decay_on_excluded_params() {
        let mut s = single(1.0, false);
        let mut st = OptimizerState::new(&s);
        adamw_step(&mut s, &mut st, 0.01, &AdamWParams::default());
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = single(1.0, true);
        let mut st = OptimizerState::new(&s);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut prev = 1.0;
        for _ in 0..50 {
            s.iter_mut().next().unwrap().grad[0] = 0.3;
            adamw_step(&mut s, &mut st, 0.01, &hp);
            let now = s.iter().next().unwrap().value.data()[0];
            assert!(now < prev);
            prev = now;
        }
    }
}

//! Multi-perspective pooling, per-view scoring heads, and the prompt-conditioned router.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// The three pooling experts, in routing order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Last,
    Mean,
    Attention,
}

impl View {
    pub const ALL: [View; 3] = [View::Last, View::Mean, View::Attention];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            View::Last => "L",
            View::Mean => "M",
            View::Attention => "A",
        }
    }
}

fn require_rows(tape: &Tape, h: Var, mask: &[bool], op: &'static str) -> Result<()> {
    let dims = tape.value(h).dims();
    if dims.len() != 2 || dims[0] != mask.len() {
        return Err(Error::shape(op, &[dims, &[mask.len()]]));
    }
    Ok(())
}

/// Row `τ = max{t : m_t = 1}`.
pub fn pool_last(tape: &mut Tape, h: Var, response_mask: &[bool]) -> Result<Var> {
    require_rows(tape, h, response_mask, "pool_last")?;
    let tau = response_mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::Usage("pool_last: empty response".into()))?;
    tape.select_rows(h, &[tau])
}

/// `Σ m_t H_t / Σ m_t` over response tokens.
pub fn pool_mean(tape: &mut Tape, h: Var, response_mask: &[bool]) -> Result<Var> {
    require_rows(tape, h, response_mask, "pool_mean")?;
    if !response_mask.iter().any(|&m| m) {
        return Err(Error::Usage("pool_mean: empty response".into()));
    }
    tape.masked_mean_rows(h, response_mask)
}

/// Mean of the first `prompt_len` rows.
pub fn pool_prompt(tape: &mut Tape, h: Var, prompt_len: usize) -> Result<Var> {
    let rows = tape.value(h).dims()[0];
    if prompt_len == 0 {
        return Err(Error::Usage("pool_prompt: prompt_len must be >= 1".into()));
    }
    if prompt_len > rows {
        return Err(Error::shape("pool_prompt", &[tape.value(h).dims(), &[prompt_len]]));
    }
    let mask: Vec<bool> = (0..rows).map(|t| t < prompt_len).collect();
    tape.masked_mean_rows(h, &mask)
}

/// Single-layer linear scorer `W_a H_t + b_a` followed by a softmax over every
/// unpadded token, prompt included.
#[derive(Clone, Debug)]
pub struct AttentionScorer {
    pub w: ParamId,
    pub b: ParamId,
}

impl AttentionScorer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, std: f64) -> Self {
        AttentionScorer {
            w: store.add(rng, "pool.attn.w", &[d, 1], Init::Normal(std), true),
            b: store.add(rng, "pool.attn.b", &[1], Init::Zeros, false),
        }
    }

    /// Returns `(z_A, β)` with `β` of shape `1 × L`.
    pub fn pool(&self, tape: &mut Tape, p: &Bound, h: Var, pad_mask: &[bool]) -> Result<(Var, Var)> {
        pool_attention(tape, h, pad_mask, p.var(self.w), p.var(self.b))
    }
}

/// Attention pooling with explicit scorer weights (`d × 1`) and bias (scalar).
pub fn pool_attention(tape: &mut Tape, h: Var, pad_mask: &[bool], w: Var, b: Var) -> Result<(Var, Var)> {
    require_rows(tape, h, pad_mask, "pool_attention")?;
    let logits = tape.matmul(h, w)?;
    let logits = tape.add(logits, b)?;
    let logits = tape.transpose(logits)?;
    let beta = tape.masked_softmax(logits, pad_mask)?;
    let z = tape.matmul(beta, h)?;
    Ok((z, beta))
}

/// Two-layer perceptron `W₂ · GELU(W₁ z + b₁) + b₂`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: (usize, usize, usize),
        std_in: f64,
        std_out: f64,
    ) -> Self {
        let (i, h, o) = dims;
        Mlp {
            w1: store.add(rng, format!("{prefix}.w1"), &[i, h], Init::Normal(std_in), true),
            b1: store.add(rng, format!("{prefix}.b1"), &[h], Init::Zeros, false),
            w2: store.add(rng, format!("{prefix}.w2"), &[h, o], Init::Normal(std_out), true),
            b2: store.add(rng, format!("{prefix}.b2"), &[o], Init::Zeros, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let h = tape.matmul(z, p.var(self.w1))?;
        let h = tape.add(h, p.var(self.b1))?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, p.var(self.w2))?;
        tape.add(o, p.var(self.b2))
    }
}

/// Scalar score `s_v` of one pooled view (`1 × 1`).
pub fn score_view(tape: &mut Tape, p: &Bound, head: &Mlp, z: Var) -> Result<Var> {
    head.forward(tape, p, z)
}

/// `π = softmax(router([z_L; z_M; z_A; z_P]))`, shape `1 × 3`.
pub fn route(tape: &mut Tape, p: &Bound, router: &Mlp, views: [Var; 4]) -> Result<Var> {
    let cat = tape.concat_cols(&views)?;
    let logits = router.forward(tape, p, cat)?;
    if tape.value(logits).numel() != 3 {
        return Err(Error::shape("route", &[tape.value(logits).dims(), &[1, 3]]));
    }
    Ok(tape.softmax(logits))
}

/// `r = Σ_v π_v s_v` from `π` (`1 × 3`) and the three `1 × 1` scores.
pub fn mix(tape: &mut Tape, pi: Var, scores: [Var; 3]) -> Result<Var> {
    let s = tape.concat_cols(&scores)?;
    let weighted = tape.mul(s, pi)?;
    Ok(tape.sum(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn col(t: &mut Tape, rows: &[f64]) -> Var {
        t.constant(Tensor::new(vec![rows.len(), 1], rows.to_vec()).unwrap())
    }

    #[test]
    fn last_pool_examples() {
        let mut t = Tape::new();
        let h = col(&mut t, &[1.0, 2.0, 3.0]);
        let z = pool_last(&mut t, h, &[false, true, true]).unwrap();
        assert_eq!(t.value(z).data(), &[3.0]);

        let h = col(&mut t, &[1.0, 2.0, 9.0]);
        let z = pool_last(&mut t, h, &[false, true, false]).unwrap();
        assert_eq!(t.value(z).data(), &[2.0]);

        let h = col(&mut t, &[4.0, 5.0, 6.0, 7.0]);
        let z = pool_last(&mut t, h, &[true; 4]).unwrap();
        assert_eq!(t.value(z).data(), &[7.0]);
    }

    #[test]
    fn last_pool_is_order_sensitive() {
        let mut t = Tape::new();
        let h = col(&mut t, &[0.0, 2.0, 3.0]);
        let a = pool_last(&mut t, h, &[false, true, true]).unwrap();
        let h2 = col(&mut t, &[0.0, 3.0, 2.0]);
        let b = pool_last(&mut t, h2, &[false, true, true]).unwrap();
        assert_ne!(t.value(a).data(), t.value(b).data());
    }

    #[test]
    fn empty_response_errors() {
        let mut t = Tape::new();
        let h = col(&mut t, &[1.0, 2.0]);
        assert!(pool_last(&mut t, h, &[false, false]).is_err());
        assert!(pool_mean(&mut t, h, &[false, false]).is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let mut t = Tape::new();
        let h = col(&mut t, &[2.0, 4.0, 6.0]);
        let z = pool_mean(&mut t, h, &[false, true, true]).unwrap();
        assert_eq!(t.value(z).data(), &[5.0]);

        let h = col(&mut t, &[1.5, 1.5, 1.5]);
        let z = pool_mean(&mut t, h, &[true, true, true]).unwrap();
        assert_eq!(t.value(z).data(), &[1.5]);
    }

    #[test]
    fn mean_pool_is_permutation_invariant() {
        let mut t = Tape::new();
        let a = col(&mut t, &[9.0, 1.0, 2.0, 4.0]);
        let b = col(&mut t, &[9.0, 4.0, 1.0, 2.0]);
        let m = [false, true, true, true];
        let za = pool_mean(&mut t, a, &m).unwrap();
        let zb = pool_mean(&mut t, b, &m).unwrap();
        assert!((t.value(za).item() - t.value(zb).item()).abs() < 1e-15);
    }

    #[test]
    fn attention_pool_scalar_oracle() {
        // β = softmax([1, 3]); z = β·[1, 3].
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        let (b0, b1) = (e1 / (e1 + e3), e3 / (e1 + e3));
        let z_expected = b0 * 1.0 + b1 * 3.0;
        assert!((b0 - 0.11920).abs() < 1e-5 && (z_expected - 2.76160).abs() < 1e-5);

        let mut t = Tape::new();
        let h = col(&mut t, &[1.0, 3.0]);
        let w = t.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let b = t.constant(Tensor::scalar(0.0));
        let (z, beta) = pool_attention(&mut t, h, &[true, true], w, b).unwrap();
        assert!((t.value(beta).data()[0] - b0).abs() < 1e-12);
        assert!((t.value(beta).data()[1] - b1).abs() < 1e-12);
        assert!((t.value(z).item() - z_expected).abs() < 1e-12);
    }

    #[test]
    fn attention_pool_with_zero_scorer_is_unpadded_mean() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, -4.0], &[100.0, 100.0]]).unwrap());
        let w = t.constant(Tensor::zeros(&[2, 1]));
        let b = t.constant(Tensor::scalar(0.7));
        let (z, beta) = pool_attention(&mut t, h, &[true, true, false], w, b).unwrap();
        assert_eq!(t.value(beta).data()[2], 0.0);
        assert!((t.value(z).data()[0] - 2.0).abs() < 1e-12);
        assert!((t.value(z).data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_pool_examples() {
        let mut t = Tape::new();
        let h = col(&mut t, &[1.0, 3.0, 50.0]);
        let z = pool_prompt(&mut t, h, 2).unwrap();
        assert_eq!(t.value(z).data(), &[2.0]);
        let z = pool_prompt(&mut t, h, 1).unwrap();
        assert_eq!(t.value(z).data(), &[1.0]);
        assert!(pool_prompt(&mut t, h, 0).is_err());
    }
}

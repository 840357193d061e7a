//! The tape-based forward pass diffed against a direct loop implementation.

use adajudge_core::{AdaJudge, ModelConfig, Tensor, TokenSequence, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Mat = Vec<Vec<f64>>;

struct Oracle<'a> {
    model: &'a AdaJudge,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> Vec<f64> {
        let id = self.model.store().find(name).unwrap_or_else(|| panic!("missing {name}"));
        self.model.store().get(id).value.data().to_vec()
    }

    /// `x · W + b` with `W` stored row-major as `in × out`.
    fn linear(&self, x: &[f64], w: &str, b: Option<&str>) -> Vec<f64> {
        let w = self.p(w);
        let out = w.len() / x.len();
        let mut y = b.map_or(vec![0.0; out], |b| self.p(b));
        for (i, xi) in x.iter().enumerate() {
            for j in 0..out {
                y[j] += xi * w[i * out + j];
            }
        }
        y
    }

    fn mlp(&self, prefix: &str, z: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.linear(z, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1"))).into_iter().map(gelu).collect();
        self.linear(&h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
    }

    fn layer_norm(&self, x: &[f64], prefix: &str) -> Vec<f64> {
        let (g, b) = (self.p(&format!("{prefix}.gain")), self.p(&format!("{prefix}.bias")));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rs = 1.0 / (var + 1e-5).sqrt();
        x.iter().enumerate().map(|(j, v)| (v - mean) * rs * g[j] + b[j]).collect()
    }

    fn block(&self, i: usize, h: &Mat, pad: &[bool]) -> Mat {
        let cfg = self.model.config();
        let pre = format!("refine.block{i}");
        let len = h.len();
        let x: Mat = h.iter().map(|r| self.layer_norm(r, &format!("{pre}.ln1"))).collect();
        let q: Mat = x.iter().map(|r| self.linear(r, &format!("{pre}.attn.wq"), Some(&format!("{pre}.attn.bq")))).collect();
        let k: Mat = x.iter().map(|r| self.linear(r, &format!("{pre}.attn.wk"), None)).collect();
        let v: Mat = x.iter().map(|r| self.linear(r, &format!("{pre}.attn.wv"), Some(&format!("{pre}.attn.bv")))).collect();
        let dh = cfg.d / cfg.n_heads;
        let mut cat = vec![vec![0.0; cfg.d]; len];
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for t in 0..len {
                let allowed = |s: usize| pad[s] && (!cfg.causal || s <= t || !pad[t]);
                let logits: Vec<f64> = (0..len)
                    .map(|s| {
                        let dot: f64 = cols.clone().map(|c| q[t][c] * k[s][c]).sum();
                        dot / (dh as f64).sqrt()
                    })
                    .collect();
                let m = (0..len).filter(|&s| allowed(s)).map(|s| logits[s]).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = (0..len).map(|s| if allowed(s) { (logits[s] - m).exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    cat[t][c] = (0..len).map(|s| e[s] / z * v[s][c]).sum();
                }
            }
        }
        let x1: Mat = (0..len)
            .map(|t| {
                let o = self.linear(&cat[t], &format!("{pre}.attn.wo"), Some(&format!("{pre}.attn.bo")));
                h[t].iter().zip(o).map(|(a, b)| a + b).collect()
            })
            .collect();
        x1.iter()
            .map(|r| {
                let y = self.layer_norm(r, &format!("{pre}.ln2"));
                let y: Vec<f64> = self.linear(&y, &format!("{pre}.ffn.w1"), Some(&format!("{pre}.ffn.b1"))).into_iter().map(gelu).collect();
                let y = self.linear(&y, &format!("{pre}.ffn.w2"), Some(&format!("{pre}.ffn.b2")));
                r.iter().zip(y).map(|(a, b)| a + b).collect()
            })
            .collect()
    }

    /// Returns `(reward, π, α)`.
    fn reward(&self, seq: &TokenSequence) -> (f64, Vec<f64>, Option<Vec<f64>>) {
        let d = seq.dim();
        let pad = seq.pad_mask();
        let h0: Mat = (0..seq.len()).map(|t| seq.embeddings().row_slice(t).to_vec()).collect();
        let (hidden, alpha) = if self.model.variant() == Variant::NoRefine {
            (h0, None)
        } else {
            let ctx = masked_mean(&h0, pad);
            let alpha = softmax(&self.linear(&ctx, "refine.gate.w", Some("refine.gate.b")));
            let mut h = h0;
            let mut refined = vec![vec![0.0; d]; h.len()];
            for (k, a) in alpha.iter().enumerate() {
                h = self.block(k, &h, pad);
                for (r, hr) in refined.iter_mut().zip(&h) {
                    r.iter_mut().zip(hr).for_each(|(x, y)| *x += a * y);
                }
            }
            (refined, Some(alpha))
        };
        let resp = seq.response_mask();
        let last = resp.iter().rposition(|&m| m).unwrap();
        let z_l = hidden[last].clone();
        let z_m = masked_mean(&hidden, resp);
        let (w, b) = (self.p("pool.attn.w"), self.p("pool.attn.b")[0]);
        let logits: Vec<f64> = hidden.iter().map(|r| r.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + b).collect();
        let m = (0..hidden.len()).filter(|&t| pad[t]).map(|t| logits[t]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..hidden.len()).map(|t| if pad[t] { (logits[t] - m).exp() } else { 0.0 }).collect();
        let zsum: f64 = e.iter().sum();
        let z_a: Vec<f64> = (0..d).map(|j| (0..hidden.len()).map(|t| e[t] / zsum * hidden[t][j]).sum()).collect();
        let prompt: Vec<bool> = (0..hidden.len()).map(|t| t < seq.prompt_len()).collect();
        let z_p = masked_mean(&hidden, &prompt);

        let scores = [
            self.mlp("head.last", &z_l)[0],
            self.mlp("head.mean", &z_m)[0],
            self.mlp("head.attn", &z_a)[0],
        ];
        let pi = match self.model.variant() {
            Variant::LastOnly => vec![1.0, 0.0, 0.0],
            Variant::MeanOnly => vec![0.0, 1.0, 0.0],
            Variant::AttnOnly => vec![0.0, 0.0, 1.0],
            _ => {
                let cat: Vec<f64> = [z_l, z_m, z_a, z_p].concat();
                softmax(&self.mlp("router", &cat))
            }
        };
        let r = pi.iter().zip(scores).map(|(p, s)| p * s).sum();
        (r, pi, alpha)
    }
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn masked_mean(h: &Mat, mask: &[bool]) -> Vec<f64> {
    let n = mask.iter().filter(|&&m| m).count() as f64;
    (0..h[0].len())
        .map(|j| h.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r[j]).sum::<f64>() / n)
        .collect()
}

fn random_seq(rng: &mut ChaCha8Rng, d: usize) -> TokenSequence {
    let len = rng.gen_range(3..=10);
    let prompt = rng.gen_range(1..len);
    let data = (0..len * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let seq = TokenSequence::from_prompt_response(Tensor::new(vec![len, d], data).unwrap(), prompt).unwrap();
    let pad = rng.gen_range(0..3);
    seq.padded(pad, 1.5)
}

fn check(variant: Variant, causal: bool, k: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(k as u64 + 10 * causal as u64);
    for seed in 0..8 {
        let config = ModelConfig {
            causal,
            ..ModelConfig::tiny(8, k)
        };
        let mut model = AdaJudge::new(config, variant, seed).unwrap();
        model.store_mut().randomize(&mut rng, 0.4);
        let oracle = Oracle { model: &model };
        for _ in 0..5 {
            let seq = random_seq(&mut rng, 8);
            let out = model.reward(&seq).unwrap();
            let (r, pi, alpha) = oracle.reward(&seq);
            assert!((out.reward - r).abs() < 1e-10, "{variant:?} reward {} vs {r}", out.reward);
            for (a, b) in out.pi.iter().zip(&pi) {
                assert!((a - b).abs() < 1e-10);
            }
            match (out.alpha, alpha) {
                (Some(a), Some(b)) => a.iter().zip(&b).for_each(|(x, y)| assert!((x - y).abs() < 1e-10)),
                (None, None) => {}
                other => panic!("alpha presence differs: {other:?}"),
            }
        }
    }
}

#[test]
fn full_model_matches_loop_implementation() {
    check(Variant::Full, false, 2);
    check(Variant::Full, false, 3);
}

#[test]
fn causal_attention_matches_loop_implementation() {
    check(Variant::Full, true, 2);
}

#[test]
fn ablations_match_loop_implementation() {
    for v in [Variant::LastOnly, Variant::MeanOnly, Variant::AttnOnly, Variant::NoRefine] {
        check(v, false, 2);
    }
}

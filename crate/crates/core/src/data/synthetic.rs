//! Synthetic preference data whose evidence sits in different places of the
//! response, so that each static pooling strategy wins on one regime and
//! loses on another.
//!
//! A unit quality direction `u` is drawn once per seed. Chosen responses carry
//! `+signal·u` and rejected responses `−signal·u` at identical positions:
//!
//! * `terminal`: all of it on the final response token;
//! * `distributed`: `signal / L_y` on every response token;
//! * `sparse`: all of it on one random non-final response token.
//!
//! Every other value is i.i.d. `N(0, noise_std²)`. Prompt rows are shared by
//! both responses. With a nonzero `domain_signal`, every token of the sequence
//! also carries `domain_signal · v_regime`, a per-regime direction orthogonal
//! to `u`. The offset is identical in chosen and rejected, so it identifies the
//! task type (through the prompt context, among others) without revealing which
//! response is better, and it cannot be used to tell prompt rows from response
//! rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, PreferencePair};
use crate::error::{Error, Result};
use crate::sequence::TokenSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Terminal,
    Distributed,
    Sparse,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Terminal, Regime::Distributed, Regime::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Terminal => "terminal",
            Regime::Distributed => "distributed",
            Regime::Sparse => "sparse",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            Error::Usage(format!(
                "unknown regime `{s}`; valid regimes: terminal, distributed, sparse"
            ))
        })
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub regime: Regime,
    pub d: usize,
    /// Inclusive range of prompt lengths.
    pub prompt_len: (usize, usize),
    /// Inclusive range of response lengths.
    pub response_len: (usize, usize),
    pub signal_strength: f64,
    pub noise_std: f64,
    #[serde(default = "default_domain_signal")]
    pub domain_signal: f64,
    pub n_pairs: usize,
    pub seed: u64,
    /// First sequence id; lets several regimes share one store.
    #[serde(default)]
    pub id_offset: u64,
}

fn default_domain_signal() -> f64 {
    0.0
}

impl SyntheticSpec {
    pub fn new(regime: Regime, d: usize, n_pairs: usize, seed: u64) -> Self {
        SyntheticSpec {
            regime,
            d,
            prompt_len: (4, 6),
            response_len: (8, 12),
            signal_strength: 1.0,
            noise_std: 1.0,
            domain_signal: default_domain_signal(),
            n_pairs,
            seed,
            id_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (pl, ph) = self.prompt_len;
        let (rl, rh) = self.response_len;
        if self.d == 0 || pl == 0 || rl == 0 || pl > ph || rl > rh {
            return Err(Error::Config(format!(
                "invalid synthetic dims: d {}, prompt {:?}, response {:?}",
                self.d, self.prompt_len, self.response_len
            )));
        }
        if self.regime == Regime::Sparse && rl < 2 {
            return Err(Error::Config("sparse regime needs responses of length >= 2".into()));
        }
        if !(self.noise_std >= 0.0) || !self.signal_strength.is_finite() || !self.domain_signal.is_finite() {
            return Err(Error::Config("noise_std must be >= 0 and strengths finite".into()));
        }
        Ok(())
    }
}

/// Per-regime signal strengths of the benchmark suite, tuned so that at
/// `noise_std = 1` no single pooling strategy wins every regime.
pub fn benchmark_signal(regime: Regime) -> f64 {
    match regime {
        Regime::Terminal => 1.35,
        Regime::Distributed => 3.0,
        Regime::Sparse => 2.5,
    }
}

/// Offset strength used by the benchmark suite.
pub const BENCHMARK_DOMAIN_SIGNAL: f64 = 3.0;

/// Specs for the three-regime benchmark suite, all generated from one `seed`.
pub fn benchmark_specs(d: usize, n_pairs: usize, seed: u64) -> Vec<SyntheticSpec> {
    Regime::ALL
        .iter()
        .map(|&r| SyntheticSpec {
            signal_strength: benchmark_signal(r),
            domain_signal: BENCHMARK_DOMAIN_SIGNAL,
            ..SyntheticSpec::new(r, d, n_pairs, seed)
        })
        .collect()
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// The unit quality direction shared by every dataset generated from `seed`.
pub fn quality_direction(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut u = normal_vec(&mut rng, d);
    normalize(&mut u);
    u
}

/// Unit per-regime prompt direction, orthogonal to the quality direction.
pub fn domain_direction(seed: u64, d: usize, regime: Regime) -> Vec<f64> {
    let u = quality_direction(seed, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + regime.index());
    let mut v = normal_vec(&mut rng, d);
    if d > 1 {
        let dot: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(a, b)| *a -= dot * b);
    }
    normalize(&mut v);
    v
}

/// Generates `n_pairs` pairs for one regime. Sequence ids are
/// `id_offset + 2i` (chosen) and `id_offset + 2i + 1` (rejected).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(EmbeddingStore, Vec<PreferencePair>)> {
    spec.validate()?;
    let d = spec.d;
    let u = quality_direction(spec.seed, d);
    let v = domain_direction(spec.seed, d, spec.regime);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(16 + spec.regime.index());
    let noise = |rng: &mut ChaCha8Rng| spec.noise_std * rng.sample::<f64, _>(StandardNormal);

    let mut store = EmbeddingStore::new(d);
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        let lp = rng.gen_range(spec.prompt_len.0..=spec.prompt_len.1);
        let ly = rng.gen_range(spec.response_len.0..=spec.response_len.1);
        let mut prompt = Vec::with_capacity(lp * d);
        for _ in 0..lp {
            for j in 0..d {
                prompt.push(noise(&mut rng) + spec.domain_signal * v[j]);
            }
        }
        // Per-token share of the signal along `u`.
        let mut share = vec![0.0; ly];
        match spec.regime {
            Regime::Terminal => share[ly - 1] = spec.signal_strength,
            Regime::Distributed => share.iter_mut().for_each(|s| *s = spec.signal_strength / ly as f64),
            Regime::Sparse => share[rng.gen_range(0..ly - 1)] = spec.signal_strength,
        }
        let chosen_id = spec.id_offset + 2 * i as u64;
        for (sign, id) in [(1.0, chosen_id), (-1.0, chosen_id + 1)] {
            let mut data = prompt.clone();
            data.reserve(ly * d);
            for &s in &share {
                for (&uj, &vj) in u.iter().zip(&v) {
                    data.push(noise(&mut rng) + sign * s * uj + spec.domain_signal * vj);
                }
            }
            let emb = Tensor::new(vec![lp + ly, d], data)?;
            store.insert(id, TokenSequence::from_prompt_response(emb, lp)?)?;
        }
        pairs.push(PreferencePair {
            id: format!("{}-{i:05}", spec.regime),
            domain: spec.regime.name().to_string(),
            chosen: chosen_id,
            rejected: chosen_id + 1,
            magnitude: 1,
        });
    }
    Ok((store, pairs))
}

/// Generates several regimes into one store with disjoint sequence ids.
pub fn generate_suite(specs: &[SyntheticSpec]) -> Result<(EmbeddingStore, Vec<PreferencePair>)> {
    let d = specs.first().map_or(1, |s| s.d);
    let mut store = EmbeddingStore::new(d);
    let mut pairs = Vec::new();
    let mut offset = 0;
    for spec in specs {
        let spec = SyntheticSpec {
            id_offset: offset,
            ..spec.clone()
        };
        let (s, p) = generate_synthetic(&spec)?;
        offset += 2 * spec.n_pairs as u64;
        store.merge(s)?;
        pairs.extend(p);
    }
    Ok((store, pairs))
}

//! The full reward head: refinement, pooling, per-view scoring, routing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AttentionScorer, Mlp, View};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::refinement::{BlockShape, RefinedVars, RefinementStack};
use crate::sequence::TokenSequence;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    /// Number of refinement blocks `K`.
    pub k_blocks: usize,
    pub n_heads: usize,
    /// FFN hidden width inside refinement blocks; `None` means `2d`.
    pub ffn_hidden: Option<usize>,
    /// Hidden width of each view head; `None` means `d/2`.
    pub head_hidden: Option<usize>,
    /// Hidden width of the router; `None` means `d`.
    pub router_hidden: Option<usize>,
    pub causal: bool,
    /// Std of normal init for refinement blocks, the depth gate and the attention scorer.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            k_blocks: 3,
            n_heads: 4,
            ffn_hidden: None,
            head_hidden: None,
            router_hidden: None,
            causal: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn tiny(d: usize, k_blocks: usize) -> Self {
        ModelConfig {
            d,
            k_blocks,
            n_heads: if d % 4 == 0 { 4 } else { 1 },
            ..Default::default()
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.d)
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or((self.d / 2).max(1))
    }

    pub fn router_hidden(&self) -> usize {
        self.router_hidden.unwrap_or(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k_blocks == 0 {
            return Err(Error::Config("d and k_blocks must be positive".into()));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config("init_std must be >= 0".into()));
        }
        Ok(())
    }

    fn block_shape(&self) -> BlockShape {
        BlockShape {
            d: self.d,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden(),
            causal: self.causal,
        }
    }
}

/// Which parts of the head are active; the static variants are ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// `π ≡ [1, 0, 0]`, router bypassed.
    LastOnly,
    /// `π ≡ [0, 1, 0]`, router bypassed.
    MeanOnly,
    /// `π ≡ [0, 0, 1]`, router bypassed.
    AttnOnly,
    /// `H̃ = H⁽⁰⁾`, refinement bypassed.
    NoRefine,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::LastOnly,
        Variant::MeanOnly,
        Variant::AttnOnly,
        Variant::Full,
        Variant::NoRefine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LastOnly => "last_only",
            Variant::MeanOnly => "mean_only",
            Variant::AttnOnly => "attn_only",
            Variant::NoRefine => "no_refine",
        }
    }

    pub fn forced_view(self) -> Option<View> {
        match self {
            Variant::LastOnly => Some(View::Last),
            Variant::MeanOnly => Some(View::Mean),
            Variant::AttnOnly => Some(View::Attention),
            _ => None,
        }
    }

    pub fn refines(self) -> bool {
        self != Variant::NoRefine
    }

    pub fn routes(self) -> bool {
        self.forced_view().is_none()
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Usage(format!("unknown mode `{s}`; valid modes: {}", valid.join(", ")))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Tape handles of one reward evaluation.
#[derive(Clone, Debug)]
pub struct RewardTrace {
    pub h0: Var,
    pub refinement: Option<RefinedVars>,
    /// The representation that was pooled (`H̃`, or `H⁽⁰⁾` without refinement).
    pub hidden: Var,
    /// `[z_L, z_M, z_A, z_P]`, each `1 × d`.
    pub views: [Var; 4],
    pub beta: Var,
    pub scores: [Var; 3],
    pub pi: Var,
    pub reward: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewBundle {
    pub z_last: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_attn: Vec<f64>,
    pub z_prompt: Vec<f64>,
    /// `[s_L, s_M, s_A]`.
    pub scores: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardOutput {
    pub pi: [f64; 3],
    pub reward: f64,
    pub views: ViewBundle,
    /// Depth weights; absent when refinement is bypassed.
    pub alpha: Option<Vec<f64>>,
    /// Attention-pooling weights over all `L` positions.
    pub beta: Vec<f64>,
}

fn arr3(t: &Tensor) -> [f64; 3] {
    let d = t.data();
    [d[0], d[1], d[2]]
}

/// The reward head and its parameters.
#[derive(Clone, Debug)]
pub struct AdaJudge {
    config: ModelConfig,
    variant: Variant,
    store: ParamStore,
    refinement: RefinementStack,
    scorer: AttentionScorer,
    heads: [Mlp; 3],
    router: Mlp,
}

impl AdaJudge {
    /// Builds a model with parameters drawn from `seed`. Every variant
    /// allocates the same parameter set so that ablations share initial values.
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let refinement =
            RefinementStack::new(&mut store, &mut rng, config.k_blocks, config.block_shape(), config.init_std)?;
        let scorer = AttentionScorer::new(&mut store, &mut rng, d, config.init_std);
        let hh = config.head_hidden();
        let head = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            Mlp::new(
                store,
                rng,
                &format!("head.{name}"),
                (d, hh, 1),
                1.0 / (d as f64).sqrt(),
                1.0 / (hh as f64).sqrt(),
            )
        };
        let heads = [
            head(&mut store, &mut rng, "last"),
            head(&mut store, &mut rng, "mean"),
            head(&mut store, &mut rng, "attn"),
        ];
        let rh = config.router_hidden();
        let router = Mlp::new(
            &mut store,
            &mut rng,
            "router",
            (4 * d, rh, 3),
            1.0 / ((4 * d) as f64).sqrt(),
            0.0,
        );
        Ok(AdaJudge {
            config,
            variant,
            store,
            refinement,
            scorer,
            heads,
            router,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn refinement(&self) -> &RefinementStack {
        &self.refinement
    }

    pub fn scorer(&self) -> &AttentionScorer {
        &self.scorer
    }

    pub fn head(&self, view: View) -> &Mlp {
        &self.heads[view.index()]
    }

    pub fn router(&self) -> &Mlp {
        &self.router
    }

    /// Mutable view of the parameter called `name`.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.store.find(name)?;
        Some(&mut self.store.get_mut(id).value)
    }

    fn check_seq(&self, seq: &TokenSequence) -> Result<()> {
        if seq.dim() != self.config.d {
            return Err(Error::Dimension {
                name: "embeddings".into(),
                expected: vec![seq.len(), self.config.d],
                found: seq.embeddings().dims().to_vec(),
            });
        }
        Ok(())
    }

    /// `[z_L, z_M, z_A, z_P]` and `β` pooled from `hidden`.
    pub fn pool_views(
        &self,
        tape: &mut Tape,
        p: &Bound,
        hidden: Var,
        seq: &TokenSequence,
    ) -> Result<([Var; 4], Var)> {
        let z_last = aggregation::pool_last(tape, hidden, seq.response_mask())?;
        let z_mean = aggregation::pool_mean(tape, hidden, seq.response_mask())?;
        let (z_attn, beta) = self.scorer.pool(tape, p, hidden, seq.pad_mask())?;
        let z_prompt = aggregation::pool_prompt(tape, hidden, seq.prompt_len())?;
        Ok(([z_last, z_mean, z_attn, z_prompt], beta))
    }

    /// Scores, routing weights and reward for already-pooled views.
    pub fn score_views(&self, tape: &mut Tape, p: &Bound, views: [Var; 4]) -> Result<([Var; 3], Var, Var)> {
        let mut scores = [views[0]; 3];
        for v in View::ALL {
            scores[v.index()] = aggregation::score_view(tape, p, &self.heads[v.index()], views[v.index()])?;
        }
        let pi = match self.variant.forced_view() {
            Some(v) => {
                let mut onehot = [0.0; 3];
                onehot[v.index()] = 1.0;
                tape.constant(Tensor::row(&onehot))
            }
            None => aggregation::route(tape, p, &self.router, views)?,
        };
        let reward = aggregation::mix(tape, pi, scores)?;
        Ok((scores, pi, reward))
    }

    /// Records the complete reward computation for `seq` on `tape`.
    pub fn trace(&self, tape: &mut Tape, p: &Bound, seq: &TokenSequence) -> Result<RewardTrace> {
        self.check_seq(seq)?;
        let h0 = tape.constant(seq.embeddings().clone());
        let (refinement, hidden) = if self.variant.refines() {
            let r = self.refinement.refine(tape, p, h0, seq.pad_mask())?;
            let hidden = r.refined;
            (Some(r), hidden)
        } else {
            (None, h0)
        };
        let (views, beta) = self.pool_views(tape, p, hidden, seq)?;
        let (scores, pi, reward) = self.score_views(tape, p, views)?;
        Ok(RewardTrace {
            h0,
            refinement,
            hidden,
            views,
            beta,
            scores,
            pi,
            reward,
        })
    }

    pub fn output_of(&self, tape: &Tape, tr: &RewardTrace) -> RewardOutput {
        let row = |v: Var| tape.value(v).data().to_vec();
        RewardOutput {
            pi: arr3(tape.value(tr.pi)),
            reward: tape.item(tr.reward),
            views: ViewBundle {
                z_last: row(tr.views[0]),
                z_mean: row(tr.views[1]),
                z_attn: row(tr.views[2]),
                z_prompt: row(tr.views[3]),
                scores: [
                    tape.item(tr.scores[0]),
                    tape.item(tr.scores[1]),
                    tape.item(tr.scores[2]),
                ],
            },
            alpha: tr.refinement.as_ref().map(|r| row(r.alpha)),
            beta: row(tr.beta),
        }
    }

    /// Forward pass without gradient tracking.
    pub fn reward(&self, seq: &TokenSequence) -> Result<RewardOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let tr = self.trace(&mut tape, &p, seq)?;
        Ok(self.output_of(&tape, &tr))
    }

    /// Refined states for `seq`: per-block outputs, `α` and `H̃`.
    pub fn refine(&self, seq: &TokenSequence) -> Result<RefinedStates> {
        self.check_seq(seq)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let h0 = tape.constant(seq.embeddings().clone());
        let r = self.refinement.refine(&mut tape, &p, h0, seq.pad_mask())?;
        Ok(RefinedStates {
            per_block: r.per_block.iter().map(|&v| tape.value(v).clone()).collect(),
            alpha: tape.value(r.alpha).data().to_vec(),
            refined: tape.value(r.refined).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RefinedStates {
    pub per_block: Vec<Tensor>,
    pub alpha: Vec<f64>,
    pub refined: Tensor,
}

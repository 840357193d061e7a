//! Depth-gated representation refinement.
//!
//! `K` pre-norm transformer blocks run sequentially over the backbone states
//! `H⁽⁰⁾`. A gate reads the pad-masked mean of `H⁽⁰⁾` and produces mixture
//! weights `α` on the `K`-simplex; the refined states are `Σₖ αₖ H⁽ᵏ⁾` for
//! `k = 1..K` (the input itself is not a mixture component).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub d: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    /// Restricts each token to attending to itself and earlier tokens.
    pub causal: bool,
}

/// Parameter handles of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Block {
    /// Output projections start at zero so a fresh block is the identity map.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        shape: BlockShape,
        std: f64,
    ) -> Result<Self> {
        if shape.n_heads == 0 || shape.d % shape.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                shape.d, shape.n_heads
            )));
        }
        let (d, f) = (shape.d, shape.ffn_hidden);
        let mut add = |name: &str, dims: &[usize], init: Init, decay: bool| {
            store.add(rng, format!("{prefix}.{name}"), dims, init, decay)
        };
        Ok(Block {
            ln1_gain: add("ln1.gain", &[d], Init::Ones, false),
            ln1_bias: add("ln1.bias", &[d], Init::Zeros, false),
            wq: add("attn.wq", &[d, d], Init::Normal(std), true),
            bq: add("attn.bq", &[d], Init::Zeros, false),
            wk: add("attn.wk", &[d, d], Init::Normal(std), true),
            wv: add("attn.wv", &[d, d], Init::Normal(std), true),
            bv: add("attn.bv", &[d], Init::Zeros, false),
            wo: add("attn.wo", &[d, d], Init::Zeros, true),
            bo: add("attn.bo", &[d], Init::Zeros, false),
            ln2_gain: add("ln2.gain", &[d], Init::Ones, false),
            ln2_bias: add("ln2.bias", &[d], Init::Zeros, false),
            w1: add("ffn.w1", &[d, f], Init::Normal(std), true),
            b1: add("ffn.b1", &[f], Init::Zeros, false),
            w2: add("ffn.w2", &[f, d], Init::Zeros, true),
            b2: add("ffn.b2", &[d], Init::Zeros, false),
        })
    }

    /// `X₁ = X + Attn(LN₁(X))`, `out = X₁ + FFN(LN₂(X₁))`.
    ///
    /// Attention never reads padded keys, so unpadded output rows do not
    /// depend on padded input rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        shape: BlockShape,
        h: Var,
        pad_mask: &[bool],
    ) -> Result<Var> {
        let len = pad_mask.len();
        if tape.value(h).dims() != [len, shape.d] {
            return Err(Error::shape("block_forward", &[tape.value(h).dims(), &[len, shape.d]]));
        }
        let x = tape.layer_norm(h, p.var(self.ln1_gain), p.var(self.ln1_bias))?;
        let q = tape.matmul(x, p.var(self.wq))?;
        let q = tape.add(q, p.var(self.bq))?;
        let k = tape.matmul(x, p.var(self.wk))?;
        let v = tape.matmul(x, p.var(self.wv))?;
        let v = tape.add(v, p.var(self.bv))?;

        let keep: Vec<bool> = if shape.causal {
            (0..len)
                .flat_map(|i| (0..len).map(move |j| (i, j)))
                .map(|(i, j)| pad_mask[j] && (j <= i || !pad_mask[i]))
                .collect()
        } else {
            pad_mask.to_vec()
        };

        let dh = shape.d / shape.n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(shape.n_heads);
        for head in 0..shape.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, inv_sqrt);
            let weights = tape.masked_softmax(logits, &keep)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = tape.matmul(cat, p.var(self.wo))?;
        let o = tape.add(o, p.var(self.bo))?;
        let x1 = tape.add(h, o)?;

        let y = tape.layer_norm(x1, p.var(self.ln2_gain), p.var(self.ln2_bias))?;
        let y = tape.matmul(y, p.var(self.w1))?;
        let y = tape.add(y, p.var(self.b1))?;
        let y = tape.gelu(y);
        let y = tape.matmul(y, p.var(self.w2))?;
        let y = tape.add(y, p.var(self.b2))?;
        tape.add(x1, y)
    }

    pub fn output_projections(&self) -> [ParamId; 2] {
        [self.wo, self.w2]
    }
}

/// `K` blocks plus the depth gate `ℝᵈ → ℝᴷ`.
#[derive(Clone, Debug)]
pub struct RefinementStack {
    blocks: Vec<Block>,
    gate_w: ParamId,
    gate_b: ParamId,
    shape: BlockShape,
}

/// Tape handles produced by one refinement pass.
#[derive(Clone, Debug)]
pub struct RefinedVars {
    pub per_block: Vec<Var>,
    pub alpha: Var,
    pub refined: Var,
}

impl RefinementStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        k: usize,
        shape: BlockShape,
        std: f64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("refinement needs at least one block".into()));
        }
        let blocks = (0..k)
            .map(|i| Block::new(store, rng, &format!("refine.block{i}"), shape, std))
            .collect::<Result<Vec<_>>>()?;
        let gate_w = store.add(rng, "refine.gate.w", &[shape.d, k], Init::Normal(std), true);
        let gate_b = store.add(rng, "refine.gate.b", &[k], Init::Zeros, false);
        Ok(RefinementStack {
            blocks,
            gate_w,
            gate_b,
            shape,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn gate_params(&self) -> (ParamId, ParamId) {
        (self.gate_w, self.gate_b)
    }

    pub fn shape(&self) -> BlockShape {
        self.shape
    }

    /// `α = softmax(W_g · mean_{t real}(H⁽⁰⁾_t) + b_g)`, shape `1 × K`.
    pub fn depth_gate(&self, tape: &mut Tape, p: &Bound, h0: Var, pad_mask: &[bool]) -> Result<Var> {
        if !pad_mask.iter().any(|&m| m) {
            return Err(Error::Usage("depth gate: sequence is entirely padding".into()));
        }
        let ctx = tape.masked_mean_rows(h0, pad_mask)?;
        let logits = tape.matmul(ctx, p.var(self.gate_w))?;
        let logits = tape.add(logits, p.var(self.gate_b))?;
        Ok(tape.softmax(logits))
    }

    pub fn refine(&self, tape: &mut Tape, p: &Bound, h0: Var, pad_mask: &[bool]) -> Result<RefinedVars> {
        let alpha = self.depth_gate(tape, p, h0, pad_mask)?;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        let mut h = h0;
        for block in &self.blocks {
            h = block.forward(tape, p, self.shape, h, pad_mask)?;
            per_block.push(h);
        }
        let mut refined: Option<Var> = None;
        for (k, &hk) in per_block.iter().enumerate() {
            let ak = tape.slice_cols(alpha, k, 1)?;
            let term = tape.mul(hk, ak)?;
            refined = Some(match refined {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(RefinedVars {
            per_block,
            alpha,
            refined: refined.expect("at least one block"),
        })
    }
}

//! Cosine alignment between the scoring gradient `∇_{z_v} r` and the
//! chosen-minus-rejected view difference `z_v(x⁺) − z_v(x⁻)`.

use serde::{Deserialize, Serialize};

use crate::aggregation::View;
use crate::error::{Error, Result};
use crate::model::AdaJudge;
use crate::sequence::TokenSequence;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which representation the views are pooled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `H⁽⁰⁾`, scored through the same trained heads and router.
    Before,
    /// The representation the model actually pools (`H̃`, or `H⁽⁰⁾` when refinement is bypassed).
    After,
}

/// Where the reward gradient is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPoint {
    #[default]
    Chosen,
    Rejected,
    Midpoint,
}

impl std::str::FromStr for EvalPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chosen" => Ok(EvalPoint::Chosen),
            "rejected" => Ok(EvalPoint::Rejected),
            "midpoint" => Ok(EvalPoint::Midpoint),
            _ => Err(Error::Usage(format!(
                "unknown evaluation point `{s}`; expected one of chosen, rejected, midpoint"
            ))),
        }
    }
}

impl EvalPoint {
    pub fn name(self) -> &'static str {
        match self {
            EvalPoint::Chosen => "chosen",
            EvalPoint::Rejected => "rejected",
            EvalPoint::Midpoint => "midpoint",
        }
    }
}

/// `[z_L, z_M, z_A, z_P]` of `seq` at `stage`.
pub fn stage_views(model: &AdaJudge, seq: &TokenSequence, stage: Stage) -> Result<[Vec<f64>; 4]> {
    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape, false);
    let hidden = match stage {
        Stage::Before => tape.constant(seq.embeddings().clone()),
        Stage::After => model.trace(&mut tape, &p, seq)?.hidden,
    };
    let (views, _) = model.pool_views(&mut tape, &p, hidden, seq)?;
    Ok(views.map(|v| tape.value(v).data().to_vec()))
}

/// `∇_{z_v} r` for `v ∈ {L, M, A}` with all four views treated as free inputs.
pub fn view_gradients(model: &AdaJudge, views: &[Vec<f64>; 4]) -> Result<[Vec<f64>; 3]> {
    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape, false);
    let leaves = [0, 1, 2, 3].map(|i| tape.leaf(Tensor::row(&views[i]).with_grad()));
    let (_, _, reward) = model.score_views(&mut tape, &p, leaves)?;
    tape.backward(reward)?;
    let d = views[0].len();
    Ok([0, 1, 2].map(|i| tape.grad(leaves[i]).map_or_else(|| vec![0.0; d], <[f64]>::to_vec)))
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Per-view alignment for one pair; `None` marks an excluded view.
pub fn pair_alignment(
    model: &AdaJudge,
    chosen: &TokenSequence,
    rejected: &TokenSequence,
    stage: Stage,
    point: EvalPoint,
) -> Result<[Option<f64>; 3]> {
    let zc = stage_views(model, chosen, stage)?;
    let zr = stage_views(model, rejected, stage)?;
    let at = match point {
        EvalPoint::Chosen => zc.clone(),
        EvalPoint::Rejected => zr.clone(),
        EvalPoint::Midpoint => {
            [0, 1, 2, 3].map(|i| zc[i].iter().zip(&zr[i]).map(|(a, b)| 0.5 * (a + b)).collect())
        }
    };
    let grads = view_gradients(model, &at)?;
    Ok(View::ALL.map(|v| {
        let i = v.index();
        let diff: Vec<f64> = zc[i].iter().zip(&zr[i]).map(|(a, b)| a - b).collect();
        cosine(&grads[i], &diff)
    }))
}

/// Domain-level alignment at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAlignment {
    /// Mean cosine per view `[L, M, A]`; `None` if every pair was excluded.
    pub per_view: [Option<f64>; 3],
    /// `Σ_v π̄_v · alignment_v`, renormalized over views that have a value.
    pub gate_weighted: Option<f64>,
    pub counts: [usize; 3],
    pub excluded: [usize; 3],
}

/// Routing-weighted combination of per-view alignments. Views without a value
/// drop out and the remaining weights are renormalized, so the result stays a
/// convex combination.
pub fn gate_weighted(per_view: &[Option<f64>; 3], pi_bar: &[f64; 3]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, &w) in per_view.iter().zip(pi_bar) {
        if let Some(a) = a {
            num += w * a;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn summarize(cosines: &[[Option<f64>; 3]], pi_bar: &[f64; 3]) -> StageAlignment {
    let mut sums = [0.0; 3];
    let mut counts = [0; 3];
    let mut excluded = [0; 3];
    for row in cosines {
        for v in 0..3 {
            match row[v] {
                Some(c) => {
                    sums[v] += c;
                    counts[v] += 1;
                }
                None => excluded[v] += 1,
            }
        }
    }
    let per_view = [0, 1, 2].map(|v| (counts[v] > 0).then(|| sums[v] / counts[v] as f64));
    StageAlignment {
        gate_weighted: gate_weighted(&per_view, pi_bar),
        per_view,
        counts,
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_vectors_align() {
        assert!((cosine(&[1.0, 2.0], &[3.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 2.0], &[0.0, 0.0]), None);
    }

    #[test]
    fn gate_weighted_is_convex() {
        let pv = [Some(0.2), Some(-0.4), Some(0.9)];
        let g = gate_weighted(&pv, &[0.5, 0.3, 0.2]).unwrap();
        assert!((-0.4..=0.9).contains(&g));
        assert_eq!(gate_weighted(&[None, Some(0.3), None], &[0.5, 0.3, 0.2]), Some(0.3));
        assert_eq!(gate_weighted(&[None; 3], &[0.5, 0.3, 0.2]), None);
    }

    #[test]
    fn summarize_counts_exclusions() {
        let s = summarize(&[[Some(1.0), None, Some(0.0)], [Some(0.0), None, None]], &[1.0 / 3.0; 3]);
        assert_eq!(s.counts, [2, 0, 1]);
        assert_eq!(s.excluded, [0, 2, 1]);
        assert_eq!(s.per_view, [Some(0.5), None, Some(0.0)]);
        assert!((s.gate_weighted.unwrap() - 0.25).abs() < 1e-15);
    }
}

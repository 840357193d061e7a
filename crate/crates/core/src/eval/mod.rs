//! Pairwise accuracy, routing profiles, gradient alignment, ablations and reports.

mod accuracy;
mod alignment;
mod report;

pub use accuracy::{pair_credit, pair_rewards, pairwise_accuracy, AccuracyCell, AccuracyTable, FnScorer, Scorer};
pub use alignment::{
    cosine, gate_weighted, pair_alignment, stage_views, summarize, view_gradients, EvalPoint, Stage,
    StageAlignment,
};
pub use report::{emit_report, render_table, write_csv, ReportFiles};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AdaJudge, Variant};
use crate::training::{train, TrainConfig, TrainOutcome};

/// Environment variable holding the number of evaluation threads (default 1).
pub const EVAL_THREADS_ENV: &str = "ADAJUDGE_EVAL_THREADS";

pub fn eval_threads() -> usize {
    std::env::var(EVAL_THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Applies `f` to `0..n`, fanning out over [`eval_threads`] scoped threads.
/// Results come back in index order regardless of the thread count.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = eval_threads().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingCell {
    /// Mean `[π_L, π_M, π_A]` over chosen responses.
    pub pi_mean: [f64; 3],
    pub count: usize,
}

/// Per-domain mean of the given per-pair routing weights.
pub fn mean_routing<'a>(rows: impl IntoIterator<Item = (&'a str, [f64; 3])>) -> BTreeMap<String, RoutingCell> {
    let mut acc: BTreeMap<String, ([f64; 3], usize)> = BTreeMap::new();
    for (domain, pi) in rows {
        let e = acc.entry(domain.to_string()).or_insert(([0.0; 3], 0));
        for v in 0..3 {
            e.0[v] += pi[v];
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(d, (s, n))| {
            (
                d,
                RoutingCell {
                    pi_mean: s.map(|x| x / n as f64),
                    count: n,
                },
            )
        })
        .collect()
}

/// Mean routing weights over the chosen responses of each domain.
pub fn routing_profile(model: &AdaJudge, dataset: &Dataset) -> Result<BTreeMap<String, RoutingCell>> {
    let pis = par_map(dataset.pairs.len(), |i| {
        Ok(model.reward(lookup(dataset, dataset.pairs[i].chosen, &dataset.pairs[i].id)?)?.pi)
    })?;
    Ok(mean_routing(dataset.pairs.iter().map(|p| p.domain.as_str()).zip(pis)))
}

fn lookup<'a>(dataset: &'a Dataset, id: u64, pair: &str) -> Result<&'a crate::sequence::TokenSequence> {
    dataset
        .store
        .get(id)
        .ok_or_else(|| Error::data(format!("pair `{pair}` references missing sequence {id}")))
}

/// Per-domain alignment at `stage`, gate-weighted by the model's mean chosen routing.
pub fn alignment_score(
    model: &AdaJudge,
    dataset: &Dataset,
    stage: Stage,
    point: EvalPoint,
) -> Result<BTreeMap<String, StageAlignment>> {
    let routing = routing_profile(model, dataset)?;
    let cos = par_map(dataset.pairs.len(), |i| {
        let p = &dataset.pairs[i];
        pair_alignment(model, lookup(dataset, p.chosen, &p.id)?, lookup(dataset, p.rejected, &p.id)?, stage, point)
    })?;
    Ok(group_alignment(dataset, &cos, &routing))
}

fn group_alignment(
    dataset: &Dataset,
    cos: &[[Option<f64>; 3]],
    routing: &BTreeMap<String, RoutingCell>,
) -> BTreeMap<String, StageAlignment> {
    let mut by_domain: BTreeMap<&str, Vec<[Option<f64>; 3]>> = BTreeMap::new();
    for (p, c) in dataset.pairs.iter().zip(cos) {
        by_domain.entry(p.domain.as_str()).or_default().push(*c);
    }
    by_domain
        .into_iter()
        .map(|(d, rows)| (d.to_string(), summarize(&rows, &routing[d].pi_mean)))
        .collect()
}

/// Which optional analyses [`evaluate`] runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub routing: bool,
    pub alignment: bool,
    pub point: EvalPoint,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            routing: true,
            alignment: false,
            point: EvalPoint::Chosen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCell {
    pub before: StageAlignment,
    pub after: StageAlignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSection {
    pub point: EvalPoint,
    pub per_domain: BTreeMap<String, AlignmentCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Method label, e.g. the variant name.
    pub label: String,
    pub accuracy: AccuracyTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<BTreeMap<String, RoutingCell>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// One pair's raw evaluation values, for CSV export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub id: String,
    pub domain: String,
    pub r_chosen: f64,
    pub r_rejected: f64,
    pub pi_chosen: [f64; 3],
    pub align_before: Option<[Option<f64>; 3]>,
    pub align_after: Option<[Option<f64>; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Sorted by pair id.
    pub pairs: Vec<PairEval>,
}

/// Runs accuracy plus the analyses selected in `opts` in one pass over the pairs.
pub fn evaluate(model: &AdaJudge, dataset: &Dataset, label: &str, opts: &EvalOptions) -> Result<Evaluation> {
    let rows = par_map(dataset.pairs.len(), |i| {
        let p = &dataset.pairs[i];
        let chosen = lookup(dataset, p.chosen, &p.id)?;
        let rejected = lookup(dataset, p.rejected, &p.id)?;
        let oc = model.reward(chosen)?;
        let r_rejected = model.reward(rejected)?.reward;
        let (align_before, align_after) = if opts.alignment {
            (
                Some(pair_alignment(model, chosen, rejected, Stage::Before, opts.point)?),
                Some(pair_alignment(model, chosen, rejected, Stage::After, opts.point)?),
            )
        } else {
            (None, None)
        };
        Ok(PairEval {
            id: p.id.clone(),
            domain: p.domain.clone(),
            r_chosen: oc.reward,
            r_rejected,
            pi_chosen: oc.pi,
            align_before,
            align_after,
        })
    })?;

    let accuracy = AccuracyTable::from_credits(rows.iter().map(|r| (r.domain.as_str(), pair_credit(r.r_chosen, r.r_rejected))));
    let profile = mean_routing(rows.iter().map(|r| (r.domain.as_str(), r.pi_chosen)));
    let mut notes = Vec::new();
    let alignment = if opts.alignment {
        let before: Vec<_> = rows.iter().map(|r| r.align_before.unwrap()).collect();
        let after: Vec<_> = rows.iter().map(|r| r.align_after.unwrap()).collect();
        let b = group_alignment(dataset, &before, &profile);
        let a = group_alignment(dataset, &after, &profile);
        let mut per_domain = BTreeMap::new();
        for (domain, before) in b {
            let after = a[&domain].clone();
            if before.gate_weighted.is_none() && after.gate_weighted.is_none() {
                notes.push(format!("alignment: every pair in domain `{domain}` was excluded; omitted"));
                continue;
            }
            per_domain.insert(domain, AlignmentCell { before, after });
        }
        Some(AlignmentSection {
            point: opts.point,
            per_domain,
        })
    } else {
        None
    };
    let mut pairs = rows;
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Evaluation {
        report: EvalReport {
            label: label.to_string(),
            accuracy,
            routing: opts.routing.then_some(profile),
            alignment,
            notes,
        },
        pairs,
    })
}

/// Trains `mode` on `train_set` with `cfg` (only the variant is changed) and
/// evaluates it on `test_set`.
pub fn ablation_eval(
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mode: Variant,
    opts: &EvalOptions,
) -> Result<(Evaluation, TrainOutcome)> {
    let cfg = TrainConfig {
        variant: mode,
        ..cfg.clone()
    };
    let outcome = train(train_set, &cfg, None)?;
    let eval = evaluate(&outcome.model, test_set, mode.name(), opts)?;
    Ok((eval, outcome))
}

/// Parses a comma-separated list of ablation modes.
pub fn parse_modes(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Usage("no ablation modes given".into()))
            } else {
                Ok(v)
            }
        })
}

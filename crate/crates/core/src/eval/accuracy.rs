use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::par_map;
use crate::model::AdaJudge;
use crate::sequence::TokenSequence;

/// Anything that maps a sequence to a scalar reward.
pub trait Scorer: Sync {
    fn score(&self, seq: &TokenSequence) -> Result<f64>;
}

impl Scorer for AdaJudge {
    fn score(&self, seq: &TokenSequence) -> Result<f64> {
        Ok(self.reward(seq)?.reward)
    }
}

/// Adapts a closure into a [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(&TokenSequence) -> f64 + Sync> Scorer for FnScorer<F> {
    fn score(&self, seq: &TokenSequence) -> Result<f64> {
        Ok((self.0)(seq))
    }
}

/// Credit for one pair: 1 if chosen wins, 0.5 on an exact tie, 0 otherwise.
pub fn pair_credit(r_chosen: f64, r_rejected: f64) -> f64 {
    if r_chosen > r_rejected {
        1.0
    } else if r_chosen == r_rejected {
        0.5
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub overall: AccuracyCell,
    pub per_domain: BTreeMap<String, AccuracyCell>,
}

impl AccuracyTable {
    /// Aggregates `(domain, credit)` records.
    pub fn from_credits<'a>(credits: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let (mut total, mut n) = (0.0, 0);
        for (domain, c) in credits {
            let e = sums.entry(domain.to_string()).or_default();
            e.0 += c;
            e.1 += 1;
            total += c;
            n += 1;
        }
        let cell = |s: f64, n: usize| AccuracyCell {
            accuracy: if n == 0 { 0.0 } else { s / n as f64 },
            count: n,
        };
        AccuracyTable {
            overall: cell(total, n),
            per_domain: sums.into_iter().map(|(d, (s, n))| (d, cell(s, n))).collect(),
        }
    }

    /// Unweighted mean of the per-domain accuracies.
    pub fn macro_average(&self) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        self.per_domain.values().map(|c| c.accuracy).sum::<f64>() / self.per_domain.len() as f64
    }
}

/// Rewards of `(chosen, rejected)` for every pair, in dataset order.
pub fn pair_rewards<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset) -> Result<Vec<(f64, f64)>> {
    par_map(dataset.pairs.len(), |i| {
        let pair = &dataset.pairs[i];
        let get = |id| {
            dataset
                .store
                .get(id)
                .ok_or_else(|| Error::data(format!("pair `{}` references missing sequence {id}", pair.id)))
        };
        Ok((scorer.score(get(pair.chosen)?)?, scorer.score(get(pair.rejected)?)?))
    })
}

/// Fraction of pairs ranked correctly, per domain and overall.
pub fn pairwise_accuracy<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset) -> Result<AccuracyTable> {
    let rewards = pair_rewards(scorer, dataset)?;
    Ok(AccuracyTable::from_credits(
        dataset
            .pairs
            .iter()
            .zip(&rewards)
            .map(|(p, &(c, r))| (p.domain.as_str(), pair_credit(c, r))),
    ))
}

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batch_for_step, Dataset, PreferencePair};
use crate::error::{Error, Result};
use crate::model::{AdaJudge, ModelConfig, Variant};
use crate::objective::{pair_loss_var, LossConfig, PairLossBreakdown};
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::training::{adamw_step, clip_global_norm, lr_at, save_checkpoint, AdamWParams, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: f64,
    pub batch_pairs: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub variant: Variant,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            warmup_ratio: 0.03,
            max_grad_norm: 2.0,
            batch_pairs: 8,
            total_steps: 1500,
            checkpoint_every: 25,
            seed: 0,
            variant: Variant::Full,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!("warmup_ratio must lie in (0, 1), got {}", self.warmup_ratio)));
        }
        if self.batch_pairs == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_pairs and checkpoint_every must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("lr must be >= 0 and max_grad_norm > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        self.model.validate()?;
        self.loss.validate()
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// One line of the JSON-lines metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub mean_p: f64,
    pub mean_entropy: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub alpha_mean: Vec<f64>,
    pub pi_mean: Vec<f64>,
}

pub struct TrainOutcome {
    pub model: AdaJudge,
    pub state: OptimizerState,
    pub log: Vec<StepMetrics>,
}

/// Values recorded while evaluating one pair's loss.
pub struct PairRecord {
    pub loss: Var,
    pub breakdown: PairLossBreakdown,
    pub alpha: [Option<Vec<f64>>; 2],
    pub pi: [[f64; 3]; 2],
}

/// Records the loss of one preference pair on `tape`.
pub fn record_pair_loss(
    model: &AdaJudge,
    tape: &mut Tape,
    params: &Bound,
    dataset: &Dataset,
    pair: &PreferencePair,
    loss_cfg: &LossConfig,
) -> Result<PairRecord> {
    let seq = |id: u64| {
        dataset
            .store
            .get(id)
            .ok_or_else(|| Error::data(format!("pair `{}` references missing sequence {id}", pair.id)))
    };
    let chosen = model.trace(tape, params, seq(pair.chosen)?)?;
    let rejected = model.trace(tape, params, seq(pair.rejected)?)?;
    let (loss, breakdown) =
        pair_loss_var(tape, &chosen, &rejected, pair.magnitude, loss_cfg, model.variant().routes())?;
    let alpha = [&chosen, &rejected].map(|t| t.refinement.as_ref().map(|r| tape.value(r.alpha).data().to_vec()));
    let pi = [&chosen, &rejected].map(|t| {
        let d = tape.value(t.pi).data();
        [d[0], d[1], d[2]]
    });
    Ok(PairRecord {
        loss,
        breakdown,
        alpha,
        pi,
    })
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.adjc"))
}

/// Most recent `ckpt-*.adjc` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".adjc"))
        })
        .max()
}

/// Trains a freshly initialized model.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = AdaJudge::new(cfg.model.clone(), cfg.variant, cfg.seed)?;
    let state = OptimizerState::new(model.store());
    train_from(dataset, cfg, model, state, out_dir)
}

/// Continues training from `state.step` up to `cfg.total_steps`.
///
/// With `out_dir`, metrics are appended to `metrics.jsonl` and checkpoints are
/// written every `checkpoint_every` steps and after the last step. A
/// non-finite loss aborts before the update, leaving earlier checkpoints intact.
pub fn train_from(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut model: AdaJudge,
    mut state: OptimizerState,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.pairs.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            )
        }
        None => None,
    };

    let hp = cfg.adamw();
    let k = cfg.model.k_blocks;
    let mut log = Vec::new();
    while state.step < cfg.total_steps {
        let step = state.step;
        let batch = batch_for_step(dataset.pairs.len(), cfg.batch_pairs, cfg.seed, step);
        let scale = 1.0 / batch.len() as f64;
        model.store_mut().zero_grad();

        let mut loss_sum = 0.0;
        let mut p_sum = 0.0;
        let mut ent_sum = 0.0;
        let mut alpha_sum = vec![0.0; k];
        let mut pi_sum = [0.0; 3];
        for &i in &batch {
            let mut tape = Tape::new();
            let params = model.store().bind(&mut tape, true);
            let rec = record_pair_loss(&model, &mut tape, &params, dataset, &dataset.pairs[i], &cfg.loss)?;
            let total = rec.breakdown.total;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {total} for pair `{}` at step {}",
                    dataset.pairs[i].id,
                    step + 1
                )));
            }
            tape.backward(rec.loss)?;
            model.store_mut().accumulate(&tape, &params, scale);

            loss_sum += total;
            p_sum += rec.breakdown.p;
            ent_sum += rec.breakdown.entropy_chosen + rec.breakdown.entropy_rejected;
            for a in rec.alpha.iter().flatten() {
                alpha_sum.iter_mut().zip(a).for_each(|(s, x)| *s += x);
            }
            for pi in &rec.pi {
                pi_sum.iter_mut().zip(pi).for_each(|(s, x)| *s += x);
            }
        }

        let (grad_norm, _) = clip_global_norm(model.store_mut(), cfg.max_grad_norm)?;
        let lr = lr_at(step + 1, cfg.lr, cfg.warmup_ratio, cfg.total_steps);
        adamw_step(model.store_mut(), &mut state, lr, &hp);

        let n = batch.len() as f64;
        let responses = 2.0 * n;
        let alpha_mean = if model.variant().refines() {
            alpha_sum.iter().map(|s| s / responses).collect()
        } else {
            Vec::new()
        };
        let m = StepMetrics {
            step: state.step,
            loss: loss_sum / n,
            mean_p: p_sum / n,
            mean_entropy: ent_sum / responses,
            lr,
            grad_norm,
            alpha_mean,
            pi_mean: pi_sum.iter().map(|s| s / responses).collect(),
        };
        if let Some(f) = metrics_file.as_mut() {
            let mut line = serde_json::to_vec(&m).expect("serializable");
            line.push(b'\n');
            let path = out_dir.unwrap().join("metrics.jsonl");
            f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        }
        log.push(m);

        if let Some(dir) = out_dir {
            if state.step % cfg.checkpoint_every == 0 || state.step == cfg.total_steps {
                save_checkpoint(&model, &state, checkpoint_path(dir, state.step))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = checkpoint_path(dir, state.step);
        if !path.exists() {
            save_checkpoint(&model, &state, path)?;
        }
    }
    Ok(TrainOutcome { model, state, log })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adajudge_core::data::{
    benchmark_signal, generate_suite, write_pairs, Regime, SyntheticSpec, BENCHMARK_DOMAIN_SIGNAL,
};
use adajudge_core::eval::{self, emit_report, render_table, EvalOptions, EvalPoint, Evaluation};
use adajudge_core::gradcheck::{check_pair_loss, random_pair_problem, GradCheckConfig};
use adajudge_core::training::{latest_checkpoint, load_checkpoint, train_from, OptimizerState};
use adajudge_core::{AdaJudge, Dataset, Error};
use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use crate::config::{DataSource, RunConfig, PAIRS_FILE, PROVENANCE_FILE, RESOLVED_CONFIG_FILE, STORE_FILE};
use crate::Common;

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    match parts.as_slice() {
        [a] => num(a).map(|a| (a, a)),
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(format!("expected `N` or `MIN,MAX`, got `{s}`")),
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// One regime or a comma-separated list (terminal, distributed, sparse).
    #[arg(long)]
    regime: String,
    /// Pairs per regime.
    #[arg(long, default_value_t = 200)]
    n_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Prompt length range `MIN,MAX` (inclusive).
    #[arg(long, default_value = "4,6", value_parser = parse_range)]
    prompt_len: (usize, usize),
    /// Response length range `MIN,MAX` (inclusive).
    #[arg(long, default_value = "8,12", value_parser = parse_range)]
    response_len: (usize, usize),
    /// Signal strength along the quality direction [default: 1, or the
    /// per-regime benchmark value with `--preset benchmark`].
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Strength of the per-regime offset added to every token [default: 0,
    /// or the benchmark value with `--preset benchmark`].
    #[arg(long)]
    domain_signal: Option<f64>,
    /// `benchmark` selects the signal strengths of the three-regime suite.
    #[arg(long, value_parser = ["benchmark"])]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Provenance<'a> {
    generator: String,
    specs: &'a [SyntheticSpec],
}

pub fn gen(a: GenArgs) -> Result<ExitCode> {
    let regimes = a
        .regime
        .split(',')
        .map(|s| s.trim().parse::<Regime>())
        .collect::<adajudge_core::Result<Vec<_>>>()?;
    let specs: Vec<SyntheticSpec> = regimes
        .iter()
        .map(|&r| {
            let bench = a.preset.is_some();
            SyntheticSpec {
                prompt_len: a.prompt_len,
                response_len: a.response_len,
                signal_strength: a.signal.unwrap_or(if bench { benchmark_signal(r) } else { 1.0 }),
                noise_std: a.noise,
                domain_signal: a.domain_signal.unwrap_or(if bench { BENCHMARK_DOMAIN_SIGNAL } else { 0.0 }),
                ..SyntheticSpec::new(r, a.d, a.n_pairs, a.seed)
            }
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    let (store, pairs) = generate_suite(&specs)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    store.save(a.out.join(STORE_FILE))?;
    write_pairs(a.out.join(PAIRS_FILE), &pairs)?;
    let stamp = Provenance {
        generator: format!("adajudge {}", env!("CARGO_PKG_VERSION")),
        specs: &specs,
    };
    std::fs::write(a.out.join(PROVENANCE_FILE), serde_json::to_string_pretty(&stamp)?)?;
    println!("wrote {} pairs ({} sequences) to {}", pairs.len(), store.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Config file plus flag overrides, validated before any compute.
fn resolve(common: &Common, variant: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(d) = &common.data {
        cfg.data = Some(DataSource::Dir(d.clone()));
    }
    if let Some(t) = &common.test {
        cfg.test_data = Some(DataSource::Dir(t.clone()));
    }
    if let Some(s) = common.steps {
        cfg.train.total_steps = s;
    }
    if let Some(lr) = common.lr {
        cfg.train.lr = lr;
    }
    if let Some(k) = common.k {
        cfg.train.model.k_blocks = k;
    }
    if let Some(v) = variant {
        cfg.train.variant = v.parse()?;
    }
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    cfg.data()?;
    if cfg.out.is_none() {
        return Err(Error::Config("no output directory given (use --out or the `out` config key)".into()).into());
    }
    Ok(cfg)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// full, last_only, mean_only, attn_only or no_refine.
    #[arg(long)]
    variant: Option<String>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve(&a.common, a.variant.as_deref())?;
    if let Some(r) = &a.resume {
        if !r.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", r.display())).into());
        }
    }
    let out = cfg.out.clone().expect("resolved");
    let (train_set, _) = cfg.split()?;
    let template = AdaJudge::new(cfg.train.model.clone(), cfg.train.variant, cfg.train.seed)?;
    let (model, state) = match &a.resume {
        Some(path) => load_checkpoint(path, &template)?,
        None => {
            let state = OptimizerState::new(template.store());
            (template, state)
        }
    };
    cfg.save(&out)?;
    let outcome = train_from(&train_set, &cfg.train, model, state, Some(&out))?;
    match outcome.log.last() {
        Some(m) => println!(
            "trained {} to step {}: loss {:.6}, mean p {:.4}",
            cfg.train.variant, m.step, m.loss, m.mean_p
        ),
        None => println!("nothing to do: already at step {}", outcome.state.step),
    }
    Ok(ExitCode::SUCCESS)
}

/// A trained model restored from a run directory.
struct Run {
    cfg: RunConfig,
    model: AdaJudge,
}

fn load_run(dir: &Path, checkpoint: Option<&Path>) -> Result<Run> {
    let cfg = RunConfig::from_file(&dir.join(RESOLVED_CONFIG_FILE))?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(dir)
            .ok_or_else(|| Error::Config(format!("no checkpoint found in {}", dir.display())))?,
    };
    let template = AdaJudge::new(cfg.train.model.clone(), cfg.train.variant, cfg.train.seed)?;
    let (model, _) = load_checkpoint(&ckpt, &template)?;
    Ok(Run { cfg, model })
}

fn eval_set(run: &Run, data: Option<&Path>) -> Result<Dataset> {
    Ok(match data {
        Some(d) => {
            let src = DataSource::Dir(d.to_path_buf());
            src.validate()?;
            src.load(run.cfg.train.model.d)?
        }
        None => run.cfg.split()?.1,
    })
}

fn finish(eval: &Evaluation, out: &Path, stem: &str, csv: bool) -> Result<()> {
    let files = emit_report(&eval.report, csv.then_some(eval.pairs.as_slice()), out, stem)?;
    print!("{}", std::fs::read_to_string(&files.text)?);
    println!("report: {}", files.json.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint to evaluate (default: the latest in the run directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation dataset directory (default: the run's held-out pairs).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory (default: `<run>/eval`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-pair records as CSV.
    #[arg(long)]
    csv: bool,
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let run = load_run(&a.run, a.checkpoint.as_deref())?;
    let data = eval_set(&run, a.data.as_deref())?;
    let opts = EvalOptions {
        routing: true,
        alignment: false,
        point: EvalPoint::Chosen,
    };
    let ev = eval::evaluate(&run.model, &data, run.model.variant().name(), &opts)?;
    finish(&ev, &a.out.unwrap_or_else(|| a.run.join("eval")), "eval", a.csv)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated analyses: routing, alignment.
    #[arg(long, default_value = "routing,alignment")]
    what: String,
    /// Where the reward gradient is evaluated: chosen, rejected or midpoint.
    #[arg(long, default_value = "chosen")]
    point: String,
    /// Report directory (default: `<run>/analysis`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: bool,
}

pub fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let mut opts = EvalOptions {
        routing: false,
        alignment: false,
        point: a.point.parse()?,
    };
    for item in a.what.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "routing" => opts.routing = true,
            "alignment" => opts.alignment = true,
            other => {
                return Err(Error::Usage(format!(
                    "unknown analysis `{other}`; expected routing and/or alignment"
                ))
                .into())
            }
        }
    }
    let run = load_run(&a.run, a.checkpoint.as_deref())?;
    let data = eval_set(&run, a.data.as_deref())?;
    let ev = eval::evaluate(&run.model, &data, run.model.variant().name(), &opts)?;
    finish(&ev, &a.out.unwrap_or_else(|| a.run.join("analysis")), "analysis", a.csv)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated variants to train and compare.
    #[arg(long, default_value = "last_only,mean_only,attn_only,full,no_refine")]
    modes: String,
    /// Include the alignment analysis in every report.
    #[arg(long)]
    alignment: bool,
    #[arg(long)]
    csv: bool,
}

pub fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let modes = eval::parse_modes(&a.modes)?;
    let cfg = resolve(&a.common, None)?;
    let out = cfg.out.clone().expect("resolved");
    let (train_set, test_set) = cfg.split()?;
    let opts = EvalOptions {
        routing: true,
        alignment: a.alignment,
        point: EvalPoint::Chosen,
    };
    let mut reports = Vec::new();
    for mode in modes {
        let mut run_cfg = cfg.clone();
        run_cfg.train.variant = mode;
        let dir = out.join(mode.name());
        run_cfg.out = Some(dir.clone());
        run_cfg.save(&dir)?;
        let template = AdaJudge::new(run_cfg.train.model.clone(), mode, run_cfg.train.seed)?;
        let state = OptimizerState::new(template.store());
        let outcome = train_from(&train_set, &run_cfg.train, template, state, Some(&dir))?;
        let ev = eval::evaluate(&outcome.model, &test_set, mode.name(), &opts)?;
        emit_report(&ev.report, a.csv.then_some(ev.pairs.as_slice()), &out, mode.name())?;
        eprintln!("{}: macro accuracy {:.4}", mode, ev.report.accuracy.macro_average());
        reports.push(ev.report);
    }
    let table = render_table(&reports);
    std::fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Run configuration; only its loss settings are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Tokens per sequence.
    #[arg(long, default_value_t = 12)]
    len: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Perturbs the analytic gradient of this parameter (test hook).
    #[arg(long, hide = true)]
    corrupt_param: Option<String>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let (model, chosen, rejected) = random_pair_problem(a.d, a.len, a.k, a.seed)?;
    let gc = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        corrupt_param: a.corrupt_param.clone(),
    };
    let report = check_pair_loss(&model, &chosen, &rejected, 1, &cfg.train.loss, &gc)?;
    if let Some(path) = &a.out {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    for p in &report.params {
        println!("{:<28} {:>12.3e}  (below noise: {})", p.name, p.max_rel_error, p.below_noise);
    }
    for w in &report.warnings {
        println!(
            "warning: non-differentiable point in {}[{}]: left {:e}, right {:e}",
            w.name, w.index, w.left, w.right
        );
    }
    println!("max relative error {:.3e} (tolerance {:e})", report.max_rel_error, report.tolerance);
    if report.passed() {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        let names: Vec<&str> = report.failing().map(|p| p.name.as_str()).collect();
        eprintln!("FAIL: gradient mismatch in {}", names.join(", "));
        Ok(ExitCode::from(2))
    }
}

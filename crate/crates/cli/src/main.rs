use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kediff::autodiff::{finite_difference_check, GradCheckConfig};
use kediff::conditioning::Vocabulary;
use kediff::config::TrainConfig;
use kediff::eval_synth::{
    expert_ablation, generate, generate_dataset, load_dataset, pareto_csv, pareto_sweep, prompt_condition,
    save_dataset, to_train_items, EvalSettings, SceneSpec,
};
use kediff::mode::init_bank;
use kediff::rng::stream;
use kediff::sampler::{capture_attention, encode_csv, encode_pgm, encode_ppm, spatial_entropy, SampleOptions, SampleSidecar};
use kediff::schedule::NoiseSchedule;
use kediff::trainer::{train, training_graph, Checkpoint, LossSettings, TrainItem, TrainOptions};
use kediff::{ErrorClass, Tensor};
use serde_json::json;
use sha2::{Digest, Sha256};

type F = f64;

const DEFAULT_PROMPT: &str = "red square 0, blue circle 3";

#[derive(Parser)]
#[command(name = "kediff", version, about = "Knowledge-enhanced diffusion with denoising experts on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes corpus.
    GenData(Common),
    /// Train a model, optionally on a corpus written by gen-data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train the single-network baseline objective.
        #[arg(long)]
        baseline: bool,
    },
    /// Sample one image from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Scene to draw, e.g. "red square 0, blue circle 3".
        #[arg(long, default_value = DEFAULT_PROMPT)]
        prompt: String,
    },
    /// Toy-FID and binding accuracy of a checkpoint at the configured scale.
    Eval(Common),
    /// Guidance-scale sweep of a checkpoint, or without one the expert-count
    /// ablation.
    Sweep(Common),
    /// Per-step cross-attention maps and their spatial entropy.
    InspectAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = DEFAULT_PROMPT)]
        prompt: String,
    },
    /// Finite-difference check of the training objective on a toy model.
    CheckGrad(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated guidance scales.
    #[arg(long)]
    scales: Option<String>,
    /// Training steps for `train`, sampling steps elsewhere.
    #[arg(long)]
    steps: Option<usize>,
    /// Items for `gen-data`, evaluation images for `eval` and `sweep`.
    #[arg(long)]
    count: Option<usize>,
}

/// An error carrying its exit class.
#[derive(Debug)]
struct Classified(ErrorClass, String);

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Classified {}

fn fail(class: ErrorClass, msg: impl Into<String>) -> anyhow::Error {
    Classified(class, msg.into()).into()
}

fn class_of(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Classified>() {
            return c.0;
        }
        if let Some(e) = cause.downcast_ref::<kediff::Error>() {
            return e.class();
        }
    }
    ErrorClass::Data
}

fn config_error(e: kediff::Error) -> anyhow::Error {
    fail(ErrorClass::Config, e.to_string())
}

/// Base config (a checkpoint's own when given), then the config file, the
/// overrides and the seed flag, in that order.
fn resolve(common: &Common, base: Option<&TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = base.cloned().unwrap_or_default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| fail(ErrorClass::Config, format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(config_error)?;
    }
    for kv in &common.set {
        cfg.apply_override(kv).map_err(config_error)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn open_checkpoint(path: &Option<PathBuf>) -> Result<(Checkpoint<F>, String)> {
    let path = path.as_ref().ok_or_else(|| fail(ErrorClass::Config, "--checkpoint is required"))?;
    let bytes = fs::read(path)
        .map_err(|e| fail(ErrorClass::Checkpoint, format!("cannot read checkpoint {}: {e}", path.display())))?;
    let digest = format!("{:x}", Sha256::digest(&bytes));
    let ck = kediff::trainer::decode_checkpoint::<F>(&bytes)?;
    Ok((ck, digest))
}

fn vocab_of(ck: &Checkpoint<F>) -> Result<Vocabulary> {
    Ok(Vocabulary::parse(&ck.header.vocab.join("\n"))?)
}

/// A fresh `<command>-<timestamp>-<seed>` directory. Existing directories are
/// never reused.
fn run_dir(out: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    for k in 0.. {
        let name = if k == 0 { format!("{command}-{stamp}-{seed}") } else { format!("{command}-{stamp}-{seed}.{k}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!("the directory search only ends by returning")
}

fn snapshot(dir: &Path, cfg: &TrainConfig, command: &str, checkpoint_sha256: Option<&str>) -> Result<()> {
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let meta = json!({"command": command, "seed": cfg.seed, "checkpoint_sha256": checkpoint_sha256});
    fs::write(dir.join("run.json"), format!("{meta}\n"))?;
    Ok(())
}

fn parse_scales(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| fail(ErrorClass::Config, format!("bad guidance scale `{s}`"))))
        .collect()
}

fn scene(prompt: &str) -> Result<SceneSpec> {
    SceneSpec::parse_prompt(prompt).map_err(|e| fail(ErrorClass::Config, e.to_string()))
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = resolve(common, None)?;
    let count = common.count.unwrap_or(cfg.data.count);
    let data = generate_dataset::<F>(&cfg.data, count, cfg.seed)?;
    let dir = run_dir(&common.out, "gen-data", cfg.seed)?;
    snapshot(&dir, &cfg, "gen-data", None)?;
    save_dataset(&dir.join("dataset"), &data)?;
    println!("{}", dir.display());
    Ok(())
}

fn train_cmd(common: &Common, data: &Option<PathBuf>, baseline: bool) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    if let Some(steps) = common.steps {
        cfg.train.steps = steps;
        cfg.train.warm_steps = cfg.train.warm_steps.min(steps);
        cfg.validate().map_err(config_error)?;
    }
    if baseline && cfg.experts != 1 {
        return Err(fail(ErrorClass::Config, "the baseline objective needs mode.n = 1"));
    }
    let pairs = match data {
        Some(dir) => load_dataset::<F>(dir)?,
        None => generate_dataset::<F>(&cfg.data, cfg.data.count, cfg.seed)?,
    };
    let items = to_train_items(&pairs)?;
    let vocab = Vocabulary::default();
    let dir = run_dir(&common.out, "train", cfg.seed)?;
    snapshot(&dir, &cfg, "train", None)?;
    fs::write(dir.join("vocab.txt"), vocab.to_text())?;
    let out = train(&cfg, &items, &vocab, TrainOptions { out_dir: Some(dir.clone()), plain: baseline, ..Default::default() })?;
    let last = out.records.last().map_or(f64::NAN, |r| r.loss);
    println!("{}", dir.join("final.ckpt").display());
    log::info!("trained {} steps, final loss {last:.6}", out.step);
    Ok(())
}

fn sample_cmd(common: &Common, prompt: &str) -> Result<()> {
    let (ck, digest) = open_checkpoint(&common.checkpoint)?;
    let mut cfg = resolve(common, ck.header.config.as_ref())?;
    if let Some(steps) = common.steps {
        cfg.sample.steps = steps;
        cfg.validate().map_err(config_error)?;
    }
    let vocab = vocab_of(&ck)?;
    let spec = scene(prompt)?;
    let cond = prompt_condition(&spec, &vocab, cfg.knowledge.policy.insert_tokens)?;
    let schedule = NoiseSchedule::<F>::from_spec(&ck.header.schedule)?;
    let guidance = match &common.scales {
        Some(s) => parse_scales(s)?[0],
        None => cfg.sample.guidance,
    };
    let traj = generate(&ck.bank, &schedule, &cond, guidance, cfg.sample.sampler, cfg.sample.steps, cfg.seed, SampleOptions::default())?;
    let dir = run_dir(&common.out, "sample", cfg.seed)?;
    snapshot(&dir, &cfg, "sample", Some(&digest))?;
    fs::write(dir.join("sample.ppm"), encode_ppm(&traj.image)?)?;
    let sidecar = SampleSidecar {
        seed: cfg.seed,
        guidance,
        steps: traj.steps.clone(),
        sampler: format!("{:?}", cfg.sample.sampler).to_lowercase(),
        prompt: spec.to_prompt(),
        checkpoint_sha256: digest,
    };
    fs::write(dir.join("sample.json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    println!("{}", dir.join("sample.ppm").display());
    Ok(())
}

fn eval_settings(common: &Common, cfg: &TrainConfig) -> EvalSettings {
    let mut s = EvalSettings::from_config(cfg);
    if let Some(n) = common.count {
        s.count = n;
    }
    if let Some(n) = common.steps {
        s.sample_steps = n;
    }
    s
}

fn eval_cmd(common: &Common) -> Result<()> {
    let (ck, digest) = open_checkpoint(&common.checkpoint)?;
    let cfg = resolve(common, ck.header.config.as_ref())?;
    let settings = eval_settings(common, &cfg);
    let vocab = vocab_of(&ck)?;
    let schedule = NoiseSchedule::<F>::from_spec(&ck.header.schedule)?;
    let p = pareto_sweep(&ck.bank, &schedule, &vocab, &[cfg.sample.guidance], &settings, cfg.seed)?[0];
    let dir = run_dir(&common.out, "eval", cfg.seed)?;
    snapshot(&dir, &cfg, "eval", Some(&digest))?;
    let line = json!({"scale": p.scale, "toy_fid": p.toy_fid, "binding_accuracy": p.binding_accuracy, "count": settings.count});
    fs::write(dir.join("metrics.jsonl"), format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn sweep_cmd(common: &Common) -> Result<()> {
    if common.checkpoint.is_none() {
        return ablation_cmd(common);
    }
    let (ck, digest) = open_checkpoint(&common.checkpoint)?;
    let cfg = resolve(common, ck.header.config.as_ref())?;
    let scales = match &common.scales {
        Some(s) => parse_scales(s)?,
        None => cfg.sweep.scales.clone(),
    };
    let settings = eval_settings(common, &cfg);
    let vocab = vocab_of(&ck)?;
    let schedule = NoiseSchedule::<F>::from_spec(&ck.header.schedule)?;
    let points = pareto_sweep(&ck.bank, &schedule, &vocab, &scales, &settings, cfg.seed)?;
    let dir = run_dir(&common.out, "sweep", cfg.seed)?;
    snapshot(&dir, &cfg, "sweep", Some(&digest))?;
    fs::write(dir.join("pareto.csv"), pareto_csv(&points))?;
    let lines: String = points.iter().map(|p| serde_json::to_string(p).map(|s| s + "\n")).collect::<Result<_, _>>()?;
    fs::write(dir.join("pareto.jsonl"), lines)?;
    print!("{}", pareto_csv(&points));
    Ok(())
}

fn ablation_cmd(common: &Common) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    if let Some(steps) = common.steps {
        cfg.train.steps = steps;
        cfg.train.warm_steps = cfg.train.warm_steps.min(steps);
    }
    if let Some(n) = common.count {
        cfg.eval.count = n;
    }
    cfg.validate().map_err(config_error)?;
    let items: Vec<TrainItem<F>> = to_train_items(&generate_dataset::<F>(&cfg.data, cfg.data.count, cfg.seed)?)?;
    let vocab = Vocabulary::default();
    let dir = run_dir(&common.out, "sweep", cfg.seed)?;
    snapshot(&dir, &cfg, "sweep", None)?;
    let rows = expert_ablation(&cfg, &items, &vocab, &cfg.sweep.experts, &cfg.sweep.seeds)?;
    let mut csv = String::from("seed,experts,toy_fid,binding_accuracy,final_loss\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.seed, r.experts, r.toy_fid, r.binding_accuracy, r.final_loss));
    }
    fs::write(dir.join("experts.csv"), &csv)?;
    let monotone: Vec<bool> = cfg
        .sweep
        .seeds
        .iter()
        .map(|&s| {
            let fids: Vec<f64> = rows.iter().filter(|r| r.seed == s).map(|r| r.toy_fid).collect();
            fids.windows(2).all(|w| w[1] <= w[0])
        })
        .collect();
    let summary = json!({
        "experts": cfg.sweep.experts,
        "seeds": cfg.sweep.seeds,
        "non_increasing_per_seed": monotone,
        "rows": rows,
    });
    fs::write(dir.join("experts.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print!("{csv}");
    Ok(())
}

fn inspect_cmd(common: &Common, prompt: &str) -> Result<()> {
    if common.steps == Some(0) {
        return Err(fail(ErrorClass::Config, "--steps must be at least 1"));
    }
    let (ck, digest) = open_checkpoint(&common.checkpoint)?;
    let mut cfg = resolve(common, ck.header.config.as_ref())?;
    if let Some(steps) = common.steps {
        cfg.sample.steps = steps;
        cfg.validate().map_err(config_error)?;
    }
    let vocab = vocab_of(&ck)?;
    let spec = scene(prompt)?;
    let cond = prompt_condition(&spec, &vocab, cfg.knowledge.policy.insert_tokens)?;
    let schedule = NoiseSchedule::<F>::from_spec(&ck.header.schedule)?;
    let opts = SampleOptions { capture: true, keep_states: false };
    let traj = generate(&ck.bank, &schedule, &cond, cfg.sample.guidance, cfg.sample.sampler, cfg.sample.steps, cfg.seed, opts)?;
    let maps = capture_attention(&traj, ck.header.bank.denoiser.grid())?;

    let dir = run_dir(&common.out, "inspect-attn", cfg.seed)?;
    snapshot(&dir, &cfg, "inspect-attn", Some(&digest))?;
    let maps_dir = dir.join("maps");
    fs::create_dir(&maps_dir)?;
    let mut series = Vec::with_capacity(maps.len());
    for m in &maps {
        fs::write(maps_dir.join(format!("t{:04}.csv", m.t)), encode_csv(&m.grid)?)?;
        fs::write(maps_dir.join(format!("t{:04}.pgm", m.t)), encode_pgm(&m.grid, 8)?)?;
        series.push(json!({"t": m.t, "entropy": spatial_entropy(&m.grid)}));
    }
    let k = (maps.len() / 10).max(1);
    let mean = |ms: &[kediff::sampler::AttentionMap<F>]| ms.iter().map(|m| spatial_entropy(&m.grid)).sum::<f64>() / ms.len() as f64;
    let early = mean(&maps[..k]);
    let late = mean(&maps[maps.len() - k..]);
    let summary = json!({
        "prompt": spec.to_prompt(),
        "steps": series,
        "mean_entropy_first_tenth": early,
        "mean_entropy_last_tenth": late,
        "concentrates_near_t1": late < early,
    });
    fs::write(dir.join("entropy.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(dir.join("sample.ppm"), encode_ppm(&traj.image)?)?;
    println!("{}", dir.display());
    Ok(())
}

fn check_grad_cmd(common: &Common) -> Result<()> {
    let mut cfg = resolve(common, None)?;
    for kv in [
        "schedule.T=50",
        "data.height=8",
        "data.width=8",
        "model.patch=4",
        "model.d=8",
        "model.d_text=8",
        "model.layers=1",
        "model.text_layers=1",
        "model.ffn_mult=1",
        "mode.n=2",
        "knowledge.p_know=1",
    ] {
        cfg.apply_override(kv).map_err(config_error)?;
    }
    for kv in &common.set {
        cfg.apply_override(kv).map_err(config_error)?;
    }
    cfg.validate().map_err(config_error)?;
    let items = to_train_items(&generate_dataset::<f64>(&cfg.data, 4, cfg.seed)?)?;
    let vocab = Vocabulary::default();
    let mut bank = init_bank::<f64, _>(cfg.bank_config(cfg.experts, vocab.len()), None, &mut stream(&[cfg.seed]))?;
    let queries: Vec<String> = bank.params().names().filter(|n| n.ends_with(".q")).cloned().collect();
    for (k, name) in queries.iter().enumerate() {
        let shape = bank.params().get(name).expect("listed").shape().to_vec();
        *bank.params_mut().get_mut(name).expect("listed") = Tensor::randn(&shape, &mut stream(&[cfg.seed, 1, k as u64])).scale(0.5);
    }
    let schedule = NoiseSchedule::<f64>::from_spec(&cfg.schedule)?;
    let batch: Vec<(usize, &TrainItem<f64>)> = items.iter().enumerate().collect();
    let settings = LossSettings { knowledge: &cfg.knowledge, p_uncond: cfg.train.p_uncond, vocab: &vocab, seed: cfg.seed, step: 1 };
    let mut lg = training_graph(&bank, &schedule, &batch, &settings)?;
    let report = finite_difference_check(&mut lg.graph, lg.root, bank.params(), &GradCheckConfig::default())?;
    println!("max relative error {:e} over {} parameter tensors", report.max_rel_error, report.leaves.len());
    if !report.passed() {
        let worst = report.worst().map(|l| l.name.clone()).unwrap_or_default();
        return Err(fail(ErrorClass::Numeric, format!("gradient check failed at `{worst}`: {:e}", report.max_rel_error)));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train { common, data, baseline } => train_cmd(common, data, *baseline),
        Command::Sample { common, prompt } => sample_cmd(common, prompt),
        Command::Eval(c) => eval_cmd(c),
        Command::Sweep(c) => sweep_cmd(c),
        Command::InspectAttn { common, prompt } => inspect_cmd(common, prompt),
        Command::CheckGrad(c) => check_grad_cmd(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = class_of(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", class.name());
            ExitCode::from(class.exit_code() as u8)
        }
    }
}

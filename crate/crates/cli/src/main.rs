//! `lmlab`: train, align, evaluate, and probe small language models from
//! JSON experiment configs. Every command is fully determined by its config
//! file and seed; metrics land next to checkpoints as JSON lines.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lmlab_core::align::PpoOpts;
use lmlab_core::inference::{
    build_datastore, generate, save_datastore, DecodeParams, Strategy,
};
use lmlab_core::lab::{
    build_examples, eval_loss, mean_oracle_reward, oracle_win_rate, pairwise_accuracy, tasks,
    train_dpo, train_examples, train_ppo, train_reward, ExperimentConfig, MetricsLog,
    RolloutParams, ScalingPoint, TaskKind,
};
use lmlab_core::model::{checkpoint, ModelParams, PosKind, RopeScaling};

#[derive(Parser)]
#[command(name = "lmlab", version, about = "A small-language-model laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from scratch (or from --init) under the configured objective.
    Pretrain(RunArgs),
    /// Fine-tune on prompt-completion examples with the prompt loss masked.
    Sft(RunArgs),
    /// Fit a reward head on synthetic preference pairs.
    Reward(RunArgs),
    /// Clipped policy optimization against a reward model and a reference.
    Ppo(PpoArgs),
    /// Direct preference optimization against a frozen reference.
    Dpo(DpoArgs),
    /// Decode token ids from a checkpoint.
    Generate(GenerateArgs),
    /// Exact-match rate of a checkpoint on fresh copy prompts.
    EvalCopy(EvalArgs),
    /// Passkey retrieval accuracy, optionally at a rescaled context length.
    EvalPasskey(EvalPasskeyArgs),
    /// Fit a power law to (x, loss) points from a JSON file.
    FitScaling(FitScalingArgs),
    /// Build a nearest-neighbor datastore over the task corpus.
    KnnBuild(KnnArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix for the checkpoint and metrics (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Starting checkpoint prefix; fresh initialization when absent.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct PpoArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Frozen reference checkpoint prefix.
    #[arg(long)]
    reference: PathBuf,
    /// Reward-model checkpoint prefix (must carry a reward head).
    #[arg(long)]
    reward: PathBuf,
}

#[derive(Args)]
struct DpoArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Frozen reference checkpoint prefix.
    #[arg(long)]
    reference: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint prefix to decode from.
    #[arg(long)]
    init: PathBuf,
    /// Comma-separated prompt token ids.
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    /// Softmax temperature; greedy when absent.
    #[arg(long)]
    temperature: Option<f64>,
    /// Keep only the k highest-scoring tokens (needs --temperature).
    #[arg(long)]
    top_k: Option<usize>,
    /// Stop tokens (comma-separated ids).
    #[arg(long)]
    stop: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint prefix to evaluate.
    #[arg(long)]
    init: PathBuf,
}

#[derive(Args)]
struct EvalPasskeyArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Evaluate at this context length instead of the trained one.
    #[arg(long)]
    context_len: Option<usize>,
    /// Rescale rotary positions from the trained length to the eval length.
    #[arg(long, default_value_t = false)]
    interpolate: bool,
}

#[derive(Args)]
struct FitScalingArgs {
    /// JSON array of {"x": .., "loss": ..} points.
    #[arg(long)]
    points: PathBuf,
    /// Also fit an additive irreducible-loss floor.
    #[arg(long, default_value_t = false)]
    irreducible: bool,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init: PathBuf,
    /// Datastore output path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Pretrain(a) => cmd_train(a, "pretrain"),
        Cmd::Sft(a) => cmd_train(a, "sft"),
        Cmd::Reward(a) => cmd_reward(a),
        Cmd::Ppo(a) => cmd_ppo(a),
        Cmd::Dpo(a) => cmd_dpo(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::EvalCopy(a) => cmd_eval_copy(a),
        Cmd::EvalPasskey(a) => cmd_eval_passkey(a),
        Cmd::FitScaling(a) => cmd_fit_scaling(a),
        Cmd::KnnBuild(a) => cmd_knn_build(a),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed {
        cfg.optim.seed = seed;
    }
    Ok(cfg)
}

fn out_prefix(args_out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    args_out
        .or_else(|| cfg.out.clone())
        .context("no output prefix: pass --out or set \"out\" in the config")
}

fn metrics_path(prefix: &Path) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics");
    prefix.with_file_name(name)
}

fn init_params(cfg: &ExperimentConfig, init: &Option<PathBuf>) -> Result<ModelParams> {
    match init {
        Some(prefix) => Ok(checkpoint::load(prefix)?),
        None => Ok(ModelParams::init(cfg.model.clone(), cfg.optim.seed)?),
    }
}

/// Data for seeded sampling that must not collide with training batches.
fn data_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.optim.seed ^ 0xd1b54a32d192ed03
}

/// Fresh evaluation split: same task distribution, disjoint seed stream.
fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    data_seed(cfg) ^ 0x94d049bb133111eb
}

fn finish(
    params: &ModelParams,
    log: &MetricsLog,
    prefix: &Path,
    summary: serde_json::Value,
) -> Result<()> {
    checkpoint::save(params, prefix)?;
    log.write_to(metrics_path(prefix))?;
    println!("{summary}");
    Ok(())
}

fn cmd_train(args: RunArgs, stage: &str) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let examples = build_examples(&cfg)?;
    let mut params = init_params(&cfg, &args.init)?;
    let mut log = MetricsLog::new();
    train_examples(&mut params, &examples, &cfg.optim, stage, &mut log)?;
    let eval = eval_loss(&params, &examples)?;
    let prefix = out_prefix(args.out, &cfg)?;
    log.record(json!({"stage": stage, "summary": true, "train_eval_loss": eval}));
    finish(&params, &log, &prefix, json!({"stage": stage, "train_eval_loss": eval}))
}

fn pref_task(cfg: &ExperimentConfig) -> Result<(usize, usize, usize)> {
    match cfg.task {
        TaskKind::PrefOracle { target, response_len, count } => {
            Ok((target, response_len, count))
        }
        _ => bail!("this stage needs a pref_oracle task"),
    }
}

fn cmd_reward(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let (target, response_len, count) = pref_task(&cfg)?;
    let prompts = tasks::pref_prompts(cfg.align.prompts, data_seed(&cfg));
    let train = tasks::pref_pairs(&prompts, count, response_len, target, data_seed(&cfg))?;
    let held = tasks::pref_pairs(&prompts, cfg.align.holdout, response_len, target, eval_seed(&cfg))?;
    let backbone = init_params(&cfg, &args.init)?;
    let (params, mut log) = train_reward(backbone, &train, &cfg.optim)?;
    let acc = pairwise_accuracy(&params, &held)?;
    let prefix = out_prefix(args.out, &cfg)?;
    log.record(json!({"stage": "reward", "summary": true, "pairwise_accuracy": acc}));
    finish(&params, &log, &prefix, json!({"stage": "reward", "pairwise_accuracy": acc}))
}

fn cmd_ppo(args: PpoArgs) -> Result<()> {
    let cfg = load_config(&args.run.config, args.run.seed)?;
    let (target, response_len, _) = pref_task(&cfg)?;
    let policy = init_params(&cfg, &args.run.init)?;
    let reference = checkpoint::load(&args.reference)?;
    let reward_model = checkpoint::load(&args.reward)?;
    let prompts = tasks::pref_prompts(cfg.align.prompts, data_seed(&cfg));
    let rp = RolloutParams { response_len, temperature: cfg.align.temperature };
    let (params, mut log) = train_ppo(
        policy,
        &reference,
        &reward_model,
        &prompts,
        &cfg.optim,
        &PpoOpts::default(),
        cfg.align.gamma,
        &rp,
    )?;
    let held = tasks::pref_prompts(cfg.align.holdout, eval_seed(&cfg));
    let mean = mean_oracle_reward(&params, &held, target, &rp, eval_seed(&cfg))?;
    let base = mean_oracle_reward(&reference, &held, target, &rp, eval_seed(&cfg))?;
    let prefix = out_prefix(args.run.out, &cfg)?;
    log.record(json!({
        "stage": "ppo", "summary": true,
        "mean_oracle_reward": mean, "reference_oracle_reward": base,
    }));
    finish(
        &params,
        &log,
        &prefix,
        json!({"stage": "ppo", "mean_oracle_reward": mean, "reference_oracle_reward": base}),
    )
}

fn cmd_dpo(args: DpoArgs) -> Result<()> {
    let cfg = load_config(&args.run.config, args.run.seed)?;
    let (target, response_len, count) = pref_task(&cfg)?;
    let reference = checkpoint::load(&args.reference)?;
    let policy = match &args.run.init {
        Some(prefix) => checkpoint::load(prefix)?,
        None => reference.clone(),
    };
    let prompts = tasks::pref_prompts(cfg.align.prompts, data_seed(&cfg));
    let pairs = tasks::pref_pairs(&prompts, count, response_len, target, data_seed(&cfg))?;
    let (params, mut log) = train_dpo(policy, &reference, &pairs, &cfg.optim, cfg.align.beta)?;
    let held = tasks::pref_prompts(cfg.align.holdout, eval_seed(&cfg));
    let rp = RolloutParams { response_len, temperature: cfg.align.temperature };
    let win = oracle_win_rate(&params, &reference, &held, target, &rp, eval_seed(&cfg))?;
    let prefix = out_prefix(args.run.out, &cfg)?;
    log.record(json!({"stage": "dpo", "summary": true, "oracle_win_rate": win}));
    finish(&params, &log, &prefix, json!({"stage": "dpo", "oracle_win_rate": win}))
}

fn parse_ids(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad token id {s:?}")))
        .collect()
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let params = checkpoint::load(&args.init)?;
    let prompt = parse_ids(&args.prompt)?;
    let strategy = match (args.temperature, args.top_k) {
        (None, None) => Strategy::Greedy,
        (Some(t), None) => Strategy::Temperature(t),
        (Some(t), Some(k)) => Strategy::TopK(k, t),
        (None, Some(_)) => bail!("--top-k needs --temperature"),
    };
    let dp = DecodeParams {
        strategy,
        max_new_tokens: args.max_new,
        stop: args.stop.as_deref().map(parse_ids).transpose()?.unwrap_or_default(),
        seed: args.seed,
    };
    let out = generate(&params, &prompt, &dp)?;
    let rendered: Vec<String> = out.iter().map(|t| t.to_string()).collect();
    println!("{}", rendered.join(","));
    Ok(())
}

fn cmd_eval_copy(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let TaskKind::Copy { length, vocab, count } = cfg.task else {
        bail!("eval-copy needs a copy task");
    };
    let params = checkpoint::load(&args.init)?;
    let pairs = tasks::copy_dataset(length, vocab, count, eval_seed(&cfg))?;
    let rate = tasks::eval_copy(&params, &pairs)?;
    println!("{}", json!({"exact_match": rate, "task": "copy"}));
    Ok(())
}

fn cmd_eval_passkey(args: EvalPasskeyArgs) -> Result<()> {
    let cfg = load_config(&args.eval.config, args.eval.seed)?;
    let TaskKind::Passkey { context_len: trained_len, count } = cfg.task else {
        bail!("eval-passkey needs a passkey task");
    };
    let mut params = checkpoint::load(&args.eval.init)?;
    let eval_len = args.context_len.unwrap_or(trained_len);
    if args.interpolate {
        let PosKind::Rope { base, .. } = params.config.pos_kind else {
            bail!("--interpolate needs a rotary-position checkpoint");
        };
        params.config.pos_kind = PosKind::Rope {
            base,
            scaling: RopeScaling::Linear { trained_len, target_len: eval_len },
        };
    }
    let items = tasks::passkey_dataset(eval_len, count, eval_seed(&cfg))?;
    let acc = tasks::eval_passkey(&params, &items)?;
    println!(
        "{}",
        json!({
            "accuracy": acc,
            "context_len": eval_len,
            "interpolate": args.interpolate,
            "task": "passkey",
        })
    );
    Ok(())
}

fn cmd_fit_scaling(args: FitScalingArgs) -> Result<()> {
    let text = fs::read_to_string(&args.points)
        .with_context(|| format!("reading points {}", args.points.display()))?;
    let points: Vec<ScalingPoint> = serde_json::from_str(&text)?;
    let fit = lmlab_core::lab::fit_power_law(&points, args.irreducible)?;
    let mut line = json!({"a": fit.a, "b": fit.b, "residual": fit.residual});
    if let Some(eps) = fit.eps_inf {
        line["eps_inf"] = json!(eps);
    }
    println!("{line}");
    Ok(())
}

fn cmd_knn_build(args: KnnArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let TaskKind::Memorize { sequences, length } = cfg.task else {
        bail!("knn-build needs a memorize task for its corpus");
    };
    let params = checkpoint::load(&args.init)?;
    let docs =
        tasks::memorize_corpus(sequences, length, cfg.model.vocab_size, data_seed(&cfg))?;
    let ds = build_datastore(&params, &docs)?;
    save_datastore(&ds, &args.out)?;
    println!("{}", json!({"entries": ds.len(), "dim": params.config.d}));
    Ok(())
}

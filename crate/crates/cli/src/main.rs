use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ehrfuse_core::data::{
    generate_synthetic, load_episodes, save_episodes, Episode, SynthConfig, SynthTask, TaskSchema,
};
use ehrfuse_core::harness::{ablate, evaluate, gate_means, predict, train, Checkpoint, RunConfig};
use ehrfuse_core::{ConfigError, DataError, Error};

#[derive(Parser)]
#[command(
    name = "ehrfuse",
    version,
    about = "Irregular multimodal sequence models: generate, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Gen(GenArgs),
    /// Train a model. Takes `--config FILE` and `--<key> <value>` overrides
    /// for any run-configuration key; `--seed` is required.
    #[command(disable_help_flag = true)]
    Train {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write per-episode probabilities as JSON lines.
    Predict(PredictArgs),
    /// Train and test every numeric-embedding / note-timing combination.
    /// Takes the same arguments as `train` plus `--seeds 1,2,3`.
    #[command(disable_help_flag = true)]
    Ablate {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "ts_only")]
    task: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    d_m: usize,
    #[arg(long, default_value_t = 8)]
    d_t: usize,
    #[arg(long, default_value_t = 24.0)]
    alpha_hours: f64,
    #[arg(long, default_value_t = 0.3)]
    sparsity: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Append the report line to this run log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also print the per-episode mean UTDE gate.
    #[arg(long)]
    gates: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Metric(_) => 3,
        Error::Tensor(_) | Error::NonFinite { .. } => 4,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
    .into()
}

/// Splits `--key value` / `--key=value` pairs into the run configuration.
/// Keys in `extra` are returned instead of applied.
fn run_config(args: &[String], extra: &[&str]) -> Result<(RunConfig, Vec<(String, String)>), Error> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let flag = a
            .strip_prefix("--")
            .ok_or_else(|| ConfigError(format!("expected --key, got {a:?}")))?;
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| ConfigError(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        pairs.push((k.replace('-', "_"), v));
    }
    let mut cfg = match pairs.iter().find(|(k, _)| k == "config") {
        Some((_, path)) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut rest = Vec::new();
    for (k, v) in pairs {
        if k == "config" {
            continue;
        }
        if extra.contains(&k.as_str()) {
            rest.push((k, v));
        } else {
            cfg.set(&k, &v)?;
        }
    }
    cfg.validate()?;
    Ok((cfg, rest))
}

fn schema(cfg: &RunConfig) -> TaskSchema {
    TaskSchema {
        d_m: cfg.d_m,
        n_labels: cfg.task.n_labels(),
        d_t: Some(cfg.d_t),
    }
}

fn load_split(path: &Option<PathBuf>, name: &str, cfg: &RunConfig) -> Result<Vec<Episode>, Error> {
    let path = path
        .as_ref()
        .ok_or_else(|| ConfigError(format!("{name}_path is not set")))?;
    Ok(load_episodes(path, &schema(cfg))?)
}

fn cmd_gen(a: GenArgs) -> Result<(), Error> {
    let task: SynthTask = a.task.parse()?;
    let cfg = SynthConfig {
        n_episodes: a.n,
        d_m: a.d_m,
        d_t: a.d_t,
        alpha_hours: a.alpha_hours,
        sparsity: a.sparsity,
        task,
        seed: a.seed,
    };
    let episodes = generate_synthetic(&cfg)?;
    save_episodes(&a.out, &episodes)?;
    println!("wrote {} episodes to {}", episodes.len(), a.out.display());
    Ok(())
}

fn wants_help(cmd: &str, args: &[String]) -> bool {
    if !args.iter().any(|a| a == "--help" || a == "-h") {
        return false;
    }
    println!("usage: ehrfuse {cmd} [--config FILE] [--<key> <value>]...\n\nkeys:");
    for k in RunConfig::KEYS {
        println!("  --{}", k.replace('_', "-"));
    }
    if cmd == "ablate" {
        println!("  --seeds <a,b,c>");
    }
    true
}

fn cmd_train(args: &[String]) -> Result<(), Error> {
    if wants_help("train", args) {
        return Ok(());
    }
    let (cfg, _) = run_config(args, &[])?;
    cfg.require_seed()?;
    let ckpt_path = cfg
        .checkpoint_path
        .clone()
        .ok_or_else(|| ConfigError("checkpoint_path is not set".into()))?;
    let tr = load_split(&cfg.train_path, "train", &cfg)?;
    let va = load_split(&cfg.val_path, "val", &cfg)?;
    let out = train(&cfg, &tr, &va)?;
    for r in &out.history {
        let loss = r.train_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
        println!(
            "epoch={} loss={loss} val_{}={:?}",
            r.epoch,
            cfg.task.selection_metric(),
            r.val_metric
        );
    }
    out.checkpoint.save(&ckpt_path)?;
    println!(
        "best epoch={} {}={:?} checkpoint={}",
        out.checkpoint.epoch,
        out.checkpoint.metric_name,
        out.checkpoint.metric,
        ckpt_path.display()
    );
    Ok(())
}

fn checkpoint_and_data(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Vec<Episode>), Error> {
    let c = Checkpoint::load(ckpt)?;
    let eps = load_episodes(data, &schema(&c.config))?;
    Ok((c, eps))
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let (ckpt, eps) = checkpoint_and_data(&a.checkpoint, &a.data)?;
    let report = evaluate(&ckpt, &eps)?;
    let line = report.to_kv_line();
    println!("{line}");
    if let Some(log) = &a.log {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(log)
            .map_err(|e| io_err(log, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(log, e))?;
    }
    if a.gates {
        match gate_means(&ckpt, &eps)? {
            Some(g) => g.iter().for_each(|(id, m)| println!("gate id={id} mean={m:?}")),
            None => log::warn!("model has no UTDE gate"),
        }
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Error> {
    let (ckpt, eps) = checkpoint_and_data(&a.checkpoint, &a.data)?;
    let mut text = String::new();
    for p in predict(&ckpt, &eps)? {
        text.push_str(&serde_json::to_string(&p).map_err(DataError::from)?);
        text.push('\n');
    }
    match &a.out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_err(path, e))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_ablate(args: &[String]) -> Result<(), Error> {
    if wants_help("ablate", args) {
        return Ok(());
    }
    let (cfg, rest) = run_config(args, &["seeds"])?;
    let seeds: Vec<u64> = match rest.iter().find(|(k, _)| k == "seeds") {
        Some((_, v)) => v
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| ConfigError(format!("bad seed {s:?}"))))
            .collect::<Result<_, _>>()?,
        None => vec![cfg.require_seed()?],
    };
    let tr = load_split(&cfg.train_path, "train", &cfg)?;
    let va = load_split(&cfg.val_path, "val", &cfg)?;
    let te = load_split(&cfg.test_path, "test", &cfg)?;
    for row in ablate(&cfg, &tr, &va, &te, &seeds)? {
        let a = &row.aggregate;
        println!(
            "ts_embed={} text_irregularity={} runs={} f1={:.4}±{:.4} aupr={:.4}±{:.4} auroc={:.4}±{:.4}",
            row.ts_embed,
            row.text_irregularity,
            a.runs,
            a.f1.mean,
            a.f1.std,
            a.aupr.mean,
            a.aupr.std,
            a.auroc.mean,
            a.auroc.std
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train { args } => cmd_train(&args),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate { args } => cmd_ablate(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

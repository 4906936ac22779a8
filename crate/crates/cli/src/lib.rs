//! `plmarl` command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use plmarl::config::RunConfig;
use plmarl::error::{Error, Result};
use plmarl::run::{evaluate, load_for_eval, oracle_report, train_run, write_oracle_report};
use plmarl::selfcheck::{run_selfcheck, SelfcheckOptions};

/// Environment variable that overrides `output_dir` from the config file.
pub const OUTPUT_DIR_ENV: &str = "PLMARL_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "plmarl", version, about = "Plackett-Luce ordered multi-agent transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write metrics, checkpoints and a summary.
    Train(RunArgs),
    /// Evaluate a checkpoint with deterministic inference.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<output_dir>/checkpoints/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `eval_episodes` from the config.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Exact order analysis of the configured environment.
    Oracle(RunArgs),
    /// Run the built-in correctness properties.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.workers` in the config.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        Error::Version { .. } => 3,
        _ => 1,
    }
}

fn train(args: &RunArgs) -> Result<i32> {
    let cfg = args.load()?;
    let out = train_run(&cfg, |m| {
        let ranking = m.ranking_loss.map_or("-".to_string(), |r| format!("{r:.4}"));
        println!(
            "iter {:>5} steps {:>8} return {:.4} enc {:.4} dec {:.4} rank {ranking}",
            m.iteration, m.env_steps, m.mean_return, m.encoder_loss, m.decoder_loss
        );
    })?;
    println!("final mean return {:.4}", out.summary.final_mean_return);
    println!("summary written to {}", cfg.output_dir.join("summary.json").display());
    Ok(0)
}

fn eval(args: &RunArgs, checkpoint: Option<&Path>, episodes: Option<usize>) -> Result<i32> {
    let cfg = args.load()?;
    let path = checkpoint.map_or_else(|| cfg.output_dir.join("checkpoints").join("final.ckpt"), Path::to_path_buf);
    let model = load_for_eval(&path, &cfg)?;
    let report = evaluate(&model, &cfg.strategy, &cfg.env, episodes.unwrap_or(cfg.eval_episodes), cfg.seed)?;
    println!("episodes {}", report.episodes);
    println!("mean return {:.6}", report.mean_return);
    if let Some(p) = report.p_oracle_optimal_order {
        println!("oracle-optimal order rate {p:.4}");
    }
    if let Some(p) = report.p_key_first {
        println!("key agent first rate {p:.4}");
    }
    println!("P-L mode orders over {} states:", report.states);
    for (order, count) in &report.pl_mode_orders {
        println!("  [{order}] {count} ({:.4})", *count as f64 / report.states as f64);
    }
    Ok(0)
}

fn oracle(args: &RunArgs) -> Result<i32> {
    let cfg = args.load()?;
    let report = oracle_report(&cfg.env)?;
    for s in &report.states {
        let order: Vec<String> = s.argmax_order.as_slice().iter().map(|i| i.to_string()).collect();
        println!(
            "state {:>3} best [{}] spread {:.3e}{}",
            s.state,
            order.join(","),
            s.spread,
            if s.order_insensitive { " (order-insensitive)" } else { "" }
        );
    }
    println!("max decomposition residual {:.3e}", report.decomposition_residual.max);
    let path = write_oracle_report(&report, &cfg.output_dir)?;
    println!("report written to {}", path.display());
    Ok(0)
}

/// Print each property and return 0 only if all pass.
pub fn selfcheck(opts: &SelfcheckOptions) -> i32 {
    let results = run_selfcheck(opts);
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += !r.passed as usize;
    }
    println!("{} properties, {failed} failed", results.len());
    i32::from(failed > 0)
}

/// Parse `args` (program name first) and execute; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval { run, checkpoint, episodes } => eval(run, checkpoint.as_deref(), *episodes),
        Command::Oracle(a) => oracle(a),
        Command::Selfcheck { seed } => Ok(selfcheck(&SelfcheckOptions {
            seed: *seed,
            ..Default::default()
        })),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

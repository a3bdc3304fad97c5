use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intraslice::eval::{
    baseline_prune, emit_report, inter_pca_probe, rank_profile, BaselineKind, BaselineSpec, EvalReport, DEFAULT_TAU,
};
use intraslice::pipeline::{
    bundled_tokens, fuse_all, fuse_check, read_tokens, run_prune, split_corpus, IterateFfn, RunConfig, TransformsLog,
};
use intraslice::tmodel::{container, perplexity, train_toy, Checkpoint, ModelConfig, TrainOptions};
use intraslice::{Error, Result};

#[derive(Parser)]
#[command(name = "intraslice", version, about = "Intra-module PCA structured pruning for a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model on the bundled corpus.
    TrainToy {
        /// Model configuration (JSON); the built-in toy model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a dense checkpoint and write `pruned.islc`, `report.json`, `transforms.json`.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out perplexity of a checkpoint.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Re-fuse a transforms log into the original and compare against the online model.
    FuseCheck {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        transforms: PathBuf,
        /// Stored pruned checkpoint; must equal the re-fused weights at storage precision.
        #[arg(long)]
        pruned: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer residual-stream energy ranks (dense vs a pruned or probed variant) as CSV/JSON.
    RankProfile {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block indices (0-based) the inter probe projects after.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        layers: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Mode::Intra)]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[command(flatten)]
        run: RunArgs,
        /// Output stem; `.csv` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Random or magnitude channel-deletion baseline.
    Baseline {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Intra,
    Inter,
}

/// Run-config overrides shared by the pruning commands.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long = "lambda-b")]
    lambda_b: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_repropagate: bool,
    #[arg(long, value_enum)]
    iterate_ffn: Option<IterateFfn>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.sparsity {
            c.sparsity = v;
        }
        if let Some(v) = self.lambda_b {
            c.lambda_b = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.no_repropagate {
            c.repropagate = false;
        }
        if let Some(v) = self.iterate_ffn {
            c.iterate_ffn = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Held-out tokens; the held-out split of the bundled corpus otherwise.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    eval_seq_len: usize,
}

impl EvalArgs {
    fn tokens(&self) -> Result<Vec<u32>> {
        match &self.eval_data {
            Some(p) => read_tokens(p),
            None => Ok(split_corpus(&bundled_tokens()).1.to_vec()),
        }
    }

    fn ppl(&self, ckpt: &Checkpoint) -> Result<f64> {
        perplexity(ckpt, &self.tokens()?, self.eval_seq_len)
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    container::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy { model, steps, lr, seed, out } => {
            let cfg: ModelConfig = match model {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(format!("model config: {e}")))?,
                None => ModelConfig::toy(),
            };
            let tokens = bundled_tokens();
            let (train, held) = split_corpus(&tokens);
            let (ckpt, log) = train_toy(&cfg, train, steps, lr, seed, &TrainOptions::default())?;
            container::save(&ckpt, &out)?;
            println!(
                "trained {steps} steps: loss {:.4} -> {:.4}, held-out ppl {:.3}",
                log.initial().unwrap_or(f64::NAN),
                log.last().unwrap_or(f64::NAN),
                perplexity(&ckpt, held, 64)?
            );
        }
        Command::Prune { checkpoint, run, eval, out } => {
            let config = run.resolve()?;
            let dense = load(&checkpoint)?;
            let calib = config.calibration()?;
            let mut outcome = run_prune(&config, &dense, &calib)?;
            outcome.report.ppl_before = Some(eval.ppl(&dense)?);
            outcome.report.ppl_after = Some(eval.ppl(&outcome.checkpoint)?);
            outcome.write(&out)?;
            let r = &outcome.report;
            println!(
                "sparsity {:.4} (requested {}), params {} -> {}, ppl {:.3} -> {:.3}, fuse divergence {:.2e}",
                r.realized_sparsity,
                r.requested_sparsity,
                r.prunable_before,
                r.prunable_after,
                r.ppl_before.unwrap_or(f64::NAN),
                r.ppl_after.unwrap_or(f64::NAN),
                r.fuse_divergence
            );
        }
        Command::EvalPpl { checkpoint, eval } => {
            println!("{:.6}", eval.ppl(&load(&checkpoint)?)?);
        }
        Command::FuseCheck { original, transforms, pruned, trials, tolerance, seed } => {
            let original = load(&original)?;
            let log = TransformsLog::load(&transforms)?;
            let fused = fuse_all(&original, &log)?;
            let divergence = fuse_check(&original, &fused, &log, trials, seed)?;
            println!("fused vs online divergence {divergence:.3e} (tolerance {tolerance:.0e})");
            if divergence > tolerance {
                return Err(Error::FuseCheck { divergence, tolerance });
            }
            if let Some(p) = pruned {
                let stored = load(&p)?;
                let expected = fused.to_storage_precision();
                if stored != expected {
                    let gap = fuse_check(&original, &stored, &log, trials, seed)?;
                    return Err(Error::FuseCheck { divergence: gap.max(f64::MIN_POSITIVE), tolerance: 0.0 });
                }
                println!("stored checkpoint matches the re-fused weights");
            }
        }
        Command::RankProfile { checkpoint, layers, mode, tau, run, out } => {
            let config = run.resolve()?;
            let dense = load(&checkpoint)?;
            let calib = config.calibration()?;
            let base = rank_profile(&dense, &calib, tau)?;
            let variant = match mode {
                Mode::Intra => rank_profile(&run_prune(&config, &dense, &calib)?.checkpoint, &calib, tau)?,
                Mode::Inter => inter_pca_probe(&dense, &calib, config.sparsity, &layers)?.profile(&dense, &calib, tau)?,
            };
            let from = match mode {
                Mode::Intra => 0,
                Mode::Inter => layers.iter().copied().min().unwrap_or(0),
            };
            println!("{}: ranks {:?} vs dense {:?}, perturbation {}", variant.label, variant.ranks, base.ranks, variant.perturbation(&base, from));
            emit_report(&EvalReport { profiles: vec![base, variant], ..EvalReport::default() }, &out)?;
        }
        Command::Baseline { checkpoint, kind, run, eval, out } => {
            let config = run.resolve()?;
            let dense = load(&checkpoint)?;
            let calib = config.calibration()?;
            let spec = BaselineSpec { kind, sparsity: config.sparsity, seed: config.seed };
            let (pruned, _) = baseline_prune(&dense, &calib, &spec)?;
            container::save(&pruned, &out)?;
            let realized = 1.0 - pruned.prunable_params() as f64 / dense.prunable_params() as f64;
            println!("{kind:?} baseline: sparsity {realized:.4}, ppl {:.3} -> {:.3}", eval.ppl(&dense)?, eval.ppl(&pruned)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

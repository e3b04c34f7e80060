use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ddvi::config::RunConfig;
use ddvi::data::{self, DataKind, Lift};
use ddvi::priors::sample_prior;
use ddvi::{par, train, viz};

#[derive(Parser)]
#[command(name = "ddvi", version, about = "Denoising diffusion variational inference lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoints, metrics.tsv and report.txt to --out.
    Train(RunArgs),
    /// Evaluate a checkpoint on the configured test split.
    Eval(RunArgs),
    /// Scatter-plot test-split latents of a checkpoint as SVG.
    PlotLatents(RunArgs),
    /// Dump prior samples as CSV (and an SVG when 2-D).
    SamplePrior {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Write the configured synthetic dataset as CSV with a label column.
    MakeSynth(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.profile {
            cfg.apply_profile(p)?;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        if let Some(s) = self.seed {
            cfg.apply_flag("seed", &s.to_string())?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got '{kv}'");
            };
            cfg.apply_flag(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(train::FINAL_CHECKPOINT))
    }
}

fn write_out(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, bytes)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => {
            let report = train::cmd_train(&a.config()?, &a.out)?;
            print!("{report}");
        }
        Cmd::Eval(a) => {
            let report = train::cmd_eval(&a.config()?, &a.checkpoint())?;
            write_out(&a.out, "eval_report.txt", report.to_string())?;
            print!("{report}");
        }
        Cmd::PlotLatents(a) => {
            let cfg = a.config()?;
            let (z, labels) = train::test_latents(&cfg, &a.checkpoint())?;
            std::fs::create_dir_all(&a.out)?;
            let path = a.out.join("latents.svg");
            viz::emit_scatter(&z, labels.as_deref(), &path)?;
            let mut csv = Vec::new();
            data::write_matrix_csv(&mut csv, &z, labels.as_deref(), b',')?;
            write_out(&a.out, "latents.csv", csv)?;
            println!("{}", path.display());
        }
        Cmd::SamplePrior { run, n } => {
            let cfg = run.config()?;
            let prior = ddvi::objectives::build_prior(&cfg, cfg.seed)?;
            let (z, labels) = sample_prior(&prior.spec, n, cfg.seed)?;
            let mut csv = Vec::new();
            data::write_matrix_csv(&mut csv, &z, Some(&labels), b',')?;
            println!("{}", write_out(&run.out, "prior_samples.csv", csv)?.display());
            if z.cols() == 2 {
                let path = run.out.join("prior_samples.svg");
                viz::emit_scatter(&z, Some(&labels), &path)?;
                println!("{}", path.display());
            }
        }
        Cmd::MakeSynth(a) => {
            let cfg = a.config()?;
            let lift = Lift {
                hidden: cfg.lift_hidden,
                out_dim: cfg.lift_dim,
                seed: cfg.lift_seed,
            };
            let ds = data::make_synthetic(&train::data_prior_spec(&cfg), &lift, cfg.data_kind, cfg.data_n, cfg.data_seed)?;
            let mut csv = Vec::new();
            data::write_matrix_csv(&mut csv, &ds.items, ds.labels.as_deref(), b',')?;
            let name = match cfg.data_kind {
                DataKind::BinaryImage => "synth_binary.csv",
                DataKind::Continuous => "synth.csv",
            };
            println!("{}", write_out(&a.out, name, csv)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    par::init_from_env();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

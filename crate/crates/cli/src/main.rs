//! `gmvq` command-line entry point.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gmvq::bias::{run_bias_sweep, BiasNormalization, BiasSweepConfig};
use gmvq::harness::train::write_metrics_csv;
use gmvq::harness::{
    evaluate, load_checkpoint, make_synthetic_dataset, save_checkpoint, train, Dataset,
    ModelConfig, TrainError,
};
use gmvq::par;

const METRICS_FILE: &str = "metrics.csv";
const CHECKPOINT_FILE: &str = "model.ckpt";
const CONFIG_FILE: &str = "config.cfg";

#[derive(Parser)]
#[command(
    name = "gmvq",
    version,
    about = "Gaussian mixture vector quantization experiments"
)]
struct Cli {
    /// Run every data-parallel section on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture dataset.
    GenData {
        #[arg(long, default_value_t = 16)]
        clusters: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        /// Radius of the sphere the cluster means lie on.
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        /// Per-coordinate standard deviation around each mean.
        #[arg(long, default_value_t = 0.15)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Omit the labels block.
        #[arg(long)]
        no_labels: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.csv, model.ckpt and config.cfg into `out`.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints `mse,perplexity`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per (beta, gamma, seed) cell.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1")]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gumbel-Softmax gradient bias against categorical entropy.
    Bias {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long, default_value_t = 10)]
        actions: usize,
        #[arg(long, value_delimiter = ',', default_value = "50,5")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        /// Estimator temperature.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 12)]
        grid: usize,
        /// scorer_spread, exact_gradient or absolute.
        #[arg(long, default_value = "scorer_spread")]
        normalization: String,
        /// Samples CSV; the summary goes next to it with a `.summary.csv` suffix.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// `key=value` config file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Override one config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

/// A user input problem: exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

impl ModelArgs {
    fn load_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ModelConfig::parse_str(&text)
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => ModelConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(usage)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    fn load_data(&self) -> Result<Dataset> {
        Dataset::load(&self.data).with_context(|| format!("loading {}", self.data.display()))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Train into `dir`; returns the final `(mse, perplexity)` on the training data.
fn train_into(cfg: &ModelConfig, data: &Dataset, dir: &Path) -> Result<(f64, f64)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    let write_metrics = |history| -> Result<()> {
        let mut w = create(&dir.join(METRICS_FILE))?;
        write_metrics_csv(&mut w, history)?;
        w.flush()?;
        Ok(())
    };
    match train(cfg, data) {
        Ok(run) => {
            write_metrics(&run.history)?;
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &run.model)?;
            let report = evaluate(&run.model, data, cfg.batch_size)?;
            Ok((report.mse, report.perplexity))
        }
        Err(TrainError::Diverged {
            epoch,
            step,
            source,
            last_good,
            history,
        }) => {
            write_metrics(&history)?;
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &last_good)?;
            bail!(
                "training diverged at epoch {epoch}, step {step}: {source}; last good model saved"
            )
        }
        Err(TrainError::Setup(e)) => Err(e.into()),
    }
}

fn cell_name(beta: f64, gamma: f64, seed: u64) -> String {
    format!("beta{beta}_gamma{gamma}_seed{seed}")
}

fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.summary.csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            clusters,
            dim,
            n,
            radius,
            spread,
            seed,
            no_labels,
            out,
        } => {
            let mut ds =
                make_synthetic_dataset(clusters, dim, n, radius, spread, seed).map_err(usage)?;
            if no_labels {
                ds.labels = None;
            }
            ds.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {n} x {dim} points to {}", out.display());
        }
        Command::Train { model, out } => {
            let cfg = model.load_config()?;
            let data = model.load_data()?;
            let (mse, ppl) = train_into(&cfg, &data, &out)?;
            println!("mse,perplexity\n{mse},{ppl}");
        }
        Command::Eval {
            checkpoint,
            data,
            batch_size,
            out,
        } => {
            if batch_size == 0 {
                return Err(usage("--batch-size must be positive"));
            }
            let model = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let data =
                Dataset::load(&data).with_context(|| format!("loading {}", data.display()))?;
            let report = evaluate(&model, &data, batch_size)?;
            let text = format!("mse,perplexity\n{},{}\n", report.mse, report.perplexity);
            print!("{text}");
            if let Some(out) = out {
                fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Sweep {
            model,
            betas,
            gammas,
            seeds,
            out,
        } => {
            let base = model.load_config()?;
            let data = model.load_data()?;
            fs::create_dir_all(&out)?;
            let mut summary = create(&out.join("summary.csv"))?;
            writeln!(summary, "beta,gamma,seed,mse,perplexity")?;
            for &gamma in &gammas {
                for &beta in &betas {
                    for &seed in &seeds {
                        let cfg = ModelConfig {
                            beta,
                            gamma,
                            seed,
                            ..base.clone()
                        };
                        cfg.validate().map_err(usage)?;
                        let (mse, ppl) =
                            train_into(&cfg, &data, &out.join(cell_name(beta, gamma, seed)))?;
                        log::info!("beta {beta} gamma {gamma} seed {seed}: mse {mse:.5} perplexity {ppl:.3}");
                        writeln!(summary, "{beta},{gamma},{seed},{mse},{ppl}")?;
                        summary.flush()?;
                    }
                }
            }
        }
        Command::Bias {
            seeds,
            base_seed,
            actions,
            hidden,
            repeats,
            tau,
            grid,
            normalization,
            out,
        } => {
            let config = BiasSweepConfig {
                num_actions: actions,
                hidden,
                repeats,
                estimator_tau: tau,
                grid_points: grid,
                seeds,
                base_seed,
                normalization: normalization.parse::<BiasNormalization>().map_err(usage)?,
                ..Default::default()
            };
            let sweep = run_bias_sweep(&config)?;
            let mut w = create(&out)?;
            sweep.write_samples_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&summary_path(&out))?;
            sweep.write_summary(&mut w)?;
            w.flush()?;
            println!(
                "pearson_rho,p_value\n{},{}",
                sweep.pearson_rho, sweep.p_value
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GMVQ_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = if cli.sequential {
        par::sequential(|| run(cli))
    } else {
        run(cli)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

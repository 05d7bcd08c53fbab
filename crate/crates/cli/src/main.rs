use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hails_core::commands::{
    cmd_baseline, cmd_classify, cmd_evaluate, cmd_forecast, cmd_pretrain, cmd_synth_gen, cmd_train, RunContext,
};
use hails_core::parallel::{init_thread_pool, Execution};
use hails_core::sparsity::DEFAULT_ALPHA;
use hails_core::synth::SynthConfig;
use hails_core::training::{BaseUpdateMode, TrainConfig};
use hails_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hails", version, about = "Hierarchical probabilistic forecasting for sparse demand")]
struct Cli {
    /// TOML file with training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for per-node work (0 = all cores).
    #[arg(long, global = true, env = "HAILS_THREADS", default_value_t = 0)]
    threads: usize,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    /// Trailing steps of the panel kept out of training.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Base parameters update every this many batches.
    #[arg(long)]
    k: Option<usize>,
    /// `sampled` or `accumulated`.
    #[arg(long)]
    base_update_mode: Option<String>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `uniform` or `leaf-proportional`.
    #[arg(long)]
    phi: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Label every node sparse or dense.
    Classify {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Pretrain the per-node encoders on point forecasts.
    Pretrain {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the full model.
    Train {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Continue from a checkpoint (also accepts a pretrained model).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write forecast distributions and quantiles.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        panel: PathBuf,
        /// Needed with `--baseline`.
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        /// First forecast time index (default: end of the panel).
        #[arg(long)]
        origin: Option<usize>,
        /// `six-average` for the moving-average baseline.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Score a forecast file against the panel.
    Evaluate {
        #[arg(long)]
        forecasts: PathBuf,
        #[arg(long)]
        panel: PathBuf,
        #[arg(long)]
        edges: PathBuf,
    },
    /// Generate a synthetic hierarchy and panel.
    SynthGen {
        /// Children per node at each level, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "3,3")]
        branching: Vec<usize>,
        #[arg(long, default_value_t = 120)]
        length: usize,
        #[arg(long, default_value_t = 4.0)]
        base_rate: f64,
        #[arg(long, default_value_t = 0.5)]
        seasonal_amp: f64,
        #[arg(long, default_value_t = 12)]
        period: usize,
        #[arg(long, default_value_t = 0.3)]
        sparsity_scale: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>, o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    macro_rules! set {
        ($($field:ident <- $opt:ident),*) => {
            $(if let Some(v) = o.$opt { cfg.$field = v; })*
        };
    }
    set!(gamma <- gamma, lr <- lr, batch_size <- batch_size, max_epochs <- max_epochs,
         pretrain_epochs <- pretrain_epochs, base_update_period <- k, patience <- patience,
         hidden <- hidden, window_len <- window, horizon <- horizon, alpha <- alpha);
    if let Some(m) = &o.base_update_mode {
        cfg.base_update_mode = match m.as_str() {
            "sampled" => BaseUpdateMode::Sampled,
            "accumulated" => BaseUpdateMode::Accumulated,
            other => return Err(Error::Config(format!("unknown base update mode `{other}`"))),
        };
    }
    if let Some(p) = &o.phi {
        cfg.phi_mode = p.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 && !init_thread_pool(cli.threads) {
        log::warn!("could not configure {} worker threads", cli.threads);
    }
    let ctx = RunContext {
        out: cli.out.clone(),
        config_path: cli.config.clone(),
        seed: cli.seed,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    let config = cli.config.as_deref();
    match cli.command {
        Command::Classify { inputs, alpha } => {
            let out = cmd_classify(&inputs.edges, &inputs.panel, alpha, inputs.holdout, &ctx)?;
            println!("{}", out.display());
        }
        Command::Pretrain {
            inputs,
            labels,
            overrides,
        } => {
            let cfg = load_config(config, cli.seed, &overrides)?;
            let out = cmd_pretrain(&inputs.edges, &inputs.panel, labels.as_deref(), &cfg, inputs.holdout, &ctx)?;
            println!("{}", out.display());
        }
        Command::Train {
            inputs,
            labels,
            resume,
            overrides,
        } => {
            let cfg = load_config(config, cli.seed, &overrides)?;
            let art = cmd_train(
                &inputs.edges,
                &inputs.panel,
                labels.as_deref(),
                &cfg,
                resume.as_deref(),
                inputs.holdout,
                &ctx,
            )?;
            println!("{}\n{}", art.checkpoint.display(), art.log.display());
        }
        Command::Forecast {
            checkpoint,
            panel,
            edges,
            horizon,
            origin,
            baseline,
        } => {
            let out = match (baseline.as_deref(), checkpoint) {
                (Some("six-average"), _) => {
                    let edges = edges.ok_or_else(|| Error::Config("--baseline needs --edges".into()))?;
                    let tau = match horizon {
                        Some(t) => t,
                        None => load_config(config, cli.seed, &Overrides::default())?.horizon,
                    };
                    cmd_baseline(&edges, &panel, tau, origin, &ctx)?
                }
                (Some(other), _) => return Err(Error::Config(format!("unknown baseline `{other}`"))),
                (None, Some(ck)) => cmd_forecast(&ck, &panel, horizon, origin, &ctx)?,
                (None, None) => return Err(Error::Config("forecast needs --checkpoint or --baseline".into())),
            };
            println!("{}", out.display());
        }
        Command::Evaluate {
            forecasts,
            panel,
            edges,
        } => {
            let report = cmd_evaluate(&forecasts, &panel, &edges, &ctx)?;
            print!("{}", report.to_csv());
        }
        Command::SynthGen {
            branching,
            length,
            base_rate,
            seasonal_amp,
            period,
            sparsity_scale,
            noise,
        } => {
            let cfg = SynthConfig {
                branching,
                length,
                base_rate,
                seasonal_amp,
                period,
                sparsity_scale,
                noise,
                seed: cli.seed.unwrap_or(0),
            };
            let (e, p) = cmd_synth_gen(&cfg, &ctx)?;
            println!("{}\n{}", e.display(), p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

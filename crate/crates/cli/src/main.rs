use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use ppf_cli::commands::{self, AblationAxis, DATASET, PREDICTOR};
use ppf_cli::error::exit_code;
use ppf_cli::{CliError, RunConfig};

// The training loops allocate and free multi-megabyte gradient buffers every
// step; the system allocator hands those back to the OS each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "ppf", version, about = "Predictive pruning: data collection, predictor and agent training, policy serving")]
struct Cli {
    /// Config file of dotted key=value pairs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides PPF_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for dataset collection.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the policy grid and write the mask/JS dataset.
    Collect,
    /// Train the JS predictor on a collected dataset.
    TrainPredictor {
        /// Dataset file; defaults to <out>/dataset.txt.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the pruning agent.
    TrainAgent {
        /// Predictor checkpoint; defaults to <out>/predictor.ckpt.
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Reward from measured JS instead of the predictor.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Serve a policy for one target ratio.
    Policy {
        #[arg(long)]
        ratio: f64,
        /// Agent checkpoint; defaults to <out>/agent.ckpt.
        #[arg(long)]
        agent: Option<PathBuf>,
        /// Predictor checkpoint for the JS estimate; defaults to <out>/predictor.ckpt if present.
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Measure one policy against the unpruned model.
    PruneEval {
        #[arg(long)]
        method: String,
        #[arg(long)]
        a_eta: f64,
        #[arg(long)]
        ratio: f64,
    },
    /// Run one ablation sweep and write plot-ready CSV.
    Ablate {
        /// compression, modules, noise or window.
        axis: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Agent sweeps use measured JS instead of the predictor.
        #[arg(long)]
        ground_truth: bool,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("PPF_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("PPF_SEED={s:?} is not an unsigned integer")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg.finalize()?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Collect => {
            let s = commands::collect(&cfg, out).context("collect")?;
            for f in &s.failures {
                eprintln!("skipped {f}");
            }
            println!(
                "{} samples from {} candidates ({} duplicate masks, {} failures) -> {}",
                s.samples,
                s.candidates,
                s.duplicates,
                s.failures.len(),
                s.path.display()
            );
            println!("wall_time_s={:.3}", s.wall_time.as_secs_f64());
        }
        Command::TrainPredictor { dataset } => {
            let dataset = dataset.unwrap_or_else(|| out.join(DATASET));
            let s = commands::train_predictor(&cfg, &dataset, out).context("train-predictor")?;
            println!("train={} test={}", s.n_train, s.n_test);
            println!("mae={} mse={} pearson={}", s.mae, s.mse, s.pearson);
        }
        Command::TrainAgent { predictor, ground_truth } => {
            let predictor = (!ground_truth).then(|| predictor.unwrap_or_else(|| out.join(PREDICTOR)));
            let s = commands::train_agent_cmd(&cfg, predictor.as_deref(), out).context("train-agent")?;
            println!(
                "{} episodes, best reward {}, {} evaluations, mean evaluation latency {:.3} ms ({})",
                s.episodes,
                s.best_reward,
                s.evaluations,
                s.mean_eval_latency.as_secs_f64() * 1e3,
                if s.ground_truth { "ground truth" } else { "predictor" }
            );
        }
        Command::Policy { ratio, agent, predictor } => {
            let agent = agent.unwrap_or_else(|| out.join(commands::AGENT));
            let predictor = predictor.or_else(|| Some(out.join(PREDICTOR)).filter(|p| p.exists()));
            let r = commands::policy(&cfg, &agent, predictor.as_deref(), ratio).context("policy")?;
            println!("{r}");
        }
        Command::PruneEval { method, a_eta, ratio } => {
            let policy = commands::parse_policy(&method, a_eta, ratio)?;
            let r = commands::prune_eval(&cfg, policy, out).context("prune-eval")?;
            println!("{}", ppf_core::evaluation::EvalReport::HEADER);
            println!("{r}");
        }
        Command::Ablate {
            axis,
            dataset,
            predictor,
            ground_truth,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let dataset = dataset.unwrap_or_else(|| out.join(DATASET));
            let predictor = (!ground_truth).then(|| predictor.unwrap_or_else(|| out.join(PREDICTOR)));
            let s = commands::ablate(&cfg, axis, &dataset, predictor.as_deref(), out).context("ablate")?;
            for (label, v) in &s.finals {
                println!("{label}: {v}");
            }
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

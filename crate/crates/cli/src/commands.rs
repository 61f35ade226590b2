//! One function per subcommand. Each writes its artifacts into an output
//! directory and returns a summary the binary prints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ppf_core::agent::{
    best_policy, train_agent, Agent, AgentConfig, EpisodeRecord, GroundTruthEnv, PolicyEnv, PredictorEnv,
    BUCKET,
};
use ppf_core::allocation::{ActionDecoded, WindowSpec};
use ppf_core::corpus::CorpusSplit;
use ppf_core::evaluation::{EvalReport, Evaluator};
use ppf_core::importance::ImportanceMethod;
use ppf_core::io::write_atomic;
use ppf_core::model::{build_model, quick_train, TrainReport};
use ppf_core::predictor::{
    collect_dataset, compress_mask, compression_ablation, module_variants, read_dataset, train_on, write_dataset,
    AblationResult, PolicySample, PredictorConfig, PredictorNet, TrainOutcome,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const DATASET: &str = "dataset.txt";
pub const PREDICTOR: &str = "predictor.ckpt";
pub const AGENT: &str = "agent.ckpt";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Trains the toy model from scratch and freezes it into an evaluator.
pub fn prepare_evaluator(cfg: &RunConfig) -> Result<(Evaluator, TrainReport), CliError> {
    let c = &cfg.corpus;
    let split = CorpusSplit::new(c.seed, cfg.model.vocab, c.n_train, c.n_heldout, c.n_calib);
    let model = build_model(cfg.model.clone(), cfg.model_seed)?;
    let (model, report) = quick_train(model, &split.train, &split.heldout, &cfg.train)?;
    Ok((Evaluator::new(model, split.calib, &cfg.importance)?, report))
}

#[derive(Clone, Debug)]
pub struct CollectSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub candidates: usize,
    pub duplicates: usize,
    pub failures: Vec<String>,
    pub wall_time: Duration,
}

pub fn collect(cfg: &RunConfig, out: &Path) -> Result<CollectSummary, CliError> {
    let start = Instant::now();
    cfg.grid
        .validate()
        .map_err(|e| CliError::Usage(format!("collection grid: {e}")))?;
    ensure_dir(out)?;
    let (ev, _) = prepare_evaluator(cfg)?;
    let c = collect_dataset(&ev, &cfg.grid, cfg.workers)?;
    let path = out.join(DATASET);
    write_dataset(&path, &c.samples).map_err(|e| io_err(&path, e))?;
    Ok(CollectSummary {
        path,
        samples: c.samples.len(),
        candidates: c.candidates,
        duplicates: c.duplicates,
        failures: c
            .failures
            .iter()
            .map(|(p, e)| format!("{},{},{}: {e}", p.method, p.a_eta, p.s_tar))
            .collect(),
        wall_time: start.elapsed(),
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<PolicySample>, CliError> {
    read_dataset(path).map_err(|e| match e {
        ppf_core::PpfError::Io(io) => io_err(path, io),
        other => CliError::Core(other),
    })
}

fn net_config(cfg: &RunConfig, samples: &[PolicySample]) -> Result<PredictorConfig, CliError> {
    let first = samples
        .first()
        .ok_or_else(|| CliError::Usage("dataset has no samples".into()))?;
    let shape = first.compressed.grid.shape();
    Ok(PredictorConfig {
        input: [shape[0], shape[1], shape[2]],
        ..cfg.net.clone()
    })
}

fn train_from_samples(cfg: &RunConfig, samples: &[PolicySample], net: PredictorConfig) -> Result<TrainOutcome, CliError> {
    let inputs: Vec<_> = samples.iter().map(|s| s.compressed.grid.clone()).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.js).collect();
    Ok(train_on(&inputs, &targets, net, &cfg.predictor)?)
}

fn curve_csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct PredictorSummary {
    pub mae: f64,
    pub mse: f64,
    pub pearson: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
}

/// Trains on `dataset` and writes the checkpoint, loss curve, metrics and
/// held-out predictions.
pub fn train_predictor(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<PredictorSummary, CliError> {
    let samples = load_dataset(dataset)?;
    let net = net_config(cfg, &samples)?;
    let o = train_from_samples(cfg, &samples, net)?;
    ensure_dir(out)?;
    let p = out.join(PREDICTOR);
    o.net.save(&p).map_err(|e| io_err(&p, e))?;
    write_text(
        &out.join("predictor_loss.csv"),
        &curve_csv(
            "epoch,train_loss",
            std::iter::once(format!("0,{}", o.initial_loss))
                .chain(o.curve.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1))),
        ),
    )?;
    write_text(
        &out.join("predictor_test.csv"),
        &curve_csv(
            "sample,js,predicted",
            o.test_idx
                .iter()
                .zip(&o.test.predictions)
                .map(|(&i, p)| format!("{i},{},{p}", samples[i].js)),
        ),
    )?;
    let summary = PredictorSummary {
        mae: o.test.mae,
        mse: o.test.mse,
        pearson: o.test.pearson,
        n_train: o.train_idx.len(),
        n_test: o.test_idx.len(),
        initial_loss: o.initial_loss,
        final_loss: o.curve.last().copied(),
    };
    write_text(
        &out.join("predictor_metrics.txt"),
        &format!(
            "mae={}\nmse={}\npearson={}\nn_train={}\nn_test={}\n",
            summary.mae, summary.mse, summary.pearson, summary.n_train, summary.n_test
        ),
    )?;
    Ok(summary)
}

pub fn load_predictor(path: &Path) -> Result<PredictorNet, CliError> {
    PredictorNet::load(path).map_err(|e| match e {
        ppf_core::PpfError::Io(io) => io_err(path, io),
        other => CliError::Core(other),
    })
}

pub fn load_agent(path: &Path) -> Result<Agent, CliError> {
    Agent::load(path).map_err(|e| match e {
        ppf_core::PpfError::Io(io) => io_err(path, io),
        other => CliError::Core(other),
    })
}

fn reward_rows(curve: &[EpisodeRecord]) -> impl Iterator<Item = String> + '_ {
    curve.iter().map(|r| r.record())
}

#[derive(Clone, Debug)]
pub struct AgentSummary {
    pub episodes: usize,
    pub best_reward: f64,
    pub evaluations: usize,
    pub mean_eval_latency: Duration,
    pub ground_truth: bool,
}

/// Trains the agent against the predictor, or against measured JS when
/// `predictor` is `None`.
pub fn train_agent_cmd(cfg: &RunConfig, predictor: Option<&Path>, out: &Path) -> Result<AgentSummary, CliError> {
    let net = predictor.map(load_predictor).transpose()?;
    let (ev, _) = prepare_evaluator(cfg)?;
    let env: Box<dyn PolicyEnv> = match &net {
        Some(n) => Box::new(PredictorEnv::new(&ev, n)?),
        None => Box::new(GroundTruthEnv::new(&ev)),
    };
    let t = train_agent(env.as_ref(), &cfg.agent)?;
    ensure_dir(out)?;
    let p = out.join(AGENT);
    t.agent.save(&p).map_err(|e| io_err(&p, e))?;
    write_text(&out.join("reward_curve.csv"), &curve_csv(EpisodeRecord::HEADER, reward_rows(&t.curve)))?;
    write_text(
        &out.join("best_policies.csv"),
        &curve_csv(
            "ratio,method,a_eta,s_tar,reward",
            t.best.iter().map(|(b, e)| {
                format!(
                    "{:.3},{},{},{},{}",
                    *b as f64 * BUCKET,
                    e.policy.method,
                    e.policy.a_eta,
                    e.policy.s_tar,
                    e.reward
                )
            }),
        ),
    )?;
    let mean = t.eval_time / t.evaluations.max(1) as u32;
    let mode = if net.is_some() { "predictor" } else { "ground_truth" };
    write_text(
        &out.join(format!("agent_latency_{mode}.txt")),
        &format!(
            "mode={mode}\nevaluations={}\nmean_eval_ms={}\n",
            t.evaluations,
            mean.as_secs_f64() * 1e3
        ),
    )?;
    Ok(AgentSummary {
        episodes: t.curve.len(),
        best_reward: t.best_reward(),
        evaluations: t.evaluations,
        mean_eval_latency: mean,
        ground_truth: net.is_none(),
    })
}

#[derive(Clone, Debug)]
pub struct PolicyReport {
    pub policy: ActionDecoded,
    pub layer_ratios: Vec<f64>,
    pub predicted_js: Option<f64>,
    pub extrapolated: bool,
    pub latency: Duration,
}

impl std::fmt::Display for PolicyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = &self.policy;
        writeln!(f, "ratio={}", p.s_tar)?;
        writeln!(f, "method={}", p.method)?;
        writeln!(f, "a_eta={}", p.a_eta)?;
        let ratios: Vec<String> = self.layer_ratios.iter().map(|r| format!("{r:.6}")).collect();
        writeln!(f, "layer_ratios={}", ratios.join(","))?;
        match self.predicted_js {
            Some(js) => writeln!(f, "predicted_js={js}")?,
            None => writeln!(f, "predicted_js=unavailable")?,
        }
        if self.extrapolated {
            writeln!(f, "warning=ratio lies outside the agent's training window")?;
        }
        write!(f, "latency_ms={:.3}", self.latency.as_secs_f64() * 1e3)
    }
}

/// Serves a policy for `ratio`. Latency covers the actor, allocation, mask
/// construction and the optional JS prediction.
pub fn policy(cfg: &RunConfig, agent: &Path, predictor: Option<&Path>, ratio: f64) -> Result<PolicyReport, CliError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CliError::Usage(format!("ratio {ratio} is outside [0, 1)")));
    }
    let agent = load_agent(agent)?;
    let net = predictor.map(load_predictor).transpose()?;
    let (ev, _) = prepare_evaluator(cfg)?;
    let start = Instant::now();
    let served = best_policy(&agent, ratio)?;
    let layer_ratios = ev.ratios(&served.policy)?.as_slice().to_vec();
    let predicted_js = match &net {
        Some(n) => {
            let mask = ev.mask_for(&served.policy)?;
            Some(n.predict(&compress_mask(&mask, ev.model().config())?.grid)?)
        }
        None => None,
    };
    Ok(PolicyReport {
        policy: served.policy,
        layer_ratios,
        predicted_js,
        extrapolated: served.extrapolated,
        latency: start.elapsed(),
    })
}

/// Ground-truth evaluation of one policy, appended to `results.csv`.
pub fn prune_eval(cfg: &RunConfig, policy: ActionDecoded, out: &Path) -> Result<EvalReport, CliError> {
    let (ev, _) = prepare_evaluator(cfg)?;
    let report = ev.evaluate(&policy)?;
    ensure_dir(out)?;
    let path = out.join("results.csv");
    let mut text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => format!("{}\n", EvalReport::HEADER),
        Err(e) => return Err(io_err(&path, e)),
    };
    writeln!(text, "{report}").expect("writing to a String cannot fail");
    write_text(&path, &text)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Compression,
    Modules,
    Noise,
    Window,
}

impl std::str::FromStr for AblationAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "compression" => Ok(Self::Compression),
            "modules" => Ok(Self::Modules),
            "noise" => Ok(Self::Noise),
            "window" => Ok(Self::Window),
            other => Err(CliError::Usage(format!(
                "unknown ablation axis {other:?} (expected compression, modules, noise or window)"
            ))),
        }
    }
}

/// Noise and decay combinations swept by the noise ablation.
pub const NOISE_GRID: [(f64, f64); 4] = [(0.3, 0.9), (0.3, 0.95), (0.5, 0.9), (0.5, 0.95)];
/// Window sizes swept by the window ablation.
pub const WINDOW_SIZES: [usize; 3] = [3, 5, 9];

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub files: Vec<PathBuf>,
    /// `(label, final metric)` per variant: test MSE for predictor sweeps,
    /// final best reward for agent sweeps.
    pub finals: Vec<(String, f64)>,
}

fn predictor_sweep(out: &Path, name: &str, results: &[AblationResult]) -> Result<AblationSummary, CliError> {
    let curves = out.join(format!("ablation_{name}.csv"));
    write_text(
        &curves,
        &curve_csv(
            "variant,epoch,train_loss",
            results
                .iter()
                .flat_map(|r| r.curve.iter().enumerate().map(move |(i, l)| format!("{},{},{l}", r.label, i + 1))),
        ),
    )?;
    let summary = out.join(format!("ablation_{name}_summary.csv"));
    write_text(
        &summary,
        &curve_csv("variant,test_mse", results.iter().map(|r| format!("{},{}", r.label, r.test_mse))),
    )?;
    Ok(AblationSummary {
        files: vec![curves, summary],
        finals: results.iter().map(|r| (r.label.clone(), r.test_mse)).collect(),
    })
}

fn agent_sweep(
    cfg: &RunConfig,
    predictor: Option<&Path>,
    out: &Path,
    name: &str,
    variants: Vec<(String, AgentConfig)>,
) -> Result<AblationSummary, CliError> {
    let net = predictor.map(load_predictor).transpose()?;
    let (ev, _) = prepare_evaluator(cfg)?;
    let env: Box<dyn PolicyEnv> = match &net {
        Some(n) => Box::new(PredictorEnv::new(&ev, n)?),
        None => Box::new(GroundTruthEnv::new(&ev)),
    };
    let mut rows = Vec::new();
    let mut finals = Vec::new();
    for (label, acfg) in variants {
        let t = train_agent(env.as_ref(), &acfg)?;
        rows.extend(t.curve.iter().map(|r| format!("{label},{}", r.record())));
        finals.push((label, t.best_reward()));
    }
    let path = out.join(format!("ablation_{name}.csv"));
    write_text(&path, &curve_csv(&format!("variant,{}", EpisodeRecord::HEADER), rows))?;
    Ok(AblationSummary {
        files: vec![path],
        finals,
    })
}

pub fn ablate(
    cfg: &RunConfig,
    axis: AblationAxis,
    dataset: &Path,
    predictor: Option<&Path>,
    out: &Path,
) -> Result<AblationSummary, CliError> {
    ensure_dir(out)?;
    match axis {
        AblationAxis::Compression => {
            let samples = load_dataset(dataset)?;
            let (ev, _) = prepare_evaluator(cfg)?;
            let results = compression_ablation(&ev, &samples, &cfg.predictor)?;
            predictor_sweep(out, "compression", &results)
        }
        AblationAxis::Modules => {
            let samples = load_dataset(dataset)?;
            let base = net_config(cfg, &samples)?;
            let mut results = Vec::new();
            for (label, variant) in module_variants(base.input) {
                let net = PredictorConfig {
                    use_sa: variant.use_sa,
                    use_spp: variant.use_spp,
                    use_gd: variant.use_gd,
                    ..base.clone()
                };
                let o = train_from_samples(cfg, &samples, net)?;
                results.push(AblationResult {
                    label: label.to_string(),
                    curve: o.curve,
                    test_mse: o.test.mse,
                });
            }
            predictor_sweep(out, "modules", &results)
        }
        AblationAxis::Noise => {
            let variants = NOISE_GRID
                .iter()
                .map(|&(n, d)| {
                    (
                        format!("noise{n}_decay{d}"),
                        AgentConfig {
                            noise0: n,
                            noise_decay: d,
                            ..cfg.agent.clone()
                        },
                    )
                })
                .collect();
            agent_sweep(cfg, predictor, out, "noise", variants)
        }
        AblationAxis::Window => {
            let variants = WINDOW_SIZES
                .iter()
                .map(|&k| {
                    (
                        format!("k{k}"),
                        AgentConfig {
                            window: WindowSpec { k, ..cfg.agent.window },
                            ..cfg.agent.clone()
                        },
                    )
                })
                .collect();
            agent_sweep(cfg, predictor, out, "window", variants)
        }
    }
}

/// Parses the `(method, a_eta, ratio)` triple given on the command line.
pub fn parse_policy(method: &str, a_eta: f64, ratio: f64) -> Result<ActionDecoded, CliError> {
    let m: ImportanceMethod = method.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    ActionDecoded::new(m, a_eta, ratio).map_err(|e| CliError::Usage(e.to_string()))
}

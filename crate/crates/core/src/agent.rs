//! DDPG agent over the hybrid (importance method, scaling factor) action, its
//! replay buffer and exploration schedule, and the window-driven episode loop.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::{Duration, Instant};

use ppf_nn::{xavier_uniform, Adam, Graph, Optimizer, ParamSet, Parameter, Sgd, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::allocation::{window_sample, ActionDecoded, WindowSpec};
use crate::error::{PpfError, Result};
use crate::evaluation::{ppr, Evaluator};
use crate::importance::ImportanceMethod;
use crate::predictor::{compress_mask, split_header, PredictorNet};
use crate::pruning::actual_ratio;

/// Actor output before decoding: three method scores in `[0, 1]` and an
/// unbounded scaling pre-activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawAction {
    pub method_logits: [f64; 3],
    pub eta_raw: f64,
}

impl RawAction {
    pub fn to_array(self) -> [f64; 4] {
        let [a, b, c] = self.method_logits;
        [a, b, c, self.eta_raw]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            method_logits: [v[0], v[1], v[2]],
            eta_raw: v[3],
        }
    }
}

/// Argmax method (ties to the lowest index) and `a_eta = 0.25·(tanh(raw) + 1)`.
pub fn decode_action(raw: &RawAction, s_tar: f64) -> Result<ActionDecoded> {
    let mut best = 0;
    for (i, &v) in raw.method_logits.iter().enumerate() {
        if v > raw.method_logits[best] {
            best = i;
        }
    }
    let a_eta = (0.25 * (raw.eta_raw.tanh() + 1.0)).clamp(0.0, 0.5);
    ActionDecoded::new(ImportanceMethod::ALL[best], a_eta, s_tar)
}

/// Adds `N(0, sigma²)` to every component and clips the method scores to `[0, 1]`.
pub fn add_noise(raw: &RawAction, sigma: f64, rng: &mut impl Rng) -> Result<RawAction> {
    if !(sigma >= 0.0) {
        return Err(PpfError::Input(format!("noise scale {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(*raw);
    }
    let n = Normal::new(0.0, sigma).map_err(|e| PpfError::Input(e.to_string()))?;
    let mut out = *raw;
    for l in &mut out.method_logits {
        *l = (*l + n.sample(rng)).clamp(0.0, 1.0);
    }
    out.eta_raw += n.sample(rng);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: f64,
    pub raw_action: [f64; 4],
    pub reward: f64,
    pub next_state: f64,
    pub terminal: bool,
}

/// Bounded FIFO experience store.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(PpfError::Config("replay buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Up to `batch` distinct transitions drawn uniformly.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Vec<Transition> {
        let n = batch.min(self.items.len());
        rand::seq::index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| self.items[i])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    fn build(self, lr: f64) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd::new(lr, 0.0)),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(PpfError::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub episodes: usize,
    pub window: WindowSpec,
    pub noise0: f64,
    pub noise_decay: f64,
    pub capacity: usize,
    pub batch: usize,
    pub hidden: usize,
    pub tau: f64,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub optimizer: OptimizerKind,
    /// Gradient updates applied after each episode's window.
    pub updates_per_episode: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            episodes: 150,
            window: WindowSpec {
                alpha: 0.2,
                beta: 0.4,
                k: 5,
            },
            noise0: 0.5,
            noise_decay: 0.95,
            capacity: 2000,
            batch: 64,
            hidden: 64,
            tau: 0.005,
            gamma: 0.0,
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            optimizer: OptimizerKind::Adam,
            updates_per_episode: 50,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if !(self.noise0 >= 0.0) {
            return Err(PpfError::Config("initial noise must be nonnegative".into()));
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return Err(PpfError::Config("noise decay must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(PpfError::Config("tau and gamma must lie in [0, 1]".into()));
        }
        if self.capacity == 0 || self.batch == 0 || self.hidden == 0 {
            return Err(PpfError::Config("buffer capacity, batch and hidden width must be positive".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(PpfError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Exploration scale used during episode `e` (zero-based).
    pub fn sigma_at(&self, e: usize) -> f64 {
        self.noise0 * self.noise_decay.powi(e as i32)
    }
}

/// Evaluates a decoded policy and returns its reward.
pub trait PolicyEnv {
    fn evaluate(&self, policy: &ActionDecoded) -> Result<EnvOutcome>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvOutcome {
    pub js: f64,
    pub r_act: f64,
    /// `-js / r_act`.
    pub reward: f64,
}

impl EnvOutcome {
    pub fn new(js: f64, r_act: f64) -> Result<Self> {
        Ok(Self {
            js,
            r_act,
            reward: -ppr(js, r_act)?,
        })
    }
}

/// Predicted JS from the compressed mask; `r_act` from the mask itself.
pub struct PredictorEnv<'a> {
    evaluator: &'a Evaluator,
    net: &'a PredictorNet,
}

impl<'a> PredictorEnv<'a> {
    pub fn new(evaluator: &'a Evaluator, net: &'a PredictorNet) -> Result<Self> {
        let cfg = evaluator.model().config();
        let want = crate::predictor::CompressionMode::OProj.input_shape(cfg);
        if net.config().input != want {
            return Err(PpfError::Config(format!(
                "predictor expects input {:?} but the model compresses to {:?}",
                net.config().input,
                want
            )));
        }
        Ok(Self { evaluator, net })
    }
}

impl PolicyEnv for PredictorEnv<'_> {
    fn evaluate(&self, policy: &ActionDecoded) -> Result<EnvOutcome> {
        let mask = self.evaluator.mask_for(policy)?;
        let c = compress_mask(&mask, self.evaluator.model().config())?;
        EnvOutcome::new(self.net.predict(&c.grid)?, actual_ratio(&mask))
    }
}

/// Measured JS of the pruned model on calibration data.
pub struct GroundTruthEnv<'a> {
    evaluator: &'a Evaluator,
}

impl<'a> GroundTruthEnv<'a> {
    pub fn new(evaluator: &'a Evaluator) -> Self {
        Self { evaluator }
    }
}

impl PolicyEnv for GroundTruthEnv<'_> {
    fn evaluate(&self, policy: &ActionDecoded) -> Result<EnvOutcome> {
        let r = self.evaluator.evaluate(policy)?;
        EnvOutcome::new(r.js, r.r_act)
    }
}

fn push_mlp(ps: &mut ParamSet, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Result<()> {
    for (i, w) in dims.windows(2).enumerate() {
        ps.push(Parameter::new(
            format!("{prefix}.fc{i}.w"),
            xavier_uniform(&[w[0], w[1]], w[0], w[1], rng),
        ))?;
        ps.push(Parameter::new(format!("{prefix}.fc{i}.b"), Tensor::zeros(&[w[1]])))?;
    }
    Ok(())
}

/// ReLU MLP over `[n, in]` rows; the last layer is left linear.
fn mlp<'a>(g: &mut Graph<'a>, p: &[Var], x: Var) -> Result<Var> {
    let layers = p.len() / 2;
    let mut h = x;
    for i in 0..layers {
        h = g.dense(h, p[2 * i], p[2 * i + 1])?;
        if i + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Actor head on `[n, 1]` states: sigmoid method scores and a raw scaling column.
pub fn actor_forward<'a>(g: &mut Graph<'a>, p: &[Var], states: Var) -> Result<Var> {
    let out = mlp(g, p, states)?;
    let logits = g.slice_cols(out, 0, 3)?;
    let scores = g.sigmoid(logits)?;
    let eta = g.slice_cols(out, 3, 4)?;
    Ok(g.concat_cols(&[scores, eta])?)
}

/// Critic on `[n, 5]` rows of state followed by the raw action.
pub fn critic_forward<'a>(g: &mut Graph<'a>, p: &[Var], inputs: Var) -> Result<Var> {
    mlp(g, p, inputs)
}

/// Actor, critic and their slowly tracking targets.
#[derive(Clone, Debug)]
pub struct Agent {
    pub actor: ParamSet,
    pub critic: ParamSet,
    pub target_actor: ParamSet,
    pub target_critic: ParamSet,
    pub window: WindowSpec,
}

impl Agent {
    pub fn new(hidden: usize, window: WindowSpec, seed: u64) -> Result<Self> {
        window.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor = ParamSet::new();
        push_mlp(&mut actor, "actor", &[1, hidden, hidden, 4], &mut rng)?;
        let mut critic = ParamSet::new();
        push_mlp(&mut critic, "critic", &[5, hidden, hidden, 1], &mut rng)?;
        Ok(Self {
            target_actor: renamed(&actor, "target_actor")?,
            target_critic: renamed(&critic, "target_critic")?,
            actor,
            critic,
            window,
        })
    }

    pub fn hidden(&self) -> usize {
        self.actor[0].value.shape()[1]
    }

    pub fn act(&self, state: f64) -> Result<RawAction> {
        Ok(RawAction::from_slice(eval_actor(&self.actor, &[state])?.data()))
    }

    fn critic_value(critic: &ParamSet, rows: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = critic.bind(&mut g);
        let x = g.constant(rows);
        let q = critic_forward(&mut g, &p, x)?;
        Ok(g.value(q).clone())
    }

    /// One DDPG step: critic regression, actor ascent on the critic, soft
    /// target updates. Returns the critic loss.
    pub fn update(
        &mut self,
        batch: &[Transition],
        gamma: f64,
        tau: f64,
        actor_opt: &mut dyn Optimizer,
        critic_opt: &mut dyn Optimizer,
    ) -> Result<f64> {
        let n = batch.len();
        if n == 0 {
            return Ok(0.0);
        }
        let states: Vec<f64> = batch.iter().map(|t| t.state).collect();
        let mut targets: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        if gamma > 0.0 {
            let next: Vec<f64> = batch.iter().map(|t| t.next_state).collect();
            let next_act = eval_actor(&self.target_actor, &next)?;
            let q_next = Self::critic_value(&self.target_critic, critic_rows(&next, next_act.data()))?;
            for (i, t) in batch.iter().enumerate() {
                if !t.terminal {
                    targets[i] += gamma * q_next.data()[i];
                }
            }
        }
        let acts: Vec<f64> = batch.iter().flat_map(|t| t.raw_action).collect();
        let critic_loss = {
            let (grads, bound, loss) = {
                let mut g = Graph::new();
                let p = self.critic.bind(&mut g);
                let x = g.constant(critic_rows(&states, &acts));
                let q = critic_forward(&mut g, &p, x)?;
                let loss = g.mse(q, &Tensor::from_vec(&[n, 1], targets))?;
                (g.backward(loss)?, p, g.value(loss).item())
            };
            self.critic.accumulate_grads(&grads, &bound);
            critic_opt.step(&mut self.critic)?;
            loss
        };
        if !critic_loss.is_finite() {
            return Err(PpfError::Training("critic loss is not finite".into()));
        }
        let (grads, bound) = {
            let mut g = Graph::new();
            let pa = self.actor.bind(&mut g);
            let pc: Vec<Var> = self.critic.iter().map(|p| g.constant(p.value.clone())).collect();
            let s = g.constant(Tensor::from_vec(&[n, 1], states));
            let a = actor_forward(&mut g, &pa, s)?;
            let s2 = g.constant(Tensor::from_vec(&[n, 1], batch.iter().map(|t| t.state).collect()));
            let rows = g.concat_cols(&[s2, a])?;
            let q = critic_forward(&mut g, &pc, rows)?;
            let m = g.mean(q);
            let loss = g.scale(m, -1.0);
            (g.backward(loss)?, pa)
        };
        self.actor.accumulate_grads(&grads, &bound);
        actor_opt.step(&mut self.actor)?;
        soft_update(&mut self.target_actor, &self.actor, tau)?;
        soft_update(&mut self.target_critic, &self.critic, tau)?;
        Ok(critic_loss)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let w = &self.window;
        let mut out = format!(
            "ppf-agent\nhidden={}\nwindow.alpha={}\nwindow.beta={}\nwindow.k={}\n\n",
            self.hidden(),
            w.alpha,
            w.beta,
            w.k
        )
        .into_bytes();
        let mut all = ParamSet::new();
        for set in [&self.actor, &self.critic, &self.target_actor, &self.target_critic] {
            for p in set.iter() {
                all.push(Parameter::new(p.name.clone(), p.value.clone()))?;
            }
        }
        out.extend(ppf_nn::encode_weights(&all)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes, "ppf-agent")?;
        let mut hidden = None;
        let mut window = WindowSpec {
            alpha: 0.0,
            beta: 0.0,
            k: 1,
        };
        for (i, line) in header.lines().enumerate() {
            let perr = |msg: String| PpfError::Parse { line: i + 2, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| perr(format!("expected key=value, got {line:?}")))?;
            let bad = || perr(format!("cannot parse {k} value {v:?}"));
            match k {
                "hidden" => hidden = Some(v.parse().map_err(|_| bad())?),
                "window.alpha" => window.alpha = v.parse().map_err(|_| bad())?,
                "window.beta" => window.beta = v.parse().map_err(|_| bad())?,
                "window.k" => window.k = v.parse().map_err(|_| bad())?,
                _ => return Err(perr(format!("unknown agent key {k:?}"))),
            }
        }
        let hidden = hidden.ok_or_else(|| PpfError::Format("agent checkpoint lacks hidden width".into()))?;
        let template = Agent::new(hidden, window, 0)?;
        let all = ppf_nn::decode_weights(body)?;
        let mut agent = template.clone();
        let mut it = all.iter();
        for set in [
            &mut agent.actor,
            &mut agent.critic,
            &mut agent.target_actor,
            &mut agent.target_critic,
        ] {
            for p in set.iter_mut() {
                let src = it
                    .next()
                    .filter(|s| s.name == p.name && s.value.shape() == p.value.shape())
                    .ok_or_else(|| PpfError::Format(format!("agent checkpoint is missing or misshapes {}", p.name)))?;
                p.value = src.value.clone();
            }
        }
        if it.next().is_some() {
            return Err(PpfError::Format("agent checkpoint has extra parameters".into()));
        }
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn renamed(src: &ParamSet, prefix: &str) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for p in src.iter() {
        let (_, rest) = p.name.split_once('.').unwrap_or(("", &p.name));
        out.push(Parameter::new(format!("{prefix}.{rest}"), p.value.clone()))?;
    }
    Ok(out)
}

fn critic_rows(states: &[f64], acts: &[f64]) -> Tensor {
    let data = states
        .iter()
        .zip(acts.chunks(4))
        .flat_map(|(s, a)| std::iter::once(*s).chain(a.iter().copied()))
        .collect();
    Tensor::from_vec(&[states.len(), 5], data)
}

fn eval_actor(actor: &ParamSet, states: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = actor.bind(&mut g);
    let s = g.constant(Tensor::from_vec(&[states.len(), 1], states.to_vec()));
    let a = actor_forward(&mut g, &p, s)?;
    Ok(g.value(a).clone())
}

/// `target ← τ·online + (1 − τ)·target`, elementwise.
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(PpfError::Config("target and online networks differ".into()));
    }
    for i in 0..online.len() {
        let src = online[i].value.data();
        let dst = target[i].value.data_mut();
        if src.len() != dst.len() {
            return Err(PpfError::Config(format!("shape mismatch at {}", online[i].name)));
        }
        for (t, o) in dst.iter_mut().zip(src) {
            *t = tau * o + (1.0 - tau) * *t;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub mean_reward: f64,
    /// Best reward seen in any episode so far.
    pub best_reward: f64,
    pub sigma: f64,
}

impl EpisodeRecord {
    pub const HEADER: &'static str = "episode,mean_reward,best_reward,sigma";

    pub fn record(&self) -> String {
        format!("{},{},{},{}", self.episode, self.mean_reward, self.best_reward, self.sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestEntry {
    pub policy: ActionDecoded,
    pub reward: f64,
}

/// Ratio bucket width for best-policy tracking.
pub const BUCKET: f64 = 0.025;

pub fn bucket_of(r: f64) -> i64 {
    (r / BUCKET).round() as i64
}

#[derive(Clone, Debug)]
pub struct TrainedAgent {
    pub agent: Agent,
    pub curve: Vec<EpisodeRecord>,
    pub best: BTreeMap<i64, BestEntry>,
    pub buffer: ReplayBuffer,
    /// Total time spent inside the environment.
    pub eval_time: Duration,
    pub evaluations: usize,
}

impl TrainedAgent {
    pub fn best_reward(&self) -> f64 {
        self.curve.last().map_or(f64::NEG_INFINITY, |r| r.best_reward)
    }
}

struct Tracker {
    best: BTreeMap<i64, BestEntry>,
    best_reward: f64,
    eval_time: Duration,
    evaluations: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best: BTreeMap::new(),
            best_reward: f64::NEG_INFINITY,
            eval_time: Duration::ZERO,
            evaluations: 0,
        }
    }

    fn evaluate(&mut self, env: &dyn PolicyEnv, policy: &ActionDecoded) -> Result<f64> {
        let start = Instant::now();
        let out = env.evaluate(policy)?;
        self.eval_time += start.elapsed();
        self.evaluations += 1;
        let entry = self.best.entry(bucket_of(policy.s_tar)).or_insert(BestEntry {
            policy: *policy,
            reward: f64::NEG_INFINITY,
        });
        if out.reward > entry.reward {
            *entry = BestEntry {
                policy: *policy,
                reward: out.reward,
            };
        }
        self.best_reward = self.best_reward.max(out.reward);
        Ok(out.reward)
    }
}

/// Seeds for the window stream and the exploration stream. The window stream
/// is shared with [`random_search`] so both see identical ratios.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    (
        ChaCha8Rng::seed_from_u64(seed),
        ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
    )
}

pub fn train_agent(env: &dyn PolicyEnv, cfg: &AgentConfig) -> Result<TrainedAgent> {
    cfg.validate()?;
    let mut agent = Agent::new(cfg.hidden, cfg.window, cfg.seed)?;
    let mut buffer = ReplayBuffer::new(cfg.capacity)?;
    let mut actor_opt = cfg.optimizer.build(cfg.actor_lr);
    let mut critic_opt = cfg.optimizer.build(cfg.critic_lr);
    let (mut window_rng, mut rng) = streams(cfg.seed);
    let mut tracker = Tracker::new();
    let mut curve = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let sigma = cfg.sigma_at(e);
        let ratios = window_sample(&cfg.window, &mut window_rng);
        let mut sum = 0.0;
        for (j, &r) in ratios.iter().enumerate() {
            let raw = add_noise(&agent.act(r)?, sigma, &mut rng)?;
            let reward = tracker.evaluate(env, &decode_action(&raw, r)?)?;
            sum += reward;
            let last = j + 1 == ratios.len();
            buffer.push(Transition {
                state: r,
                raw_action: raw.to_array(),
                reward,
                next_state: if last { r } else { ratios[j + 1] },
                terminal: last,
            });
        }
        if !buffer.is_empty() {
            for _ in 0..cfg.updates_per_episode {
                let batch = buffer.sample(cfg.batch, &mut rng);
                agent.update(&batch, cfg.gamma, cfg.tau, actor_opt.as_mut(), critic_opt.as_mut())?;
            }
        }
        curve.push(EpisodeRecord {
            episode: e + 1,
            mean_reward: sum / ratios.len() as f64,
            best_reward: tracker.best_reward,
            sigma,
        });
    }
    Ok(TrainedAgent {
        agent,
        curve,
        best: tracker.best,
        buffer,
        eval_time: tracker.eval_time,
        evaluations: tracker.evaluations,
    })
}

/// Uniformly random policies over the same window stream and budget.
pub fn random_search(env: &dyn PolicyEnv, cfg: &AgentConfig) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    let (mut window_rng, mut rng) = streams(cfg.seed);
    let mut tracker = Tracker::new();
    let mut curve = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let ratios = window_sample(&cfg.window, &mut window_rng);
        let mut sum = 0.0;
        for &r in &ratios {
            let method = ImportanceMethod::ALL[rng.random_range(0..3)];
            let a_eta = rng.random_range(0.0..=0.5);
            sum += tracker.evaluate(env, &ActionDecoded::new(method, a_eta, r)?)?;
        }
        curve.push(EpisodeRecord {
            episode: e + 1,
            mean_reward: sum / ratios.len() as f64,
            best_reward: tracker.best_reward,
            sigma: 0.0,
        });
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServedPolicy {
    pub policy: ActionDecoded,
    pub latency: Duration,
    /// The ratio lies outside the window the agent was trained on.
    pub extrapolated: bool,
}

/// Latency ceiling for serving one policy.
pub const SERVE_BUDGET: Duration = Duration::from_millis(100);

/// Noiseless policy for ratio `r`.
pub fn best_policy(agent: &Agent, r: f64) -> Result<ServedPolicy> {
    let start = Instant::now();
    let policy = decode_action(&agent.act(r)?, r)?;
    let latency = start.elapsed();
    if latency > SERVE_BUDGET {
        return Err(PpfError::Numeric(format!(
            "serving took {latency:?}, over the {SERVE_BUDGET:?} budget"
        )));
    }
    Ok(ServedPolicy {
        policy,
        latency,
        extrapolated: !agent.window.contains(r),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Const(f64);

    impl PolicyEnv for Const {
        fn evaluate(&self, p: &ActionDecoded) -> Result<EnvOutcome> {
            EnvOutcome::new(self.0, p.s_tar)
        }
    }

    #[test]
    fn decode_examples() {
        let raw = RawAction {
            method_logits: [0.1, 0.9, 0.3],
            eta_raw: 0.0,
        };
        let d = decode_action(&raw, 0.3).unwrap();
        assert_eq!((d.method, d.a_eta, d.s_tar), (ImportanceMethod::Esd, 0.25, 0.3));
        let tie = RawAction {
            method_logits: [0.5; 3],
            eta_raw: 50.0,
        };
        let d = decode_action(&tie, 0.3).unwrap();
        assert_eq!((d.method, d.a_eta), (ImportanceMethod::Lod, 0.5));
        let low = RawAction { eta_raw: -50.0, ..tie };
        assert_eq!(decode_action(&low, 0.3).unwrap().a_eta, 0.0);
    }

    #[test]
    fn noise_clips_scores() {
        let raw = RawAction {
            method_logits: [0.0, 1.0, 0.5],
            eta_raw: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&raw, 0.0, &mut rng).unwrap(), raw);
        for _ in 0..200 {
            let n = add_noise(&raw, 2.0, &mut rng).unwrap();
            assert!(n.method_logits.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(add_noise(&raw, -1.0, &mut rng).is_err());
    }

    #[test]
    fn buffer_is_fifo_and_bounded() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(Transition {
                state: i as f64 / 10.0,
                raw_action: [0.0; 4],
                reward: 0.0,
                next_state: 0.0,
                terminal: true,
            });
        }
        assert_eq!(b.len(), 3);
        let states: Vec<f64> = b.iter().map(|t| t.state).collect();
        assert_eq!(states, vec![0.2, 0.3, 0.4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(b.sample(10, &mut rng).len(), 3);
    }

    #[test]
    fn noise_schedule() {
        let cfg = AgentConfig::default();
        assert!((cfg.sigma_at(10) - 0.2994).abs() < 1e-4);
        assert_eq!(cfg.sigma_at(0), 0.5);
    }

    #[test]
    fn soft_update_is_elementwise_blend() {
        let a = Agent::new(8, AgentConfig::default().window, 1).unwrap();
        let b = Agent::new(8, AgentConfig::default().window, 2).unwrap();
        let mut t = b.actor.clone();
        soft_update(&mut t, &a.actor, 0.25).unwrap();
        for i in 0..t.len() {
            for ((x, o), old) in t[i].value.data().iter().zip(a.actor[i].value.data()).zip(b.actor[i].value.data()) {
                assert!((x - (0.25 * o + 0.75 * old)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn static_window_states() {
        let cfg = AgentConfig {
            episodes: 4,
            window: WindowSpec::new(0.5, 0.5, 3).unwrap(),
            hidden: 8,
            batch: 4,
            ..AgentConfig::default()
        };
        let out = train_agent(&Const(0.1), &cfg).unwrap();
        assert_eq!(out.buffer.len(), 12);
        assert!(out.buffer.iter().all(|t| t.state == 0.5));
        assert!((out.best_reward() + 0.2).abs() < 1e-12);
        assert_eq!(out.evaluations, 12);
    }

    #[test]
    fn serving_is_deterministic_and_flags_extrapolation() {
        let a = Agent::new(16, WindowSpec::new(0.2, 0.4, 5).unwrap(), 3).unwrap();
        let p = best_policy(&a, 0.3).unwrap();
        assert_eq!(p.policy, best_policy(&a, 0.3).unwrap().policy);
        assert!(!p.extrapolated);
        assert!(!best_policy(&a, 0.2).unwrap().extrapolated);
        assert!(!best_policy(&a, 0.4).unwrap().extrapolated);
        assert!(best_policy(&a, 0.6).unwrap().extrapolated);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = Agent::new(8, WindowSpec::new(0.2, 0.4, 5).unwrap(), 4).unwrap();
        let bytes = a.to_bytes().unwrap();
        let b = Agent::from_bytes(&bytes).unwrap();
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.window, a.window);
    }
}

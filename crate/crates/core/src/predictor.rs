//! Mask compression and the CNN that maps a compressed mask to predicted JS
//! divergence, with its dataset collection and training loop.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ppf_nn::{xavier_uniform, Graph, Optimizer, ParamSet, Parameter, PoolMode, Sgd, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::allocation::ActionDecoded;
use crate::error::{PpfError, Result};
use crate::evaluation::Evaluator;
use crate::importance::ImportanceMethod;
use crate::model::{MatrixKind, ModelConfig};
use crate::pruning::{actual_ratio, dense_mask, PruningMask};
use crate::stats;

/// How a dense mask is reduced before it reaches the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompressionMode {
    /// All seven planes, `(7, L, D_max/g)`.
    Initial,
    /// Q, K, V and O planes, `(4, L, d_model/g)`.
    Attention,
    /// The Down plane, `(1, L, d_ffn/g)`.
    Ffn,
    /// The O plane, `(1, L, d_model/g)`.
    OProj,
}

impl CompressionMode {
    pub const ALL: [CompressionMode; 4] = [
        CompressionMode::Initial,
        CompressionMode::Attention,
        CompressionMode::Ffn,
        CompressionMode::OProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompressionMode::Initial => "initial",
            CompressionMode::Attention => "attention",
            CompressionMode::Ffn => "ffn",
            CompressionMode::OProj => "o_proj",
        }
    }

    fn planes(self) -> Vec<MatrixKind> {
        match self {
            CompressionMode::Initial => MatrixKind::ALL.to_vec(),
            CompressionMode::Attention => MatrixKind::ALL[..4].to_vec(),
            CompressionMode::Ffn => vec![MatrixKind::Down],
            CompressionMode::OProj => vec![MatrixKind::O],
        }
    }

    /// Uncompressed `(planes, L, width)` before group averaging.
    pub fn plane_shape(self, cfg: &ModelConfig) -> [usize; 3] {
        let planes = self.planes();
        let width = planes.iter().map(|k| k.channel_width(cfg)).max().unwrap_or(0);
        [planes.len(), cfg.n_layers, width]
    }

    /// Network input shape `(channels, L, width/g)`.
    pub fn input_shape(self, cfg: &ModelConfig) -> [usize; 3] {
        let [c, l, w] = self.plane_shape(cfg);
        [c, l, w / cfg.group_size]
    }
}

impl fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Renders a mask in one compression mode as a `(C, L, W)` density grid.
pub fn render_mask(mask: &PruningMask, mode: CompressionMode) -> Result<Tensor> {
    let cfg = mask.config();
    let [_, _, width] = mode.plane_shape(cfg);
    if width % cfg.group_size != 0 {
        return Err(PpfError::Config(format!(
            "{mode} width {width} is not divisible by group size {}",
            cfg.group_size
        )));
    }
    let planes: Vec<usize> = mode.planes().iter().map(|k| k.index()).collect();
    dense_mask(mask).select(&planes, width)?.group_average(cfg.group_size)
}

/// `(1, L, d_model/g)` kept fraction of each O_proj channel group.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMask {
    pub grid: Tensor,
}

pub fn compress_mask(mask: &PruningMask, cfg: &ModelConfig) -> Result<CompressedMask> {
    mask.check_config(cfg)?;
    Ok(CompressedMask {
        grid: render_mask(mask, CompressionMode::OProj)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    /// Input `(channels, height, width)`.
    pub input: [usize; 3],
    pub channels: [usize; 3],
    pub dilations: [usize; 3],
    pub spp_grids: Vec<usize>,
    pub fc: [usize; 2],
    pub use_sa: bool,
    pub use_spp: bool,
    pub use_gd: bool,
}

impl PredictorConfig {
    pub fn for_input(input: [usize; 3]) -> Self {
        Self {
            input,
            channels: [16, 32, 64],
            dilations: [1, 2, 4],
            spp_grids: vec![1, 2, 4],
            fc: [128, 32],
            use_sa: true,
            use_spp: true,
            use_gd: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 || self.channels.contains(&0) || self.fc.contains(&0) {
            return Err(PpfError::Config("predictor dimensions must be positive".into()));
        }
        if self.dilations.contains(&0) {
            return Err(PpfError::Config("dilations must be at least 1".into()));
        }
        if self.use_spp {
            if self.spp_grids.is_empty() {
                return Err(PpfError::Config("pyramid pooling needs at least one grid".into()));
            }
            if let Some(g) = self.spp_grids.iter().find(|&&g| g == 0 || g > h || g > w) {
                return Err(PpfError::Config(format!("pyramid grid {g} does not fit a {h}x{w} input")));
            }
        }
        Ok(())
    }

    fn feature_width(&self) -> usize {
        let c = self.channels[2];
        let spp: usize = if self.use_spp {
            self.spp_grids.iter().map(|g| c * g * g).sum()
        } else {
            0
        };
        c + spp + usize::from(self.use_gd)
    }

    pub fn to_kv_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "input={}\nchannels={}\ndilations={}\nspp_grids={}\nfc={}\nuse_sa={}\nuse_spp={}\nuse_gd={}\n",
            list(&self.input),
            list(&self.channels),
            list(&self.dilations),
            list(&self.spp_grids),
            list(&self.fc),
            self.use_sa,
            self.use_spp,
            self.use_gd
        )
    }

    /// Applies one `key=value` setting. Returns false for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || PpfError::Config(format!("predictor {key}: cannot parse {value:?}"));
        let list = |n: usize| -> Result<Vec<usize>> {
            let v: Vec<usize> = value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if n > 0 && v.len() != n {
                return Err(bad());
            }
            Ok(v)
        };
        let flag = || value.trim().parse::<bool>().map_err(|_| bad());
        match key {
            "input" => self.input = list(3)?.try_into().map_err(|_| bad())?,
            "channels" => self.channels = list(3)?.try_into().map_err(|_| bad())?,
            "dilations" => self.dilations = list(3)?.try_into().map_err(|_| bad())?,
            "spp_grids" => self.spp_grids = list(0)?,
            "fc" => self.fc = list(2)?.try_into().map_err(|_| bad())?,
            "use_sa" => self.use_sa = flag()?,
            "use_spp" => self.use_spp = flag()?,
            "use_gd" => self.use_gd = flag()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::for_input([1, 1, 1]);
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| PpfError::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            if !cfg.set(k.trim(), v)? {
                return Err(PpfError::Parse {
                    line: i + 1,
                    msg: format!("unknown predictor key {:?}", k.trim()),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dilated conv stack, optional spatial attention, pooled branches and an
/// MLP head squashed to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PredictorNet {
    config: PredictorConfig,
    params: ParamSet,
}

impl PredictorNet {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut c_in = config.input[0];
        for (i, &c) in config.channels.iter().enumerate() {
            ps.push(Parameter::new(
                format!("conv{i}.w"),
                xavier_uniform(&[c, c_in, 3, 3], c_in * 9, c * 9, &mut rng),
            ))?;
            ps.push(Parameter::new(format!("conv{i}.b"), Tensor::zeros(&[c])))?;
            c_in = c;
        }
        if config.use_sa {
            ps.push(Parameter::new("sa.w", xavier_uniform(&[1, 2, 3, 3], 18, 9, &mut rng)))?;
            ps.push(Parameter::new("sa.b", Tensor::zeros(&[1])))?;
        }
        let mut width = config.feature_width();
        for (i, &out) in config.fc.iter().chain(&[1]).enumerate() {
            ps.push(Parameter::new(format!("fc{i}.w"), xavier_uniform(&[width, out], width, out, &mut rng)))?;
            ps.push(Parameter::new(format!("fc{i}.b"), Tensor::zeros(&[out])))?;
            width = out;
        }
        Ok(Self { config, params: ps })
    }

    pub fn from_params(config: PredictorConfig, params: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        let same = template.params.len() == params.len()
            && template
                .params
                .iter()
                .zip(params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(PpfError::Config("predictor weights do not match its configuration".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Builds the forward pass on `x: [C, H, W]` with parameters bound as `p`.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, p: &[Var], x: Var) -> Result<Var> {
        let cfg = &self.config;
        let mut i = 0;
        let mut next = || {
            i += 1;
            p[i - 1]
        };
        let mut h = x;
        for &d in &cfg.dilations {
            let (w, b) = (next(), next());
            let c = g.conv2d(h, w, Some(b), d, d)?;
            h = g.relu(c)?;
        }
        if cfg.use_sa {
            let (w, b) = (next(), next());
            let mean = g.channel_mean(h)?;
            let max = g.channel_max(h)?;
            let stacked = g.concat(&[mean, max])?;
            let logits = g.conv2d(stacked, w, Some(b), 1, 1)?;
            let attn = g.sigmoid(logits)?;
            h = g.mul_planes(h, attn)?;
        }
        let c = cfg.channels[2];
        let gap = g.pool(h, PoolMode::Avg, (1, 1))?;
        let mut feats = vec![g.reshape(gap, &[1, c])?];
        if cfg.use_spp {
            for &grid in &cfg.spp_grids {
                let pooled = g.pool(h, PoolMode::Avg, (grid, grid))?;
                feats.push(g.reshape(pooled, &[1, c * grid * grid])?);
            }
        }
        if cfg.use_gd {
            let density = g.mean(x);
            feats.push(g.reshape(density, &[1, 1])?);
        }
        let mut z = g.concat_cols(&feats)?;
        for layer in 0..3 {
            let (w, b) = (next(), next());
            z = g.dense(z, w, b)?;
            z = if layer < 2 { g.relu(z)? } else { g.sigmoid(z)? };
        }
        Ok(g.reshape(z, &[])?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.config.input {
            return Err(PpfError::Config(format!(
                "predictor expects input {:?}, got {:?}",
                self.config.input,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, x: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).item())
    }

    /// One SGD-style gradient accumulation for squared error against `target`.
    fn accumulate(&mut self, x: &Tensor, target: f64) -> Result<f64> {
        let (grads, bound, loss) = {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let xv = g.constant(x.clone());
            let y = self.forward(&mut g, &p, xv)?;
            let loss = g.mse(y, &Tensor::scalar(target))?;
            (g.backward(loss)?, p, g.value(loss).item())
        };
        self.params.accumulate_grads(&grads, &bound);
        Ok(loss)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("ppf-predictor\n{}\n", self.config.to_kv_text()).into_bytes();
        out.extend(ppf_nn::encode_weights(&self.params)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes, "ppf-predictor")?;
        Self::from_params(PredictorConfig::from_kv_text(header)?, ppf_nn::decode_weights(body)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Splits `<tag>\n<key=value lines>\n\n<binary>` into header text and body.
pub(crate) fn split_header<'b>(bytes: &'b [u8], tag: &str) -> Result<(&'b str, &'b [u8])> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| PpfError::Format(format!("{tag} checkpoint has no header terminator")))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| PpfError::Format(format!("{tag} header is not UTF-8")))?;
    let body = header
        .strip_prefix(tag)
        .and_then(|h| h.strip_prefix('\n').or(h.is_empty().then_some("")))
        .ok_or_else(|| PpfError::Format(format!("not a {tag} checkpoint")))?;
    Ok((body, &bytes[split + 2..]))
}

pub fn predict(net: &PredictorNet, c: &CompressedMask) -> Result<f64> {
    net.predict(&c.grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub compressed: CompressedMask,
    pub js: f64,
    pub r_act: f64,
    pub policy: ActionDecoded,
}

/// The `(ratio, method, scale)` grid explored during collection.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectGrid {
    pub ratios: Vec<f64>,
    pub methods: Vec<ImportanceMethod>,
    pub scales: Vec<f64>,
}

impl Default for CollectGrid {
    fn default() -> Self {
        Self {
            ratios: (0..25).map(|i| (100 + 25 * i) as f64 / 1000.0).collect(),
            methods: ImportanceMethod::ALL.to_vec(),
            scales: (0..11).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

impl CollectGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.methods.is_empty() || self.scales.is_empty() {
            return Err(PpfError::Input("collection grid has an empty axis".into()));
        }
        Ok(())
    }

    pub fn policies(&self) -> Result<Vec<ActionDecoded>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.ratios.len() * self.methods.len() * self.scales.len());
        for &r in &self.ratios {
            for &m in &self.methods {
                for &s in &self.scales {
                    out.push(ActionDecoded::new(m, s, r)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Collection {
    pub samples: Vec<PolicySample>,
    /// Policies whose evaluation failed, with the reason.
    pub failures: Vec<(ActionDecoded, String)>,
    pub candidates: usize,
    pub duplicates: usize,
}

/// Evaluates every grid policy with a distinct pruning mask, in grid order.
/// Evaluations are spread over `workers` threads; results keep grid order.
pub fn collect_dataset(ev: &Evaluator, grid: &CollectGrid, workers: usize) -> Result<Collection> {
    let policies = grid.policies()?;
    let cfg = ev.model().config();
    let mut seen = HashSet::new();
    let mut failures = Vec::new();
    let mut unique: Vec<(ActionDecoded, PruningMask)> = Vec::new();
    let mut duplicates = 0;
    for p in &policies {
        match ev.mask_for(p) {
            Ok(mask) if seen.insert(mask.clone()) => unique.push((*p, mask)),
            Ok(_) => duplicates += 1,
            Err(e) => failures.push((*p, e.to_string())),
        }
    }
    let run = |(policy, mask): &(ActionDecoded, PruningMask)| -> Result<PolicySample> {
        let js = ev.mask_js(mask)?;
        let r_act = actual_ratio(mask);
        if !(r_act > 0.0) {
            return Err(PpfError::Domain(format!("policy prunes nothing (r_act = {r_act})")));
        }
        Ok(PolicySample {
            compressed: compress_mask(mask, cfg)?,
            js,
            r_act,
            policy: *policy,
        })
    };
    let results = parallel_map(&unique, workers, run);
    let mut samples = Vec::with_capacity(results.len());
    for ((policy, _), r) in unique.iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => failures.push((*policy, e.to_string())),
        }
    }
    Ok(Collection {
        samples,
        failures,
        candidates: policies.len(),
        duplicates,
    })
}

/// Maps `f` over `items` on up to `workers` scoped threads, returning results
/// in input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

const DATASET_TAG: &str = "# ppf-dataset";

/// Line-delimited dataset text: a shape header, then one record per sample.
pub fn dataset_to_string(samples: &[PolicySample]) -> Result<String> {
    let shape = samples
        .first()
        .map(|s| s.compressed.grid.shape().to_vec())
        .unwrap_or_else(|| vec![1, 0, 0]);
    let mut out = format!("{DATASET_TAG} layers={} width={}\n", shape[1], shape[2]);
    for s in samples {
        if s.compressed.grid.shape() != shape.as_slice() {
            return Err(PpfError::Input("dataset samples have differing grid shapes".into()));
        }
        for v in s.compressed.grid.data() {
            out.push_str(&format!("{v:.6},"));
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.js, s.r_act, s.policy.method, s.policy.a_eta, s.policy.s_tar
        ));
    }
    Ok(out)
}

pub fn dataset_from_str(text: &str) -> Result<Vec<PolicySample>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(PpfError::Parse {
        line: 1,
        msg: "empty dataset file".into(),
    })?;
    let parse_err = |line: usize, msg: String| PpfError::Parse { line, msg };
    let dims: Vec<usize> = header
        .strip_prefix(DATASET_TAG)
        .map(|rest| {
            rest.split_whitespace()
                .filter_map(|kv| kv.split_once('=').and_then(|(_, v)| v.parse().ok()))
                .collect()
        })
        .unwrap_or_default();
    if dims.len() != 2 {
        return Err(parse_err(1, format!("expected '{DATASET_TAG} layers=L width=G', got {header:?}")));
    }
    let (l, w) = (dims[0], dims[1]);
    let n_grid = l * w;
    let mut out = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_grid + 5 {
            return Err(parse_err(ln, format!("expected {} fields, found {}", n_grid + 5, fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(ln, format!("not a number: {s:?}")))
        };
        let grid: Vec<f64> = fields[..n_grid].iter().map(|s| num(s)).collect::<Result<_>>()?;
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(parse_err(ln, "grid entries must lie in [0, 1]".into()));
        }
        let rest = &fields[n_grid..];
        let js = num(rest[0])?;
        if !(0.0..=1.0).contains(&js) {
            return Err(parse_err(ln, format!("js {js} is outside [0, 1]")));
        }
        let method: ImportanceMethod = rest[2].parse().map_err(|e: PpfError| parse_err(ln, e.to_string()))?;
        let policy = ActionDecoded::new(method, num(rest[3])?, num(rest[4])?).map_err(|e| parse_err(ln, e.to_string()))?;
        out.push(PolicySample {
            compressed: CompressedMask {
                grid: Tensor::from_vec(&[1, l, w], grid),
            },
            js,
            r_act: num(rest[1])?,
            policy,
        });
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[PolicySample]) -> Result<()> {
    crate::io::write_atomic(path, dataset_to_string(samples)?.as_bytes())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PolicySample>> {
    dataset_from_str(&std::fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            momentum: 0.9,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Seeded shuffle split into `(train, test)` index lists.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let test = idx.split_off(n - n_test.min(n));
    (idx, test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorMetrics {
    pub mae: f64,
    pub mse: f64,
    pub pearson: f64,
    pub predictions: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: PredictorNet,
    /// Mean train loss before any update.
    pub initial_loss: f64,
    /// Mean per-sample train loss of each epoch.
    pub curve: Vec<f64>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub test: PredictorMetrics,
}

pub fn metrics(predictions: Vec<f64>, targets: &[f64]) -> Result<PredictorMetrics> {
    if targets.is_empty() || predictions.len() != targets.len() {
        return Err(PpfError::Input("metrics need equal, nonempty prediction and target lists".into()));
    }
    let n = targets.len() as f64;
    let mae = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let pearson = stats::pearson(&predictions, targets);
    Ok(PredictorMetrics {
        mae,
        mse,
        pearson,
        predictions,
    })
}

pub fn evaluate_predictor(net: &PredictorNet, inputs: &[&Tensor], targets: &[f64]) -> Result<PredictorMetrics> {
    let preds = inputs.iter().map(|x| net.predict(x)).collect::<Result<Vec<_>>>()?;
    metrics(preds, targets)
}

/// Batch-size-1 SGD on squared error over a seeded 80/20 style split.
pub fn train_on(inputs: &[Tensor], targets: &[f64], net_cfg: PredictorConfig, s: &TrainSettings) -> Result<TrainOutcome> {
    if inputs.len() != targets.len() {
        return Err(PpfError::Input("inputs and targets differ in length".into()));
    }
    if inputs.len() < 10 {
        return Err(PpfError::Input(format!("need at least 10 samples, got {}", inputs.len())));
    }
    let (train_idx, test_idx) = split_indices(inputs.len(), s.test_fraction, s.seed);
    if test_idx.is_empty() {
        return Err(PpfError::Input("test split is empty".into()));
    }
    let mut net = PredictorNet::new(net_cfg, s.seed)?;
    let mean_loss = |net: &PredictorNet| -> Result<f64> {
        let mut sum = 0.0;
        for &i in &train_idx {
            let d = net.predict(&inputs[i])? - targets[i];
            sum += d * d;
        }
        Ok(sum / train_idx.len() as f64)
    };
    let initial_loss = mean_loss(&net)?;
    let mut opt = Sgd::new(s.lr, s.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed);
    let mut order = train_idx.clone();
    let mut curve = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let loss = net.accumulate(&inputs[i], targets[i])?;
            if !loss.is_finite() {
                return Err(PpfError::Training(format!("predictor loss is not finite in epoch {}", epoch + 1)));
            }
            sum += loss;
            opt.step(&mut net.params)?;
        }
        curve.push(sum / order.len() as f64);
    }
    let test_inputs: Vec<&Tensor> = test_idx.iter().map(|&i| &inputs[i]).collect();
    let test_targets: Vec<f64> = test_idx.iter().map(|&i| targets[i]).collect();
    let test = evaluate_predictor(&net, &test_inputs, &test_targets)?;
    Ok(TrainOutcome {
        net,
        initial_loss,
        curve,
        train_idx,
        test_idx,
        test,
    })
}

pub fn train_predictor(samples: &[PolicySample], s: &TrainSettings) -> Result<TrainOutcome> {
    let first = samples
        .first()
        .ok_or_else(|| PpfError::Input("no samples to train on".into()))?;
    let shape: [usize; 3] = first
        .compressed
        .grid
        .shape()
        .try_into()
        .map_err(|_| PpfError::Input("compressed masks must be rank 3".into()))?;
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.compressed.grid.clone()).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.js).collect();
    train_on(&inputs, &targets, PredictorConfig::for_input(shape), s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub label: String,
    pub curve: Vec<f64>,
    pub test_mse: f64,
}

/// Trains one net per compression mode on the same samples, split and seed.
pub fn compression_ablation(ev: &Evaluator, samples: &[PolicySample], s: &TrainSettings) -> Result<Vec<AblationResult>> {
    let masks = samples
        .iter()
        .map(|x| ev.mask_for(&x.policy))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = samples.iter().map(|x| x.js).collect();
    let cfg = ev.model().config();
    CompressionMode::ALL
        .iter()
        .map(|&mode| {
            let inputs = masks.iter().map(|m| render_mask(m, mode)).collect::<Result<Vec<_>>>()?;
            let out = train_on(&inputs, &targets, PredictorConfig::for_input(mode.input_shape(cfg)), s)?;
            Ok(AblationResult {
                label: mode.name().to_string(),
                curve: out.curve,
                test_mse: out.test.mse,
            })
        })
        .collect()
}

/// Predictor variants with branches knocked out, in reporting order.
pub fn module_variants(input: [usize; 3]) -> Vec<(&'static str, PredictorConfig)> {
    let full = PredictorConfig::for_input(input);
    let with = |sa, spp, gd| PredictorConfig {
        use_sa: sa,
        use_spp: spp,
        use_gd: gd,
        ..full.clone()
    };
    vec![
        ("base", with(false, false, false)),
        ("no_sa", with(false, true, true)),
        ("no_spp", with(true, false, true)),
        ("no_gd", with(true, true, false)),
        ("full", full.clone()),
    ]
}

pub fn module_ablation(samples: &[PolicySample], s: &TrainSettings) -> Result<Vec<AblationResult>> {
    let inputs: Vec<Tensor> = samples.iter().map(|x| x.compressed.grid.clone()).collect();
    let targets: Vec<f64> = samples.iter().map(|x| x.js).collect();
    let shape: [usize; 3] = inputs
        .first()
        .ok_or_else(|| PpfError::Input("no samples".into()))?
        .shape()
        .try_into()
        .map_err(|_| PpfError::Input("compressed masks must be rank 3".into()))?;
    module_variants(shape)
        .into_iter()
        .map(|(label, cfg)| {
            let out = train_on(&inputs, &targets, cfg, s)?;
            Ok(AblationResult {
                label: label.to_string(),
                curve: out.curve,
                test_mse: out.test.mse,
            })
        })
        .collect()
}

impl FromStr for CompressionMode {
    type Err = PpfError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| PpfError::Input(format!("unknown compression mode {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::GroupKind;

    #[test]
    fn toy_shapes_per_mode() {
        let cfg = ModelConfig::default();
        let m = PruningMask::all_kept(&cfg);
        assert_eq!(compress_mask(&m, &cfg).unwrap().grid.shape(), &[1, 8, 8]);
        assert_eq!(render_mask(&m, CompressionMode::Initial).unwrap().shape(), &[7, 8, 16]);
        assert_eq!(render_mask(&m, CompressionMode::Attention).unwrap().shape(), &[4, 8, 8]);
        assert_eq!(render_mask(&m, CompressionMode::Ffn).unwrap().shape(), &[1, 8, 16]);
        assert!(compress_mask(&m, &cfg).unwrap().grid.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn compressed_mean_is_kept_o_fraction() {
        let cfg = ModelConfig::default();
        let mut m = PruningMask::all_kept(&cfg);
        m.set_group(2, GroupKind::Attention, 1, false);
        m.set_group(5, GroupKind::Attention, 3, false);
        m.set_group(5, GroupKind::Ffn, 3, false);
        let c = compress_mask(&m, &cfg).unwrap();
        assert!((c.grid.mean() - 30.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn untrained_output_in_unit_interval() {
        let net = PredictorNet::new(PredictorConfig::for_input([1, 8, 8]), 3).unwrap();
        for fill in [0.0, 0.5, 1.0] {
            let y = net.predict(&Tensor::full(&[1, 8, 8], fill)).unwrap();
            assert!((0.0..=1.0).contains(&y));
        }
        assert!(net.predict(&Tensor::zeros(&[1, 8, 7])).is_err());
    }

    #[test]
    fn oversized_pyramid_is_rejected() {
        let cfg = PredictorConfig::for_input([1, 2, 2]);
        assert!(PredictorNet::new(cfg, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = PredictorNet::new(PredictorConfig::for_input([1, 8, 8]), 1).unwrap();
        let bytes = net.to_bytes().unwrap();
        let back = PredictorNet::from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn default_grid_size() {
        let g = CollectGrid::default();
        assert_eq!(g.policies().unwrap().len(), 825);
        assert_eq!(g.ratios[24], 0.7);
        assert_eq!(g.scales[10], 0.5);
        let empty = CollectGrid {
            ratios: vec![],
            ..CollectGrid::default()
        };
        assert!(empty.policies().is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let (a, b) = split_indices(100, 0.2, 4);
        assert_eq!((a.len(), b.len()), (80, 20));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.2, 4), (a, b));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<u32> = (0..37).collect();
        assert_eq!(parallel_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_errors_name_the_line() {
        let s = PolicySample {
            compressed: CompressedMask {
                grid: Tensor::full(&[1, 2, 2], 0.5),
            },
            js: 0.1,
            r_act: 0.3,
            policy: ActionDecoded::uniform(0.3),
        };
        let text = dataset_to_string(&[s.clone(), s.clone(), s]).unwrap();
        let back = dataset_from_str(&text).unwrap();
        assert_eq!(dataset_to_string(&back).unwrap(), text);
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "0.5,0.5,oops";
        let err = dataset_from_str(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, PpfError::Parse { line: 3, .. }), "{err}");
    }
}

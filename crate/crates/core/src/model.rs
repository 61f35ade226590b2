//! Decoder-only toy transformer: pre-norm blocks with RMS normalisation,
//! grouped-query causal attention and a gated SiLU feed-forward network.

use std::fmt;
use std::path::Path;

use ppf_nn::{xavier_uniform, Adam, Graph, Optimizer, ParamSet, Parameter, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PpfError, Result};
use crate::pruning::PruningMask;

const NORM_EPS: f64 = 1e-6;

/// The seven prunable matrix types of one block, in mask-axis order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 7] = [
        MatrixKind::Q,
        MatrixKind::K,
        MatrixKind::V,
        MatrixKind::O,
        MatrixKind::Up,
        MatrixKind::Gate,
        MatrixKind::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Q => "q_proj",
            MatrixKind::K => "k_proj",
            MatrixKind::V => "v_proj",
            MatrixKind::O => "o_proj",
            MatrixKind::Up => "up_proj",
            MatrixKind::Gate => "gate_proj",
            MatrixKind::Down => "down_proj",
        }
    }

    /// Stored shape `[out, in]`.
    pub fn shape(self, cfg: &ModelConfig) -> [usize; 2] {
        let (d, kv, f) = (cfg.d_model, cfg.kv_width(), cfg.d_ffn);
        match self {
            MatrixKind::Q | MatrixKind::O => [d, d],
            MatrixKind::K | MatrixKind::V => [kv, d],
            MatrixKind::Up | MatrixKind::Gate => [f, d],
            MatrixKind::Down => [d, f],
        }
    }

    /// Width of the prunable channel axis: rows for Q/K/V/Up/Gate, columns for O/Down.
    pub fn channel_width(self, cfg: &ModelConfig) -> usize {
        match self {
            MatrixKind::O | MatrixKind::Down => self.shape(cfg)[1],
            _ => self.shape(cfg)[0],
        }
    }

    /// Channels run along columns rather than rows.
    pub fn prunes_columns(self) -> bool {
        matches!(self, MatrixKind::O | MatrixKind::Down)
    }

    fn slot(self) -> usize {
        match self {
            MatrixKind::Q => 1,
            MatrixKind::K => 2,
            MatrixKind::V => 3,
            MatrixKind::O => 4,
            MatrixKind::Up => 6,
            MatrixKind::Gate => 7,
            MatrixKind::Down => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub group_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 4,
            d_ffn: 128,
            vocab: 64,
            group_size: 8,
            seq_len: 32,
        }
    }
}

impl ModelConfig {
    /// Llama2-7B dimensions; only usable for shape-level work.
    pub fn llama2_7b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            n_heads: 32,
            n_kv_heads: 32,
            d_ffn: 11008,
            vocab: 32000,
            group_size: 128,
            seq_len: 4096,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads per key/value head.
    pub fn heads_per_kv(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn ffn_groups(&self) -> usize {
        self.d_ffn / self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ffn", self.d_ffn),
            ("group_size", self.group_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(PpfError::Config(format!("{name} must be positive")));
        }
        if self.vocab < 4 {
            return Err(PpfError::Config(format!("vocab {} is below 4", self.vocab)));
        }
        let divides = [
            ("d_model", self.d_model, "n_heads", self.n_heads),
            ("n_heads", self.n_heads, "n_kv_heads", self.n_kv_heads),
            ("d_ffn", self.d_ffn, "group_size", self.group_size),
            ("d_model", self.d_model, "group_size", self.group_size),
        ];
        for (a, x, b, y) in divides {
            if x % y != 0 {
                return Err(PpfError::Config(format!("{a} ({x}) is not divisible by {b} ({y})")));
            }
        }
        Ok(())
    }

    /// Flat `key=value` lines.
    pub fn to_kv_text(&self) -> String {
        format!(
            "n_layers={}\nd_model={}\nn_heads={}\nn_kv_heads={}\nd_ffn={}\nvocab={}\ngroup_size={}\nseq_len={}\n",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.n_kv_heads,
            self.d_ffn,
            self.vocab,
            self.group_size,
            self.seq_len
        )
    }

    /// Applies one `key=value` setting. Returns false for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "n_layers" => &mut self.n_layers,
            "d_model" => &mut self.d_model,
            "n_heads" => &mut self.n_heads,
            "n_kv_heads" => &mut self.n_kv_heads,
            "d_ffn" => &mut self.d_ffn,
            "vocab" => &mut self.vocab,
            "group_size" => &mut self.group_size,
            "seq_len" => &mut self.seq_len,
            _ => return Ok(false),
        };
        *slot = value
            .trim()
            .parse()
            .map_err(|_| PpfError::Config(format!("{key}: expected a non-negative integer, got {value:?}")))?;
        Ok(true)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| PpfError::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            if !cfg.set(k.trim(), v)? {
                return Err(PpfError::Parse {
                    line: i + 1,
                    msg: format!("unknown model key {:?}", k.trim()),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} d_model={} heads={}/{} d_ffn={} vocab={} g={}",
            self.n_layers, self.d_model, self.n_heads, self.n_kv_heads, self.d_ffn, self.vocab, self.group_size
        )
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

const PER_LAYER: usize = 9;
const ATTN_NORM: usize = 0;
const FFN_NORM: usize = 5;

/// Hidden states recorded inside one block, each `[positions, width]`.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub block_in: Tensor,
    /// Normalised input of Q/K/V.
    pub attn_in: Tensor,
    /// Concatenated head outputs, the input of O.
    pub attn_mix: Tensor,
    /// Normalised input of Up/Gate.
    pub ffn_in: Tensor,
    /// Gated hidden activations, the input of Down.
    pub ffn_hidden: Tensor,
    pub block_out: Tensor,
}

impl LayerTrace {
    /// The activation matrix each weight type multiplies.
    pub fn input_of(&self, kind: MatrixKind) -> &Tensor {
        match kind {
            MatrixKind::Q | MatrixKind::K | MatrixKind::V => &self.attn_in,
            MatrixKind::O => &self.attn_mix,
            MatrixKind::Up | MatrixKind::Gate => &self.ffn_in,
            MatrixKind::Down => &self.ffn_hidden,
        }
    }
}

pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, v) = (config.d_model, config.vocab);
    let mut ps = ParamSet::new();
    ps.push(Parameter::new("tok_emb", unit_uniform(&[v, d], &mut rng)))?;
    ps.push(Parameter::new("pos_emb", unit_uniform(&[config.seq_len, d], &mut rng)))?;
    for i in 0..config.n_layers {
        ps.push(Parameter::new(format!("layers.{i}.attn_norm"), Tensor::ones(&[d])))?;
        for kind in &MatrixKind::ALL[..4] {
            push_matrix(&mut ps, &config, i, *kind, &mut rng)?;
        }
        ps.push(Parameter::new(format!("layers.{i}.ffn_norm"), Tensor::ones(&[d])))?;
        for kind in &MatrixKind::ALL[4..] {
            push_matrix(&mut ps, &config, i, *kind, &mut rng)?;
        }
    }
    ps.push(Parameter::new("final_norm", Tensor::ones(&[d])))?;
    ps.push(Parameter::new("lm_head", xavier_uniform(&[v, d], d, v, &mut rng)))?;
    Ok(Model { config, params: ps })
}

fn push_matrix(ps: &mut ParamSet, cfg: &ModelConfig, layer: usize, kind: MatrixKind, rng: &mut impl Rng) -> Result<()> {
    let [out, inp] = kind.shape(cfg);
    let name = format!("layers.{layer}.{}", kind.name());
    let mut w = xavier_uniform(&[out, inp], inp, out, rng);
    // Projections that write into the residual stream start scaled down so
    // no single block dominates it.
    if matches!(kind, MatrixKind::O | MatrixKind::Down) {
        let s = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
        w.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    ps.push(Parameter::new(name, w))?;
    Ok(())
}

/// Uniform entries with unit variance.
fn unit_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let a = 3f64.sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-a..a)).collect())
}

impl Model {
    /// Wraps an existing parameter set, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let template = build_model(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(PpfError::Config(format!(
                "expected {} parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(PpfError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn checksum(&self) -> f64 {
        self.params.checksum()
    }

    fn layer_index(&self, layer: usize, slot: usize) -> usize {
        2 + layer * PER_LAYER + slot
    }

    pub fn weight(&self, layer: usize, kind: MatrixKind) -> &Tensor {
        &self.params[self.layer_index(layer, kind.slot())].value
    }

    pub fn weight_mut(&mut self, layer: usize, kind: MatrixKind) -> &mut Tensor {
        let i = self.layer_index(layer, kind.slot());
        &mut self.params[i].value
    }

    /// Zeroes every weight of one block, leaving only its residual path.
    pub fn zero_block(&mut self, layer: usize) {
        for kind in MatrixKind::ALL {
            self.weight_mut(layer, kind).data_mut().fill(0.0);
        }
    }

    /// Logits for one chunk of at most `seq_len` tokens.
    fn chunk_logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        p: &[Var],
        tokens: &[usize],
        mask: Option<&PruningMask>,
        mut trace: Option<&mut Vec<[Var; 6]>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let t = tokens.len();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.embedding(p[0], tokens)?;
        let pos = g.embedding(p[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        for layer in 0..cfg.n_layers {
            let w = |slot: usize| p[self.layer_index(layer, slot)];
            let block_in = x;
            let h = g.rms_norm(x, w(ATTN_NORM), NORM_EPS)?;
            let q = g.matmul_nt(h, w(MatrixKind::Q.slot()))?;
            let k = g.matmul_nt(h, w(MatrixKind::K.slot()))?;
            let v = g.matmul_nt(h, w(MatrixKind::V.slot()))?;
            let mut mix = g.causal_attention(q, k, v, cfg.n_heads, cfg.n_kv_heads)?;
            if let Some(m) = mask {
                let hd = cfg.head_dim();
                let row: Vec<f64> = (0..cfg.d_model)
                    .map(|c| f64::from(u8::from(m.query_head_kept(layer, c / hd))))
                    .collect();
                let keep = g.constant(Tensor::from_vec(&[t, cfg.d_model], row.repeat(t)));
                mix = g.mul(mix, keep)?;
            }
            let o = g.matmul_nt(mix, w(MatrixKind::O.slot()))?;
            x = g.add(x, o)?;
            let h2 = g.rms_norm(x, w(FFN_NORM), NORM_EPS)?;
            let up = g.matmul_nt(h2, w(MatrixKind::Up.slot()))?;
            let gate = g.matmul_nt(h2, w(MatrixKind::Gate.slot()))?;
            let act = g.silu(gate)?;
            let mut hidden = g.mul(act, up)?;
            if let Some(m) = mask {
                let row: Vec<f64> = (0..cfg.d_ffn)
                    .map(|c| f64::from(u8::from(m.ffn_channel_kept(layer, c))))
                    .collect();
                let keep = g.constant(Tensor::from_vec(&[t, cfg.d_ffn], row.repeat(t)));
                hidden = g.mul(hidden, keep)?;
            }
            let down = g.matmul_nt(hidden, w(MatrixKind::Down.slot()))?;
            x = g.add(x, down)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push([block_in, h, mix, h2, hidden, x]);
            }
        }
        let n = self.params.len();
        let xf = g.rms_norm(x, p[n - 2], NORM_EPS)?;
        Ok(g.matmul_nt(xf, p[n - 1])?)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(PpfError::Input(format!("token {bad} is outside vocab {}", self.config.vocab)));
        }
        Ok(())
    }

    fn run(&self, tokens: &[usize], mask: Option<&PruningMask>, want_trace: bool) -> Result<(Tensor, Vec<LayerTrace>)> {
        self.check_tokens(tokens)?;
        if let Some(m) = mask {
            m.check_config(&self.config)?;
        }
        let cfg = &self.config;
        let mut probs = Vec::with_capacity(tokens.len() * cfg.vocab);
        let mut traces: Vec<[Vec<f64>; 6]> = if want_trace {
            (0..cfg.n_layers).map(|_| Default::default()).collect()
        } else {
            Vec::new()
        };
        for chunk in tokens.chunks(cfg.seq_len) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let mut vars = Vec::new();
            let logits = self.chunk_logits(&mut g, &p, chunk, mask, want_trace.then_some(&mut vars))?;
            let sm = g.softmax(logits)?;
            probs.extend_from_slice(g.value(sm).data());
            for (acc, layer_vars) in traces.iter_mut().zip(&vars) {
                for (a, v) in acc.iter_mut().zip(layer_vars) {
                    a.extend_from_slice(g.value(*v).data());
                }
            }
        }
        let n = tokens.len();
        let traces = traces
            .into_iter()
            .map(|[bi, ai, am, fi, fh, bo]| {
                let (d, f) = (cfg.d_model, cfg.d_ffn);
                LayerTrace {
                    block_in: Tensor::from_vec(&[n, d], bi),
                    attn_in: Tensor::from_vec(&[n, d], ai),
                    attn_mix: Tensor::from_vec(&[n, d], am),
                    ffn_in: Tensor::from_vec(&[n, d], fi),
                    ffn_hidden: Tensor::from_vec(&[n, f], fh),
                    block_out: Tensor::from_vec(&[n, d], bo),
                }
            })
            .collect();
        Ok((Tensor::from_vec(&[n, cfg.vocab], probs), traces))
    }

    /// Next-token distributions, one row per position. Tokens are processed in
    /// independent windows of `seq_len`.
    pub fn forward_distributions(&self, tokens: &[usize], mask: Option<&PruningMask>) -> Result<Tensor> {
        Ok(self.run(tokens, mask, false)?.0)
    }

    /// Per-layer hidden states for `tokens`.
    pub fn trace(&self, tokens: &[usize]) -> Result<Vec<LayerTrace>> {
        Ok(self.run(tokens, None, true)?.1)
    }

    /// `(block input, block output)` per layer.
    pub fn capture_block_io(&self, tokens: &[usize]) -> Result<Vec<(Tensor, Tensor)>> {
        Ok(self
            .trace(tokens)?
            .into_iter()
            .map(|t| (t.block_in, t.block_out))
            .collect())
    }

    /// Mean next-token cross-entropy (nats) over consecutive windows of `tokens`.
    pub fn loss(&self, tokens: &[usize]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let win = self.config.seq_len + 1;
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in tokens.chunks(win).filter(|c| c.len() >= 2) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let logits = self.chunk_logits(&mut g, &p, &chunk[..chunk.len() - 1], None, None)?;
            let l = g.cross_entropy(logits, &chunk[1..])?;
            total += g.value(l).item() * (chunk.len() - 1) as f64;
            count += chunk.len() - 1;
        }
        if count == 0 {
            return Err(PpfError::Input("need at least two tokens to measure loss".into()));
        }
        Ok(total / count as f64)
    }

    /// Writes a checkpoint: a `ppf-model` text header carrying the config,
    /// a blank line, then the weight file bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("ppf-model\n{}\n", self.config.to_kv_text()).into_bytes();
        out.extend(ppf_nn::encode_weights(&self.params)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| PpfError::Format("model checkpoint has no header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| PpfError::Format("model header is not UTF-8".into()))?;
        let body = header
            .strip_prefix("ppf-model\n")
            .ok_or_else(|| PpfError::Format("not a ppf-model checkpoint".into()))?;
        let config = ModelConfig::from_kv_text(body)?;
        let params = ppf_nn::decode_weights(&bytes[split + 2..])?;
        Self::from_params(config, params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Windows of `seq_len` tokens per step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            batch: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Fits the model to next-token prediction on `train` with Adam, measuring
/// held-out loss before and after.
pub fn quick_train(mut model: Model, train: &[usize], heldout: &[usize], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let initial_loss = model.loss(heldout)?;
    if cfg.steps == 0 {
        return Ok((
            model,
            TrainReport {
                initial_loss,
                final_loss: initial_loss,
            },
        ));
    }
    let win = model.config.seq_len + 1;
    if train.len() < win {
        return Err(PpfError::Input(format!("training corpus needs at least {win} tokens")));
    }
    model.check_tokens(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    for step in 0..cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch.max(1))
            .map(|_| rng.random_range(0..=train.len() - win))
            .collect();
        let grads = {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let mut losses = Vec::new();
            for &s in &starts {
                let w = &train[s..s + win];
                let logits = model.chunk_logits(&mut g, &p, &w[..win - 1], None, None)?;
                losses.push(g.cross_entropy(logits, &w[1..])?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let loss = g.scale(total, 1.0 / losses.len() as f64);
            if !g.value(loss).item().is_finite() {
                return Err(PpfError::Training(format!("loss diverged at step {step}")));
            }
            let grads = g.backward(loss)?;
            (grads, p)
        };
        model.params.accumulate_grads(&grads.0, &grads.1);
        opt.step(&mut model.params)?;
    }
    let final_loss = model.loss(heldout)?;
    if !final_loss.is_finite() {
        return Err(PpfError::Training("held-out loss is not finite after training".into()));
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
        },
    ))
}

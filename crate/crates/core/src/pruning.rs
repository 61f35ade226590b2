//! Dependency-grouped structured pruning.
//!
//! Attention is pruned per key/value head: the group covers the Q rows of
//! every query head reading that KV head, the K and V rows, and the O columns
//! of those query heads. The FFN is pruned in groups of `group_size` hidden
//! channels: Up and Gate rows plus Down columns.

use std::ops::Range;
use std::path::Path;

use ppf_nn::Tensor;

use crate::error::{PpfError, Result};
use crate::model::{MatrixKind, Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Attention,
    Ffn,
}

/// A contiguous run of rows (or columns) of one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub matrix: MatrixKind,
    pub columns: bool,
    pub range: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyGroup {
    pub layer: usize,
    pub kind: GroupKind,
    /// Index among the layer's groups of the same kind.
    pub index: usize,
    pub slices: Vec<Slice>,
    pub param_count: usize,
}

fn slice_len(cfg: &ModelConfig, s: &Slice) -> usize {
    let [rows, cols] = s.matrix.shape(cfg);
    s.range.len() * if s.columns { rows } else { cols }
}

fn attention_group(cfg: &ModelConfig, layer: usize, kv: usize) -> DependencyGroup {
    let hd = cfg.head_dim();
    let q = kv * cfg.heads_per_kv() * hd..(kv + 1) * cfg.heads_per_kv() * hd;
    let k = kv * hd..(kv + 1) * hd;
    let slices = vec![
        Slice { matrix: MatrixKind::Q, columns: false, range: q.clone() },
        Slice { matrix: MatrixKind::K, columns: false, range: k.clone() },
        Slice { matrix: MatrixKind::V, columns: false, range: k },
        Slice { matrix: MatrixKind::O, columns: true, range: q },
    ];
    finish_group(cfg, layer, GroupKind::Attention, kv, slices)
}

fn ffn_group(cfg: &ModelConfig, layer: usize, gi: usize) -> DependencyGroup {
    let r = gi * cfg.group_size..(gi + 1) * cfg.group_size;
    let slices = vec![
        Slice { matrix: MatrixKind::Up, columns: false, range: r.clone() },
        Slice { matrix: MatrixKind::Gate, columns: false, range: r.clone() },
        Slice { matrix: MatrixKind::Down, columns: true, range: r },
    ];
    finish_group(cfg, layer, GroupKind::Ffn, gi, slices)
}

fn finish_group(cfg: &ModelConfig, layer: usize, kind: GroupKind, index: usize, slices: Vec<Slice>) -> DependencyGroup {
    let param_count = slices.iter().map(|s| slice_len(cfg, s)).sum();
    DependencyGroup {
        layer,
        kind,
        index,
        slices,
        param_count,
    }
}

/// All groups, layer by layer: attention groups first, then FFN groups.
pub fn enumerate_groups(cfg: &ModelConfig) -> Vec<DependencyGroup> {
    let mut out = Vec::with_capacity(cfg.n_layers * (cfg.n_kv_heads + cfg.ffn_groups()));
    for layer in 0..cfg.n_layers {
        out.extend((0..cfg.n_kv_heads).map(|kv| attention_group(cfg, layer, kv)));
        out.extend((0..cfg.ffn_groups()).map(|gi| ffn_group(cfg, layer, gi)));
    }
    out
}

/// Parameters covered by the seven prunable matrices of every layer.
pub fn prunable_params(cfg: &ModelConfig) -> usize {
    cfg.n_layers
        * MatrixKind::ALL
            .iter()
            .map(|k| k.shape(cfg).iter().product::<usize>())
            .sum::<usize>()
}

/// L2 norm of all weights a group covers.
pub fn group_salience(model: &Model, groups: &[DependencyGroup]) -> Vec<f64> {
    groups
        .iter()
        .map(|grp| {
            grp.slices
                .iter()
                .map(|s| {
                    let w = model.weight(grp.layer, s.matrix);
                    let cols = w.shape()[1];
                    if s.columns {
                        (0..w.shape()[0])
                            .map(|r| w.data()[r * cols + s.range.start..r * cols + s.range.end].iter().map(|v| v * v).sum::<f64>())
                            .sum::<f64>()
                    } else {
                        w.data()[s.range.start * cols..s.range.end * cols].iter().map(|v| v * v).sum()
                    }
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Per-layer target pruning ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRatios(Vec<f64>);

impl LayerRatios {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PpfError::Input(format!("layer ratio {bad} is outside [0, 1]")));
        }
        Ok(Self(s))
    }

    pub fn uniform(n_layers: usize, s: f64) -> Result<Self> {
        Self::new(vec![s; n_layers])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Keep bits per (layer, group) for both structure kinds.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PruningMask {
    config: ModelConfig,
    attn: Vec<bool>,
    ffn: Vec<bool>,
}

impl PruningMask {
    pub fn all_kept(cfg: &ModelConfig) -> Self {
        Self {
            config: cfg.clone(),
            attn: vec![true; cfg.n_layers * cfg.n_kv_heads],
            ffn: vec![true; cfg.n_layers * cfg.ffn_groups()],
        }
    }

    pub fn all_pruned(cfg: &ModelConfig) -> Self {
        let mut m = Self::all_kept(cfg);
        m.attn.fill(false);
        m.ffn.fill(false);
        m
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.config != cfg {
            return Err(PpfError::Config(format!("mask built for [{}] used with [{}]", self.config, cfg)));
        }
        Ok(())
    }

    pub fn attn_kept(&self, layer: usize, kv: usize) -> bool {
        self.attn[layer * self.config.n_kv_heads + kv]
    }

    pub fn ffn_kept(&self, layer: usize, group: usize) -> bool {
        self.ffn[layer * self.config.ffn_groups() + group]
    }

    pub fn group_kept(&self, g: &DependencyGroup) -> bool {
        match g.kind {
            GroupKind::Attention => self.attn_kept(g.layer, g.index),
            GroupKind::Ffn => self.ffn_kept(g.layer, g.index),
        }
    }

    pub fn set_group(&mut self, layer: usize, kind: GroupKind, index: usize, keep: bool) {
        match kind {
            GroupKind::Attention => self.attn[layer * self.config.n_kv_heads + index] = keep,
            GroupKind::Ffn => self.ffn[layer * self.config.ffn_groups() + index] = keep,
        }
    }

    pub fn query_head_kept(&self, layer: usize, head: usize) -> bool {
        self.attn_kept(layer, head / self.config.heads_per_kv())
    }

    pub fn ffn_channel_kept(&self, layer: usize, channel: usize) -> bool {
        self.ffn_kept(layer, channel / self.config.group_size)
    }

    /// Keep bit of one channel of one matrix type.
    pub fn channel_kept(&self, kind: MatrixKind, layer: usize, channel: usize) -> bool {
        let hd = self.config.head_dim();
        match kind {
            MatrixKind::Q | MatrixKind::O => self.query_head_kept(layer, channel / hd),
            MatrixKind::K | MatrixKind::V => self.attn_kept(layer, channel / hd),
            MatrixKind::Up | MatrixKind::Gate | MatrixKind::Down => self.ffn_channel_kept(layer, channel),
        }
    }

    /// Recovers group bits from a dense mask, rejecting any group whose
    /// slices disagree.
    pub fn from_dense(dense: &DenseMask, cfg: &ModelConfig) -> Result<Self> {
        let want = dense_shape(cfg);
        if dense.shape != want {
            return Err(PpfError::Config(format!("dense mask shape {:?} does not match {:?}", dense.shape, want)));
        }
        let mut mask = Self::all_kept(cfg);
        for g in enumerate_groups(cfg) {
            let mut bits = g
                .slices
                .iter()
                .flat_map(|s| s.range.clone().map(move |c| dense.get(s.matrix.index(), g.layer, c)));
            let first = bits.next().unwrap_or(true);
            if bits.any(|b| b != first) {
                return Err(PpfError::Input(format!(
                    "layer {} {:?} group {} has inconsistent keep bits",
                    g.layer, g.kind, g.index
                )));
            }
            mask.set_group(g.layer, g.kind, g.index, first);
        }
        Ok(mask)
    }
}

/// Number of groups to prune out of `n` at ratio `s`: nearest integer, with
/// exact halves rounded toward pruning fewer.
pub fn prune_count(s: f64, n: usize) -> usize {
    let x = s * n as f64;
    ((x - 0.5).ceil().max(0.0) as usize).min(n)
}

/// Group order by ascending salience, per layer and kind. Building masks from
/// a ranking avoids rescoring the model for every policy.
#[derive(Clone, Debug)]
pub struct SalienceRanking {
    config: ModelConfig,
    attn: Vec<Vec<usize>>,
    ffn: Vec<Vec<usize>>,
}

impl SalienceRanking {
    pub fn new(model: &Model) -> Self {
        let cfg = model.config();
        let groups = enumerate_groups(cfg);
        let scores = group_salience(model, &groups);
        let per_layer = cfg.n_kv_heads + cfg.ffn_groups();
        let order = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
            idx
        };
        let (mut attn, mut ffn) = (Vec::new(), Vec::new());
        for layer in scores.chunks(per_layer) {
            attn.push(order(&layer[..cfg.n_kv_heads]));
            ffn.push(order(&layer[cfg.n_kv_heads..]));
        }
        Self {
            config: cfg.clone(),
            attn,
            ffn,
        }
    }

    pub fn build(&self, ratios: &LayerRatios) -> Result<PruningMask> {
        if ratios.len() != self.config.n_layers {
            return Err(PpfError::Input(format!(
                "{} layer ratios for {} layers",
                ratios.len(),
                self.config.n_layers
            )));
        }
        let mut mask = PruningMask::all_kept(&self.config);
        for (layer, &s) in ratios.as_slice().iter().enumerate() {
            for (kind, order) in [(GroupKind::Attention, &self.attn[layer]), (GroupKind::Ffn, &self.ffn[layer])] {
                for &gi in &order[..prune_count(s, order.len())] {
                    mask.set_group(layer, kind, gi, false);
                }
            }
        }
        Ok(mask)
    }
}

pub fn build_mask(model: &Model, ratios: &LayerRatios) -> Result<PruningMask> {
    SalienceRanking::new(model).build(ratios)
}

/// Copy of `model` with every pruned group's weights set to zero.
pub fn apply_mask(model: &Model, mask: &PruningMask) -> Result<Model> {
    mask.check_config(model.config())?;
    let mut out = model.clone();
    for g in enumerate_groups(model.config()) {
        if mask.group_kept(&g) {
            continue;
        }
        for s in &g.slices {
            let w = out.weight_mut(g.layer, s.matrix);
            let cols = w.shape()[1];
            let rows = w.shape()[0];
            let data = w.data_mut();
            if s.columns {
                for r in 0..rows {
                    data[r * cols + s.range.start..r * cols + s.range.end].fill(0.0);
                }
            } else {
                data[s.range.start * cols..s.range.end * cols].fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Fraction of prunable parameters removed by `mask`.
pub fn actual_ratio(mask: &PruningMask) -> f64 {
    let cfg = mask.config();
    let attn_params = attention_group(cfg, 0, 0).param_count;
    let ffn_params = ffn_group(cfg, 0, 0).param_count;
    let pruned_attn = mask.attn.iter().filter(|k| !**k).count();
    let pruned_ffn = mask.ffn.iter().filter(|k| !**k).count();
    (pruned_attn * attn_params + pruned_ffn * ffn_params) as f64 / prunable_params(cfg) as f64
}

pub fn dense_shape(cfg: &ModelConfig) -> [usize; 3] {
    let width = MatrixKind::ALL.iter().map(|k| k.channel_width(cfg)).max().unwrap_or(0);
    [MatrixKind::ALL.len(), cfg.n_layers, width]
}

/// Binary tensor of shape `(planes, layers, width)`; 1 means kept.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DenseMask {
    shape: [usize; 3],
    bits: Vec<u8>,
}

impl DenseMask {
    pub fn new(shape: [usize; 3], bits: Vec<u8>) -> Result<Self> {
        if bits.len() != shape.iter().product::<usize>() {
            return Err(PpfError::Input(format!("{} bits for shape {shape:?}", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(PpfError::Input("dense mask entries must be 0 or 1".into()));
        }
        Ok(Self { shape, bits })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, plane: usize, layer: usize, channel: usize) -> bool {
        self.bits[(plane * self.shape[1] + layer) * self.shape[2] + channel] == 1
    }

    /// Keeps the listed planes (in the given order) and crops the width to
    /// `width`.
    pub fn select(&self, planes: &[usize], width: usize) -> Result<DenseMask> {
        let [p, l, w] = self.shape;
        if width > w || planes.iter().any(|&i| i >= p) {
            return Err(PpfError::Input(format!("cannot select planes {planes:?} width {width} from {:?}", self.shape)));
        }
        let mut bits = Vec::with_capacity(planes.len() * l * width);
        for &plane in planes {
            for layer in 0..l {
                let start = (plane * l + layer) * w;
                bits.extend_from_slice(&self.bits[start..start + width]);
            }
        }
        Ok(DenseMask {
            shape: [planes.len(), l, width],
            bits,
        })
    }

    /// Averages each run of `g` channels: `(p, l, w) → (p, l, w/g)`.
    pub fn group_average(&self, g: usize) -> Result<Tensor> {
        let [p, l, w] = self.shape;
        if g == 0 || w % g != 0 {
            return Err(PpfError::Config(format!("width {w} is not divisible by group size {g}")));
        }
        let data = self
            .bits
            .chunks(g)
            .map(|c| c.iter().map(|&b| f64::from(b)).sum::<f64>() / g as f64)
            .collect();
        Ok(Tensor::from_vec(&[p, l, w / g], data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.bits.len() / 8 + 1);
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            packed[i / 8] |= b << (i % 8);
        }
        out.extend(packed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| PpfError::Format(format!("mask file: {m}"));
        if bytes.len() < 20 || &bytes[..4] != MASK_MAGIC {
            return Err(bad("missing PPFM header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        if u32_at(4) != MASK_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let shape = [u32_at(8), u32_at(12), u32_at(16)];
        let n: usize = shape.iter().product();
        let body = &bytes[20..];
        if body.len() != n.div_ceil(8) {
            return Err(bad("bit payload length does not match dimensions"));
        }
        if !n.is_multiple_of(8) && body[body.len() - 1] >> (n % 8) != 0 {
            return Err(bad("nonzero padding bits"));
        }
        let bits = (0..n).map(|i| (body[i / 8] >> (i % 8)) & 1).collect();
        Ok(Self { shape, bits })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const MASK_MAGIC: &[u8; 4] = b"PPFM";
const MASK_VERSION: u32 = 1;

/// Channel-level view `(7, L, D_max)` with out-of-width positions set to 1.
pub fn dense_mask(mask: &PruningMask) -> DenseMask {
    let cfg = mask.config();
    let shape = dense_shape(cfg);
    let [_, l, w] = shape;
    let mut bits = vec![1u8; shape.iter().product()];
    for kind in MatrixKind::ALL {
        for layer in 0..l {
            let row = &mut bits[(kind.index() * l + layer) * w..][..kind.channel_width(cfg)];
            for (c, b) in row.iter_mut().enumerate() {
                *b = u8::from(mask.channel_kept(kind, layer, c));
            }
        }
    }
    DenseMask { shape, bits }
}

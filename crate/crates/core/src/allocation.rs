//! Sampling-window ratio draws and the mapping from importance to per-layer
//! pruning ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PpfError, Result};
use crate::importance::ImportanceMethod;
use crate::pruning::LayerRatios;

/// Upper clamp for any single layer's ratio.
pub const MAX_LAYER_RATIO: f64 = 0.95;

/// The range `[alpha, beta]` split into `k` equal sub-intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
}

impl WindowSpec {
    pub fn new(alpha: f64, beta: f64, k: usize) -> Result<Self> {
        let s = Self { alpha, beta, k };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha && self.alpha <= self.beta && self.beta < 1.0) {
            return Err(PpfError::Config(format!(
                "window needs 0 <= alpha <= beta < 1, got [{}, {}]",
                self.alpha, self.beta
            )));
        }
        if self.k == 0 {
            return Err(PpfError::Config("window size k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.beta - self.alpha) / self.k as f64
    }

    pub fn contains(&self, r: f64) -> bool {
        (self.alpha..=self.beta).contains(&r)
    }
}

/// One ratio drawn uniformly from each sub-interval, in ascending order.
pub fn window_sample(spec: &WindowSpec, rng: &mut impl Rng) -> Vec<f64> {
    let delta = spec.width();
    (0..spec.k)
        .map(|i| {
            let lo = spec.alpha + i as f64 * delta;
            let u: f64 = rng.random();
            (lo + u * delta).min(spec.beta)
        })
        .collect()
}

pub fn window_sample_seeded(spec: &WindowSpec, seed: u64) -> Vec<f64> {
    window_sample(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A pruning policy: importance method, scaling factor and target ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionDecoded {
    pub method: ImportanceMethod,
    pub a_eta: f64,
    pub s_tar: f64,
}

impl ActionDecoded {
    pub fn new(method: ImportanceMethod, a_eta: f64, s_tar: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&a_eta) {
            return Err(PpfError::Input(format!("a_eta {a_eta} is outside [0, 0.5]")));
        }
        if !(0.0..1.0).contains(&s_tar) {
            return Err(PpfError::Input(format!("target ratio {s_tar} is outside [0, 1)")));
        }
        Ok(Self { method, a_eta, s_tar })
    }

    pub fn uniform(s_tar: f64) -> Self {
        Self {
            method: ImportanceMethod::Lod,
            a_eta: 0.0,
            s_tar,
        }
    }
}

/// `η = 2·a_η / (max H − min H)`, or 0 when H is constant.
pub fn eta(a_eta: f64, h: &[f64]) -> f64 {
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
    if h.is_empty() || max <= min {
        return 0.0;
    }
    2.0 * a_eta / (max - min)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub unclamped: Vec<f64>,
    pub ratios: LayerRatios,
}

/// `S_i = S_tar + η(mean H − H_i)`, clamped to `[0, MAX_LAYER_RATIO]`.
pub fn allocate(s_tar: f64, h: &[f64], a_eta: f64) -> Result<Allocation> {
    if !(0.0..1.0).contains(&s_tar) {
        return Err(PpfError::Input(format!("target ratio {s_tar} is outside [0, 1)")));
    }
    if h.is_empty() || h.iter().any(|v| !v.is_finite()) {
        return Err(PpfError::Input("importance must be a nonempty finite vector".into()));
    }
    let e = eta(a_eta, h);
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    let unclamped: Vec<f64> = h.iter().map(|hi| s_tar + e * (mean - hi)).collect();
    let ratios = LayerRatios::new(unclamped.iter().map(|s| s.clamp(0.0, MAX_LAYER_RATIO)).collect())?;
    Ok(Allocation { unclamped, ratios })
}

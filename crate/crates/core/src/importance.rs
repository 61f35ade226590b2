//! Layer importance metrics. Every vector is oriented so that a larger value
//! marks a more important layer, which is then pruned less.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ppf_nn::Tensor;

use crate::error::{PpfError, Result};
use crate::model::{LayerTrace, MatrixKind, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImportanceMethod {
    Lod,
    Esd,
    Bi,
}

impl ImportanceMethod {
    pub const ALL: [ImportanceMethod; 3] = [ImportanceMethod::Lod, ImportanceMethod::Esd, ImportanceMethod::Bi];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ImportanceMethod::Lod => "lod",
            ImportanceMethod::Esd => "esd",
            ImportanceMethod::Bi => "bi",
        }
    }
}

impl fmt::Display for ImportanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImportanceMethod {
    type Err = PpfError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| PpfError::Input(format!("unknown importance method {s:?} (expected lod, esd or bi)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceVector {
    pub method: ImportanceMethod,
    pub values: Vec<f64>,
}

impl ImportanceVector {
    fn new(method: ImportanceMethod, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PpfError::Numeric(format!("{method} importance is not finite: {values:?}")));
        }
        Ok(Self { method, values })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceParams {
    /// LOD outlier threshold as a multiple of the layer-mean score.
    pub outlier_multiplier: f64,
    /// Fraction of the spectrum treated as the tail by the Hill estimator.
    pub tail_fraction: f64,
}

impl Default for ImportanceParams {
    fn default() -> Self {
        Self {
            outlier_multiplier: 5.0,
            tail_fraction: 0.1,
        }
    }
}

/// Fraction of `scores` strictly above `m` times their mean.
pub fn outlier_fraction(scores: &[f64], m: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let thr = m * mean;
    scores.iter().filter(|&&s| s > thr).count() as f64 / scores.len() as f64
}

/// `|W_ij| · ‖X_j‖` for `w: [out, in]` and activations `x: [positions, in]`.
pub fn weight_activation_scores(w: &Tensor, x: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut norms = vec![0.0; cols];
    for r in x.data().chunks(cols) {
        norms.iter_mut().zip(r).for_each(|(n, v)| *n += v * v);
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let mut out = Vec::with_capacity(rows * cols);
    for r in w.data().chunks(cols) {
        out.extend(r.iter().zip(&norms).map(|(w, n)| w.abs() * n));
    }
    out
}

pub fn lod_from_traces(model: &Model, traces: &[LayerTrace], m: f64) -> Result<ImportanceVector> {
    if m.is_nan() || m <= 1.0 {
        return Err(PpfError::Config(format!("outlier multiplier must exceed 1, got {m}")));
    }
    let values = traces
        .iter()
        .enumerate()
        .map(|(layer, tr)| {
            let scores: Vec<f64> = MatrixKind::ALL
                .iter()
                .flat_map(|&k| weight_activation_scores(model.weight(layer, k), tr.input_of(k)))
                .collect();
            outlier_fraction(&scores, m)
        })
        .collect();
    ImportanceVector::new(ImportanceMethod::Lod, values)
}

pub fn lod_importance(model: &Model, calib: &[usize], m: f64) -> Result<ImportanceVector> {
    if calib.is_empty() {
        return Err(PpfError::Input("LOD needs a nonempty calibration set".into()));
    }
    lod_from_traces(model, &model.trace(calib)?, m)
}

/// Hill estimate of the power-law density exponent of a spectrum.
///
/// With the top `k = ⌈k_frac·n⌉` positive eigenvalues above the threshold
/// `λ_(k+1)`, the tail index is `k / Σ ln(λ_i / λ_(k+1))` and the density
/// exponent is one more than that.
pub fn hill_alpha(eigenvalues: &[f64], k_frac: f64) -> Result<f64> {
    if !(k_frac > 0.0 && k_frac <= 0.5) {
        return Err(PpfError::Config(format!("tail fraction must lie in (0, 0.5], got {k_frac}")));
    }
    let mut eig: Vec<f64> = eigenvalues.to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    if eig.len() < 2 {
        return Err(PpfError::Numeric("spectrum needs at least 2 eigenvalues".into()));
    }
    let k = ((k_frac * eig.len() as f64).ceil() as usize).clamp(1, eig.len() - 1);
    let tail: Vec<f64> = eig[..=k]
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .collect();
    if tail.len() < 2 {
        return Err(PpfError::Numeric(format!(
            "spectral tail has {} positive eigenvalues, need at least 2",
            tail.len()
        )));
    }
    let thr = tail[tail.len() - 1];
    let k = tail.len() - 1;
    let s: f64 = tail[..k].iter().map(|v| (v / thr).ln()).sum();
    if s <= 0.0 {
        return Err(PpfError::Numeric("spectral tail is flat".into()));
    }
    Ok(1.0 + k as f64 / s)
}

/// Eigenvalues of `WᵀW` for `w: [out, in]`, i.e. squared singular values
/// padded with zeros to `in`.
pub fn gram_eigenvalues(w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let m = DMatrix::from_row_slice(rows, cols, w.data());
    let mut eig: Vec<f64> = m.singular_values().iter().map(|s| s * s).collect();
    eig.resize(cols, 0.0);
    eig
}

pub fn matrix_alpha(w: &Tensor, k_frac: f64) -> Result<f64> {
    hill_alpha(&gram_eigenvalues(w), k_frac)
}

pub fn esd_importance(model: &Model, k_frac: f64) -> Result<ImportanceVector> {
    if !(k_frac > 0.0 && k_frac <= 0.5) {
        return Err(PpfError::Config(format!("tail fraction must lie in (0, 0.5], got {k_frac}")));
    }
    let mut values = Vec::with_capacity(model.config().n_layers);
    for layer in 0..model.config().n_layers {
        let alphas: Vec<f64> = MatrixKind::ALL
            .iter()
            .filter_map(|&k| matrix_alpha(model.weight(layer, k), k_frac).ok())
            .collect();
        if alphas.is_empty() {
            return Err(PpfError::Metric(format!("no estimable spectral tail in layer {layer}")));
        }
        values.push(-(alphas.iter().sum::<f64>() / alphas.len() as f64));
    }
    ImportanceVector::new(ImportanceMethod::Esd, values)
}

/// `1 − mean cosine(block input, block output)` over positions where both
/// states are nonzero.
pub fn bi_from_block_io(io: &[(Tensor, Tensor)]) -> Result<ImportanceVector> {
    let mut values = Vec::with_capacity(io.len());
    for (layer, (x, y)) in io.iter().enumerate() {
        let d = x.shape()[1];
        let mut sum = 0.0;
        let mut n = 0usize;
        for (a, b) in x.data().chunks(d).zip(y.data().chunks(d)) {
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            sum += (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
            n += 1;
        }
        if n == 0 {
            return Err(PpfError::Metric(format!("every hidden state of layer {layer} has zero norm")));
        }
        values.push(1.0 - sum / n as f64);
    }
    ImportanceVector::new(ImportanceMethod::Bi, values)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn bi_importance(model: &Model, calib: &[usize]) -> Result<ImportanceVector> {
    if calib.is_empty() {
        return Err(PpfError::Input("BI needs a nonempty calibration set".into()));
    }
    bi_from_block_io(&model.capture_block_io(calib)?)
}

/// All three metrics from a single traced forward pass.
pub fn all_importances(model: &Model, calib: &[usize], params: &ImportanceParams) -> Result<[ImportanceVector; 3]> {
    if calib.is_empty() {
        return Err(PpfError::Input("importance needs a nonempty calibration set".into()));
    }
    let traces = model.trace(calib)?;
    let lod = lod_from_traces(model, &traces, params.outlier_multiplier)?;
    let esd = esd_importance(model, params.tail_fraction)?;
    let io: Vec<(Tensor, Tensor)> = traces.into_iter().map(|t| (t.block_in, t.block_out)).collect();
    let bi = bi_from_block_io(&io)?;
    Ok([lod, esd, bi])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn hand_counted_outliers() {
        assert_eq!(outlier_fraction(&[1.0, 1.0, 1.0, 9.0], 2.0), 0.25);
        assert_eq!(outlier_fraction(&[1.0, 1.0, 1.0, 9.0], f64::INFINITY), 0.0);
    }

    #[test]
    fn scores_use_column_activation_norms() {
        let w = Tensor::from_vec(&[1, 2], vec![-2.0, 1.0]);
        let x = Tensor::from_vec(&[2, 2], vec![3.0, 0.0, 4.0, 1.0]);
        assert_eq!(weight_activation_scores(&w, &x), vec![10.0, 1.0]);
    }

    #[test]
    fn method_names_parse() {
        for m in ImportanceMethod::ALL {
            assert_eq!(m.name().parse::<ImportanceMethod>().unwrap(), m);
        }
        assert!("owl".parse::<ImportanceMethod>().is_err());
    }

    #[test]
    fn lod_rejects_bad_inputs() {
        let m = build_model(ModelConfig::default(), 0).unwrap();
        assert!(matches!(lod_importance(&m, &[], 5.0), Err(PpfError::Input(_))));
        assert!(lod_importance(&m, &[1, 2], 1.0).is_err());
    }

    #[test]
    fn identical_layers_score_equally() {
        let mut m = build_model(ModelConfig::default(), 0).unwrap();
        for k in MatrixKind::ALL {
            let w0 = m.weight(0, k).clone();
            for l in 1..8 {
                *m.weight_mut(l, k) = w0.clone();
            }
        }
        let h = esd_importance(&m, 0.1).unwrap();
        assert!(h.values.iter().all(|v| *v == h.values[0]));
    }

    #[test]
    fn hill_is_scale_invariant_and_rejects_flat_tails() {
        let eig: Vec<f64> = (1..=50).map(|i| 1.0 / i as f64).collect();
        let a = hill_alpha(&eig, 0.1).unwrap();
        let scaled: Vec<f64> = eig.iter().map(|v| v * 37.0).collect();
        assert!((hill_alpha(&scaled, 0.1).unwrap() - a).abs() < 1e-12);
        assert!(hill_alpha(&[1.0; 20], 0.1).is_err());
        assert!(hill_alpha(&[1.0, 0.0, 0.0, 0.0], 0.25).is_err());
        assert!(hill_alpha(&eig, 0.0).is_err());
    }

    #[test]
    fn bi_extremes() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let same = bi_from_block_io(&[(x.clone(), x.clone())]).unwrap();
        assert_eq!(same.values, vec![0.0]);
        let neg = bi_from_block_io(&[(x.clone(), x.map(|v| -v))]).unwrap();
        assert_eq!(neg.values, vec![2.0]);
        let zero = Tensor::zeros(&[2, 3]);
        assert!(matches!(bi_from_block_io(&[(zero.clone(), zero)]), Err(PpfError::Metric(_))));
    }
}

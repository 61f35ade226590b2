//! Ground-truth scoring of pruning policies: JS divergence between the
//! original and pruned output distributions, normalised by the pruned
//! fraction.

use std::fmt;
use std::time::{Duration, Instant};

use ppf_nn::Tensor;

use crate::allocation::{allocate, ActionDecoded};
use crate::error::{PpfError, Result};
use crate::importance::{all_importances, ImportanceMethod, ImportanceParams, ImportanceVector};
use crate::model::Model;
use crate::pruning::{actual_ratio, apply_mask, LayerRatios, PruningMask, SalienceRanking};

const NORM_TOL: f64 = 1e-9;

/// Jensen-Shannon divergence in bits.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(PpfError::Input(format!("distributions have lengths {} and {}", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|v| !(*v >= 0.0)) {
            return Err(PpfError::Input(format!("{name} has a negative or NaN entry")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > NORM_TOL {
            return Err(PpfError::Input(format!("{name} sums to {s}, not 1")));
        }
    }
    Ok(js_unchecked(p, q))
}

fn js_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).log2();
        }
        if b > 0.0 {
            acc += b * (b / m).log2();
        }
    }
    (0.5 * acc).clamp(0.0, 1.0)
}

/// Mean per-row JS between two `[positions, vocab]` distribution tables.
pub fn mean_js(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() || p.rank() != 2 || p.shape()[0] == 0 {
        return Err(PpfError::Input(format!(
            "distribution tables {:?} and {:?} do not match",
            p.shape(),
            q.shape()
        )));
    }
    let v = p.shape()[1];
    let total: f64 = p
        .data()
        .chunks(v)
        .zip(q.data().chunks(v))
        .map(|(a, b)| js_unchecked(a, b))
        .sum();
    Ok(total / p.shape()[0] as f64)
}

pub fn model_js(original: &Model, pruned: &Model, calib: &[usize]) -> Result<f64> {
    if original.config() != pruned.config() {
        return Err(PpfError::Config("models have different configurations".into()));
    }
    if calib.is_empty() {
        return Err(PpfError::Input("calibration set is empty".into()));
    }
    mean_js(
        &original.forward_distributions(calib, None)?,
        &pruned.forward_distributions(calib, None)?,
    )
}

/// Performance-parameter ratio `js / r_act`.
pub fn ppr(js: f64, r_act: f64) -> Result<f64> {
    if !(r_act > 0.0) {
        return Err(PpfError::Domain(format!("pruning ratio {r_act} leaves nothing to normalise by")));
    }
    Ok(js / r_act)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub policy: ActionDecoded,
    pub js: f64,
    pub r_act: f64,
    pub ppr: f64,
    pub reward: f64,
    pub wall_time: Duration,
}

impl EvalReport {
    pub fn new(policy: ActionDecoded, js: f64, r_act: f64, wall_time: Duration) -> Result<Self> {
        let ppr = ppr(js, r_act)?;
        Ok(Self {
            policy,
            js,
            r_act,
            ppr,
            reward: -ppr,
            wall_time,
        })
    }

    pub const HEADER: &'static str = "method,a_eta,s_tar,r_act,js,ppr,reward,wall_time_ms";

    /// The comma-separated record without the timing column.
    pub fn record_without_time(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.9},{:.9},{:.9},{:.9}",
            self.policy.method, self.policy.a_eta, self.policy.s_tar, self.r_act, self.js, self.ppr, self.reward
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.3}",
            self.record_without_time(),
            self.wall_time.as_secs_f64() * 1e3
        )
    }
}

/// A frozen model with everything policy evaluation reuses: reference
/// distributions, the salience ranking and the three importance vectors.
#[derive(Clone, Debug)]
pub struct Evaluator {
    model: Model,
    calib: Vec<usize>,
    reference: Tensor,
    ranking: SalienceRanking,
    importance: [ImportanceVector; 3],
}

impl Evaluator {
    pub fn new(model: Model, calib: Vec<usize>, params: &ImportanceParams) -> Result<Self> {
        if calib.is_empty() {
            return Err(PpfError::Input("calibration set is empty".into()));
        }
        let reference = model.forward_distributions(&calib, None)?;
        let ranking = SalienceRanking::new(&model);
        let importance = all_importances(&model, &calib, params)?;
        Ok(Self {
            model,
            calib,
            reference,
            ranking,
            importance,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn calib(&self) -> &[usize] {
        &self.calib
    }

    pub fn importance(&self, method: ImportanceMethod) -> &ImportanceVector {
        &self.importance[method.index()]
    }

    pub fn ratios(&self, policy: &ActionDecoded) -> Result<LayerRatios> {
        Ok(allocate(policy.s_tar, &self.importance(policy.method).values, policy.a_eta)?.ratios)
    }

    pub fn mask_for(&self, policy: &ActionDecoded) -> Result<PruningMask> {
        self.ranking.build(&self.ratios(policy)?)
    }

    /// Mean JS of the masked model against the unpruned reference.
    pub fn mask_js(&self, mask: &PruningMask) -> Result<f64> {
        let pruned = apply_mask(&self.model, mask)?;
        mean_js(&self.reference, &pruned.forward_distributions(&self.calib, None)?)
    }

    pub fn evaluate(&self, policy: &ActionDecoded) -> Result<EvalReport> {
        let start = Instant::now();
        let mask = self.mask_for(policy)?;
        let js = self.mask_js(&mask)?;
        let r_act = actual_ratio(&mask);
        EvalReport::new(*policy, js, r_act, start.elapsed())
    }
}

/// One-off evaluation; repeated use should go through [`Evaluator`].
pub fn evaluate_policy(model: &Model, policy: &ActionDecoded, calib: &[usize]) -> Result<EvalReport> {
    let start = Instant::now();
    let ev = Evaluator::new(model.clone(), calib.to_vec(), &ImportanceParams::default())?;
    let mut rep = ev.evaluate(policy)?;
    rep.wall_time = start.elapsed();
    Ok(rep)
}

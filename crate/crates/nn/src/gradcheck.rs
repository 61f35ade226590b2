//! Finite-difference validation of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many randomly chosen scalars per parameter; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    /// Denominator floor for the relative error, so exactly-zero gradients compare in absolute terms.
    pub floor: f64,
    pub seed: u64,
    /// Skip coordinates whose one-sided slopes differ by more than this
    /// relative amount: the step straddles a ReLU or max kink there, and the
    /// central difference is not a derivative estimate. `None` skips nothing.
    pub kink_tol: Option<f64>,
}

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the scored coordinates.
    pub worst: f64,
    pub checked: usize,
    /// Coordinates excluded as non-differentiable.
    pub skipped: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_param: None,
            floor: 1e-6,
            seed: 0,
            kink_tol: None,
        }
    }
}

/// Largest relative error between reverse-mode gradients of the scalar built
/// by `loss` and central finite differences, over trainable parameters.
///
/// `loss` receives a fresh graph and the parameter leaves in `params` order.
pub fn grad_check<F>(params: &ParamSet, loss: F, opts: &GradCheckOptions) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(params, loss, opts)?.worst)
}

/// [`grad_check`] with coverage counts.
pub fn grad_check_report<F>(params: &ParamSet, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let out = loss(&mut g, &bound)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = loss(&mut g, &bound)?;
    if g.value(out).len() != 1 {
        return Err(NnError::State("gradient check needs a scalar output".into()));
    }
    let base = g.value(out).item();
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (pi, &v) in bound.iter().enumerate() {
        if !params[pi].trainable {
            continue;
        }
        let n = params[pi].value.len();
        let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[pi].value.data()[i];
            // Divide by the step actually representable around `orig`.
            let (hi, lo) = (orig + opts.h, orig - opts.h);
            work[pi].value.data_mut()[i] = hi;
            let up = eval(&work)?;
            work[pi].value.data_mut()[i] = lo;
            let down = eval(&work)?;
            work[pi].value.data_mut()[i] = orig;
            if let Some(tol) = opts.kink_tol {
                let (right, left) = ((up - base) / (hi - orig), (base - down) / (orig - lo));
                if (right - left).abs() > tol * right.abs().max(left.abs()).max(opts.floor) {
                    report.skipped += 1;
                    continue;
                }
            }
            let numeric = (up - down) / (hi - lo);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.worst = report.worst.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

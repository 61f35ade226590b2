//! First-order optimisers.

use crate::error::{NnError, Result};
use crate::param::ParamSet;

/// Plain gradient descent: `value ← value − lr·grad` on trainable parameters,
/// then clears every gradient.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    check_grads(params)?;
    for p in params.iter_mut() {
        if let (true, Some(g)) = (p.trainable, p.grad.take()) {
            p.value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(v, g)| *v -= lr * g);
        }
    }
    params.zero_grads();
    Ok(())
}

fn check_grads(params: &ParamSet) -> Result<()> {
    match params.iter().find(|p| p.trainable && p.grad.is_none()) {
        Some(p) => Err(NnError::State(format!("parameter {} has no gradient", p.name))),
        None => Ok(()),
    }
}

/// Zeroes subnormal optimiser state. Moments of parameters whose gradient
/// stays at zero decay geometrically into the subnormal range, where
/// arithmetic is very slow, while their effect on the weights is already nil.
fn flush(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamSet) -> Result<()>;
}

/// SGD with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, self.lr);
        }
        check_grads(params)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let Some(g) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            for ((w, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                *v = flush(self.momentum * *v + g);
                *w -= self.lr * *v;
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        check_grads(params)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            for (((w, m), v), g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *m = flush(self.beta1 * *m + (1.0 - self.beta1) * g);
                *v = flush(self.beta2 * *v + (1.0 - self.beta2) * g * g);
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

use super::{Real, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Plain gradient descent: `w <- w - lr * grad`, then gradients are zeroed.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
    check_grads(params)?;
    for p in params.iter_mut().filter(|p| p.requires_grad()) {
        let g = p.grad().expect("checked").to_vec();
        p.data_mut().iter_mut().zip(&g).for_each(|(w, &gi)| *w -= lr * gi);
        p.zero_grad();
    }
    Ok(())
}

fn check_grads<T: Real>(params: &[&mut Tensor<T>]) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.requires_grad() && p.grad().is_none()) {
        return Err(Error::contract(format!("parameter {i} has no gradient")));
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
pub fn clip_global_norm<T: Real>(params: &mut [&mut Tensor<T>], max_norm: T) -> T {
    let sq: T = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter().map(|&x| x * x))
        .sum();
    let norm = sq.sqrt();
    if norm <= max_norm || norm == T::zero() {
        return T::one();
    }
    let scale = max_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.grad_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent without momentum.
    Sgd,
    /// Adam; plain SGD at the default rate is too slow to converge within
    /// practical epoch budgets.
    #[default]
    Adam,
}

/// Adam with bias correction. Moments are kept per parameter position.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
        check_grads(params)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let eps = T::from_f64c(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().expect("checked").to_vec();
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                data[i] -= lr * upd;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Update rule selected by [`OptimizerKind`].
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd,
    Adam(Adam<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::default()),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, lr),
            Optimizer::Adam(a) => a.step(params, lr),
        }
    }
}

//! Meta-objectives over task sets and the first-order optimizer that
//! minimizes them.
//!
//! Per-task losses and gradients are computed in parallel and reduced in
//! index order, so results do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TasmlError};
use crate::ls_meta_learn::{task_loss_grad_params, MetaParams};
use crate::taskgen::Task;

/// Unconditional objective: mean query loss over `batch` plus `l2_theta ‖θ‖²`.
pub fn erm_objective(theta: &MetaParams, batch: &[&Task], lambda_theta: f64, l2_theta: f64) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(TasmlError::EmptyDataset);
    }
    let parts = per_task(theta, batch.iter().map(|t| (&t.support[..], &t.query[..], t.ways)), lambda_theta)?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.n_params()];
    for (l, g) in &parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    loss /= n;
    grad.iter_mut().for_each(|a| *a /= n);
    add_l2(theta, l2_theta, &mut loss, &mut grad);
    Ok((loss, grad))
}

type Part = (f64, Vec<f64>);

fn per_task<'a, I>(theta: &MetaParams, items: I, lambda_theta: f64) -> Result<Vec<Part>>
where
    I: Iterator<Item = (&'a [crate::taskgen::Example], &'a [crate::taskgen::Example], usize)>,
{
    let items: Vec<_> = items.collect();
    items
        .par_iter()
        .map(|(s, q, ways)| {
            let (rep, g) = task_loss_grad_params(theta, s, q, *ways, lambda_theta)?;
            Ok((rep.loss, g.to_flat()))
        })
        .collect()
}

fn add_l2(theta: &MetaParams, l2_theta: f64, loss: &mut f64, grad: &mut [f64]) {
    if l2_theta != 0.0 {
        *loss += l2_theta * theta.squared_norm();
        grad.iter_mut()
            .zip(theta.to_flat())
            .for_each(|(g, t)| *g += 2.0 * l2_theta * t);
    }
}

/// Task-weighted objective with an optional target-task term whose support
/// set doubles as its query set.
#[derive(Clone, Debug)]
pub struct WeightedObjectiveSpec<'a> {
    pub weighted_tasks: Vec<(&'a Task, f64)>,
    pub target_task: Option<&'a Task>,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_theta: f64,
    pub l2_theta: f64,
}

impl WeightedObjectiveSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta1.is_finite()) {
            return Err(TasmlError::config("beta1", "must be finite and >= 0"));
        }
        if !(self.beta2 >= 0.0 && self.beta2.is_finite()) {
            return Err(TasmlError::config("beta2", "must be finite and >= 0"));
        }
        if !(self.l2_theta >= 0.0 && self.l2_theta.is_finite()) {
            return Err(TasmlError::config("l2_theta", "must be finite and >= 0"));
        }
        if self.weighted_tasks.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return Err(TasmlError::config("weights", "task weights must be finite and >= 0"));
        }
        let has_target = self.target_task.is_some() && self.beta2 > 0.0;
        if self.weighted_tasks.is_empty() && !has_target {
            return Err(TasmlError::config(
                "weighted_tasks",
                "need weighted tasks or a target task with beta2 > 0",
            ));
        }
        Ok(())
    }
}

/// `β₁ Σ wᵢ L(Dᵢ) + β₂ L(D_target.support, D_target.support) + l2 ‖θ‖²`
/// and its exact gradient.
pub fn weighted_objective(theta: &MetaParams, spec: &WeightedObjectiveSpec<'_>) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    let mut coeffs = Vec::new();
    let mut items = Vec::new();
    for (task, w) in &spec.weighted_tasks {
        let c = spec.beta1 * w;
        if c != 0.0 {
            coeffs.push(c);
            items.push((&task.support[..], &task.query[..], task.ways));
        }
    }
    if let Some(t) = spec.target_task {
        if spec.beta2 != 0.0 {
            coeffs.push(spec.beta2);
            items.push((&t.support[..], &t.support[..], t.ways));
        }
    }
    let parts = per_task(theta, items.into_iter(), spec.lambda_theta)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.n_params()];
    for ((l, g), c) in parts.iter().zip(&coeffs) {
        loss += c * l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
    }
    add_l2(theta, spec.l2_theta, &mut loss, &mut grad);
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub mode: OptimizerMode,
}

impl OptimizerState {
    pub fn new(n_params: usize, learning_rate: f64, mode: OptimizerMode) -> Self {
        OptimizerState {
            step_count: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            learning_rate,
            mode,
        }
    }

    /// Applies one update to the flat parameter vector in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || grad.len() != self.first_moment.len() {
            return Err(TasmlError::dims("optimizer step", self.first_moment.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TasmlError::NonFiniteValue { context: "optimizer gradient" });
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.mode {
            OptimizerMode::Sgd => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerMode::Adam => {
                let t = self.step_count as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    let m = ADAM_BETA1 * self.first_moment[i] + (1.0 - ADAM_BETA1) * g;
                    let v = ADAM_BETA2 * self.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    params[i] -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::apply`].
pub fn optimizer_step(state: &OptimizerState, theta: &MetaParams, grad: &[f64]) -> Result<(OptimizerState, MetaParams)> {
    let mut next = state.clone();
    let mut flat = theta.to_flat();
    next.apply(&mut flat, grad)?;
    Ok((next, MetaParams::from_flat(theta.dim(), &flat)?))
}

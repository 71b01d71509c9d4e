//! Least-squares meta-learner.
//!
//! The representation is a residual two-layer network
//! `psi(x) = x + W2 relu(W1 x + b1) + b2` with square `p × p` layers. Each task
//! fits a ridge-regression head on the represented support set in dual form,
//! `W = Xᵀ (X Xᵀ + λ I)⁻¹ Y`, and is scored by mean squared error against
//! one-hot query labels. Gradients with respect to the network parameters
//! are exact: they are propagated by hand through the query predictions, the
//! head and the `m × m` ridge solve.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TasmlError};
use crate::numerics::{cholesky_solve, Matrix};
use crate::taskgen::{inputs_matrix, one_hot, Example};

/// Parameters of the residual branch. Flattened order is
/// `w1` (row-major), `b1`, `w2` (row-major), `b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    p: usize,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl MetaParams {
    pub fn zeros(p: usize) -> Self {
        MetaParams {
            p,
            w1: Matrix::zeros(p, p),
            b1: vec![0.0; p],
            w2: Matrix::zeros(p, p),
            b2: vec![0.0; p],
        }
    }

    /// Gaussian weights with std `sqrt(2/p)`, zero biases.
    pub fn init<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Self {
        let std = (2.0 / p as f64).sqrt();
        let mut theta = MetaParams::zeros(p);
        for w in [&mut theta.w1, &mut theta.w2] {
            w.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = std * rng.sample::<f64, _>(StandardNormal));
        }
        theta
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn n_params(&self) -> usize {
        2 * self.p * self.p + 2 * self.p
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn from_flat(p: usize, flat: &[f64]) -> Result<Self> {
        let n = 2 * p * p + 2 * p;
        if flat.len() != n {
            return Err(TasmlError::dims("MetaParams::from_flat", n, flat.len()));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(TasmlError::NonFiniteValue { context: "MetaParams::from_flat" });
        }
        let pp = p * p;
        Ok(MetaParams {
            p,
            w1: Matrix::from_vec(p, p, flat[..pp].to_vec())?,
            b1: flat[pp..pp + p].to_vec(),
            w2: Matrix::from_vec(p, p, flat[pp + p..2 * pp + p].to_vec())?,
            b2: flat[2 * pp + p..].to_vec(),
        })
    }

    pub fn squared_norm(&self) -> f64 {
        self.w1
            .as_slice()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
            .map(|v| v * v)
            .sum()
    }

    fn add_assign(&mut self, other: &MetaParams, s: f64) {
        self.w1.axpy(s, &other.w1);
        self.w2.axpy(s, &other.w2);
        self.b1.iter_mut().zip(&other.b1).for_each(|(a, b)| *a += s * b);
        self.b2.iter_mut().zip(&other.b2).for_each(|(a, b)| *a += s * b);
    }
}

/// Intermediate activations of a batched forward pass.
struct Forward {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
    out: Matrix,
}

fn forward_batch(theta: &MetaParams, x: Matrix) -> Result<Forward> {
    if x.cols() != theta.p {
        return Err(TasmlError::dims("representation input dim", theta.p, x.cols()));
    }
    let mut pre = x.matmul_t(&theta.w1);
    for r in 0..pre.rows() {
        pre.row_mut(r).iter_mut().zip(&theta.b1).for_each(|(h, b)| *h += b);
    }
    let mut act = pre.clone();
    act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = act.matmul_t(&theta.w2);
    for r in 0..out.rows() {
        let xr = x.row(r);
        out.row_mut(r)
            .iter_mut()
            .zip(xr.iter().zip(&theta.b2))
            .for_each(|(o, (xv, b))| *o += xv + b);
    }
    Ok(Forward { x, pre, act, out })
}

/// Accumulates parameter gradients of a batch given `d loss / d out`.
fn backward_batch(theta: &MetaParams, fwd: &Forward, d_out: &Matrix, grad: &mut MetaParams) {
    // out = x + act W2ᵀ + b2
    crate::numerics::gemm(1.0, d_out, true, &fwd.act, false, 1.0, &mut grad.w2);
    for r in 0..d_out.rows() {
        grad.b2.iter_mut().zip(d_out.row(r)).for_each(|(g, d)| *g += d);
    }
    let mut d_pre = d_out.matmul(&theta.w2);
    d_pre
        .as_mut_slice()
        .iter_mut()
        .zip(fwd.pre.as_slice())
        .for_each(|(d, h)| {
            if *h <= 0.0 {
                *d = 0.0
            }
        });
    crate::numerics::gemm(1.0, &d_pre, true, &fwd.x, false, 1.0, &mut grad.w1);
    for r in 0..d_pre.rows() {
        grad.b1.iter_mut().zip(d_pre.row(r)).for_each(|(g, d)| *g += d);
    }
}

/// `x + W2 relu(W1 x + b1) + b2`
pub fn repr_forward(theta: &MetaParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_batch(theta, Matrix::from_vec(1, x.len(), x.to_vec())?)?.out.into_vec())
}

/// Represents every row of `x`.
pub fn repr_forward_batch(theta: &MetaParams, x: Matrix) -> Result<Matrix> {
    Ok(forward_batch(theta, x)?.out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeHead {
    /// `C × p` linear predictor on represented inputs.
    pub w: Matrix,
    pub lambda_theta: f64,
}

impl RidgeHead {
    /// Scores `C` per row of represented inputs.
    pub fn predict(&self, features: &Matrix) -> Matrix {
        features.matmul_t(&self.w)
    }
}

/// Dual-form ridge coefficients `(X Xᵀ + λ I)⁻¹ Y` for features `x`.
fn dual_coefficients(x: &Matrix, y: &Matrix, lambda_theta: f64) -> Result<(Matrix, crate::numerics::CholeskyFactor)> {
    let mut gram = x.matmul_t(x);
    gram.add_diag(lambda_theta);
    cholesky_solve(&gram, y, 0.0)
}

fn check_lambda(lambda_theta: f64) -> Result<()> {
    if lambda_theta > 0.0 && lambda_theta.is_finite() {
        Ok(())
    } else {
        Err(TasmlError::config("lambda_theta", "must be finite and > 0"))
    }
}

/// Closed-form ridge head on the represented support set.
pub fn solve_head(theta: &MetaParams, support: &[Example], ways: usize, lambda_theta: f64) -> Result<RidgeHead> {
    check_lambda(lambda_theta)?;
    let x = repr_forward_batch(theta, inputs_matrix(support)?)?;
    let y = one_hot(support, ways);
    let (coef, _) = dual_coefficients(&x, &y, lambda_theta)?;
    // (Xᵀ A)ᵀ = Aᵀ X
    Ok(RidgeHead {
        w: coef.t_matmul(&x),
        lambda_theta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLossReport {
    /// Mean over the query of `‖ŷ − onehot(y)‖²`.
    pub loss: f64,
    /// Fraction of query examples whose argmax prediction matches the label.
    pub accuracy: f64,
    pub per_example: Option<Vec<f64>>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn report(pred: &Matrix, query: &[Example], ways: usize, keep_per_example: bool) -> TaskLossReport {
    let mut per = Vec::with_capacity(query.len());
    let mut hits = 0usize;
    for (i, e) in query.iter().enumerate() {
        let row = pred.row(i);
        let err: f64 = (0..ways)
            .map(|c| {
                let t = if c == e.y { 1.0 } else { 0.0 };
                (row[c] - t) * (row[c] - t)
            })
            .sum();
        per.push(err);
        hits += (argmax(row) == e.y) as usize;
    }
    let n = query.len() as f64;
    TaskLossReport {
        loss: per.iter().sum::<f64>() / n,
        accuracy: hits as f64 / n,
        per_example: keep_per_example.then_some(per),
    }
}

fn check_data(support: &[Example], query: &[Example], ways: usize) -> Result<()> {
    if support.is_empty() || query.is_empty() {
        return Err(TasmlError::EmptyDataset);
    }
    if let Some(e) = support.iter().chain(query).find(|e| e.y >= ways) {
        return Err(TasmlError::dims("label < ways", ways, e.y));
    }
    Ok(())
}

/// Query loss and accuracy of the head fitted on `support`.
pub fn task_loss(
    theta: &MetaParams,
    support: &[Example],
    query: &[Example],
    ways: usize,
    lambda_theta: f64,
) -> Result<TaskLossReport> {
    check_data(support, query, ways)?;
    let head = solve_head(theta, support, ways, lambda_theta)?;
    let q = repr_forward_batch(theta, inputs_matrix(query)?)?;
    Ok(report(&head.predict(&q), query, ways, true))
}

/// Task loss together with the exact gradient of
/// `loss + l2_theta · ‖θ‖²` with respect to the flattened parameters.
/// The reported `loss` excludes the ℓ2 term.
pub fn task_loss_grad(
    theta: &MetaParams,
    support: &[Example],
    query: &[Example],
    ways: usize,
    lambda_theta: f64,
    l2_theta: f64,
) -> Result<(TaskLossReport, Vec<f64>)> {
    let (rep, mut grad) = task_loss_grad_params(theta, support, query, ways, lambda_theta)?;
    if l2_theta != 0.0 {
        grad.add_assign(theta, 2.0 * l2_theta);
    }
    Ok((rep, grad.to_flat()))
}

/// Gradient of the unregularized task loss, shaped like `theta`.
pub(crate) fn task_loss_grad_params(
    theta: &MetaParams,
    support: &[Example],
    query: &[Example],
    ways: usize,
    lambda_theta: f64,
) -> Result<(TaskLossReport, MetaParams)> {
    check_lambda(lambda_theta)?;
    check_data(support, query, ways)?;
    let sup = forward_batch(theta, inputs_matrix(support)?)?;
    let qry = forward_batch(theta, inputs_matrix(query)?)?;
    let x = &sup.out;
    let xq = &qry.out;
    let y = one_hot(support, ways);

    let (coef, factor) = dual_coefficients(x, &y, lambda_theta)?;
    let w_t = x.t_matmul(&coef); // p × C
    let pred = xq.matmul(&w_t); // n × C
    let rep = report(&pred, query, ways, false);

    let n = query.len() as f64;
    let mut d_pred = pred;
    for (i, e) in query.iter().enumerate() {
        d_pred[(i, e.y)] -= 1.0;
    }
    d_pred.scale(2.0 / n);

    let d_xq = d_pred.matmul_t(&w_t); // n × p
    let d_wt = xq.t_matmul(&d_pred); // p × C

    // W_t = Xᵀ coef
    let mut d_x = coef.matmul_t(&d_wt); // m × p
    let d_coef = x.matmul(&d_wt); // m × C
    // coef = G⁻¹ Y, G = X Xᵀ + λI  =>  dG = −G⁻¹ d_coef coefᵀ
    let b = factor.solve(&d_coef)?;
    let mut d_gram = b.matmul_t(&coef);
    d_gram.scale(-1.0);
    let sym = {
        let mut s = d_gram.transpose();
        s.axpy(1.0, &d_gram);
        s
    };
    crate::numerics::gemm(1.0, &sym, false, x, false, 1.0, &mut d_x);

    let mut grad = MetaParams::zeros(theta.p);
    backward_batch(theta, &sup, &d_x, &mut grad);
    backward_batch(theta, &qry, &d_xq, &mut grad);
    if !rep.loss.is_finite() {
        return Err(TasmlError::NonFiniteValue { context: "task loss" });
    }
    Ok((rep, grad))
}

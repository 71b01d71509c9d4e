//! Kernels between datasets and the task-relevance scoring model.
//!
//! A dataset is summarized by its signature, the mean of its feature-mapped
//! support inputs. Training tasks are compared through a kernel on these
//! signatures; kernel ridge regression over the training signatures yields a
//! weight per training task for any target dataset, which top-M filtering
//! then sparsifies and renormalizes.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TasmlError};
use crate::numerics::{dot, squared_distance, CholeskyFactor, Matrix};
use crate::seeding::{rng_for, TAG_PROJ};
use crate::taskgen::{Example, MetaSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub mean_embedding: Vec<f64>,
    pub n_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Linear,
    Laplace,
}

impl KernelFamily {
    pub fn label(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Linear => "linear",
            KernelFamily::Laplace => "laplace",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    RandomProjection { p: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    /// Bandwidth of the gaussian and laplace families.
    pub sigma: f64,
    /// Offset of the linear family.
    pub c: f64,
    pub feature_map: FeatureMap,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::Gaussian,
            sigma: 50.0,
            c: 0.0,
            feature_map: FeatureMap::Identity,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        match self.family {
            KernelFamily::Gaussian | KernelFamily::Laplace if !(self.sigma > 0.0 && self.sigma.is_finite()) => {
                Err(TasmlError::config("sigma", "must be finite and > 0"))
            }
            KernelFamily::Linear if !(self.c >= 0.0 && self.c.is_finite()) => {
                Err(TasmlError::config("c", "must be finite and >= 0"))
            }
            _ => match self.feature_map {
                FeatureMap::RandomProjection { p: 0, .. } => {
                    Err(TasmlError::config("feature_map.p", "must be >= 1"))
                }
                _ => Ok(()),
            },
        }
    }
}

/// Materialized feature map for a fixed input dimension.
#[derive(Clone, Debug)]
pub struct FeatureMapper {
    projection: Option<Matrix>,
    input_dim: usize,
}

impl FeatureMapper {
    pub fn new(map: FeatureMap, input_dim: usize) -> Result<Self> {
        let projection = match map {
            FeatureMap::Identity => None,
            FeatureMap::RandomProjection { p, seed } => Some(orthonormal_rows(p, input_dim, seed)?),
        };
        Ok(FeatureMapper { projection, input_dim })
    }

    pub fn output_dim(&self) -> usize {
        self.projection.as_ref().map(Matrix::rows).unwrap_or(self.input_dim)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(TasmlError::dims("feature map input", self.input_dim, x.len()));
        }
        Ok(match &self.projection {
            None => x.to_vec(),
            Some(p) => p.matvec(x),
        })
    }

    /// Signature of a dataset. Mapped points are sorted before summation, so
    /// any reordering of the dataset gives a bitwise identical result.
    pub fn signature(&self, data: &[Example]) -> Result<Signature> {
        if data.is_empty() {
            return Err(TasmlError::EmptyDataset);
        }
        let mut mapped = data.iter().map(|e| self.apply(&e.x)).collect::<Result<Vec<_>>>()?;
        mapped.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut mean = vec![0.0; self.output_dim()];
        for v in &mapped {
            mean.iter_mut().zip(v).for_each(|(m, a)| *m += a);
        }
        let n = mapped.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(Signature {
            mean_embedding: mean,
            n_points: mapped.len(),
        })
    }
}

/// `p × d` matrix with orthonormal rows from Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(p: usize, d: usize, seed: u64) -> Result<Matrix> {
    if p == 0 || p > d {
        return Err(TasmlError::config("feature_map.p", format!("need 1 <= p <= input dim {d}")));
    }
    let mut rng = rng_for(seed, &[TAG_PROJ]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(p);
    while rows.len() < p {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in &rows {
                let c = dot(&v, r);
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows)
}

/// Signature of a support set under `kernel`'s feature map.
pub fn signature(task_support: &[Example], kernel: &KernelConfig) -> Result<Signature> {
    let d = task_support.first().ok_or(TasmlError::EmptyDataset)?.x.len();
    FeatureMapper::new(kernel.feature_map, d)?.signature(task_support)
}

pub fn kernel_eval(a: &Signature, b: &Signature, kernel: &KernelConfig) -> Result<f64> {
    let (u, v) = (&a.mean_embedding, &b.mean_embedding);
    if u.len() != v.len() {
        return Err(TasmlError::dims("kernel_eval signature dim", u.len(), v.len()));
    }
    Ok(match kernel.family {
        KernelFamily::Gaussian => (-squared_distance(u, v) / (kernel.sigma * kernel.sigma)).exp(),
        KernelFamily::Laplace => (-squared_distance(u, v).sqrt() / kernel.sigma).exp(),
        KernelFamily::Linear => dot(u, v) + kernel.c,
    })
}

/// Median of pairwise Euclidean distances between signatures; 1.0 when
/// fewer than two signatures or all coincide.
pub fn median_pairwise_distance(signatures: &[Signature]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(signatures.len() * signatures.len().saturating_sub(1) / 2);
    for i in 0..signatures.len() {
        for j in (i + 1)..signatures.len() {
            d.push(squared_distance(&signatures[i].mean_embedding, &signatures[j].mean_embedding).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub full: Vec<f64>,
    /// `(task index, normalized weight)` in rank order.
    pub selected: Vec<(usize, f64)>,
}

impl TaskWeights {
    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected.iter().map(|(i, _)| *i).collect()
    }
}

/// Kernel ridge scoring model `alpha(D) = (K + lambda I)^{-1} v(D)`.
#[derive(Clone, Debug)]
pub struct ScoringModel {
    signatures: Vec<Signature>,
    chol: CholeskyFactor,
    lambda: f64,
    kernel: KernelConfig,
    mapper: FeatureMapper,
}

impl ScoringModel {
    pub fn from_parts(
        signatures: Vec<Signature>,
        chol: CholeskyFactor,
        lambda: f64,
        kernel: KernelConfig,
        input_dim: usize,
    ) -> Result<Self> {
        if chol.dim() != signatures.len() {
            return Err(TasmlError::dims("scoring factor size", signatures.len(), chol.dim()));
        }
        let mapper = FeatureMapper::new(kernel.feature_map, input_dim)?;
        Ok(ScoringModel {
            signatures,
            chol,
            lambda,
            kernel,
            mapper,
        })
    }

    pub fn signatures(&self) -> &[Signature] {
        &self.signatures
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.chol
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn input_dim(&self) -> usize {
        self.mapper.input_dim
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    /// Evaluation vector `v(D)_i = k(D_i^tr, D)`.
    pub fn evaluation_vector(&self, target: &Signature) -> Result<Vec<f64>> {
        self.signatures
            .iter()
            .map(|s| kernel_eval(s, target, &self.kernel))
            .collect()
    }

    /// Unfiltered task weights for a target support set.
    pub fn score(&self, target_support: &[Example]) -> Result<TaskWeights> {
        let sig = self.mapper.signature(target_support)?;
        let v = self.evaluation_vector(&sig)?;
        let full = self.chol.solve_vec(&v)?;
        Ok(TaskWeights {
            full,
            selected: Vec::new(),
        })
    }
}

/// Gram matrix of `kernel` over `signatures`, upper triangle mirrored.
pub fn kernel_matrix(signatures: &[Signature], kernel: &KernelConfig) -> Result<Matrix> {
    let n = signatures.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| kernel_eval(&signatures[i], &signatures[j], kernel))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut k = Matrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            k[(i, i + off)] = *v;
            k[(i + off, i)] = *v;
        }
    }
    Ok(k)
}

/// Computes signatures of every training support set and factorizes
/// `K + lambda I` once.
pub fn fit_scoring(train_tasks: &MetaSet, kernel: &KernelConfig, lambda: f64) -> Result<ScoringModel> {
    if train_tasks.is_empty() {
        return Err(TasmlError::EmptyDataset);
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(TasmlError::config("lambda", "must be finite and > 0"));
    }
    kernel.validate()?;
    let mapper = FeatureMapper::new(kernel.feature_map, train_tasks.dim())?;
    let signatures = train_tasks
        .tasks
        .par_iter()
        .map(|t| mapper.signature(&t.support))
        .collect::<Result<Vec<_>>>()?;
    let mut k = kernel_matrix(&signatures, kernel)?;
    k.add_diag(lambda);
    let chol = CholeskyFactor::factorize(&k, 0.0)?;
    Ok(ScoringModel {
        signatures,
        chol,
        lambda,
        kernel: *kernel,
        mapper,
    })
}

/// Keeps the `m` largest entries of `weights.full` (ties to the lower index),
/// clamps negatives to zero and renormalizes to sum one. Falls back to uniform
/// weights when the clamped mass vanishes.
pub fn top_m_filter(weights: &TaskWeights, m: usize) -> TaskWeights {
    let n = weights.full.len();
    let m = if m == 0 || m > n {
        let c = m.clamp(1, n.max(1));
        log::warn!("top-M filter: M={m} outside [1, {n}], using {c}");
        c
    } else {
        m
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights.full[b].total_cmp(&weights.full[a]).then(a.cmp(&b)));
    order.truncate(m);
    let clamped: Vec<f64> = order.iter().map(|&i| weights.full[i].max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let selected = if total < 1e-12 {
        order.iter().map(|&i| (i, 1.0 / m as f64)).collect()
    } else {
        order.iter().zip(&clamped).map(|(&i, &w)| (i, w / total)).collect()
    };
    TaskWeights {
        full: weights.full.clone(),
        selected,
    }
}

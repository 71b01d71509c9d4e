//! End-to-end procedure: fit the scoring model and an agnostic
//! initialization once, then adapt a fresh copy of the initialization to
//! every target task on its most relevant training tasks.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_kernel::{
    fit_scoring, median_pairwise_distance, top_m_filter, FeatureMap, FeatureMapper, KernelConfig, KernelFamily,
    ScoringModel,
};
use crate::error::{Result, TasmlError};
use crate::ls_meta_learn::{task_loss, MetaParams};
use crate::meta_objectives::{erm_objective, weighted_objective, OptimizerMode, OptimizerState, WeightedObjectiveSpec};
use crate::seeding::{rng_for, TAG_ADAPT, TAG_ERM, TAG_INIT};
use crate::taskgen::{MetaSet, Task};

/// Kernel bandwidth: a fixed value or the median pairwise signature distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Named(BandwidthRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Median,
}

impl Bandwidth {
    pub const MEDIAN: Bandwidth = Bandwidth::Named(BandwidthRule::Median);
}

/// Default filter size: the reference ratio of 500 kept tasks out of 30000,
/// floored at 5.
pub fn default_top_m(n_train: usize) -> usize {
    let m = (n_train as f64 * 500.0 / 30000.0).round() as usize;
    m.max(5).min(n_train.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasmlConfig {
    pub kernel_family: KernelFamily,
    pub sigma: Bandwidth,
    pub kernel_c: f64,
    pub feature_map: FeatureMap,
    /// Ridge regularizer of the scoring model.
    pub lambda: f64,
    /// Ridge regularizer of the least-squares head.
    pub lambda_theta: f64,
    /// Weight of the ℓ2 penalty on the network parameters.
    pub l2_theta: f64,
    /// Adaptation learning rate.
    pub eta: f64,
    /// Learning rate of the unconditional initialization; `eta` when absent.
    pub init_eta: Option<f64>,
    pub optimizer: OptimizerMode,
    pub init_steps: usize,
    pub random_init: bool,
    pub meta_batch: usize,
    /// Filter size `M`; [`default_top_m`] when absent.
    pub top_m: Option<usize>,
    /// Adaptation steps `J`.
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Record query accuracy at every adaptation step.
    pub trace_eval: bool,
    pub seed: u64,
}

impl Default for TasmlConfig {
    fn default() -> Self {
        TasmlConfig {
            kernel_family: KernelFamily::Gaussian,
            sigma: Bandwidth::Fixed(50.0),
            kernel_c: 0.0,
            feature_map: FeatureMap::Identity,
            lambda: 1e-8,
            lambda_theta: 0.1,
            l2_theta: 1e-4,
            eta: 1e-4,
            init_eta: None,
            optimizer: OptimizerMode::Adam,
            init_steps: 1000,
            random_init: false,
            meta_batch: 12,
            top_m: None,
            steps: 100,
            beta1: 1.0,
            beta2: 1.0,
            trace_eval: true,
            seed: 0,
        }
    }
}

impl TasmlConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TasmlError::config(name, "must be finite and > 0"))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TasmlError::config(name, "must be finite and >= 0"))
            }
        };
        pos("lambda", self.lambda)?;
        pos("lambda_theta", self.lambda_theta)?;
        nonneg("l2_theta", self.l2_theta)?;
        pos("eta", self.eta)?;
        if let Some(e) = self.init_eta {
            pos("init_eta", e)?;
        }
        if let Bandwidth::Fixed(s) = self.sigma {
            pos("sigma", s)?;
        }
        nonneg("kernel_c", self.kernel_c)?;
        nonneg("beta1", self.beta1)?;
        nonneg("beta2", self.beta2)?;
        if self.meta_batch == 0 {
            return Err(TasmlError::config("meta_batch", "must be >= 1"));
        }
        if self.top_m == Some(0) {
            return Err(TasmlError::config("top_m", "must be >= 1"));
        }
        if self.beta1 == 0.0 && self.beta2 == 0.0 {
            return Err(TasmlError::config("beta1", "beta1 and beta2 cannot both be zero"));
        }
        Ok(())
    }

    pub fn filter_size(&self, n_train: usize) -> usize {
        self.top_m.unwrap_or_else(|| default_top_m(n_train))
    }
}

/// Output of meta-training: the scoring model over the training tasks and
/// the initialization every adaptation starts from.
#[derive(Clone, Debug)]
pub struct TrainedSystem {
    pub scoring: ScoringModel,
    pub theta0: MetaParams,
    pub train: Arc<MetaSet>,
    pub config: TasmlConfig,
    /// Mini-batch ERM objective per initialization step.
    pub init_losses: Vec<f64>,
}

fn sample_batch<'a>(rng: &mut ChaCha8Rng, tasks: &'a [Task], size: usize) -> Vec<&'a Task> {
    (0..size).map(|_| &tasks[rng.gen_range(0..tasks.len())]).collect()
}

/// Fits the scoring model on the training supports and, unless disabled,
/// runs `init_steps` of unconditional mini-batch training from a seeded
/// random initialization.
pub fn meta_train(train: Arc<MetaSet>, cfg: &TasmlConfig) -> Result<TrainedSystem> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TasmlError::EmptyDataset);
    }
    let p = train.dim();
    let sigma = match cfg.sigma {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Named(BandwidthRule::Median) => {
            let mapper = FeatureMapper::new(cfg.feature_map, p)?;
            let sigs = train
                .tasks
                .par_iter()
                .map(|t| mapper.signature(&t.support))
                .collect::<Result<Vec<_>>>()?;
            median_pairwise_distance(&sigs)
        }
    };
    let kernel = KernelConfig {
        family: cfg.kernel_family,
        sigma,
        c: cfg.kernel_c,
        feature_map: cfg.feature_map,
    };
    let scoring = fit_scoring(&train, &kernel, cfg.lambda)?;

    let mut theta = MetaParams::init(p, &mut rng_for(cfg.seed, &[TAG_INIT]));
    let mut init_losses = Vec::new();
    if !cfg.random_init && cfg.init_steps > 0 {
        let mut rng = rng_for(cfg.seed, &[TAG_ERM]);
        let mut opt = OptimizerState::new(theta.n_params(), cfg.init_eta.unwrap_or(cfg.eta), cfg.optimizer);
        let mut flat = theta.to_flat();
        for _ in 0..cfg.init_steps {
            let batch = sample_batch(&mut rng, &train.tasks, cfg.meta_batch);
            let (loss, grad) = erm_objective(&theta, &batch, cfg.lambda_theta, cfg.l2_theta)?;
            init_losses.push(loss);
            opt.apply(&mut flat, &grad)?;
            theta = MetaParams::from_flat(p, &flat)?;
        }
    }
    Ok(TrainedSystem {
        scoring,
        theta0: theta,
        train,
        config: cfg.clone(),
        init_losses,
    })
}

/// Adaptation knobs that ablations vary per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptParams {
    pub steps: usize,
    pub top_m: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eta: f64,
    pub optimizer: OptimizerMode,
    pub meta_batch: usize,
    pub lambda_theta: f64,
    pub l2_theta: f64,
    pub trace_eval: bool,
    pub seed: u64,
}

impl AdaptParams {
    pub fn from_config(cfg: &TasmlConfig, n_train: usize) -> Self {
        AdaptParams {
            steps: cfg.steps,
            top_m: cfg.filter_size(n_train),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eta: cfg.eta,
            optimizer: cfg.optimizer,
            meta_batch: cfg.meta_batch,
            lambda_theta: cfg.lambda_theta,
            l2_theta: cfg.l2_theta,
            trace_eval: cfg.trace_eval,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mini-batch objective at this step's parameters.
    pub objective: f64,
    /// Target query accuracy; absent when per-step evaluation is off.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationTrace {
    /// `steps + 1` records, the first one before any update.
    pub records: Vec<StepRecord>,
    pub final_theta: MetaParams,
    pub selected: Vec<(usize, f64)>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Wall time of the update loop alone.
    pub loop_seconds: f64,
}

impl AdaptationTrace {
    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected.iter().map(|(i, _)| *i).collect()
    }
}

/// Adapts `system.theta0` to `target`. Only the target's support set enters
/// the objective; its query set is used for accuracy measurement alone.
/// `task_index` salts the mini-batch stream so each target is reproducible.
pub fn adapt(system: &TrainedSystem, target: &Task, params: &AdaptParams, task_index: u64) -> Result<AdaptationTrace> {
    if params.meta_batch == 0 {
        return Err(TasmlError::config("meta_batch", "must be >= 1"));
    }
    let weights = top_m_filter(&system.scoring.score(&target.support)?, params.top_m);
    let selected: Vec<(&Task, f64)> = weights
        .selected
        .iter()
        .map(|&(i, w)| (&system.train.tasks[i], w))
        .collect();
    let support_only = Task {
        support: target.support.clone(),
        query: Vec::new(),
        ways: target.ways,
        mode_id: None,
    };
    let evaluate = |theta: &MetaParams| -> Result<f64> {
        Ok(task_loss(theta, &target.support, &target.query, target.ways, params.lambda_theta)?.accuracy)
    };

    let mut rng = rng_for(params.seed, &[TAG_ADAPT, task_index]);
    let p = system.theta0.dim();
    let mut theta = system.theta0.clone();
    let mut flat = theta.to_flat();
    let mut opt = OptimizerState::new(flat.len(), params.eta, params.optimizer);
    // uniform sampling with replacement; rescaled so the batch estimates the
    // full weighted sum over the selected tasks
    let scale = selected.len() as f64 / params.meta_batch as f64;
    let mut batch_spec = || WeightedObjectiveSpec {
        weighted_tasks: (0..params.meta_batch)
            .map(|_| {
                let (t, w) = selected[rng.gen_range(0..selected.len())];
                (t, w * scale)
            })
            .collect(),
        target_task: Some(&support_only),
        beta1: params.beta1,
        beta2: params.beta2,
        lambda_theta: params.lambda_theta,
        l2_theta: params.l2_theta,
    };

    let initial_accuracy = evaluate(&theta)?;
    let mut records = Vec::with_capacity(params.steps + 1);
    let mut loop_seconds = 0.0;
    for step in 0..=params.steps {
        let accuracy = if step == 0 {
            Some(initial_accuracy)
        } else if params.trace_eval {
            Some(evaluate(&theta)?)
        } else {
            None
        };
        let spec = batch_spec();
        let started = Instant::now();
        let (objective, grad) = weighted_objective(&theta, &spec)?;
        if step < params.steps {
            opt.apply(&mut flat, &grad)?;
            theta = MetaParams::from_flat(p, &flat)?;
            loop_seconds += started.elapsed().as_secs_f64();
        }
        records.push(StepRecord {
            step,
            objective,
            accuracy,
        });
    }
    let final_accuracy = match records.last().and_then(|r| r.accuracy) {
        Some(a) => a,
        None => evaluate(&theta)?,
    };
    if let Some(last) = records.last_mut() {
        last.accuracy = Some(final_accuracy);
    }
    Ok(AdaptationTrace {
        records,
        final_theta: theta,
        selected: weights.selected,
        initial_accuracy,
        final_accuracy,
        loop_seconds,
    })
}

#[derive(Clone, Debug)]
pub struct EvaluationSummary {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_initial_accuracy: f64,
    pub std_initial_accuracy: f64,
    /// Fraction of selected training tasks sharing the target's mode,
    /// averaged over targets; `None` without ground-truth modes.
    pub mode_retrieval: Option<f64>,
    pub traces: Vec<AdaptationTrace>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Adapts to every test task (in parallel, results kept in task order) and
/// aggregates final and pre-adaptation accuracies.
pub fn evaluate(system: &TrainedSystem, test: &MetaSet, params: &AdaptParams) -> Result<EvaluationSummary> {
    if test.is_empty() {
        return Err(TasmlError::EmptyDataset);
    }
    let traces = test
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| adapt(system, t, params, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = traces.iter().map(|t| t.final_accuracy).collect();
    let initials: Vec<f64> = traces.iter().map(|t| t.initial_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&finals);
    let (mean_initial_accuracy, std_initial_accuracy) = mean_std(&initials);
    let retrieval: Option<Vec<f64>> = test
        .tasks
        .iter()
        .zip(&traces)
        .map(|(t, tr)| {
            let mode = t.mode_id?;
            let sel = tr.selected_indices();
            let same = sel
                .iter()
                .filter(|&&i| system.train.tasks[i].mode_id == Some(mode))
                .count();
            Some(same as f64 / sel.len().max(1) as f64)
        })
        .collect();
    Ok(EvaluationSummary {
        mean_accuracy,
        std_accuracy,
        mean_initial_accuracy,
        std_initial_accuracy,
        mode_retrieval: retrieval.map(|r| mean_std(&r).0),
        traces,
    })
}

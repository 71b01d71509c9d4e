//! Experiment runner behind the command line: config files, seeded data,
//! runs, ablations, throughput benchmarks and their CSV/JSON outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset_kernel::{fit_scoring, FeatureMapper, KernelFamily};
use crate::driver::{
    adapt, evaluate, mean_std, meta_train, AdaptParams, AdaptationTrace, EvaluationSummary, TasmlConfig,
    TrainedSystem,
};
use crate::error::{Result, TasmlError};
use crate::seeding::derive_seed;
use crate::taskgen::{
    load_embedding_metaset, sample_multimodal_tasks, synthetic_embedding_pool, EpisodeSpec, GeneratorConfig,
    MetaSet, Split,
};

pub const RESULTS_HEADER: &str = "experiment,variant,seed,mean_acc_pct,std_acc_pct,steps_per_sec,wall_s";
pub const TRACES_HEADER: &str = "experiment,variant,seed,task,step,objective,query_acc_pct";
pub const CURVE_HEADER: &str = "variant,step,mean_acc_pct,std_acc_pct,n";

/// Reference grid of filter sizes, given for 30000 training tasks and
/// rescaled to `n_train`.
pub const TOPM_REFERENCE: [usize; 5] = [100, 500, 1000, 10000, 30000];
pub const BETA_GRID: [(f64, f64); 4] = [(0.0, 1.0), (1.0, 0.0), (1.0, 1.0), (1.0, 2.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic {
        #[serde(default)]
        generator: GeneratorConfig,
    },
    Embeddings {
        train: PathBuf,
        test: PathBuf,
        ways: usize,
        shots: usize,
        #[serde(default = "default_query")]
        query_per_class: usize,
    },
}

fn default_query() -> usize {
    15
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output() -> PathBuf {
    PathBuf::from("tasml-out")
}
fn default_ablation_steps() -> usize {
    500
}
fn default_bench_tasks() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub source: TaskSource,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Write measured timings; `na` otherwise, which keeps outputs
    /// byte-reproducible.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub tasml: TasmlConfig,
    /// `J` of the long run in the steps ablation.
    #[serde(default = "default_ablation_steps")]
    pub ablation_steps: usize,
    #[serde(default = "default_bench_tasks")]
    pub bench_tasks: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '"', '\n', '\r']) {
            return Err(TasmlError::config("name", "must be non-empty without commas, quotes or newlines"));
        }
        if self.n_train == 0 {
            return Err(TasmlError::config("n_train", "must be >= 1"));
        }
        if self.n_test == 0 {
            return Err(TasmlError::config("n_test", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(TasmlError::config("seeds", "must list at least one seed"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(TasmlError::config("seeds", "must not repeat"));
        }
        if self.bench_tasks == 0 {
            return Err(TasmlError::config("bench_tasks", "must be >= 1"));
        }
        match &self.source {
            TaskSource::Synthetic { generator } => generator.validate()?,
            TaskSource::Embeddings {
                ways,
                shots,
                query_per_class,
                ..
            } => {
                for (field, v) in [("ways", ways), ("shots", shots), ("query_per_class", query_per_class)] {
                    if *v == 0 {
                        return Err(TasmlError::config(field, "must be >= 1"));
                    }
                }
            }
        }
        self.tasml.validate()
    }

    /// Parses and validates a JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generator of one run: the configured generator reseeded by the run
    /// seed, so every seed sees fresh tasks.
    pub fn generator_for(&self, seed: u64) -> Option<GeneratorConfig> {
        match &self.source {
            TaskSource::Synthetic { generator } => Some(GeneratorConfig {
                seed: derive_seed(generator.seed, &[seed]),
                ..generator.clone()
            }),
            TaskSource::Embeddings { .. } => None,
        }
    }

    pub fn tasml_for(&self, seed: u64) -> TasmlConfig {
        TasmlConfig {
            seed,
            ..self.tasml.clone()
        }
    }
}

/// Training and test tasks of one seed.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub train: Arc<MetaSet>,
    pub test: MetaSet,
}

pub fn build_data(exp: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let (train, test) = match &exp.source {
        TaskSource::Synthetic { .. } => {
            let g = exp.generator_for(seed).expect("synthetic source");
            (
                sample_multimodal_tasks(&g, exp.n_train, Split::Train)?,
                sample_multimodal_tasks(&g, exp.n_test, Split::Test)?,
            )
        }
        TaskSource::Embeddings {
            train,
            test,
            ways,
            shots,
            query_per_class,
        } => {
            let spec = |n_tasks| EpisodeSpec {
                ways: *ways,
                shots: *shots,
                query_per_class: *query_per_class,
                n_tasks,
                seed,
            };
            (
                load_embedding_metaset(train, &spec(exp.n_train), Split::Train)?,
                load_embedding_metaset(test, &spec(exp.n_test), Split::Test)?,
            )
        }
    };
    if train.dim() != test.dim() {
        return Err(TasmlError::dims("test task dim", train.dim(), test.dim()));
    }
    Ok(SeedData {
        train: Arc::new(train),
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Kernel,
    Topm,
    Beta,
    Steps,
    Init,
}

impl Ablation {
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Kernel => "kernel",
            Ablation::Topm => "topm",
            Ablation::Beta => "beta",
            Ablation::Steps => "steps",
            Ablation::Init => "init",
        }
    }
}

impl FromStr for Ablation {
    type Err = TasmlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(Ablation::Kernel),
            "topm" => Ok(Ablation::Topm),
            "beta" => Ok(Ablation::Beta),
            "steps" => Ok(Ablation::Steps),
            "init" => Ok(Ablation::Init),
            _ => Err(TasmlError::config("which", format!("unknown ablation `{s}`"))),
        }
    }
}

/// Filter size for a reference value given at 30000 training tasks.
pub fn scaled_top_m(reference: usize, n_train: usize) -> usize {
    let m = (reference as f64 * n_train as f64 / 30000.0).round() as usize;
    m.max(3).min(n_train.max(1))
}

fn beta_label(b1: f64, b2: f64) -> String {
    format!("beta1={b1}/beta2={b2}")
}

/// Labeled configurations compared by an ablation.
pub fn ablation_variants(exp: &ExperimentConfig, which: Ablation) -> Vec<(String, TasmlConfig)> {
    let base = &exp.tasml;
    let with = |f: &dyn Fn(&mut TasmlConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match which {
        Ablation::Kernel => [KernelFamily::Gaussian, KernelFamily::Linear, KernelFamily::Laplace]
            .into_iter()
            .map(|k| (format!("kernel={}", k.label()), with(&|c| c.kernel_family = k)))
            .collect(),
        Ablation::Topm => TOPM_REFERENCE
            .into_iter()
            .map(|r| {
                let m = scaled_top_m(r, exp.n_train);
                (format!("m_ref={r}/M={m}"), with(&|c| c.top_m = Some(m)))
            })
            .collect(),
        Ablation::Beta => BETA_GRID
            .into_iter()
            .map(|(b1, b2)| {
                (
                    beta_label(b1, b2),
                    with(&|c| {
                        c.beta1 = b1;
                        c.beta2 = b2;
                    }),
                )
            })
            .collect(),
        Ablation::Steps => vec![(
            format!("J={}", exp.ablation_steps),
            with(&|c| {
                c.steps = exp.ablation_steps;
                c.trace_eval = true;
            }),
        )],
        Ablation::Init => vec![
            ("init=erm".to_string(), with(&|c| c.random_init = false)),
            ("init=random".to_string(), with(&|c| c.random_init = true)),
        ],
    }
}

/// Adaptation-only fields reset, so configs differing only there share one
/// trained system.
fn training_key(cfg: &TasmlConfig) -> TasmlConfig {
    let d = TasmlConfig::default();
    TasmlConfig {
        steps: d.steps,
        top_m: d.top_m,
        beta1: d.beta1,
        beta2: d.beta2,
        trace_eval: d.trace_eval,
        eta: if cfg.init_eta.is_some() && !cfg.random_init {
            d.eta
        } else {
            cfg.eta
        },
        ..cfg.clone()
    }
}

/// Meta-trained systems of one seed, reused across variants.
#[derive(Default)]
pub struct SystemCache {
    entries: Vec<(TasmlConfig, TrainedSystem, f64)>,
}

impl SystemCache {
    /// Returns the system for `cfg` and the seconds spent training it.
    pub fn get(&mut self, train: &Arc<MetaSet>, cfg: &TasmlConfig) -> Result<(TrainedSystem, f64)> {
        let key = training_key(cfg);
        if let Some((_, sys, secs)) = self.entries.iter().find(|(k, _, _)| *k == key) {
            let mut sys = sys.clone();
            sys.config = cfg.clone();
            return Ok((sys, *secs));
        }
        let started = Instant::now();
        let sys = meta_train(Arc::clone(train), cfg)?;
        let secs = started.elapsed().as_secs_f64();
        self.entries.push((key, sys.clone(), secs));
        Ok((sys, secs))
    }
}

/// One variant evaluated under one seed.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub variant: String,
    pub seed: u64,
    pub summary: EvaluationSummary,
    pub steps_per_sec: Option<f64>,
    pub wall_s: f64,
}

fn steps_per_sec(traces: &[AdaptationTrace]) -> Option<f64> {
    let steps: usize = traces.iter().map(|t| t.records.len() - 1).sum();
    let secs: f64 = traces.iter().map(|t| t.loop_seconds).sum();
    (steps > 0 && secs > 0.0).then(|| steps as f64 / secs)
}

pub fn run_variant(
    data: &SeedData,
    cache: &mut SystemCache,
    variant: &str,
    cfg: &TasmlConfig,
) -> Result<(SeedResult, TrainedSystem)> {
    let started = Instant::now();
    let (system, train_secs) = cache.get(&data.train, cfg)?;
    let params = AdaptParams::from_config(cfg, data.train.len());
    let summary = evaluate(&system, &data.test, &params)?;
    let wall_s = train_secs + started.elapsed().as_secs_f64();
    info!(
        "{variant} seed {}: {:.2}% (from {:.2}%)",
        cfg.seed,
        100.0 * summary.mean_accuracy,
        100.0 * summary.mean_initial_accuracy
    );
    Ok((
        SeedResult {
            variant: variant.to_string(),
            seed: cfg.seed,
            steps_per_sec: steps_per_sec(&summary.traces),
            summary,
            wall_s,
        },
        system,
    ))
}

fn fmt_opt(v: Option<f64>, enabled: bool) -> String {
    match v {
        Some(x) if enabled => format!("{x:.4}"),
        _ => "na".to_string(),
    }
}

/// `results.csv`: one row per (variant, seed) and an `all` row per variant
/// with the mean and standard deviation of the per-seed means.
pub fn results_csv(exp: &ExperimentConfig, rows: &[SeedResult]) -> String {
    let mut out = String::new();
    writeln!(out, "{RESULTS_HEADER}").unwrap();
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let t = exp.record_timing;
    for v in variants {
        let mine: Vec<&SeedResult> = rows.iter().filter(|r| r.variant == v).collect();
        for r in &mine {
            writeln!(
                out,
                "{},{},{},{:.4},{:.4},{},{}",
                exp.name,
                v,
                r.seed,
                100.0 * r.summary.mean_accuracy,
                100.0 * r.summary.std_accuracy,
                fmt_opt(r.steps_per_sec, t),
                fmt_opt(Some(r.wall_s), t)
            )
            .unwrap();
        }
        let means: Vec<f64> = mine.iter().map(|r| 100.0 * r.summary.mean_accuracy).collect();
        let (m, s) = mean_std(&means);
        let sps: Vec<f64> = mine.iter().filter_map(|r| r.steps_per_sec).collect();
        let sps = (sps.len() == mine.len()).then(|| mean_std(&sps).0);
        let wall: f64 = mine.iter().map(|r| r.wall_s).sum();
        writeln!(
            out,
            "{},{},all,{:.4},{:.4},{},{}",
            exp.name,
            v,
            m,
            s,
            fmt_opt(sps, t),
            fmt_opt(Some(wall), t)
        )
        .unwrap();
    }
    out
}

/// `traces.csv`: one row per adaptation step, `J + 1` rows per task.
pub fn traces_csv(exp: &ExperimentConfig, rows: &[SeedResult]) -> String {
    let mut out = String::new();
    writeln!(out, "{TRACES_HEADER}").unwrap();
    for r in rows {
        for (task, tr) in r.summary.traces.iter().enumerate() {
            for rec in &tr.records {
                let acc = rec
                    .accuracy
                    .map(|a| format!("{:.4}", 100.0 * a))
                    .unwrap_or_else(|| "na".to_string());
                writeln!(
                    out,
                    "{},{},{},{},{},{:e},{}",
                    exp.name, r.variant, r.seed, task, rec.step, rec.objective, acc
                )
                .unwrap();
            }
        }
    }
    out
}

/// `curve.csv`: accuracy per step pooled over tasks and seeds, for steps
/// where every task was evaluated.
pub fn curve_csv(rows: &[SeedResult]) -> String {
    let mut out = String::new();
    writeln!(out, "{CURVE_HEADER}").unwrap();
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    for v in variants {
        let traces: Vec<&AdaptationTrace> = rows
            .iter()
            .filter(|r| r.variant == v)
            .flat_map(|r| &r.summary.traces)
            .collect();
        let len = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
        for step in 0..len {
            let accs: Option<Vec<f64>> = traces
                .iter()
                .map(|t| t.records[step].accuracy.map(|a| 100.0 * a))
                .collect();
            if let Some(accs) = accs {
                let (m, s) = mean_std(&accs);
                writeln!(out, "{v},{step},{m:.4},{s:.4},{}", accs.len()).unwrap();
            }
        }
    }
    out
}

/// Aggregates with the unconditional (step 0) baseline alongside.
pub fn summary_json(exp: &ExperimentConfig, rows: &[SeedResult]) -> serde_json::Value {
    let t = exp.record_timing;
    let per_seed: Vec<_> = rows
        .iter()
        .map(|r| {
            let s = &r.summary;
            json!({
                "variant": r.variant,
                "seed": r.seed,
                "mean_acc_pct": 100.0 * s.mean_accuracy,
                "std_acc_pct": 100.0 * s.std_accuracy,
                "baseline_mean_acc_pct": 100.0 * s.mean_initial_accuracy,
                "baseline_std_acc_pct": 100.0 * s.std_initial_accuracy,
                "mode_retrieval": s.mode_retrieval,
                "steps_per_sec": if t { r.steps_per_sec } else { None },
                "wall_s": if t { Some(r.wall_s) } else { None },
            })
        })
        .collect();
    json!({
        "experiment": exp.name,
        "config": exp,
        "runs": per_seed,
    })
}

fn write_outputs(exp: &ExperimentConfig, dir: &Path, rows: &[SeedResult]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(exp, rows))?;
    fs::write(dir.join("traces.csv"), traces_csv(exp, rows))?;
    fs::write(dir.join("curve.csv"), curve_csv(rows))?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary_json(exp, rows))? + "\n",
    )?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub rows: Vec<SeedResult>,
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint-seed{seed}.bin"))
}

/// Full method on every seed. Rows hold the adapted results (`tasml`) and
/// the unconditional initialization alone (`unconditional`); one checkpoint
/// per seed is written next to the CSV files.
pub fn cmd_run(exp: &ExperimentConfig) -> Result<RunReport> {
    exp.validate()?;
    let dir = exp.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut baselines = Vec::new();
    for &seed in &exp.seeds {
        let data = build_data(exp, seed)?;
        let cfg = exp.tasml_for(seed);
        let mut cache = SystemCache::default();
        let (row, system) = run_variant(&data, &mut cache, "tasml", &cfg)?;
        save_checkpoint(&checkpoint_path(&dir, seed), exp, seed, &system)?;
        let mut base = row.clone();
        base.variant = "unconditional".to_string();
        base.summary.mean_accuracy = row.summary.mean_initial_accuracy;
        base.summary.std_accuracy = row.summary.std_initial_accuracy;
        base.summary.traces = Vec::new();
        base.steps_per_sec = None;
        baselines.push(base);
        rows.push(row);
    }
    let mut all = rows.clone();
    all.extend(baselines);
    fs::write(dir.join("results.csv"), results_csv(exp, &all))?;
    fs::write(dir.join("traces.csv"), traces_csv(exp, &rows))?;
    fs::write(dir.join("curve.csv"), curve_csv(&rows))?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary_json(exp, &rows))? + "\n",
    )?;
    Ok(RunReport { output_dir: dir, rows })
}

pub fn cmd_ablate(exp: &ExperimentConfig, which: Ablation) -> Result<RunReport> {
    exp.validate()?;
    let variants = ablation_variants(exp, which);
    for (label, cfg) in &variants {
        cfg.validate()
            .map_err(|e| TasmlError::config("tasml", format!("variant {label}: {e}")))?;
    }
    let dir = exp.output_dir.join(format!("ablate-{}", which.label()));
    let mut rows = Vec::new();
    for &seed in &exp.seeds {
        let data = build_data(exp, seed)?;
        let mut cache = SystemCache::default();
        for (label, cfg) in &variants {
            let cfg = TasmlConfig {
                seed,
                ..cfg.clone()
            };
            rows.push(run_variant(&data, &mut cache, label, &cfg)?.0);
        }
    }
    write_outputs(exp, &dir, &rows)?;
    Ok(RunReport { output_dir: dir, rows })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub p: usize,
    pub steps: usize,
    pub tasks: usize,
    /// Mean and standard deviation over tasks; `None` when `steps` is 0.
    pub steps_per_sec: Option<(f64, f64)>,
    /// Per-target scoring time in seconds, mean and standard deviation.
    pub scoring_latency_s: (f64, f64),
    /// One-time kernel matrix fit and factorization.
    pub scoring_fit_s: f64,
}

/// Times the adaptation loop with per-step evaluation off, on the first
/// seed, plus the scoring latency measured separately.
pub fn cmd_bench(exp: &ExperimentConfig) -> Result<BenchReport> {
    exp.validate()?;
    let seed = exp.seeds[0];
    let data = build_data(exp, seed)?;
    let cfg = TasmlConfig {
        trace_eval: false,
        ..exp.tasml_for(seed)
    };
    let system = meta_train(Arc::clone(&data.train), &cfg)?;
    let fit_started = Instant::now();
    fit_scoring(&data.train, system.scoring.kernel(), cfg.lambda)?;
    let scoring_fit_s = fit_started.elapsed().as_secs_f64();
    let params = AdaptParams::from_config(&cfg, data.train.len());
    let n = exp.bench_tasks.max(5);
    let mut rates = Vec::with_capacity(n);
    let mut latencies = Vec::with_capacity(n);
    for i in 0..n {
        let task = &data.test.tasks[i % data.test.len()];
        let started = Instant::now();
        system.scoring.score(&task.support)?;
        latencies.push(started.elapsed().as_secs_f64());
        let trace = adapt(&system, task, &params, i as u64)?;
        if params.steps > 0 && trace.loop_seconds > 0.0 {
            rates.push(params.steps as f64 / trace.loop_seconds);
        }
    }
    let report = BenchReport {
        p: system.theta0.dim(),
        steps: params.steps,
        tasks: n,
        steps_per_sec: (rates.len() == n).then(|| mean_std(&rates)),
        scoring_latency_s: mean_std(&latencies),
        scoring_fit_s,
    };
    fs::create_dir_all(&exp.output_dir)?;
    fs::write(
        exp.output_dir.join("bench.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

/// Writes the synthetic generator of the first seed as an embedding file
/// (binary, or CSV for a `.csv` path). Class ids are `class * n_modes + mode`.
pub fn cmd_gen_tasks(exp: &ExperimentConfig, out: &Path, split: Split) -> Result<usize> {
    exp.validate()?;
    let g = exp
        .generator_for(exp.seeds[0])
        .ok_or_else(|| TasmlError::config("source", "gen-tasks needs a synthetic source"))?;
    let per_class = 2 * (g.shots + g.query_per_class);
    let pool = synthetic_embedding_pool(&g, split, per_class)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    pool.write(out)?;
    Ok(pool.classes.len())
}

/// Stores `system` with a snapshot of the experiment and seed that produced
/// its training tasks.
pub fn save_checkpoint(path: &Path, exp: &ExperimentConfig, seed: u64, system: &TrainedSystem) -> Result<()> {
    let config = json!({
        "experiment": exp,
        "seed": seed,
        "tasml": system.config,
    });
    Checkpoint {
        config,
        theta0: system.theta0.clone(),
        scoring: system.scoring.clone(),
    }
    .write(path)
}

/// Restores a system, regenerating its training tasks from the stored
/// config and checking them against the stored signatures.
pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, u64, TrainedSystem)> {
    let ck = Checkpoint::read(path)?;
    let field = |k: &str| {
        ck.config
            .get(k)
            .cloned()
            .ok_or_else(|| TasmlError::Checkpoint(format!("config snapshot lacks `{k}`")))
    };
    let exp: ExperimentConfig = serde_json::from_value(field("experiment")?)?;
    let seed: u64 = serde_json::from_value(field("seed")?)?;
    let config: TasmlConfig = serde_json::from_value(field("tasml")?)?;
    let data = build_data(&exp, seed)?;
    let sigs = ck.scoring.signatures();
    if sigs.len() != data.train.len() {
        return Err(TasmlError::Checkpoint(format!(
            "stored {} signatures but regenerated {} tasks",
            sigs.len(),
            data.train.len()
        )));
    }
    let mapper = FeatureMapper::new(ck.scoring.kernel().feature_map, data.train.dim())?;
    for (i, (t, s)) in data.train.tasks.iter().zip(sigs).enumerate() {
        if mapper.signature(&t.support)? != *s {
            return Err(TasmlError::Checkpoint(format!("training task {i} differs from the stored signature")));
        }
    }
    let system = TrainedSystem {
        scoring: ck.scoring,
        theta0: ck.theta0,
        train: data.train,
        config,
        init_losses: Vec::new(),
    };
    Ok((exp, seed, system))
}

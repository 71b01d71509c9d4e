//! Episodic C-way K-shot tasks.
//!
//! Two sources are supported: a synthetic multimodal generator whose
//! ground-truth mode is recorded on every task, and precomputed embedding
//! files (binary `TASKEMB1` or CSV) from which episodes are sampled.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TasmlError};
use crate::numerics::Matrix;
use crate::seeding::{rng_for, TAG_CLASS, TAG_TASK, TAG_WORLD};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"TASKEMB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    /// Number of classes `C`; labels live in `0..ways`.
    pub ways: usize,
    /// Generating mode, known only for synthetic tasks.
    pub mode_id: Option<usize>,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.support.first().map(|e| e.x.len()).unwrap_or(0)
    }

    /// Checks the episodic invariants: `shots` support examples per class,
    /// query labels drawn from support labels, consistent dimensions.
    pub fn validate(&self, shots: usize) -> Result<()> {
        if self.support.is_empty() {
            return Err(TasmlError::EmptyDataset);
        }
        let d = self.dim();
        let mut counts = vec![0usize; self.ways];
        for e in self.support.iter().chain(&self.query) {
            if e.x.len() != d {
                return Err(TasmlError::dims("task example dim", d, e.x.len()));
            }
            if e.y >= self.ways {
                return Err(TasmlError::dims("task label", self.ways, e.y));
            }
        }
        for e in &self.support {
            counts[e.y] += 1;
        }
        if let Some(c) = counts.iter().find(|&&c| c != shots) {
            return Err(TasmlError::dims("support examples per class", shots, *c));
        }
        Ok(())
    }
}

/// Stacks example inputs into an `m × d` matrix.
pub fn inputs_matrix(examples: &[Example]) -> Result<Matrix> {
    if examples.is_empty() {
        return Err(TasmlError::EmptyDataset);
    }
    Matrix::from_rows(&examples.iter().map(|e| e.x.as_slice()).collect::<Vec<_>>())
}

/// One-hot label matrix `m × ways`.
pub fn one_hot(examples: &[Example], ways: usize) -> Matrix {
    let mut y = Matrix::zeros(examples.len(), ways);
    for (i, e) in examples.iter().enumerate() {
        y[(i, e.y)] = 1.0;
    }
    y
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaSet {
    pub tasks: Vec<Task>,
    pub split: Split,
    pub class_pool: BTreeSet<u32>,
}

impl MetaSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tasks.first().map(Task::dim).unwrap_or(0)
    }
}

/// Synthetic multimodal task distribution.
///
/// Each mode owns a block of `informative_dims` coordinates carrying the class
/// signal and a mode offset that shifts every input. The blocks of inactive
/// modes carry `cross_block_std` noise and the remaining coordinates carry
/// `distractor_std` noise, so a representation tuned to one mode keeps loud
/// noise for the others. Labels of the `C` slots are relabeled by the mode's
/// permutation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_modes: usize,
    /// Embedding dimension.
    pub d: usize,
    pub ways: usize,
    pub shots: usize,
    pub query_per_class: usize,
    /// Within-class standard deviation on the informative block.
    pub cluster_spread: f64,
    /// One permutation of `0..ways` per mode; empty selects identity for
    /// mode 0, reversal for mode 1 and cyclic shifts beyond.
    pub mode_permutations: Vec<Vec<usize>>,
    pub seed: u64,
    /// Classes in each split's pool (rounded down to a multiple of `ways`).
    pub classes_per_split: usize,
    pub informative_dims: usize,
    /// Scale of class prototypes on the informative block.
    pub class_separation: f64,
    /// Noise standard deviation on non-informative coordinates.
    pub distractor_std: f64,
    /// Noise standard deviation on the informative blocks of inactive modes.
    pub cross_block_std: f64,
    /// Norm of each mode's input offset.
    pub mode_offset: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_modes: 2,
            d: 64,
            ways: 5,
            shots: 5,
            query_per_class: 15,
            cluster_spread: 1.0,
            mode_permutations: Vec::new(),
            seed: 0,
            classes_per_split: 50,
            informative_dims: 8,
            class_separation: 1.5,
            distractor_std: 1.0,
            cross_block_std: 3.0,
            mode_offset: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(TasmlError::config(f, r));
        if self.n_modes < 1 {
            return bad("n_modes", "must be >= 1");
        }
        if self.ways < 1 {
            return bad("ways", "must be >= 1");
        }
        if self.shots < 1 {
            return bad("shots", "must be >= 1");
        }
        if self.query_per_class < 1 {
            return bad("query_per_class", "must be >= 1");
        }
        if self.d < 1 {
            return bad("d", "must be >= 1");
        }
        if self.informative_dims < 1 || self.informative_dims * self.n_modes > self.d {
            return bad("informative_dims", "need 1 <= informative_dims * n_modes <= d");
        }
        if self.classes_per_split < self.ways {
            return bad("classes_per_split", "must be >= ways");
        }
        for (f, v) in [
            ("cluster_spread", self.cluster_spread),
            ("class_separation", self.class_separation),
            ("distractor_std", self.distractor_std),
            ("cross_block_std", self.cross_block_std),
            ("mode_offset", self.mode_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(f, "must be finite and >= 0");
            }
        }
        if !self.mode_permutations.is_empty() {
            if self.mode_permutations.len() != self.n_modes {
                return bad("mode_permutations", "need one permutation per mode");
            }
            for p in &self.mode_permutations {
                let mut s = p.clone();
                s.sort_unstable();
                if s != (0..self.ways).collect::<Vec<_>>() {
                    return bad("mode_permutations", "each entry must permute 0..ways");
                }
            }
        }
        Ok(())
    }

    pub fn permutation(&self, mode: usize) -> Vec<usize> {
        if !self.mode_permutations.is_empty() {
            return self.mode_permutations[mode].clone();
        }
        let c = self.ways;
        match mode {
            0 => (0..c).collect(),
            1 => (0..c).rev().collect(),
            m => (0..c).map(|j| (j + m - 1) % c).collect(),
        }
    }

    fn pool_size(&self) -> usize {
        (self.classes_per_split / self.ways) * self.ways
    }

    /// Global class identities belonging to `split`; pools never overlap.
    pub fn class_pool(&self, split: Split) -> BTreeSet<u32> {
        let n = self.pool_size() as u32;
        let start = split.index() as u32 * n;
        (start..start + n).collect()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Fixed geometry shared by all splits of one generator seed.
struct World {
    offsets: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &GeneratorConfig) -> World {
        let mut rng = rng_for(cfg.seed, &[TAG_WORLD]);
        let offsets = (0..cfg.n_modes)
            .map(|_| {
                let v = gaussian_vec(&mut rng, cfg.d, 1.0);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|a| a * cfg.mode_offset / norm).collect()
            })
            .collect();
        let anchors = (0..cfg.ways)
            .map(|_| gaussian_vec(&mut rng, cfg.informative_dims, 1.0))
            .collect();
        World { offsets, anchors }
    }

    /// Prototype of a global class on the informative block. Class `k`
    /// belongs to slot `k mod ways` and sits near that slot's anchor.
    fn prototype(&self, cfg: &GeneratorConfig, class_id: u32) -> Vec<f64> {
        let mut rng = rng_for(cfg.seed, &[TAG_CLASS, class_id as u64]);
        let anchor = &self.anchors[class_id as usize % cfg.ways];
        let s = cfg.class_separation / std::f64::consts::SQRT_2;
        anchor
            .iter()
            .map(|a| s * (a + rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    fn sample_point(
        &self,
        cfg: &GeneratorConfig,
        mode: usize,
        proto: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        let b = cfg.informative_dims;
        let block = mode * b..(mode + 1) * b;
        let offset = &self.offsets[mode];
        (0..cfg.d)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                if block.contains(&i) {
                    offset[i] + proto[i - block.start] + cfg.cluster_spread * z
                } else if i < cfg.n_modes * b {
                    offset[i] + cfg.cross_block_std * z
                } else {
                    offset[i] + cfg.distractor_std * z
                }
            })
            .collect()
    }
}

/// Samples `n_tasks` tasks from the multimodal generator for `split`.
/// Output is a pure function of `(cfg, split, n_tasks)`.
pub fn sample_multimodal_tasks(cfg: &GeneratorConfig, n_tasks: usize, split: Split) -> Result<MetaSet> {
    cfg.validate()?;
    let world = World::new(cfg);
    let pool: Vec<u32> = cfg.class_pool(split).into_iter().collect();
    let per_slot = pool.len() / cfg.ways;
    let mut prototypes: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let mut rng = rng_for(cfg.seed, &[TAG_TASK, split.index(), t as u64]);
        let mode = rng.gen_range(0..cfg.n_modes);
        let perm = cfg.permutation(mode);
        let mut support = Vec::with_capacity(cfg.ways * cfg.shots);
        let mut query = Vec::with_capacity(cfg.ways * cfg.query_per_class);
        for (slot, &label) in perm.iter().enumerate() {
            let class_id = pool[slot + cfg.ways * rng.gen_range(0..per_slot)];
            let proto = prototypes
                .entry(class_id)
                .or_insert_with(|| world.prototype(cfg, class_id))
                .clone();
            for _ in 0..cfg.shots {
                let x = world.sample_point(cfg, mode, &proto, &mut rng);
                support.push(Example { x, y: label });
            }
            for _ in 0..cfg.query_per_class {
                let x = world.sample_point(cfg, mode, &proto, &mut rng);
                query.push(Example { x, y: label });
            }
        }
        tasks.push(Task {
            support,
            query,
            ways: cfg.ways,
            mode_id: Some(mode),
        });
    }
    Ok(MetaSet {
        tasks,
        split,
        class_pool: pool.into_iter().collect(),
    })
}

/// Samples `per_class` points for every (class, mode) pair of a split's pool.
/// File class ids are `class_id * n_modes + mode`.
pub fn synthetic_embedding_pool(cfg: &GeneratorConfig, split: Split, per_class: usize) -> Result<EmbeddingPool> {
    cfg.validate()?;
    let world = World::new(cfg);
    let mut classes = BTreeMap::new();
    for class_id in cfg.class_pool(split) {
        let proto = world.prototype(cfg, class_id);
        for mode in 0..cfg.n_modes {
            let mut rng = rng_for(cfg.seed, &[TAG_CLASS, class_id as u64, mode as u64, 1]);
            let pts = (0..per_class)
                .map(|_| world.sample_point(cfg, mode, &proto, &mut rng))
                .collect();
            classes.insert(class_id * cfg.n_modes as u32 + mode as u32, pts);
        }
    }
    Ok(EmbeddingPool { dim: cfg.d, classes })
}

/// Class-indexed embeddings as stored in an embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPool {
    pub dim: usize,
    pub classes: BTreeMap<u32, Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub query_per_class: usize,
    pub n_tasks: usize,
    pub seed: u64,
}

fn malformed(path: &Path, record: usize, message: impl Into<String>) -> TasmlError {
    TasmlError::FileMalformed {
        path: path.to_path_buf(),
        record,
        message: message.into(),
    }
}

impl EmbeddingPool {
    /// Reads a binary `TASKEMB1` file, or CSV when the extension is `.csv`.
    pub fn read(path: &Path) -> Result<EmbeddingPool> {
        let is_csv = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("csv"))
            .unwrap_or(false);
        if is_csv {
            Self::read_csv(path)
        } else {
            Self::read_binary(path)
        }
    }

    fn read_binary(path: &Path) -> Result<EmbeddingPool> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize, record: usize, what: &str| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(malformed(path, record, format!("truncated while reading {what}")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if take(8, 0, "magic")? != EMBEDDING_MAGIC {
            return Err(malformed(path, 0, "bad magic, expected TASKEMB1"));
        }
        let class_count = u32_at(take(4, 0, "class_count")?) as usize;
        let dim = u32_at(take(4, 0, "dim")?) as usize;
        if dim == 0 {
            return Err(malformed(path, 0, "dim must be positive"));
        }
        let mut classes = BTreeMap::new();
        for rec in 1..=class_count {
            let class_id = u32_at(take(4, rec, "class_id")?);
            let n = u32_at(take(4, rec, "n_examples")?) as usize;
            let raw = take(n * dim * 4, rec, "embedding values")?;
            let mut pts = Vec::with_capacity(n);
            for e in 0..n {
                let v: Vec<f64> = (0..dim)
                    .map(|j| {
                        let o = (e * dim + j) * 4;
                        f32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as f64
                    })
                    .collect();
                if v.iter().any(|a| !a.is_finite()) {
                    return Err(malformed(path, rec, format!("non-finite value in example {e}")));
                }
                pts.push(v);
            }
            if classes.insert(class_id, pts).is_some() {
                return Err(malformed(path, rec, format!("duplicate class id {class_id}")));
            }
        }
        if pos != bytes.len() {
            return Err(malformed(path, class_count + 1, "trailing bytes after last class"));
        }
        Ok(EmbeddingPool { dim, classes })
    }

    fn read_csv(path: &Path) -> Result<EmbeddingPool> {
        let reader = BufReader::new(File::open(path)?);
        let mut classes: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        let mut dim = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let first = fields.next().unwrap_or("");
            let class_id: u32 = match first.parse() {
                Ok(c) => c,
                Err(_) if idx == 0 => continue, // header
                Err(_) => return Err(malformed(path, line_no, format!("bad class id `{first}`"))),
            };
            let v = fields
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| malformed(path, line_no, format!("bad value `{f}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None if v.is_empty() => return Err(malformed(path, line_no, "row has no values")),
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(malformed(path, line_no, format!("expected {d} values, found {}", v.len())))
                }
                _ => {}
            }
            classes.entry(class_id).or_default().push(v);
        }
        let dim = dim.ok_or_else(|| malformed(path, 0, "no data rows"))?;
        Ok(EmbeddingPool { dim, classes })
    }

    /// Writes CSV when the extension is `.csv`, the binary format otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let is_csv = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("csv"))
            .unwrap_or(false);
        if is_csv {
            self.write_csv(path)
        } else {
            self.write_binary(path)
        }
    }

    /// One row per example: `class_id,x0,...`, after a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "class_id,{}", header.join(","))?;
        for (id, pts) in &self.classes {
            for p in pts {
                let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{id},{}", row.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the binary format; values are narrowed to `f32`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.classes.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (id, pts) in &self.classes {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&(pts.len() as u32).to_le_bytes())?;
            for p in pts {
                for v in p {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Samples episodes: classes and examples without replacement within a
    /// task, independently across tasks.
    pub fn sample_episodes(&self, spec: &EpisodeSpec, split: Split) -> Result<MetaSet> {
        if spec.ways == 0 || spec.shots == 0 || spec.query_per_class == 0 {
            return Err(TasmlError::config("episode", "ways, shots and query_per_class must be >= 1"));
        }
        if self.classes.len() < spec.ways {
            return Err(TasmlError::InsufficientClasses {
                needed: spec.ways,
                available: self.classes.len(),
            });
        }
        let needed = spec.shots + spec.query_per_class;
        if let Some((id, pts)) = self.classes.iter().find(|(_, p)| p.len() < needed) {
            return Err(TasmlError::InsufficientExamplesPerClass {
                class_id: *id,
                needed,
                available: pts.len(),
            });
        }
        let ids: Vec<u32> = self.classes.keys().copied().collect();
        let mut tasks = Vec::with_capacity(spec.n_tasks);
        for t in 0..spec.n_tasks {
            let mut rng = rng_for(spec.seed, &[TAG_TASK, split.index(), t as u64]);
            let chosen: Vec<u32> = ids.choose_multiple(&mut rng, spec.ways).copied().collect();
            let mut support = Vec::with_capacity(spec.ways * spec.shots);
            let mut query = Vec::with_capacity(spec.ways * spec.query_per_class);
            for (label, id) in chosen.iter().enumerate() {
                let pts = &self.classes[id];
                let picks: Vec<usize> = rand::seq::index::sample(&mut rng, pts.len(), needed).into_vec();
                for (k, &i) in picks.iter().enumerate() {
                    let e = Example {
                        x: pts[i].clone(),
                        y: label,
                    };
                    if k < spec.shots {
                        support.push(e);
                    } else {
                        query.push(e);
                    }
                }
            }
            tasks.push(Task {
                support,
                query,
                ways: spec.ways,
                mode_id: None,
            });
        }
        Ok(MetaSet {
            tasks,
            split,
            class_pool: ids.into_iter().collect(),
        })
    }
}

/// Reads an embedding file and samples `spec.n_tasks` episodes from it.
pub fn load_embedding_metaset(path: &Path, spec: &EpisodeSpec, split: Split) -> Result<MetaSet> {
    EmbeddingPool::read(path)?.sample_episodes(spec, split)
}

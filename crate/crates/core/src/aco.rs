//! Ant colony optimization over the shared gate connectivity.
//!
//! Each iteration, `n_ants` ants walk from an input node to a hidden node,
//! choosing both ends by roulette over pheromone levels. The union of their
//! walks is a [`Mesh`]; it is trained and scored by its test error, and when
//! it beats the whole population the pheromones on its paths are raised.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flightdata::WindowedDataset;
use crate::lstm::{count_weights, Arch, Mesh, Network, HIDDEN, N_INPUTS};
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Error)]
pub enum AcoError {
    #[error("invalid colony config: {0}")]
    InvalidConfig(String),
    #[error("malformed evolution log: {0}")]
    BadLog(String),
    #[error("evolution log has no rows")]
    EmptyLog,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AcoError>;

/// Pheromone levels on input nodes and input-to-hidden edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Pheromones {
    pub input: [f64; N_INPUTS],
    pub m1: [[f64; HIDDEN]; N_INPUTS],
    /// Carried alongside the others but never sampled or rewarded; m2 marks
    /// follow from the m1 edges.
    pub m2: [f64; HIDDEN],
}

impl Default for Pheromones {
    fn default() -> Self {
        Self { input: [1.0; N_INPUTS], m1: [[1.0; HIDDEN]; N_INPUTS], m2: [1.0; HIDDEN] }
    }
}

impl Pheromones {
    pub fn new() -> Self {
        Self::default()
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.input.iter().chain(self.m1.iter().flatten()).chain(&self.m2).copied()
    }

    /// Whether every level lies in `[1, max]`.
    pub fn within(&self, max: f64) -> bool {
        self.values().all(|v| (1.0..=max).contains(&v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcoConfig {
    pub n_ants: usize,
    pub n_iterations: usize,
    pub max_pheromone: f64,
    pub reward_factor: f64,
    pub seed: u64,
}

impl Default for AcoConfig {
    fn default() -> Self {
        Self { n_ants: 200, n_iterations: 1000, max_pheromone: 20.0, reward_factor: 1.15, seed: 0 }
    }
}

impl AcoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ants == 0 {
            return Err(AcoError::InvalidConfig("n_ants must be at least 1".into()));
        }
        if !(self.max_pheromone > 1.0 && self.max_pheromone.is_finite()) {
            return Err(AcoError::InvalidConfig(format!("max_pheromone {} must exceed 1", self.max_pheromone)));
        }
        if !(self.reward_factor > 1.0 && self.reward_factor.is_finite()) {
            return Err(AcoError::InvalidConfig(format!("reward_factor {} must exceed 1", self.reward_factor)));
        }
        Ok(())
    }
}

/// Picks index `i` with probability `weights[i] / sum(weights)` by walking the
/// cumulative mass.
pub fn roulette(weights: &[f64], rng: &mut impl Rng) -> usize {
    let sum: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * sum;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    // rounding can leave a sliver of mass past the last bucket
    weights.len() - 1
}

/// Sends `n_ants` ants through the pheromone graph and returns the union of
/// their paths. Repeated paths collapse.
pub fn generate_paths(pher: &Pheromones, n_ants: usize, rng: &mut impl Rng) -> Mesh {
    let mut mesh = Mesh::empty();
    for _ in 0..n_ants {
        let i = roulette(&pher.input, rng);
        let j = roulette(&pher.m1[i], rng);
        mesh.mark(i, j);
    }
    mesh
}

/// Multiplies the level of every marked input and m1 edge by the reward
/// factor, capped at the maximum.
pub fn update_pheromones(pher: &mut Pheromones, mesh: &Mesh, cfg: &AcoConfig) {
    for i in 0..N_INPUTS {
        if mesh.input[i] {
            pher.input[i] = (pher.input[i] * cfg.reward_factor).min(cfg.max_pheromone);
        }
        for j in 0..HIDDEN {
            if mesh.m1[i][j] {
                pher.m1[i][j] = (pher.m1[i][j] * cfg.reward_factor).min(cfg.max_pheromone);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub fitness: f64,
    pub mesh: Mesh,
}

/// Evaluated meshes in ascending order of fitness (lower is better).
#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    entries: Vec<Individual>,
    capacity: usize,
}

impl Population {
    pub fn new(capacity: usize) -> Self {
        Self { entries: Vec::with_capacity(capacity.min(4096)), capacity }
    }

    /// Inserts in order and returns the rank. Rank 0 means strictly better
    /// than every current entry; an entry tied with incumbents ranks after
    /// them. When full, the worst entry is evicted, which may be the new one.
    pub fn insert(&mut self, fitness: f64, mesh: Mesh) -> usize {
        let rank = self.entries.partition_point(|e| e.fitness <= fitness);
        self.entries.insert(rank, Individual { fitness, mesh });
        self.entries.truncate(self.capacity);
        rank
    }

    pub fn best(&self) -> Option<&Individual> {
        self.entries.first()
    }

    pub fn entries(&self) -> &[Individual] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

pub fn insert_population(pop: &mut Population, fitness: f64, mesh: Mesh) -> usize {
    pop.insert(fitness, mesh)
}

/// Why a mesh could not be scored.
#[derive(Clone, Debug, Error, PartialEq)]
#[error("{0}")]
pub struct EvalFailure(pub String);

/// Maps a mesh to its fitness.
pub trait MeshEvaluator {
    fn evaluate(&mut self, mesh: &Mesh) -> std::result::Result<f64, EvalFailure>;
}

impl<F> MeshEvaluator for F
where
    F: FnMut(&Mesh) -> std::result::Result<f64, EvalFailure>,
{
    fn evaluate(&mut self, mesh: &Mesh) -> std::result::Result<f64, EvalFailure> {
        self(mesh)
    }
}

/// Trains a fresh network on each mesh and scores it by test MAE. Every
/// network starts from the same initialization seed, so meshes differ only in
/// which weights they keep.
#[derive(Clone, Debug)]
pub struct TrainingEvaluator<'a> {
    pub arch: Arch,
    pub horizon: usize,
    pub train: &'a WindowedDataset,
    pub test: &'a WindowedDataset,
    pub train_cfg: TrainConfig,
    pub init_seed: u64,
}

impl TrainingEvaluator<'_> {
    /// Trains on `mesh` and returns the network with its test MAE.
    pub fn train_mesh(&self, mesh: &Mesh) -> std::result::Result<(Network, f64), trainer::TrainError> {
        let mut net = Network::new(self.arch, mesh.clone(), self.horizon, self.init_seed);
        let report = trainer::train(&mut net, self.train, self.test, &self.train_cfg)?;
        Ok((net, report.test_mae))
    }
}

impl MeshEvaluator for TrainingEvaluator<'_> {
    fn evaluate(&mut self, mesh: &Mesh) -> std::result::Result<f64, EvalFailure> {
        self.train_mesh(mesh).map(|(_, mae)| mae).map_err(|e| EvalFailure(e.to_string()))
    }
}

/// One evaluated mesh in arrival order.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    /// 1-based.
    pub iteration: usize,
    /// `Err` for evaluations that failed; those never enter the population.
    pub fitness: std::result::Result<f64, EvalFailure>,
    pub m1_count: usize,
    pub m2_count: usize,
    pub total_connections: usize,
    pub wall_time_s: f64,
    pub rank: Option<usize>,
    /// Whether the pheromones were reinforced after this evaluation.
    pub rewarded: bool,
}

/// Colony state: pheromones, population and the path sampler.
#[derive(Clone, Debug)]
pub struct Colony {
    pub cfg: AcoConfig,
    pub arch: Arch,
    pub pheromones: Pheromones,
    pub population: Population,
    pub logs: Vec<IterationLog>,
    rng: ChaCha8Rng,
    start: Instant,
}

impl Colony {
    pub fn new(cfg: AcoConfig, arch: Arch) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            arch,
            pheromones: Pheromones::new(),
            population: Population::new(cfg.n_iterations),
            logs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            start: Instant::now(),
            cfg,
        })
    }

    /// Samples a mesh from the current pheromones.
    pub fn next_mesh(&mut self) -> Mesh {
        generate_paths(&self.pheromones, self.cfg.n_ants, &mut self.rng)
    }

    /// Records an evaluation. Successful fitnesses are inserted; a rank-0
    /// insertion reinforces the mesh's paths. Returns the rank, if inserted.
    pub fn record(&mut self, mesh: Mesh, fitness: std::result::Result<f64, EvalFailure>) -> Option<usize> {
        let fitness = match fitness {
            Ok(f) if !(f.is_finite() && f >= 0.0) => Err(EvalFailure(format!("fitness {f} is not a finite non-negative number"))),
            other => other,
        };
        let mut entry = IterationLog {
            iteration: self.logs.len() + 1,
            fitness: fitness.clone(),
            m1_count: mesh.m1_count(),
            m2_count: mesh.m2_count(),
            total_connections: count_weights(self.arch, &mesh),
            wall_time_s: self.start.elapsed().as_secs_f64(),
            rank: None,
            rewarded: false,
        };
        match fitness {
            Ok(f) => {
                let rank = self.population.insert(f, mesh.clone());
                if rank == 0 {
                    update_pheromones(&mut self.pheromones, &mesh, &self.cfg);
                    entry.rewarded = true;
                }
                entry.rank = Some(rank);
                log::info!("iteration {}: fitness {f:.6} rank {rank} ({} m1 edges)", entry.iteration, entry.m1_count);
            }
            Err(ref e) => log::warn!("iteration {}: evaluation failed: {e}", entry.iteration),
        }
        let rank = entry.rank;
        self.logs.push(entry);
        rank
    }

    pub fn best(&self) -> Option<&Individual> {
        self.population.best()
    }
}

/// Outcome of a colony run.
#[derive(Clone, Debug)]
pub struct Evolution {
    pub population: Population,
    pub best: Option<Mesh>,
    pub pheromones: Pheromones,
    pub logs: Vec<IterationLog>,
}

impl From<Colony> for Evolution {
    fn from(c: Colony) -> Self {
        Self { best: c.best().map(|b| b.mesh.clone()), population: c.population, pheromones: c.pheromones, logs: c.logs }
    }
}

/// Runs `cfg.n_iterations` sample-evaluate-record rounds in one thread.
/// Failed evaluations use up their iteration but are not inserted.
pub fn evolve(cfg: &AcoConfig, arch: Arch, evaluator: &mut impl MeshEvaluator) -> Result<Evolution> {
    let mut colony = Colony::new(cfg.clone(), arch)?;
    for _ in 0..cfg.n_iterations {
        let mesh = colony.next_mesh();
        let fitness = evaluator.evaluate(&mesh);
        colony.record(mesh, fitness);
    }
    Ok(colony.into())
}

/// One successful evaluation as stored in the evolution log CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub fitness: f64,
    pub m1_count: usize,
    pub m2_count: usize,
    pub total_connections: usize,
    pub wall_time_s: f64,
}

pub const LOG_HEADER: [&str; 6] = ["iteration", "fitness", "m1_count", "m2_count", "total_connections", "wall_time_s"];

/// Writes successful evaluations only.
pub fn write_log_csv(path: &Path, logs: &[IterationLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOG_HEADER)?;
    for l in logs {
        if let Ok(f) = l.fitness {
            w.write_record([
                l.iteration.to_string(),
                f.to_string(),
                l.m1_count.to_string(),
                l.m2_count.to_string(),
                l.total_connections.to_string(),
                l.wall_time_s.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != LOG_HEADER {
        return Err(AcoError::BadLog(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |c: &str| AcoError::BadLog(format!("row {}: bad {c}", n + 1));
        let int = |k: usize| rec[k].trim().parse::<usize>().map_err(|_| bad(LOG_HEADER[k]));
        let real = |k: usize| rec[k].trim().parse::<f64>().map_err(|_| bad(LOG_HEADER[k]));
        rows.push(LogRow {
            iteration: int(0)?,
            fitness: real(1)?,
            m1_count: int(2)?,
            m2_count: int(3)?,
            total_connections: int(4)?,
            wall_time_s: real(5)?,
        });
    }
    Ok(rows)
}

/// A top-K row with the columns of the published ranking table.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRow {
    pub no: usize,
    pub fitness: f64,
    pub m1_connections: usize,
    pub m2_connections: usize,
    pub total_connections: usize,
}

pub const TOP_K_HEADER: [&str; 5] = ["no", "fitness", "m1_connections", "m2_connections", "total_connections"];

/// The `k` fittest rows, ascending by fitness; ties keep log order.
pub fn top_k(rows: &[LogRow], k: usize) -> Result<Vec<RankedRow>> {
    if rows.is_empty() {
        return Err(AcoError::EmptyLog);
    }
    let mut sorted: Vec<&LogRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
    Ok(sorted
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(n, r)| RankedRow {
            no: n + 1,
            fitness: r.fitness,
            m1_connections: r.m1_count,
            m2_connections: r.m2_count,
            total_connections: r.total_connections,
        })
        .collect())
}

pub fn write_top_k_csv(path: &Path, rows: &[RankedRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TOP_K_HEADER)?;
    for r in rows {
        w.write_record([
            r.no.to_string(),
            r.fitness.to_string(),
            r.m1_connections.to_string(),
            r.m2_connections.to_string(),
            r.total_connections.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary of connection counts over a set of ranked rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionStats {
    pub rows: usize,
    pub m1_min: usize,
    pub m1_max: usize,
    pub m1_mean: f64,
    pub total_min: usize,
    pub total_max: usize,
    pub total_mean: f64,
}

pub fn connection_stats(rows: &[RankedRow]) -> Option<ConnectionStats> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(ConnectionStats {
        rows: rows.len(),
        m1_min: rows.iter().map(|r| r.m1_connections).min()?,
        m1_max: rows.iter().map(|r| r.m1_connections).max()?,
        m1_mean: rows.iter().map(|r| r.m1_connections as f64).sum::<f64>() / n,
        total_min: rows.iter().map(|r| r.total_connections).min()?,
        total_max: rows.iter().map(|r| r.total_connections).max()?,
        total_mean: rows.iter().map(|r| r.total_connections as f64).sum::<f64>() / n,
    })
}

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::mpsc::channel;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use neuroevo_core::aco::{self, ConnectionStats, Evolution, RankedRow, TrainingEvaluator};
use neuroevo_core::dist::{self, Coordinator, DistError};
use neuroevo_core::flightdata::{self, load_flight_dir, make_windows, normalize, normalize_split, NormRanges, ParameterRanking};
use neuroevo_core::lstm::{deserialize_network, serialize_mesh, serialize_network, InputSpec};
use neuroevo_core::trainer::{self, Evaluation, TrainReport};
use neuroevo_core::{Mesh, Network, WindowedDataset};

use crate::config::RunConfig;

pub const RESOLVED_CONFIG: &str = "run.conf";
pub const MODEL_FILE: &str = "model.bin";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const EVOLUTION_LOG: &str = "evolution_log.csv";
pub const POPULATION_FILE: &str = "population.csv";
pub const BEST_MESH_TEXT: &str = "best_mesh.txt";
pub const BEST_MESH_FILE: &str = "best_mesh.bin";
pub const BEST_MODEL_FILE: &str = "best_model.bin";
pub const EVALUATION_FILE: &str = "evaluation.csv";
pub const PREDICTIONS_DIR: &str = "predictions";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    Master,
    Worker,
    Local,
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    create_out(&cfg.out)?;
    let path = cfg.out.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.resolved()).with_context(|| format!("writing {}", path.display()))
}

/// Writes `n` synthetic flights as `flight_NNN.csv` plus a description of how
/// the target was generated. Returns the CSV paths.
pub fn cmd_synth(seed: u64, n: usize, len: usize, channels: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let corpus = flightdata::synth_flights(seed, n, len, channels)?;
    create_out(out)?;
    let mut paths = Vec::with_capacity(n);
    for f in &corpus.flights {
        let p = out.join(format!("{}.csv", f.id));
        flightdata::write_flight_csv(&p, f)?;
        paths.push(p);
    }
    let meta = &corpus.meta;
    let mut text = format!("seed = {}\nformula = {}\n", meta.seed, meta.formula);
    for (name, w, lag) in &meta.drivers {
        text.push_str(&format!("driver = {name} weight {w} lag {lag}\n"));
    }
    text.push_str(&format!("decoys = {}\n", meta.decoys.join(",")));
    fs::write(out.join("synth_meta.txt"), text)?;
    Ok(paths)
}

/// Ranks channels by their mean correlation with the target. Flights are
/// normalized with ranges taken over the whole directory first.
pub fn cmd_correlate(data_dir: &Path, target: &str, out: &Path) -> Result<ParameterRanking> {
    let flights = load_flight_dir(data_dir, None, target).with_context(|| format!("loading {}", data_dir.display()))?;
    let ranges = NormRanges::from_flights(&flights)?;
    let norm = flights.iter().map(|f| normalize(f, &ranges)).collect::<Result<Vec<_>, _>>()?;
    let ranking = flightdata::rank_parameters(&norm)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    ranking.write_csv(out)?;
    Ok(ranking)
}

/// Training and test windows built as the config describes.
pub struct Prepared {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub inputs: InputSpec,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (train_dir, test_dir) = cfg.require_data()?;
    let train = load_flight_dir(train_dir, None, &cfg.target).with_context(|| format!("loading {}", train_dir.display()))?;
    let test = load_flight_dir(test_dir, None, &cfg.target).with_context(|| format!("loading {}", test_dir.display()))?;
    let channels = if cfg.channels.is_empty() {
        let all: Vec<String> = train[0].channel_names().map(String::from).collect();
        if all.len() > flightdata::N_PARAMS {
            bail!("the flights have {} channels; name at most {} of them with `channels`", all.len(), flightdata::N_PARAMS);
        }
        all
    } else {
        cfg.channels.clone()
    };
    let (train, test, ranges) = normalize_split(&train, &test)?;
    let window = cfg.arch.window_len();
    let train = make_windows(&train, window, cfg.horizon, &channels)?;
    let test = make_windows(&test, window, cfg.horizon, &channels)?;
    let shared = flightdata::shared_flights(&train, &test);
    if !shared.is_empty() {
        bail!("flights present in both training and test data: {}", shared.join(", "));
    }
    log::info!("{} training and {} test windows over {} channels", train.len(), test.len(), channels.len());
    Ok(Prepared { train, test, inputs: InputSpec { channels, target: cfg.target.clone(), ranges } })
}

fn save_network(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, serialize_network(net)).with_context(|| format!("writing {}", path.display()))
}

/// Trains the fully connected network and writes the model, its cost
/// history and the resolved config to the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    write_resolved(cfg)?;
    let data = prepare(cfg)?;
    let mut net = Network::new(cfg.arch, Mesh::full(), cfg.horizon, cfg.seed);
    net.inputs = Some(data.inputs);
    let report = trainer::train(&mut net, &data.train, &data.test, &cfg.train_config())?;
    save_network(&net, &cfg.out.join(MODEL_FILE))?;
    report.write_csv(&cfg.out.join(TRAIN_REPORT))?;
    Ok(report)
}

/// Scores a saved model on every flight in `data_dir` and writes one
/// `time,actual,predicted` CSV per flight. Times are seconds from the start
/// of the flight; values are in normalized units.
pub fn cmd_evaluate(model: &Path, data_dir: &Path, out: &Path) -> Result<Evaluation> {
    let bytes = fs::read(model).with_context(|| format!("reading {}", model.display()))?;
    let net = deserialize_network(&bytes)?;
    let spec = net.inputs.clone().context("the model does not record its input channels")?;
    let flights = load_flight_dir(data_dir, None, &spec.target)?;
    let flights = flights.iter().map(|f| normalize(f, &spec.ranges)).collect::<Result<Vec<_>, _>>()?;
    let data = make_windows(&flights, net.window_len(), net.horizon(), &spec.channels)?;
    let predicted = trainer::predict(&net, &data)?;
    let eval = trainer::evaluate(&net, &data)?;

    let pred_dir = out.join(PREDICTIONS_DIR);
    create_out(&pred_dir)?;
    for (fi, id) in data.flight_ids.iter().enumerate() {
        let mut w = csv::Writer::from_path(pred_dir.join(format!("{id}.csv")))?;
        w.write_record(["time", "actual", "predicted"])?;
        for (s, p) in data.samples.iter().zip(&predicted).filter(|(s, _)| s.flight == fi) {
            let time = s.start + data.window_len - 1 + data.horizon;
            w.write_record([time.to_string(), s.y.to_string(), p.to_string()])?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_path(out.join(EVALUATION_FILE))?;
    w.write_record(["samples", "mse", "mae"])?;
    w.write_record([data.len().to_string(), eval.mse.to_string(), eval.mae.to_string()])?;
    w.flush()?;
    Ok(eval)
}

/// What an evolve run produced. Workers only report how many meshes they
/// evaluated.
pub enum EvolveOutcome {
    Finished { best_fitness: f64, best_mesh: Mesh, evaluations: usize },
    Worker { jobs: usize },
}

pub fn cmd_evolve(cfg: &RunConfig, role: Role) -> Result<EvolveOutcome> {
    let data = prepare(cfg)?;
    let evaluator = TrainingEvaluator {
        arch: cfg.arch,
        horizon: cfg.horizon,
        train: &data.train,
        test: &data.test,
        train_cfg: cfg.train_config(),
        init_seed: cfg.seed,
    };
    let digest = cfg.digest();
    let evolution = match role {
        Role::Worker => {
            let mut conn = dist::connect_with_backoff(&cfg.connect, cfg.connect_attempts, Duration::from_millis(250))?;
            let mut ev = evaluator;
            let jobs = dist::worker_loop(&mut conn, cfg.arch, digest, &mut ev)?;
            return Ok(EvolveOutcome::Worker { jobs });
        }
        Role::Local => {
            write_resolved(cfg)?;
            dist::run_local(&cfg.aco_config(), cfg.arch, digest, cfg.master_config(), cfg.workers, |_| evaluator.clone())?
        }
        Role::Master => {
            write_resolved(cfg)?;
            let listener = TcpListener::bind(&cfg.bind).with_context(|| format!("binding {}", cfg.bind))?;
            log::info!("master listening on {}", listener.local_addr()?);
            let (tx, events) = channel();
            let _acceptor = dist::spawn_tcp_acceptor(listener, tx)?;
            let coord = Coordinator::new(cfg.aco_config(), cfg.arch, digest, cfg.master_config())?;
            dist::master_loop(coord, &events)?
        }
    };
    write_evolution(cfg, &evaluator, &data.inputs, &evolution)
}

fn write_evolution(cfg: &RunConfig, evaluator: &TrainingEvaluator, inputs: &InputSpec, evo: &Evolution) -> Result<EvolveOutcome> {
    aco::write_log_csv(&cfg.out.join(EVOLUTION_LOG), &evo.logs)?;
    let rows = aco::read_log_csv(&cfg.out.join(EVOLUTION_LOG))?;
    let ranked = aco::top_k(&rows, rows.len())?;
    aco::write_top_k_csv(&cfg.out.join(POPULATION_FILE), &ranked)?;

    let best = evo.population.best().context("no mesh was evaluated successfully")?;
    fs::write(cfg.out.join(BEST_MESH_TEXT), best.mesh.to_text())?;
    fs::write(cfg.out.join(BEST_MESH_FILE), serialize_mesh(&best.mesh, cfg.arch, cfg.horizon))?;
    // retraining is deterministic, so this reproduces the evaluated network
    let (mut net, _) = evaluator.train_mesh(&best.mesh)?;
    net.inputs = Some(inputs.clone());
    save_network(&net, &cfg.out.join(BEST_MODEL_FILE))?;
    Ok(EvolveOutcome::Finished { best_fitness: best.fitness, best_mesh: best.mesh.clone(), evaluations: evo.logs.len() })
}

/// Top-`k` rows of an evolution log, ascending by fitness, with summary
/// statistics of their connection counts.
pub fn cmd_report(log: &Path, k: usize, out: Option<&Path>) -> Result<(Vec<RankedRow>, ConnectionStats)> {
    let rows = aco::read_log_csv(log).with_context(|| format!("reading {}", log.display()))?;
    let ranked = aco::top_k(&rows, k)?;
    if let Some(out) = out {
        aco::write_top_k_csv(out, &ranked)?;
    }
    let stats = aco::connection_stats(&ranked).context("empty ranking")?;
    Ok((ranked, stats))
}

/// True when `e` means the master turned this worker away.
pub fn is_rejection(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<DistError>(), Some(DistError::Rejected(_)))
}

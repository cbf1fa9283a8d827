use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use neuroevo_core::aco::{read_log_csv, LOG_HEADER, TOP_K_HEADER};
use neuroevo_core::lstm::{deserialize_mesh, deserialize_network};
use neuroevo_core::TrainReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neuroevo"));
    c.env("NEUROEVO_LOG", "error");
    c
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
    v.sort();
    v
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

/// Synthesizes a small corpus split into train/ and test/ and writes a
/// config pointing at it.
fn workspace(root: &Path, extra: &str) -> PathBuf {
    let all = root.join("all");
    ok(bin().args(["synth", "--seed", "3", "--flights", "6", "--len", "80", "--channels", "5", "--out"]).arg(&all).output().unwrap());
    for (i, f) in csv_files(&all).into_iter().enumerate() {
        let dir = root.join(if i < 4 { "train" } else { "test" });
        fs::create_dir_all(&dir).unwrap();
        fs::rename(&f, dir.join(f.file_name().unwrap())).unwrap();
    }
    let cfg = root.join("run.conf");
    fs::write(
        &cfg,
        format!(
            "# small run\ntrain_dir = {}\ntest_dir = {}\nhorizon = 2\nepochs = 2\nseed = 9\nout = {}\n{extra}",
            root.join("train").display(),
            root.join("test").display(),
            root.join("out").display()
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn synth_writes_one_csv_per_flight() {
    let dir = tempfile::tempdir().unwrap();
    ok(bin().args(["synth", "--seed", "1", "--flights", "4", "--len", "50", "--channels", "6", "--out"]).arg(dir.path()).output().unwrap());
    let files = csv_files(dir.path());
    assert_eq!(files.len(), 4);
    assert_eq!(header(&files[0]).split(',').count(), 6);
    assert!(dir.path().join("synth_meta.txt").exists());
}

#[test]
fn correlate_ranks_every_non_target_channel() {
    let dir = tempfile::tempdir().unwrap();
    ok(bin().args(["synth", "--flights", "3", "--len", "60", "--channels", "5", "--out"]).arg(dir.path()).output().unwrap());
    let out = dir.path().join("rank").join("ranking.csv");
    ok(bin().arg("correlate").arg(dir.path()).arg("--out").arg(&out).output().unwrap());
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,score");
    assert_eq!(lines.len(), 1 + 4);
    assert!(!text.contains("Vib,"));
}

#[test]
fn correlate_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("correlate").arg(dir.path()).arg("--out").arg(dir.path().join("r.csv")).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn train_writes_model_report_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "");
    ok(bin().arg("train").arg("--config").arg(&cfg).args(["--epochs", "3"]).output().unwrap());
    let out = dir.path().join("out");
    let report = TrainReport::read_csv(&out.join("train_report.csv")).unwrap();
    assert_eq!(report.cost_history.len(), 3);
    let net = deserialize_network(&fs::read(out.join("model.bin")).unwrap()).unwrap();
    assert_eq!(net.horizon(), 2);
    assert!(net.inputs.is_some());
    let resolved = fs::read_to_string(out.join("run.conf")).unwrap();
    assert!(resolved.contains("epochs = 3"));
    assert!(resolved.contains("seed = 9"));

    // same config and seed, same model
    let again = dir.path().join("again");
    ok(bin().arg("train").arg("--config").arg(&cfg).args(["--epochs", "3", "--out"]).arg(&again).output().unwrap());
    assert_eq!(fs::read(out.join("model.bin")).unwrap(), fs::read(again.join("model.bin")).unwrap());
}

#[test]
fn zero_learning_rate_leaves_the_initial_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "learning_rate = 0\n");
    ok(bin().arg("train").arg("--config").arg(&cfg).output().unwrap());
    let net = deserialize_network(&fs::read(dir.path().join("out/model.bin")).unwrap()).unwrap();
    let fresh = neuroevo_core::Network::new(neuroevo_core::Arch::I, neuroevo_core::Mesh::full(), 2, 9);
    assert_eq!(net.params(), fresh.params());
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "learning_rte = 0.1\n");
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rte"));
}

#[test]
fn evaluate_writes_predictions_per_flight() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "");
    ok(bin().arg("train").arg("--config").arg(&cfg).output().unwrap());
    let ev = dir.path().join("eval");
    let stdout = ok(bin().arg("evaluate").arg(dir.path().join("out/model.bin")).arg(dir.path().join("test")).arg("--out").arg(&ev).output().unwrap());
    assert!(stdout.contains("mae"));
    let preds = csv_files(&ev.join("predictions"));
    assert_eq!(preds.len(), 2);
    let text = fs::read_to_string(&preds[0]).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "time,actual,predicted");
    // 80 s flights, 10-step windows, horizon 2
    assert_eq!(rows.len() - 1, 80 + 1 - 10 - 2);
    assert!(rows[1].starts_with("11,"));
    assert_eq!(header(&ev.join("evaluation.csv")), "samples,mse,mae");
}

#[test]
fn local_evolution_logs_every_iteration_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "workers = 2\n");
    ok(bin().args(["evolve", "--role", "local", "--ants", "8", "--iterations", "6", "--epochs", "1", "--config"]).arg(&cfg).output().unwrap());
    let out = dir.path().join("out");
    assert_eq!(header(&out.join("evolution_log.csv")), LOG_HEADER.join(","));
    assert_eq!(read_log_csv(&out.join("evolution_log.csv")).unwrap().len(), 6);
    assert_eq!(header(&out.join("population.csv")), TOP_K_HEADER.join(","));
    let (mesh, _, h) = deserialize_mesh(&fs::read(out.join("best_mesh.bin")).unwrap()).unwrap();
    assert!(mesh.is_valid());
    assert_eq!(h, 2);
    let net = deserialize_network(&fs::read(out.join("best_model.bin")).unwrap()).unwrap();
    assert_eq!(net.mesh(), &mesh);
    assert!(fs::read_to_string(out.join("run.conf")).unwrap().contains("iterations = 6"));

    let top = dir.path().join("top.csv");
    let stdout = ok(bin().arg("report").arg(out.join("evolution_log.csv")).args(["--top", "4", "--out"]).arg(&top).output().unwrap());
    assert!(stdout.contains("m1 edges"));
    let rows = fs::read_to_string(&top).unwrap();
    let fit: Vec<f64> = rows.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(fit.len(), 4);
    assert!(fit.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn report_on_empty_log_fails() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    fs::write(&log, format!("{}\n", LOG_HEADER.join(","))).unwrap();
    assert!(!bin().arg("report").arg(&log).output().unwrap().status.success());
}

/// Kills the child if the test fails before waiting on it.
struct Reap(Option<Child>);

impl Drop for Reap {
    fn drop(&mut self) {
        if let Some(c) = &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn master_and_worker_processes_cooperate() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let cfg = workspace(dir.path(), &format!("bind = 127.0.0.1:{port}\nconnect = 127.0.0.1:{port}\nants = 8\niterations = 3\n"));
    let mut master = Reap(Some(bin().args(["evolve", "--role", "master", "--config"]).arg(&cfg).stdout(Stdio::piped()).spawn().unwrap()));
    thread::sleep(Duration::from_millis(200));

    // a worker whose config differs is turned away with its own exit code
    let rejected = bin().args(["evolve", "--role", "worker", "--seed", "10", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(rejected.status.code(), Some(3), "{}", String::from_utf8_lossy(&rejected.stderr));

    let worker = ok(bin().args(["evolve", "--role", "worker", "--config"]).arg(&cfg).output().unwrap());
    assert!(worker.contains("worker done after 3 jobs"), "{worker}");
    let master = ok(master.0.take().unwrap().wait_with_output().unwrap());
    assert!(master.contains("3 evaluations"), "{master}");
    assert_eq!(read_log_csv(&dir.path().join("out/evolution_log.csv")).unwrap().len(), 3);
}

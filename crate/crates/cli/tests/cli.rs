//! End-to-end runs of the `cfx` binary on a small separable task.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_cfx");

/// Grid points with 0.3 <= x0 + x1/2 <= 1.2, labelled by x0 + x1/2 > 0.75.
fn toy_csv() -> String {
    let mut s = String::from("x0,x1,y\n");
    for i in 0..=20 {
        for j in 0..=20 {
            let (a, b) = (i as f64 / 20.0, j as f64 / 20.0);
            let t = a + 0.5 * b;
            if (0.3..=1.2).contains(&t) {
                s.push_str(&format!("{a},{b},{}\n", u8::from(t > 0.75)));
            }
        }
    }
    s
}

fn toy_schema(x0_actionable: bool) -> String {
    format!(
        r#"[target]
name = "y"
task = "classification"
n_classes = 2

[[features]]
name = "x0"
kind = "numeric"
actionable = {x0_actionable}
raw_min = 0.0
raw_max = 1.0

[[features]]
name = "x1"
kind = "numeric"
actionable = true
raw_min = 0.0
raw_max = 1.0
"#
    )
}

const TOY_CONFIG: &str = r#"
[data]
csv = "toy.csv"
schema = "toy.toml"

[predictor.mlp]
hidden = [16]
epochs = 300

[env]
lambda = 0.1
max_features = 2

[run]
agent_seed = 9
checkpoint_every = 50
probe_rows = 50

[agent]
gamma = 0.5
invert_gradients = true

[train]
epochs = 400
steps_per_instance = 50
probe_every = 50
seed = 2

[local]
steps = 300
stop_on_valid = true

[eval]
repetitions = 5
max_instances = 10
"#;

struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        Self::with_schema(true)
    }

    fn with_schema(x0_actionable: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("toy.csv"), toy_csv()).unwrap();
        std::fs::write(dir.path().join("toy.toml"), toy_schema(x0_actionable)).unwrap();
        let config = if x0_actionable {
            TOY_CONFIG.to_string()
        } else {
            TOY_CONFIG.replace("max_features = 2", "max_features = 1")
        };
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Toy { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    /// Runs a subcommand on the toy config with the output directory taken
    /// from the environment.
    fn cfx(&self, cmd: &str, extra: &[&str]) -> Output {
        let config = self.path("run.toml");
        let mut args = vec!["-q", cmd, "-c", config.to_str().unwrap()];
        args.extend_from_slice(extra);
        run(&args, &[("CFX_OUTPUT_DIR", self.out().as_path())])
    }

    /// Flags sending outputs to `name` while reading the model trained
    /// into the default output directory.
    fn elsewhere(&self, name: &str) -> Vec<String> {
        vec![
            "--output-dir".into(),
            self.path(name).to_str().unwrap().into(),
            "--set".into(),
            format!("predictor.model={}", self.out().join("model.bin").display()),
        ]
    }

    fn trained_model(self) -> Self {
        assert_ok(&self.cfx("train-model", &[]));
        self
    }
}

fn run(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("RUST_LOG");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Value of `key=` on the first stdout line that has it.
fn field(o: &Output, key: &str) -> String {
    let prefix = format!("{key}=");
    stdout(o)
        .split_whitespace()
        .find_map(|w| w.strip_prefix(&prefix).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key}= in {}", stdout(o)))
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_model_is_accurate_and_deterministic() {
    let toy = Toy::new();
    let a = toy.cfx("train-model", &[]);
    assert_ok(&a);
    let acc: f64 = field(&a, "accuracy").parse().unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    let first = std::fs::read(toy.out().join("model.bin")).unwrap();
    assert_ok(&toy.cfx(
        "train-model",
        &["--output-dir", toy.path("again").to_str().unwrap()],
    ));
    assert_eq!(first, std::fs::read(toy.path("again/model.bin")).unwrap());
    let metrics = read_json(toy.out().join("model_metrics.json"));
    assert_eq!(
        metrics["config"]["predictor"]["mlp"]["hidden"],
        serde_json::json!([16])
    );
}

#[test]
fn config_errors_exit_with_code_2() {
    let toy = Toy::new();
    for extra in [
        &["--set", "data.schema=missing.toml"][..],
        &["--set", "env.max_features=3"],
        &["--set", "data.train_fraction=1.5"],
        &["--set", "agent.gamma=0"],
        &["--set", "unknown_section.x=1"],
        &["--set", "goal.mode=threshold", "--set", "goal.delta=1.0"],
    ] {
        let o = toy.cfx("train-model", extra);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{extra:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    }
    let o = run(
        &[
            "train-model",
            "-c",
            toy.path("absent.toml").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    // Commands that need a trained model say so.
    assert_eq!(toy.cfx("train-agent", &[]).status.code(), Some(2));
}

fn check_log_line(line: &str) {
    let keys: Vec<&str> = line
        .split_whitespace()
        .map(|w| w.split_once('=').unwrap().0)
        .collect();
    assert_eq!(
        keys,
        [
            "step",
            "epoch",
            "loss_q",
            "loss_pi",
            "epsilon",
            "probe_validity"
        ],
        "{line}"
    );
}

#[test]
fn toy_agent_reaches_high_probe_validity() {
    let toy = Toy::new().trained_model();
    let o = toy.cfx("train-agent", &[]);
    assert_ok(&o);
    let validity: f64 = field(&o, "probe_validity").parse().unwrap();
    assert!(validity >= 0.95, "probe validity {validity}");
    let log = std::fs::read_to_string(toy.out().join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 400);
    log.lines().for_each(check_log_line);
    assert!(toy.out().join("agent.snap").is_file());
    let summary = read_json(toy.out().join("train_summary.json"));
    assert_eq!(summary["steps"], 400 * 50);

    // Explanations from the snapshot are valid and printed per feature.
    let e = toy.cfx("explain", &["--rows", "0,1,2"]);
    assert_ok(&e);
    let text = stdout(&e);
    assert_eq!(text.matches("instance=test-").count(), 3);
    assert_eq!(
        text.lines()
            .filter(|l| l.starts_with("  x0: ") || l.starts_with("  x1: "))
            .count(),
        6
    );
    let report = read_json(toy.out().join("explain.json"));
    assert_eq!(report["results"].as_array().unwrap().len(), 3);
    assert_eq!(report["config"]["local"], false);

    // Local mode fine-tunes before the rollout and is reported as such.
    let l = toy.cfx("explain", &["--rows", "0", "--local"]);
    assert_ok(&l);
    assert_eq!(field(&l, "valid"), "true");
    assert_eq!(
        read_json(toy.out().join("explain.json"))["config"]["local"],
        true
    );
}

/// Interrupt-and-resume continues the same run: the epochs already logged
/// are kept and the run completes. Resuming is itself deterministic.
#[test]
fn train_agent_resumes_from_checkpoint() {
    let toy = Toy::new().trained_model();
    let small = [
        "--set",
        "train.epochs=30",
        "--set",
        "train.steps_per_instance=20",
        "--set",
        "run.checkpoint_every=5",
    ];
    let elsewhere = toy.elsewhere("full");
    let full = toy.cfx(
        "train-agent",
        &[
            &small[..],
            &elsewhere.iter().map(String::as_str).collect::<Vec<_>>(),
        ]
        .concat(),
    );
    assert_ok(&full);
    let full_log = std::fs::read_to_string(toy.path("full/train_log.txt")).unwrap();

    let part = toy.cfx(
        "train-agent",
        &[&small[..], &["--stop-after", "12"]].concat(),
    );
    assert_ok(&part);
    assert!(stdout(&part).contains("stopped at epoch 12 of 30"));
    assert!(!toy.out().join("agent.snap").exists());
    let partial_log = std::fs::read_to_string(toy.out().join("train_log.txt")).unwrap();
    assert_eq!(partial_log.lines().count(), 12);
    // Before the interruption the two runs are the same run.
    assert!(full_log.starts_with(&partial_log));

    let backup = toy.path("backup.json");
    std::fs::copy(toy.out().join("checkpoint.json"), &backup).unwrap();
    assert_ok(&toy.cfx("train-agent", &[&small[..], &["--resume"]].concat()));
    let log = std::fs::read_to_string(toy.out().join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 30);
    assert!(log.starts_with(&partial_log));
    let epochs: Vec<String> = log
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect();
    assert_eq!(
        epochs,
        (1..=30).map(|e| format!("epoch={e}")).collect::<Vec<_>>()
    );
    let snap = std::fs::read(toy.out().join("agent.snap")).unwrap();

    std::fs::copy(&backup, toy.out().join("checkpoint.json")).unwrap();
    assert_ok(&toy.cfx("train-agent", &[&small[..], &["--resume"]].concat()));
    assert_eq!(snap, std::fs::read(toy.out().join("agent.snap")).unwrap());

    // A checkpoint from another configuration is refused.
    let o = toy.cfx(
        "train-agent",
        &[&small[..], &["--resume", "--set", "env.lambda=0.2"]].concat(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_goal_is_reported_not_failed() {
    // With x0 frozen, raising x1 alone cannot cross the boundary from (0, 0).
    let toy = Toy::with_schema(false).trained_model();
    let o = toy.cfx(
        "train-agent",
        &[
            "--set",
            "train.epochs=5",
            "--set",
            "train.steps_per_instance=20",
        ],
    );
    assert_ok(&o);
    let e = toy.cfx("explain", &["--instance", "0.0,0.0"]);
    assert_ok(&e);
    assert_eq!(field(&e, "valid"), "false");
    assert!(stdout(&e).contains("no counterfactual found"));
    let report = read_json(toy.out().join("explain.json"));
    assert_eq!(report["results"][0]["valid"], false);
    assert!(report["results"][0]["counterfactual"].is_null());
    let csv = std::fs::read_to_string(toy.out().join("explain.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("instance,0,"));
}

#[test]
fn evaluate_aggregates_five_repetitions_with_resolved_config() {
    let toy = Toy::new().trained_model();
    let quick = [
        "--set",
        "train.epochs=20",
        "--set",
        "train.steps_per_instance=20",
        "--set",
        "env.lambda=0.25",
    ];
    let o = toy.cfx("evaluate", &quick);
    assert_ok(&o);
    assert_eq!(field(&o, "repetitions"), "5");
    let report = read_json(toy.out().join("evaluate.json"));
    assert_eq!(report["aggregate"]["repetitions"], 5);
    assert_eq!(report["config"]["config"]["env"]["lambda"], 0.25);
    let data = report["config"]["config"]["data"]["csv"].as_str().unwrap();
    assert!(Path::new(data).is_absolute() || data.contains("toy.csv"));
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 5 * 10);
    let csv = std::fs::read_to_string(toy.out().join("evaluate.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "instance_id,valid,proximity,sparsity,gen_time_s");
    assert!(lines[lines.len() - 2].starts_with("mean,"));
    assert!(lines[lines.len() - 1].starts_with("std,"));

    // Reruns with an in-process predictor reproduce every outcome.
    let elsewhere = toy.elsewhere("again");
    assert_ok(
        &toy.cfx(
            "evaluate",
            &[
                &quick[..],
                &elsewhere.iter().map(String::as_str).collect::<Vec<_>>(),
            ]
            .concat(),
        ),
    );
    let again = read_json(toy.path("again/evaluate.json"));
    let outcome = |v: &Value| {
        v["results"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| (r["instance_id"].clone(), r["final_state"].clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(outcome(&report), outcome(&again));
}

#[test]
fn sweep_writes_points_and_a_reproducible_summary() {
    let toy = Toy::new().trained_model();
    let args = [
        "--set",
        "sweep.parameter=lambda",
        "--set",
        "sweep.values=[0.05, 0.5]",
        "--set",
        "eval.repetitions=2",
        "--set",
        "train.epochs=10",
        "--set",
        "train.steps_per_instance=20",
    ];
    let o = toy.cfx("sweep", &args);
    assert_ok(&o);
    assert!(stdout(&o).contains("spearman_validity="));
    let dir = toy.out().join("sweep");
    for i in 0..2 {
        assert!(dir.join(format!("point-{i:03}.json")).is_file());
        assert!(dir.join(format!("point-{i:03}.csv")).is_file());
    }
    assert_eq!(
        read_json(dir.join("point-001.json"))["config"]["config"]["env"]["lambda"],
        0.5
    );
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    std::fs::remove_file(dir.join("summary.csv")).unwrap();
    assert_ok(&toy.cfx("sweep", &[&args[..], &["--summarize-only"]].concat()));
    assert_eq!(
        summary,
        std::fs::read_to_string(dir.join("summary.csv")).unwrap()
    );

    let o = toy.cfx(
        "sweep",
        &[
            "--set",
            "sweep.parameter=max-features",
            "--set",
            "sweep.values=[1, 3]",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "a cap above the feature count is rejected up front"
    );
}

fn spawn_server(model: &Path) -> (Child, String) {
    let mut child = Command::new(BIN)
        .args([
            "serve",
            "--model",
            model.to_str().unwrap(),
            "--tcp",
            "127.0.0.1:0",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening=")
        .expect("address line")
        .to_string();
    (child, addr)
}

#[test]
fn serve_and_serve_check_over_tcp() {
    let toy = Toy::new().trained_model();
    let (mut server, addr) = spawn_server(&toy.out().join("model.bin"));
    let schema = toy.path("toy.toml");

    let o = run(
        &[
            "serve-check",
            "--tcp",
            &addr,
            "--schema",
            schema.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&o);
    let info: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(info["remote"], true);
    assert_eq!(info["info"]["n_features"], 2);

    std::fs::write(
        toy.path("wide.toml"),
        toy_schema(true).replace("n_classes = 2", "n_classes = 3"),
    )
    .unwrap();
    let o = run(
        &[
            "serve-check",
            "--tcp",
            &addr,
            "--schema",
            toy.path("wide.toml").to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));

    // Training against the served model matches the in-process run exactly.
    let quick = [
        "--set",
        "train.epochs=8",
        "--set",
        "train.steps_per_instance=20",
    ];
    assert_ok(&toy.cfx("train-agent", &quick));
    let remote_out = toy.path("remote");
    let address = format!("predictor.address={addr}");
    let model = format!("predictor.model={}", toy.out().join("model.bin").display());
    let remote_args = [
        &quick[..],
        &[
            "--set",
            "predictor.kind=tcp",
            "--set",
            &address,
            "--set",
            &model,
            "--output-dir",
            remote_out.to_str().unwrap(),
        ],
    ]
    .concat();
    assert_ok(&toy.cfx("train-agent", &remote_args));
    assert_eq!(
        std::fs::read(toy.out().join("agent.snap")).unwrap(),
        std::fs::read(remote_out.join("agent.snap")).unwrap()
    );

    server.kill().unwrap();
    server.wait().unwrap();
    let o = run(&["serve-check", "--tcp", &addr], &[]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = toy.cfx("train-agent", &remote_args);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn serve_stdio_answers_line_requests() {
    let toy = Toy::new().trained_model();
    let mut child = Command::new(BIN)
        .args([
            "serve",
            "--stdio",
            "--model",
            toy.out().join("model.bin").to_str().unwrap(),
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    stdin
        .write_all(b"{\"type\":\"info\"}\nnot json\n{\"type\":\"predict\",\"x\":[0.9,0.9]}\n")
        .unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let replies: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(replies.len(), 3);
    assert_eq!(replies[0]["type"], "info");
    assert_eq!(replies[1]["type"], "error");
    assert_eq!(replies[2]["type"], "prediction");
    assert_eq!(replies[2]["y"], 1);

    // Stdio servers also work as a subprocess predictor.
    let model = toy.out().join("model.bin");
    let o = run(
        &[
            "serve-check",
            "--schema",
            toy.path("toy.toml").to_str().unwrap(),
            "--",
            BIN,
            "serve",
            "--stdio",
            "--model",
            model.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&o);
}

#[test]
fn output_dir_precedence() {
    let toy = Toy::new();
    let config = toy.path("run.toml");
    std::fs::write(
        &config,
        format!("output_dir = \"from-config\"\n{TOY_CONFIG}"),
    )
    .unwrap();
    let env_dir = toy.path("from-env");
    let o = run(
        &["-q", "train-model", "-c", config.to_str().unwrap()],
        &[("CFX_OUTPUT_DIR", env_dir.as_path())],
    );
    assert_ok(&o);
    assert!(
        toy.path("from-config/model.bin").is_file(),
        "config wins over the environment"
    );
    assert!(!env_dir.exists());
    let flag = toy.path("from-flag");
    assert_ok(&run(
        &[
            "-q",
            "train-model",
            "-c",
            config.to_str().unwrap(),
            "-o",
            flag.to_str().unwrap(),
        ],
        &[],
    ));
    assert!(flag.join("model.bin").is_file());
}

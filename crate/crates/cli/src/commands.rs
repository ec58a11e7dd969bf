use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use cfx_core::agent::{
    explain_rows, fine_tune_local, generate_cf, Agent, Checkpoint, LocalConfig, PolicySnapshot,
    Trainer,
};
use cfx_core::data::{fit_normalizer, load_csv, split, Dataset, FeatureSchema, NormalizationStats};
use cfx_core::env::{ActionSpace, GoalMode};
use cfx_core::eval::{self, CfResult, MetricAggregate, MetricsReport, ReportFormat, SweepRow};
use cfx_core::predictor::{evaluate, train_mlp, Endpoint, MlpModel, Prediction, PredictorHandle};
use cfx_core::{protocol, Error};
use serde_json::json;

use crate::config::{config_error, ensure_dir, PredictorKind, RunConfig};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! emit {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

/// Raw and normalized splits plus everything derived from the schema.
pub struct Workspace {
    pub cfg: RunConfig,
    pub schema: FeatureSchema,
    pub raw_train: Dataset,
    pub raw_test: Dataset,
    pub stats: NormalizationStats,
    pub train: Dataset,
    pub test: Dataset,
    pub mode: GoalMode,
    pub space: ActionSpace,
}

impl Workspace {
    pub fn prepare(cfg: RunConfig) -> Result<Self> {
        let schema = FeatureSchema::load(&cfg.data.schema)
            .map_err(|e| config_error(format!("schema {}: {e}", cfg.data.schema.display())))?;
        let ds =
            load_csv(&cfg.data.csv, &schema).map_err(|e| config_error(format!("dataset: {e}")))?;
        let (raw_train, raw_test) = split(&ds, cfg.data.train_fraction, cfg.data.split_seed)?;
        if raw_test.is_empty() {
            return Err(config_error(
                "the test split is empty; lower data.train_fraction",
            ));
        }
        let stats = fit_normalizer(&raw_train)?;
        let train = raw_train.normalize(&stats)?;
        let test = raw_test.normalize(&stats)?;
        let mode = cfg
            .goal
            .unwrap_or_else(|| GoalMode::default_for(schema.task()));
        mode.validate(schema.task())
            .map_err(|e| config_error(format!("goal: {e}")))?;
        let space = ActionSpace::new(&schema, &stats)
            .map_err(|e| config_error(format!("action space: {e}")))?;
        cfg.env
            .validate(&space)
            .map_err(|e| config_error(format!("env: {e}")))?;
        Ok(Workspace {
            cfg,
            schema,
            raw_train,
            raw_test,
            stats,
            train,
            test,
            mode,
            space,
        })
    }

    /// Leading `n` normalized test rows.
    fn test_head(&self, n: Option<usize>) -> Dataset {
        let n = n.unwrap_or(usize::MAX).min(self.test.len());
        self.test.select(&(0..n).collect::<Vec<_>>())
    }

    fn raw_ranges(&self) -> Vec<f64> {
        raw_ranges(&self.stats)
    }

    fn connect(&self) -> Result<PredictorHandle> {
        connect(&self.cfg, &self.schema)
    }
}

fn raw_ranges(stats: &NormalizationStats) -> Vec<f64> {
    stats
        .max
        .iter()
        .zip(&stats.min)
        .map(|(a, b)| a - b)
        .collect()
}

pub fn connect(cfg: &RunConfig, schema: &FeatureSchema) -> Result<PredictorHandle> {
    let p = &cfg.predictor;
    let handle = match p.kind {
        PredictorKind::Mlp => {
            let path = cfg.model_path();
            if !path.is_file() {
                return Err(config_error(format!(
                    "model file {} not found; run train-model first",
                    path.display()
                )));
            }
            let model = MlpModel::load(&path)
                .map_err(|e| config_error(format!("model {}: {e}", path.display())))?;
            let handle = PredictorHandle::in_process(model);
            handle.check_schema(schema)?;
            handle
        }
        PredictorKind::Tcp => PredictorHandle::connect_external(
            &Endpoint::Tcp(p.address.clone().expect("validated")),
            schema,
        )?,
        PredictorKind::Command => {
            PredictorHandle::connect_external(&Endpoint::Command(p.command.clone()), schema)?
        }
    };
    Ok(handle)
}

/// A zero step budget means a tenth of the global run.
fn local_config(cfg: &RunConfig) -> LocalConfig {
    let mut local = cfg.local.clone();
    if local.steps == 0 {
        local.steps = LocalConfig::budget_from_global(0.1, &cfg.train);
    }
    local
}

fn write_reports(
    report: &MetricsReport,
    stem: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for &format in formats {
        let path = stem.with_extension(match format {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        });
        eval::write_report(report, &path, format)?;
        paths.push(path);
    }
    Ok(paths)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn fmt_metric(m: &MetricAggregate) -> String {
    match (m.mean, m.std) {
        (Some(mean), Some(std)) => format!("{mean:.4}±{std:.4}"),
        (mean, _) => fmt_opt(mean),
    }
}

fn fmt_prediction(p: Prediction) -> String {
    match p {
        Prediction::Class(c) => c.to_string(),
        Prediction::Value(v) => format!("{v:.4}"),
    }
}

pub fn train_model(cfg: RunConfig) -> Result<()> {
    if cfg.predictor.kind != PredictorKind::Mlp {
        return Err(config_error(
            "train-model trains the in-process MLP; predictor.kind must be \"mlp\"",
        ));
    }
    let ws = Workspace::prepare(cfg)?;
    let model = train_mlp(&ws.train, &ws.cfg.predictor.mlp)?;
    let score = evaluate(&mut PredictorHandle::in_process(model.clone()), &ws.test)?;
    let out = ws.cfg.output_dir();
    ensure_dir(out)?;
    let path = ws.cfg.model_path();
    model.save(&path)?;
    let metrics = json!({ "command": "train-model", "config": ws.cfg.to_json(), "score": score });
    std::fs::write(
        out.join("model_metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    log::info!("trained target model, test {score}");
    match score {
        cfx_core::predictor::Score::Accuracy(v) => emit!("accuracy={v:.4}"),
        cfx_core::predictor::Score::Rmse(v) => emit!("rmse={v:.4}"),
    }
    emit!("model={}", path.display());
    Ok(())
}

fn write_log(trainer: &Trainer, path: &Path) -> std::io::Result<()> {
    let mut text = String::new();
    for entry in trainer.log() {
        text.push_str(&entry.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)
}

pub fn train_agent(cfg: RunConfig, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    let cfg = &ws.cfg;
    let mut handle = ws.connect()?;
    let out = cfg.output_dir();
    ensure_dir(out)?;
    let ckpt_path = out.join("checkpoint.json");
    let log_path = out.join("train_log.txt");

    let mut trainer = if resume {
        if !ckpt_path.is_file() {
            return Err(config_error(format!(
                "no checkpoint to resume at {}",
                ckpt_path.display()
            )));
        }
        let c =
            Checkpoint::load(&ckpt_path).map_err(|e| config_error(format!("checkpoint: {e}")))?;
        if c.config != cfg.train
            || c.env != cfg.env
            || c.mode != ws.mode
            || c.agent.config() != &cfg.agent
        {
            return Err(config_error(
                "checkpoint was written with a different configuration",
            ));
        }
        if c.agent.space() != &ws.space {
            return Err(config_error(
                "checkpoint was written for a different dataset or schema",
            ));
        }
        log::info!("resuming at epoch {} step {}", c.epoch, c.step);
        Trainer::from_checkpoint(c)?
    } else {
        let agent = Agent::new(ws.space.clone(), cfg.agent.clone(), cfg.run.agent_seed)?;
        Trainer::new(agent, cfg.train.clone(), cfg.env, ws.mode)?
    };

    let probe = ws.test_head(Some(cfg.run.probe_rows));
    let stop = stop_after.map_or(usize::MAX, |k| trainer.epoch().saturating_add(k));
    let every = cfg.run.checkpoint_every;
    let start = Instant::now();
    trainer.train_until(
        stop,
        ws.train.rows.view(),
        Some(probe.rows.view()),
        &mut handle,
        |t, _| {
            if t.epoch() % every == 0 {
                t.checkpoint().save(&ckpt_path)?;
                write_log(t, &log_path)?;
            }
            Ok(())
        },
    )?;
    trainer.checkpoint().save(&ckpt_path)?;
    write_log(&trainer, &log_path)?;

    if !trainer.is_finished() {
        emit!(
            "stopped at epoch {} of {}; rerun with --resume",
            trainer.epoch(),
            trainer.config().epochs
        );
        return Ok(());
    }
    let snapshot_path = out.join("agent.snap");
    trainer
        .agent()
        .snapshot(ws.schema.fingerprint(), ws.mode, cfg.env, ws.stats.clone())
        .save(&snapshot_path)?;
    let last = trainer.log().last().cloned();
    let summary = json!({
        "command": "train-agent",
        "config": cfg.to_json(),
        "steps": trainer.step(),
        "epochs": trainer.epoch(),
        "probe_validity": last.as_ref().and_then(|e| e.probe_validity),
        "elapsed_s": start.elapsed().as_secs_f64(),
    });
    std::fs::write(
        out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    if let Some(last) = last {
        emit!("{last}");
    }
    emit!("snapshot={}", snapshot_path.display());
    Ok(())
}

fn load_snapshot(path: &Path, schema: &FeatureSchema) -> Result<PolicySnapshot> {
    if !path.is_file() {
        return Err(config_error(format!(
            "snapshot {} not found; run train-agent first",
            path.display()
        )));
    }
    let snap = PolicySnapshot::load(path)
        .map_err(|e| config_error(format!("snapshot {}: {e}", path.display())))?;
    snap.check_schema(&schema.fingerprint())?;
    Ok(snap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

/// Instances to explain: row indices into a split, or one raw vector.
pub struct Selection {
    pub rows: Vec<usize>,
    pub split: SplitArg,
    pub instance: Option<String>,
}

fn select_instances(ws: &Workspace, sel: &Selection) -> Result<Vec<(String, Vec<f64>)>> {
    if let Some(text) = &sel.instance {
        let raw: Vec<f64> = text
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| config_error(format!("--instance: {e}")))?;
        if raw.len() != ws.schema.n_features() {
            return Err(config_error(format!(
                "--instance has {} values, the schema has {} features",
                raw.len(),
                ws.schema.n_features()
            )));
        }
        return Ok(vec![("instance".into(), raw)]);
    }
    let (name, ds) = match sel.split {
        SplitArg::Train => ("train", &ws.raw_train),
        SplitArg::Test => ("test", &ws.raw_test),
    };
    let rows = if sel.rows.is_empty() {
        vec![0]
    } else {
        sel.rows.clone()
    };
    rows.iter()
        .map(|&i| {
            if i >= ds.len() {
                return Err(config_error(format!(
                    "row {i} is out of range for the {name} split ({} rows)",
                    ds.len()
                )));
            }
            Ok((format!("{name}-{i}"), ds.row(i).to_vec()))
        })
        .collect()
}

fn print_result(
    r: &CfResult,
    schema: &FeatureSchema,
    stats: &NormalizationStats,
    before: Prediction,
    after: Prediction,
) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "instance={} valid={} sparsity={} proximity={} proximity_raw={} gen_time_s={:.4}",
        r.instance_id,
        r.valid,
        r.sparsity.map_or_else(|| "-".into(), |s| s.to_string()),
        fmt_opt(r.proximity),
        fmt_opt(r.proximity_raw),
        r.gen_time_s
    )?;
    writeln!(
        out,
        "  prediction: {} -> {}",
        fmt_prediction(before),
        fmt_prediction(after)
    )?;
    if !r.valid {
        writeln!(out, "  no counterfactual found; last visited point shown")?;
    }
    let x = stats.denormalize(&r.original)?;
    let y = stats.denormalize(&r.final_state)?;
    for ((f, a), b) in schema.features.iter().zip(&x).zip(&y) {
        writeln!(out, "  {}: {:+.4} ({:.4} -> {:.4})", f.name, b - a, a, b)?;
    }
    Ok(())
}

pub fn explain(
    cfg: RunConfig,
    snapshot: Option<PathBuf>,
    sel: Selection,
    local: bool,
) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    let cfg = &ws.cfg;
    let snapshot_path = snapshot.unwrap_or_else(|| cfg.output_dir().join("agent.snap"));
    let snap = load_snapshot(&snapshot_path, &ws.schema)?;
    let instances = select_instances(&ws, &sel)?;
    let mut handle = ws.connect()?;
    let (mode, env, stats) = (snap.meta.goal, snap.meta.env, &snap.meta.stats);
    let ranges = raw_ranges(stats);
    let local_cfg = local_config(cfg);
    let agent = snap.to_agent(cfg.run.agent_seed)?;

    let mut results = Vec::new();
    for (id, raw) in instances {
        let x = stats.normalize(&raw)?;
        let outcome = if local {
            fine_tune_local(agent.clone(), &x, &mut handle, mode, env, &local_cfg).map(|o| o.result)
        } else {
            generate_cf(&agent, &x, &mut handle, mode, env, id.clone())
        };
        let mut r = match outcome {
            Ok(r) => r,
            Err(Error::InvalidGoal(why)) => {
                log::warn!("skipping {id}: {why}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        r.instance_id = id;
        let r = r.with_raw_ranges(&ranges);
        let before = handle.predict(&r.original)?;
        let after = handle.predict(&r.final_state)?;
        print_result(&r, &ws.schema, stats, before, after)?;
        results.push(r);
    }
    let out = cfg.output_dir();
    ensure_dir(out)?;
    let report = MetricsReport::new(
        json!({ "command": "explain", "config": cfg.to_json(), "snapshot": snapshot_path, "local": local }),
        results,
    );
    for p in write_reports(&report, &out.join("explain"), &cfg.eval.formats)? {
        emit!("report={}", p.display());
    }
    Ok(())
}

/// Trains one agent per repetition (or reuses a snapshot) and explains the
/// leading test rows. Generation time includes the global training time
/// spread over the explained rows.
fn run_evaluation(
    ws: &Workspace,
    handle: &mut PredictorHandle,
    snapshot: Option<&PolicySnapshot>,
) -> Result<Vec<CfResult>> {
    let cfg = &ws.cfg;
    let rows = ws.test_head(cfg.eval.max_instances);
    let (mode, env) = match snapshot {
        Some(s) => (s.meta.goal, s.meta.env),
        None => (ws.mode, cfg.env),
    };
    let reps = if snapshot.is_some() {
        1
    } else {
        cfg.eval.repetitions
    };
    let ranges = ws.raw_ranges();
    let mut results = Vec::new();
    for rep in 0..reps {
        let (agent, overhead) = match snapshot {
            Some(s) => (s.to_agent(cfg.run.agent_seed)?, 0.0),
            None => {
                let start = Instant::now();
                let agent = Agent::new(
                    ws.space.clone(),
                    cfg.agent.clone(),
                    cfg.run.agent_seed + rep as u64,
                )?;
                let mut train = cfg.train.clone();
                train.seed += rep as u64;
                let mut trainer = Trainer::new(agent, train, env, mode)?;
                trainer.train_global(ws.train.rows.view(), None, handle, |_, _| Ok(()))?;
                log::info!(
                    "repetition {rep}: trained in {:.1} s",
                    start.elapsed().as_secs_f64()
                );
                (
                    trainer.into_agent(),
                    start.elapsed().as_secs_f64() / rows.len() as f64,
                )
            }
        };
        let batch = if cfg.eval.local {
            let mut local = local_config(cfg);
            local.seed += rep as u64;
            let mut out = Vec::new();
            for (i, row) in rows.rows.rows().into_iter().enumerate() {
                match fine_tune_local(agent.clone(), &row.to_vec(), handle, mode, env, &local) {
                    Ok(o) => {
                        let mut r = o.result;
                        r.instance_id = format!("{rep}-{i}");
                        r.repetition = rep;
                        r.gen_time_s += overhead;
                        out.push(r);
                    }
                    Err(Error::InvalidGoal(_)) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
            out
        } else {
            explain_rows(&agent, rows.rows.view(), handle, mode, env, rep, overhead)?
        };
        results.extend(batch.into_iter().map(|r| r.with_raw_ranges(&ranges)));
    }
    Ok(results)
}

fn print_aggregate(report: &MetricsReport) -> Result<()> {
    let a = &report.aggregate;
    emit!(
        "repetitions={} validity={} proximity={} sparsity={} gen_time_s={}",
        a.repetitions,
        fmt_metric(&a.validity),
        fmt_metric(&a.proximity),
        fmt_metric(&a.sparsity),
        fmt_metric(&a.gen_time_s)
    );
    Ok(())
}

pub fn evaluate_cmd(cfg: RunConfig, snapshot: Option<PathBuf>) -> Result<()> {
    let ws = Workspace::prepare(cfg)?;
    let snap = snapshot
        .as_deref()
        .map(|p| load_snapshot(p, &ws.schema))
        .transpose()?;
    let mut handle = ws.connect()?;
    let results = run_evaluation(&ws, &mut handle, snap.as_ref())?;
    let cfg = &ws.cfg;
    let report = MetricsReport::new(
        json!({ "command": "evaluate", "config": cfg.to_json(), "snapshot": snapshot }),
        results,
    );
    ensure_dir(cfg.output_dir())?;
    print_aggregate(&report)?;
    for p in write_reports(
        &report,
        &cfg.output_dir().join("evaluate"),
        &cfg.eval.formats,
    )? {
        emit!("report={}", p.display());
    }
    Ok(())
}

fn point_value(report: &MetricsReport, path: &Path) -> Result<f64> {
    report.config["value"]
        .as_f64()
        .ok_or_else(|| config_error(format!("{} does not record a sweep value", path.display())))
}

/// Summary rows in grid order, built the same way whether the reports were
/// just computed or read back from disk.
fn summarize(points: Vec<(f64, MetricsReport)>) -> Result<Vec<SweepRow>> {
    let values: Vec<f64> = points.iter().map(|(v, _)| *v).collect();
    let mut reports = points.into_iter().map(|(_, r)| r);
    let rows = eval::sweep(&values, |_| {
        Ok(reports.next().expect("one report per value"))
    })?;
    Ok(rows.into_iter().map(|(row, _)| row).collect())
}

fn finish_sweep(rows: &[SweepRow], dir: &Path) -> Result<()> {
    let path = dir.join("summary.csv");
    eval::write_sweep_summary(rows, &path)?;
    for r in rows {
        emit!(
            "value={} validity={:.4} sparsity={} proximity={}",
            r.value,
            r.validity,
            fmt_opt(r.sparsity),
            fmt_opt(r.proximity)
        );
    }
    let (v, s) = eval::sweep_trends(rows);
    emit!("spearman_validity={v:.4} spearman_sparsity={s:.4}");
    emit!("summary={}", path.display());
    Ok(())
}

pub fn sweep(cfg: RunConfig, summarize_only: bool) -> Result<()> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| config_error("sweep needs a [sweep] section"))?;
    let dir = cfg.output_dir().join("sweep");
    if summarize_only {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|e| e == "json")
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("point-"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(config_error(format!(
                "no point reports in {}",
                dir.display()
            )));
        }
        let points = files
            .iter()
            .map(|p| {
                let report = eval::read_report_json(p)?;
                Ok((point_value(&report, p)?, report))
            })
            .collect::<Result<Vec<_>>>()?;
        return finish_sweep(&summarize(points)?, &dir);
    }

    // Validate every grid point before spending time on the first one.
    let workspaces = sweep
        .values
        .iter()
        .map(|&v| Workspace::prepare(sweep.apply(&cfg, v)?))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&dir)?;
    let mut points = Vec::new();
    for (i, (ws, &value)) in workspaces.iter().zip(&sweep.values).enumerate() {
        log::info!("sweep point {i}: {:?} = {value}", sweep.parameter);
        let mut handle = ws.connect()?;
        let results = run_evaluation(ws, &mut handle, None)?;
        let report = MetricsReport::new(
            json!({ "command": "sweep", "parameter": sweep.parameter, "value": value, "config": ws.cfg.to_json() }),
            results,
        );
        write_reports(
            &report,
            &dir.join(format!("point-{i:03}")),
            &cfg.eval.formats,
        )?;
        if !cfg.eval.formats.contains(&ReportFormat::Json) {
            // The summary is rebuilt from JSON point files.
            eval::write_report(
                &report,
                dir.join(format!("point-{i:03}.json")),
                ReportFormat::Json,
            )?;
        }
        points.push((value, report));
    }
    finish_sweep(&summarize(points)?, &dir)
}

pub fn serve_check(
    endpoint: Option<Endpoint>,
    cfg: Option<RunConfig>,
    schema_path: Option<PathBuf>,
) -> Result<()> {
    let schema = match (&schema_path, &cfg) {
        (Some(p), _) => Some(
            FeatureSchema::load(p)
                .map_err(|e| config_error(format!("schema {}: {e}", p.display())))?,
        ),
        (None, Some(c)) => Some(
            FeatureSchema::load(&c.data.schema)
                .map_err(|e| config_error(format!("schema {}: {e}", c.data.schema.display())))?,
        ),
        (None, None) => None,
    };
    let handle = match (endpoint, &cfg, &schema) {
        (Some(ep), _, Some(s)) => PredictorHandle::connect_external(&ep, s)?,
        (Some(ep), _, None) => PredictorHandle::connect(&ep)?,
        (None, Some(c), Some(s)) => connect(c, s)?,
        _ => {
            return Err(config_error(
                "serve-check needs --tcp, --command or --config",
            ))
        }
    };
    let info = handle.info();
    emit!(
        "{}",
        json!({ "ok": true, "remote": handle.is_remote(), "info": info })
    );
    Ok(())
}

pub fn serve(model_path: &Path, tcp: Option<&str>) -> Result<()> {
    if !model_path.is_file() {
        return Err(config_error(format!(
            "model file {} not found",
            model_path.display()
        )));
    }
    let model = MlpModel::load(model_path)
        .map_err(|e| config_error(format!("model {}: {e}", model_path.display())))?;
    match tcp {
        None => {
            let stdin = std::io::stdin().lock();
            protocol::serve(&model, stdin, std::io::stdout().lock())?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "listening={}", listener.local_addr()?)?;
            stdout.flush()?;
            drop(stdout);
            protocol::serve_tcp(listener, Arc::new(model))?;
        }
    }
    Ok(())
}

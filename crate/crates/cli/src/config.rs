//! Run configuration: one TOML file per run, with `--set` overrides applied
//! to the parsed table before it is typed.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cfx_core::agent::{AgentConfig, LocalConfig, TrainConfig};
use cfx_core::env::{EnvConfig, GoalMode};
use cfx_core::eval::ReportFormat;
use cfx_core::predictor::MlpTrainConfig;
use serde::{Deserialize, Serialize};

/// Default output directory when neither the flag nor the config names one.
pub const OUTPUT_DIR_ENV: &str = "CFX_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "cfx-out";

/// Bad input detected before any work starts; exits with code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    ConfigError(message.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    /// Defaults to untargeted for classifiers and a 0.2 shift for regressors.
    pub goal: Option<GoalMode>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub local: LocalConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub csv: PathBuf,
    pub schema: PathBuf,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_train_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    /// In-process MLP trained by `train-model`.
    #[default]
    Mlp,
    Tcp,
    Command,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// MLP file; defaults to `model.bin` in the output directory.
    pub model: Option<PathBuf>,
    /// `host:port` for `kind = "tcp"`.
    pub address: Option<String>,
    /// Program and arguments for `kind = "command"`.
    pub command: Vec<String>,
    pub mlp: MlpTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub agent_seed: u64,
    /// Epochs between checkpoints during `train-agent`.
    pub checkpoint_every: usize,
    /// Leading test rows used for probe validity.
    pub probe_rows: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            agent_seed: 0,
            checkpoint_every: 10,
            probe_rows: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Independent training runs, seeds offset by the repetition index.
    pub repetitions: usize,
    /// Leading test rows to explain; all when absent.
    pub max_instances: Option<usize>,
    /// Fine-tune per instance after global training.
    pub local: bool,
    pub formats: Vec<ReportFormat>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            repetitions: 5,
            max_instances: None,
            local: false,
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Lambda,
    MaxFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl SweepConfig {
    /// Copy of `cfg` with the swept field set to `value`.
    pub fn apply(&self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut out = cfg.clone();
        match self.parameter {
            SweepParameter::Lambda => out.env.lambda = value,
            SweepParameter::MaxFeatures => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(config_error(format!(
                        "max-features sweep values must be positive integers, got {value}"
                    )));
                }
                out.env.max_features = value as usize;
            }
        }
        Ok(out)
    }
}

/// Parses `section.key=value` where the value is TOML, or a bare string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| config_error(format!("override '{text}' is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(config_error(format!(
            "override '{text}' has an empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override path crosses non-table key '{seg}'")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads, overrides and validates a config. Relative paths inside the
    /// file are taken relative to the file; `output_dir_flag` wins over the
    /// file, which wins over the environment.
    pub fn load(path: &Path, overrides: &[String], output_dir_flag: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, &key, value)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.data.csv = resolve(&base, &cfg.data.csv);
        cfg.data.schema = resolve(&base, &cfg.data.schema);
        cfg.predictor.model = cfg.predictor.model.as_deref().map(|p| resolve(&base, p));
        cfg.output_dir = Some(match (output_dir_flag, &cfg.output_dir) {
            (Some(flag), _) => flag.to_path_buf(),
            (None, Some(dir)) => resolve(&base, dir),
            (None, None) => default_output_dir(),
        });
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that referenced files exist and numeric fields are in range.
    /// Checks that need the schema (goal, feature cap) happen once it is read.
    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("dataset", &self.data.csv), ("schema", &self.data.schema)] {
            if !p.is_file() {
                return Err(config_error(format!(
                    "{what} file {} does not exist",
                    p.display()
                )));
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(config_error(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        match self.predictor.kind {
            PredictorKind::Tcp if self.predictor.address.is_none() => {
                return Err(config_error(
                    "predictor.kind = \"tcp\" needs predictor.address",
                ))
            }
            PredictorKind::Command if self.predictor.command.is_empty() => {
                return Err(config_error(
                    "predictor.kind = \"command\" needs predictor.command",
                ))
            }
            _ => {}
        }
        let m = &self.predictor.mlp;
        if m.epochs == 0
            || m.batch_size == 0
            || !m.learning_rate.is_finite()
            || m.learning_rate <= 0.0
            || m.hidden.contains(&0)
        {
            return Err(config_error(
                "predictor.mlp needs positive epochs, batch_size, learning_rate and layer sizes",
            ));
        }
        if self.run.checkpoint_every == 0 || self.run.probe_rows == 0 {
            return Err(config_error(
                "run.checkpoint_every and run.probe_rows must be positive",
            ));
        }
        if self.eval.repetitions == 0 || self.eval.max_instances == Some(0) {
            return Err(config_error(
                "eval.repetitions and eval.max_instances must be positive",
            ));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(config_error("sweep.values is empty"));
            }
        }
        self.agent
            .validate()
            .map_err(|e| config_error(format!("agent: {e}")))?;
        self.train
            .validate()
            .map_err(|e| config_error(format!("train: {e}")))?;
        self.local
            .validate()
            .map_err(|e| config_error(format!("local: {e}")))?;
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().expect("resolved at load")
    }

    pub fn model_path(&self) -> PathBuf {
        self.predictor
            .model
            .clone()
            .unwrap_or_else(|| self.output_dir().join("model.bin"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_are_typed_when_they_parse_as_toml() {
        let (k, v) = parse_override("env.lambda=0.5").unwrap();
        assert_eq!(k, ["env", "lambda"]);
        assert_eq!(v, toml::Value::Float(0.5));
        assert_eq!(
            parse_override("agent.q_hidden=[8, 8]")
                .unwrap()
                .1
                .as_array()
                .unwrap()
                .len(),
            2
        );
        assert_eq!(
            parse_override("predictor.address=127.0.0.1:9").unwrap().1,
            toml::Value::String("127.0.0.1:9".into())
        );
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn set_path_creates_missing_tables() {
        let mut t = toml::Table::new();
        set_path(
            &mut t,
            &["goal".into(), "mode".into()],
            toml::Value::String("untargeted".into()),
        )
        .unwrap();
        assert_eq!(t["goal"]["mode"].as_str(), Some("untargeted"));
        t.insert("x".into(), toml::Value::Integer(1));
        assert!(set_path(&mut t, &["x".into(), "y".into()], toml::Value::Integer(2)).is_err());
    }

    #[test]
    fn sweep_rejects_fractional_feature_caps() {
        let cfg: RunConfig = toml::from_str("[data]\ncsv = \"a\"\nschema = \"b\"\n").unwrap();
        let sweep = SweepConfig {
            parameter: SweepParameter::MaxFeatures,
            values: vec![2.0],
        };
        assert_eq!(sweep.apply(&cfg, 2.0).unwrap().env.max_features, 2);
        assert!(sweep.apply(&cfg, 1.5).is_err());
        let lambda = SweepConfig {
            parameter: SweepParameter::Lambda,
            values: vec![],
        };
        assert_eq!(lambda.apply(&cfg, 0.3).unwrap().env.lambda, 0.3);
    }
}

//! Flat `key = value` run configuration.
//!
//! One setting per line, keys are dotted paths into [`Config`], values are
//! JSON (numbers, `true`, `[1, 2]`, `"text"`) or a bare word, which is read
//! as a string. `#` starts a comment line. A JSON object replaces a whole
//! section. Layering: defaults, then the file, then `--set`, then flags.

use std::path::{Path, PathBuf};

use pvp_core::benchmark::{BackboneSpec, BenchConfig, TaskSpec};
use pvp_core::{LoadType, PetConfig, PetMethod, TrainSpec, ViTConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Sections of [`BenchConfig`] that always mirror the top-level ones.
const SHARED: [&str; 3] = ["vit", "backbone", "tasks"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub vit: ViTConfig,
    pub backbone: BackboneSpec,
    pub tasks: TaskSpec,
    pub data: DataPaths,
    /// `pet.prompt_tokens` is the bank size `N` written by `pretrain`.
    pub pet: PetConfig,
    pub pretrain: PretrainSection,
    pub tune: TuneSection,
    pub bench: BenchConfig,
}

/// PVPD files that replace the generated source or target task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep only the first this-many source samples of each class.
    pub source_samples_per_class: Option<usize>,
}

impl PretrainSection {
    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    /// Stage-1 bank; without one the modules start from scratch.
    pub checkpoint: Option<PathBuf>,
    pub shots: usize,
    pub load: LoadType,
    /// Downstream prompt count.
    pub k: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Drives both the episode split and the training order.
    pub seed: u64,
}

impl TuneSection {
    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainSpec::default()
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        let bench = BenchConfig::default();
        Self {
            vit: bench.vit.clone(),
            backbone: bench.backbone,
            tasks: bench.tasks,
            data: DataPaths::default(),
            pet: PetConfig::new(PetMethod::VptDeep).with_prompt_tokens(bench.bank_tokens),
            pretrain: PretrainSection {
                steps: bench.pretrain.steps,
                batch_size: bench.pretrain.batch_size,
                lr: bench.pretrain.lr,
                weight_decay: bench.pretrain.weight_decay,
                seed: bench.pretrain_seed,
                source_samples_per_class: None,
            },
            tune: TuneSection {
                checkpoint: None,
                shots: 1,
                load: LoadType::Sequential,
                k: bench.prompt_tokens,
                steps: bench.tune.steps,
                batch_size: bench.tune.batch_size,
                lr: bench.tune.lr,
                weight_decay: bench.tune.weight_decay,
                seed: 0,
            },
            bench,
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: Value,
    pub origin: String,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|seg| {
            !seg.is_empty()
                && seg
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses one `key=value` pair (used for `--set`).
pub fn parse_assignment(text: &str, origin: &str) -> Result<Setting, CliError> {
    let (key, value) = text.split_once('=').ok_or_else(|| {
        CliError::usage(format!("{origin}: expected `key = value`, got `{text}`"))
    })?;
    let key = key.trim();
    if !valid_key(key) {
        return Err(CliError::usage(format!("{origin}: malformed key `{key}`")));
    }
    let value = value.trim();
    if value.is_empty() {
        return Err(CliError::usage(format!("{origin}: `{key}` has no value")));
    }
    Ok(Setting {
        key: key.to_string(),
        value: parse_value(value),
        origin: origin.to_string(),
    })
}

pub fn parse_flat(text: &str, file: &str) -> Result<Vec<Setting>, CliError> {
    let mut out: Vec<Setting> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let origin = format!("{file}:{}", i + 1);
        let s = parse_assignment(line, &origin)?;
        if let Some(prev) = out.iter().find(|p| p.key == s.key) {
            return Err(CliError::usage(format!(
                "{origin}: `{}` already set at {}",
                s.key, prev.origin
            )));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_file(path: &Path) -> Result<Vec<Setting>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config `{}`: {e}", path.display())))?;
    parse_flat(&text, &path.display().to_string())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "a list",
        Value::Object(_) => "a section",
    }
}

/// Defaults as JSON, without the bench sections that mirror top-level ones.
fn template() -> Value {
    let mut v = serde_json::to_value(Config::default()).expect("config serializes");
    let bench = v["bench"].as_object_mut().expect("bench is a section");
    for key in SHARED {
        bench.remove(key);
    }
    v
}

fn assign(root: &mut Value, s: &Setting) -> Result<(), CliError> {
    let segs: Vec<&str> = s.key.split('.').collect();
    let mut node = root;
    for (i, seg) in segs.iter().enumerate() {
        let map = match node {
            Value::Object(map) => map,
            _ => {
                return Err(CliError::usage(format!(
                    "{}: `{}` is not a section",
                    s.origin,
                    segs[..i].join(".")
                )))
            }
        };
        let Some(child) = map.get_mut(*seg) else {
            return Err(CliError::usage(format!(
                "{}: unknown key `{}`",
                s.origin, s.key
            )));
        };
        node = child;
    }
    let compatible = matches!(
        (&*node, &s.value),
        (Value::Null, _)
            | (_, Value::Null)
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Array(_), Value::Array(_))
            | (Value::Object(_), Value::Object(_))
    );
    if !compatible {
        return Err(CliError::usage(format!(
            "{}: `{}` expects {}, got {}",
            s.origin,
            s.key,
            type_name(node),
            type_name(&s.value)
        )));
    }
    *node = s.value.clone();
    Ok(())
}

/// Applies `settings` in order over the defaults and type-checks the result.
pub fn resolve(settings: &[Setting]) -> Result<Config, CliError> {
    let mut root = template();
    for s in settings {
        // the shared bench sections are overwritten below
        if SHARED
            .iter()
            .any(|k| s.key.starts_with(&format!("bench.{k}")))
        {
            return Err(CliError::usage(format!(
                "{}: unknown key `{}` (set `{}` instead)",
                s.origin,
                s.key,
                s.key.trim_start_matches("bench.")
            )));
        }
        assign(&mut root, s)?;
    }
    let shared: Map<String, Value> = SHARED
        .iter()
        .map(|k| (k.to_string(), root[*k].clone()))
        .collect();
    root["bench"]
        .as_object_mut()
        .expect("bench is a section")
        .extend(shared);
    serde_path_to_error::deserialize::<_, Config>(root).map_err(|e| {
        let path = e.path().to_string();
        let origin = settings
            .iter()
            .rev()
            .find(|s| path == s.key || path.starts_with(&format!("{}.", s.key)))
            .map(|s| format!("{}: ", s.origin))
            .unwrap_or_default();
        CliError::usage(format!("{origin}invalid `{path}`: {}", e.inner()))
    })
}

impl Config {
    pub fn validate(&self) -> Result<(), CliError> {
        self.vit.validate()?;
        self.pet.validate(&self.vit)?;
        self.pretrain.train_spec().validate()?;
        self.tune.train_spec().validate()?;
        if self.tune.shots == 0 {
            return Err(CliError::usage("tune.shots must be positive"));
        }
        if self.tune.k == 0 {
            return Err(CliError::usage("tune.k must be positive"));
        }
        if self.pretrain.source_samples_per_class == Some(0) {
            return Err(CliError::usage(
                "pretrain.source_samples_per_class must be positive",
            ));
        }
        Ok(())
    }
}

use std::path::{Path, PathBuf};

use physio_recon::dataset::PrepSettings;
use physio_recon::models::{ModelConfig, Seq2OneConfig, Seq2SeqConfig};
use physio_recon::synth::SynthConfig;
use physio_recon::training::{StrategyKind, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyBlock {
    pub kind: StrategyKind,
    /// Prepared (preprocessed) dataset directories.
    pub source_dataset: Option<PathBuf>,
    pub target_dataset: Option<PathBuf>,
}

impl Default for StrategyBlock {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Scratch,
            source_dataset: None,
            target_dataset: None,
        }
    }
}

/// Everything a command may need. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub prep: PrepSettings,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: StrategyBlock,
    /// Output directory of an earlier `train` run, for `evaluate` and `predict`.
    pub run_dir: Option<PathBuf>,
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, and as a
/// plain string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("override '{s}' is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(format!("override '{s}' has an empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), String> {
    let mut node = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            format!(
                "cannot set '{}': '{}' is not an object",
                path.join("."),
                path[..i].join(".")
            )
        })?;
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        node = obj
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Fills keys missing from `over` with those of `base`, recursively.
fn merge_under(over: &mut Value, base: Value) {
    if let (Value::Object(o), Value::Object(b)) = (over, base) {
        for (k, v) in b {
            match o.get_mut(&k) {
                Some(existing) => merge_under(existing, v),
                None => {
                    o.insert(k, v);
                }
            }
        }
    }
}

fn model_defaults(kind: &str) -> Result<Value, String> {
    let cfg = match kind {
        "seq2one" => ModelConfig::Seq2one(Seq2OneConfig::default()),
        "seq2seq" => ModelConfig::Seq2seq(Seq2SeqConfig::default()),
        other => {
            return Err(format!(
                "unknown model kind '{other}' (expected seq2one or seq2seq)"
            ))
        }
    };
    Ok(serde_json::to_value(cfg).expect("model config serializes"))
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, String> {
        let mut value = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        if !value.is_object() {
            return Err("config must be a JSON object".into());
        }
        for o in overrides {
            let (key, v) = parse_override(o)?;
            set_path(&mut value, &key, v)?;
        }
        if let Some(model) = value.get_mut("model") {
            let kind = match model.get("kind") {
                None => "seq2one".to_string(),
                Some(Value::String(k)) => k.clone(),
                Some(other) => return Err(format!("model.kind must be a string, got {other}")),
            };
            merge_under(model, model_defaults(&kind)?);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| format!("config: {e}"))?;
        let base = path
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        for p in [
            &mut cfg.manifest,
            &mut cfg.strategy.source_dataset,
            &mut cfg.strategy.target_dataset,
            &mut cfg.run_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

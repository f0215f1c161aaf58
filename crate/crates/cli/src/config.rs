//! Settings merged from flags, environment, an optional TOML file and
//! defaults, in that order of precedence, with the source of every field.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dialogue_core::eval::{ContextMode, SlotAggregation};
use dialogue_core::model::ModelConfig;
use dialogue_core::train::TrainConfig;

pub const PORT_ENV: &str = dialogue_service::PORT_ENV;
pub const CHECKPOINT_ENV: &str = dialogue_service::CHECKPOINT_ENV;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `<split>.json`, `db.json` and `ontology.json`.
    pub data_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Training output directory, or gen-toy/convert output directory.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            corpus: None,
            dev: None,
            db: None,
            ontology: None,
            embeddings: None,
            checkpoint: None,
            out_dir: "run".into(),
        }
    }
}

impl Paths {
    pub fn corpus_for(&self, split: &str) -> PathBuf {
        self.corpus
            .clone()
            .unwrap_or_else(|| self.data_dir.join(format!("{split}.json")))
    }

    pub fn db(&self) -> PathBuf {
        self.db.clone().unwrap_or_else(|| self.data_dir.join("db.json"))
    }

    pub fn ontology(&self) -> PathBuf {
        self.ontology.clone().unwrap_or_else(|| self.data_dir.join("ontology.json"))
    }

    pub fn checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| anyhow!("missing --checkpoint (or {CHECKPOINT_ENV})"))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub context_mode: ContextMode,
    pub aggregation: SlotAggregation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSettings {
    pub port: u16,
    pub max_sessions: usize,
    pub idle_expiry_secs: u64,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            port: dialogue_service::DEFAULT_PORT,
            max_sessions: 1024,
            idle_expiry_secs: 30 * 60,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub eval: EvalSettings,
    pub serve: ServeSettings,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File(PathBuf),
    Env(&'static str),
    Flag(&'static str),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::File(p) => write!(f, "file {}", p.display()),
            Source::Env(name) => write!(f, "env {name}"),
            Source::Flag(name) => write!(f, "flag --{name}"),
        }
    }
}

/// A value set from outside the defaults: dotted key, value, source.
pub struct Override {
    pub key: &'static str,
    pub value: Value,
    pub source: Source,
}

impl Override {
    pub fn flag(key: &'static str, name: &'static str, value: impl Serialize) -> Self {
        Self {
            key,
            value: serde_json::to_value(value).expect("flag values serialize"),
            source: Source::Flag(name),
        }
    }
}

/// The merged settings and where each leaf came from.
#[derive(Debug)]
pub struct Resolved {
    pub settings: Settings,
    pub provenance: BTreeMap<String, Source>,
    tree: Value,
}

fn leaves(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn slot<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(tree, |node, part| node.as_object_mut()?.get_mut(part))
}

fn set(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let target = slot(tree, key).ok_or_else(|| anyhow!("unknown setting `{key}`"))?;
    *target = value;
    Ok(())
}

fn toml_to_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(serde_json::to_value(table)?)
}

/// Merges defaults < file < env < flags. `env` is a lookup so tests need
/// not touch the process environment.
pub fn resolve(
    config_file: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
    flags: Vec<Override>,
) -> Result<Resolved> {
    let mut tree = serde_json::to_value(Settings::default())?;
    let mut keys = Vec::new();
    leaves("", &tree, &mut keys);
    let mut provenance: BTreeMap<String, Source> = keys.into_iter().map(|k| (k, Source::Default)).collect();

    if let Some(path) = config_file {
        let file = toml_to_json(path)?;
        let mut file_keys = Vec::new();
        leaves("", &file, &mut file_keys);
        let Value::Object(_) = file else {
            bail!("config {} is not a table", path.display());
        };
        for key in file_keys {
            let value = key
                .split('.')
                .try_fold(&file, |node, part| node.get(part))
                .cloned()
                .unwrap_or(Value::Null);
            set(&mut tree, &key, value).with_context(|| format!("in config {}", path.display()))?;
            provenance.insert(key, Source::File(path.to_path_buf()));
        }
    }

    let env_keys: [(&'static str, &str, fn(&str) -> Result<Value>); 2] = [
        (PORT_ENV, "serve.port", |s| {
            Ok(Value::from(s.parse::<u16>().map_err(|e| anyhow!("{PORT_ENV}={s}: {e}"))?))
        }),
        (CHECKPOINT_ENV, "paths.checkpoint", |s| Ok(Value::from(s))),
    ];
    for (name, key, parse) in env_keys {
        if let Some(raw) = env(name).filter(|s| !s.is_empty()) {
            set(&mut tree, key, parse(&raw)?)?;
            provenance.insert(key.to_string(), Source::Env(name));
        }
    }

    for o in flags {
        set(&mut tree, o.key, o.value)?;
        provenance.insert(o.key.to_string(), o.source);
    }

    let settings: Settings = serde_json::from_value(tree.clone()).context("invalid settings")?;
    Ok(Resolved {
        settings,
        provenance,
        tree,
    })
}

impl Resolved {
    /// One `key = value  (source)` line per setting.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (key, source) in &self.provenance {
            let value = key
                .split('.')
                .try_fold(&self.tree, |node, part| node.get(part))
                .cloned()
                .unwrap_or(Value::Null);
            out.push_str(&format!("{key} = {value}  ({source})\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_match_library_defaults() {
        let r = resolve(None, no_env, vec![]).unwrap();
        assert_eq!(r.settings.model, ModelConfig::default());
        assert_eq!(r.settings.train, TrainConfig::default());
        assert!(r.provenance.values().all(|s| *s == Source::Default));
    }

    #[test]
    fn precedence_is_flag_env_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[serve]\nport = 1000\n[train]\nepochs = 7\nbatch_size = 5\n").unwrap();
        let env = |k: &str| (k == PORT_ENV).then(|| "2000".to_string());
        let flags = vec![Override::flag("train.batch_size", "batch-size", 9)];
        let r = resolve(Some(&file), env, flags).unwrap();
        assert_eq!(r.settings.serve.port, 2000);
        assert_eq!(r.settings.train.epochs, 7);
        assert_eq!(r.settings.train.batch_size, 9);
        assert_eq!(r.settings.train.warmup_steps, 4000);
        assert_eq!(r.provenance["serve.port"], Source::Env(PORT_ENV));
        assert_eq!(r.provenance["train.epochs"], Source::File(file.clone()));
        assert_eq!(r.provenance["train.batch_size"], Source::Flag("batch-size"));
        let text = r.describe();
        assert!(text.contains("train.epochs = 7  (file "));
        assert!(text.contains("serve.port = 2000  (env E2E_PORT)"));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[train]\nepoch = 7\n").unwrap();
        let err = resolve(Some(&file), no_env, vec![]).unwrap_err();
        assert!(format!("{err:#}").contains("train.epoch"));
    }

    #[test]
    fn bad_env_port_is_an_error() {
        let env = |k: &str| (k == PORT_ENV).then(|| "eighty".to_string());
        assert!(resolve(None, env, vec![]).is_err());
    }
}

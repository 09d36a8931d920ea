//! Declarative run configuration.
//!
//! One TOML file names the splits, backends, task instruction and grids for
//! a run. Relative paths resolve against the config file's directory.
//! Environment variables are read only for API keys.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use notecheck::backend::{
    Backend, BackendConfig, HttpBackend, ModelClient, RequestParams, Rule, ScriptedBackend,
};
use notecheck::corpus::{load_split, ColumnMapping, Dataset};
use notecheck::detector::P1_INSTRUCTION;
use notecheck::optimizer::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub datasets: BTreeMap<String, DatasetSpec>,
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub evaluate: Option<EvaluateSpec>,
    #[serde(default)]
    pub optimize: Option<OptimizeSpec>,
    /// Directory relative paths resolve against; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub mapping: ColumnMapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    /// Model name sent on the wire.
    pub model: String,
    #[serde(default)]
    pub params: RequestParams,
    /// Endpoint settings for `http` backends.
    #[serde(default)]
    pub endpoint: BackendConfig,
    /// Replies served in order by a `scripted` backend.
    #[serde(default)]
    pub replies: Vec<String>,
    /// Reply served once `replies` is used up.
    #[serde(default)]
    pub always: Option<String>,
}

/// Exactly one of the fields may be set; none means the P#1 instruction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub builtin: Option<String>,
    pub file: Option<PathBuf>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSpec {
    pub models: Vec<String>,
    pub splits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSpec {
    pub feedback_split: String,
    pub val_split: String,
    /// `REFLECTORxINFERENCE` backend-name pairs.
    pub pairings: Vec<String>,
    /// Splits the best instruction is scored on after the search.
    #[serde(default)]
    pub eval_splits: Vec<String>,
    /// Seeds for scoring optimized instructions; a single run by default.
    #[serde(default = "default_optimize_seeds")]
    pub eval_seeds: Vec<u64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_optimize_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pairing {
    pub reflector: String,
    pub inference: String,
}

impl Pairing {
    pub fn label(&self) -> String {
        format!("{}x{}", self.reflector, self.inference)
    }
}

/// Splits `NAMExNAME` at the `x` that leaves a known backend name on both
/// sides. Names containing `x` are fine as long as only one split fits.
pub fn parse_pairing<'a>(
    s: &str,
    known: impl IntoIterator<Item = &'a String> + Clone,
) -> Result<Pairing, CliError> {
    let is_known = |name: &str| known.clone().into_iter().any(|k| k == name);
    let fits: Vec<Pairing> = s
        .match_indices('x')
        .map(|(i, _)| (&s[..i], &s[i + 1..]))
        .filter(|(r, inf)| is_known(r) && is_known(inf))
        .map(|(r, inf)| Pairing {
            reflector: r.to_string(),
            inference: inf.to_string(),
        })
        .collect();
    match fits.len() {
        1 => Ok(fits.into_iter().next().unwrap()),
        0 => Err(CliError::Config(format!(
            "pairing `{s}` is not REFLECTORxINFERENCE over configured backends"
        ))),
        _ => Err(CliError::Config(format!(
            "pairing `{s}` is ambiguous: {}",
            fits.iter()
                .map(|p| format!("{} / {}", p.reflector, p.inference))
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Checks names and shapes without touching datasets or endpoints.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.run_id.trim().is_empty() || self.run_id.contains(['/', '\\']) {
            return bad(format!("run_id `{}` must be a non-empty file-name-safe string", self.run_id));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let set = [self.task.builtin.is_some(), self.task.file.is_some(), self.task.text.is_some()];
        if set.iter().filter(|&&b| b).count() > 1 {
            return bad("task: set only one of builtin, file, text".into());
        }
        for (name, spec) in &self.backends {
            if spec.model.trim().is_empty() {
                return bad(format!("backend `{name}`: model is empty"));
            }
            if spec.kind == BackendKind::Http {
                spec.endpoint
                    .validate()
                    .map_err(|e| CliError::Config(format!("backend `{name}`: {e}")))?;
            }
        }
        let split = |s: &String| -> Result<(), CliError> {
            if self.datasets.contains_key(s) {
                Ok(())
            } else {
                Err(CliError::Config(format!("unknown split `{s}`")))
            }
        };
        let backend = |b: &String| -> Result<(), CliError> {
            if self.backends.contains_key(b) {
                Ok(())
            } else {
                Err(CliError::Config(format!("unknown backend `{b}`")))
            }
        };
        if let Some(e) = &self.evaluate {
            e.models.iter().try_for_each(backend)?;
            e.splits.iter().try_for_each(split)?;
        }
        if let Some(o) = &self.optimize {
            split(&o.feedback_split)?;
            split(&o.val_split)?;
            o.eval_splits.iter().try_for_each(split)?;
            if o.feedback_split == o.val_split {
                return bad("optimize: feedback_split and val_split must differ".into());
            }
            if o.eval_seeds.is_empty() {
                return bad("optimize: eval_seeds must not be empty".into());
            }
            for p in &o.pairings {
                parse_pairing(p, self.backends.keys())?;
            }
        }
        Ok(())
    }

    pub fn instruction(&self) -> Result<String, CliError> {
        let t = &self.task;
        if let Some(text) = &t.text {
            return Ok(text.clone());
        }
        if let Some(file) = &t.file {
            let path = self.resolve(file);
            return std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("task file {}: {e}", path.display())));
        }
        match t.builtin.as_deref() {
            None | Some("p1") => Ok(P1_INSTRUCTION.to_string()),
            Some(other) => Err(CliError::Config(format!("unknown builtin task `{other}`"))),
        }
    }

    pub fn load_dataset(&self, name: &str) -> Result<Dataset, CliError> {
        let spec = self
            .datasets
            .get(name)
            .ok_or_else(|| CliError::Config(format!("unknown split `{name}`")))?;
        load_split(name, &self.resolve(&spec.path), &spec.mapping)
            .map_err(|e| CliError::Config(format!("split `{name}`: {e}")))
    }
}

/// Builds model clients, letting callers swap in their own backends by name.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    overrides: HashMap<String, Arc<dyn Backend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, backend: Arc<dyn Backend>) -> &mut Self {
        self.overrides.insert(name.into(), backend);
        self
    }

    pub fn client(&self, cfg: &RunConfig, name: &str) -> Result<ModelClient, CliError> {
        let spec = cfg
            .backends
            .get(name)
            .ok_or_else(|| CliError::Config(format!("unknown backend `{name}`")))?;
        let backend: Arc<dyn Backend> = match self.overrides.get(name) {
            Some(b) => Arc::clone(b),
            None => match spec.kind {
                BackendKind::Http => Arc::new(
                    HttpBackend::new(spec.endpoint.clone())
                        .map_err(|e| CliError::Config(format!("backend `{name}`: {e}")))?,
                ),
                BackendKind::Scripted => {
                    let mut rules = vec![Rule::queue(spec.replies.clone())];
                    if let Some(text) = spec.always.clone() {
                        rules.push(Rule::respond(move |_| Some(text.clone())));
                    }
                    Arc::new(ScriptedBackend::new(rules))
                }
            },
        };
        Ok(ModelClient::new(spec.model.clone(), backend).with_params(spec.params.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pairing_split() {
        let known = names(&["gpt5", "qwen3-4b"]);
        let p = parse_pairing("gpt5xqwen3-4b", &known).unwrap();
        assert_eq!((p.reflector.as_str(), p.inference.as_str()), ("gpt5", "qwen3-4b"));
    }

    #[test]
    fn pairing_names_containing_x() {
        let known = names(&["mixtral", "xai", "gpt5"]);
        let p = parse_pairing("mixtralxxai", &known).unwrap();
        assert_eq!((p.reflector.as_str(), p.inference.as_str()), ("mixtral", "xai"));
        assert!(parse_pairing("gpt5xunknown", &known).is_err());
        let amb = names(&["a", "axb", "b", "bxc", "c"]);
        // a | bxc  vs  axb | c
        assert!(parse_pairing("axbxc", &amb).unwrap_err().to_string().contains("ambiguous"));
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CliError, ExitKind};
use crate::federation::FederationConfig;
use crate::imaging::{PipelineKind, PipelineSpec};
use crate::model::ModelSpec;
use crate::synthdata::SynthSpec;
use crate::tta::TtaPolicy;

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generate a synthetic corpus under `<output_dir>/data`.
    Synthetic(SynthSpec),
    /// One subdirectory per class.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub train_fraction: f64,
    /// Seed for the train/test split and the client partition.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { source: DataSource::Synthetic(SynthSpec::default()), train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaSection {
    pub policy: TtaPolicy,
    pub num_runs: usize,
}

impl Default for TtaSection {
    fn default() -> Self {
        Self { policy: TtaPolicy::default(), num_runs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    pub alpha: f64,
    pub metric: String,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self { alpha: 0.05, metric: "accuracy".into() }
    }
}

/// Everything one experiment needs, archivable as a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_federation")]
    pub federation: FederationConfig,
    #[serde(default)]
    pub tta: TtaSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Two clients, Original and Preprocessed, at the default model input size.
fn default_federation() -> FederationConfig {
    let size = ModelSpec::default().input_size;
    let pipelines: BTreeMap<u32, PipelineSpec> = [
        (0, PipelineSpec::original(size).expect("valid size")),
        (1, PipelineSpec::preprocessed(size).expect("valid size")),
    ]
    .into_iter()
    .collect();
    FederationConfig::new(pipelines)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSpec::default(),
            federation: default_federation(),
            tta: TtaSection::default(),
            stats: StatsSection::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    /// Read `path` (or start from the defaults), apply `key.path=value`
    /// overrides, and resolve relative paths against the config file's
    /// directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (base, dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new(ExitKind::Usage, "config", format!("{}: {e}", p.display())))?;
                let cfg: ExperimentConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::new(ExitKind::Usage, "config", format!("{}: {e}", p.display())))?;
                (cfg, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Self::default(), PathBuf::new()),
        };
        let mut value = serde_json::to_value(&base).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| CliError::new(ExitKind::Usage, "config", format!("after overrides: {e}")))?;
        cfg.output_dir = absolute(&dir.join(&cfg.output_dir))?;
        if let DataSource::Dir(d) = &mut cfg.data.source {
            *d = absolute(&dir.join(&*d))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::new(ExitKind::Usage, "config", m));
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!("data.train_fraction {} outside (0, 1)", self.data.train_fraction));
        }
        if let DataSource::Synthetic(s) = &self.data.source {
            s.validate().map_err(|e| CliError::new(ExitKind::Usage, "config", format!("data.source.synthetic: {e}")))?;
            if s.num_classes != self.model.num_classes {
                return bad(format!("synthetic corpus has {} classes but model.num_classes is {}", s.num_classes, self.model.num_classes));
            }
        }
        self.model.validate().map_err(|e| CliError::new(ExitKind::Usage, "config", e.to_string()))?;
        self.federation.validate().map_err(|e| CliError::new(ExitKind::Usage, "config", e.to_string()))?;
        for (id, p) in &self.federation.client_pipelines {
            if p.target_size != self.model.input_size {
                return bad(format!(
                    "client {id} pipeline target_size {} differs from model.input_size {}",
                    p.target_size, self.model.input_size
                ));
            }
        }
        self.tta.policy.validate().map_err(|e| CliError::new(ExitKind::Usage, "config", e.to_string()))?;
        if self.tta.num_runs == 0 {
            return bad("tta.num_runs must be at least 1".into());
        }
        if !(self.stats.alpha > 0.0 && self.stats.alpha < 1.0) {
            return bad(format!("stats.alpha {} outside (0, 1)", self.stats.alpha));
        }
        Ok(())
    }

    /// The configured pipeline of that kind, or a default one at the model
    /// input size.
    pub fn pipeline(&self, kind: PipelineKind) -> PipelineSpec {
        self.federation
            .client_pipelines
            .values()
            .find(|p| p.kind == kind)
            .cloned()
            .unwrap_or_else(|| PipelineSpec::new(kind, self.model.input_size).expect("validated input size"))
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.output_dir.join("manifests")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.ckpt")
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::new(ExitKind::Usage, "config", format!("{}: {e}", p.display())))
}

/// Set `a.b.c` in a JSON tree. The value is parsed as JSON when it can be,
/// otherwise taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let bad = |m: String| CliError::new(ExitKind::Usage, "config", m);
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad(format!("bad override key `{key}`")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| bad(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

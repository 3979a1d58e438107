//! The single JSON document driving every subcommand.

use std::path::{Path, PathBuf};

use idaug_core::genbackend::{DeskLmConfig, RemoteConfig, TrainConfig};
use idaug_core::pipeline::GenerationSettings;
use idaug_core::promptgen::{CorpusConfig, PromptTemplate};
use idaug_core::recommenders::{BprConfig, SasRecConfig, SimGclConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub generation: GenerationSettings,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub models: ModelsSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Model training seeds. The first one also seeds every data stage.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Interaction TSV; relative paths resolve against the config file.
    pub path: PathBuf,
    #[serde(default = "default_name")]
    pub name: String,
    /// Minimum interactions per user and item; 1 keeps everything.
    #[serde(default = "default_k_core")]
    pub k_core: usize,
    #[serde(default)]
    pub split: SplitSection,
}

fn default_name() -> String {
    "dataset".into()
}

fn default_k_core() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSection {
    RandomHoldout {
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    LeaveLastTwo,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_val_fraction() -> f64 {
    0.1
}

impl Default for SplitSection {
    fn default() -> Self {
        Self::RandomHoldout {
            test_fraction: default_test_fraction(),
            val_fraction: default_val_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSection {
    Desk(DeskBackend),
    Remote(RemoteBackend),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskBackend {
    #[serde(default)]
    pub model: DeskLmConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Items the generator must emit before it may stop. Matches the
    /// default `filter.min_valid`; a corpus of single-item targets
    /// otherwise teaches the model to stop after one item.
    #[serde(default = "default_min_items")]
    pub min_items_before_eos: usize,
    /// Start fine-tuning from this checkpoint stem instead of a fresh model.
    #[serde(default)]
    pub base_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteBackend {
    #[serde(default)]
    pub client: RemoteConfig,
    /// Response cache directory; defaults to `<out>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Fail on cache misses instead of calling the endpoint.
    #[serde(default)]
    pub replay_only: bool,
}

fn default_min_items() -> usize {
    2
}

impl Default for DeskBackend {
    fn default() -> Self {
        Self {
            model: DeskLmConfig::default(),
            train: TrainConfig::default(),
            min_items_before_eos: default_min_items(),
            base_checkpoint: None,
        }
    }
}

impl Default for BackendSection {
    fn default() -> Self {
        Self::Desk(DeskBackend::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub min_valid: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self { min_valid: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Cap ratios for the size sweep; each yields its own augmented file
    /// next to the uncapped one.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub bpr: Option<BprConfig>,
    pub lightgcn: Option<SimGclConfig>,
    pub simgcl: Option<SimGclConfig>,
    pub sasrec: Option<SasRecConfig>,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            bpr: Some(BprConfig::default()),
            lightgcn: None,
            simgcl: None,
            sasrec: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Activity groups for the per-group report; none when absent.
    pub groups: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: idaug_core::eval::DEFAULT_KS.to_vec(),
            groups: None,
        }
    }
}

/// Tagged enums buffer their content, which hides the failing field from
/// the path tracker; deserializing the variant body directly recovers it.
fn backend_error(text: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    let mut body = value.get("backend")?.as_object()?.clone();
    let kind = body.remove("kind")?;
    let body = serde_json::Value::Object(body);
    let path = |e: serde_path_to_error::Error<serde_json::Error>| {
        let at = e.path().to_string();
        format!("at `backend.{at}`: {}", e.into_inner())
    };
    match kind.as_str()? {
        "desk" => serde_path_to_error::deserialize::<_, DeskBackend>(body)
            .err()
            .map(path),
        "remote" => serde_path_to_error::deserialize::<_, RemoteBackend>(body)
            .err()
            .map(path),
        _ => None,
    }
}

impl PipelineConfig {
    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "backend" {
                if let Some(inner) = backend_error(text) {
                    return inner;
                }
            }
            format!("at `{path}`: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| CliError::user("config", format!("{}: {e}", path.display())))?;
        if cfg.dataset.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset.path = dir.join(&cfg.dataset.path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.seeds.is_empty() {
            return Err("seeds must list at least one seed".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err("eval.ks must be nonempty and positive".into());
        }
        if self.dataset.k_core == 0 {
            return Err("dataset.k_core must be at least 1".into());
        }
        if self.generation.generations_per_user == 0 {
            return Err("generation.generations_per_user must be at least 1".into());
        }
        if let Some(r) = self
            .augment
            .ratios
            .iter()
            .find(|r| !(0.0..1.0).contains(*r))
        {
            return Err(format!("augment.ratios: {r} is outside [0, 1)"));
        }
        self.corpus.validate().map_err(|e| format!("corpus: {e}"))?;
        Ok(())
    }

    pub fn master_seed(&self) -> u64 {
        self.seeds[0]
    }

    /// Seed for one data stage, derived from the first seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.master_seed()
            .wrapping_add(stage.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    /// sha256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

use std::path::{Path, PathBuf};

use controlrec::augment::ClientConfig;
use controlrec::data::{CatalogConfig, ExampleOptions};
use controlrec::eval::EvalOptions;
use controlrec::model::ModelConfig;
use controlrec::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// JSON-lines trigger templates; the built-in triggers when absent.
    pub triggers: Option<PathBuf>,
    pub per_group: usize,
    pub seen: usize,
    pub zeroshot: usize,
    pub client: ClientConfig,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            triggers: None,
            per_group: 100,
            seen: 90,
            zeroshot: 5,
            client: ClientConfig::default(),
        }
    }
}

fn default_model() -> ModelConfig {
    ModelConfig::small(0)
}

fn default_eval() -> EvalOptions {
    EvalOptions::default()
}

/// One run: where files go and every knob, under a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub catalog: CatalogConfig,
    #[serde(default)]
    pub prompts: PromptConfig,
    /// `vocab_size` is replaced by the corpus vocabulary size.
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub examples: ExampleOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval")]
    pub eval: EvalOptions,
}

impl RunConfig {
    #[cfg(test)]
    pub fn with_out_dir(out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed,
            out_dir: out_dir.into(),
            catalog: CatalogConfig::default(),
            prompts: PromptConfig::default(),
            model: default_model(),
            examples: ExampleOptions::default(),
            train: TrainConfig::default(),
            eval: default_eval(),
        }
    }

    /// Reads a config; relative paths are taken from the config's directory.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Input(format!(
                "config {}: schema version {} is not supported (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        for (section, seed) in [
            ("train", cfg.train.seed),
            ("eval", cfg.eval.seed),
            ("examples", cfg.examples.seed),
        ] {
            if seed != 0 && seed != cfg.seed {
                return Err(CliError::Input(format!(
                    "config {}: {section}.seed is set; give the seed at the top level only",
                    path.display()
                )));
            }
        }
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(t) = &cfg.prompts.triggers {
            cfg.prompts.triggers = Some(base.join(t));
        }
        cfg.train.seed = cfg.seed;
        cfg.eval.seed = cfg.seed;
        cfg.examples.seed = cfg.seed;
        cfg.eval.example = cfg.examples.clone();
        cfg.train.validate().map_err(|e| CliError::Input(e.to_string()))?;
        ModelConfig {
            vocab_size: controlrec::model::special::RESERVED,
            ..cfg.model.clone()
        }
        .validate()
        .map_err(|e| CliError::Input(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.out_dir.join("catalog.jsonl")
    }

    pub fn registry_path(&self) -> PathBuf {
        self.out_dir.join("registry.jsonl")
    }

    pub fn history_path(&self) -> PathBuf {
        self.out_dir.join("history.jsonl")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("model.ckpt")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn eval_path(&self, split: &str) -> PathBuf {
        self.out_dir.join(format!("eval-{split}.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("run.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), r#"{"version": 1, "seed": 7, "out_dir": "out"}"#);
        let c = RunConfig::load(&p, None).unwrap();
        assert_eq!(c.out_dir, d.path().join("out"));
        assert_eq!((c.train.seed, c.eval.seed, c.examples.seed), (7, 7, 7));
        assert_eq!(c.prompts.per_group, 100);
        assert_eq!(c.model.d_model, 64);
        assert_eq!(RunConfig::load(&p, Some(9)).unwrap().train.seed, 9);
    }

    #[test]
    fn seed_is_mandatory_and_unknown_fields_rejected() {
        let d = tempfile::tempdir().unwrap();
        for body in [
            r#"{"version": 1, "out_dir": "out"}"#,
            r#"{"version": 1, "seed": 1, "out_dir": "out", "extra": 3}"#,
            r#"{"version": 2, "seed": 1, "out_dir": "out"}"#,
            r#"{"version": 1, "seed": 1, "out_dir": "out", "train": {"seed": 4}}"#,
            r#"{"version": 1, "seed": 1, "out_dir": "out", "train": {"peak_lr": -1}}"#,
        ] {
            let p = write(d.path(), body);
            assert!(matches!(RunConfig::load(&p, None), Err(CliError::Input(_))), "{body}");
        }
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::with_out_dir("x", 3);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
    }
}

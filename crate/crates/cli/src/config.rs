//! TOML run configuration for `emo train`.
//!
//! ```toml
//! output_dir = "runs/hier-dc"
//!
//! [data]
//! manifests = ["corpus/manifest.jsonl"]
//!
//! [train]
//! variant = "hier-dc"
//! max_epochs = 50
//!
//! [train.schedule]
//! kind = "plateau_decay"
//! initial_lr = 0.001
//! decay_factor = 0.85
//! threshold = 1e-5
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use emo_core::data::{CorpusRecipe, Split, DEFAULT_MAX_FRAMES};
use emo_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifests: Vec<PathBuf>,
    pub train_split: Split,
    pub valid_split: Split,
    pub max_frames: usize,
    /// Subsample every recipe corpus to the size of the smallest.
    pub equalize: bool,
    /// Seed for recipe subsampling; defaults to the training seed.
    pub mix_seed: Option<u64>,
    /// Per-corpus label usage. Empty means every corpus with all its labels.
    pub recipe: Vec<CorpusRecipe>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifests: Vec::new(),
            train_split: Split::Train,
            valid_split: Split::Valid,
            max_frames: DEFAULT_MAX_FRAMES,
            equalize: false,
            mix_seed: None,
            recipe: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads, parses, resolves relative paths and validates.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.data.manifests.iter_mut().for_each(fix);
    }

    /// Every problem in the configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir must not be empty".into());
        }
        if self.data.manifests.is_empty() {
            out.push("data.manifests must list at least one manifest".into());
        }
        if self.data.max_frames == 0 {
            out.push("data.max_frames must be >= 1".into());
        }
        if self.data.train_split == self.data.valid_split {
            out.push("data.train_split and data.valid_split must differ".into());
        }
        let mut seen = HashSet::new();
        for r in &self.data.recipe {
            if !seen.insert(r.corpus.as_str()) {
                out.push(format!("data.recipe lists corpus `{}` twice", r.corpus));
            }
            if !r.use_cont && !r.use_disc {
                out.push(format!("data.recipe entry `{}` uses no labels", r.corpus));
            }
            if r.max_examples == Some(0) {
                out.push(format!("data.recipe entry `{}` has max_examples = 0", r.corpus));
            }
        }
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        let problems = self.problems();
        if problems.is_empty() {
            return Ok(());
        }
        let mut msg = format!("{} configuration error(s):", problems.len());
        for p in problems {
            msg.push_str("\n  - ");
            msg.push_str(&p);
        }
        Err(CliError::Usage(msg))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }
}

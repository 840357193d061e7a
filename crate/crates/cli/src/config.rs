//! Run configuration: one JSON document plus command-line overrides.

use std::path::{Path, PathBuf};

use adajudge_core::data::{generate_suite, load_pairs, Dataset, EmbeddingStore, SyntheticSpec};
use adajudge_core::{Error, Result, TrainConfig};
use serde::{Deserialize, Serialize};

pub const STORE_FILE: &str = "embeddings.adje";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

/// Where pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory written by `adajudge gen`.
    Dir(PathBuf),
    Files { store: PathBuf, pairs: PathBuf },
    /// Generated in memory.
    Synthetic(Vec<SyntheticSpec>),
}

impl DataSource {
    /// Fails if a referenced path does not exist.
    pub fn validate(&self) -> Result<()> {
        let exists = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("dataset path {} does not exist", p.display())))
            }
        };
        match self {
            DataSource::Dir(dir) => {
                exists(&dir.join(STORE_FILE))?;
                exists(&dir.join(PAIRS_FILE))
            }
            DataSource::Files { store, pairs } => {
                exists(store)?;
                exists(pairs)
            }
            DataSource::Synthetic(specs) => {
                if specs.is_empty() {
                    return Err(Error::Config("synthetic data source lists no specs".into()));
                }
                specs.iter().try_for_each(SyntheticSpec::validate)
            }
        }
    }

    pub fn load(&self, d: usize) -> Result<Dataset> {
        let (store, pairs) = match self {
            DataSource::Dir(dir) => (
                EmbeddingStore::load(dir.join(STORE_FILE), Some(d))?,
                load_pairs(dir.join(PAIRS_FILE))?,
            ),
            DataSource::Files { store, pairs } => (EmbeddingStore::load(store, Some(d))?, load_pairs(pairs)?),
            DataSource::Synthetic(specs) => {
                if let Some(s) = specs.iter().find(|s| s.d != d) {
                    return Err(Error::Dimension {
                        name: format!("synthetic spec `{}`", s.regime),
                        expected: vec![d],
                        found: vec![s.d],
                    });
                }
                generate_suite(specs)?
            }
        };
        Dataset::new(store, pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    /// Evaluation pairs. Without it, evaluation commands hold out the last
    /// `holdout` fraction of every domain from `data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<DataSource>,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_holdout() -> f64 {
    0.2
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: None,
            test_data: None,
            holdout: default_holdout(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::from_file)
    }

    /// Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let warnings = self.train.validate()?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout must lie in [0, 1), got {}", self.holdout)));
        }
        for src in self.data.iter().chain(&self.test_data) {
            src.validate()?;
        }
        Ok(warnings)
    }

    pub fn data(&self) -> Result<&DataSource> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("no dataset given (use --data or the `data` config key)".into()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }

    /// Training and evaluation sets. Without `test_data`, the last `holdout`
    /// fraction of each domain (in manifest order) is held out.
    pub fn split(&self) -> Result<(Dataset, Dataset)> {
        let d = self.train.model.d;
        let all = self.data()?.load(d)?;
        if let Some(test) = &self.test_data {
            return Ok((all, test.load(d)?));
        }
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for domain in all.domains() {
            let idx: Vec<usize> = (0..all.pairs.len()).filter(|&i| all.pairs[i].domain == domain).collect();
            let n_test = (idx.len() as f64 * self.holdout).round() as usize;
            let cut = idx.len() - n_test;
            train_idx.extend(&idx[..cut]);
            test_idx.extend(&idx[cut..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        Ok((all.select(train_idx), all.select(test_idx)))
    }
}

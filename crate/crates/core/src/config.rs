//! Run configuration: a TOML file with one section per module. Unknown keys
//! are rejected. The canonical text (the parsed configuration written back
//! out) and its SHA-256 hash are embedded in every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::DemyelinationParams;
use crate::phantom::{PhantomSpec, DEFAULT_CONTROLS, DEFAULT_PATIENTS};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub patients: usize,
    pub controls: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            patients: DEFAULT_PATIENTS,
            controls: DEFAULT_CONTROLS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossValidationConfig {
    pub k: usize,
}

impl Default for CrossValidationConfig {
    fn default() -> Self {
        Self { k: 3 }
    }
}

/// Output locations, relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds phantom generation, fold assignment and training.
    pub seed: u64,
    pub cohort: CohortConfig,
    pub phantom: PhantomSpec,
    pub train: TrainConfig,
    pub demyelination: DemyelinationParams,
    pub cross_validation: CrossValidationConfig,
    pub paths: PathsConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 2019,
            cohort: CohortConfig::default(),
            phantom: PhantomSpec::default(),
            train: TrainConfig::default(),
            demyelination: DemyelinationParams::default(),
            cross_validation: CrossValidationConfig::default(),
            paths: PathsConfig::default(),
            base_dir: PathBuf::from("."),
        };
        cfg.propagate();
        cfg
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.base_dir = PathBuf::from(".");
        cfg.propagate();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.propagate();
        self
    }

    fn propagate(&mut self) {
        self.phantom.seed = self.seed;
        self.train.seed = self.seed;
        self.phantom.demyelination = self.demyelination;
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be <= {}", i64::MAX)));
        }
        if self.cohort.patients + self.cohort.controls == 0 {
            return Err(Error::Config(
                "cohort must contain at least one subject".into(),
            ));
        }
        if self.cross_validation.k < 2 {
            return Err(Error::Config(format!(
                "cross_validation.k must be >= 2, got {}",
                self.cross_validation.k
            )));
        }
        for (name, p) in [
            ("data_dir", &self.paths.data_dir),
            ("checkpoint_dir", &self.paths.checkpoint_dir),
            ("report_dir", &self.paths.report_dir),
        ] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("paths.{name} is empty")));
            }
        }
        self.phantom.validate()?;
        self.train.validate()?;
        self.demyelination.validate()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.paths.data_dir)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint_dir)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.resolve(&self.paths.report_dir)
    }

    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}

/// Config hash and seed stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.canonical_text()).unwrap();
        assert_eq!(back.canonical_text(), cfg.canonical_text());
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(back.train.seed, 2019);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml_str(
            "seed = 7\n[train]\nepochs = 3\n[cohort]\npatients = 1\ncontrols = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.phantom.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.cohort.patients, 1);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1\n",
            "[train]\nepoch = 3\n",
            "[unknown]\n",
            "[train.sketcher]\nwidth = 2\n",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.kind(), "config", "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nepochs = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[cross_validation]\nk = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlr_sketcher = -1.0\n").is_err());
    }

    #[test]
    fn seed_override_changes_hash() {
        let a = RunConfig::default();
        let b = RunConfig::default().with_seed(5);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.phantom.seed, 5);
    }
}

//! JSON documents: the dataset manifest read at start-up and the per-round
//! manifests written after every committed round.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::reliability::{ConfidenceVariant, DEFAULT_TAU_C};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub domain: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

fn default_epochs() -> u32 {
    30
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_b: usize,
    pub r_max: u32,
    #[serde(default = "default_tau_c")]
    pub tau_c: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub semi_supervised: bool,
    #[serde(default)]
    pub confidence_variant: ConfidenceVariant,
    /// Overrides the lexicographically first sample as the one-shot seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_sample: Option<String>,
    /// Only samples with this domain tag form the target set; all samples when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_domain: Option<String>,
    #[serde(default = "default_epochs")]
    pub init_epochs: u32,
    #[serde(default = "default_epochs")]
    pub stage1_epochs: u32,
    #[serde(default = "default_epochs")]
    pub stage3_epochs: u32,
}

fn default_tau_c() -> f64 {
    DEFAULT_TAU_C
}

impl RunConfig {
    pub fn new(n_b: usize, r_max: u32) -> Self {
        RunConfig {
            n_b,
            r_max,
            tau_c: DEFAULT_TAU_C,
            seed: 0,
            semi_supervised: true,
            confidence_variant: ConfidenceVariant::Mean,
            first_sample: None,
            target_domain: None,
            init_epochs: default_epochs(),
            stage1_epochs: default_epochs(),
            stage3_epochs: default_epochs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_b == 0 {
            return Err(Error::Budget("n_b must be at least 1".into()));
        }
        if self.r_max == 0 {
            return Err(Error::Budget("r_max must be at least 1".into()));
        }
        if !self.tau_c.is_finite() || self.tau_c <= 0.0 {
            return Err(Error::Domain(format!("tau_c {} must be positive", self.tau_c)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<SampleEntry>,
    pub config: RunConfig,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut m: DatasetManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        m.resolve_paths(base);
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Makes relative image and label paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for s in &mut self.samples {
            if s.image.is_relative() {
                s.image = base.join(&s.image);
            }
            if let Some(l) = &mut s.label {
                if l.is_relative() {
                    *l = base.join(&*l);
                }
            }
        }
    }

    /// Samples of the target set, sorted by id.
    pub fn target_samples(&self) -> Vec<&SampleEntry> {
        let mut out: Vec<&SampleEntry> = self
            .samples
            .iter()
            .filter(|s| match &self.config.target_domain {
                Some(d) => &s.domain == d,
                None => true,
            })
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    pub fn samples_in_domain(&self, domain: &str) -> Vec<&SampleEntry> {
        let mut out: Vec<&SampleEntry> = self.samples.iter().filter(|s| s.domain == domain).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

/// Where stage 3 starts from; recorded in every round manifest.
pub const STAGE3_INIT: &str = "stage1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub round: u32,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub pseudo: Vec<String>,
    pub excluded: Vec<String>,
    pub score_table_path: Option<String>,
    pub model_ref: String,
    pub checksums: BTreeMap<String, String>,
    pub r_max: u32,
    pub n_b: usize,
    pub n_su: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub batch: Vec<String>,
    #[serde(default)]
    pub shortfall: bool,
    #[serde(default)]
    pub selection_path: Option<String>,
    #[serde(default)]
    pub reliability_table_path: Option<String>,
    #[serde(default)]
    pub stage1_model_ref: Option<String>,
    pub stage3_init: String,
    /// Label file of every labeled sample.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl RoundManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

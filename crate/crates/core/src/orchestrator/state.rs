use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::manifest::{RoundManifest, SampleEntry, STAGE3_INIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Unlabeled,
    Queried,
    PseudoLabeled,
    ExcludedFromQuery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub domain_tag: String,
    pub image_ref: PathBuf,
    pub label_ref: Option<PathBuf>,
    pub status: SampleStatus,
}

/// Set bookkeeping between rounds. `r` counts completed query rounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundState {
    pub r: u32,
    pub r_max: u32,
    pub n_b: usize,
    pub n_al: usize,
    pub n_su: usize,
    /// Insertion order: the one-shot sample, then each round's batch.
    pub labeled: Vec<String>,
    /// Sorted by id.
    pub unlabeled: Vec<String>,
    /// This round's pseudo-labeled samples, a subset of `unlabeled`.
    pub pseudo: Vec<String>,
    pub excluded: BTreeSet<String>,
    pub rng_seed: u64,
    /// Label file of every labeled sample.
    pub labels: BTreeMap<String, String>,
    pub model_ref: String,
}

impl RoundState {
    pub fn check_invariants(&self) -> Result<()> {
        let unl: BTreeSet<&str> = self.unlabeled.iter().map(String::as_str).collect();
        if let Some(both) = self.labeled.iter().find(|id| unl.contains(id.as_str())) {
            return Err(Error::Domain(format!("{both} is both labeled and unlabeled")));
        }
        if let Some(p) = self.pseudo.iter().find(|id| !unl.contains(id.as_str())) {
            return Err(Error::Domain(format!("pseudo-labeled {p} is not unlabeled")));
        }
        if let Some(l) = self.labeled.iter().find(|id| !self.labels.contains_key(*id)) {
            return Err(Error::Domain(format!("labeled {l} has no label file")));
        }
        Ok(())
    }

    /// Unlabeled samples still open to querying.
    pub fn queryable(&self) -> impl Iterator<Item = &String> {
        self.unlabeled.iter().filter(|id| !self.excluded.contains(*id))
    }

    pub fn records(&self, samples: &[&SampleEntry]) -> Vec<SampleRecord> {
        let pseudo: BTreeSet<&str> = self.pseudo.iter().map(String::as_str).collect();
        samples
            .iter()
            .map(|s| {
                let label_ref = self.labels.get(&s.id).map(PathBuf::from);
                let status = if label_ref.is_some() {
                    SampleStatus::Queried
                } else if pseudo.contains(s.id.as_str()) {
                    SampleStatus::PseudoLabeled
                } else if self.excluded.contains(&s.id) {
                    SampleStatus::ExcludedFromQuery
                } else {
                    SampleStatus::Unlabeled
                };
                SampleRecord {
                    sample_id: s.id.clone(),
                    domain_tag: s.domain.clone(),
                    image_ref: s.image.clone(),
                    label_ref,
                    status,
                }
            })
            .collect()
    }

    pub(crate) fn from_manifest(m: &RoundManifest) -> Self {
        RoundState {
            r: m.round,
            r_max: m.r_max,
            n_b: m.n_b,
            n_al: m.n_b * m.r_max as usize,
            n_su: m.n_su,
            labeled: m.labeled.clone(),
            unlabeled: m.unlabeled.clone(),
            pseudo: m.pseudo.clone(),
            excluded: m.excluded.iter().cloned().collect(),
            rng_seed: m.rng_seed,
            labels: m.labels.clone(),
            model_ref: m.model_ref.clone(),
        }
    }

    pub(crate) fn to_manifest(&self) -> RoundManifest {
        RoundManifest {
            round: self.r,
            labeled: self.labeled.clone(),
            unlabeled: self.unlabeled.clone(),
            pseudo: self.pseudo.clone(),
            excluded: self.excluded.iter().cloned().collect(),
            score_table_path: None,
            model_ref: self.model_ref.clone(),
            checksums: BTreeMap::new(),
            r_max: self.r_max,
            n_b: self.n_b,
            n_su: self.n_su,
            rng_seed: self.rng_seed,
            batch: Vec::new(),
            shortfall: false,
            selection_path: None,
            reliability_table_path: None,
            stage1_model_ref: None,
            stage3_init: STAGE3_INIT.to_string(),
            labels: self.labels.clone(),
        }
    }
}

/// Steps of one round, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed = 1,
    Score,
    Select,
    Annotate,
    Move,
    FitSupervised,
    SelectReliable,
    PseudoLabel,
    FitSemiSupervised,
    Exclude,
    Commit,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Embed,
        Stage::Score,
        Stage::Select,
        Stage::Annotate,
        Stage::Move,
        Stage::FitSupervised,
        Stage::SelectReliable,
        Stage::PseudoLabel,
        Stage::FitSemiSupervised,
        Stage::Exclude,
        Stage::Commit,
    ];

    pub fn is_semi_supervised(self) -> bool {
        matches!(
            self,
            Stage::SelectReliable | Stage::PseudoLabel | Stage::FitSemiSupervised
        )
    }
}

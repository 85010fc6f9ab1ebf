//! Trainer and oracle contracts, plus a subprocess trainer speaking the JSON
//! job protocol.
//!
//! A job file is a JSON object with an `op` (`pretrained`, `fit`, `embed` or
//! `predict`) and an `out` path. The command is invoked with the job file
//! path as its last argument and must exit 0 after writing `out`: a model
//! file for `pretrained` and `fit`, a 1-D tensor for `embed`, a `C×H×W×D`
//! tensor for `predict`.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::fsutil::write_json;
use crate::tensor::{read_tensor, EmbeddingVec, ProbVolume};

pub type AdapterError = Box<dyn std::error::Error + Send + Sync>;
pub type AdapterResult<T> = std::result::Result<T, AdapterError>;

/// Image and label files of one training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitJob {
    /// Warm start; `None` trains from scratch.
    pub init: Option<PathBuf>,
    pub labeled: Vec<TrainPair>,
    pub pseudo: Vec<TrainPair>,
    pub epochs: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub image: PathBuf,
}

/// Segmentation learner behind the round loop. Must be deterministic given
/// its inputs and seed; `embed` returns a pooled vector whose length is fixed
/// for the whole run.
pub trait TrainerAdapter: Sync {
    /// Writes the pre-adaptation model (pretrained encoder, fresh decoder).
    fn pretrained(&self, out: &Path) -> AdapterResult<()>;
    fn fit(&self, job: &FitJob, out: &Path) -> AdapterResult<()>;
    fn embed(&self, model: &Path, sample: &SampleRef, encoder_round: u32) -> AdapterResult<EmbeddingVec>;
    fn predict(&self, model: &Path, sample: &SampleRef) -> AdapterResult<ProbVolume>;
}

/// Annotation source. Idempotent.
pub trait OracleAdapter: Sync {
    fn annotate(&self, samples: &[SampleRef]) -> AdapterResult<Vec<PathBuf>>;
}

/// Oracle answering from ground-truth label files known up front.
#[derive(Debug, Clone, Default)]
pub struct FileOracle {
    labels: std::collections::HashMap<String, PathBuf>,
}

impl FileOracle {
    pub fn new(labels: impl IntoIterator<Item = (String, PathBuf)>) -> Self {
        FileOracle {
            labels: labels.into_iter().collect(),
        }
    }
}

impl OracleAdapter for FileOracle {
    fn annotate(&self, samples: &[SampleRef]) -> AdapterResult<Vec<PathBuf>> {
        samples
            .iter()
            .map(|s| {
                let path = self
                    .labels
                    .get(&s.id)
                    .ok_or_else(|| format!("no ground truth for {}", s.id))?;
                if !path.exists() {
                    return Err(format!("ground truth {} missing", path.display()).into());
                }
                Ok(path.clone())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum TrainerJob {
    Pretrained {
        out: PathBuf,
    },
    Fit {
        #[serde(flatten)]
        job: FitJob,
        out: PathBuf,
    },
    Embed {
        model: PathBuf,
        sample: SampleRef,
        encoder_round: u32,
        out: PathBuf,
    },
    Predict {
        model: PathBuf,
        sample: SampleRef,
        out: PathBuf,
    },
}

/// Runs an external trainer command once per job.
#[derive(Debug, Clone)]
pub struct CommandTrainer {
    program: PathBuf,
    args: Vec<String>,
    scratch: PathBuf,
}

impl CommandTrainer {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, scratch: impl Into<PathBuf>) -> Self {
        CommandTrainer {
            program: program.into(),
            args,
            scratch: scratch.into(),
        }
    }

    fn run(&self, job: &TrainerJob, tag: &str) -> AdapterResult<()> {
        let job_path = self.scratch.join(format!("{tag}.job.json"));
        write_json(&job_path, job)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&job_path)
            .status()
            .map_err(|e| format!("cannot launch {}: {e}", self.program.display()))?;
        if !status.success() {
            return Err(format!("trainer job {tag} exited with {status}").into());
        }
        Ok(())
    }

    fn out_path(&self, tag: &str) -> PathBuf {
        self.scratch.join(format!("{tag}.asft"))
    }
}

impl TrainerAdapter for CommandTrainer {
    fn pretrained(&self, out: &Path) -> AdapterResult<()> {
        self.run(&TrainerJob::Pretrained { out: out.to_path_buf() }, "pretrained")?;
        ensure_exists(out)
    }

    fn fit(&self, job: &FitJob, out: &Path) -> AdapterResult<()> {
        self.run(
            &TrainerJob::Fit {
                job: job.clone(),
                out: out.to_path_buf(),
            },
            "fit",
        )?;
        ensure_exists(out)
    }

    fn embed(&self, model: &Path, sample: &SampleRef, encoder_round: u32) -> AdapterResult<EmbeddingVec> {
        let tag = format!("embed-{}", sample.id);
        let out = self.out_path(&tag);
        self.run(
            &TrainerJob::Embed {
                model: model.to_path_buf(),
                sample: sample.clone(),
                encoder_round,
                out: out.clone(),
            },
            &tag,
        )?;
        Ok(EmbeddingVec::from_tensor(
            &sample.id,
            encoder_round,
            &read_tensor(&out)?,
        )?)
    }

    fn predict(&self, model: &Path, sample: &SampleRef) -> AdapterResult<ProbVolume> {
        let tag = format!("predict-{}", sample.id);
        let out = self.out_path(&tag);
        self.run(
            &TrainerJob::Predict {
                model: model.to_path_buf(),
                sample: sample.clone(),
                out: out.clone(),
            },
            &tag,
        )?;
        Ok(ProbVolume::new(&sample.id, read_tensor(&out)?)?)
    }
}

fn ensure_exists(p: &Path) -> AdapterResult<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(format!("trainer reported success but {} was not written", p.display()).into())
    }
}

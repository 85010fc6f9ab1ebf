//! The round loop: one-shot initialization, then query, annotate and
//! fine-tune until the annotation budget is spent.
//!
//! Work directory layout (all manifest paths are relative to it):
//!
//! ```text
//! models/pretrained.model       pre-adaptation model
//! models/r000.model             fit on the one-shot sample
//! models/rNNN_stage1.model      supervised fit of round N
//! models/rNNN.model             semi-supervised fit of round N
//! embeddings/e0/<id>.asft       round-0 embeddings, written once
//! labels/<id>.asft              oracle annotations
//! rounds/round_NNN.json         committed round manifests
//! rounds/rNNN/                  per-round artifacts and the progress journal
//! ```
//!
//! Every stage persists its outputs before the journal records it as done,
//! so a killed process resumes at the first unfinished stage and produces
//! the same files as an uninterrupted run.

pub mod adapter;
pub mod manifest;
pub mod state;
pub mod strategy;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_json, read_string, sha256_file, write_atomic, write_json};
use crate::query::{score_round, select_top, QueryInputs};
use crate::reliability::{score_confidences, select_reliable, SelectionConfig};
use crate::scores::{fmt_g9, parse_f64, ScoreVector};
use crate::tensor::{label_tensor, read_tensor, write_tensor, EmbeddingVec, ProbVolume};

use adapter::{AdapterError, FitJob, OracleAdapter, SampleRef, TrainPair, TrainerAdapter};
use manifest::{DatasetManifest, RoundManifest, SampleEntry};
pub use state::{RoundState, SampleRecord, SampleStatus, Stage};
use strategy::{QueryContext, QueryStrategy};

pub const PRETRAINED_MODEL: &str = "models/pretrained.model";
pub const SELECTION_HEADER: &str = "sample_id,score,round";

pub fn round_manifest_path(round: u32) -> String {
    format!("rounds/round_{round:03}.json")
}

fn round_dir(round: u32) -> String {
    format!("rounds/r{round:03}")
}

fn model_path(round: u32) -> String {
    format!("models/r{round:03}.model")
}

fn stage1_model_path(round: u32) -> String {
    format!("models/r{round:03}_stage1.model")
}

fn e0_path(id: &str) -> String {
    format!("embeddings/e0/{id}.asft")
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one (round, stage) pair of a run.
pub fn stage_seed(seed: u64, round: u32, stage: Stage) -> u64 {
    splitmix64(seed ^ splitmix64(((round as u64) << 8) | stage as u64))
}

/// Writes `sample_id,score,round` rows in the given order.
pub fn selection_to_csv(scores: &ScoreVector, round: u32) -> String {
    let mut out = String::from(SELECTION_HEADER);
    out.push('\n');
    for (id, v) in scores.entries() {
        let _ = writeln!(out, "{id},{},{round}", fmt_g9(*v));
    }
    out
}

pub fn selection_from_csv(text: &str) -> Result<ScoreVector> {
    let mut lines = text.lines();
    if lines.next() != Some(SELECTION_HEADER) {
        return Err(Error::Domain("unexpected selection table header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Domain(format!("selection row {line:?} has {} fields", f.len())));
            }
            Ok((f[0].to_string(), parse_f64(f[1], "score")?))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(ScoreVector::new)
}

/// Stages finished so far in an uncommitted round.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Journal {
    round: u32,
    done: Option<Stage>,
    #[serde(default)]
    batch: Vec<String>,
    #[serde(default)]
    shortfall: bool,
    #[serde(default)]
    selected: Vec<String>,
}

impl Journal {
    fn finished(&self, stage: Stage) -> bool {
        self.done.is_some_and(|d| d >= stage)
    }
}

/// Runs Algorithm-1 style rounds inside one work directory.
pub struct Orchestrator<'a> {
    work_dir: PathBuf,
    dataset: DatasetManifest,
    samples: HashMap<String, SampleEntry>,
    trainer: &'a dyn TrainerAdapter,
    oracle: &'a dyn OracleAdapter,
    strategy: &'a dyn QueryStrategy,
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        work_dir: impl Into<PathBuf>,
        dataset: DatasetManifest,
        trainer: &'a dyn TrainerAdapter,
        oracle: &'a dyn OracleAdapter,
        strategy: &'a dyn QueryStrategy,
    ) -> Result<Self> {
        dataset.config.validate()?;
        let samples = dataset
            .target_samples()
            .into_iter()
            .map(|s| (s.id.clone(), s.clone()))
            .collect();
        Ok(Orchestrator {
            work_dir: work_dir.into(),
            dataset,
            samples,
            trainer,
            oracle,
            strategy,
        })
    }

    pub fn work_dir(&self) -> &Path {
        &self.work_dir
    }

    pub fn dataset(&self) -> &DatasetManifest {
        &self.dataset
    }

    /// Absolute path of a work-directory relative reference.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.work_dir.join(rel)
    }

    fn sample_ref(&self, id: &str) -> Result<SampleRef> {
        let s = self
            .samples
            .get(id)
            .ok_or_else(|| Error::Pairing(format!("{id} is not a target sample")))?;
        Ok(SampleRef {
            id: s.id.clone(),
            image: s.image.clone(),
        })
    }

    fn adapter_err(round: u32) -> impl Fn(AdapterError) -> Error {
        move |e| Error::Adapter {
            round,
            msg: e.to_string(),
        }
    }

    /// Round 0: pretrained model, cached round-0 embeddings, the one-shot
    /// annotation and the first fit. Returns the existing state when round 0
    /// is already committed.
    pub fn initialize(&self) -> Result<RoundState> {
        let cfg = &self.dataset.config;
        let target = self.dataset.target_samples();
        let needed = 1 + cfg.n_b * cfg.r_max as usize;
        if target.len() < needed {
            return Err(Error::Budget(format!(
                "{} target samples, need at least {needed}",
                target.len()
            )));
        }
        let manifest_path = self.resolve(&round_manifest_path(0));
        if manifest_path.exists() {
            return self.load_round(0);
        }
        let aerr = Self::adapter_err(0);

        let pretrained = self.resolve(PRETRAINED_MODEL);
        if !pretrained.exists() {
            self.trainer.pretrained(&pretrained).map_err(&aerr)?;
        }
        target
            .par_iter()
            .map(|s| {
                let path = self.resolve(&e0_path(&s.id));
                if path.exists() {
                    return Ok(());
                }
                let e = self
                    .trainer
                    .embed(&pretrained, &self.sample_ref(&s.id)?, 0)
                    .map_err(&aerr)?;
                write_tensor(&e.to_tensor(), &path)
            })
            .collect::<Result<Vec<()>>>()?;

        let first = match &cfg.first_sample {
            Some(id) => {
                if !self.samples.contains_key(id) {
                    return Err(Error::Pairing(format!("first sample {id} is not a target sample")));
                }
                id.clone()
            }
            None => target[0].id.clone(),
        };
        let mut labels = BTreeMap::new();
        labels.insert(first.clone(), self.annotate(std::slice::from_ref(&first), 0)?.remove(0));

        let model_ref = model_path(0);
        let job = FitJob {
            init: Some(pretrained),
            labeled: self.train_pairs(std::slice::from_ref(&first), &labels)?,
            pseudo: Vec::new(),
            epochs: cfg.init_epochs,
            seed: stage_seed(cfg.seed, 0, Stage::FitSupervised),
        };
        self.trainer.fit(&job, &self.resolve(&model_ref)).map_err(&aerr)?;

        let state = RoundState {
            r: 0,
            r_max: cfg.r_max,
            n_b: cfg.n_b,
            n_al: cfg.n_b * cfg.r_max as usize,
            n_su: 0,
            labeled: vec![first.clone()],
            unlabeled: target.iter().map(|s| s.id.clone()).filter(|id| *id != first).collect(),
            pseudo: Vec::new(),
            excluded: Default::default(),
            rng_seed: cfg.seed,
            labels,
            model_ref,
        };
        state.check_invariants()?;
        let mut m = state.to_manifest();
        let mut files: Vec<String> = vec![PRETRAINED_MODEL.into(), m.model_ref.clone()];
        files.extend(m.labels.values().cloned());
        files.extend(target.iter().map(|s| e0_path(&s.id)));
        m.checksums = self.checksums(&files)?;
        m.write(&manifest_path)?;
        Ok(state)
    }

    /// Reads a committed round manifest and verifies its checksums.
    pub fn load_round(&self, round: u32) -> Result<RoundState> {
        let m = self.read_manifest(round)?;
        for (rel, want) in &m.checksums {
            let path = self.resolve(rel);
            let got = sha256_file(&path)?;
            if &got != want {
                return Err(Error::Corruption {
                    path,
                    msg: "checksum does not match the round manifest".into(),
                });
            }
        }
        let state = RoundState::from_manifest(&m);
        state.check_invariants()?;
        Ok(state)
    }

    pub fn read_manifest(&self, round: u32) -> Result<RoundManifest> {
        RoundManifest::read(&self.resolve(&round_manifest_path(round)))
    }

    /// Highest committed round, if any.
    pub fn latest_round(&self) -> Result<Option<u32>> {
        let dir = self.resolve("rounds");
        if !dir.exists() {
            return Ok(None);
        }
        let mut best = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(r) = name
                .strip_prefix("round_")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<u32>().ok())
            {
                best = best.max(Some(r));
            }
        }
        Ok(best)
    }

    /// Latest committed state, initializing the run if nothing is committed.
    pub fn load_latest(&self) -> Result<RoundState> {
        match self.latest_round()? {
            Some(r) => self.load_round(r),
            None => self.initialize(),
        }
    }

    pub fn run_round(&self, state: &RoundState) -> Result<RoundState> {
        self.run_round_with(state, None)
            .map(|s| s.expect("uninterrupted round always commits"))
    }

    /// Runs or resumes the next round. With `stop_after`, returns `Ok(None)`
    /// right after that stage is persisted, as if the process had been
    /// killed there.
    pub fn run_round_with(&self, state: &RoundState, stop_after: Option<Stage>) -> Result<Option<RoundState>> {
        if state.r >= state.r_max {
            return Err(Error::Budget(format!("all {} rounds already done", state.r_max)));
        }
        state.check_invariants()?;
        let round = state.r + 1;
        let journal_path = self.resolve(&format!("{}/progress.json", round_dir(round)));
        let journal = if journal_path.exists() {
            let j: Journal = read_json(&journal_path)?;
            if j.round != round {
                return Err(Error::format(
                    &journal_path,
                    format!("journal is for round {}", j.round),
                ));
            }
            j
        } else {
            Journal {
                round,
                ..Journal::default()
            }
        };
        match self.execute(state, journal, &journal_path, stop_after) {
            Ok(out) => Ok(out),
            Err(e) => {
                let _ = fs::remove_file(&journal_path);
                Err(e)
            }
        }
    }

    fn execute(
        &self,
        state: &RoundState,
        mut journal: Journal,
        journal_path: &Path,
        stop_after: Option<Stage>,
    ) -> Result<Option<RoundState>> {
        let cfg = &self.dataset.config;
        let round = journal.round;
        let dir = round_dir(round);
        let aerr = Self::adapter_err(round);
        let emb_dir = format!("{dir}/emb");
        let scores_rel = format!("{dir}/scores.csv");
        let selection_rel = format!("{dir}/selection.csv");
        let reliability_rel = format!("{dir}/reliability.csv");
        let stage1_rel = stage1_model_path(round);
        let final_rel = if cfg.semi_supervised {
            model_path(round)
        } else {
            stage1_rel.clone()
        };

        macro_rules! finish {
            ($stage:expr) => {{
                journal.done = Some($stage);
                write_json(journal_path, &journal)?;
                if stop_after == Some($stage) {
                    return Ok(None);
                }
            }};
        }

        // 1. current-encoder embeddings of the pool and the labeled set
        if !journal.finished(Stage::Embed) {
            let model = self.resolve(&state.model_ref);
            let ids: Vec<&String> = state.unlabeled.iter().chain(&state.labeled).collect();
            ids.par_iter()
                .map(|id| {
                    let e = self
                        .trainer
                        .embed(&model, &self.sample_ref(id)?, round)
                        .map_err(&aerr)?;
                    write_tensor(&e.to_tensor(), self.resolve(&format!("{emb_dir}/{id}.asft")))
                })
                .collect::<Result<Vec<()>>>()?;
            finish!(Stage::Embed);
        }

        // 2. score table and strategy scores
        if !journal.finished(Stage::Score) {
            let current = self.read_embeddings(&emb_dir, &state.unlabeled, round)?;
            let labeled_emb = self.read_embeddings(&emb_dir, &state.labeled, round)?;
            let reference = self.read_embeddings("embeddings/e0", &state.unlabeled, 0)?;
            let probs = self.predict_all(&state.model_ref, &state.unlabeled, round)?;
            let scores = score_round(&QueryInputs {
                reference: &reference,
                current: &current,
                probs: &probs,
                round,
                max_round: state.r_max,
            })?;
            scores.write(&self.resolve(&scores_rel))?;
            let ctx = QueryContext {
                round,
                max_round: state.r_max,
                seed: stage_seed(cfg.seed, round, Stage::Score),
                scores: &scores,
                probs: &probs,
                embeddings: &current,
                labeled_embeddings: &labeled_emb,
            };
            let strategy_scores = self.strategy.scores(&ctx)?;
            write_atomic(
                &self.resolve(&selection_rel),
                selection_to_csv(&strategy_scores, round).as_bytes(),
            )?;
            finish!(Stage::Score);
        }

        // 3. top-n_b among queryable samples
        if !journal.finished(Stage::Select) {
            let scores = selection_from_csv(&read_string(&self.resolve(&selection_rel))?)?;
            let excluded: HashSet<String> = state.excluded.iter().cloned().collect();
            let batch = select_top(&scores, cfg.n_b, &excluded)?;
            journal.batch = batch.ids;
            journal.shortfall = batch.shortfall;
            finish!(Stage::Select);
        }

        // 4. oracle labels copied into the work directory
        if !journal.finished(Stage::Annotate) {
            self.annotate(&journal.batch, round)?;
            finish!(Stage::Annotate);
        }

        let mut next = state.clone();
        next.r = round;
        next.n_su = cfg.n_b * round as usize;
        next.pseudo.clear();
        let batch: HashSet<&String> = journal.batch.iter().collect();
        next.unlabeled.retain(|id| !batch.contains(id));
        for id in &journal.batch {
            next.labeled.push(id.clone());
            next.labels.insert(id.clone(), label_path(id));
        }

        // 5. sets updated in memory; the journal marks the boundary
        if !journal.finished(Stage::Move) {
            finish!(Stage::Move);
        }

        // 6. supervised fine-tuning on the labeled set
        if !journal.finished(Stage::FitSupervised) {
            let job = FitJob {
                init: Some(self.resolve(&state.model_ref)),
                labeled: self.train_pairs(&next.labeled, &next.labels)?,
                pseudo: Vec::new(),
                epochs: cfg.stage1_epochs,
                seed: stage_seed(cfg.seed, round, Stage::FitSupervised),
            };
            self.trainer.fit(&job, &self.resolve(&stage1_rel)).map_err(&aerr)?;
            finish!(Stage::FitSupervised);
        }

        let semi = cfg.semi_supervised && !next.unlabeled.is_empty();

        // 7. reliability ranking under the stage-1 model
        if semi && !journal.finished(Stage::SelectReliable) {
            let n_su = next.n_su.min(next.unlabeled.len());
            let probs = self.predict_all(&stage1_rel, &next.unlabeled, round)?;
            let confidences = score_confidences(&probs, cfg.confidence_variant)?;
            drop(probs);
            let pool = self.embed_all(&stage1_rel, &next.unlabeled, round)?;
            let anchors = self.embed_all(&stage1_rel, &next.labeled, round)?;
            let sel_cfg = SelectionConfig::new(n_su, cfg.tau_c)?.with_variant(cfg.confidence_variant);
            let sel = select_reliable(&confidences, &pool, &sel_cfg, &anchors, round)?;
            sel.table.write(&self.resolve(&reliability_rel))?;
            journal.selected = sel.selected;
            finish!(Stage::SelectReliable);
        }

        // 8. pseudo labels from stage-1 predictions
        if semi && !journal.finished(Stage::PseudoLabel) {
            let probs = self.predict_all(&stage1_rel, &journal.selected, round)?;
            probs
                .par_iter()
                .map(|p| {
                    let t = label_tensor(p.spatial(), &p.argmax_labels())?;
                    write_tensor(&t, self.resolve(&pseudo_path(round, p.sample_id())))
                })
                .collect::<Result<Vec<()>>>()?;
            finish!(Stage::PseudoLabel);
        }

        // 9. joint fine-tuning, resuming from the stage-1 weights
        if semi && !journal.finished(Stage::FitSemiSupervised) {
            let pseudo = journal
                .selected
                .iter()
                .map(|id| {
                    Ok(TrainPair {
                        id: id.clone(),
                        image: self.sample_ref(id)?.image,
                        label: self.resolve(&pseudo_path(round, id)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let job = FitJob {
                init: Some(self.resolve(&stage1_rel)),
                labeled: self.train_pairs(&next.labeled, &next.labels)?,
                pseudo,
                epochs: cfg.stage3_epochs,
                seed: stage_seed(cfg.seed, round, Stage::FitSemiSupervised),
            };
            self.trainer.fit(&job, &self.resolve(&final_rel)).map_err(&aerr)?;
            finish!(Stage::FitSemiSupervised);
        }
        let final_rel = if semi { final_rel } else { stage1_rel.clone() };

        // 10. reliability-selected samples leave the query pool for good
        if semi {
            next.pseudo = journal.selected.clone();
            next.pseudo.sort();
            next.excluded.extend(journal.selected.iter().cloned());
        }
        if !journal.finished(Stage::Exclude) {
            finish!(Stage::Exclude);
        }

        // 11. commit
        next.model_ref = final_rel;
        next.check_invariants()?;
        let mut m = next.to_manifest();
        m.score_table_path = Some(scores_rel.clone());
        m.selection_path = Some(selection_rel.clone());
        m.stage1_model_ref = Some(stage1_rel.clone());
        m.batch = journal.batch.clone();
        m.shortfall = journal.shortfall;
        let mut files = vec![scores_rel, selection_rel, stage1_rel.clone()];
        if semi {
            m.reliability_table_path = Some(reliability_rel.clone());
            files.push(reliability_rel);
            files.push(m.model_ref.clone());
            files.extend(journal.selected.iter().map(|id| pseudo_path(round, id)));
        }
        files.extend(journal.batch.iter().map(|id| label_path(id)));
        m.checksums = self.checksums(&files)?;
        m.write(&self.resolve(&round_manifest_path(round)))?;
        fs::remove_file(journal_path).map_err(|e| Error::io(journal_path, e))?;
        Ok(Some(next))
    }

    /// Runs rounds until the budget is spent or no queryable sample is left.
    pub fn run_to_completion(&self) -> Result<RoundState> {
        let mut state = self.load_latest()?;
        while state.r < state.r_max && state.queryable().next().is_some() {
            state = self.run_round(&state)?;
        }
        Ok(state)
    }

    fn annotate(&self, ids: &[String], round: u32) -> Result<Vec<String>> {
        let refs = ids.iter().map(|id| self.sample_ref(id)).collect::<Result<Vec<_>>>()?;
        let files = self.oracle.annotate(&refs).map_err(Self::adapter_err(round))?;
        if files.len() != ids.len() {
            return Err(Error::Adapter {
                round,
                msg: format!("oracle returned {} labels for {} samples", files.len(), ids.len()),
            });
        }
        ids.iter()
            .zip(files)
            .map(|(id, src)| {
                let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
                let rel = label_path(id);
                write_atomic(&self.resolve(&rel), &bytes)?;
                Ok(rel)
            })
            .collect()
    }

    fn train_pairs(&self, ids: &[String], labels: &BTreeMap<String, String>) -> Result<Vec<TrainPair>> {
        ids.iter()
            .map(|id| {
                let label = labels
                    .get(id)
                    .ok_or_else(|| Error::Pairing(format!("labeled {id} has no label file")))?;
                Ok(TrainPair {
                    id: id.clone(),
                    image: self.sample_ref(id)?.image,
                    label: self.resolve(label),
                })
            })
            .collect()
    }

    fn read_embeddings(&self, dir: &str, ids: &[String], encoder_round: u32) -> Result<Vec<EmbeddingVec>> {
        ids.par_iter()
            .map(|id| {
                let t = read_tensor(self.resolve(&format!("{dir}/{id}.asft")))?;
                EmbeddingVec::from_tensor(id.as_str(), encoder_round, &t)
            })
            .collect()
    }

    /// Embeddings pass through f32 so in-memory and on-disk values agree.
    fn embed_all(&self, model_rel: &str, ids: &[String], encoder_round: u32) -> Result<Vec<EmbeddingVec>> {
        let model = self.resolve(model_rel);
        let aerr = Self::adapter_err(encoder_round);
        ids.par_iter()
            .map(|id| {
                let e = self
                    .trainer
                    .embed(&model, &self.sample_ref(id)?, encoder_round)
                    .map_err(&aerr)?;
                EmbeddingVec::from_tensor(id.as_str(), encoder_round, &e.to_tensor())
            })
            .collect()
    }

    fn predict_all(&self, model_rel: &str, ids: &[String], round: u32) -> Result<Vec<ProbVolume>> {
        let model = self.resolve(model_rel);
        let aerr = Self::adapter_err(round);
        ids.par_iter()
            .map(|id| self.trainer.predict(&model, &self.sample_ref(id)?).map_err(&aerr))
            .collect()
    }

    fn checksums(&self, files: &[String]) -> Result<BTreeMap<String, String>> {
        files
            .iter()
            .map(|rel| Ok((rel.clone(), sha256_file(&self.resolve(rel))?)))
            .collect()
    }
}

pub fn label_path(id: &str) -> String {
    format!("labels/{id}.asft")
}

pub fn pseudo_path(round: u32, id: &str) -> String {
    format!("{}/pseudo/{id}.asft", round_dir(round))
}

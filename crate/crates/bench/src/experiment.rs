//! Multi-seed, multi-strategy comparison on the synthetic benchmark.
//!
//! Per seed: generate a dataset, hold out a quarter of the target samples
//! for evaluation, initialize round 0 once, then run every strategy from a
//! copy of that round-0 directory. After each round the current model is
//! scored on the held-out split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asfda_core::fsutil::{read_string, write_atomic};
use asfda_core::orchestrator::adapter::{FileOracle, TrainPair, TrainerAdapter};
use asfda_core::orchestrator::manifest::{DatasetManifest, RunConfig};
use asfda_core::orchestrator::strategy::FusedQuery;
use asfda_core::orchestrator::{Orchestrator, PRETRAINED_MODEL};
use asfda_core::reliability::ConfidenceVariant;
use asfda_core::scores::fmt_g9;
use asfda_core::tensor::{labels_from_tensor, read_tensor};
use asfda_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::strategy;
use crate::eval::{mann_whitney_u, per_class_dice};
use crate::synth::{generate_dataset, SynthConfig, TARGET};
use crate::toy::{predict_labels, ToyConfig, ToyModel, ToyTrainer};

pub const UPPER: &str = "UPPER";
pub const LOWER: &str = "LOWER";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub toy: ToyConfig,
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    pub n_b: usize,
    pub r_max: u32,
    pub holdout_fraction: f64,
    pub epochs: u32,
    pub tau_c: f64,
    pub confidence_variant: ConfidenceVariant,
    /// Adds fully supervised and unadapted reference rows.
    pub bounds: bool,
    /// Forces the semi-supervised stage off for every strategy.
    pub no_semi: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            toy: ToyConfig::default(),
            seeds: (0..10).collect(),
            strategies: vec!["RAND".into(), "DKD+ASD".into(), "ASFDA".into()],
            n_b: 2,
            r_max: 3,
            holdout_fraction: 0.25,
            epochs: 30,
            tau_c: asfda_core::reliability::DEFAULT_TAU_C,
            confidence_variant: ConfidenceVariant::Mean,
            bounds: true,
            no_semi: false,
        }
    }
}

/// One (strategy, seed, budget) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub strategy: String,
    pub seed: u64,
    /// Queried share of the target set, in percent.
    pub budget: f64,
    pub mean_dice: f64,
    pub per_class: Vec<f64>,
}

/// Pseudo-label quality of reliability-selected vs other unlabeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationRow {
    pub strategy: String,
    pub seed: u64,
    pub round: u32,
    pub selected: Vec<f64>,
    pub unselected: Vec<f64>,
    /// NaN when either group is empty.
    pub u: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub separation: Vec<SeparationRow>,
}

impl ExperimentReport {
    /// Mean Dice per `(strategy, seed, budget)`.
    pub fn lookup(&self) -> BTreeMap<(String, u64, String), f64> {
        self.rows
            .iter()
            .map(|r| ((r.strategy.clone(), r.seed, fmt_g9(r.budget)), r.mean_dice))
            .collect()
    }

    pub fn budgets(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.rows.iter().map(|r| r.budget).collect();
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }
}

pub fn results_header(classes: usize) -> String {
    let mut h = String::from("strategy,seed,budget,mean_dice");
    for c in 1..classes {
        let _ = write!(h, ",dice_c{c}");
    }
    h
}

pub fn results_to_csv(rows: &[ResultRow], classes: usize) -> String {
    let mut out = results_header(classes);
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.strategy,
            r.seed,
            fmt_g9(r.budget),
            fmt_g9(r.mean_dice)
        );
        for d in &r.per_class {
            let _ = write!(out, ",{}", fmt_g9(*d));
        }
        out.push('\n');
    }
    out
}

fn field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Domain(format!("cannot parse {what} value {s:?}")))
}

pub fn results_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput("results table"))?;
    let cols = header.split(',').count();
    if !header.starts_with("strategy,seed,budget,mean_dice") {
        return Err(Error::Domain("unexpected results header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols {
                return Err(Error::Domain(format!("results row {line:?} has {} fields", f.len())));
            }
            Ok(ResultRow {
                strategy: f[0].to_string(),
                seed: field(f[1], "seed")?,
                budget: field(f[2], "budget")?,
                mean_dice: field(f[3], "mean_dice")?,
                per_class: f[4..].iter().map(|s| field(s, "dice")).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "strategy,budget,seeds,mean_dice,sd_dice";

/// Mean ± sample SD over seeds, per strategy and budget, in first-seen order.
pub fn summary_to_csv(rows: &[ResultRow]) -> String {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.strategy.clone(), fmt_g9(r.budget));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.mean_dice);
    }
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for key in order {
        let v = &groups[&key];
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let _ = writeln!(out, "{},{},{},{},{}", key.0, key.1, v.len(), fmt_g9(mean), fmt_g9(sd));
    }
    out
}

pub const SEPARATION_HEADER: &str = "strategy,seed,round,n_selected,n_unselected,mean_selected,mean_unselected,u,p";

pub fn separation_to_csv(rows: &[SeparationRow]) -> String {
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let mut out = String::from(SEPARATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.seed,
            r.round,
            r.selected.len(),
            r.unselected.len(),
            fmt_g9(mean(&r.selected)),
            fmt_g9(mean(&r.unselected)),
            fmt_g9(r.u),
            fmt_g9(r.p)
        );
    }
    out
}

/// A held-out evaluation sample.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Mean over samples of mean foreground Dice, and of each class's Dice.
pub fn evaluate(model: &ToyModel, samples: &[EvalSample]) -> Result<(f64, Vec<f64>)> {
    let classes = model.classes;
    let per: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let (_, pred) = predict_labels(model, &s.image)?;
            let (_, gt) = labels_from_tensor(&read_tensor(&s.label)?)?;
            per_class_dice(&pred, &gt, classes)
        })
        .collect::<Result<_>>()?;
    if per.is_empty() {
        return Err(Error::EmptyInput("no evaluation samples"));
    }
    let n = per.len() as f64;
    let per_class: Vec<f64> = (0..classes - 1)
        .map(|c| per.iter().map(|d| d[c]).sum::<f64>() / n)
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok((mean, per_class))
}

fn sample_dice(model: &ToyModel, s: &EvalSample) -> Result<f64> {
    evaluate(model, std::slice::from_ref(s)).map(|(m, _)| m)
}

/// Dataset, split and round-0 template of one seed.
pub struct SeedSetup {
    pub seed: u64,
    pub dataset: DatasetManifest,
    pub heldout: Vec<EvalSample>,
    /// Every target sample by id, for label lookups.
    pub targets: BTreeMap<String, EvalSample>,
    pub template: PathBuf,
    pub target_count: usize,
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::Io {
        path: to.into(),
        source: e,
    })?;
    for entry in fs::read_dir(from).map_err(|e| Error::Io {
        path: from.into(),
        source: e,
    })? {
        let entry = entry.map_err(|e| Error::Io {
            path: from.into(),
            source: e,
        })?;
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            copy_dir(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| Error::Io {
                path: dst.clone(),
                source: e,
            })?;
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn run_config(&self, seed: u64) -> RunConfig {
        let mut rc = RunConfig::new(self.n_b, self.r_max);
        rc.seed = seed;
        rc.tau_c = self.tau_c;
        rc.confidence_variant = self.confidence_variant;
        rc.init_epochs = self.epochs;
        rc.stage1_epochs = self.epochs;
        rc.stage3_epochs = self.epochs;
        rc.target_domain = Some(TARGET.into());
        rc
    }

    /// Generates the seed's dataset, splits off the held-out samples and
    /// initializes round 0 in `root/seed_<s>/init`.
    pub fn prepare_seed(&self, seed: u64, root: &Path) -> Result<SeedSetup> {
        let synth = SynthConfig {
            seed,
            ..self.synth.clone()
        };
        let dir = root.join(format!("seed_{seed}"));
        let generated = generate_dataset(&synth, self.run_config(seed), &dir.join("data"))?;
        let mut ids: Vec<String> = generated.target_info.iter().map(|t| t.0.clone()).collect();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4c44_4f55_5421);
        ids.shuffle(&mut rng);
        let n_hold = ((ids.len() as f64) * self.holdout_fraction).round() as usize;
        let held: std::collections::HashSet<String> = ids[..n_hold].iter().cloned().collect();

        let mut dataset = generated.manifest.clone();
        let mut targets = BTreeMap::new();
        for s in &dataset.samples {
            if s.domain == TARGET {
                let label = s
                    .label
                    .clone()
                    .ok_or_else(|| Error::Pairing(format!("{} has no label", s.id)))?;
                targets.insert(
                    s.id.clone(),
                    EvalSample {
                        id: s.id.clone(),
                        image: s.image.clone(),
                        label,
                    },
                );
            }
        }
        dataset.samples.retain(|s| !held.contains(&s.id));
        let heldout: Vec<EvalSample> = targets.values().filter(|s| held.contains(&s.id)).cloned().collect();

        let template = dir.join("init");
        let trainer = ToyTrainer::from_manifest(self.toy.clone(), &dataset);
        let oracle = oracle_for(&dataset);
        Orchestrator::new(&template, dataset.clone(), &trainer, &oracle, &FusedQuery)?.initialize()?;
        Ok(SeedSetup {
            seed,
            dataset,
            heldout,
            targets,
            template,
            target_count: synth.samples_per_domain,
        })
    }

    fn budget(&self, round: u32, target_count: usize) -> f64 {
        100.0 * (round as usize * self.n_b) as f64 / target_count as f64
    }

    /// Runs one strategy from the seed's round-0 template.
    pub fn run_strategy(
        &self,
        setup: &SeedSetup,
        name: &str,
        root: &Path,
    ) -> Result<(Vec<ResultRow>, Option<SeparationRow>)> {
        let spec = strategy(name)?;
        let mut dataset = setup.dataset.clone();
        dataset.config.semi_supervised = spec.semi_supervised && !self.no_semi;
        let work = root.join(format!("seed_{}", setup.seed)).join(name);
        if !work.exists() {
            copy_dir(&setup.template, &work)?;
        }
        let trainer = ToyTrainer::from_manifest(self.toy.clone(), &dataset);
        let oracle = oracle_for(&dataset);
        let semi = dataset.config.semi_supervised;
        let orch = Orchestrator::new(&work, dataset, &trainer, &oracle, spec.query.as_ref())?;
        let mut state = orch.load_latest()?;
        let mut rows = Vec::new();
        while state.r < state.r_max && state.queryable().next().is_some() {
            state = orch.run_round(&state)?;
            let model = ToyModel::read(&orch.resolve(&state.model_ref))?;
            let (mean, per_class) = evaluate(&model, &setup.heldout)?;
            rows.push(ResultRow {
                strategy: name.to_string(),
                seed: setup.seed,
                budget: self.budget(state.r, setup.target_count),
                mean_dice: mean,
                per_class,
            });
        }
        let separation = if semi && state.r > 0 {
            Some(self.separation(&orch, setup, name, state.r)?)
        } else {
            None
        };
        Ok((rows, separation))
    }

    /// Dice of the stage-1 pseudo labels of the final round, split by
    /// whether the reliability ranking selected the sample.
    fn separation(&self, orch: &Orchestrator<'_>, setup: &SeedSetup, name: &str, round: u32) -> Result<SeparationRow> {
        let m = orch.read_manifest(round)?;
        let stage1 = m
            .stage1_model_ref
            .as_deref()
            .ok_or_else(|| Error::Domain(format!("round {round} manifest has no stage-1 model")))?;
        let model = ToyModel::read(&orch.resolve(stage1))?;
        let selected: std::collections::HashSet<&String> = m.pseudo.iter().collect();
        let mut sel = Vec::new();
        let mut unsel = Vec::new();
        for id in &m.unlabeled {
            let d = sample_dice(&model, &setup.targets[id])?;
            if selected.contains(id) {
                sel.push(d);
            } else {
                unsel.push(d);
            }
        }
        // Every unlabeled sample can be selected in small pools; no test then.
        let (u, p) = if sel.is_empty() || unsel.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let t = mann_whitney_u(&sel, &unsel)?;
            (t.u, t.p)
        };
        Ok(SeparationRow {
            strategy: name.to_string(),
            seed: setup.seed,
            round,
            selected: sel,
            unselected: unsel,
            u,
            p,
        })
    }

    /// Reference rows: the unadapted pretrained model and a model trained on
    /// every labeled pool sample, repeated at each budget.
    pub fn bound_rows(&self, setup: &SeedSetup) -> Result<Vec<ResultRow>> {
        let pretrained = ToyModel::read(&setup.template.join(PRETRAINED_MODEL))?;
        let (lower, lower_pc) = evaluate(&pretrained, &setup.heldout)?;
        let pool: Vec<TrainPair> = setup
            .dataset
            .target_samples()
            .into_iter()
            .map(|s| {
                let t = &setup.targets[&s.id];
                TrainPair {
                    id: t.id.clone(),
                    image: t.image.clone(),
                    label: t.label.clone(),
                }
            })
            .collect();
        let (upper_model, _) = crate::toy::toy_fit(&self.toy, Some(&pretrained), &pool, &[], self.epochs, setup.seed)?;
        let (upper, upper_pc) = evaluate(&upper_model, &setup.heldout)?;
        let mut rows = Vec::new();
        for r in 1..=self.r_max {
            let budget = self.budget(r, setup.target_count);
            for (name, mean, pc) in [(UPPER, upper, &upper_pc), (LOWER, lower, &lower_pc)] {
                rows.push(ResultRow {
                    strategy: name.into(),
                    seed: setup.seed,
                    budget,
                    mean_dice: mean,
                    per_class: pc.clone(),
                });
            }
        }
        Ok(rows)
    }
}

pub fn oracle_for(dataset: &DatasetManifest) -> FileOracle {
    FileOracle::new(
        dataset
            .samples
            .iter()
            .filter_map(|s| Some((s.id.clone(), s.label.clone()?))),
    )
}

/// Runs every (seed, strategy) pair and writes `results.csv`, `summary.csv`
/// and `separation.csv` under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.synth.validate()?;
    let runs = out.join("runs");
    let setups: Vec<SeedSetup> = cfg
        .seeds
        .par_iter()
        .map(|&s| cfg.prepare_seed(s, &runs))
        .collect::<Result<_>>()?;
    let jobs: Vec<(&SeedSetup, &String)> = cfg
        .strategies
        .iter()
        .flat_map(|name| setups.iter().map(move |s| (s, name)))
        .collect();
    let results: Vec<(Vec<ResultRow>, Option<SeparationRow>)> = jobs
        .par_iter()
        .map(|(setup, name)| {
            cfg.run_strategy(setup, name, &runs)
                .map_err(|e| Error::Domain(format!("strategy {name}, seed {}: {e}", setup.seed)))
        })
        .collect::<Result<_>>()?;
    let mut report = ExperimentReport::default();
    for (rows, sep) in results {
        report.rows.extend(rows);
        report.separation.extend(sep);
    }
    if cfg.bounds {
        let bounds: Vec<Vec<ResultRow>> = setups.par_iter().map(|s| cfg.bound_rows(s)).collect::<Result<_>>()?;
        report.rows.extend(bounds.into_iter().flatten());
    }
    let classes = cfg.synth.classes;
    write_atomic(
        &out.join("results.csv"),
        results_to_csv(&report.rows, classes).as_bytes(),
    )?;
    write_atomic(&out.join("summary.csv"), summary_to_csv(&report.rows).as_bytes())?;
    write_atomic(
        &out.join("separation.csv"),
        separation_to_csv(&report.separation).as_bytes(),
    )?;
    Ok(report)
}

/// Reads a results table written by [`run_experiment`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    results_from_csv(&read_string(path)?)
}

/// Trainer for the `trainer-job` subcommand and external use.
pub fn toy_trainer_for(dataset: &DatasetManifest, toy: ToyConfig) -> impl TrainerAdapter {
    ToyTrainer::from_manifest(toy, dataset)
}

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use asfda_bench::baselines::{strategy, STRATEGY_NAMES};
use asfda_bench::eval::{mann_whitney_u, per_class_dice};
use asfda_bench::experiment::{oracle_for, run_experiment, ExperimentConfig};
use asfda_bench::synth::{generate_dataset, SynthConfig};
use asfda_bench::toy::{ToyConfig, ToyTrainer};
use asfda_core::fsutil::{read_json, read_string, write_atomic};
use asfda_core::orchestrator::adapter::{TrainerAdapter, TrainerJob};
use asfda_core::orchestrator::manifest::{DatasetManifest, RunConfig};
use asfda_core::orchestrator::{selection_to_csv, Orchestrator};
use asfda_core::query::{score_round, select_top, QueryInputs, QueryScores};
use asfda_core::reliability::{score_confidences, select_reliable, ConfidenceVariant, SelectionConfig, DEFAULT_TAU_C};
use asfda_core::scores::fmt_g9;
use asfda_core::tensor::{labels_from_tensor, read_tensor, write_tensor, EmbeddingVec, ProbVolume};
use asfda_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asfda", version, about = "Active source-free domain adaptation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset.
    Generate {
        /// Synthetic config as JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-sample scores.
    #[command(subcommand)]
    Score(ScoreCommand),
    /// Pick the top-n samples of a score table.
    Select {
        /// Query score table.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        n_b: usize,
        /// File with one excluded id per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        round: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the next adaptation round of a work directory.
    Round {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Multi-seed strategy comparison on the synthetic benchmark.
    Run {
        /// Experiment config as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Runs only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
        #[arg(long)]
        no_semi: bool,
        #[arg(long)]
        confidence_variant: Option<ConfidenceVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice and rank-sum evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Toy trainer behind the subprocess job protocol.
    #[command(hide = true)]
    TrainerJob {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        toy: Option<PathBuf>,
        job: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset manifest.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    work: PathBuf,
    #[arg(long, default_value = "ASFDA")]
    strategy: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_semi: bool,
    #[arg(long)]
    confidence_variant: Option<ConfidenceVariant>,
    /// Toy trainer config as JSON.
    #[arg(long)]
    toy: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScoreCommand {
    /// DKD, ASD and the fused query score.
    Q {
        /// Directory of round-0 embeddings, one `<id>.asft` each.
        #[arg(long)]
        e0: PathBuf,
        /// Directory of current embeddings.
        #[arg(long)]
        emb: PathBuf,
        /// Directory of class-probability volumes.
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        round: u32,
        #[arg(long)]
        r_max: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confidence, semantic distance and reliability ranking.
    Reliability {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        /// Directory of labeled-sample embeddings.
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        n_su: usize,
        #[arg(long, default_value_t = DEFAULT_TAU_C)]
        tau_c: f64,
        #[arg(long, default_value_t = ConfidenceVariant::Mean)]
        confidence_variant: ConfidenceVariant,
        #[arg(long, default_value_t = 0)]
        round: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Per-class Dice of a predicted label volume.
    Dice {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
    },
    /// Mann-Whitney U between two files of one value per line.
    Ranksum {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

/// `(id, tensor)` for every `.asft` file of a directory, by id.
fn tensors_in(dir: &Path) -> anyhow::Result<Vec<(String, asfda_core::tensor::Tensor)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "asft") {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((id, read_tensor(&path)?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn embeddings_in(dir: &Path, round: u32) -> anyhow::Result<Vec<EmbeddingVec>> {
    tensors_in(dir)?
        .into_iter()
        .map(|(id, t)| Ok(EmbeddingVec::from_tensor(id, round, &t)?))
        .collect()
}

fn probs_in(dir: &Path) -> anyhow::Result<Vec<ProbVolume>> {
    tensors_in(dir)?
        .into_iter()
        .map(|(id, t)| Ok(ProbVolume::new(id, t)?))
        .collect()
}

fn values_in(path: &Path) -> anyhow::Result<Vec<f64>> {
    read_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .with_context(|| format!("bad value {l:?} in {}", path.display()))
        })
        .collect()
}

fn toy_config(path: Option<&Path>) -> anyhow::Result<ToyConfig> {
    Ok(match path {
        Some(p) => read_json(p)?,
        None => ToyConfig::default(),
    })
}

fn load_dataset(path: &Path) -> anyhow::Result<DatasetManifest> {
    Ok(DatasetManifest::read(path)?)
}

fn run_round(args: &RunArgs) -> anyhow::Result<()> {
    let mut dataset = load_dataset(&args.config)?;
    let spec = strategy(&args.strategy)?;
    dataset.config.semi_supervised = spec.semi_supervised && !args.no_semi;
    if let Some(s) = args.seed {
        dataset.config.seed = s;
    }
    if let Some(v) = args.confidence_variant {
        dataset.config.confidence_variant = v;
    }
    let trainer = ToyTrainer::from_manifest(toy_config(args.toy.as_deref())?, &dataset);
    let oracle = oracle_for(&dataset);
    let orch = Orchestrator::new(&args.work, dataset, &trainer, &oracle, spec.query.as_ref())?;
    let state = if orch.latest_round()?.is_none() {
        orch.initialize()?
    } else {
        orch.load_latest()?
    };
    let state = if state.r < state.r_max {
        orch.run_round(&state)?
    } else {
        state
    };
    println!(
        "round {} of {}: {} labeled, model {}",
        state.r,
        state.r_max,
        state.labeled.len(),
        state.model_ref
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let mut cfg: SynthConfig = match &config {
                Some(p) => read_json(p)?,
                None => SynthConfig::default(),
            };
            cfg.seed = seed;
            let mut rc = RunConfig::new(2, 3);
            rc.seed = seed;
            rc.target_domain = Some(asfda_bench::synth::TARGET.into());
            let g = generate_dataset(&cfg, rc, &out)?;
            println!(
                "{} samples written to {}",
                g.manifest.samples.len(),
                g.manifest_path.display()
            );
        }
        Command::Score(ScoreCommand::Q {
            e0,
            emb,
            probs,
            round,
            r_max,
            out,
        }) => {
            let reference = embeddings_in(&e0, 0)?;
            let current = embeddings_in(&emb, round)?;
            let probs = probs_in(&probs)?;
            let scores = score_round(&QueryInputs {
                reference: &reference,
                current: &current,
                probs: &probs,
                round,
                max_round: r_max,
            })?;
            scores.write(&out)?;
        }
        Command::Score(ScoreCommand::Reliability {
            probs,
            emb,
            anchors,
            n_su,
            tau_c,
            confidence_variant,
            round,
            out,
        }) => {
            let probs = probs_in(&probs)?;
            let emb = embeddings_in(&emb, round)?;
            let anchors = embeddings_in(&anchors, round)?;
            let confidences = score_confidences(&probs, confidence_variant)?;
            let cfg = SelectionConfig::new(n_su, tau_c)?.with_variant(confidence_variant);
            let sel = select_reliable(&confidences, &emb, &cfg, &anchors, round)?;
            sel.table.write(&out)?;
        }
        Command::Select {
            scores,
            n_b,
            exclude,
            round,
            out,
        } => {
            let table = QueryScores::read(&scores)?;
            let excluded: HashSet<String> = match &exclude {
                Some(p) => read_string(p)?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                None => HashSet::new(),
            };
            let q = table.q();
            let batch = select_top(&q, n_b, &excluded)?;
            if batch.shortfall {
                eprintln!("only {} eligible samples", batch.ids.len());
            }
            let picked = asfda_core::ScoreVector::new(
                batch
                    .ids
                    .iter()
                    .map(|id| (id.clone(), q.get(id).unwrap_or_default()))
                    .collect(),
            )?;
            write_atomic(&out, selection_to_csv(&picked, round).as_bytes())?;
        }
        Command::Round { run } => run_round(&run)?,
        Command::Run {
            config,
            seed,
            strategy: names,
            no_semi,
            confidence_variant,
            out,
        } => {
            let mut cfg: ExperimentConfig = match &config {
                Some(p) => read_json(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if !names.is_empty() {
                for n in &names {
                    if !STRATEGY_NAMES.contains(&n.as_str()) {
                        bail!(Error::Domain(format!("unknown strategy {n:?}")));
                    }
                }
                cfg.strategies = names;
            }
            cfg.no_semi |= no_semi;
            if let Some(v) = confidence_variant {
                cfg.confidence_variant = v;
            }
            let report = run_experiment(&cfg, &out)?;
            println!(
                "{} result rows written to {}",
                report.rows.len(),
                out.join("results.csv").display()
            );
        }
        Command::Eval(EvalCommand::Dice { pred, gt, classes }) => {
            let (sp, p) = labels_from_tensor(&read_tensor(&pred)?)?;
            let (sg, g) = labels_from_tensor(&read_tensor(&gt)?)?;
            if sp != sg {
                bail!(Error::Dimension(format!("prediction is {sp:?}, ground truth {sg:?}")));
            }
            for (c, d) in per_class_dice(&p, &g, classes)?.iter().enumerate() {
                println!("class {},{}", c + 1, fmt_g9(*d));
            }
        }
        Command::Eval(EvalCommand::Ranksum { a, b }) => {
            let r = mann_whitney_u(&values_in(&a)?, &values_in(&b)?)?;
            println!("u,p,exact\n{},{},{}", fmt_g9(r.u), fmt_g9(r.p), r.exact);
        }
        Command::TrainerJob { dataset, toy, job } => {
            let dataset = load_dataset(&dataset)?;
            let trainer = ToyTrainer::from_manifest(toy_config(toy.as_deref())?, &dataset);
            let job: TrainerJob = read_json(&job)?;
            let adapter = |e| {
                anyhow::anyhow!(Error::Adapter {
                    round: 0,
                    msg: format!("{e}")
                })
            };
            match job {
                TrainerJob::Pretrained { out } => trainer.pretrained(&out).map_err(adapter)?,
                TrainerJob::Fit { job, out } => trainer.fit(&job, &out).map_err(adapter)?,
                TrainerJob::Embed {
                    model,
                    sample,
                    encoder_round,
                    out,
                } => {
                    let e = trainer.embed(&model, &sample, encoder_round).map_err(adapter)?;
                    write_tensor(&e.to_tensor(), &out)?;
                }
                TrainerJob::Predict { model, sample, out } => {
                    let p = trainer.predict(&model, &sample).map_err(adapter)?;
                    write_tensor(p.tensor(), &out)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(4, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

use std::fs;
use std::path::Path;

use asfda_bench::experiment::{
    read_results, results_from_csv, results_to_csv, run_experiment, summary_to_csv, ExperimentConfig, LOWER, UPPER,
};
use asfda_bench::synth::SynthConfig;
use asfda_bench::toy::ToyConfig;

fn small(strategies: &[&str], seeds: u64, r_max: u32) -> ExperimentConfig {
    ExperimentConfig {
        synth: SynthConfig {
            shape: [12, 12, 12],
            samples_per_domain: 16,
            ..SynthConfig::default()
        },
        toy: ToyConfig {
            voxels_per_volume: 300,
            pretrain_volumes: 3,
            pretrain_epochs: 5,
            ..ToyConfig::default()
        },
        seeds: (0..seeds).collect(),
        strategies: strategies.iter().map(|s| s.to_string()).collect(),
        r_max,
        epochs: 5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn rows_cover_every_strategy_seed_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["RAND", "DKD+ASD", "ASFDA"], 2, 3);
    let report = run_experiment(&cfg, dir.path()).unwrap();
    let strategy_rows = report
        .rows
        .iter()
        .filter(|r| r.strategy != UPPER && r.strategy != LOWER)
        .count();
    assert_eq!(strategy_rows, 3 * 2 * 3);
    assert_eq!(report.rows.len(), 3 * 2 * 3 + 2 * 2 * 3);
    assert_eq!(report.budgets(), vec![12.5, 25.0, 37.5]);
    for r in &report.rows {
        assert_eq!(r.per_class.len(), 3);
        assert!((0.0..=1.0).contains(&r.mean_dice));
    }
    // Only ASFDA runs the semi-supervised stage.
    assert_eq!(report.separation.len(), 2);
    assert!(report.separation.iter().all(|s| s.strategy == "ASFDA"));

    let on_disk = read_results(&dir.path().join("results.csv")).unwrap();
    assert_eq!(on_disk.len(), report.rows.len());
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 5 * 3);
}

#[test]
fn strategies_share_everything_before_the_first_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["RAND", "ENPY", "DKD+ASD", "ASFDA"], 1, 2);
    run_experiment(&ExperimentConfig { bounds: false, ..cfg }, dir.path()).unwrap();
    let run = |s: &str| dir.path().join("runs/seed_0").join(s);
    let read = |s: &str, rel: &str| fs::read(run(s).join(rel)).unwrap();
    for s in ["ENPY", "DKD+ASD", "ASFDA"] {
        assert_eq!(read("RAND", "rounds/round_000.json"), read(s, "rounds/round_000.json"));
        assert_eq!(
            read("RAND", "rounds/r001/scores.csv"),
            read(s, "rounds/r001/scores.csv")
        );
        for e in fs::read_dir(run("RAND").join("rounds/r001/emb")).unwrap() {
            let name = e.unwrap().file_name();
            let rel = Path::new("rounds/r001/emb").join(&name);
            assert_eq!(read("RAND", rel.to_str().unwrap()), read(s, rel.to_str().unwrap()));
        }
    }
    // Same fused selection, so the two runs agree up to the semi-supervised stage.
    assert_eq!(
        read("DKD+ASD", "rounds/r001/selection.csv"),
        read("ASFDA", "rounds/r001/selection.csv")
    );
    assert_eq!(
        read("DKD+ASD", "models/r001_stage1.model"),
        read("ASFDA", "models/r001_stage1.model")
    );
}

#[test]
fn single_round_gives_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        bounds: false,
        ..small(&["DKD+ASD"], 2, 1)
    };
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.budgets(), vec![12.5]);
}

#[test]
fn results_tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["RAND"], 1, 2);
    let report = run_experiment(&cfg, dir.path()).unwrap();
    let first = results_to_csv(&report.rows, 4);
    let second = results_to_csv(&results_from_csv(&first).unwrap(), 4);
    assert_eq!(first, second);
    assert_eq!(fs::read_to_string(dir.path().join("results.csv")).unwrap(), first);
    assert_eq!(
        summary_to_csv(&results_from_csv(&first).unwrap()),
        summary_to_csv(&report.rows)
    );
    assert!(results_from_csv("strategy,seed\nRAND,0\n").is_err());
    assert!(results_from_csv("strategy,seed,budget,mean_dice\nRAND,x,5,0.5\n").is_err());
}

#[test]
fn unknown_strategy_fails_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&small(&["BADGE"], 1, 1), dir.path()).unwrap_err();
    assert!(err.to_string().contains("BADGE"), "{err}");
}

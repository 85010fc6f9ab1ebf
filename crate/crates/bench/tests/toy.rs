use asfda_bench::eval::mean_dice;
use asfda_bench::synth::{generate_dataset, SynthConfig, SOURCE, TARGET};
use asfda_bench::toy::{features, predict_labels, toy_fit, ToyConfig, ToyModel, ToyTrainer};
use asfda_core::orchestrator::adapter::{FitJob, SampleRef, TrainPair, TrainerAdapter};
use asfda_core::orchestrator::manifest::{DatasetManifest, RunConfig};
use asfda_core::tensor::{labels_from_tensor, read_tensor};

fn dataset(dir: &std::path::Path, cfg: SynthConfig) -> DatasetManifest {
    generate_dataset(&cfg, RunConfig::new(2, 3), dir).unwrap().manifest
}

fn small() -> SynthConfig {
    SynthConfig {
        shape: [12, 12, 12],
        samples_per_domain: 4,
        ..SynthConfig::default()
    }
}

fn pairs(m: &DatasetManifest, domain: &str) -> Vec<TrainPair> {
    m.samples_in_domain(domain)
        .into_iter()
        .map(|s| TrainPair {
            id: s.id.clone(),
            image: s.image.clone(),
            label: s.label.clone().unwrap(),
        })
        .collect()
}

#[test]
fn loss_never_increases_and_fit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), small());
    let train = pairs(&m, TARGET);
    let cfg = ToyConfig::default();
    let (a, trace) = toy_fit(&cfg, None, &train[..2], &train[2..3], 15, 4).unwrap();
    assert_eq!(trace.losses.len(), 16);
    for w in trace.losses.windows(2) {
        assert!(w[1] <= w[0], "loss rose from {} to {}", w[0], w[1]);
    }
    assert!(trace.losses.last() < trace.losses.first());
    let (b, trace_b) = toy_fit(&cfg, None, &train[..2], &train[2..3], 15, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(trace.losses, trace_b.losses);
    let (warm, _) = toy_fit(&cfg, Some(&a), &train[..2], &[], 3, 4).unwrap();
    assert_eq!(warm.groups.len(), 2);
}

#[test]
fn zero_epochs_gives_closed_form_class_means() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), small());
    let train = &pairs(&m, SOURCE)[..1];
    let cfg = ToyConfig {
        voxels_per_volume: usize::MAX,
        ..ToyConfig::default()
    };
    let (model, trace) = toy_fit(&cfg, None, train, &[], 0, 0).unwrap();
    assert_eq!(trace.losses.len(), 1);
    let f = features(&read_tensor(&train[0].image).unwrap()).unwrap();
    let (_, labels) = labels_from_tensor(&read_tensor(&train[0].label).unwrap()).unwrap();
    for c in 0..cfg.classes {
        let rows: Vec<_> = f
            .rows
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l as usize == c)
            .map(|(r, _)| r)
            .collect();
        for j in 0..5 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            assert!((model.groups[0].protos[c * 5 + j] - mean).abs() < 1e-9);
        }
    }
    assert!(model.bias.iter().all(|&b| b == 0.0));
}

#[test]
fn no_labeled_volume_is_an_error() {
    assert!(toy_fit(&ToyConfig::default(), None, &[], &[], 3, 0).is_err());
}

#[test]
fn single_volume_fit_segments_itself() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), SynthConfig::default());
    let train = &pairs(&m, TARGET)[..1];
    let (model, _) = toy_fit(&ToyConfig::default(), None, train, &[], 30, 0).unwrap();
    let (_, pred) = predict_labels(&model, &train[0].image).unwrap();
    let (_, gt) = labels_from_tensor(&read_tensor(&train[0].label).unwrap()).unwrap();
    let d = mean_dice(&pred, &gt, 4).unwrap();
    assert!(d >= 0.8, "self Dice {d}");
}

#[test]
fn adapter_outputs_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), small());
    let trainer = ToyTrainer::from_manifest(ToyConfig::default(), &m);
    let pre = dir.path().join("pre.model");
    trainer.pretrained(&pre).unwrap();
    let job = FitJob {
        init: Some(pre.clone()),
        labeled: pairs(&m, TARGET)[..1].to_vec(),
        pseudo: vec![],
        epochs: 2,
        seed: 1,
    };
    let fitted = dir.path().join("fit.model");
    trainer.fit(&job, &fitted).unwrap();
    let model = ToyModel::read(&fitted).unwrap();
    assert_eq!(model.groups.len(), 1);
    let t = &m.samples_in_domain(TARGET)[1];
    let sample = SampleRef {
        id: t.id.clone(),
        image: t.image.clone(),
    };
    let p = trainer.predict(&fitted, &sample).unwrap();
    assert_eq!(p.classes(), 4);
    assert!(p.is_normalized());
    let e = trainer.embed(&fitted, &sample, 3).unwrap();
    assert_eq!(e.len(), 16);
    assert_eq!(e.encoder_round(), 3);
    assert!(trainer.predict(&dir.path().join("missing.model"), &sample).is_err());
}

#[test]
fn trained_model_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), small());
    let (model, _) = toy_fit(&ToyConfig::default(), None, &pairs(&m, TARGET)[..2], &[], 5, 1).unwrap();
    let (a, b) = (dir.path().join("a.model"), dir.path().join("b.model"));
    model.write(&a).unwrap();
    let back = ToyModel::read(&a).unwrap();
    assert_eq!(back, model);
    back.write(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use asfda_core::orchestrator::adapter::{AdapterResult, FileOracle, FitJob, SampleRef, TrainerAdapter};
use asfda_core::orchestrator::manifest::{DatasetManifest, RunConfig, SampleEntry};
use asfda_core::tensor::{label_tensor, read_tensor, write_tensor, EmbeddingVec, ProbVolume, Shape3, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SIDE: usize = 5;
pub const CLASSES: usize = 3;

/// Small deterministic stand-in for a learner: one scalar of state that
/// moves with every fit.
#[derive(Default)]
pub struct MockTrainer {
    pub fail_next_fit: AtomicBool,
}

#[derive(Serialize, Deserialize)]
struct MockModel {
    w: f64,
}

fn read_model(p: &Path) -> AdapterResult<f64> {
    let m: MockModel = serde_json::from_slice(&std::fs::read(p)?)?;
    Ok(m.w)
}

fn write_model(p: &Path, w: f64) -> AdapterResult<()> {
    asfda_core::fsutil::write_json(p, &MockModel { w })?;
    Ok(())
}

fn image(sample: &SampleRef) -> AdapterResult<Vec<f64>> {
    Ok(read_tensor(&sample.image)?.data().iter().map(|&x| x as f64).collect())
}

impl TrainerAdapter for MockTrainer {
    fn pretrained(&self, out: &Path) -> AdapterResult<()> {
        write_model(out, 0.0)
    }

    fn fit(&self, job: &FitJob, out: &Path) -> AdapterResult<()> {
        if self.fail_next_fit.swap(false, Ordering::SeqCst) {
            return Err("injected fit failure".into());
        }
        let mut w = match &job.init {
            Some(p) => read_model(p)?,
            None => 0.0,
        };
        for pair in job.labeled.iter().chain(&job.pseudo) {
            let lbl = read_tensor(&pair.label)?;
            let fg = lbl.data().iter().filter(|&&x| x > 0.0).count() as f64;
            w += 0.05 + fg / (lbl.len() as f64 * 50.0);
        }
        w += (job.seed % 97) as f64 * 1e-4 + job.epochs as f64 * 1e-3;
        write_model(out, w)
    }

    fn embed(&self, model: &Path, sample: &SampleRef, encoder_round: u32) -> AdapterResult<EmbeddingVec> {
        let w = read_model(model)?;
        let x = image(sample)?;
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut v = vec![1.0, mean, var.sqrt()];
        for chunk in x.chunks(x.len() / 5 + 1) {
            v.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
        }
        for (i, e) in v.iter_mut().enumerate() {
            *e += w * ((i as f64 + 1.0) * mean * 7.0).sin();
        }
        Ok(EmbeddingVec::new(&sample.id, encoder_round, v)?)
    }

    fn predict(&self, model: &Path, sample: &SampleRef) -> AdapterResult<ProbVolume> {
        let w = read_model(model)?;
        let x = image(sample)?;
        let v = x.len();
        let mut data = vec![0f32; CLASSES * v];
        for (i, &xi) in x.iter().enumerate() {
            let logits = [1.0 - xi * (1.0 + w), xi * (2.0 + w) - 0.5, (xi - 0.5).abs() * w];
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..CLASSES {
                data[c * v + i] = (e[c] / s) as f32;
            }
        }
        Ok(ProbVolume::new(
            &sample.id,
            Tensor::new(vec![CLASSES, SIDE, SIDE, SIDE], data)?,
        )?)
    }
}

/// Writes `n` random images and threshold labels; returns the manifest and
/// an oracle over the label files.
pub fn make_dataset(dir: &Path, n: usize, config: RunConfig) -> (DatasetManifest, FileOracle) {
    let shape = Shape3::new(SIDE, SIDE, SIDE);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let id = format!("t{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let bias: f64 = rng.gen_range(-0.3..0.3);
        let img: Vec<f32> = (0..shape.voxels())
            .map(|_| (rng.gen::<f64>() * 0.6 + 0.2 + bias).clamp(0.0, 1.0) as f32)
            .collect();
        let lbl: Vec<u8> = img
            .iter()
            .map(|&x| {
                if x > 0.7 {
                    2
                } else if x > 0.45 {
                    1
                } else {
                    0
                }
            })
            .collect();
        let image: PathBuf = dir.join(format!("img/{id}.asft"));
        let label: PathBuf = dir.join(format!("lbl/{id}.asft"));
        write_tensor(&Tensor::new(vec![SIDE, SIDE, SIDE], img).unwrap(), &image).unwrap();
        write_tensor(&label_tensor(shape, &lbl).unwrap(), &label).unwrap();
        labels.push((id.clone(), label.clone()));
        samples.push(SampleEntry {
            id,
            domain: "target".into(),
            image,
            label: Some(label),
        });
    }
    (DatasetManifest { samples, config }, FileOracle::new(labels))
}

pub fn config(n_b: usize, r_max: u32) -> RunConfig {
    let mut c = RunConfig::new(n_b, r_max);
    c.seed = 11;
    c.init_epochs = 2;
    c.stage1_epochs = 2;
    c.stage3_epochs = 2;
    c
}

/// Every file under `dir`, relative path to contents, sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

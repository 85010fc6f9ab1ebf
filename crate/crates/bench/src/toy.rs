//! A tiny native segmentation learner.
//!
//! Each voxel is described by five handcrafted features: intensity,
//! 3×3×3 box-smoothed intensity and normalized `x, y, z`. The model keeps a
//! bank of prototype groups, one per training volume (merged down to a cap),
//! each holding one prototype per class. A class logit is the log-sum-exp
//! over groups of the negative weighted squared distance, plus a class bias.
//! Groups also carry the intensity quantiles of their volumes; an image's
//! quantiles give a fixed log-prior over groups, so a volume leans on the
//! groups that were trained on similar-looking volumes.
//!
//! Training minimizes soft-Dice + cross-entropy by gradient descent with a
//! backtracking step, so the loss never increases between epochs.

use std::collections::HashMap;
use std::path::Path;

use asfda_core::fsutil::{read_json, write_json};
use asfda_core::orchestrator::adapter::{AdapterResult, FitJob, SampleRef, TrainPair, TrainerAdapter};
use asfda_core::tensor::{labels_from_tensor, read_tensor, EmbeddingVec, ProbVolume, Shape3, Tensor};
use asfda_core::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const FEATURES: usize = 5;
/// Intensity quantiles in a volume signature.
pub const SIGNATURE: usize = 9;
const DICE_EPS: f64 = 1e-6;
/// Prototype placed for a class absent from every training volume.
const FAR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub classes: usize,
    /// Softmax temperature on squared feature distances.
    pub temperature: f64,
    pub spatial_weight: f64,
    pub max_groups: usize,
    /// Training voxels drawn per volume.
    pub voxels_per_volume: usize,
    /// Source volumes used for the pretrained model.
    pub pretrain_volumes: usize,
    pub pretrain_epochs: u32,
    pub initial_step: f64,
    /// Temperature of the signature gate; 0 weighs all groups equally.
    pub gate_temperature: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 4,
            temperature: 0.01,
            spatial_weight: 0.15,
            max_groups: 12,
            voxels_per_volume: 1500,
            pretrain_volumes: 6,
            pretrain_epochs: 30,
            initial_step: 1e-3,
            gate_temperature: 2e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    /// Training volume ids merged into this group, `+`-joined.
    pub key: String,
    pub weight: f64,
    /// `classes × FEATURES`, row-major.
    pub protos: Vec<f64>,
    /// Weighted mean intensity quantiles of the member volumes.
    pub signature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub classes: usize,
    pub temperature: f64,
    pub gate_temperature: f64,
    pub feature_weights: [f64; FEATURES],
    pub groups: Vec<Group>,
    pub bias: Vec<f64>,
}

/// Per-voxel feature rows of one image.
pub struct Features {
    pub shape: Shape3,
    pub rows: Vec<[f64; FEATURES]>,
    pub signature: Vec<f64>,
}

/// Evenly spaced intensity quantiles.
pub fn signature(values: &[f32]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    (0..SIGNATURE)
        .map(|k| {
            let i = ((k as f64 + 0.5) / SIGNATURE as f64 * v.len() as f64) as usize;
            v.get(i.min(v.len().saturating_sub(1))).copied().unwrap_or(0.0)
        })
        .collect()
}

pub fn features(image: &Tensor) -> Result<Features> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("images are H×W×D, got {s:?}")));
    }
    let shape = Shape3::new(s[0], s[1], s[2]);
    let [h, w, d] = shape.dims();
    let x = image.data();
    let mut rows = Vec::with_capacity(shape.voxels());
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let mut sum = 0.0;
                let mut n = 0.0;
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        for kk in k.saturating_sub(1)..(k + 2).min(d) {
                            sum += x[shape.index(ii, jj, kk)] as f64;
                            n += 1.0;
                        }
                    }
                }
                rows.push([
                    x[shape.index(i, j, k)] as f64,
                    sum / n,
                    (i as f64 + 0.5) / h as f64,
                    (j as f64 + 0.5) / w as f64,
                    (k as f64 + 0.5) / d as f64,
                ]);
            }
        }
    }
    Ok(Features {
        shape,
        rows,
        signature: signature(x),
    })
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Forward pass of one voxel.
struct Voxel {
    /// `groups × classes` scores.
    scores: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl ToyModel {
    fn proto(&self, g: usize, c: usize) -> &[f64] {
        &self.groups[g].protos[c * FEATURES..(c + 1) * FEATURES]
    }

    /// Log-prior over groups for an image with signature `sig`.
    pub fn gates(&self, sig: &[f64]) -> Vec<f64> {
        let gn = self.groups.len();
        if self.gate_temperature <= 0.0 || self.groups.iter().any(|g| g.signature.len() != sig.len()) {
            return vec![0.0; gn];
        }
        let raw: Vec<f64> = self
            .groups
            .iter()
            .map(|g| {
                let d: f64 = g.signature.iter().zip(sig).map(|(a, b)| (a - b) * (a - b)).sum();
                -d / sig.len().max(1) as f64 / self.gate_temperature
            })
            .collect();
        let z = lse(&raw);
        raw.iter().map(|r| r - z).collect()
    }

    fn forward(&self, f: &[f64; FEATURES], gates: &[f64]) -> Voxel {
        let (gn, cn) = (self.groups.len(), self.classes);
        let mut scores = vec![0.0; gn * cn];
        for g in 0..gn {
            for c in 0..cn {
                let m = self.proto(g, c);
                let mut dist = 0.0;
                for j in 0..FEATURES {
                    let diff = f[j] - m[j];
                    dist += self.feature_weights[j] * diff * diff;
                }
                scores[g * cn + c] = gates[g] - dist / self.temperature;
            }
        }
        let mut col = vec![0.0; gn];
        let logits: Vec<f64> = (0..cn)
            .map(|c| {
                for g in 0..gn {
                    col[g] = scores[g * cn + c];
                }
                lse(&col) + self.bias[c]
            })
            .collect();
        let z = lse(&logits);
        let probs = logits.iter().map(|l| (l - z).exp()).collect();
        Voxel { scores, logits, probs }
    }

    /// Class posteriors `C×H×W×D`.
    pub fn predict(&self, id: &str, feats: &Features) -> Result<ProbVolume> {
        let v = feats.rows.len();
        let mut data = vec![0f32; self.classes * v];
        let gates = self.gates(&feats.signature);
        for (i, f) in feats.rows.iter().enumerate() {
            let out = self.forward(f, &gates);
            // Renormalize after the f32 cast so the sum check holds.
            let p32: Vec<f32> = out.probs.iter().map(|&p| p as f32).collect();
            let s: f32 = p32.iter().sum();
            for c in 0..self.classes {
                data[c * v + i] = p32[c] / s;
            }
        }
        let mut shape = vec![self.classes];
        shape.extend(feats.shape.dims());
        ProbVolume::new(id, Tensor::new(shape, data)?)
    }

    /// Mean and standard deviation over voxels of each class posterior and
    /// of each class's best-group affinity.
    pub fn embed(&self, feats: &Features) -> Vec<f64> {
        let cn = self.classes;
        let mut sum = vec![0.0; 2 * cn];
        let mut sq = vec![0.0; 2 * cn];
        let gates = self.gates(&feats.signature);
        for f in &feats.rows {
            let out = self.forward(f, &gates);
            for c in 0..cn {
                let best = (0..self.groups.len())
                    .map(|g| out.scores[g * cn + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                let vals = [out.probs[c], best.exp()];
                for (k, v) in vals.iter().enumerate() {
                    sum[k * cn + c] += v;
                    sq[k * cn + c] += v * v;
                }
            }
        }
        let n = feats.rows.len() as f64;
        let mut out = Vec::with_capacity(4 * cn);
        for k in 0..2 {
            for c in 0..cn {
                let mean = sum[k * cn + c] / n;
                let var = (sq[k * cn + c] / n - mean * mean).max(0.0);
                out.push(mean);
                out.push(var.sqrt());
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Training voxels of one volume.
struct TrainSet {
    key: String,
    rows: Vec<[f64; FEATURES]>,
    labels: Vec<u8>,
    signature: Vec<f64>,
}

fn load_pair(pair: &TrainPair, classes: usize, n: usize, seed: u64) -> Result<TrainSet> {
    let feats = features(&read_tensor(&pair.image)?)?;
    let (shape, labels) = labels_from_tensor(&read_tensor(&pair.label)?)?;
    if shape != feats.shape {
        return Err(Error::Dimension(format!(
            "label of {} is {:?}, image is {:?}",
            pair.id, shape, feats.shape
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Domain(format!(
            "label {bad} of {} outside {classes} classes",
            pair.id
        )));
    }
    let total = labels.len();
    let idx: Vec<usize> = if n >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv(&pair.id));
        let mut v = sample(&mut rng, total, n).into_vec();
        v.sort_unstable();
        v
    };
    Ok(TrainSet {
        key: pair.id.clone(),
        rows: idx.iter().map(|&i| feats.rows[i]).collect(),
        labels: idx.iter().map(|&i| labels[i]).collect(),
        signature: feats.signature,
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Per-volume class means; classes absent from a volume borrow the pooled mean.
fn closed_form_groups(sets: &[TrainSet], classes: usize) -> Vec<Group> {
    let mut pooled = vec![[0.0; FEATURES]; classes];
    let mut pooled_n = vec![0.0; classes];
    let per: Vec<(Vec<[f64; FEATURES]>, Vec<f64>)> = sets
        .iter()
        .map(|s| {
            let mut m = vec![[0.0; FEATURES]; classes];
            let mut n = vec![0.0; classes];
            for (r, &l) in s.rows.iter().zip(&s.labels) {
                for j in 0..FEATURES {
                    m[l as usize][j] += r[j];
                }
                n[l as usize] += 1.0;
            }
            for c in 0..classes {
                for j in 0..FEATURES {
                    pooled[c][j] += m[c][j];
                }
                pooled_n[c] += n[c];
            }
            (m, n)
        })
        .collect();
    sets.iter()
        .zip(per)
        .map(|(s, (m, n))| {
            let mut protos = Vec::with_capacity(classes * FEATURES);
            for c in 0..classes {
                for j in 0..FEATURES {
                    protos.push(if n[c] > 0.0 {
                        m[c][j] / n[c]
                    } else if pooled_n[c] > 0.0 {
                        pooled[c][j] / pooled_n[c]
                    } else {
                        FAR
                    });
                }
            }
            Group {
                key: s.key.clone(),
                weight: s.rows.len() as f64,
                protos,
                signature: s.signature.clone(),
            }
        })
        .collect()
}

/// Merges the closest pair of groups until at most `cap` remain.
fn merge_groups(mut groups: Vec<Group>, cap: usize) -> Vec<Group> {
    while groups.len() > cap.max(1) {
        let mut best = (f64::INFINITY, 0, 1);
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let (ga, gb) = (&groups[a], &groups[b]);
                let d: f64 = ga
                    .protos
                    .iter()
                    .zip(&gb.protos)
                    .chain(ga.signature.iter().zip(&gb.signature))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let gb = groups.remove(b);
        let ga = &mut groups[a];
        let total = ga.weight + gb.weight;
        for (x, y) in ga.protos.iter_mut().zip(&gb.protos) {
            *x = (*x * ga.weight + *y * gb.weight) / total;
        }
        if ga.signature.len() == gb.signature.len() {
            for (x, y) in ga.signature.iter_mut().zip(&gb.signature) {
                *x = (*x * ga.weight + *y * gb.weight) / total;
            }
        }
        ga.weight = total;
        ga.key = format!("{}+{}", ga.key, gb.key);
    }
    groups
}

/// Loss and gradient over all training voxels.
fn loss_and_grad(model: &ToyModel, sets: &[TrainSet]) -> (f64, Vec<f64>) {
    let (gn, cn) = (model.groups.len(), model.classes);
    let np = gn * cn * FEATURES;
    let total_voxels: usize = sets.iter().map(|s| s.rows.len()).sum();

    // First pass: Dice statistics, summed per class in a fixed order.
    let stats: Vec<(Vec<f64>, Vec<f64>)> = sets
        .par_iter()
        .map(|s| {
            let mut inter = vec![0.0; cn];
            let mut size = vec![0.0; cn];
            let gates = model.gates(&s.signature);
            for (r, &l) in s.rows.iter().zip(&s.labels) {
                let p = model.forward(r, &gates).probs;
                for c in 0..cn {
                    size[c] += p[c];
                }
                inter[l as usize] += p[l as usize];
                size[l as usize] += 1.0;
            }
            (inter, size)
        })
        .collect();
    let mut inter = vec![0.0; cn];
    let mut size = vec![0.0; cn];
    for (i, s) in &stats {
        for c in 0..cn {
            inter[c] += i[c];
            size[c] += s[c];
        }
    }
    let dice: Vec<f64> = (0..cn)
        .map(|c| (2.0 * inter[c] + DICE_EPS) / (size[c] + DICE_EPS))
        .collect();
    let dice_loss = 1.0 - dice.iter().sum::<f64>() / cn as f64;

    // Second pass: cross-entropy and the full gradient.
    let parts: Vec<(f64, Vec<f64>)> = sets
        .par_iter()
        .map(|s| {
            let mut ce = 0.0;
            let mut grad = vec![0.0; np + cn];
            let mut dl = vec![0.0; cn];
            let gates = model.gates(&s.signature);
            for (r, &l) in s.rows.iter().zip(&s.labels) {
                let out = model.forward(r, &gates);
                let y = l as usize;
                ce -= (out.probs[y]).max(1e-300).ln();
                // dDice/dp_c, then through the softmax.
                let g: Vec<f64> = (0..cn)
                    .map(|c| {
                        let yc = if c == y { 1.0 } else { 0.0 };
                        let sc = size[c] + DICE_EPS;
                        -(2.0 * yc * sc - (2.0 * inter[c] + DICE_EPS)) / (sc * sc) / cn as f64
                    })
                    .collect();
                let pg: f64 = (0..cn).map(|c| out.probs[c] * g[c]).sum();
                for c in 0..cn {
                    let yc = if c == y { 1.0 } else { 0.0 };
                    dl[c] = (out.probs[c] - yc) / total_voxels as f64 + out.probs[c] * (g[c] - pg);
                }
                for c in 0..cn {
                    let col: Vec<f64> = (0..gn).map(|g| out.scores[g * cn + c]).collect();
                    let lz = out.logits[c] - model.bias[c];
                    for (g, &score) in col.iter().enumerate() {
                        let resp = (score - lz).exp();
                        let m = model.proto(g, c);
                        let base = (g * cn + c) * FEATURES;
                        for j in 0..FEATURES {
                            grad[base + j] +=
                                dl[c] * resp * 2.0 * model.feature_weights[j] * (r[j] - m[j]) / model.temperature;
                        }
                    }
                    grad[np + c] += dl[c];
                }
            }
            (ce, grad)
        })
        .collect();
    let mut ce = 0.0;
    let mut grad = vec![0.0; np + cn];
    for (c, g) in &parts {
        ce += c;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (ce / total_voxels as f64 + dice_loss, grad)
}

fn loss(model: &ToyModel, sets: &[TrainSet]) -> f64 {
    let (cn, total) = (model.classes, sets.iter().map(|s| s.rows.len()).sum::<usize>());
    let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = sets
        .par_iter()
        .map(|s| {
            let mut ce = 0.0;
            let mut inter = vec![0.0; cn];
            let mut size = vec![0.0; cn];
            let gates = model.gates(&s.signature);
            for (r, &l) in s.rows.iter().zip(&s.labels) {
                let p = model.forward(r, &gates).probs;
                ce -= p[l as usize].max(1e-300).ln();
                for c in 0..cn {
                    size[c] += p[c];
                }
                inter[l as usize] += p[l as usize];
                size[l as usize] += 1.0;
            }
            (ce, inter, size)
        })
        .collect();
    let mut ce = 0.0;
    let mut inter = vec![0.0; cn];
    let mut size = vec![0.0; cn];
    for (c, i, s) in &parts {
        ce += c;
        for k in 0..cn {
            inter[k] += i[k];
            size[k] += s[k];
        }
    }
    let dice: f64 = (0..cn)
        .map(|c| (2.0 * inter[c] + DICE_EPS) / (size[c] + DICE_EPS))
        .sum::<f64>()
        / cn as f64;
    ce / total as f64 + 1.0 - dice
}

fn apply_step(model: &ToyModel, grad: &[f64], step: f64) -> ToyModel {
    let mut next = model.clone();
    let cn = model.classes;
    let np = model.groups.len() * cn * FEATURES;
    for (g, group) in next.groups.iter_mut().enumerate() {
        for (k, p) in group.protos.iter_mut().enumerate() {
            *p -= step * grad[g * cn * FEATURES + k];
        }
    }
    for c in 0..cn {
        next.bias[c] -= step * grad[np + c];
    }
    next
}

/// Fit report: loss before training and after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub losses: Vec<f64>,
}

/// Trains a model on labeled (and pseudo-labeled) volumes.
pub fn toy_fit(
    cfg: &ToyConfig,
    init: Option<&ToyModel>,
    labeled: &[TrainPair],
    pseudo: &[TrainPair],
    epochs: u32,
    seed: u64,
) -> Result<(ToyModel, FitTrace)> {
    if labeled.is_empty() {
        return Err(Error::Domain("toy fit needs at least one labeled volume".into()));
    }
    let sets: Vec<TrainSet> = labeled
        .iter()
        .chain(pseudo)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| load_pair(p, cfg.classes, cfg.voxels_per_volume, seed))
        .collect::<Result<_>>()?;

    let mut groups = closed_form_groups(&sets, cfg.classes);
    if let Some(init) = init {
        let warm: HashMap<&str, &Group> = init.groups.iter().map(|g| (g.key.as_str(), g)).collect();
        for g in &mut groups {
            if let Some(w) = warm.get(g.key.as_str()) {
                if w.protos.len() == g.protos.len() {
                    g.protos = w.protos.clone();
                }
            }
        }
    }
    let groups = merge_groups(groups, cfg.max_groups);
    let sw = cfg.spatial_weight;
    let mut model = ToyModel {
        classes: cfg.classes,
        temperature: cfg.temperature,
        gate_temperature: cfg.gate_temperature,
        feature_weights: [1.0, 1.0, sw, sw, sw],
        groups,
        bias: match init {
            Some(m) if m.bias.len() == cfg.classes => m.bias.clone(),
            _ => vec![0.0; cfg.classes],
        },
    };

    let mut losses = vec![loss(&model, &sets)];
    let mut step = cfg.initial_step;
    for _ in 0..epochs {
        let (current, grad) = loss_and_grad(&model, &sets);
        let mut accepted = false;
        for _ in 0..30 {
            let cand = apply_step(&model, &grad, step);
            let l = loss(&cand, &sets);
            if l <= current {
                model = cand;
                losses.push(l);
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            losses.push(current);
        }
    }
    Ok((model, FitTrace { losses }))
}

/// In-process trainer over image and label files.
#[derive(Debug, Clone)]
pub struct ToyTrainer {
    pub cfg: ToyConfig,
    /// Source-domain pairs for the pretrained model.
    pub source: Vec<TrainPair>,
}

impl ToyTrainer {
    pub fn new(cfg: ToyConfig, mut source: Vec<TrainPair>) -> Self {
        source.sort_by(|a, b| a.id.cmp(&b.id));
        source.truncate(cfg.pretrain_volumes);
        ToyTrainer { cfg, source }
    }

    pub fn from_manifest(cfg: ToyConfig, dataset: &asfda_core::orchestrator::manifest::DatasetManifest) -> Self {
        let source = dataset
            .samples_in_domain(crate::synth::SOURCE)
            .into_iter()
            .filter_map(|s| {
                Some(TrainPair {
                    id: s.id.clone(),
                    image: s.image.clone(),
                    label: s.label.clone()?,
                })
            })
            .collect();
        ToyTrainer::new(cfg, source)
    }

    pub fn features_of(&self, image: &Path) -> Result<Features> {
        features(&read_tensor(image)?)
    }
}

impl TrainerAdapter for ToyTrainer {
    fn pretrained(&self, out: &Path) -> AdapterResult<()> {
        let (m, _) = toy_fit(&self.cfg, None, &self.source, &[], self.cfg.pretrain_epochs, 0)?;
        m.write(out)?;
        Ok(())
    }

    fn fit(&self, job: &FitJob, out: &Path) -> AdapterResult<()> {
        let init = job.init.as_deref().map(ToyModel::read).transpose()?;
        let (m, _) = toy_fit(
            &self.cfg,
            init.as_ref(),
            &job.labeled,
            &job.pseudo,
            job.epochs,
            job.seed,
        )?;
        m.write(out)?;
        Ok(())
    }

    fn embed(&self, model: &Path, sample: &SampleRef, encoder_round: u32) -> AdapterResult<EmbeddingVec> {
        let m = ToyModel::read(model)?;
        let f = self.features_of(&sample.image)?;
        Ok(EmbeddingVec::new(&sample.id, encoder_round, m.embed(&f))?)
    }

    fn predict(&self, model: &Path, sample: &SampleRef) -> AdapterResult<ProbVolume> {
        let m = ToyModel::read(model)?;
        let f = self.features_of(&sample.image)?;
        Ok(m.predict(&sample.id, &f)?)
    }
}

/// Path-free helper for evaluation code: predicted labels of an image.
pub fn predict_labels(model: &ToyModel, image: &Path) -> Result<(Shape3, Vec<u8>)> {
    let f = features(&read_tensor(image)?)?;
    let p = model.predict("eval", &f)?;
    Ok((p.spatial(), p.argmax_labels()))
}

//! Synthetic two-domain volumes: smooth blob "organs" with class-dependent
//! intensities. Target volumes come from a few acquisition modes, each
//! shifting class intensities, noise and organ size by a per-sample severity.

use std::path::{Path, PathBuf};

use asfda_core::orchestrator::manifest::{DatasetManifest, RunConfig, SampleEntry};
use asfda_core::tensor::{label_tensor, write_tensor, Shape3, Tensor};
use asfda_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";

/// Class intensity means in the source domain, background first.
const SOURCE_MEANS: [f64; 8] = [0.15, 0.42, 0.62, 0.85, 0.3, 0.72, 0.52, 0.95];
/// Organ centers in normalized coordinates.
const ANCHORS: [[f64; 3]; 7] = [
    [0.36, 0.40, 0.50],
    [0.64, 0.44, 0.48],
    [0.50, 0.70, 0.42],
    [0.30, 0.68, 0.60],
    [0.68, 0.70, 0.62],
    [0.50, 0.28, 0.36],
    [0.50, 0.50, 0.72],
];
/// Organ radii as a fraction of the volume side.
const RADII: [f64; 7] = [0.22, 0.17, 0.13, 0.12, 0.11, 0.10, 0.10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub shape: [usize; 3],
    pub classes: usize,
    pub samples_per_domain: usize,
    /// Largest class-intensity offset of a target sample, as a fraction of
    /// the gap to the neighboring class mean in the shift direction.
    pub intensity_offset: f64,
    /// Largest extra noise σ of a target sample.
    pub noise_sigma: f64,
    /// Largest relative organ radius change of a target sample.
    pub size_scale: f64,
    /// Number of target acquisition modes.
    pub modes: usize,
    /// Noise σ shared by both domains.
    pub base_noise: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_field: f64,
    pub allow_absent: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            shape: [24, 24, 24],
            classes: 4,
            samples_per_domain: 40,
            intensity_offset: 1.0,
            noise_sigma: 0.06,
            size_scale: 0.15,
            modes: 4,
            base_noise: 0.05,
            bias_field: 0.08,
            allow_absent: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 8 {
            return Err(Error::Domain(format!(
                "classes must be in [2, 8], got {}",
                self.classes
            )));
        }
        if self.shape.iter().any(|&s| s < 4) {
            return Err(Error::Domain(format!("volume sides must be ≥ 4, got {:?}", self.shape)));
        }
        if self.samples_per_domain == 0 || self.modes == 0 {
            return Err(Error::Domain("need at least one sample and one mode".into()));
        }
        let nonneg = [
            self.intensity_offset,
            self.noise_sigma,
            self.size_scale,
            self.base_noise,
            self.bias_field,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("shift parameters must be finite and ≥ 0".into()));
        }
        if self.size_scale >= 1.0 {
            return Err(Error::Domain("size_scale must be < 1".into()));
        }
        Ok(())
    }

    pub fn shape3(&self) -> Shape3 {
        Shape3::new(self.shape[0], self.shape[1], self.shape[2])
    }
}

/// One generated volume.
#[derive(Debug, Clone)]
pub struct Volume {
    pub id: String,
    pub domain: &'static str,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub mode: usize,
    pub severity: f64,
}

fn stream(seed: u64, domain_free_index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain_free_index * 16 + purpose);
    rng
}

/// Per-mode class intensity offsets (at severity 1) and organ size direction,
/// fixed by the seed. Every mode shifts intensities the same way; rarer modes
/// shift further. Offsets stay below the gap to the neighboring class, so
/// class order is preserved.
fn mode_table(cfg: &SynthConfig) -> Vec<(Vec<f64>, f64)> {
    let mut rng = stream(cfg.seed, u64::MAX / 32, 0);
    let up = rng.gen_bool(0.5);
    let means = &SOURCE_MEANS[..cfg.classes];
    let gap = |c: usize| {
        let mut best = if up { 1.0 - means[c] } else { means[c] };
        for (k, &m) in means.iter().enumerate() {
            let d = if up { m - means[c] } else { means[c] - m };
            if k != c && d > 0.0 {
                best = best.min(d);
            }
        }
        best
    };
    let sign = if up { 1.0 } else { -1.0 };
    (0..cfg.modes)
        .map(|m| {
            let level = cfg.intensity_offset * (m + 1) as f64 / cfg.modes as f64;
            let offsets = (0..cfg.classes)
                .map(|c| sign * level * rng.gen_range(0.7..1.0) * gap(c))
                .collect();
            let size = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (offsets, size)
        })
        .collect()
}

/// Mode probabilities fall off geometrically so later modes are rare.
fn pick_mode(rng: &mut ChaCha8Rng, modes: usize) -> usize {
    let weights: Vec<f64> = (0..modes).map(|m| 0.6f64.powi(m as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (m, w) in weights.iter().enumerate() {
        if u < *w {
            return m;
        }
        u -= w;
    }
    modes - 1
}

/// Sum of a few random plane waves, roughly in `[-1, 1]`.
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, n: usize, freq: f64) -> Self {
        let waves = (0..n)
            .map(|_| {
                let k = [
                    rng.gen_range(-freq..freq),
                    rng.gen_range(-freq..freq),
                    rng.gen_range(-freq..freq),
                ];
                (k, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        SmoothField { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .sum();
        s / self.waves.len() as f64
    }
}

/// Generates sample `index` of `domain`. The anatomy and noise draws depend
/// only on `(seed, index)`, so a zero shift reproduces the source volume.
pub fn generate_volume(cfg: &SynthConfig, domain: &'static str, index: usize) -> Volume {
    let shape = cfg.shape3();
    let fg = cfg.classes - 1;
    let mut anatomy = stream(cfg.seed, index as u64, 1);
    let mut texture = stream(cfg.seed, index as u64, 2);
    let mut shift = stream(cfg.seed, index as u64, 3);

    let (mode, severity) = if domain == TARGET {
        (pick_mode(&mut shift, cfg.modes), shift.gen_range(0.4..1.0))
    } else {
        (0, 0.0)
    };
    let table = mode_table(cfg);
    let (offsets, size_dir) = &table[mode];
    let size_factor = 1.0 + cfg.size_scale * severity * size_dir;

    struct Organ {
        center: [f64; 3],
        radii: [f64; 3],
        wobble: SmoothField,
    }
    let organs: Vec<Organ> = (0..fg)
        .map(|o| {
            let a = ANCHORS[o % ANCHORS.len()];
            let center = [
                a[0] + anatomy.gen_range(-0.07..0.07),
                a[1] + anatomy.gen_range(-0.07..0.07),
                a[2] + anatomy.gen_range(-0.07..0.07),
            ];
            let base = RADII[o % RADII.len()];
            let radii = [
                base * anatomy.gen_range(0.8..1.2) * size_factor,
                base * anatomy.gen_range(0.8..1.2) * size_factor,
                base * anatomy.gen_range(0.8..1.2) * size_factor,
            ];
            Organ {
                center,
                radii,
                wobble: SmoothField::new(&mut anatomy, 4, 9.0),
            }
        })
        .collect();
    let bias = SmoothField::new(&mut anatomy, 3, 4.0);

    let [h, w, d] = shape.dims();
    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
    let mut labels = vec![0u8; shape.voxels()];
    let mut counts = vec![0usize; cfg.classes];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let p = [coord(i, h), coord(j, w), coord(k, d)];
                let mut best = (0.0, 0u8);
                for (o, org) in organs.iter().enumerate() {
                    let r2: f64 = (0..3).map(|a| ((p[a] - org.center[a]) / org.radii[a]).powi(2)).sum();
                    let f = 1.0 - r2 + 0.3 * org.wobble.at(p);
                    if f > best.0 {
                        best = (f, o as u8 + 1);
                    }
                }
                let idx = shape.index(i, j, k);
                labels[idx] = best.1;
                counts[best.1 as usize] += 1;
            }
        }
    }
    if !cfg.allow_absent {
        for (o, org) in organs.iter().enumerate() {
            if counts[o + 1] == 0 {
                let at = |c: f64, n: usize| ((c * n as f64) as usize).min(n - 1);
                let idx = shape.index(at(org.center[0], h), at(org.center[1], w), at(org.center[2], d));
                labels[idx] = o as u8 + 1;
            }
        }
    }

    let sigma = (cfg.base_noise.powi(2) + (cfg.noise_sigma * severity).powi(2)).sqrt();
    let mut image = vec![0f32; shape.voxels()];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let idx = shape.index(i, j, k);
                let c = labels[idx] as usize;
                let p = [coord(i, h), coord(j, w), coord(k, d)];
                let mean = SOURCE_MEANS[c] + severity * offsets[c];
                let z: f64 = texture.sample(StandardNormal);
                let v = mean * (1.0 + cfg.bias_field * bias.at(p)) + sigma * z;
                image[idx] = v as f32;
            }
        }
    }

    let prefix = if domain == TARGET { "tgt" } else { "src" };
    Volume {
        id: format!("{prefix}{index:03}"),
        domain,
        image,
        labels,
        mode,
        severity,
    }
}

/// Paths of a generated dataset.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    /// `(id, mode, severity)` of every target sample.
    pub target_info: Vec<(String, usize, f64)>,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

/// Writes images, labels and `dataset.json` (relative paths) under `out`.
pub fn generate_dataset(cfg: &SynthConfig, run: RunConfig, out: &Path) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let shape = cfg.shape3();
    let mut samples = Vec::new();
    let mut target_info = Vec::new();
    for domain in [SOURCE, TARGET] {
        for i in 0..cfg.samples_per_domain {
            let v = generate_volume(cfg, domain, i);
            let image = PathBuf::from(format!("{domain}/img/{}.asft", v.id));
            let label = PathBuf::from(format!("{domain}/lbl/{}.asft", v.id));
            write_tensor(&Tensor::new(shape.dims().to_vec(), v.image)?, out.join(&image))?;
            write_tensor(&label_tensor(shape, &v.labels)?, out.join(&label))?;
            if domain == TARGET {
                target_info.push((v.id.clone(), v.mode, v.severity));
            }
            samples.push(SampleEntry {
                id: v.id,
                domain: domain.to_string(),
                image,
                label: Some(label),
            });
        }
    }
    let mut run = run;
    run.target_domain = Some(TARGET.to_string());
    let manifest = DatasetManifest { samples, config: run };
    let manifest_path = out.join(DATASET_MANIFEST);
    manifest.write(&manifest_path)?;
    Ok(GeneratedDataset {
        manifest: DatasetManifest::read(&manifest_path)?,
        manifest_path,
        target_info,
    })
}

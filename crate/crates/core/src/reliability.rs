//! Reliable pseudo-label selection: foreground-margin confidence, a
//! confidence-driven candidate pool, nearest-anchor semantic distance, and
//! the resulting reliability ranking. The selected samples also feed the
//! query exclusion set.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_string, write_atomic};
use crate::query::rank_descending;
use crate::scores::{fmt_g9, parse_f64, ScoreVector};
use crate::tensor::{cosine_distance, BinaryMask, EmbeddingVec, ProbVolume};

pub const DEFAULT_TAU_C: f64 = 2.0;

/// How per-voxel margins are summarized into one confidence value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceVariant {
    /// Mean margin over predicted-foreground voxels, in `[0, 1]`.
    #[default]
    Mean,
    /// Raw margin sum over the volume.
    Sum,
}

impl FromStr for ConfidenceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ConfidenceVariant::Mean),
            "sum" => Ok(ConfidenceVariant::Sum),
            other => Err(Error::Domain(format!(
                "confidence variant {other:?}, expected mean or sum"
            ))),
        }
    }
}

impl std::fmt::Display for ConfidenceVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConfidenceVariant::Mean => "mean",
            ConfidenceVariant::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub n_su: usize,
    pub tau_c: f64,
    pub variant: ConfidenceVariant,
}

impl SelectionConfig {
    pub fn new(n_su: usize, tau_c: f64) -> Result<Self> {
        if n_su == 0 {
            return Err(Error::Budget("n_su must be at least 1".into()));
        }
        if !tau_c.is_finite() || tau_c <= 0.0 {
            return Err(Error::Domain(format!("tau_c {tau_c} must be positive")));
        }
        Ok(SelectionConfig {
            n_su,
            tau_c,
            variant: ConfidenceVariant::Mean,
        })
    }

    pub fn with_variant(mut self, variant: ConfidenceVariant) -> Self {
        self.variant = variant;
        self
    }
}

/// Argmax is a foreground class; ties resolve toward the lower index.
pub fn predicted_foreground_mask(p: &ProbVolume) -> Result<BinaryMask> {
    if p.classes() < 2 {
        return Err(Error::Domain(format!(
            "{} has {} class(es); no foreground classes exist",
            p.sample_id(),
            p.classes()
        )));
    }
    let mask = p.argmax_labels().into_iter().map(|l| l != 0).collect();
    BinaryMask::new(p.spatial(), mask)
}

/// Top-1 minus top-2 class probability (order statistics) per voxel.
pub fn voxel_margins(p: &ProbVolume) -> Vec<f64> {
    let v = p.spatial().voxels();
    let mut top = vec![f64::NEG_INFINITY; v];
    let mut second = vec![f64::NEG_INFINITY; v];
    for c in 0..p.classes() {
        for ((t, s), &x) in top.iter_mut().zip(second.iter_mut()).zip(p.channel(c)) {
            let x = x as f64;
            if x > *t {
                *s = *t;
                *t = x;
            } else if x > *s {
                *s = x;
            }
        }
    }
    top.into_iter()
        .zip(second)
        .map(|(t, s)| if s.is_finite() { t - s } else { t })
        .collect()
}

/// Foreground prediction margin of one volume. Zero predicted-foreground
/// voxels give 0 under either variant.
pub fn confidence(p: &ProbVolume, variant: ConfidenceVariant) -> Result<f64> {
    let mask = predicted_foreground_mask(p)?;
    let margins = voxel_margins(p);
    let (sum, count) = margins
        .iter()
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&m, _)| (s + m, n + 1));
    Ok(match (variant, count) {
        (_, 0) => 0.0,
        (ConfidenceVariant::Mean, n) => sum / n as f64,
        (ConfidenceVariant::Sum, _) => sum,
    })
}

/// Confidence column over many volumes.
pub fn score_confidences(probs: &[ProbVolume], variant: ConfidenceVariant) -> Result<ScoreVector> {
    let entries = probs
        .par_iter()
        .map(|p| Ok((p.sample_id().to_string(), confidence(p, variant)?)))
        .collect::<Result<Vec<_>>>()?;
    ScoreVector::new(entries)
}

pub fn mean_confidence(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean confidence over no unlabeled samples"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `K = n_su · τ_c / C̄` rounded, clamped to `[n_su, unlabeled]`; all
/// unlabeled samples when `C̄ = 0`.
pub fn candidate_count(cfg: &SelectionConfig, c_bar: f64, unlabeled: usize) -> Result<usize> {
    if cfg.n_su > unlabeled {
        return Err(Error::Budget(format!(
            "{} pseudo-label slots but only {unlabeled} unlabeled samples",
            cfg.n_su
        )));
    }
    if !c_bar.is_finite() || c_bar < 0.0 {
        return Err(Error::Domain(format!("mean confidence {c_bar} must be ≥ 0")));
    }
    let k = if c_bar > 0.0 {
        let raw = (cfg.n_su as f64 * cfg.tau_c / c_bar).round();
        if raw >= unlabeled as f64 {
            unlabeled
        } else {
            raw as usize
        }
    } else {
        unlabeled
    };
    Ok(k.clamp(cfg.n_su, unlabeled))
}

/// Smallest cosine distance from `candidate` to any anchor.
pub fn semantic_distance(candidate: &EmbeddingVec, anchors: &[EmbeddingVec]) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::Domain("semantic distance needs at least one anchor".into()));
    }
    anchors.iter().try_fold(f64::INFINITY, |best, a| {
        if a.encoder_round() != candidate.encoder_round() {
            return Err(Error::Pairing(format!(
                "anchor {} from encoder round {} vs candidate {} from round {}",
                a.sample_id(),
                a.encoder_round(),
                candidate.sample_id(),
                candidate.encoder_round()
            )));
        }
        Ok(best.min(cosine_distance(a, candidate)?))
    })
}

/// `C × max(0, 1 − D)`.
pub fn reliability(confidence: f64, distance: f64) -> f64 {
    confidence * (1.0 - distance).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityRow {
    pub sample_id: String,
    pub confidence: f64,
    /// Only candidates carry a distance and reliability.
    pub semantic_distance: Option<f64>,
    pub reliability: Option<f64>,
    pub candidate: bool,
    pub selected: bool,
    pub round: u32,
}

pub const RELIABILITY_HEADER: &str = "sample_id,confidence,semantic_distance,reliability,candidate,selected,round";

/// Per-sample reliability table, sorted by sample id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReliabilityScores {
    rows: Vec<ReliabilityRow>,
}

impl ReliabilityScores {
    pub fn new(mut rows: Vec<ReliabilityRow>) -> Result<Self> {
        rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if rows.windows(2).any(|w| w[0].sample_id == w[1].sample_id) {
            return Err(Error::Pairing("duplicate sample id in reliability table".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.selected && !r.candidate) {
            return Err(Error::Domain(format!(
                "{} selected without being a candidate",
                bad.sample_id
            )));
        }
        Ok(ReliabilityScores { rows })
    }

    pub fn rows(&self) -> &[ReliabilityRow] {
        &self.rows
    }

    pub fn selected(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().filter(|r| r.selected).map(|r| r.sample_id.as_str())
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_g9).unwrap_or_default();
        let mut out = String::from(RELIABILITY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.sample_id,
                fmt_g9(r.confidence),
                opt(r.semantic_distance),
                opt(r.reliability),
                r.candidate,
                r.selected,
                r.round
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(RELIABILITY_HEADER) {
            return Err(Error::Domain("unexpected reliability table header".into()));
        }
        let opt = |s: &str, what| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f64(s, what).map(Some)
            }
        };
        let flag = |s: &str| -> Result<bool> { s.parse().map_err(|_| Error::Domain(format!("bad boolean {s:?}"))) };
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(Error::Domain(format!(
                        "reliability row {line:?} has {} fields",
                        f.len()
                    )));
                }
                Ok(ReliabilityRow {
                    sample_id: f[0].to_string(),
                    confidence: parse_f64(f[1], "confidence")?,
                    semantic_distance: opt(f[2], "semantic_distance")?,
                    reliability: opt(f[3], "reliability")?,
                    candidate: flag(f[4])?,
                    selected: flag(f[5])?,
                    round: f[6]
                        .parse()
                        .map_err(|_| Error::Domain(format!("bad round {:?}", f[6])))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ReliabilityScores::new(rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        ReliabilityScores::from_csv(&read_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliableSelection {
    pub table: ReliabilityScores,
    /// Ordered by reliability descending, ties by ascending id.
    pub selected: Vec<String>,
    /// Ids to drop from future query pools.
    pub exclusion_update: HashSet<String>,
    pub candidate_count: usize,
    pub mean_confidence: f64,
}

/// Confidence pre-selection of `K` candidates, nearest-anchor distance for
/// those candidates, then the `n_su` most reliable.
pub fn select_reliable(
    confidences: &ScoreVector,
    embeddings: &[EmbeddingVec],
    cfg: &SelectionConfig,
    anchors: &[EmbeddingVec],
    round: u32,
) -> Result<ReliableSelection> {
    let unlabeled = confidences.len();
    if unlabeled == 0 {
        return Err(Error::EmptyInput("no unlabeled samples to select from"));
    }
    let c_values: Vec<f64> = confidences.values().collect();
    let c_bar = mean_confidence(&c_values)?;
    let k = candidate_count(cfg, c_bar, unlabeled)?;
    let candidates: Vec<&str> = rank_descending(confidences)
        .into_iter()
        .take(k)
        .map(|(id, _)| id)
        .collect();

    let by_id: HashMap<&str, &EmbeddingVec> = embeddings.iter().map(|e| (e.sample_id(), e)).collect();
    let distances: HashMap<&str, f64> = candidates
        .par_iter()
        .map(|&id| {
            let e = by_id
                .get(id)
                .ok_or_else(|| Error::Pairing(format!("no embedding for candidate {id}")))?;
            Ok((id, semantic_distance(e, anchors)?))
        })
        .collect::<Result<_>>()?;

    let conf = confidences.to_map();
    let reliabilities = ScoreVector::new(
        candidates
            .iter()
            .map(|&id| (id.to_string(), reliability(conf[id], distances[id])))
            .collect(),
    )?;
    let selected: Vec<String> = rank_descending(&reliabilities)
        .into_iter()
        .take(cfg.n_su)
        .map(|(id, _)| id.to_string())
        .collect();
    let selected_set: HashSet<String> = selected.iter().cloned().collect();
    let rel = reliabilities.to_map();

    let rows = confidences
        .entries()
        .iter()
        .map(|(id, c)| ReliabilityRow {
            sample_id: id.clone(),
            confidence: *c,
            semantic_distance: distances.get(id.as_str()).copied(),
            reliability: rel.get(id.as_str()).copied(),
            candidate: distances.contains_key(id.as_str()),
            selected: selected_set.contains(id),
            round,
        })
        .collect();
    Ok(ReliableSelection {
        table: ReliabilityScores::new(rows)?,
        selected,
        exclusion_update: selected_set,
        candidate_count: k,
        mean_confidence: c_bar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn voxel(p: &[f32]) -> ProbVolume {
        let t = Tensor::new(vec![p.len(), 1, 1, 1], p.to_vec()).unwrap();
        ProbVolume::new("v", t).unwrap()
    }

    fn emb(id: &str, v: &[f64]) -> EmbeddingVec {
        EmbeddingVec::new(id, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn predicted_mask_examples() {
        assert_eq!(predicted_foreground_mask(&voxel(&[0.2, 0.7, 0.1])).unwrap().count(), 1);
        assert_eq!(predicted_foreground_mask(&voxel(&[0.7, 0.2, 0.1])).unwrap().count(), 0);
        assert_eq!(predicted_foreground_mask(&voxel(&[0.5, 0.5])).unwrap().count(), 0);
        assert!(predicted_foreground_mask(&voxel(&[1.0])).is_err());
    }

    #[test]
    fn confidence_examples() {
        let c = confidence(&voxel(&[0.2, 0.7, 0.1]), ConfidenceVariant::Mean).unwrap();
        assert!((c - 0.5).abs() < 1e-6);
        assert_eq!(
            confidence(&voxel(&[0.7, 0.2, 0.1]), ConfidenceVariant::Mean).unwrap(),
            0.0
        );
        assert_eq!(
            confidence(&voxel(&[0.7, 0.2, 0.1]), ConfidenceVariant::Sum).unwrap(),
            0.0
        );
    }

    #[test]
    fn confidence_sum_scales_with_foreground() {
        let t = Tensor::new(vec![2, 1, 1, 3], vec![0.2, 0.4, 0.9, 0.8, 0.6, 0.1]).unwrap();
        let p = ProbVolume::new("x", t).unwrap();
        let mean = confidence(&p, ConfidenceVariant::Mean).unwrap();
        let sum = confidence(&p, ConfidenceVariant::Sum).unwrap();
        assert!((mean - 0.4).abs() < 1e-6);
        assert!((sum - 0.8).abs() < 1e-6);
    }

    #[test]
    fn mean_confidence_examples() {
        assert_eq!(mean_confidence(&[0.4, 0.6]).unwrap(), 0.5);
        assert_eq!(mean_confidence(&[0.37]).unwrap(), 0.37);
        assert!(matches!(mean_confidence(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn candidate_count_examples() {
        let cfg = SelectionConfig::new(5, 2.0).unwrap();
        assert_eq!(candidate_count(&cfg, 0.5, 100).unwrap(), 20);
        let cfg = SelectionConfig::new(5, 0.5).unwrap();
        assert_eq!(candidate_count(&cfg, 0.9, 100).unwrap(), 5);
        let cfg = SelectionConfig::new(5, 2.0).unwrap();
        assert_eq!(candidate_count(&cfg, 0.01, 30).unwrap(), 30);
        assert_eq!(candidate_count(&cfg, 0.0, 30).unwrap(), 30);
        assert!(matches!(candidate_count(&cfg, 0.5, 4), Err(Error::Budget(_))));
    }

    #[test]
    fn semantic_distance_examples() {
        let anchors = [emb("a", &[1., 0.]), emb("b", &[0., 1.])];
        assert_eq!(semantic_distance(&emb("x", &[0., 1.]), &anchors).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = semantic_distance(&emb("x", &[s, s]), &anchors).unwrap();
        assert!((d - (1.0 - s)).abs() < 1e-12);
        assert!((d - 0.2929).abs() < 1e-4);
        assert!(semantic_distance(&emb("x", &[1., 0.]), &[]).is_err());
    }

    #[test]
    fn reliability_clamps_far_candidates() {
        assert_eq!(reliability(0.8, 1.0), 0.0);
        assert_eq!(reliability(0.8, 1.7), 0.0);
        assert!((reliability(0.8, 0.25) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn select_reliable_prefers_close_confident() {
        // a: C=0.8, D=0.25 → R=0.6; b: C=0.9, D=0.9 → R=0.09
        let anchors = [emb("l", &[1.0, 0.0])];
        let a_vec = {
            let cos = 0.75f64;
            vec![cos, (1.0 - cos * cos).sqrt()]
        };
        let b_vec = {
            let cos = 0.1f64;
            vec![cos, (1.0 - cos * cos).sqrt()]
        };
        let conf = ScoreVector::new(vec![("a".into(), 0.8), ("b".into(), 0.9)]).unwrap();
        let embs = [emb("a", &a_vec), emb("b", &b_vec)];
        let cfg = SelectionConfig::new(1, 2.0).unwrap();
        let out = select_reliable(&conf, &embs, &cfg, &anchors, 1).unwrap();
        assert_eq!(out.selected, ["a"]);
        assert!(out.exclusion_update.contains("a"));
        let row_b = &out.table.rows()[1];
        assert!((row_b.reliability.unwrap() - 0.09).abs() < 1e-9);
    }

    #[test]
    fn reliability_csv_round_trip() {
        let rows = vec![
            ReliabilityRow {
                sample_id: "b".into(),
                confidence: 0.25,
                semantic_distance: None,
                reliability: None,
                candidate: false,
                selected: false,
                round: 3,
            },
            ReliabilityRow {
                sample_id: "a".into(),
                confidence: 0.9,
                semantic_distance: Some(0.1),
                reliability: Some(0.81),
                candidate: true,
                selected: true,
                round: 3,
            },
        ];
        let t = ReliabilityScores::new(rows).unwrap();
        let csv = t.to_csv();
        assert_eq!(
            csv,
            "sample_id,confidence,semantic_distance,reliability,candidate,selected,round\n\
             a,0.9,0.1,0.81,true,true,3\nb,0.25,,,false,false,3\n"
        );
        assert_eq!(ReliabilityScores::from_csv(&csv).unwrap(), t);
    }
}

//! Test-time query criterion: knowledge divergence between the pre-adaptation
//! and current encoders weighted by pairwise dissimilarity (DKD), foreground
//! entropy under a round-dependent background tolerance (ASD), and their
//! rank-fused sum `Q`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fsutil::{read_string, write_atomic};
use crate::scores::{fmt_g9, parse_f64, ScoreVector};
use crate::tensor::kernels::cosine_distance_raw;
use crate::tensor::{
    cosine_distance, masked_entropy, minmax_normalize, quantile_transform, BinaryMask, EmbeddingVec, ProbVolume,
};

pub const TAU_FIRST: f64 = 3.0;
pub const TAU_LAST: f64 = 1.5;

/// Background tolerance `τ(r) = 3 - 1.5·ln r / ln R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemperatureSchedule {
    max_round: u32,
}

impl TemperatureSchedule {
    pub fn new(max_round: u32) -> Result<Self> {
        if max_round == 0 {
            return Err(Error::Domain("maximum round must be at least 1".into()));
        }
        Ok(TemperatureSchedule { max_round })
    }

    pub fn max_round(&self) -> u32 {
        self.max_round
    }

    pub fn tau(&self, round: u32) -> Result<f64> {
        temperature(round, self.max_round)
    }
}

/// A single-round schedule stays at the most tolerant value, 3.
pub fn temperature(round: u32, max_round: u32) -> Result<f64> {
    if round < 1 || round > max_round {
        return Err(Error::Domain(format!("round {round} outside [1, {max_round}]")));
    }
    if max_round == 1 {
        return Ok(TAU_FIRST);
    }
    if round == max_round {
        return Ok(TAU_LAST);
    }
    let ratio = (round as f64).ln() / (max_round as f64).ln();
    Ok(TAU_FIRST - (TAU_FIRST - TAU_LAST) * ratio)
}

/// Cosine distance between a sample's round-0 and current embeddings.
pub fn pakd(e0: &EmbeddingVec, current: &EmbeddingVec) -> Result<f64> {
    if e0.sample_id() != current.sample_id() {
        return Err(Error::Pairing(format!(
            "round-0 embedding of {} paired with embedding of {}",
            e0.sample_id(),
            current.sample_id()
        )));
    }
    if e0.encoder_round() != 0 {
        return Err(Error::Pairing(format!(
            "reference embedding of {} comes from encoder round {}, expected 0",
            e0.sample_id(),
            e0.encoder_round()
        )));
    }
    cosine_distance(e0, current)
}

/// Ids ordered by score descending, ties by ascending id.
pub fn rank_descending(s: &ScoreVector) -> Vec<(&str, f64)> {
    let mut ranked: Vec<(&str, f64)> = s.entries().iter().map(|(k, v)| (k.as_str(), *v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
}

/// Pairwise dissimilarity: each sample's rank-distance-weighted mean cosine
/// distance to every sample with a higher PAKD. The top-ranked sample gets 1.
pub fn pd_scores(embeddings: &[EmbeddingVec], pakd: &ScoreVector) -> Result<ScoreVector> {
    let by_id: HashMap<&str, &EmbeddingVec> = embeddings.iter().map(|e| (e.sample_id(), e)).collect();
    let ranked: Vec<&EmbeddingVec> = rank_descending(pakd)
        .into_iter()
        .map(|(id, _)| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Pairing(format!("no current embedding for {id}")))
        })
        .collect::<Result<_>>()?;
    if let Some(first) = ranked.first() {
        if let Some(bad) = ranked.iter().find(|e| e.len() != first.len()) {
            return Err(Error::Dimension(format!(
                "embedding of {} has length {}, expected {}",
                bad.sample_id(),
                bad.len(),
                first.len()
            )));
        }
    }
    let pd: HashMap<&str, f64> = ranked
        .par_iter()
        .enumerate()
        .map(|(pos, e)| {
            if pos == 0 {
                return (e.sample_id(), 1.0);
            }
            let mut num = 0.0;
            for k in 1..=pos {
                let other = ranked[pos - k];
                num += k as f64 * cosine_distance_raw(e.values(), e.norm(), other.values(), other.norm());
            }
            let denom = (pos * (pos + 1) / 2) as f64;
            (e.sample_id(), num / denom)
        })
        .collect();
    pakd.map_ids(|id| pd[id])
}

/// Elementwise `PAKD × PD`.
pub fn dkd(pakd: &ScoreVector, pd: &ScoreVector) -> Result<ScoreVector> {
    let pd = pakd.aligned(pd)?;
    pakd.with_values(pakd.values().zip(pd).map(|(a, b)| a * b).collect())
}

/// Foreground where the tolerance-scaled background probability falls
/// strictly below the best foreground class.
pub fn foreground_mask(p: &ProbVolume, tau: f64) -> Result<BinaryMask> {
    let c = p.classes();
    if c < 2 {
        return Err(Error::Domain(format!(
            "{} has {c} class(es); no foreground classes exist",
            p.sample_id()
        )));
    }
    if !tau.is_finite() || tau < 1.0 {
        return Err(Error::Domain(format!("temperature {tau} must be ≥ 1")));
    }
    let bg = p.channel(0);
    let mut pmax: Vec<f64> = p.channel(1).iter().map(|&x| x as f64).collect();
    for ci in 2..c {
        for (m, &x) in pmax.iter_mut().zip(p.channel(ci)) {
            *m = m.max(x as f64);
        }
    }
    let mask = bg.iter().zip(&pmax).map(|(&b, &m)| (b as f64) / tau < m).collect();
    BinaryMask::new(p.spatial(), mask)
}

/// Foreground-masked entropy with the background tolerance `tau`.
pub fn asd_with_tau(p: &ProbVolume, tau: f64) -> Result<f64> {
    masked_entropy(p, &foreground_mask(p, tau)?)
}

pub fn asd(p: &ProbVolume, round: u32, max_round: u32) -> Result<f64> {
    asd_with_tau(p, temperature(round, max_round)?)
}

/// Normalized, quantile-transformed columns and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub dkd_qt: ScoreVector,
    pub asd_qt: ScoreVector,
    pub q: ScoreVector,
}

pub fn query_criterion(dkd: &ScoreVector, asd: &ScoreVector) -> Result<Criterion> {
    let asd_aligned = dkd.aligned(asd)?;
    let asd = dkd.with_values(asd_aligned)?;
    let dkd_qt = quantile_transform(&minmax_normalize(dkd)?)?;
    let asd_qt = quantile_transform(&minmax_normalize(&asd)?)?;
    let q = dkd_qt.with_values(dkd_qt.values().zip(asd_qt.values()).map(|(a, b)| a + b).collect())?;
    Ok(Criterion { dkd_qt, asd_qt, q })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRow {
    pub sample_id: String,
    pub pakd: f64,
    pub pd: f64,
    pub dkd: f64,
    pub asd: f64,
    pub dkd_qt: f64,
    pub asd_qt: f64,
    pub q: f64,
    pub round: u32,
}

/// Full per-sample score table of one query round, sorted by `q` descending
/// then id ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryScores {
    rows: Vec<QueryRow>,
}

pub const SCORE_TABLE_HEADER: &str = "sample_id,pakd,pd,dkd,asd,dkd_qt,asd_qt,q,round";

impl QueryScores {
    pub fn new(mut rows: Vec<QueryRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.sample_id.clone()) {
                return Err(Error::Pairing(format!("duplicate sample id {}", r.sample_id)));
            }
            let vals = [r.pakd, r.pd, r.dkd, r.asd, r.dkd_qt, r.asd_qt, r.q];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite score for {}", r.sample_id)));
            }
        }
        // Order by q as written, so a re-read table keeps its row order.
        let written = |r: &QueryRow| fmt_g9(r.q).parse::<f64>().unwrap_or(r.q);
        rows.sort_by(|a, b| {
            written(b)
                .total_cmp(&written(a))
                .then_with(|| a.sample_id.cmp(&b.sample_id))
        });
        Ok(QueryScores { rows })
    }

    /// Joins the raw columns with their fused criterion.
    pub fn assemble(
        pakd: &ScoreVector,
        pd: &ScoreVector,
        dkd_col: &ScoreVector,
        asd_col: &ScoreVector,
        round: u32,
    ) -> Result<Self> {
        let crit = query_criterion(dkd_col, asd_col)?;
        let pd = dkd_col.aligned(pd)?;
        let pakd = dkd_col.aligned(pakd)?;
        let asd = dkd_col.aligned(asd_col)?;
        let dkd_qt: Vec<f64> = crit.dkd_qt.values().collect();
        let asd_qt: Vec<f64> = crit.asd_qt.values().collect();
        let q: Vec<f64> = crit.q.values().collect();
        let rows = dkd_col
            .entries()
            .iter()
            .enumerate()
            .map(|(i, (id, d))| QueryRow {
                sample_id: id.clone(),
                pakd: pakd[i],
                pd: pd[i],
                dkd: *d,
                asd: asd[i],
                dkd_qt: dkd_qt[i],
                asd_qt: asd_qt[i],
                q: q[i],
                round,
            })
            .collect();
        QueryScores::new(rows)
    }

    pub fn rows(&self) -> &[QueryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, f: impl Fn(&QueryRow) -> f64) -> ScoreVector {
        ScoreVector::new(self.rows.iter().map(|r| (r.sample_id.clone(), f(r))).collect())
            .expect("rows are validated at construction")
    }

    pub fn q(&self) -> ScoreVector {
        self.column(|r| r.q)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCORE_TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.sample_id,
                fmt_g9(r.pakd),
                fmt_g9(r.pd),
                fmt_g9(r.dkd),
                fmt_g9(r.asd),
                fmt_g9(r.dkd_qt),
                fmt_g9(r.asd_qt),
                fmt_g9(r.q),
                r.round
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == SCORE_TABLE_HEADER => {}
            other => {
                return Err(Error::Domain(format!(
                    "score table header {other:?}, expected {SCORE_TABLE_HEADER:?}"
                )))
            }
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 9 {
                    return Err(Error::Domain(format!(
                        "score table row {line:?} has {} fields",
                        f.len()
                    )));
                }
                Ok(QueryRow {
                    sample_id: f[0].to_string(),
                    pakd: parse_f64(f[1], "pakd")?,
                    pd: parse_f64(f[2], "pd")?,
                    dkd: parse_f64(f[3], "dkd")?,
                    asd: parse_f64(f[4], "asd")?,
                    dkd_qt: parse_f64(f[5], "dkd_qt")?,
                    asd_qt: parse_f64(f[6], "asd_qt")?,
                    q: parse_f64(f[7], "q")?,
                    round: f[8]
                        .trim()
                        .parse()
                        .map_err(|_| Error::Domain(format!("bad round {:?}", f[8])))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        QueryScores::new(rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        QueryScores::from_csv(&read_string(path)?)
    }
}

/// Inputs for scoring one round of unlabeled samples.
#[derive(Debug)]
pub struct QueryInputs<'a> {
    pub reference: &'a [EmbeddingVec],
    pub current: &'a [EmbeddingVec],
    pub probs: &'a [ProbVolume],
    pub round: u32,
    pub max_round: u32,
}

/// PAKD → PD → DKD, ASD, then `Q`, over the samples of `inputs.current`.
pub fn score_round(inputs: &QueryInputs<'_>) -> Result<QueryScores> {
    let reference: HashMap<&str, &EmbeddingVec> = inputs.reference.iter().map(|e| (e.sample_id(), e)).collect();
    let pakd_col: ScoreVector = inputs
        .current
        .par_iter()
        .map(|e| {
            let e0 = reference
                .get(e.sample_id())
                .ok_or_else(|| Error::Pairing(format!("no round-0 embedding for {}", e.sample_id())))?;
            Ok((e.sample_id().to_string(), pakd(e0, e)?))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(ScoreVector::new)?;
    let pd_col = pd_scores(inputs.current, &pakd_col)?;
    let dkd_col = dkd(&pakd_col, &pd_col)?;
    let tau = temperature(inputs.round, inputs.max_round)?;
    let probs: HashMap<&str, &ProbVolume> = inputs.probs.iter().map(|p| (p.sample_id(), p)).collect();
    let asd_col: ScoreVector = pakd_col
        .entries()
        .par_iter()
        .map(|(id, _)| {
            let p = probs
                .get(id.as_str())
                .ok_or_else(|| Error::Pairing(format!("no prediction for {id}")))?;
            Ok((id.clone(), asd_with_tau(p, tau)?))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(ScoreVector::new)?;
    QueryScores::assemble(&pakd_col, &pd_col, &dkd_col, &asd_col, inputs.round)
}

/// Outcome of a top-n selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Fewer eligible samples than requested.
    pub shortfall: bool,
}

/// Top-`n` eligible ids by score descending, ties by ascending id.
pub fn select_top(scores: &ScoreVector, n: usize, excluded: &HashSet<String>) -> Result<Batch> {
    if n == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let eligible: Vec<&str> = rank_descending(scores)
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| !excluded.contains(*id))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Exhaustion);
    }
    let shortfall = eligible.len() < n;
    Ok(Batch {
        ids: eligible.into_iter().take(n).map(str::to_string).collect(),
        shortfall,
    })
}

/// Top-`n_b` eligible samples by `Q`.
pub fn select_batch(scores: &QueryScores, n_b: usize, excluded: &HashSet<String>) -> Result<Batch> {
    select_top(&scores.q(), n_b, excluded)
}

impl ScoreVector {
    pub(crate) fn map_ids(&self, f: impl Fn(&str) -> f64) -> Result<ScoreVector> {
        self.with_values(self.ids().map(f).collect())
    }
}

//! Comparison query strategies and the name registry used by the CLI and
//! the experiment runner.

use asfda_core::orchestrator::strategy::{
    ColumnQuery, FixedTauAsd, FusedQuery, QueryContext, QueryStrategy, ScoreColumn,
};
use asfda_core::reliability::voxel_margins;
use asfda_core::tensor::{volume_entropy, EmbeddingVec, ProbVolume};
use asfda_core::{Error, Result, ScoreVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded uniform draws, assigned in id order.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomQuery;

impl QueryStrategy for RandomQuery {
    fn name(&self) -> &str {
        "RAND"
    }

    fn scores(&self, ctx: &QueryContext<'_>) -> Result<ScoreVector> {
        let mut ids: Vec<&str> = ctx.probs.iter().map(|p| p.sample_id()).collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        ScoreVector::new(ids.into_iter().map(|id| (id.to_string(), rng.gen::<f64>())).collect())
    }
}

fn per_volume(probs: &[ProbVolume], f: impl Fn(&ProbVolume) -> f64) -> Result<ScoreVector> {
    if probs.is_empty() {
        return Err(Error::Pairing("no probability volumes to score".into()));
    }
    ScoreVector::new(probs.iter().map(|p| (p.sample_id().to_string(), f(p))).collect())
}

/// Whole-volume entropy, no foreground mask.
pub fn entropy_scores(probs: &[ProbVolume]) -> Result<ScoreVector> {
    per_volume(probs, volume_entropy)
}

/// Negative mean top-1 probability.
pub fn least_confidence_scores(probs: &[ProbVolume]) -> Result<ScoreVector> {
    per_volume(probs, |p| {
        let v = p.spatial().voxels();
        let mut top = vec![0f32; v];
        for c in 0..p.classes() {
            for (t, &x) in top.iter_mut().zip(p.channel(c)) {
                *t = t.max(x);
            }
        }
        -top.iter().map(|&x| x as f64).sum::<f64>() / v as f64
    })
}

/// Negative mean top-1 minus top-2 margin.
pub fn margin_scores(probs: &[ProbVolume]) -> Result<ScoreVector> {
    per_volume(probs, |p| {
        let m = voxel_margins(p);
        -m.iter().sum::<f64>() / m.len() as f64
    })
}

fn euclid(a: &EmbeddingVec, b: &EmbeddingVec) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Greedy k-center over the whole pool. Each sample scores its distance to
/// the nearest center at the moment it is picked, so ranking by score
/// replays the greedy order. With no labeled centers the first pick is the
/// lowest id at distance `+∞` clamped to `f64::MAX`.
pub fn coreset_scores(pool: &[EmbeddingVec], labeled: &[EmbeddingVec]) -> Result<ScoreVector> {
    if pool.is_empty() {
        return Err(Error::Pairing("no pool embeddings for core-set".into()));
    }
    let mut order: Vec<&EmbeddingVec> = pool.iter().collect();
    order.sort_by(|a, b| a.sample_id().cmp(b.sample_id()));
    let mut nearest: Vec<f64> = order
        .iter()
        .map(|e| labeled.iter().map(|l| euclid(e, l)).fold(f64::MAX, f64::min))
        .collect();
    let mut picked = vec![false; order.len()];
    let mut out = Vec::with_capacity(order.len());
    for _ in 0..order.len() {
        let mut best: Option<usize> = None;
        for i in 0..order.len() {
            if !picked[i] && best.is_none_or(|b| nearest[i] > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("an unpicked sample remains");
        picked[b] = true;
        out.push((order[b].sample_id().to_string(), nearest[b]));
        for i in 0..order.len() {
            if !picked[i] {
                nearest[i] = nearest[i].min(euclid(order[i], order[b]));
            }
        }
    }
    ScoreVector::new(out)
}

macro_rules! prob_strategy {
    ($ty:ident, $name:literal, $f:path) => {
        #[derive(Debug, Clone, Copy, Default)]
        pub struct $ty;

        impl QueryStrategy for $ty {
            fn name(&self) -> &str {
                $name
            }

            fn scores(&self, ctx: &QueryContext<'_>) -> Result<ScoreVector> {
                $f(ctx.probs)
            }
        }
    };
}

prob_strategy!(EntropyQuery, "ENPY", entropy_scores);
prob_strategy!(LeastConfidenceQuery, "LCON", least_confidence_scores);
prob_strategy!(MarginQuery, "MMAR", margin_scores);

#[derive(Debug, Clone, Copy, Default)]
pub struct CoresetQuery;

impl QueryStrategy for CoresetQuery {
    fn name(&self) -> &str {
        "CORESET"
    }

    fn scores(&self, ctx: &QueryContext<'_>) -> Result<ScoreVector> {
        coreset_scores(ctx.embeddings, ctx.labeled_embeddings)
    }
}

/// A named query strategy plus whether the semi-supervised stage runs.
pub struct StrategySpec {
    pub name: String,
    pub query: Box<dyn QueryStrategy>,
    pub semi_supervised: bool,
}

pub const STRATEGY_NAMES: &[&str] = &[
    "RAND",
    "ENPY",
    "LCON",
    "MMAR",
    "CORESET",
    "DKD+ASD",
    "ASFDA",
    "TOP-DKD",
    "BOTTOM-DKD",
    "TOP-ASD",
    "BOTTOM-ASD",
    "ASD-TAU1",
];

/// Looks a strategy up by name. Only `ASFDA` enables the semi-supervised stage.
pub fn strategy(name: &str) -> Result<StrategySpec> {
    let query: Box<dyn QueryStrategy> = match name {
        "RAND" => Box::new(RandomQuery),
        "ENPY" => Box::new(EntropyQuery),
        "LCON" => Box::new(LeastConfidenceQuery),
        "MMAR" => Box::new(MarginQuery),
        "CORESET" => Box::new(CoresetQuery),
        "DKD+ASD" | "ASFDA" => Box::new(FusedQuery),
        "TOP-DKD" => Box::new(ColumnQuery::top(ScoreColumn::Dkd)),
        "BOTTOM-DKD" => Box::new(ColumnQuery::bottom(ScoreColumn::Dkd)),
        "TOP-ASD" => Box::new(ColumnQuery::top(ScoreColumn::Asd)),
        "BOTTOM-ASD" => Box::new(ColumnQuery::bottom(ScoreColumn::Asd)),
        "ASD-TAU1" => Box::new(FixedTauAsd::new(1.0)),
        other => {
            return Err(Error::Domain(format!(
                "unknown strategy {other:?}; known: {}",
                STRATEGY_NAMES.join(", ")
            )))
        }
    };
    Ok(StrategySpec {
        name: name.to_string(),
        query,
        semi_supervised: name == "ASFDA",
    })
}

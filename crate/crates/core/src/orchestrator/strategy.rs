//! Query strategies: what turns one round's predictions and embeddings into
//! the selection score fed to top-`n_b` batch selection.

use rayon::prelude::*;

use crate::error::Result;
use crate::query::{asd_with_tau, QueryScores};
use crate::scores::ScoreVector;
use crate::tensor::{EmbeddingVec, ProbVolume};

/// Everything computed for the unlabeled pool before a query.
#[derive(Debug)]
pub struct QueryContext<'a> {
    pub round: u32,
    pub max_round: u32,
    /// Per-round seed for stochastic strategies.
    pub seed: u64,
    pub scores: &'a QueryScores,
    pub probs: &'a [ProbVolume],
    /// Current-encoder embeddings of the unlabeled pool.
    pub embeddings: &'a [EmbeddingVec],
    /// Current-encoder embeddings of the labeled set.
    pub labeled_embeddings: &'a [EmbeddingVec],
}

/// Higher score means queried earlier.
pub trait QueryStrategy: Sync {
    fn name(&self) -> &str;
    fn scores(&self, ctx: &QueryContext<'_>) -> Result<ScoreVector>;
}

/// The fused criterion `Q`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FusedQuery;

impl QueryStrategy for FusedQuery {
    fn name(&self) -> &str {
        "DKD+ASD"
    }

    fn scores(&self, ctx: &QueryContext<'_>) -> Result<ScoreVector> {
        Ok(ctx.scores.q())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreColumn {
    Dkd,
    Asd,
}

/// Single raw column, top or bottom first.
#[derive(Debug, Clone)]
pub struct ColumnQuery {
    column: ScoreColumn,
    lowest_first: bool,
    name: String,
}

impl ColumnQuery {
    pub fn top(column: ScoreColumn) -> Self {
        ColumnQuery::new(column, false)
    }

    pub fn bottom(column: ScoreColumn) -> Self {
        ColumnQuery::new(column, true)
    }

    fn new(column: ScoreColumn, lowest_first: bool) -> Self {
        let col = match column {
            ScoreColumn::Dkd => "DKD",
            ScoreColumn::Asd => "ASD",
        };
        let name = format!("{}-{}", if lowest_first { "BOTTOM" } else { "TOP" }, col);
        ColumnQuery {
            column,
            lowest_first,
            name,
        }
    }
}

impl QueryStrategy for ColumnQuery {
    fn name(&self) -> &str {
        &self.name
    }

    fn scores(&self, ctx: &QueryContext<'_>) -> Result<ScoreVector> {
        let col = match self.column {
            ScoreColumn::Dkd => ctx.scores.column(|r| r.dkd),
            ScoreColumn::Asd => ctx.scores.column(|r| r.asd),
        };
        if self.lowest_first {
            col.map(|v| -v)
        } else {
            Ok(col)
        }
    }
}

/// ASD recomputed with a constant background tolerance.
#[derive(Debug, Clone)]
pub struct FixedTauAsd {
    tau: f64,
    name: String,
}

impl FixedTauAsd {
    pub fn new(tau: f64) -> Self {
        FixedTauAsd {
            tau,
            name: format!("ASD-TAU{tau}"),
        }
    }
}

impl QueryStrategy for FixedTauAsd {
    fn name(&self) -> &str {
        &self.name
    }

    fn scores(&self, ctx: &QueryContext<'_>) -> Result<ScoreVector> {
        let entries = ctx
            .probs
            .par_iter()
            .map(|p| Ok((p.sample_id().to_string(), asd_with_tau(p, self.tau)?)))
            .collect::<Result<Vec<_>>>()?;
        ScoreVector::new(entries)
    }
}

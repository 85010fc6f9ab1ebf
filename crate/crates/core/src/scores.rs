//! Keyed score columns and the float text format shared by every CSV table.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// One real score per sample; ids unique, scores finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreVector {
    entries: Vec<(String, f64)>,
}

impl ScoreVector {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (id, v) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::Pairing(format!("duplicate sample id {id}")));
            }
            if !v.is_finite() {
                return Err(Error::Domain(format!("score of {id} is not finite")));
            }
        }
        Ok(ScoreVector { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, v)| *v)
    }

    pub fn to_map(&self) -> HashMap<&str, f64> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v)).collect()
    }

    /// Same ids in the same order, new values.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(values.len(), self.entries.len());
        ScoreVector::new(
            self.entries
                .iter()
                .zip(values)
                .map(|((id, _), v)| (id.clone(), v))
                .collect(),
        )
    }

    /// Applies `f` to each score.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_values(self.values().map(f).collect())
    }

    /// Values of `other` aligned to this vector's id order.
    pub fn aligned(&self, other: &ScoreVector) -> Result<Vec<f64>> {
        if self.len() != other.len() {
            return Err(Error::Pairing(format!(
                "score columns have {} and {} entries",
                self.len(),
                other.len()
            )));
        }
        let map = other.to_map();
        self.ids()
            .map(|id| {
                map.get(id)
                    .copied()
                    .ok_or_else(|| Error::Pairing(format!("sample {id} missing from column")))
            })
            .collect()
    }
}

/// `%.9g`: nine significant digits, trailing zeros dropped.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let mantissa = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub(crate) fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Domain(format!("cannot parse {what} value {field:?}")))
}

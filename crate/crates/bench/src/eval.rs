//! Dice overlap and the Mann–Whitney rank-sum test.

use asfda_core::tensor::average_ranks;
use asfda_core::{Error, Result};
use statrs::distribution::{ContinuousCDF, Normal};

/// `2|A∩B| / (|A|+|B|)` for one class; 1 when the class is absent from both.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (ip, ig) = (p == class, g == class);
        a += ip as usize;
        b += ig as usize;
        inter += (ip && ig) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Dice of every foreground class `1..classes`.
pub fn per_class_dice(pred: &[u8], gt: &[u8], classes: usize) -> Result<Vec<f64>> {
    if let Some(bad) = pred.iter().chain(gt).find(|&&l| l as usize >= classes) {
        return Err(Error::Domain(format!("label {bad} outside {classes} classes")));
    }
    (1..classes as u8).map(|c| dice(pred, gt, c)).collect()
}

/// Mean foreground Dice of one sample.
pub fn mean_dice(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64> {
    let d = per_class_dice(pred, gt, classes)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSum {
    /// U statistic of the first group.
    pub u: f64,
    /// Two-sided p-value in `(0, 1]`.
    pub p: f64,
    pub exact: bool,
}

/// Groups larger than this on both sides use the normal approximation.
pub const EXACT_MAX: usize = 8;

/// Two-sided Mann–Whitney U test. Exact permutation distribution (ties kept
/// at their mid-ranks) unless both groups exceed [`EXACT_MAX`]; otherwise the
/// tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<RankSum> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("Mann-Whitney U needs two nonempty groups".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Domain("Mann-Whitney U needs finite values".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let p = if na > EXACT_MAX && nb > EXACT_MAX {
        normal_p(u, na, nb, &pooled)
    } else {
        exact_p(u, na, &ranks)
    };
    Ok(RankSum {
        u,
        p: p.clamp(f64::MIN_POSITIVE, 1.0),
        exact: !(na > EXACT_MAX && nb > EXACT_MAX),
    })
}

fn normal_p(u: f64, na: usize, nb: usize, pooled: &[f64]) -> f64 {
    let n = (na + nb) as f64;
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let (fa, fb) = (na as f64, nb as f64);
    let var = fa * fb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let dev = ((u - fa * fb / 2.0).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * std.sf(z)).min(1.0)
}

/// Exact two-sided p by counting, over all `na`-subsets of the pooled
/// mid-ranks, how many give a rank sum at least as extreme in each tail.
fn exact_p(u: f64, na: usize, ranks: &[f64]) -> f64 {
    // Mid-ranks are multiples of 1/2, so doubled ranks are integers.
    let twice: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max_sum: usize = twice.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s, as f64 counts.
    let mut ways = vec![vec![0f64; max_sum + 1]; na + 1];
    ways[0][0] = 1.0;
    for &r in &twice {
        for k in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                let add = ways[k - 1][s - r];
                if add != 0.0 {
                    ways[k][s] += add;
                }
            }
        }
    }
    let offset = na * (na + 1);
    let observed = (2.0 * u).round() as usize + offset;
    let total: f64 = ways[na].iter().sum();
    let lower: f64 = ways[na][..=observed.min(max_sum)].iter().sum();
    let upper: f64 = ways[na][observed.min(max_sum + 1)..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0], 1).unwrap(), 1.0);
        assert_eq!(dice(&[1, 1, 0, 0], &[0, 0, 1, 1], 1).unwrap(), 0.0);
        assert_eq!(dice(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert!(dice(&[0], &[0, 1], 1).is_err());
    }

    #[test]
    fn rank_sum_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p - 0.1).abs() < 1e-12);
        let same = mann_whitney_u(&[1.0, 2.0, 2.0, 5.0], &[1.0, 2.0, 2.0, 5.0]).unwrap();
        assert_eq!(same.p, 1.0);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }
}

//! Numeric primitives shared by the scoring modules. All pure.

use crate::error::{Error, Result};
use crate::scores::ScoreVector;
use crate::tensor::{BinaryMask, EmbeddingVec, ProbVolume};

/// `1 - a·b / (‖a‖‖b‖)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(a: &EmbeddingVec, b: &EmbeddingVec) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "embeddings of {} and {} have lengths {} and {}",
            a.sample_id(),
            b.sample_id(),
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_distance_raw(a.values(), a.norm(), b.values(), b.norm()))
}

#[inline]
pub(crate) fn cosine_distance_raw(a: &[f64], norm_a: f64, b: &[f64], norm_b: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (norm_a * norm_b)).clamp(0.0, 2.0)
}

/// Min-max scaling to `[0, 1]`; a constant column maps to 0.5.
pub fn minmax_normalize(s: &ScoreVector) -> Result<ScoreVector> {
    if s.is_empty() {
        return Err(Error::EmptyInput("min-max normalization of an empty column"));
    }
    let (lo, hi) = s
        .values()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span == 0.0 {
        return s.map(|_| 0.5);
    }
    s.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            ranks[i] = avg;
        }
        start = end + 1;
    }
    ranks
}

/// Empirical uniform quantile map `(rank - 1) / (N - 1)` with tie-averaged
/// ranks; a single entry maps to 0.5.
pub fn quantile_transform(s: &ScoreVector) -> Result<ScoreVector> {
    if s.is_empty() {
        return Err(Error::EmptyInput("quantile transform of an empty column"));
    }
    let n = s.len();
    if n == 1 {
        return s.map(|_| 0.5);
    }
    let values: Vec<f64> = s.values().collect();
    let denom = (n - 1) as f64;
    s.with_values(average_ranks(&values).into_iter().map(|r| (r - 1.0) / denom).collect())
}

#[inline]
pub(crate) fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Natural-log entropy of `p ⊙ m`, summed over every voxel; `0·ln 0 = 0`.
pub fn masked_entropy(p: &ProbVolume, m: &BinaryMask) -> Result<f64> {
    if p.spatial() != m.shape() {
        return Err(Error::Dimension(format!(
            "probability volume {:?} vs mask {:?}",
            p.spatial(),
            m.shape()
        )));
    }
    let mask = m.as_slice();
    let mut total = 0.0;
    for c in 0..p.classes() {
        total += p
            .channel(c)
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(&x, _)| xlogx(x as f64))
            .sum::<f64>();
    }
    Ok(-total)
}

/// Entropy over the whole volume.
pub fn volume_entropy(p: &ProbVolume) -> f64 {
    -(0..p.classes())
        .map(|c| p.channel(c).iter().map(|&x| xlogx(x as f64)).sum::<f64>())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape3, Tensor};

    fn emb(v: &[f64]) -> EmbeddingVec {
        EmbeddingVec::new("s", 0, v.to_vec()).unwrap()
    }

    fn col(v: &[f64]) -> ScoreVector {
        ScoreVector::new(v.iter().enumerate().map(|(i, &x)| (format!("s{i}"), x)).collect()).unwrap()
    }

    fn vals(s: &ScoreVector) -> Vec<f64> {
        s.values().collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&emb(&[1., 2., 3.]), &emb(&[1., 2., 3.])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&emb(&[1., 0.]), &emb(&[0., 1.])).unwrap(), 1.0);
        assert_eq!(cosine_distance(&emb(&[1., 0.]), &emb(&[-1., 0.])).unwrap(), 2.0);
    }

    #[test]
    fn cosine_length_mismatch() {
        assert!(matches!(
            cosine_distance(&emb(&[1., 0.]), &emb(&[1., 0., 0.])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(vals(&minmax_normalize(&col(&[2., 4., 6.])).unwrap()), [0., 0.5, 1.]);
        assert_eq!(vals(&minmax_normalize(&col(&[7., 7., 7.])).unwrap()), [0.5; 3]);
        assert_eq!(vals(&minmax_normalize(&col(&[-1., 0., 3.])).unwrap()), [0., 0.25, 1.]);
        assert!(matches!(
            minmax_normalize(&ScoreVector::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(
            vals(&quantile_transform(&col(&[10., 30., 20.])).unwrap()),
            [0., 1., 0.5]
        );
        assert_eq!(
            vals(&quantile_transform(&col(&[5., 5., 9.])).unwrap()),
            [0.25, 0.25, 1.0]
        );
        assert_eq!(vals(&quantile_transform(&col(&[42.])).unwrap()), [0.5]);
        assert!(quantile_transform(&ScoreVector::default()).is_err());
    }

    #[test]
    fn entropy_of_uniform_voxel() {
        let t = Tensor::new(vec![2, 1, 1, 1], vec![0.5, 0.5]).unwrap();
        let p = ProbVolume::new("a", t).unwrap();
        let m = BinaryMask::filled(Shape3::new(1, 1, 1), true);
        let h = masked_entropy(&p, &m).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_empty_mask_is_zero() {
        let t = Tensor::new(vec![2, 1, 1, 2], vec![0.3, 0.5, 0.7, 0.5]).unwrap();
        let p = ProbVolume::new("a", t).unwrap();
        let m = BinaryMask::filled(Shape3::new(1, 1, 2), false);
        assert_eq!(masked_entropy(&p, &m).unwrap(), 0.0);
    }

    #[test]
    fn zero_log_zero_is_zero() {
        let t = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let p = ProbVolume::new("a", t).unwrap();
        let m = BinaryMask::filled(Shape3::new(1, 1, 1), true);
        assert_eq!(masked_entropy(&p, &m).unwrap(), 0.0);
    }

    #[test]
    fn entropy_shape_mismatch() {
        let t = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let p = ProbVolume::new("a", t).unwrap();
        let m = BinaryMask::filled(Shape3::new(1, 1, 2), true);
        assert!(matches!(masked_entropy(&p, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[1., 2., 2., 4.]), [1., 2.5, 2.5, 4.]);
        assert_eq!(average_ranks(&[3., 3., 3.]), [2., 2., 2.]);
    }
}

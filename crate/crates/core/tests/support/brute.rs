//! Slow, direct reference implementations used as test oracles. Written
//! from the formulas, sharing no code with the library.

#![allow(dead_code)]

pub fn cos_dis(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Indices sorted by score descending, ties by id ascending (selection sort).
pub fn order_desc(ids: &[String], scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..ids.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (left[j], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]) {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// PD per sample, in input order.
pub fn pd(ids: &[String], pakd: &[f64], emb: &[Vec<f64>]) -> Vec<f64> {
    let order = order_desc(ids, pakd);
    let mut out = vec![0.0; ids.len()];
    for (c, &i) in order.iter().enumerate() {
        if c == 0 {
            out[i] = 1.0;
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 1..=c {
            num += k as f64 * cos_dis(&emb[i], &emb[order[c - k]]);
            den += k as f64;
        }
        out[i] = num / den;
    }
    out
}

pub fn tau(r: u32, big_r: u32) -> f64 {
    if big_r == 1 {
        3.0
    } else {
        3.0 - 1.5 * (r as f64).ln() / (big_r as f64).ln()
    }
}

/// `probs[v][c]` per voxel.
pub fn asd(probs: &[Vec<f64>], t: f64) -> f64 {
    let mut h = 0.0;
    for p in probs {
        let fg = p[1..].iter().cloned().fold(f64::MIN, f64::max);
        if p[0] / t < fg {
            for &x in p {
                if x > 0.0 {
                    h -= x * x.ln();
                }
            }
        }
    }
    h
}

pub fn entropy(probs: &[Vec<f64>]) -> f64 {
    let mut h = 0.0;
    for p in probs {
        for &x in p {
            if x > 0.0 {
                h -= x * x.ln();
            }
        }
    }
    h
}

/// Mean (or summed) top-1 minus top-2 over voxels whose first argmax is not 0.
pub fn confidence(probs: &[Vec<f64>], sum: bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for p in probs {
        let mut arg = 0;
        for c in 1..p.len() {
            if p[c] > p[arg] {
                arg = c;
            }
        }
        if arg == 0 {
            continue;
        }
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        total += sorted[0] - sorted[1];
        n += 1;
    }
    if n == 0 {
        0.0
    } else if sum {
        total
    } else {
        total / n as f64
    }
}

pub fn semantic_distance(x: &[f64], anchors: &[Vec<f64>]) -> f64 {
    anchors.iter().map(|a| cos_dis(x, a)).fold(f64::INFINITY, f64::min)
}

pub struct Reliable {
    pub k: usize,
    pub candidates: Vec<usize>,
    pub distance: Vec<Option<f64>>,
    pub reliability: Vec<Option<f64>>,
    pub selected: Vec<usize>,
}

pub fn select_reliable(
    ids: &[String],
    conf: &[f64],
    emb: &[Vec<f64>],
    anchors: &[Vec<f64>],
    n_su: usize,
    tau_c: f64,
) -> Reliable {
    let n = ids.len();
    let c_bar = conf.iter().sum::<f64>() / n as f64;
    let mut k = if c_bar == 0.0 {
        n
    } else {
        let raw = (n_su as f64 * tau_c / c_bar).round();
        if raw > n as f64 {
            n
        } else {
            raw as usize
        }
    };
    k = k.max(n_su).min(n);
    let candidates: Vec<usize> = order_desc(ids, conf).into_iter().take(k).collect();
    let mut distance = vec![None; n];
    let mut reliability = vec![None; n];
    let mut rel_scores = vec![f64::NEG_INFINITY; n];
    for &i in &candidates {
        let d = semantic_distance(&emb[i], anchors);
        let r = conf[i] * f64::max(0.0, 1.0 - d);
        distance[i] = Some(d);
        reliability[i] = Some(r);
        rel_scores[i] = r;
    }
    let selected = order_desc(ids, &rel_scores)
        .into_iter()
        .filter(|i| reliability[*i].is_some())
        .take(n_su)
        .collect();
    Reliable {
        k,
        candidates,
        distance,
        reliability,
        selected,
    }
}

/// `(avgrank - 1) / (N - 1)` with ties averaged; 0.5 for a single value.
pub fn quantile(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    xs.iter()
        .map(|&x| {
            if n == 1 {
                return 0.5;
            }
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            let rank = less + (equal + 1.0) / 2.0;
            (rank - 1.0) / (n as f64 - 1.0)
        })
        .collect()
}

pub fn minmax(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .map(|&x| if hi == lo { 0.5 } else { (x - lo) / (hi - lo) })
        .collect()
}

pub fn q(dkd: &[f64], asd: &[f64]) -> Vec<f64> {
    let a = quantile(&minmax(dkd));
    let b = quantile(&minmax(asd));
    a.iter().zip(&b).map(|(x, y)| x + y).collect()
}

//! Reference implementations used as oracles by the integration tests. They
//! are written for clarity, not speed, and share no code with the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

/// AP by counting, for each relevant position, the relevant items at or
/// above it.
pub fn brute_ap(relevance: &[bool], total_relevant: usize) -> f64 {
    let mut sum = 0.0;
    for (pos, &rel) in relevance.iter().enumerate() {
        if !rel {
            continue;
        }
        let above = relevance[..=pos].iter().filter(|&&r| r).count();
        sum += above as f64 / (pos + 1) as f64;
    }
    sum / total_relevant as f64
}

pub struct BruteRetrieval {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub scored: usize,
}

/// Mean AP, Rank-1 and Rank-5 over queries whose class has another member.
pub fn brute_retrieval(queries: &[usize], rankings: &[Vec<usize>], labels: &[usize]) -> Option<BruteRetrieval> {
    let mut aps = Vec::new();
    let mut hits1 = 0.0;
    let mut hits5 = 0.0;
    for (&q, ranking) in queries.iter().zip(rankings) {
        let others = (0..labels.len()).filter(|&j| j != q && labels[j] == labels[q]).count();
        if others == 0 {
            continue;
        }
        let rel: Vec<bool> = ranking.iter().map(|&g| labels[g] == labels[q]).collect();
        aps.push(brute_ap(&rel, others));
        if rel.first() == Some(&true) {
            hits1 += 1.0;
        }
        if rel.iter().take(5).any(|&r| r) {
            hits5 += 1.0;
        }
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    Some(BruteRetrieval {
        map: aps.iter().sum::<f64>() / n,
        rank1: hits1 / n,
        rank5: hits5 / n,
        scored: aps.len(),
    })
}

/// Per class: sample `a` precedes `b` when its score is higher, or equal
/// with a lower index. Precision at each positive is the fraction of
/// positives among the items that precede or equal it.
pub fn brute_classification_map(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let m = scores.len();
    let n = scores[0].len();
    let mut aps = Vec::new();
    for c in 0..n {
        let positives: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
        if positives.is_empty() {
            continue;
        }
        let before = |a: usize, b: usize| scores[a][c] > scores[b][c] || (scores[a][c] == scores[b][c] && a < b);
        let mut sum = 0.0;
        for &p in &positives {
            let ahead: Vec<usize> = (0..m).filter(|&j| j == p || before(j, p)).collect();
            let pos_ahead = ahead.iter().filter(|&&j| labels[j] == c).count();
            sum += pos_ahead as f64 / ahead.len() as f64;
        }
        aps.push(sum / positives.len() as f64);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Number of lattice points `start + (i + 1/2) * step` inside `[lo, hi)`.
fn lattice_count(lo: f64, hi: f64, start: f64, cells: usize, step: f64) -> usize {
    (0..cells)
        .filter(|&i| {
            let x = start + (i as f64 + 0.5) * step;
            x >= lo && x < hi
        })
        .count()
}

/// IoU from counting pixel centers of a `cells x cells` lattice over
/// `[0, extent]^2`. Axis-aligned membership factors into a row count times
/// a column count, so only the two axes are scanned.
pub fn lattice_iou(a: [f64; 4], b: [f64; 4], extent: f64, cells: usize) -> f64 {
    let step = extent / cells as f64;
    let count = |x0: f64, y0: f64, x1: f64, y1: f64| {
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        (lattice_count(x0, x1, 0.0, cells, step) * lattice_count(y0, y1, 0.0, cells, step)) as f64
    };
    let ca = count(a[0], a[1], a[2], a[3]);
    let cb = count(b[0], b[1], b[2], b[3]);
    let ci = count(a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3]));
    ci / (ca + cb - ci)
}

/// IoU from the closed-form area formula.
pub fn formula_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (area(a) + area(b) - inter)
}

fn sorted_neighbors(d: &[Vec<f64>], i: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = d[i].iter().copied().zip(0..).collect();
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    pairs.into_iter().map(|(_, j)| j).collect()
}

fn k_reciprocal_set(nbrs: &[Vec<usize>], i: usize, k: usize) -> BTreeSet<usize> {
    let forward: BTreeSet<usize> = nbrs[i].iter().take(k + 1).copied().collect();
    forward
        .into_iter()
        .filter(|&j| nbrs[j].iter().take(k + 1).any(|&x| x == i))
        .collect()
}

/// Direct k-reciprocal reranking on a dense matrix, using sparse maps for
/// the neighbor weights.
pub fn reference_rerank(d: &[Vec<f64>], k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let m = d.len();
    let nbrs: Vec<Vec<usize>> = (0..m).map(|i| sorted_neighbors(d, i)).collect();
    let half = {
        let x = k1 as f64 / 2.0;
        let f = x.floor();
        if x - f == 0.5 {
            if (f as usize) % 2 == 0 { f as usize } else { f as usize + 1 }
        } else {
            x.round() as usize
        }
    };
    let weights: Vec<BTreeMap<usize, f64>> = (0..m)
        .map(|i| {
            let r = k_reciprocal_set(&nbrs, i, k1);
            let mut expanded = r.clone();
            for &j in &r {
                let rj = k_reciprocal_set(&nbrs, j, half);
                let inside = rj.intersection(&r).count();
                if 3 * inside > 2 * rj.len() {
                    expanded.extend(rj);
                }
            }
            let z: f64 = expanded.iter().map(|&j| (-d[i][j]).exp()).sum();
            expanded.iter().map(|&j| (j, (-d[i][j]).exp() / z)).collect()
        })
        .collect();
    let weights: Vec<BTreeMap<usize, f64>> = if k2 > 1 {
        (0..m)
            .map(|i| {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &j in nbrs[i].iter().take(k2) {
                    for (&l, &w) in &weights[j] {
                        *acc.entry(l).or_default() += w / k2 as f64;
                    }
                }
                acc
            })
            .collect()
    } else {
        weights
    };
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let shared: f64 = weights[i]
                .iter()
                .filter_map(|(l, &wi)| weights[j].get(l).map(|&wj| wi.min(wj)))
                .sum();
            let jaccard = 1.0 - shared / (2.0 - shared);
            out[i][j] = (1.0 - lambda) * jaccard + lambda * d[i][j];
        }
    }
    out
}

/// Euclidean distance matrix of random points.
pub fn random_distance_matrix<R: rand::Rng>(m: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let pts: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let (a, b) = if i <= j { (i, j) } else { (j, i) };
                    if a == b {
                        0.0
                    } else {
                        pts[a].iter().zip(&pts[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
                    }
                })
                .collect()
        })
        .collect()
}

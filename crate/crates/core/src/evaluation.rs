//! Retrieval mAP, Rank-k and classification mAP.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::reranking::RerankParams;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// `(1 / R) * sum of precision@r over relevant ranks r`.
pub fn average_precision(relevance: &[bool], total_relevant: usize) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::domain("average precision needs at least one relevant item"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits > total_relevant {
        return Err(Error::domain(format!(
            "{hits} relevant items in the list but total_relevant = {total_relevant}"
        )));
    }
    Ok(sum / total_relevant as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub map: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
    /// AP per scored query, in input order.
    pub per_query_ap: Vec<f64>,
    /// Keyed by class index.
    pub per_class: BTreeMap<usize, ClassMetrics>,
}

/// Score ranked lists. `rankings[q]` holds gallery indices (into `labels`)
/// for query `queries[q]`, best first, without the query itself.
pub fn retrieval_map(queries: &[usize], rankings: &[Vec<usize>], labels: &[usize]) -> Result<RetrievalMetrics> {
    if queries.len() != rankings.len() {
        return Err(Error::domain(format!(
            "{} queries but {} rankings",
            queries.len(),
            rankings.len()
        )));
    }
    let mut class_count: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *class_count.entry(l).or_default() += 1;
    }
    let mut aps = Vec::new();
    let mut r1 = 0usize;
    let mut r5 = 0usize;
    let mut excluded = 0usize;
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&q, ranking) in queries.iter().zip(rankings) {
        let label = *labels
            .get(q)
            .ok_or_else(|| Error::Lookup(format!("query index {q} out of range")))?;
        let total = class_count[&label] - 1;
        if total == 0 {
            excluded += 1;
            continue;
        }
        let mut rel = Vec::with_capacity(ranking.len());
        for &g in ranking {
            if g == q {
                return Err(Error::domain(format!("query {q} appears in its own ranking")));
            }
            let gl = *labels
                .get(g)
                .ok_or_else(|| Error::Lookup(format!("gallery index {g} out of range")))?;
            rel.push(gl == label);
        }
        let ap = average_precision(&rel, total)?;
        aps.push(ap);
        r1 += usize::from(rel.iter().take(1).any(|&x| x));
        r5 += usize::from(rel.iter().take(5).any(|&x| x));
        let e = per_class.entry(label).or_default();
        e.0 += ap;
        e.1 += 1;
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no same-class gallery item and were excluded");
    }
    if aps.is_empty() {
        return Err(Error::domain("no scorable queries"));
    }
    let n = aps.len() as f64;
    Ok(RetrievalMetrics {
        map: aps.iter().sum::<f64>() / n,
        rank1: r1 as f64 / n,
        rank5: r5 as f64 / n,
        n_queries: aps.len(),
        n_excluded: excluded,
        per_query_ap: aps,
        per_class: per_class
            .into_iter()
            .map(|(c, (s, k))| {
                (
                    c,
                    ClassMetrics {
                        map: s / k as f64,
                        n_queries: k,
                    },
                )
            })
            .collect(),
    })
}

/// Mean over classes of the AP obtained by ranking all samples on that
/// class's score. Ties keep sample order; classes without samples are
/// skipped.
pub fn classification_map(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (m, n) = scores.dim();
    if m != labels.len() {
        return Err(Error::domain(format!("{m} score rows but {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::domain("classification mAP needs at least two classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::domain(format!("label {bad} out of range for {n} classes")));
    }
    let mut aps = Vec::new();
    for c in 0..n {
        let total = labels.iter().filter(|&&l| l == c).count();
        if total == 0 {
            log::warn!("class {c} has no samples and is excluded from classification mAP");
            continue;
        }
        let col = scores.column(c);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        let rel: Vec<bool> = order.iter().map(|&i| labels[i] == c).collect();
        aps.push(average_precision(&rel, total)?);
    }
    if aps.is_empty() {
        return Err(Error::domain("no class has samples"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// The metrics document written by `retrieve-evaluate`.
pub fn metrics_json(
    metrics: &RetrievalMetrics,
    class_names: &[String],
    rerank: Option<&RerankParams>,
    config: Value,
) -> Value {
    let per_class: serde_json::Map<String, Value> = metrics
        .per_class
        .iter()
        .map(|(&c, m)| {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            (name, json!({"map": m.map, "n_queries": m.n_queries}))
        })
        .collect();
    let params = match rerank {
        Some(p) => json!({"reranked": true, "k1": p.k1, "k2": p.k2, "lambda": p.lambda}),
        None => json!({"reranked": false}),
    };
    json!({
        "schema_version": METRICS_SCHEMA_VERSION,
        "map": metrics.map,
        "rank1": metrics.rank1,
        "rank5": metrics.rank5,
        "n_queries": metrics.n_queries,
        "n_excluded": metrics.n_excluded,
        "per_class": per_class,
        "params": params,
        "config": config,
    })
}

/// Check a metrics document: required keys and types, unit-interval values,
/// `rank1 <= rank5`.
pub fn validate_metrics_json(doc: &Value) -> Result<()> {
    let bad = |m: &str| Error::parse("metrics", m.to_string());
    let obj = doc.as_object().ok_or_else(|| bad("not an object"))?;
    if obj.get("schema_version").and_then(Value::as_u64) != Some(METRICS_SCHEMA_VERSION as u64) {
        return Err(bad("missing or unsupported schema_version"));
    }
    let unit = |key: &str, v: Option<&Value>| -> Result<f64> {
        let x = v
            .and_then(Value::as_f64)
            .ok_or_else(|| bad(&format!("`{key}` missing or not a number")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(bad(&format!("`{key}` = {x} outside [0, 1]")));
        }
        Ok(x)
    };
    unit("map", obj.get("map"))?;
    let r1 = unit("rank1", obj.get("rank1"))?;
    let r5 = unit("rank5", obj.get("rank5"))?;
    if r1 > r5 {
        return Err(bad("rank1 exceeds rank5"));
    }
    for key in ["n_queries", "n_excluded"] {
        obj.get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| bad(&format!("`{key}` missing or not a count")))?;
    }
    let per_class = obj
        .get("per_class")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("`per_class` missing"))?;
    for (name, entry) in per_class {
        unit(&format!("per_class.{name}.map"), entry.get("map"))?;
        entry
            .get("n_queries")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad(&format!("per_class.{name}.n_queries missing")))?;
    }
    let params = obj
        .get("params")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("`params` missing"))?;
    match params.get("reranked").and_then(Value::as_bool) {
        Some(true) => {
            for key in ["k1", "k2"] {
                params
                    .get(key)
                    .and_then(Value::as_u64)
                    .ok_or_else(|| bad(&format!("params.{key} missing")))?;
            }
            unit("params.lambda", params.get("lambda"))?;
        }
        Some(false) => {}
        None => return Err(bad("params.reranked missing")),
    }
    if !obj.get("config").is_some_and(Value::is_object) {
        return Err(bad("`config` snapshot missing"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true], 2).unwrap() - 0.833333).abs() < 1e-6);
        assert!((average_precision(&[false, false, true], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true], 2).unwrap(), 1.0);
        assert!(average_precision(&[true], 0).is_err());
        assert_eq!(average_precision(&[true, false], 4).unwrap(), 0.25);
    }

    #[test]
    fn perfect_rankings() {
        let labels = [0, 0, 1, 1, 1];
        let rankings = vec![
            vec![1, 2, 3, 4],
            vec![0, 4, 3, 2],
            vec![3, 4, 0, 1],
            vec![2, 4, 1, 0],
            vec![3, 2, 0, 1],
        ];
        let m = retrieval_map(&[0, 1, 2, 3, 4], &rankings, &labels).unwrap();
        assert_eq!((m.map, m.rank1, m.rank5), (1.0, 1.0, 1.0));
        assert_eq!(m.per_class[&1].n_queries, 3);
    }

    #[test]
    fn singleton_class_excluded() {
        let labels = [0, 0, 1];
        let rankings = vec![vec![1, 2], vec![2, 0], vec![0, 1]];
        let m = retrieval_map(&[0, 1, 2], &rankings, &labels).unwrap();
        assert_eq!((m.n_queries, m.n_excluded), (2, 1));
        assert!((m.map - 0.75).abs() < 1e-15);
        assert_eq!(m.rank1, 0.5);
    }

    #[test]
    fn self_in_ranking_rejected() {
        assert!(retrieval_map(&[0], &[vec![0, 1]], &[0, 0]).is_err());
        assert!(retrieval_map(&[], &[], &[0]).is_err());
    }

    #[test]
    fn classification_constant_scores_give_prior_under_index_ties() {
        // Labels alternate 0, 1; with constant scores the order is the index
        // order, so class 0 hits ranks 1, 3, 5, ... and class 1 ranks 2, 4, ...
        let m = 6;
        let labels: Vec<usize> = (0..m).map(|i| i % 2).collect();
        let scores = Array2::from_elem((m, 2), 0.5);
        let ap0 = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        let ap1 = (1.0 / 2.0 + 2.0 / 4.0 + 3.0 / 6.0) / 3.0;
        let got = classification_map(&scores, &labels).unwrap();
        assert!((got - (ap0 + ap1) / 2.0).abs() < 1e-15);
        let mut onehot = Array2::zeros((m, 2));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        assert_eq!(classification_map(&onehot, &labels).unwrap(), 1.0);
    }

    #[test]
    fn metrics_document_validates() {
        let labels = [0, 0, 1, 1];
        let rankings = vec![vec![2, 1, 3], vec![0, 2, 3], vec![3, 0, 1], vec![0, 2, 1]];
        let m = retrieval_map(&[0, 1, 2, 3], &rankings, &labels).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let doc = metrics_json(&m, &names, Some(&RerankParams::default()), json!({}));
        validate_metrics_json(&doc).unwrap();
        let mut broken = doc.clone();
        broken["rank1"] = json!(1.5);
        assert!(validate_metrics_json(&broken).is_err());
        let mut broken = doc;
        broken.as_object_mut().unwrap().remove("schema_version");
        assert!(validate_metrics_json(&broken).is_err());
    }

    proptest! {
        #[test]
        fn moving_a_relevant_item_earlier_never_lowers_ap(
            rel in proptest::collection::vec(any::<bool>(), 1..30),
            pick in any::<prop::sample::Index>(),
        ) {
            let total = rel.iter().filter(|&&r| r).count();
            prop_assume!(total > 0);
            let positions: Vec<usize> = rel.iter().enumerate().filter(|(_, r)| **r).map(|(i, _)| i).collect();
            let p = positions[pick.index(positions.len())];
            prop_assume!(p > 0 && !rel[p - 1]);
            let mut moved = rel.clone();
            moved.swap(p, p - 1);
            prop_assert!(average_precision(&moved, total).unwrap() >= average_precision(&rel, total).unwrap());
        }

        #[test]
        fn trailing_irrelevant_permutation_is_free(
            rel in proptest::collection::vec(any::<bool>(), 1..20),
            tail in 0usize..10,
        ) {
            let total = rel.iter().filter(|&&r| r).count();
            prop_assume!(total > 0);
            let mut longer = rel.clone();
            longer.extend(std::iter::repeat_n(false, tail));
            prop_assert_eq!(average_precision(&rel, total).unwrap(), average_precision(&longer, total).unwrap());
        }
    }
}

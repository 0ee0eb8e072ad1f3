//! Embedding extraction, exact Euclidean ranking with the query removed from
//! its own gallery, and the on-disk formats for embeddings and ranked lists.

use std::collections::HashSet;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{retrieval_map, RetrievalMetrics};
use crate::model::ActionModel;

pub const RANKED_LIST_SCHEMA_VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-6;
const STORE_MAGIC: &[u8; 4] = b"AEM1";
const STORE_HEADER: usize = 12;

/// Unit-norm embeddings with their sample ids and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    labels: Vec<usize>,
    matrix: Array2<f64>,
}

impl EmbeddingStore {
    /// Check row norms and id uniqueness.
    pub fn new(ids: Vec<String>, labels: Vec<usize>, matrix: Array2<f64>) -> Result<Self> {
        if ids.len() != matrix.nrows() || labels.len() != ids.len() {
            return Err(Error::domain(format!(
                "{} ids, {} labels and {} rows",
                ids.len(),
                labels.len(),
                matrix.nrows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::domain(format!("duplicate id `{dup}`")));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !((n - 1.0).abs() <= NORM_TOL) {
                return Err(Error::domain(format!("row {i} (`{}`) has norm {n}", ids[i])));
            }
        }
        Ok(Self { ids, labels, matrix })
    }

    /// L2-normalize raw embeddings, then round them to `f32` so that the
    /// file round trip is exact.
    pub fn from_raw(ids: Vec<String>, labels: Vec<usize>, raw: &Array2<f64>) -> Result<Self> {
        let mut matrix = raw.clone();
        for (i, mut row) in matrix.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::Numeric {
                    stage: format!("embedding {i} normalization"),
                });
            }
            row.mapv_inplace(|v| (v / n) as f32 as f64);
        }
        Self::new(ids, labels, matrix)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Header `magic, M, D` (u32 LE), the matrix as `f32` LE, then one
    /// `{"id", "label"}` JSON object per line.
    pub fn encode(&self) -> Vec<u8> {
        let (m, d) = self.matrix.dim();
        let mut out = Vec::with_capacity(STORE_HEADER + 4 * m * d);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.matrix.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for (id, label) in self.ids.iter().zip(&self.labels) {
            let line = serde_json::json!({"id": id, "label": label});
            out.extend_from_slice(line.to_string().as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::parse("embedding store", m);
        if bytes.len() < STORE_HEADER || &bytes[..4] != STORE_MAGIC {
            return Err(bad("bad magic or truncated header".into()));
        }
        let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[STORE_HEADER..];
        let need = m
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .filter(|&n| n <= body.len())
            .ok_or_else(|| bad(format!("{m}x{d} matrix does not fit in {} bytes", body.len())))?;
        let values: Vec<f64> = body[..need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let matrix = Array2::from_shape_vec((m, d), values).map_err(|e| bad(e.to_string()))?;
        let text = std::str::from_utf8(&body[need..]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Entry {
            id: String,
            label: usize,
        }
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: Entry = serde_json::from_str(line).map_err(|e| bad(format!("manifest line {}: {e}", n + 1)))?;
            ids.push(e.id);
            labels.push(e.label);
        }
        Self::new(ids, labels, matrix).map_err(|e| bad(e.to_string()))
    }
}

/// Euclidean distance between two rows.
fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gallery ids of one query, nearest first, without the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    pub distances: Vec<f64>,
}

/// Gallery indices other than `q`, sorted by `row` ascending, ties by index.
pub fn order_row(row: ArrayView1<f64>, q: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != q).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

fn list_from_row(store: &EmbeddingStore, row: ArrayView1<f64>, q: usize) -> RankedList {
    let order = order_row(row, q);
    RankedList {
        query_id: store.ids[q].clone(),
        distances: order.iter().map(|&j| row[j]).collect(),
        ranked_ids: order.into_iter().map(|j| store.ids[j].clone()).collect(),
    }
}

/// Rank the rest of the store for one query.
pub fn rank(query_id: &str, store: &EmbeddingStore) -> Result<RankedList> {
    let q = store
        .index_of(query_id)
        .ok_or_else(|| Error::Lookup(query_id.to_string()))?;
    let qv = store.matrix.row(q);
    let row: ndarray::Array1<f64> = store.matrix.rows().into_iter().map(|g| euclidean(qv, g)).collect();
    Ok(list_from_row(store, row.view(), q))
}

/// Symmetric `M x M` Euclidean distance matrix with a zero diagonal.
pub fn distance_matrix(store: &EmbeddingStore) -> Array2<f64> {
    let m = store.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    // compute each pair once in canonical order so d(i, j) == d(j, i)
                    let (a, b) = if i <= j { (i, j) } else { (j, i) };
                    if a == b {
                        0.0
                    } else {
                        euclidean(store.matrix.row(a), store.matrix.row(b))
                    }
                })
                .collect()
        })
        .collect();
    Array2::from_shape_vec((m, m), rows.into_iter().flatten().collect()).expect("square")
}

/// Ranked lists for every row of a (possibly reranked) distance matrix.
pub fn rank_with_matrix(store: &EmbeddingStore, distances: &Array2<f64>) -> Result<Vec<RankedList>> {
    if distances.dim() != (store.len(), store.len()) {
        return Err(Error::domain("distance matrix does not match the store"));
    }
    Ok((0..store.len())
        .into_par_iter()
        .map(|q| list_from_row(store, distances.row(q), q))
        .collect())
}

/// Every query's ranked list and the distance matrix they came from.
pub fn rank_all(store: &EmbeddingStore) -> Result<(Vec<RankedList>, Array2<f64>)> {
    if store.len() < 2 {
        return Err(Error::domain("ranking needs at least two embeddings"));
    }
    let d = distance_matrix(store);
    let lists = rank_with_matrix(store, &d)?;
    Ok((lists, d))
}

/// Score full ranked lists against the store's labels.
pub fn evaluate_lists(store: &EmbeddingStore, lists: &[RankedList]) -> Result<RetrievalMetrics> {
    let index: std::collections::HashMap<&str, usize> =
        store.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let find = |id: &str| index.get(id).copied().ok_or_else(|| Error::Lookup(id.to_string()));
    let mut queries = Vec::with_capacity(lists.len());
    let mut rankings = Vec::with_capacity(lists.len());
    for l in lists {
        queries.push(find(&l.query_id)?);
        rankings.push(l.ranked_ids.iter().map(|g| find(g)).collect::<Result<Vec<_>>>()?);
    }
    retrieval_map(&queries, &rankings, &store.labels)
}

/// Embed every sample of `split` with the model in evaluation mode. Samples
/// whose image or feature map cannot be read are skipped with a warning.
pub fn extract_embeddings(model: &ActionModel, manifest: &DatasetManifest, split: Split) -> Result<EmbeddingStore> {
    let samples = manifest.split(split);
    if samples.is_empty() {
        return Err(Error::domain(format!("split {split:?} is empty")));
    }
    let prepared: Vec<_> = samples.par_iter().map(|s| model.eval_input(manifest, s)).collect();
    let mut inputs = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (s, p) in samples.iter().zip(prepared) {
        match p {
            Ok(input) => {
                inputs.push(input);
                ids.push(s.sample_id.clone());
                labels.push(s.label);
            }
            Err(e @ (Error::Io { .. } | Error::Image { .. })) => {
                log::warn!("skipping `{}`: {e}", s.sample_id);
            }
            Err(e) => return Err(e),
        }
    }
    if inputs.is_empty() {
        return Err(Error::domain("no sample of the split could be loaded"));
    }
    let inf = model.infer(&inputs)?;
    EmbeddingStore::from_raw(ids, labels, &inf.embeddings)
}

/// One line per query: `{schema_version, query_id, ranked_ids, distances}`
/// truncated to `limit`.
pub fn ranked_lists_to_jsonl(lists: &[RankedList], limit: usize) -> String {
    let mut out = String::new();
    for l in lists {
        let n = limit.min(l.ranked_ids.len());
        let line = serde_json::json!({
            "schema_version": RANKED_LIST_SCHEMA_VERSION,
            "query_id": l.query_id,
            "ranked_ids": &l.ranked_ids[..n],
            "distances": &l.distances[..n],
        });
        writeln!(out, "{line}").expect("write to string");
    }
    out
}

pub fn parse_ranked_lists(text: &str) -> Result<Vec<RankedList>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Line {
        schema_version: u32,
        query_id: String,
        ranked_ids: Vec<String>,
        distances: Vec<f64>,
    }
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let loc = format!("ranked lists line {}", n + 1);
        let l: Line = serde_json::from_str(raw).map_err(|e| Error::parse(&loc, e.to_string()))?;
        if l.schema_version != RANKED_LIST_SCHEMA_VERSION {
            return Err(Error::parse(&loc, format!("unsupported schema_version {}", l.schema_version)));
        }
        if l.ranked_ids.len() != l.distances.len() {
            return Err(Error::parse(&loc, "ranked_ids and distances differ in length"));
        }
        if l.ranked_ids.contains(&l.query_id) {
            return Err(Error::parse(&loc, format!("query `{}` appears in its own list", l.query_id)));
        }
        if l.distances.iter().any(|d| !d.is_finite()) || l.distances.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::parse(&loc, "distances must be finite and non-decreasing"));
        }
        out.push(RankedList {
            query_id: l.query_id,
            ranked_ids: l.ranked_ids,
            distances: l.distances,
        });
    }
    Ok(out)
}

//! End-to-end steps shared by the command line and the experiment tests.

use std::path::Path;

use serde_json::Value;

use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, DatasetManifest, Split};
use crate::error::Result;
use crate::evaluation::{metrics_json, RetrievalMetrics};
use crate::model::ActionModel;
use crate::reranking::{k_reciprocal_rerank, RerankParams};
use crate::retrieval::{evaluate_lists, extract_embeddings, rank_all, rank_with_matrix, EmbeddingStore, RankedList};
use crate::training::{train, EpochRecord, TrainOutcome};

/// Metrics and full ranked lists of one retrieval pass.
#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub metrics: RetrievalMetrics,
    pub lists: Vec<RankedList>,
    /// Effective (clamped) parameters when reranking was applied.
    pub rerank: Option<RerankParams>,
}

impl RetrievalOutcome {
    pub fn to_json(&self, class_names: &[String], config: &RunConfig) -> Value {
        metrics_json(&self.metrics, class_names, self.rerank.as_ref(), config.to_json())
    }
}

/// Query every store entry against all others, optionally reranked.
pub fn retrieve_evaluate(store: &EmbeddingStore, rerank: Option<&RerankParams>) -> Result<RetrievalOutcome> {
    let (lists, d) = rank_all(store)?;
    let (lists, used) = match rerank {
        None => (lists, None),
        Some(p) => {
            let rd = k_reciprocal_rerank(&d, p)?;
            (rank_with_matrix(store, &rd)?, Some(p.clamped(store.len())))
        }
    };
    let metrics = evaluate_lists(store, &lists)?;
    Ok(RetrievalOutcome {
        metrics,
        lists,
        rerank: used,
    })
}

/// Everything produced by one generate, train and evaluate run.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub manifest: DatasetManifest,
    pub training: TrainOutcome,
    pub store: EmbeddingStore,
    pub raw: RetrievalOutcome,
    pub reranked: RetrievalOutcome,
}

impl ExperimentReport {
    pub fn model(&self) -> &ActionModel {
        &self.training.model
    }

    /// The metrics document of the un-reranked pass.
    pub fn metrics_json(&self) -> Value {
        self.raw.to_json(&self.manifest.class_names, &self.training.model.config)
    }
}

/// Generate the synthetic dataset into `dataset_dir`, train, embed the val
/// split and score it with and without reranking.
pub fn run_synthetic_experiment(
    config: &RunConfig,
    dataset_dir: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<ExperimentReport> {
    config.validate()?;
    let manifest = generate_synthetic(&config.synthetic, config.seed, dataset_dir)?;
    run_experiment(config, manifest, on_epoch)
}

/// Train and evaluate on an already loaded manifest.
pub fn run_experiment(
    config: &RunConfig,
    manifest: DatasetManifest,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<ExperimentReport> {
    let training = train(&manifest, config, on_epoch)?;
    let store = extract_embeddings(&training.model, &manifest, Split::Val)?;
    let raw = retrieve_evaluate(&store, None)?;
    let reranked = retrieve_evaluate(&store, Some(&config.rerank))?;
    Ok(ExperimentReport {
        manifest,
        training,
        store,
        raw,
        reranked,
    })
}

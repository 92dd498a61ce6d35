//! Dataset ingestion, training, evaluation, coverage analysis, hop ablation
//! and the ontology parse benchmark.

mod bench;
mod config;
mod context;
mod dataset;
mod metrics;
pub mod synth;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::aggregator::AggregateError;
use crate::encoder::EncodeError;
use crate::gpgnn::ModelError;
use crate::onto_store::OntologyError;
use crate::path_reasoner::PathError;

pub use bench::{bench_parse, format_bench_report, BenchRow, BENCH_COLUMNS};
pub use config::{Activation, OptimizerKind, RunConfig};
pub use context::{
    entity_coverage, load_ontologies, precompute_contexts, ContextStore, PairKey,
};
pub use dataset::{
    load_dataset, load_dataset_file, load_unlabeled, DatasetRecord, DatasetSchema, EntityMention, ADVERSE,
    NOT_ADVERSE,
};
pub use metrics::{compute_metrics, Metrics, RelationScores};
pub use train::{
    evaluate, hop_ablation, predict_instances, prepare, train, EpochRecord, Evaluation, HopRow,
    PredictionRecord, PreparedItem, PreparedSet, TrainOutcome, TrainedModel, CHECKPOINT_FORMAT,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        PipelineError::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

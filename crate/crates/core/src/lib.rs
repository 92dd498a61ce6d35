//! Relation extraction over sentences, guided by ontology paths.
//!
//! The pipeline resolves an entity pair to ontology concepts, enumerates the
//! plain and axiom paths between them, encodes sentence and paths, runs a
//! graph neural network whose transition matrices are generated from those
//! encodings, and biases the resulting relation logits by the similarity
//! between the path text and each relation label.

pub mod onto_store;
pub mod path_reasoner;
pub mod encoder;
pub mod aggregator;
pub mod gpgnn;
pub mod pipeline;

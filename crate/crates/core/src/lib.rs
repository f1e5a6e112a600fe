//! Test-time debiasing of vision-language embeddings.
//!
//! A query embedding is first projected off a local attribute subspace
//! built from attribute-augmented versions of the query ([`subspace`]),
//! then moved to the nearest unit vector equidistant from per-value means of
//! relevant reference records ([`equalize`]). [`pipeline`] wires the steps
//! to retrieval and fairness metrics.

pub mod augment;
pub mod client;
pub mod dataset;
pub mod equalize;
pub mod error;
mod http;
pub mod index;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod random;
pub mod report;
pub mod subspace;
pub mod vector;

pub use augment::{AttributeSpace, AugmentedQuerySet, Augmenter, ExternalAugmenter, TemplateAugmenter};
pub use client::{embed_text, EmbeddingClient, EmbeddingEndpoint};
pub use equalize::{debias, equalize, DebiasMode, DebiasReport};
pub use error::{BendError, ErrorClass, Result};
pub use index::{LabeledEmbeddingTable, Record, ReferenceIndex, RelevantCount};
pub use metrics::{AttributeDistribution, Summary};
pub use pipeline::{Debiaser, Evaluation, MetricsReport, QueryResolver, RunConfig};
pub use subspace::{AttributeMatrix, GenericColumns};
pub use vector::Embedding;

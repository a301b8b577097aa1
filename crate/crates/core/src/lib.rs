//! Fusion-free multimodal review helpfulness ranking.
//!
//! Product descriptions and reviews are encoded per modality into
//! multi-scale representation sets (tokens, sentences, n-gram sentences;
//! regions and images) by shared transformer aggregation layers. The model
//! never fuses modalities: it computes cosine matching scores between
//! designated field/modality pairings, keeps the top-K scores, and regresses
//! helpfulness from them. Training uses a listwise softmax cross-entropy over
//! each product's reviews.
//!
//! Module map:
//! - [`corpus`]: dataset model, file format, synthetic generator, batch sampler
//! - [`encoder`]: token embeddings, GRU contextualizer, visual projection
//! - [`msmn`]: aggregation layers and per-stream multi-scale feature sets
//! - [`refine`]: random-sample / k-means reduction of dense feature sets
//! - [`matching`]: cosine score blocks, top-K selection, prediction head
//! - [`model`]: parameters and the end-to-end pair scorer
//! - [`train`]: listwise loss, Adam, training loop, gradient checking
//! - [`eval`]: MAP and NDCG@N
//! - [`cost`]: analytic complexity model and instrumented operation counts
//! - [`ablation`]: feature-kind ablation runs
//! - [`config`], [`checkpoint`]: run configuration and parameter files

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cost;
pub mod counters;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod matching;
pub mod model;
pub mod msmn;
pub mod params;
pub mod refine;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use corpus::{Batch, Dataset, Product, Review, Split};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use matching::{MatchingFeature, PairFeatures};
pub use model::{Model, ModelConfig};
pub use msmn::{FeatureKind, FeatureSet, KindMask};
pub use tensor::Matrix;

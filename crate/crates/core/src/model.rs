//! Model parameters and the end-to-end (product, review) scorer.

use crate::corpus::{Product, Review, Sentence};
use crate::encoder::{EmbeddingTable, GruParams, VisualProjection};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matching::{topk_select, MatchingFeature, PairFeatures, PredictionHead, ScoreShape};
use crate::msmn::{
    run_stream, AggregationStack, FeatureKind, FeatureNode, FeatureSet, Field, KindMask, Modality, StreamConfig,
};
use crate::params::ParamStore;
use crate::refine::RefineConfig;
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Token embedding width.
    pub d_e: usize,
    /// Shared representation width.
    pub d: usize,
    /// Region feature width.
    pub d_v: usize,
    pub n_heads: usize,
    /// Aggregation layers per modality (1 or 2).
    pub n_layers: usize,
    /// Top-K scores fed to the head.
    pub k: usize,
    /// Expected cluster size for refinement.
    pub r: usize,
    /// Refinement centers; `None` means `⌈√K⌉`.
    pub centers: Option<usize>,
    pub kinds: KindMask,
    pub vision_layer2: bool,
    pub include_document: bool,
    pub refine: bool,
    pub max_iters: usize,
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 400,
            d_e: 128,
            d: 128,
            d_v: 32,
            n_heads: 4,
            n_layers: 2,
            k: 96,
            r: 4,
            centers: None,
            kinds: KindMask::standard(),
            vision_layer2: false,
            include_document: false,
            refine: true,
            max_iters: 10,
            positional: true,
        }
    }
}

impl ModelConfig {
    pub fn effective_centers(&self) -> usize {
        self.centers.unwrap_or_else(|| RefineConfig::auto_centers(self.k))
    }

    pub fn refine_config(&self) -> Option<RefineConfig> {
        self.refine.then(|| RefineConfig {
            centers: self.effective_centers(),
            cluster_size: self.r,
            max_iters: self.max_iters,
        })
    }

    /// Kinds that enter the matching matrices.
    pub fn matched_kinds(&self) -> KindMask {
        let mut m = self.kinds;
        if !self.include_document {
            m = m.without(FeatureKind::Document);
        }
        if !self.vision_layer2 {
            m = m.without(FeatureKind::NgramImage);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_e", self.d_e),
            ("d", self.d),
            ("d_v", self.d_v),
            ("n_heads", self.n_heads),
            ("k", self.k),
            ("r", self.r),
            ("max_iters", self.max_iters),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.centers == Some(0) {
            return Err(Error::config("c", "must be at least 1 or auto"));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("{} does not divide d={}", self.n_heads, self.d),
            ));
        }
        if !(1..=2).contains(&self.n_layers) {
            return Err(Error::config("n_layers", "must be 1 or 2"));
        }
        if self.kinds.kinds().next().is_none() {
            return Err(Error::config("kinds", "no feature kind selected"));
        }
        Ok(())
    }
}

/// Feature sets of one field, still in the graph.
#[derive(Debug, Clone)]
pub struct FieldEncoding {
    pub field: Field,
    pub text: Vec<FeatureNode>,
    pub vision: Vec<FeatureNode>,
}

impl FieldEncoding {
    /// Every refinement decision, for detecting discrete changes.
    pub fn refinement_sources(&self) -> Vec<Vec<Vec<usize>>> {
        self.text
            .iter()
            .chain(&self.vision)
            .filter_map(|s| s.refinement.as_ref().map(|o| o.sources.clone()))
            .collect()
    }

    pub fn feature_sets(&self, g: &Graph, dim: usize) -> Vec<FeatureSet> {
        let text = self
            .text
            .iter()
            .map(|s| s.to_feature_set(g, self.field, Modality::Text, dim));
        let vision = self
            .vision
            .iter()
            .map(|s| s.to_feature_set(g, self.field, Modality::Vision, dim));
        text.chain(vision).collect()
    }
}

/// A scored pair inside a graph.
#[derive(Debug, Clone)]
pub struct PairNodes {
    /// `1 × 1` prediction.
    pub f: NodeId,
    pub feature: MatchingFeature,
    pub shape: ScoreShape,
    /// `1 × L` flat scores; absent when the pair has no scores.
    pub scores: Option<NodeId>,
}

/// Plain-value result of [`Model::score_pair`].
#[derive(Debug, Clone)]
pub struct PairScore {
    pub f: f64,
    pub feature: MatchingFeature,
    pub scores: Vec<f64>,
    pub shape: ScoreShape,
    pub features: PairFeatures,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub gru: GruParams,
    pub visual: VisualProjection,
    pub text_stack: AggregationStack,
    pub vision_stack: AggregationStack,
    pub head: PredictionHead,
}

/// Refinement stream for one field of one instance under `seed`.
pub fn field_rng(seed: u64, id: &str) -> Rng {
    rng::seeded(rng::derive(seed, &[rng::hash_str(id)]))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::random(&mut store, config.vocab_size, config.d_e, &mut r);
        Self::build(config, store, embedding, &mut r)
    }

    /// Uses `table` (`vocab × d_e`) as the initial embedding matrix.
    pub fn with_embedding(config: ModelConfig, table: Matrix, seed: u64) -> Result<Self> {
        config.validate()?;
        if table.rows() < config.vocab_size || table.cols() != config.d_e {
            return Err(Error::Shape(format!(
                "embedding table is {}x{}, need at least {}x{}",
                table.rows(),
                table.cols(),
                config.vocab_size,
                config.d_e
            )));
        }
        let mut cfg = config;
        cfg.vocab_size = table.rows();
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::from_matrix(&mut store, table);
        Self::build(cfg, store, embedding, &mut r)
    }

    fn build(config: ModelConfig, mut store: ParamStore, embedding: EmbeddingTable, r: &mut Rng) -> Result<Self> {
        let gru = GruParams::random(&mut store, config.d_e, config.d, r);
        let visual = VisualProjection::random(&mut store, config.d_v, config.d, r);
        let text_stack = AggregationStack::random(&mut store, "text", config.n_layers, config.d, config.n_heads, r)?;
        let vision_layers = if config.vision_layer2 { config.n_layers } else { 1 };
        let vision_stack = AggregationStack::random(&mut store, "vision", vision_layers, config.d, config.n_heads, r)?;
        let head = PredictionHead::new(&mut store, config.k);
        Ok(Self {
            config,
            store,
            embedding,
            gru,
            visual,
            text_stack,
            vision_stack,
            head,
        })
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with a matching shape.
    pub fn load_values(&mut self, values: &[(String, Matrix)]) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.store.len(),
                values.len()
            )));
        }
        for (name, m) in values {
            let id = self
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.store.get(id).shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = m.clone();
        }
        Ok(())
    }

    fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            refine: self.config.refine_config(),
            positional: self.config.positional,
            vision_upper: self.config.vision_layer2,
        }
    }

    /// Embeds and contextualizes each sentence: one `l × d` node per sentence.
    pub fn encode_text(&self, g: &mut Graph, sentences: &[Sentence]) -> Result<Vec<NodeId>> {
        sentences
            .iter()
            .map(|s| {
                let x = self.embedding.embed(g, s)?;
                self.gru.contextualize(g, x)
            })
            .collect()
    }

    pub fn encode_vision(&self, g: &mut Graph, images: &[Matrix]) -> Result<Vec<NodeId>> {
        images
            .iter()
            .map(|img| {
                let x = g.constant(img.clone());
                self.visual.project(g, x)
            })
            .collect()
    }

    pub fn encode_field(
        &self,
        g: &mut Graph,
        field: Field,
        sentences: &[Sentence],
        images: &[Matrix],
        rng: &mut Rng,
    ) -> Result<FieldEncoding> {
        let cfg = self.stream_config();
        let t0 = self.encode_text(g, sentences)?;
        let text = run_stream(g, &self.text_stack, &t0, Modality::Text, &cfg, rng)?;
        let v0 = self.encode_vision(g, images)?;
        let vision = run_stream(g, &self.vision_stack, &v0, Modality::Vision, &cfg, rng)?;
        Ok(FieldEncoding { field, text, vision })
    }

    pub fn encode_product(&self, g: &mut Graph, p: &Product, seed: u64) -> Result<FieldEncoding> {
        self.encode_field(g, Field::Product, &p.sentences, &p.images, &mut field_rng(seed, &p.id))
    }

    pub fn encode_review(&self, g: &mut Graph, r: &Review, seed: u64) -> Result<FieldEncoding> {
        self.encode_field(g, Field::Review, &r.sentences, &r.images, &mut field_rng(seed, &r.id))
    }

    fn stack_matched(&self, g: &mut Graph, sets: &[FeatureNode]) -> Option<NodeId> {
        let mask = self.config.matched_kinds();
        let parts: Vec<NodeId> = sets
            .iter()
            .filter(|s| mask.contains(s.kind))
            .filter_map(|s| s.node)
            .collect();
        match parts.as_slice() {
            [] => None,
            [one] => Some(*one),
            _ => Some(g.concat_rows(&parts, self.config.d)),
        }
    }

    /// Matched feature sets of a pair, as plain values.
    pub fn pair_features(&self, g: &Graph, product: &FieldEncoding, review: &FieldEncoding) -> PairFeatures {
        let mask = self.config.matched_kinds();
        let sets: Vec<FeatureSet> = product
            .feature_sets(g, self.config.d)
            .into_iter()
            .chain(review.feature_sets(g, self.config.d))
            .filter(|s| mask.contains(s.kind))
            .collect();
        PairFeatures::assemble(&sets, self.config.d)
    }

    /// Cosine blocks → top-K → head, on top of two field encodings.
    pub fn score_encoded(&self, g: &mut Graph, product: &FieldEncoding, review: &FieldEncoding) -> PairNodes {
        let rtp = self.stack_matched(g, &product.text);
        let rtr = self.stack_matched(g, &review.text);
        let rvp = self.stack_matched(g, &product.vision);
        let rvr = self.stack_matched(g, &review.vision);
        let rows = |g: &Graph, n: Option<NodeId>| n.map_or(0, |n| g.value(n).rows());
        let shape = ScoreShape::new(rows(g, rtp), rows(g, rtr), rows(g, rvp), rows(g, rvr));

        let mut blocks = Vec::with_capacity(3);
        for (a, b) in [(rtp, rtr), (rtr, rvr), (rvp, rvr)] {
            if let (Some(a), Some(b)) = (a, b) {
                blocks.push(g.cosine(a, b));
            }
        }
        let scores = (!blocks.is_empty()).then(|| g.flatten(&blocks));
        let flat: Vec<f64> = scores.map_or_else(Vec::new, |s| g.value(s).as_slice().to_vec());
        let feature = topk_select(&flat, &shape, self.config.k);
        let h = match scores {
            Some(s) => g.select_flat(s, feature.flat_indices()),
            None => g.constant(Matrix::row_vector(&feature.h)),
        };
        let f = self.head.forward(g, h);
        PairNodes {
            f,
            feature,
            shape,
            scores,
        }
    }

    /// Helpfulness score for one pair. Refinement draws are keyed by
    /// `seed` and the instance ids, so repeated calls agree.
    pub fn score_pair(&self, product: &Product, review: &Review, seed: u64) -> Result<PairScore> {
        let mut g = Graph::new(&self.store);
        let pe = self.encode_product(&mut g, product, seed)?;
        let re = self.encode_review(&mut g, review, seed)?;
        let nodes = self.score_encoded(&mut g, &pe, &re);
        Ok(PairScore {
            f: g.scalar(nodes.f),
            scores: nodes.scores.map_or_else(Vec::new, |s| g.value(s).as_slice().to_vec()),
            feature: nodes.feature,
            shape: nodes.shape,
            features: self.pair_features(&g, &pe, &re),
        })
    }

    /// Scores a product's reviews, encoding the product once.
    pub fn score_reviews(&self, product: &Product, reviews: &[Review], seed: u64) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let pe = self.encode_product(&mut g, product, seed)?;
        let mut out = Vec::with_capacity(reviews.len());
        for r in reviews {
            let re = self.encode_review(&mut g, r, seed)?;
            let nodes = self.score_encoded(&mut g, &pe, &re);
            out.push(g.scalar(nodes.f));
        }
        Ok(out)
    }
}

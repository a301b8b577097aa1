//! Multi-scale aggregation stacks.
//!
//! An aggregation layer prepends a learned aggregation token to each input
//! sequence, runs one pre-norm transformer encoder layer, and splits the
//! output into the aggregation position (the next-scale representation) and
//! the remaining positions (same-scale, context-mixed representations). One
//! parameter set serves every sequence a layer processes.
//!
//! Text runs token → sentence → document; vision runs region → image, and
//! optionally → document.

use std::fmt;
use std::str::FromStr;

use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::refine::{refine_node, RefineConfig, RefineOutcome};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Product,
    Review,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Vision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureKind {
    /// Context-mixed tokens (layer-1 text bodies), refined.
    NgramToken,
    /// Layer-1 text heads.
    Sentence,
    /// Layer-2 text body.
    NgramSentence,
    /// Context-mixed regions (layer-1 vision bodies), refined.
    NgramRoi,
    /// Layer-1 vision heads.
    Image,
    /// Layer-2 vision body; only produced when vision layer 2 is enabled.
    NgramImage,
    /// Layer-2 head of either modality.
    Document,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 7] = [
        FeatureKind::NgramToken,
        FeatureKind::Sentence,
        FeatureKind::NgramSentence,
        FeatureKind::NgramRoi,
        FeatureKind::Image,
        FeatureKind::NgramImage,
        FeatureKind::Document,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::NgramToken => "ngram_token",
            FeatureKind::Sentence => "sentence",
            FeatureKind::NgramSentence => "ngram_sentence",
            FeatureKind::NgramRoi => "ngram_roi",
            FeatureKind::Image => "image",
            FeatureKind::NgramImage => "ngram_image",
            FeatureKind::Document => "document",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("kinds", format!("unknown feature kind {s:?}")))
    }
}

/// Set of feature kinds that enter the matching matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KindMask(u8);

impl KindMask {
    pub fn empty() -> Self {
        KindMask(0)
    }

    /// The five kinds matched by default: n-gram token, sentence, n-gram
    /// sentence, n-gram RoI, image.
    pub fn standard() -> Self {
        [
            FeatureKind::NgramToken,
            FeatureKind::Sentence,
            FeatureKind::NgramSentence,
            FeatureKind::NgramRoi,
            FeatureKind::Image,
        ]
        .into_iter()
        .collect()
    }

    pub fn contains(self, k: FeatureKind) -> bool {
        self.0 & k.bit() != 0
    }

    pub fn with(self, k: FeatureKind) -> Self {
        KindMask(self.0 | k.bit())
    }

    pub fn without(self, k: FeatureKind) -> Self {
        KindMask(self.0 & !k.bit())
    }

    pub fn kinds(self) -> impl Iterator<Item = FeatureKind> {
        FeatureKind::ALL.into_iter().filter(move |&k| self.contains(k))
    }
}

impl FromIterator<FeatureKind> for KindMask {
    fn from_iter<I: IntoIterator<Item = FeatureKind>>(iter: I) -> Self {
        iter.into_iter().fold(KindMask::empty(), KindMask::with)
    }
}

impl fmt::Display for KindMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.kinds().map(FeatureKind::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for KindMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(FeatureKind::from_str)
            .collect()
    }
}

/// A kind-tagged set of representation vectors from one (field, modality) stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub field: Field,
    pub modality: Modality,
    pub kind: FeatureKind,
    pub vectors: Matrix,
}

/// A feature set still living in a graph. `node` is `None` for empty sets.
#[derive(Debug, Clone)]
pub struct FeatureNode {
    pub kind: FeatureKind,
    pub node: Option<NodeId>,
    pub rows: usize,
    /// Refinement applied to this set, if any.
    pub refinement: Option<RefineOutcome>,
}

impl FeatureNode {
    fn empty(kind: FeatureKind) -> Self {
        Self {
            kind,
            node: None,
            rows: 0,
            refinement: None,
        }
    }

    pub fn to_feature_set(&self, g: &Graph, field: Field, modality: Modality, dim: usize) -> FeatureSet {
        FeatureSet {
            field,
            modality,
            kind: self.kind,
            vectors: self.node.map_or_else(|| Matrix::zeros(0, dim), |n| g.value(n).clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub dim: usize,
    pub heads: usize,
    pub cls: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EncoderLayerParams {
    /// Registers a layer under `prefix` (e.g. `text.layer0`). Feed-forward
    /// inner width is `4·dim`.
    pub fn random(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(
                "n_heads",
                format!("{heads} heads do not divide width {dim}"),
            ));
        }
        let inner = 4 * dim;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut add = |leaf: &str, m: Matrix| store.add(format!("{prefix}.{leaf}"), m);
        Ok(Self {
            dim,
            heads,
            cls: add("cls", uniform(rng, 1, dim, 1.0)),
            ln1_gain: add("ln1_gain", Matrix::filled(1, dim, 1.0)),
            ln1_bias: add("ln1_bias", Matrix::zeros(1, dim)),
            wq: add("wq", uniform(rng, dim, dim, bound)),
            bq: add("bq", Matrix::zeros(1, dim)),
            wk: add("wk", uniform(rng, dim, dim, bound)),
            bk: add("bk", Matrix::zeros(1, dim)),
            wv: add("wv", uniform(rng, dim, dim, bound)),
            bv: add("bv", Matrix::zeros(1, dim)),
            wo: add("wo", uniform(rng, dim, dim, bound)),
            bo: add("bo", Matrix::zeros(1, dim)),
            ln2_gain: add("ln2_gain", Matrix::filled(1, dim, 1.0)),
            ln2_bias: add("ln2_bias", Matrix::zeros(1, dim)),
            w1: add("w1", uniform(rng, dim, inner, bound)),
            b1: add("b1", Matrix::zeros(1, inner)),
            w2: add("w2", uniform(rng, inner, dim, 1.0 / (inner as f64).sqrt())),
            b2: add("b2", Matrix::zeros(1, dim)),
        })
    }

    /// Aggregation token + `seq`, one encoder layer; returns `(head 1×d, body n×d)`.
    pub fn forward(&self, g: &mut Graph, seq: NodeId) -> Result<(NodeId, NodeId)> {
        let sv = g.value(seq);
        let n = sv.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("aggregation over an empty sequence".into()));
        }
        if sv.cols() != self.dim {
            return Err(Error::Shape(format!(
                "layer expects width {}, got {}",
                self.dim,
                sv.cols()
            )));
        }
        if !sv.is_finite() {
            return Err(Error::NonFinite("aggregation layer input".into()));
        }
        let cls = g.param(self.cls);
        let x0 = g.concat_rows(&[cls, seq], self.dim);

        let a = g.layer_norm(x0, self.ln1_gain, self.ln1_bias);
        let q = g.linear(a, self.wq, self.bq);
        let k = g.linear(a, self.wk, self.bk);
        let v = g.linear(a, self.wv, self.bv);
        let att = g.attention(q, k, v, self.heads);
        let proj = g.linear(att, self.wo, self.bo);
        let x1 = g.add(x0, proj);

        let b = g.layer_norm(x1, self.ln2_gain, self.ln2_bias);
        let hidden = g.linear(b, self.w1, self.b1);
        let hidden = g.gelu(hidden);
        let ff = g.linear(hidden, self.w2, self.b2);
        let x2 = g.add(x1, ff);

        let head = g.slice_rows(x2, 0, 1);
        let body = g.slice_rows(x2, 1, n);
        Ok((head, body))
    }

    /// Plain-value convenience wrapper around [`Self::forward`].
    pub fn apply(&self, store: &ParamStore, seq: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let mut g = Graph::new(store);
        let s = g.constant(seq.clone());
        let (h, b) = self.forward(&mut g, s)?;
        Ok((g.value(h).row(0).to_vec(), g.value(b).clone()))
    }
}

/// Applies one shared layer to every sequence; returns `(next_scale, same_scale)`.
pub fn aggregate_layer(
    g: &mut Graph,
    layer: &EncoderLayerParams,
    sequences: &[NodeId],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let mut heads = Vec::with_capacity(sequences.len());
    let mut bodies = Vec::with_capacity(sequences.len());
    for &s in sequences {
        let (h, b) = layer.forward(g, s)?;
        heads.push(h);
        bodies.push(b);
    }
    Ok((heads, bodies))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationStack {
    pub layers: Vec<EncoderLayerParams>,
}

impl AggregationStack {
    pub fn random(
        store: &mut ParamStore,
        name: &str,
        n_layers: usize,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| EncoderLayerParams::random(store, &format!("{name}.layer{i}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamConfig {
    /// Applied to the n-gram token / n-gram RoI sets; `None` keeps them whole.
    pub refine: Option<RefineConfig>,
    /// Sinusoidal positions on text inputs to each layer.
    pub positional: bool,
    /// Runs the second vision layer (image → document).
    pub vision_upper: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            refine: None,
            positional: true,
            vision_upper: false,
        }
    }
}

/// `PE[pos][2i] = sin(pos / 10000^(2i/d))`, `PE[pos][2i+1] = cos(...)`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

fn with_positions(g: &mut Graph, x: NodeId, enabled: bool) -> NodeId {
    if !enabled {
        return x;
    }
    let (n, d) = g.value(x).shape();
    let pe = g.constant(sinusoidal_positions(n, d));
    g.add(x, pe)
}

fn stack_rows(g: &mut Graph, parts: &[NodeId], dim: usize) -> Option<NodeId> {
    match parts {
        [] => None,
        [single] => Some(*single),
        _ => Some(g.concat_rows(parts, dim)),
    }
}

fn refined(
    g: &mut Graph,
    kind: FeatureKind,
    node: Option<NodeId>,
    cfg: &StreamConfig,
    rng: &mut Rng,
) -> Result<FeatureNode> {
    let Some(node) = node else {
        return Ok(FeatureNode::empty(kind));
    };
    match &cfg.refine {
        Some(rc) => {
            let (out, outcome) = refine_node(g, node, rc, rng)?;
            Ok(FeatureNode {
                kind,
                node: Some(out),
                rows: g.value(out).rows(),
                refinement: Some(outcome),
            })
        }
        None => Ok(FeatureNode {
            kind,
            node: Some(node),
            rows: g.value(node).rows(),
            refinement: None,
        }),
    }
}

fn plain(g: &Graph, kind: FeatureKind, node: Option<NodeId>) -> FeatureNode {
    match node {
        Some(n) => FeatureNode {
            kind,
            node: Some(n),
            rows: g.value(n).rows(),
            refinement: None,
        },
        None => FeatureNode::empty(kind),
    }
}

/// Runs a modality's stack over its scale-0 sequences (one per sentence or
/// per image) and returns every feature set the stream produces.
///
/// Text yields n-gram token, sentence, n-gram sentence and document sets;
/// vision yields n-gram RoI and image sets, plus n-gram image and document
/// when the upper vision layer runs. With no input sequences every set is
/// empty.
pub fn run_stream(
    g: &mut Graph,
    stack: &AggregationStack,
    scale0: &[NodeId],
    modality: Modality,
    cfg: &StreamConfig,
    rng: &mut Rng,
) -> Result<Vec<FeatureNode>> {
    let dim = stack.dim();
    let (low_kind, mid_kind, upper_body_kind, positional, upper) = match modality {
        Modality::Text => (
            FeatureKind::NgramToken,
            FeatureKind::Sentence,
            FeatureKind::NgramSentence,
            cfg.positional,
            stack.layers.len() >= 2,
        ),
        Modality::Vision => (
            FeatureKind::NgramRoi,
            FeatureKind::Image,
            FeatureKind::NgramImage,
            false,
            cfg.vision_upper && stack.layers.len() >= 2,
        ),
    };
    let inputs: Vec<NodeId> = scale0.iter().map(|&s| with_positions(g, s, positional)).collect();
    let (heads, bodies) = aggregate_layer(g, &stack.layers[0], &inputs)?;
    let low = stack_rows(g, &bodies, dim);
    let mid = stack_rows(g, &heads, dim);

    let mut out = vec![refined(g, low_kind, low, cfg, rng)?, plain(g, mid_kind, mid)];
    if upper || (modality == Modality::Vision && cfg.vision_upper) {
        match (mid, stack.layers.get(1)) {
            (Some(mid), Some(layer)) => {
                let seq = with_positions(g, mid, positional);
                let (doc, body) = layer.forward(g, seq)?;
                out.push(plain(g, upper_body_kind, Some(body)));
                out.push(plain(g, FeatureKind::Document, Some(doc)));
            }
            _ => {
                out.push(FeatureNode::empty(upper_body_kind));
                out.push(FeatureNode::empty(FeatureKind::Document));
            }
        }
    }
    Ok(out)
}

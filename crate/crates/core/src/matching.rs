//! Cosine score blocks, top-K selection and the prediction head.

use std::fmt::Write as _;

use crate::graph::{self, Graph, NodeId, TOPK_PAD};
use crate::msmn::{FeatureKind, FeatureSet};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// `S[i][j] = <a_i, b_j> / (max(|a_i|, ε) · max(|b_j|, ε))`, ε = 1e-8.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    graph::cosine_forward(a, b).0
}

/// The three scored pairings, in canonical flattening order. Product text
/// against product images is deliberately not scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    /// product text × review text
    TextText = 0,
    /// review text × review images
    ReviewTextImage = 1,
    /// product images × review images
    ImageImage = 2,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::TextText, Block::ReviewTextImage, Block::ImageImage];

    pub fn id(self) -> usize {
        self as usize
    }
}

/// Row counts `(n1, n2, n3, n4)` of `Rtp, Rtr, Rvp, Rvr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreShape {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub n4: usize,
}

impl ScoreShape {
    pub fn new(n1: usize, n2: usize, n3: usize, n4: usize) -> Self {
        Self { n1, n2, n3, n4 }
    }

    /// One block of `n` scores; handy for selecting over a bare list.
    pub fn flat(n: usize) -> Self {
        Self::new(1, n, 0, 0)
    }

    pub fn block_dims(&self, b: Block) -> (usize, usize) {
        match b {
            Block::TextText => (self.n1, self.n2),
            Block::ReviewTextImage => (self.n2, self.n4),
            Block::ImageImage => (self.n3, self.n4),
        }
    }

    /// `n1·n2 + n2·n4 + n3·n4`.
    pub fn score_count(&self) -> usize {
        self.n1 * self.n2 + self.n2 * self.n4 + self.n3 * self.n4
    }

    /// Maps a flat score index to `(block, row, col)`.
    pub fn locate(&self, mut flat: usize) -> Option<(Block, usize, usize)> {
        for b in Block::ALL {
            let (r, c) = self.block_dims(b);
            if flat < r * c {
                return Some((b, flat / c, flat % c));
            }
            flat -= r * c;
        }
        None
    }
}

/// The four representation matrices of one (product, review) pair, with
/// the feature kind each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    pub rtp: Matrix,
    pub rtr: Matrix,
    pub rvp: Matrix,
    pub rvr: Matrix,
    /// Row provenance, indexed like `[rtp, rtr, rvp, rvr]`.
    pub provenance: [Vec<FeatureKind>; 4],
}

impl PairFeatures {
    /// Stacks the given sets into the four matrices, in the order given.
    /// Sets are routed by their field and modality tags.
    pub fn assemble(sets: &[FeatureSet], dim: usize) -> Self {
        use crate::msmn::{Field, Modality};
        let slot = |s: &FeatureSet| match (s.field, s.modality) {
            (Field::Product, Modality::Text) => 0,
            (Field::Review, Modality::Text) => 1,
            (Field::Product, Modality::Vision) => 2,
            (Field::Review, Modality::Vision) => 3,
        };
        let mut parts: [Vec<&Matrix>; 4] = Default::default();
        let mut provenance: [Vec<FeatureKind>; 4] = Default::default();
        for s in sets {
            let i = slot(s);
            parts[i].push(&s.vectors);
            provenance[i].extend(std::iter::repeat_n(s.kind, s.vectors.rows()));
        }
        let [a, b, c, d] = parts.map(|p| Matrix::vstack(&p, dim));
        Self {
            rtp: a,
            rtr: b,
            rvp: c,
            rvr: d,
            provenance,
        }
    }

    pub fn shape(&self) -> ScoreShape {
        ScoreShape::new(self.rtp.rows(), self.rtr.rows(), self.rvp.rows(), self.rvr.rows())
    }

    pub fn contains_kind(&self, kind: FeatureKind) -> bool {
        self.provenance.iter().flatten().any(|&k| k == kind)
    }
}

/// Row-major flattening of the three cosine blocks, concatenated in
/// canonical order.
pub fn collect_scores(pf: &PairFeatures) -> Vec<f64> {
    let blocks = [
        cosine_matrix(&pf.rtp, &pf.rtr),
        cosine_matrix(&pf.rtr, &pf.rvr),
        cosine_matrix(&pf.rvp, &pf.rvr),
    ];
    blocks.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

/// Flat indices of the `k` largest scores, descending, ties to the lower
/// index; `None` pads when fewer than `k` scores exist.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<Option<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    let mut out: Vec<Option<usize>> = idx.into_iter().map(Some).collect();
    out.resize(k, None);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Score {
        flat: usize,
        block: Block,
        row: usize,
        col: usize,
    },
    Pad,
}

/// Sorted top-K regression input with per-slot provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingFeature {
    pub h: Vec<f64>,
    pub selection: Vec<Slot>,
    pub pad_value: f64,
}

impl MatchingFeature {
    pub fn flat_indices(&self) -> Vec<Option<usize>> {
        self.selection
            .iter()
            .map(|s| match s {
                Slot::Score { flat, .. } => Some(*flat),
                Slot::Pad => None,
            })
            .collect()
    }
}

pub fn topk_select(scores: &[f64], shape: &ScoreShape, k: usize) -> MatchingFeature {
    assert_eq!(scores.len(), shape.score_count(), "scores do not match shape");
    let picked = topk_indices(scores, k);
    let h = picked.iter().map(|p| p.map_or(TOPK_PAD, |i| scores[i])).collect();
    let selection = picked
        .into_iter()
        .map(|p| match p {
            Some(flat) => {
                let (block, row, col) = shape.locate(flat).expect("index within shape");
                Slot::Score { flat, block, row, col }
            }
            None => Slot::Pad,
        })
        .collect();
    MatchingFeature {
        h,
        selection,
        pad_value: TOPK_PAD,
    }
}

/// `σ(w·h + b)`.
pub fn predict(weight: &[f64], bias: f64, h: &[f64]) -> f64 {
    graph::sigmoid(crate::tensor::dot(weight, h) + bias)
}

/// Linear layer over the K-vector followed by a sigmoid. The weight is
/// stored as a `K × 1` column.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    pub k: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PredictionHead {
    /// Zero-initialised head.
    pub fn new(store: &mut ParamStore, k: usize) -> Self {
        Self {
            k,
            weight: store.add("head.weight", Matrix::zeros(k, 1)),
            bias: store.add("head.bias", Matrix::zeros(1, 1)),
        }
    }

    pub fn forward(&self, g: &mut Graph, h: NodeId) -> NodeId {
        let z = g.linear(h, self.weight, self.bias);
        g.sigmoid(z)
    }

    pub fn predict(&self, store: &ParamStore, h: &[f64]) -> f64 {
        predict(store.get(self.weight).as_slice(), store.get(self.bias)[(0, 0)], h)
    }
}

/// One line per score: `block,row,col,score,selected`, where `selected` is
/// the 1-based top-K slot or 0.
pub fn trace_lines(scores: &[f64], shape: &ScoreShape, feature: &MatchingFeature) -> String {
    let mut slot_of = vec![0usize; scores.len()];
    for (slot, s) in feature.selection.iter().enumerate() {
        if let Slot::Score { flat, .. } = s {
            slot_of[*flat] = slot + 1;
        }
    }
    let mut out = String::from("block,row,col,score,selected\n");
    for (flat, score) in scores.iter().enumerate() {
        let (b, r, c) = shape.locate(flat).expect("index within shape");
        let _ = writeln!(out, "{},{r},{c},{score},{}", b.id(), slot_of[flat]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msmn::{Field, Modality};
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(
            cosine_matrix(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[0.0, 1.0]])),
            m(&[&[1.0, 0.0]])
        );
        let s = cosine_matrix(&m(&[&[3.0, 4.0]]), &m(&[&[4.0, 3.0]]));
        assert!((s[(0, 0)] - 24.0 / 25.0).abs() < 1e-15);
        let z = cosine_matrix(&m(&[&[0.0, 0.0], &[1.0, 2.0]]), &m(&[&[1.0, 1.0], &[2.0, -1.0]]));
        assert!(z.is_finite());
        assert_eq!(z.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let a = m(&[&[0.3, -1.7, 2.9], &[1e-3, 5.0, 0.1]]);
        let s = cosine_matrix(&a, &a);
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(1, 1)], 1.0);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.2, 0.9, -0.5, 0.7], 2), vec![Some(1), Some(3)]);
        assert_eq!(topk_indices(&[0.5, 0.5], 1), vec![Some(0)]);
        let f = topk_select(&[0.1, 0.3, 0.2], &ScoreShape::flat(3), 5);
        assert_eq!(f.h, vec![0.3, 0.2, 0.1, -1.0, -1.0]);
        assert_eq!(f.selection[4], Slot::Pad);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.0; 3], 0.0, &[0.4, 0.1, -0.2]), 0.5);
        // 1 / (1 + e^-2) = 0.880797077977882...
        assert!((predict(&[1.0, 1.0], 0.5, &[1.0, 0.5]) - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn locate_walks_blocks_in_order() {
        let shape = ScoreShape::new(2, 3, 4, 5);
        assert_eq!(shape.locate(0), Some((Block::TextText, 0, 0)));
        assert_eq!(shape.locate(5), Some((Block::TextText, 1, 2)));
        assert_eq!(shape.locate(6), Some((Block::ReviewTextImage, 0, 0)));
        assert_eq!(shape.locate(21), Some((Block::ImageImage, 0, 0)));
        assert_eq!(shape.locate(40), Some((Block::ImageImage, 3, 4)));
        assert_eq!(shape.locate(41), None);
    }

    fn set(field: Field, modality: Modality, kind: FeatureKind, rows: usize, seed: f64) -> FeatureSet {
        FeatureSet {
            field,
            modality,
            kind,
            vectors: Matrix::from_vec(rows, 2, (0..rows * 2).map(|i| (i as f64 + seed).sin()).collect()),
        }
    }

    #[test]
    fn assemble_routes_and_tracks_rows() {
        let sets = vec![
            set(Field::Product, Modality::Text, FeatureKind::NgramToken, 2, 0.0),
            set(Field::Product, Modality::Text, FeatureKind::Sentence, 1, 1.0),
            set(Field::Review, Modality::Text, FeatureKind::Sentence, 3, 2.0),
            set(Field::Review, Modality::Vision, FeatureKind::Image, 1, 3.0),
        ];
        let pf = PairFeatures::assemble(&sets, 2);
        assert_eq!(pf.shape(), ScoreShape::new(3, 3, 0, 1));
        assert_eq!(
            pf.provenance[0],
            vec![FeatureKind::NgramToken, FeatureKind::NgramToken, FeatureKind::Sentence]
        );
        assert_eq!(collect_scores(&pf).len(), 3 * 3 + 3);
        assert!(!pf.contains_kind(FeatureKind::NgramRoi));
    }

    proptest! {
        #[test]
        fn topk_matches_full_sort(scores in prop::collection::vec(-1.0f64..1.0, 0..40), k in 1usize..50) {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let got = topk_indices(&scores, k);
            for (slot, g) in got.iter().enumerate() {
                prop_assert_eq!(*g, order.get(slot).copied());
            }
        }

        #[test]
        fn cosine_is_scale_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 9),
            c in 0.01f64..100.0,
        ) {
            let am = Matrix::from_vec(2, 3, a);
            let bm = Matrix::from_vec(3, 3, b);
            prop_assume!(am.row_iter().all(|r| crate::tensor::norm(r) > 1e-3));
            let mut scaled = am.clone();
            scaled.row_mut(0).iter_mut().for_each(|v| *v *= c);
            let s1 = cosine_matrix(&am, &bm);
            let s2 = cosine_matrix(&scaled, &bm);
            prop_assert!(s1.max_abs_diff(&s2) < 1e-12);
            prop_assert!(s1.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}

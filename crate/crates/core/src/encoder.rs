//! Scale-0 encoders: token embeddings with a GRU contextualizer for text,
//! and an affine projection of region vectors for vision. Both land in the
//! shared `d`-dimensional space.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub(crate) fn uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Uniform in [-0.1, 0.1].
    pub fn random(store: &mut ParamStore, vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.add("embedding.table", uniform(rng, vocab_size, dim, 0.1));
        Self { table, vocab_size, dim }
    }

    pub fn from_matrix(store: &mut ParamStore, rows: Matrix) -> Self {
        let (vocab_size, dim) = rows.shape();
        let table = store.add("embedding.table", rows);
        Self { table, vocab_size, dim }
    }

    fn check_ids(&self, sentence: &[usize]) -> Result<()> {
        match sentence.iter().position(|&t| t >= self.vocab_size) {
            Some(position) => Err(Error::TokenOutOfRange {
                token: sentence[position],
                position,
                vocab: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// `l × d_e` rows of the table, one per token.
    pub fn embed(&self, g: &mut Graph, sentence: &[usize]) -> Result<NodeId> {
        self.check_ids(sentence)?;
        Ok(g.embed(self.table, sentence))
    }

    pub fn lookup(&self, store: &ParamStore, sentence: &[usize]) -> Result<Matrix> {
        self.check_ids(sentence)?;
        Ok(store.get(self.table).select_rows(sentence))
    }
}

/// Reads an embedding file: one line per token id, whitespace-separated floats.
pub fn load_embedding_file(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.is_empty() {
            return Err(parse_err("empty embedding row".into()));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(format!(
                    "row has {} values, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite embedding value".into()));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "embedding file is empty".into(),
        });
    }
    Ok(Matrix::from_rows(&rows))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams {
    /// `d_e × 3d`, gate blocks update | reset | candidate.
    pub wx: ParamId,
    /// `d × 3d`.
    pub uh: ParamId,
    /// `1 × 3d`.
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn random(store: &mut ParamStore, input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            wx: store.add("gru.wx", uniform(rng, input_dim, 3 * hidden, bound)),
            uh: store.add("gru.uh", uniform(rng, hidden, 3 * hidden, bound)),
            bias: store.add("gru.bias", uniform(rng, 1, 3 * hidden, bound)),
            input_dim,
            hidden,
        }
    }

    /// Hidden state after each input row; row `t` depends only on rows `..=t`.
    pub fn contextualize(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let xv = g.value(x);
        if xv.rows() == 0 {
            return Err(Error::InvalidArgument("GRU input has no rows".into()));
        }
        if xv.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "GRU expects width {}, got {}",
                self.input_dim,
                xv.cols()
            )));
        }
        if !xv.is_finite() {
            return Err(Error::NonFinite("GRU input".into()));
        }
        Ok(g.gru(x, self.wx, self.uh, self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualProjection {
    /// `d_v × d` (applied as `regions · weight`).
    pub weight: ParamId,
    /// `1 × d`.
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl VisualProjection {
    pub fn random(store: &mut ParamStore, input_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Self {
            weight: store.add("visual.weight", uniform(rng, input_dim, output_dim, bound)),
            bias: store.add("visual.bias", uniform(rng, 1, output_dim, bound)),
            input_dim,
            output_dim,
        }
    }

    pub fn project(&self, g: &mut Graph, regions: NodeId) -> Result<NodeId> {
        let rv = g.value(regions);
        if rv.rows() == 0 {
            return Err(Error::InvalidArgument("image has no regions".into()));
        }
        if rv.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "visual projection expects width {}, got {}",
                self.input_dim,
                rv.cols()
            )));
        }
        Ok(g.linear(regions, self.weight, self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Gradients;
    use crate::rng;

    fn max_rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn embedding_lookup_examples() {
        let mut store = ParamStore::new();
        let table = EmbeddingTable::from_matrix(&mut store, Matrix::identity(6));
        let rows = table.lookup(&store, &[2, 5]).unwrap();
        assert_eq!(rows.row(0), Matrix::identity(6).row(2));
        assert_eq!(rows.row(1), Matrix::identity(6).row(5));
        let same = table.lookup(&store, &[0, 0, 0]).unwrap();
        assert_eq!(same.row(0), same.row(2));
        let err = table.lookup(&store, &[1, 9]).unwrap_err();
        assert!(matches!(
            err,
            Error::TokenOutOfRange {
                token: 9,
                position: 1,
                ..
            }
        ));
    }

    #[test]
    fn zero_gru_outputs_zero() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        let gru = GruParams::random(&mut store, 3, 4, &mut r);
        for id in [gru.wx, gru.uh, gru.bias] {
            let (rows, cols) = store.get(id).shape();
            *store.get_mut(id) = Matrix::zeros(rows, cols);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(uniform(&mut r, 5, 3, 2.0));
        let h = gru.contextualize(&mut g, x).unwrap();
        assert_eq!(g.value(h), &Matrix::zeros(5, 4));
        let x1 = g.constant(uniform(&mut r, 1, 3, 1.0));
        let h1 = gru.contextualize(&mut g, x1).unwrap();
        assert_eq!(g.value(h1).shape(), (1, 4));
    }

    #[test]
    fn gru_rejects_non_finite_input() {
        let mut store = ParamStore::new();
        let gru = GruParams::random(&mut store, 2, 2, &mut rng::seeded(0));
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::from_rows(&[vec![f64::NAN, 0.0]]));
        assert!(matches!(gru.contextualize(&mut g, x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gru_is_causal() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(5);
        let gru = GruParams::random(&mut store, 3, 4, &mut r);
        let x = uniform(&mut r, 6, 3, 1.0);
        let mut x2 = x.clone();
        x2[(3, 1)] += 0.7;
        let run = |x: &Matrix| {
            let mut g = Graph::new(&store);
            let xn = g.constant(x.clone());
            let h = gru.contextualize(&mut g, xn).unwrap();
            g.value(h).clone()
        };
        let (a, b) = (run(&x), run(&x2));
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    /// Sum of `w ⊙ output` for a fixed random `w`, with parameter gradients.
    fn weighted_output(
        store: &ParamStore,
        input: &Matrix,
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
    ) -> (f64, Gradients) {
        let mut g = Graph::new(store);
        let x = g.constant(input.clone());
        let y = build(&mut g, x);
        let (r, c) = g.value(y).shape();
        let w = uniform(&mut rng::seeded(77), r, c, 1.0);
        let val = g.value(y).as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        let mut grads = Gradients::for_store(store);
        g.backward_with(y, w, &mut grads);
        (val, grads)
    }

    fn check_params(store: &ParamStore, input: &Matrix, build: impl Fn(&mut Graph, NodeId) -> NodeId + Copy) {
        let (_, grads) = weighted_output(store, input, build);
        let mut worst: f64 = 0.0;
        for id in store.ids() {
            for k in 0..store.get(id).as_slice().len() {
                let h = 1e-5 * store.get(id).as_slice()[k].abs().max(1.0);
                let mut plus = store.clone();
                plus.get_mut(id).as_mut_slice()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).as_mut_slice()[k] -= h;
                let numeric =
                    (weighted_output(&plus, input, build).0 - weighted_output(&minus, input, build).0) / (2.0 * h);
                worst = worst.max(max_rel_err(grads.value_at(id, k), numeric));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(9);
        let gru = GruParams::random(&mut store, 4, 4, &mut r);
        let x = uniform(&mut r, 3, 4, 1.0);
        check_params(&store, &x, |g, x| gru.contextualize(g, x).unwrap());
    }

    #[test]
    fn projection_identity_constant_and_gradient() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(3);
        let proj = VisualProjection::random(&mut store, 5, 5, &mut r);
        let x = uniform(&mut r, 3, 5, 1.0);
        check_params(&store, &x, |g, x| proj.project(g, x).unwrap());

        *store.get_mut(proj.weight) = Matrix::identity(5);
        *store.get_mut(proj.bias) = Matrix::zeros(1, 5);
        let mut g = Graph::new(&store);
        let xn = g.constant(x.clone());
        let y = proj.project(&mut g, xn).unwrap();
        assert_eq!(g.value(y), &x);

        let bias = Matrix::row_vector(&[1.0, -2.0, 0.5, 0.0, 3.0]);
        *store.get_mut(proj.weight) = Matrix::zeros(5, 5);
        *store.get_mut(proj.bias) = bias.clone();
        let mut g = Graph::new(&store);
        let xn = g.constant(x);
        let y = proj.project(&mut g, xn).unwrap();
        assert!(g.value(y).row_iter().all(|row| row == bias.row(0)));
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let proj = VisualProjection::random(&mut store, 5, 4, &mut rng::seeded(1));
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::zeros(2, 3));
        assert!(matches!(proj.project(&mut g, x), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_is_affine_so_linear_part_is_linear() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(4);
        let proj = VisualProjection::random(&mut store, 4, 3, &mut r);
        *store.get_mut(proj.bias) = Matrix::zeros(1, 3);
        let (x, y) = (uniform(&mut r, 2, 4, 1.0), uniform(&mut r, 2, 4, 1.0));
        let f = |m: &Matrix| {
            let mut g = Graph::new(&store);
            let n = g.constant(m.clone());
            let out = proj.project(&mut g, n).unwrap();
            g.value(out).clone()
        };
        let (alpha, beta) = (0.3, -1.7);
        let lhs = f(&x.scale(alpha).add(&y.scale(beta)));
        let rhs = f(&x).scale(alpha).add(&f(&y).scale(beta));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn embedding_file_parses_and_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("emb.txt");
        fs::write(&ok, "0.1 0.2\n-1 3\n").unwrap();
        let m = load_embedding_file(&ok).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m[(1, 1)], 3.0);
        let bad = dir.path().join("bad.txt");
        fs::write(&bad, "0.1 0.2\n1\n").unwrap();
        assert!(matches!(load_embedding_file(&bad), Err(Error::Parse { line: 2, .. })));
    }
}

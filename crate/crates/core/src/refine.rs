//! Semantics refinement: shrinks a dense feature set to at most `C`
//! representatives.
//!
//! With `n` input rows, `C` centers and expected cluster size `r`:
//! - `n <= C`: passthrough, every row kept;
//! - `C < n <= C·r`: `C` distinct rows sampled uniformly;
//! - `n > C·r`: Lloyd k-means from `C` sampled rows, representatives are the
//!   cluster means.
//!
//! Gradients follow the representatives' construction with the random draw
//! and the cluster assignment held constant: a sampled row receives its
//! representative's gradient, a centroid spreads its gradient equally over
//! its members.

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineConfig {
    pub centers: usize,
    pub cluster_size: usize,
    pub max_iters: usize,
}

impl RefineConfig {
    pub fn new(centers: usize, cluster_size: usize) -> Self {
        Self {
            centers,
            cluster_size,
            max_iters: 10,
        }
    }

    /// `⌈√K⌉`.
    pub fn auto_centers(k: usize) -> usize {
        let mut c = (k as f64).sqrt().ceil() as usize;
        // guard the float ceil against off-by-one at perfect squares
        while c > 0 && (c - 1) * (c - 1) >= k {
            c -= 1;
        }
        while c * c < k {
            c += 1;
        }
        c
    }

    /// Branch the refinement takes for `n` inputs.
    pub fn branch_for(&self, n: usize) -> Branch {
        if n <= self.centers {
            Branch::Passthrough
        } else if n <= self.centers.saturating_mul(self.cluster_size) {
            Branch::Sampled
        } else {
            Branch::Clustered
        }
    }

    fn validate(&self) -> Result<()> {
        if self.centers < 1 {
            return Err(Error::config("c", "number of centers must be at least 1"));
        }
        if self.cluster_size < 1 {
            return Err(Error::config("r", "expected cluster size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Passthrough,
    Sampled,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Kept,
    Sampled(bool),
    Cluster(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub representatives: Matrix,
    /// One entry per input row.
    pub assignment: Vec<Assignment>,
    pub branch: Branch,
    /// Input rows averaged into each representative.
    pub sources: Vec<Vec<usize>>,
    /// Present for the clustered branch.
    pub kmeans: Option<KMeansResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    /// Completed assignment+update rounds.
    pub iterations: usize,
    /// Within-cluster sum of squares after every assignment and every update step.
    pub wcss_trace: Vec<f64>,
    /// Members behind each centroid's current value; `None` if the cluster
    /// never had members and still sits at its initial position.
    pub members: Vec<Option<Vec<usize>>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    points
        .row_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.row_iter().enumerate() {
                let d = sq_dist(p, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn wcss(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    points
        .row_iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, centroids.row(c)))
        .sum()
}

/// Plain Lloyd iterations. Ties go to the lowest centroid index; an empty
/// cluster keeps its previous centroid. Stops when an assignment repeats or
/// after `max_iters` rounds.
pub fn kmeans_lloyd(points: &Matrix, init: &Matrix, max_iters: usize) -> KMeansResult {
    assert_eq!(points.cols(), init.cols(), "points and centroids differ in width");
    let k = init.rows();
    let mut centroids = init.clone();
    let mut members: Vec<Option<Vec<usize>>> = vec![None; k];
    let mut current: Option<Vec<usize>> = None;
    let mut wcss_trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        let next = nearest(points, &centroids);
        wcss_trace.push(wcss(points, &centroids, &next));
        if current.as_ref() == Some(&next) {
            break;
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in next.iter().enumerate() {
            groups[c].push(i);
        }
        for (c, grp) in groups.into_iter().enumerate() {
            if !grp.is_empty() {
                let mean = points.group_mean(std::slice::from_ref(&grp));
                centroids.row_mut(c).copy_from_slice(mean.row(0));
                members[c] = Some(grp);
            }
        }
        wcss_trace.push(wcss(points, &centroids, &next));
        current = Some(next);
        iterations += 1;
    }
    let assignment = current.unwrap_or_else(|| nearest(points, &centroids));
    KMeansResult {
        centroids,
        assignment,
        iterations,
        wcss_trace,
        members,
    }
}

fn sorted_sample(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx = sample_indices(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

pub fn refine(s: &Matrix, cfg: &RefineConfig, rng: &mut Rng) -> Result<RefineOutcome> {
    cfg.validate()?;
    let n = s.rows();
    let c = cfg.centers;
    let branch = cfg.branch_for(n);
    let (sources, assignment, kmeans) = match branch {
        Branch::Passthrough => (
            (0..n).map(|i| vec![i]).collect::<Vec<_>>(),
            vec![Assignment::Kept; n],
            None,
        ),
        Branch::Sampled => {
            let idx = sorted_sample(rng, n, c);
            let mut assignment = vec![Assignment::Sampled(false); n];
            for &i in &idx {
                assignment[i] = Assignment::Sampled(true);
            }
            (idx.into_iter().map(|i| vec![i]).collect(), assignment, None)
        }
        Branch::Clustered => {
            let init_idx = sorted_sample(rng, n, c);
            let km = kmeans_lloyd(s, &s.select_rows(&init_idx), cfg.max_iters);
            let sources = km
                .members
                .iter()
                .zip(&init_idx)
                .map(|(m, &i)| m.clone().unwrap_or_else(|| vec![i]))
                .collect();
            let assignment = km.assignment.iter().map(|&a| Assignment::Cluster(a)).collect();
            (sources, assignment, Some(km))
        }
    };
    let representatives = s.group_mean(&sources);
    Ok(RefineOutcome {
        representatives,
        assignment,
        branch,
        sources,
        kmeans,
    })
}

/// Refines the rows of `x` inside a graph, routing gradients per the outcome.
pub fn refine_node(g: &mut Graph, x: NodeId, cfg: &RefineConfig, rng: &mut Rng) -> Result<(NodeId, RefineOutcome)> {
    let outcome = refine(g.value(x), cfg, rng)?;
    let node = match outcome.branch {
        Branch::Passthrough => x,
        _ => g.group_mean(x, outcome.sources.clone()),
    };
    debug_assert_eq!(g.value(node), &outcome.representatives);
    Ok((node, outcome))
}

//! Ranking metrics: MAP and NDCG@N.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, POSITIVE_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::Model;

/// NDCG gain form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gain {
    /// `2^label − 1`
    Exponential,
    /// `label`
    Linear,
}

impl Gain {
    fn of(self, label: u8) -> f64 {
        match self {
            Gain::Exponential => (1u64 << label) as f64 - 1.0,
            Gain::Linear => label as f64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Gain::Exponential => "exponential",
            Gain::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Gain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(Gain::Exponential),
            "linear" => Ok(Gain::Linear),
            _ => Err(Error::config(
                "gain",
                format!("expected exponential or linear, got {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConventions {
    /// Relevant means `label > tau`.
    pub tau: u8,
    pub gain: Gain,
}

impl Default for MetricConventions {
    fn default() -> Self {
        Self {
            tau: POSITIVE_THRESHOLD,
            gain: Gain::Exponential,
        }
    }
}

/// Labels in predicted order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
}

impl RankedList {
    /// Sorts by score descending; ties go to the lexicographically smaller id.
    pub fn from_scores(entries: &[(&str, f64, u8)]) -> Self {
        let mut idx: Vec<usize> = (0..entries.len()).collect();
        idx.sort_by(|&a, &b| {
            entries[b]
                .1
                .total_cmp(&entries[a].1)
                .then_with(|| entries[a].0.cmp(entries[b].0))
        });
        Self {
            ids: idx.iter().map(|&i| entries[i].0.to_string()).collect(),
            labels: idx.iter().map(|&i| entries[i].2).collect(),
        }
    }
}

/// Mean over relevant positions of precision at that position; 0 when
/// nothing is relevant.
pub fn average_precision(labels: &[u8], tau: u8) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l > tau {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        total / hits as f64
    }
}

fn dcg(labels: &[u8], n: usize, gain: Gain) -> f64 {
    labels
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, &l)| gain.of(l) / ((i + 2) as f64).log2())
        .sum()
}

/// DCG@N over IDCG@N; lists with no gain score 1.
pub fn ndcg_at(labels: &[u8], n: usize, gain: Gain) -> f64 {
    let mut ideal = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, n, gain);
    if idcg == 0.0 {
        1.0
    } else {
        (dcg(labels, n, gain) / idcg).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductMetrics {
    pub product_id: String,
    pub ap: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
    pub per_product: Vec<ProductMetrics>,
}

impl MetricsReport {
    pub fn from_lists(lists: &[(String, RankedList)], conv: &MetricConventions) -> Self {
        let per_product: Vec<ProductMetrics> = lists
            .iter()
            .map(|(pid, l)| ProductMetrics {
                product_id: pid.clone(),
                ap: average_precision(&l.labels, conv.tau),
                ndcg3: ndcg_at(&l.labels, 3, conv.gain),
                ndcg5: ndcg_at(&l.labels, 5, conv.gain),
            })
            .collect();
        let n = per_product.len().max(1) as f64;
        let mean = |f: fn(&ProductMetrics) -> f64| per_product.iter().map(f).sum::<f64>() / n;
        Self {
            map: mean(|m| m.ap),
            ndcg3: mean(|m| m.ndcg3),
            ndcg5: mean(|m| m.ndcg5),
            per_product,
        }
    }

    /// Header plus one `all` row and one row per product.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("product,MAP,NDCG@3,NDCG@5\n");
        s.push_str(&format!("all,{},{},{}\n", self.map, self.ndcg3, self.ndcg5));
        for p in &self.per_product {
            s.push_str(&format!("{},{},{},{}\n", p.product_id, p.ap, p.ndcg3, p.ndcg5));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Ranks each product's full review set by model score.
pub fn evaluate(model: &Model, dataset: &Dataset, conv: &MetricConventions, seed: u64) -> Result<MetricsReport> {
    use rayon::prelude::*;
    if dataset.products().is_empty() {
        return Err(Error::InvalidArgument("evaluation split has no products".into()));
    }
    let lists = dataset
        .products()
        .par_iter()
        .map(|p| {
            let reviews = dataset.reviews(&p.id);
            let scores = model.score_reviews(p, reviews, seed)?;
            let entries: Vec<(&str, f64, u8)> = reviews
                .iter()
                .zip(&scores)
                .map(|(r, &s)| (r.id.as_str(), s, r.label))
                .collect();
            Ok((p.id.clone(), RankedList::from_scores(&entries)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_lists(&lists, conv))
}

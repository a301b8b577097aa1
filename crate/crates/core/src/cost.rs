//! Analytic cost model of fusion versus matching, and instrumented counts.
//!
//! Costs are multiply-accumulate counts of the dominant kernels only:
//! attention score and value products, and cosine numerators.

use std::time::Instant;

use crate::counters::{self, OpCounts};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::msmn::Field;
use crate::rng;

/// Sequence pair description. `k1`, `k2` are per-layer downscale ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workload {
    pub l1: f64,
    pub l2: f64,
    pub d: f64,
    pub n_layers: u32,
    pub k1: f64,
    pub k2: f64,
}

impl Workload {
    pub fn new(l1: f64, l2: f64, d: f64, n_layers: u32, k1: f64, k2: f64) -> Result<Self> {
        let w = Self {
            l1,
            l2,
            d,
            n_layers,
            k1,
            k2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !(finite_pos(self.l1) && finite_pos(self.l2) && finite_pos(self.d) && self.n_layers > 0) {
            return Err(Error::InvalidArgument(format!(
                "workload sizes must be positive: {self:?}"
            )));
        }
        if !(self.k1 > 1.0 && self.k2 > 1.0 && self.k1.is_finite() && self.k2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "downscale ratios must exceed 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Instrumented counterparts of the analytic terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredCost {
    pub attention: f64,
    pub matching: f64,
    pub ratio: f64,
    /// Mean seconds per forward pass: `Σ t_i / (iterations × intervals)`.
    pub seconds_per_pass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub workload: Workload,
    pub c_f: f64,
    pub c_att: f64,
    pub c_mm_bound: f64,
    pub c_m: f64,
    pub ratio: f64,
    pub measured: Option<MeasuredCost>,
}

impl CostReport {
    pub const CSV_HEADER: &'static str =
        "l1,l2,d,N,k1,k2,C_f,C_att,C_mm_bound,C_m,ratio,measured_att,measured_mm,measured_ratio,seconds_per_pass";

    pub fn csv_row(&self) -> String {
        let w = &self.workload;
        let measured = match &self.measured {
            Some(m) => format!("{},{},{},{}", m.attention, m.matching, m.ratio, m.seconds_per_pass),
            None => ",,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{measured}",
            w.l1, w.l2, w.d, w.n_layers, w.k1, w.k2, self.c_f, self.c_att, self.c_mm_bound, self.c_m, self.ratio
        )
    }
}

/// `(2·l1·l2 + l1² + l2²)·N·d`.
pub fn fusion_cost(w: &Workload) -> f64 {
    (2.0 * w.l1 * w.l2 + w.l1 * w.l1 + w.l2 * w.l2) * w.n_layers as f64 * w.d
}

/// `2(l1² + l2²)d`, higher-scale terms dropped.
pub fn attention_cost(w: &Workload) -> f64 {
    2.0 * (w.l1 * w.l1 + w.l2 * w.l2) * w.d
}

/// Geometric-series bound `l1·l2·d / (k1·k2·(1 − 1/k1)(1 − 1/k2))`.
pub fn matching_bound(w: &Workload) -> f64 {
    w.l1 * w.l2 * w.d / (w.k1 * w.k2 * (1.0 - 1.0 / w.k1) * (1.0 - 1.0 / w.k2))
}

/// The finite sum the bound majorises: `l1·l2·d·Σ_{i≤N} k1⁻ⁱ·Σ_{j≤N} k2⁻ʲ`.
pub fn matching_exact(w: &Workload) -> f64 {
    let series = |k: f64| (1..=w.n_layers as i32).map(|i| k.powi(-i)).sum::<f64>();
    w.l1 * w.l2 * w.d * series(w.k1) * series(w.k2)
}

pub fn matching_cost(w: &Workload) -> CostReport {
    let c_f = fusion_cost(w);
    let c_att = attention_cost(w);
    let c_mm_bound = matching_bound(w);
    let c_m = c_att + c_mm_bound;
    CostReport {
        workload: *w,
        c_f,
        c_att,
        c_mm_bound,
        c_m,
        ratio: c_m / c_f,
        measured: None,
    }
}

/// `C_m / C_f` at `l1 = x·l2`.
pub fn ratio_at(x: f64, base: &Workload) -> f64 {
    let w = Workload {
        l1: x * base.l2,
        ..*base
    };
    matching_cost(&w).ratio
}

/// Smallest `x = l1/l2` in `(0, x_max]` with `C_m = C_f`, found by a sign
/// scan on a fine grid then bisection. `None` when the two never meet.
pub fn solve_crossover(base: &Workload, x_max: f64) -> Option<f64> {
    let gap = |x: f64| ratio_at(x, base) - 1.0;
    let steps = 100_000;
    let mut prev_x = x_max / steps as f64;
    let mut prev = gap(prev_x);
    for i in 2..=steps {
        let x = x_max * i as f64 / steps as f64;
        let cur = gap(x);
        if prev == 0.0 {
            return Some(prev_x);
        }
        if prev.signum() != cur.signum() {
            let (mut lo, mut hi) = (prev_x, x);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if gap(mid).signum() == gap(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev_x = x;
        prev = cur;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub intervals: usize,
    pub iterations: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            intervals: 5,
            iterations: 100,
        }
    }
}

/// Counts one pair-of-sequences forward pass: a text sequence of `l1`
/// tokens and an image of `l2` regions, each encoded by its aggregation
/// stack, then cosine scores between the two streams' matched features.
pub fn measure_pass(model: &Model, l1: usize, l2: usize, seed: u64) -> Result<OpCounts> {
    if l1 == 0 || l2 == 0 {
        return Err(Error::InvalidArgument("measured sequences must be non-empty".into()));
    }
    let cfg = &model.config;
    let tokens: Vec<usize> = (0..l1).map(|i| (i * 7 + 3) % cfg.vocab_size).collect();
    let regions = crate::encoder::uniform(&mut rng::seeded(seed), l2, cfg.d_v, 1.0);
    let (res, counts) = counters::scoped(|| -> Result<()> {
        let mut g = Graph::new(&model.store);
        let mut r = crate::model::field_rng(seed, "measure");
        let enc = model.encode_field(&mut g, Field::Review, &[tokens], &[regions], &mut r)?;
        let mask = cfg.matched_kinds();
        let stack = |g: &mut Graph, sets: &[crate::msmn::FeatureNode]| {
            let parts: Vec<_> = sets
                .iter()
                .filter(|s| mask.contains(s.kind))
                .filter_map(|s| s.node)
                .collect();
            g.concat_rows(&parts, cfg.d)
        };
        let t = stack(&mut g, &enc.text);
        let v = stack(&mut g, &enc.vision);
        g.cosine(t, v);
        Ok(())
    });
    res?;
    Ok(counts)
}

/// Analytic report plus measured counts and timing for `l1 × l2` at the
/// model's width.
pub fn measure_counts(model: &Model, w: &Workload, timing: Timing, seed: u64) -> Result<CostReport> {
    w.validate()?;
    let (l1, l2) = (w.l1.round() as usize, w.l2.round() as usize);
    let counts = measure_pass(model, l1, l2, seed)?;
    let mut elapsed = 0.0;
    for _ in 0..timing.intervals {
        let start = Instant::now();
        for _ in 0..timing.iterations {
            measure_pass(model, l1, l2, seed)?;
        }
        elapsed += start.elapsed().as_secs_f64();
    }
    let analytic_w = Workload {
        d: model.config.d as f64,
        ..*w
    };
    let mut report = matching_cost(&analytic_w);
    let att = counts.attention_macs as f64;
    let mm = counts.cosine_macs as f64;
    report.measured = Some(MeasuredCost {
        attention: att,
        matching: mm,
        ratio: (att + mm) / report.c_f,
        seconds_per_pass: elapsed / (timing.iterations * timing.intervals).max(1) as f64,
    });
    Ok(report)
}

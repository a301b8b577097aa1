//! Listwise training: loss, Adam, the epoch loop, and gradient checking.

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;

use crate::corpus::{sample_batch, Batch, BatchEntry, Dataset, Review};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricConventions, MetricsReport};
use crate::graph::{self, Fault, Graph, NodeId};
use crate::model::Model;
use crate::params::{Gradients, ParamStore};
use crate::rng;
use crate::tensor::Matrix;

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    graph::softmax_in_place(&mut out);
    out
}

/// Cross-entropy between `softmax(y)` and `softmax(f)`.
pub fn listwise_loss(f: &[f64], y: &[f64]) -> Result<f64> {
    if f.len() != y.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", f.len(), y.len())));
    }
    if f.len() < 2 {
        return Err(Error::InvalidArgument(
            "listwise loss needs at least two reviews".into(),
        ));
    }
    Ok(graph::listwise_forward(f, y).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListwiseBatchLoss {
    pub value: f64,
    pub per_product: Vec<f64>,
}

/// Discrete choices made during a forward pass. Finite differences are only
/// meaningful where perturbation leaves these unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub refinement: Vec<Vec<Vec<usize>>>,
    pub selection: Vec<Vec<Option<usize>>>,
}

struct ProductPass {
    loss: f64,
    grads: Option<Gradients>,
    signature: Signature,
}

fn labels(reviews: &[&Review]) -> Vec<f64> {
    reviews.iter().map(|r| r.label as f64).collect()
}

/// Forward (and optionally backward) for one product and its sampled reviews.
fn product_pass(
    model: &Model,
    entry: &BatchEntry,
    seed: u64,
    backward: bool,
    fault: Option<Fault>,
) -> Result<ProductPass> {
    let reviews = entry.reviews();
    let mut g = Graph::new(&model.store);
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let pe = model.encode_product(&mut g, entry.product, seed)?;
    let mut refinement = pe.refinement_sources();
    let mut selection = Vec::with_capacity(reviews.len());
    let mut preds: Vec<NodeId> = Vec::with_capacity(reviews.len());
    for r in &reviews {
        let re = model.encode_review(&mut g, r, seed)?;
        refinement.extend(re.refinement_sources());
        let nodes = model.score_encoded(&mut g, &pe, &re);
        selection.push(nodes.feature.flat_indices());
        preds.push(nodes.f);
    }
    let f = g.concat_rows(&preds, 1);
    let y = labels(&reviews);
    if y.len() < 2 {
        return Err(Error::InvalidArgument(
            "listwise loss needs at least two reviews".into(),
        ));
    }
    let loss = g.listwise_loss(f, &y);
    let loss_val = g.scalar(loss);
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss for product {} (predictions {:?})",
            entry.product.id,
            g.value(f).as_slice()
        )));
    }
    let grads = backward.then(|| {
        let mut grads = Gradients::for_store(&model.store);
        g.backward(loss, &mut grads);
        grads
    });
    Ok(ProductPass {
        loss: loss_val,
        grads,
        signature: Signature { refinement, selection },
    })
}

fn entry_seed(seed: u64, entry: &BatchEntry) -> u64 {
    rng::derive(seed, &[rng::hash_str(&entry.product.id)])
}

/// Sum of per-product listwise losses.
pub fn batch_loss(model: &Model, batch: &Batch, seed: u64) -> Result<ListwiseBatchLoss> {
    let per_product = batch
        .entries
        .par_iter()
        .map(|e| product_pass(model, e, entry_seed(seed, e), false, None).map(|p| p.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(ListwiseBatchLoss {
        value: per_product.iter().sum(),
        per_product,
    })
}

/// Loss and parameter gradients; products run in parallel and their
/// gradients merge in batch order, so results do not depend on thread count.
pub fn batch_loss_and_grads(model: &Model, batch: &Batch, seed: u64) -> Result<(ListwiseBatchLoss, Gradients)> {
    batch_pass(model, batch, seed, None).map(|(l, g, _)| (l, g))
}

fn batch_pass(
    model: &Model,
    batch: &Batch,
    seed: u64,
    fault: Option<Fault>,
) -> Result<(ListwiseBatchLoss, Gradients, Vec<Signature>)> {
    let passes = batch
        .entries
        .par_iter()
        .map(|e| product_pass(model, e, entry_seed(seed, e), true, fault))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::for_store(&model.store);
    let mut per_product = Vec::with_capacity(passes.len());
    let mut sigs = Vec::with_capacity(passes.len());
    for p in passes {
        grads.merge(p.grads.as_ref().expect("backward requested"));
        per_product.push(p.loss);
        sigs.push(p.signature);
    }
    let loss = ListwiseBatchLoss {
        value: per_product.iter().sum(),
        per_product,
    };
    Ok((loss, grads, sigs))
}

fn batch_forward(model: &Model, batch: &Batch, seed: u64) -> Result<(f64, Vec<Signature>)> {
    let passes = batch
        .entries
        .par_iter()
        .map(|e| product_pass(model, e, entry_seed(seed, e), false, None))
        .collect::<Result<Vec<_>>>()?;
    let loss = passes.iter().map(|p| p.loss).sum();
    Ok((loss, passes.into_iter().map(|p| p.signature).collect()))
}

/// Listwise loss over every product's full review list, at a fixed seed.
pub fn dataset_loss(model: &Model, dataset: &Dataset, seed: u64) -> Result<f64> {
    let losses = dataset
        .products()
        .par_iter()
        .map(|p| {
            let reviews = dataset.reviews(&p.id);
            let f = model.score_reviews(p, reviews, seed)?;
            let y: Vec<f64> = reviews.iter().map(|r| r.label as f64).collect();
            listwise_loss(&f, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            let p = store.get_mut(id).as_mut_slice();
            for k in 0..p.len() {
                let gk = g.as_slice()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub n_neg: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a dev MAP improvement; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub metrics: MetricConventions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            n_neg: 3,
            epochs: 30,
            patience: 5,
            seed: 0,
            metrics: MetricConventions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean sampled-batch loss.
    pub loss: f64,
    pub dev: Option<MetricsReport>,
}

impl EpochRecord {
    /// `epoch,loss,dev_MAP,dev_N3,dev_N5`; dev fields are empty without a dev split.
    pub fn csv_line(&self) -> String {
        match &self.dev {
            Some(d) => format!("{},{},{},{},{}", self.epoch, self.loss, d.map, d.ndcg3, d.ndcg5),
            None => format!("{},{},,,", self.epoch, self.loss),
        }
    }
}

pub const EPOCH_LOG_HEADER: &str = "epoch,loss,dev_MAP,dev_N3,dev_N5";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (the last one without a dev split).
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s = format!("{EPOCH_LOG_HEADER}\n");
        for r in &self.log {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }
}

/// Seed used to score held-out data during training and evaluation.
pub fn eval_seed(seed: u64) -> u64 {
    rng::derive(seed, &[u64::MAX])
}

/// Trains in place. Each epoch draws `⌈products / B⌉` batches. With a dev
/// split, the parameters from the best dev-MAP epoch are restored at the end.
pub fn train(model: &mut Model, train_set: &Dataset, dev: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_set, dev, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    model: &mut Model,
    train_set: &Dataset,
    dev: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("lr", "must be a non-negative number"));
    }
    let b = cfg.batch_size.min(train_set.products().len());
    let steps = train_set.products().len().div_ceil(b);
    let mut sampler = rng::seeded(rng::derive(cfg.seed, &[0x5a]));
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let batch = sample_batch(train_set, b, cfg.n_neg, &mut sampler)?;
            let step_seed = rng::derive(cfg.seed, &[epoch as u64, step as u64]);
            let (loss, grads) = batch_loss_and_grads(model, &batch, step_seed)?;
            if !loss.value.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} step {step}: loss {} per product {:?}",
                    loss.value, loss.per_product
                )));
            }
            adam.update(&mut model.store, &grads);
            total += loss.value;
        }
        let dev_report = dev
            .map(|d| evaluate(model, d, &cfg.metrics, eval_seed(cfg.seed)))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            loss: total / steps as f64,
            dev: dev_report,
        };
        on_epoch(&record);
        let map = record.dev.as_ref().map(|d| d.map);
        log.push(record);

        if let Some(map) = map {
            if best.as_ref().is_none_or(|(m, _, _)| map > *m) {
                best = Some((map, epoch, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => log.len(),
    };
    Ok(TrainOutcome { log, best_epoch })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub worst_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because the perturbation changed a discrete choice.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.worst_rel_error >= self.tolerance)
            .map(|g| g.group.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing_groups().is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Entries probed per parameter; `None` probes all of them.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            samples_per_param: Some(6),
            seed: 0,
            fault: None,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the batch loss with central differences
/// (step `1e-5 · max(1, |θ|)`), reporting the worst relative error per
/// parameter group.
pub fn grad_check(model: &Model, batch: &Batch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let seed = opts.seed;
    let (_, grads, base_sig) = batch_pass(model, batch, seed, opts.fault)?;
    let mut pick = rng::seeded(rng::derive(seed, &[0x6c]));
    let mut probe = model.clone();
    let mut groups: Vec<GroupCheck> = model
        .store
        .groups()
        .into_iter()
        .map(|group| GroupCheck {
            group,
            worst_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        })
        .collect();

    for (id, param) in model.store.iter() {
        let len = param.value.as_slice().len();
        let entries: Vec<usize> = match opts.samples_per_param {
            Some(n) if n < len => sample_indices(&mut pick, len, n).into_vec(),
            _ => (0..len).collect(),
        };
        let gi = groups
            .iter()
            .position(|g| g.group == param.group())
            .expect("group listed");
        for k in entries {
            let theta = param.value.as_slice()[k];
            let h = 1e-5 * theta.abs().max(1.0);
            probe.store.get_mut(id).as_mut_slice()[k] = theta + h;
            let (lp, sp) = batch_forward(&probe, batch, seed)?;
            probe.store.get_mut(id).as_mut_slice()[k] = theta - h;
            let (lm, sm) = batch_forward(&probe, batch, seed)?;
            probe.store.get_mut(id).as_mut_slice()[k] = theta;
            if sp != base_sig || sm != base_sig {
                groups[gi].skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let err = relative_error(grads.value_at(id, k), numeric);
            let g = &mut groups[gi];
            g.checked += 1;
            g.worst_rel_error = g.worst_rel_error.max(err);
        }
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, GeneratorConfig};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        assert!((listwise_loss(&[0.3; 3], &[2.0; 3]).unwrap() - 3f64.ln()).abs() < 1e-12);
        // softmax([4,0]) = [e^4, 1]/(e^4+1); log-softmax([0.9,0.1]) = -ln(1+e^-0.8), -0.8-ln(1+e^-0.8)
        let t = 4f64.exp() / (4f64.exp() + 1.0);
        let l1 = (1.0 + (-0.8f64).exp()).ln();
        let expected = t * l1 + (1.0 - t) * (0.8 + l1);
        let got = listwise_loss(&[0.9, 0.1], &[4.0, 0.0]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.3855).abs() < 1e-4);
        assert!(listwise_loss(&[0.5], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn loss_shift_invariance(
            f in prop::collection::vec(-3.0f64..3.0, 2..8),
            c in -5.0f64..5.0,
            seed in 0u64..1000,
        ) {
            let y: Vec<f64> = (0..f.len()).map(|i| ((seed + i as u64 * 7) % 5) as f64).collect();
            let base = listwise_loss(&f, &y).unwrap();
            let fs: Vec<f64> = f.iter().map(|v| v + c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
            prop_assert!((listwise_loss(&fs, &y).unwrap() - base).abs() < 1e-12);
            prop_assert!((listwise_loss(&f, &ys).unwrap() - base).abs() < 1e-12);
            prop_assert!(base >= 0.0);
        }
    }

    fn tiny_data(seed: u64) -> Dataset {
        let cfg = GeneratorConfig {
            n_products: 4,
            reviews_per_product: 5,
            vocab_size: 20,
            d_v: 4,
            n_topics: 2,
            product_sentences: 2,
            review_sentences: 1,
            sentence_len: 3,
            product_images: 1,
            review_images: 1,
            regions_per_image: 2,
            signature_size: 4,
            ..GeneratorConfig::default()
        };
        generate_synthetic(&cfg, seed).unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_e: 8,
            d: 8,
            d_v: 4,
            n_heads: 2,
            k: 8,
            ..ModelConfig::default()
        };
        let mut m = Model::new(cfg, seed).unwrap();
        let w = crate::encoder::uniform(&mut rng::seeded(seed ^ 1), 8, 1, 1.0);
        *m.store.get_mut(m.head.weight) = w;
        m
    }

    #[test]
    fn batch_loss_is_additive() {
        let data = tiny_data(1);
        let model = tiny_model(2);
        let batch = sample_batch(&data, 2, 1, &mut rng::seeded(3)).unwrap();
        let both = batch_loss(&model, &batch, 9).unwrap();
        let mut sum = 0.0;
        for e in &batch.entries {
            let single = Batch {
                entries: vec![e.clone()],
                n_neg: 1,
            };
            sum += batch_loss(&model, &single, 9).unwrap().value;
        }
        assert!((both.value - sum).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let data = tiny_data(1);
        let mut model = tiny_model(2);
        *model.store.get_mut(model.head.weight) = Matrix::zeros(8, 1);
        let batch = sample_batch(&data, 1, 1, &mut rng::seeded(4)).unwrap();
        let loss = batch_loss(&model, &batch, 0).unwrap();
        // equal predictions: loss is ln 2 regardless of labels
        assert!((loss.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_check_passes_on_tiny_model() {
        let data = tiny_data(5);
        let model = tiny_model(6);
        let batch = sample_batch(&data, 1, 1, &mut rng::seeded(7)).unwrap();
        let report = grad_check(&model, &batch, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.groups.iter().any(|g| g.group == "head" && g.checked > 0));
    }

    #[test]
    fn grad_check_flags_corrupted_gru() {
        let data = tiny_data(5);
        let model = tiny_model(6);
        let batch = sample_batch(&data, 1, 1, &mut rng::seeded(7)).unwrap();
        let opts = GradCheckOptions {
            fault: Some(Fault::GruRecurrentGrad),
            samples_per_param: None,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&model, &batch, &opts).unwrap();
        assert_eq!(report.failing_groups(), vec!["gru"]);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let data = tiny_data(8);
        let mut model = tiny_model(9);
        let before = model.store.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 2,
            n_neg: 1,
            epochs: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &data, None, &cfg).unwrap();
        assert_eq!(model.store, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(10);
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 2,
            n_neg: 1,
            epochs: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model(11);
            let out = train(&mut m, &data, Some(&data), &cfg).unwrap();
            (out.log_text(), m.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(a.starts_with(EPOCH_LOG_HEADER));
    }
}

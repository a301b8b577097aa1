//! Dataset model, the line-delimited record format, the planted-topic
//! synthetic generator, and the training batch sampler.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

/// Reviews with a label above this are positives for sampling and relevant for MAP.
pub const POSITIVE_THRESHOLD: u8 = 2;
pub const MAX_LABEL: u8 = 4;

pub type Sentence = Vec<usize>;

/// Helpfulness label from approval votes: `min(4, floor(log2(votes + 1)))`.
pub fn clip_label(votes: u64) -> u8 {
    // floor(log2(v + 1)) is the bit length of v + 1 minus one
    let bits = 63 - (votes.saturating_add(1)).leading_zeros() as u64;
    bits.min(u64::from(MAX_LABEL)) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    pub id: String,
    pub sentences: Vec<Sentence>,
    /// One `n_regions × d_v` matrix per image.
    pub images: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Review {
    pub id: String,
    pub product_id: String,
    pub sentences: Vec<Sentence>,
    pub images: Vec<Matrix>,
    pub votes: u64,
    pub label: u8,
}

impl Review {
    pub fn is_positive(&self) -> bool {
        self.label > POSITIVE_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// Split named by a file stem such as `dev.jsonl`; anything else is train.
    pub fn from_path(path: &Path) -> Split {
        match path.file_stem().and_then(|s| s.to_str()) {
            Some("dev") => Split::Dev,
            Some("test") => Split::Test,
            _ => Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    products: Vec<Product>,
    reviews_by_product: BTreeMap<String, Vec<Review>>,
    split: Split,
}

impl Dataset {
    /// Validates every invariant and groups reviews under their products.
    /// Review order within a product follows input order.
    pub fn new(products: Vec<Product>, reviews: Vec<Review>, split: Split) -> Result<Self> {
        let mut reviews_by_product: BTreeMap<String, Vec<Review>> = BTreeMap::new();
        let mut region_dim: Option<usize> = None;
        let mut check_images = |id: &str, images: &[Matrix]| -> Result<()> {
            for img in images {
                if img.rows() == 0 {
                    return Err(invariant(id, "image with no regions"));
                }
                match region_dim {
                    None => region_dim = Some(img.cols()),
                    Some(d) if d != img.cols() => {
                        return Err(invariant(
                            id,
                            format!("region dimension {} differs from {}", img.cols(), d),
                        ))
                    }
                    _ => {}
                }
                if !img.is_finite() {
                    return Err(invariant(id, "non-finite region value"));
                }
            }
            Ok(())
        };
        for p in &products {
            check_text(&p.id, &p.sentences)?;
            check_images(&p.id, &p.images)?;
            if reviews_by_product.insert(p.id.clone(), Vec::new()).is_some() {
                return Err(invariant(&p.id, "duplicate product id"));
            }
        }
        for r in reviews {
            check_text(&r.id, &r.sentences)?;
            check_images(&r.id, &r.images)?;
            let expected = clip_label(r.votes);
            if r.label != expected {
                return Err(invariant(
                    &r.id,
                    format!(
                        "label {} does not match votes {} (expected {expected})",
                        r.label, r.votes
                    ),
                ));
            }
            match reviews_by_product.get_mut(&r.product_id) {
                Some(list) => list.push(r),
                None => return Err(invariant(&r.id, format!("unknown product id {}", r.product_id))),
            }
        }
        if split == Split::Train {
            for (pid, list) in &reviews_by_product {
                if !list.iter().any(Review::is_positive) || list.iter().all(Review::is_positive) {
                    return Err(invariant(
                        pid,
                        "training products need at least one positive and one negative review",
                    ));
                }
            }
        }
        Ok(Self {
            products,
            reviews_by_product,
            split,
        })
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn reviews(&self, product_id: &str) -> &[Review] {
        self.reviews_by_product.get(product_id).map_or(&[], Vec::as_slice)
    }

    pub fn num_reviews(&self) -> usize {
        self.reviews_by_product.values().map(Vec::len).sum()
    }

    /// Region vector width, if any image exists.
    pub fn region_dim(&self) -> Option<usize> {
        self.products
            .iter()
            .flat_map(|p| p.images.iter())
            .chain(self.reviews_by_product.values().flatten().flat_map(|r| r.images.iter()))
            .map(Matrix::cols)
            .next()
    }

    /// Largest token id in any text, if any.
    pub fn max_token(&self) -> Option<usize> {
        self.products
            .iter()
            .flat_map(|p| p.sentences.iter())
            .chain(
                self.reviews_by_product
                    .values()
                    .flatten()
                    .flat_map(|r| r.sentences.iter()),
            )
            .flatten()
            .copied()
            .max()
    }

    /// Partitions products (with their reviews) into train/dev/test by
    /// position. Counts are `round(n·train_frac)` and `round(n·dev_frac)`,
    /// the remainder goes to test.
    pub fn partition(&self, train_frac: f64, dev_frac: f64) -> Result<(Dataset, Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&dev_frac) || train_frac + dev_frac > 1.0 + 1e-12
        {
            return Err(Error::InvalidArgument(format!(
                "split fractions {train_frac}/{dev_frac} do not fit in [0,1]"
            )));
        }
        let n = self.products.len();
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_dev = ((n as f64 * dev_frac).round() as usize).min(n - n_train);
        let take = |range: std::ops::Range<usize>, split: Split| {
            let products: Vec<Product> = self.products[range].to_vec();
            let reviews = products
                .iter()
                .flat_map(|p| self.reviews(&p.id).iter().cloned())
                .collect();
            Dataset::new(products, reviews, split)
        };
        Ok((
            take(0..n_train, Split::Train)?,
            take(n_train..n_train + n_dev, Split::Dev)?,
            take(n_train + n_dev..n, Split::Test)?,
        ))
    }
}

fn invariant(id: &str, message: impl Into<String>) -> Error {
    Error::Invariant {
        id: id.to_string(),
        message: message.into(),
    }
}

fn check_text(id: &str, sentences: &[Sentence]) -> Result<()> {
    if sentences.is_empty() {
        return Err(invariant(id, "text has no sentences"));
    }
    if sentences.iter().any(Vec::is_empty) {
        return Err(invariant(id, "empty sentence"));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Product {
        id: String,
        sentences: Vec<Sentence>,
        images: Vec<Vec<Vec<f32>>>,
    },
    Review {
        id: String,
        product_id: String,
        sentences: Vec<Sentence>,
        images: Vec<Vec<Vec<f32>>>,
        votes: u64,
        label: u8,
    },
}

fn images_from_record(id: &str, images: Vec<Vec<Vec<f32>>>) -> Result<Vec<Matrix>> {
    images
        .into_iter()
        .map(|regions| {
            let width = regions.first().map_or(0, Vec::len);
            if regions.iter().any(|r| r.len() != width) {
                return Err(invariant(id, "ragged region vectors"));
            }
            let data = regions.into_iter().flatten().map(f64::from).collect::<Vec<_>>();
            Ok(Matrix::from_vec(data.len() / width.max(1), width, data))
        })
        .collect()
}

fn images_to_record(images: &[Matrix]) -> Vec<Vec<Vec<f32>>> {
    images
        .iter()
        .map(|m| m.row_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect())
        .collect()
}

/// Reads a line-delimited record file. The split comes from the file stem
/// (`train`, `dev`, `test`; anything else is train).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_dataset_as(path, Split::from_path(path))
}

pub fn load_dataset_as(path: &Path, split: Split) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut products = Vec::new();
    let mut reviews = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match record {
            Record::Product { id, sentences, images } => {
                let images = images_from_record(&id, images)?;
                products.push(Product { id, sentences, images });
            }
            Record::Review {
                id,
                product_id,
                sentences,
                images,
                votes,
                label,
            } => {
                let images = images_from_record(&id, images)?;
                reviews.push(Review {
                    id,
                    product_id,
                    sentences,
                    images,
                    votes,
                    label,
                });
            }
        }
    }
    Dataset::new(products, reviews, split)
}

/// Writes each product followed by its reviews, one JSON record per line.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &dataset.products {
        let rec = Record::Product {
            id: p.id.clone(),
            sentences: p.sentences.clone(),
            images: images_to_record(&p.images),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        for r in dataset.reviews(&p.id) {
            let rec = Record::Review {
                id: r.id.clone(),
                product_id: r.product_id.clone(),
                sentences: r.sentences.clone(),
                images: images_to_record(&r.images),
                votes: r.votes,
                label: r.label,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the planted-topic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_products: usize,
    pub reviews_per_product: usize,
    pub vocab_size: usize,
    pub d_v: usize,
    pub n_topics: usize,
    /// 0 plants exact alignment; larger values jitter review alignment,
    /// token choice and region vectors.
    pub noise: f64,
    pub product_sentences: usize,
    pub review_sentences: usize,
    pub sentence_len: usize,
    pub product_images: usize,
    pub review_images: usize,
    pub regions_per_image: usize,
    /// Probability that a review carries images at all.
    pub review_image_prob: f64,
    /// Distinct tokens describing one product.
    pub signature_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_products: 50,
            reviews_per_product: 10,
            vocab_size: 400,
            d_v: 32,
            n_topics: 8,
            noise: 0.0,
            product_sentences: 3,
            review_sentences: 2,
            sentence_len: 6,
            product_images: 2,
            review_images: 1,
            regions_per_image: 4,
            review_image_prob: 1.0,
            signature_size: 12,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("n_products", self.n_products),
            ("vocab_size", self.vocab_size),
            ("d_v", self.d_v),
            ("n_topics", self.n_topics),
            ("product_sentences", self.product_sentences),
            ("review_sentences", self.review_sentences),
            ("sentence_len", self.sentence_len),
            ("regions_per_image", self.regions_per_image),
            ("signature_size", self.signature_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.reviews_per_product < 2 {
            return Err(Error::config(
                "reviews_per_product",
                "need at least 2 to hold a positive and a negative review",
            ));
        }
        if self.vocab_size / (self.n_topics + 1) < self.signature_size {
            return Err(Error::config(
                "vocab_size",
                "too small for n_topics blocks of signature_size tokens plus background",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.review_image_prob) {
            return Err(Error::config("review_image_prob", "must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Planted alignment of a label-`label` review with its product, in [0,1].
pub fn planted_alignment(label: u8) -> f64 {
    f64::from(label) / f64::from(MAX_LABEL)
}

fn gaussian_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit vector orthogonal to unit `u`, random otherwise.
fn orthogonal_unit(rng: &mut Rng, u: &[f64]) -> Vec<f64> {
    loop {
        let mut v = gaussian_unit(rng, u.len());
        let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 || u.len() == 1 {
            normalize(&mut v);
            return v;
        }
    }
}

fn votes_for_label(rng: &mut Rng, label: u8) -> u64 {
    if label == 0 {
        return 0;
    }
    let lo = (1u64 << label) - 1;
    let hi = if label >= MAX_LABEL {
        lo * 3
    } else {
        (1u64 << (label + 1)) - 2
    };
    rng.random_range(lo..=hi)
}

fn image_from_signal(rng: &mut Rng, signal: &[f64], regions: usize, noise: f64) -> Matrix {
    let d = signal.len();
    let scale = noise / (d as f64).sqrt();
    let mut data = Vec::with_capacity(regions * d);
    for _ in 0..regions {
        for &s in signal {
            let jitter: f64 = if noise > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
            // stored as f32 in files, so round here to keep save/load exact
            data.push(f64::from((s + scale * jitter) as f32));
        }
    }
    Matrix::from_vec(regions, d, data)
}

/// Builds a planted-topic corpus with one shared split (`Train`).
///
/// Each product draws a signature token set from its topic's vocabulary
/// block and a unit signal vector. A review with label `L` mixes the product
/// signal with an orthogonal direction at weight `L/4`, uses that fraction
/// of signature tokens in its text, and derives its region vectors from the
/// mixed signal.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(seed);
    let block = cfg.vocab_size / (cfg.n_topics + 1);
    let background = cfg.n_topics * block..cfg.vocab_size;
    let topic_vectors: Vec<Vec<f64>> = (0..cfg.n_topics).map(|_| gaussian_unit(&mut rng, cfg.d_v)).collect();

    let mut products = Vec::with_capacity(cfg.n_products);
    let mut reviews = Vec::with_capacity(cfg.n_products * cfg.reviews_per_product);
    for p in 0..cfg.n_products {
        let topic = rng.random_range(0..cfg.n_topics);
        let signature: Vec<usize> = sample_indices(&mut rng, block, cfg.signature_size)
            .into_iter()
            .map(|i| topic * block + i)
            .collect();
        let mut signal: Vec<f64> = gaussian_unit(&mut rng, cfg.d_v)
            .iter()
            .zip(&topic_vectors[topic])
            .map(|(a, b)| 0.5 * a + b)
            .collect();
        normalize(&mut signal);

        let product_id = format!("p{p:04}");
        let sentences = (0..cfg.product_sentences)
            .map(|_| {
                (0..cfg.sentence_len)
                    .map(|_| signature[rng.random_range(0..signature.len())])
                    .collect()
            })
            .collect();
        let images = (0..cfg.product_images)
            .map(|_| image_from_signal(&mut rng, &signal, cfg.regions_per_image, cfg.noise))
            .collect();
        products.push(Product {
            id: product_id.clone(),
            sentences,
            images,
        });

        // one positive and one negative first, then cycle through all labels
        let mut labels: Vec<u8> = vec![rng.random_range(3..=4), rng.random_range(0..=2)];
        labels.extend((2..cfg.reviews_per_product).map(|i| (i % 5) as u8));
        labels.shuffle(&mut rng);

        for (k, &label) in labels.iter().enumerate() {
            let mut alignment = planted_alignment(label);
            if cfg.noise > 0.0 {
                let jitter: f64 = StandardNormal.sample(&mut rng);
                alignment = (alignment + 0.25 * cfg.noise * jitter).clamp(0.0, 1.0);
            }
            let other = orthogonal_unit(&mut rng, &signal);
            let mut review_signal: Vec<f64> = signal
                .iter()
                .zip(&other)
                .map(|(s, o)| alignment * s + (1.0 - alignment) * o)
                .collect();
            normalize(&mut review_signal);

            let total_tokens = cfg.review_sentences * cfg.sentence_len;
            let on_topic = (alignment * total_tokens as f64).round() as usize;
            let mut tokens: Vec<usize> = (0..total_tokens)
                .map(|i| {
                    if i < on_topic {
                        signature[rng.random_range(0..signature.len())]
                    } else {
                        rng.random_range(background.clone())
                    }
                })
                .collect();
            tokens.shuffle(&mut rng);
            let sentences = tokens.chunks(cfg.sentence_len).map(<[usize]>::to_vec).collect();

            let images = if rng.random::<f64>() < cfg.review_image_prob {
                (0..cfg.review_images)
                    .map(|_| image_from_signal(&mut rng, &review_signal, cfg.regions_per_image, cfg.noise))
                    .collect()
            } else {
                Vec::new()
            };
            reviews.push(Review {
                id: format!("{product_id}-r{k:02}"),
                product_id: product_id.clone(),
                sentences,
                images,
                votes: votes_for_label(&mut rng, label),
                label,
            });
        }
    }
    Dataset::new(products, reviews, Split::Train)
}

/// One product with its sampled positive and negatives.
#[derive(Debug, Clone)]
pub struct BatchEntry<'a> {
    pub product: &'a Product,
    pub positive: &'a Review,
    pub negatives: Vec<&'a Review>,
}

impl<'a> BatchEntry<'a> {
    /// Positive first, then negatives in sampled order.
    pub fn reviews(&self) -> Vec<&'a Review> {
        std::iter::once(self.positive)
            .chain(self.negatives.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub entries: Vec<BatchEntry<'a>>,
    pub n_neg: usize,
}

impl Batch<'_> {
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn num_reviews(&self) -> usize {
        self.entries.iter().map(|e| 1 + e.negatives.len()).sum()
    }
}

/// Samples `b` distinct training products, and per product one positive and
/// `n_neg` distinct negatives.
pub fn sample_batch<'a>(dataset: &'a Dataset, b: usize, n_neg: usize, rng: &mut Rng) -> Result<Batch<'a>> {
    if dataset.split() != Split::Train {
        return Err(Error::InvalidArgument(format!(
            "batches are drawn from the train split, got {}",
            dataset.split().name()
        )));
    }
    if b == 0 || b > dataset.products().len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} must be in 1..={}",
            dataset.products().len()
        )));
    }
    let picked = sample_indices(rng, dataset.products().len(), b);
    let mut entries = Vec::with_capacity(b);
    for pi in picked {
        let product = &dataset.products()[pi];
        let reviews = dataset.reviews(&product.id);
        let positives: Vec<&Review> = reviews.iter().filter(|r| r.is_positive()).collect();
        let negatives: Vec<&Review> = reviews.iter().filter(|r| !r.is_positive()).collect();
        if positives.is_empty() {
            return Err(Error::Sampling {
                product: product.id.clone(),
                message: "no positive review".into(),
            });
        }
        if negatives.len() < n_neg {
            return Err(Error::Sampling {
                product: product.id.clone(),
                message: format!("needs {n_neg} negative reviews, has {}", negatives.len()),
            });
        }
        let positive = positives[rng.random_range(0..positives.len())];
        let negatives = sample_indices(rng, negatives.len(), n_neg)
            .into_iter()
            .map(|i| negatives[i])
            .collect();
        entries.push(BatchEntry {
            product,
            positive,
            negatives,
        });
    }
    Ok(Batch { entries, n_neg })
}

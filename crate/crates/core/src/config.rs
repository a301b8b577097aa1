//! Flat `key=value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::GeneratorConfig;
use crate::error::{Error, Result};
use crate::eval::{Gain, MetricConventions};
use crate::model::ModelConfig;
use crate::msmn::KindMask;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embedding_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub train_frac: f64,
    pub dev_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            dev_path: None,
            test_path: None,
            embedding_path: None,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            train_frac: 0.8,
            dev_frac: 0.1,
        }
    }
}

/// Every recognised key with a one-line description, in emission order.
pub const KEYS: &[(&str, &str)] = &[
    ("train_path", "training split file"),
    ("dev_path", "development split file"),
    ("test_path", "test split file"),
    (
        "embedding_path",
        "token embedding file (one row of floats per token id)",
    ),
    ("out_dir", "output directory"),
    ("vocab_size", "vocabulary size"),
    ("d_e", "token embedding width"),
    ("d", "shared representation width"),
    ("d_v", "region feature width"),
    ("n_heads", "attention heads"),
    ("n_layers", "aggregation layers per modality (1 or 2)"),
    ("k", "top-K matching scores"),
    ("r", "refinement cluster size"),
    ("c", "refinement centers, or auto for ceil(sqrt(K))"),
    ("kinds", "comma-separated matched feature kinds"),
    ("vision_layer2", "run the second vision layer"),
    ("include_document", "match document-level vectors"),
    ("refine", "enable semantics refinement"),
    ("max_iters", "k-means iteration cap"),
    ("positional", "sinusoidal positions on text"),
    ("lr", "learning rate"),
    ("batch_size", "products per batch"),
    ("n_neg", "negative reviews per product"),
    ("epochs", "training epochs"),
    ("patience", "early-stop patience on dev MAP (0 disables)"),
    ("seed", "random seed"),
    ("tau", "relevance threshold: label > tau"),
    ("gain", "NDCG gain: exponential or linear"),
    ("train_frac", "fraction of products in train"),
    ("dev_frac", "fraction of products in dev"),
    ("gen_products", "generated products"),
    ("gen_reviews_per_product", "generated reviews per product"),
    ("gen_vocab_size", "generated vocabulary size"),
    ("gen_d_v", "generated region width"),
    ("gen_topics", "generated topic blocks"),
    ("gen_noise", "generator noise level"),
    ("gen_product_sentences", "sentences per product"),
    ("gen_review_sentences", "sentences per review"),
    ("gen_sentence_len", "tokens per sentence"),
    ("gen_product_images", "images per product"),
    ("gen_review_images", "images per review"),
    ("gen_regions", "regions per image"),
    ("gen_review_image_prob", "probability a review has images"),
    ("gen_signature_size", "signature tokens per product"),
];

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::config(key, format!("expected a boolean, got {other:?}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let g = &mut self.generator;
        match key {
            "train_path" => self.train_path = opt_path(value),
            "dev_path" => self.dev_path = opt_path(value),
            "test_path" => self.test_path = opt_path(value),
            "embedding_path" => self.embedding_path = opt_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "vocab_size" => m.vocab_size = parse_as(key, value)?,
            "d_e" => m.d_e = parse_as(key, value)?,
            "d" => m.d = parse_as(key, value)?,
            "d_v" => m.d_v = parse_as(key, value)?,
            "n_heads" => m.n_heads = parse_as(key, value)?,
            "n_layers" => m.n_layers = parse_as(key, value)?,
            "k" => m.k = parse_as(key, value)?,
            "r" => m.r = parse_as(key, value)?,
            "c" => {
                m.centers = match value.trim() {
                    "auto" => None,
                    v => Some(parse_as(key, v)?),
                }
            }
            "kinds" => m.kinds = value.parse::<KindMask>()?,
            "vision_layer2" => m.vision_layer2 = parse_bool(key, value)?,
            "include_document" => m.include_document = parse_bool(key, value)?,
            "refine" => m.refine = parse_bool(key, value)?,
            "max_iters" => m.max_iters = parse_as(key, value)?,
            "positional" => m.positional = parse_bool(key, value)?,
            "lr" => t.lr = parse_as(key, value)?,
            "batch_size" => t.batch_size = parse_as(key, value)?,
            "n_neg" => t.n_neg = parse_as(key, value)?,
            "epochs" => t.epochs = parse_as(key, value)?,
            "patience" => t.patience = parse_as(key, value)?,
            "seed" => t.seed = parse_as(key, value)?,
            "tau" => t.metrics.tau = parse_as(key, value)?,
            "gain" => t.metrics.gain = value.trim().parse::<Gain>()?,
            "train_frac" => self.train_frac = parse_as(key, value)?,
            "dev_frac" => self.dev_frac = parse_as(key, value)?,
            "gen_products" => g.n_products = parse_as(key, value)?,
            "gen_reviews_per_product" => g.reviews_per_product = parse_as(key, value)?,
            "gen_vocab_size" => g.vocab_size = parse_as(key, value)?,
            "gen_d_v" => g.d_v = parse_as(key, value)?,
            "gen_topics" => g.n_topics = parse_as(key, value)?,
            "gen_noise" => g.noise = parse_as(key, value)?,
            "gen_product_sentences" => g.product_sentences = parse_as(key, value)?,
            "gen_review_sentences" => g.review_sentences = parse_as(key, value)?,
            "gen_sentence_len" => g.sentence_len = parse_as(key, value)?,
            "gen_product_images" => g.product_images = parse_as(key, value)?,
            "gen_review_images" => g.review_images = parse_as(key, value)?,
            "gen_regions" => g.regions_per_image = parse_as(key, value)?,
            "gen_review_image_prob" => g.review_image_prob = parse_as(key, value)?,
            "gen_signature_size" => g.signature_size = parse_as(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let g = &self.generator;
        let v = match key {
            "train_path" => show_path(&self.train_path),
            "dev_path" => show_path(&self.dev_path),
            "test_path" => show_path(&self.test_path),
            "embedding_path" => show_path(&self.embedding_path),
            "out_dir" => self.out_dir.display().to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "d_e" => m.d_e.to_string(),
            "d" => m.d.to_string(),
            "d_v" => m.d_v.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "k" => m.k.to_string(),
            "r" => m.r.to_string(),
            "c" => m.centers.map_or_else(|| "auto".to_string(), |c| c.to_string()),
            "kinds" => m.kinds.to_string(),
            "vision_layer2" => m.vision_layer2.to_string(),
            "include_document" => m.include_document.to_string(),
            "refine" => m.refine.to_string(),
            "max_iters" => m.max_iters.to_string(),
            "positional" => m.positional.to_string(),
            "lr" => t.lr.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "n_neg" => t.n_neg.to_string(),
            "epochs" => t.epochs.to_string(),
            "patience" => t.patience.to_string(),
            "seed" => t.seed.to_string(),
            "tau" => t.metrics.tau.to_string(),
            "gain" => t.metrics.gain.name().to_string(),
            "train_frac" => self.train_frac.to_string(),
            "dev_frac" => self.dev_frac.to_string(),
            "gen_products" => g.n_products.to_string(),
            "gen_reviews_per_product" => g.reviews_per_product.to_string(),
            "gen_vocab_size" => g.vocab_size.to_string(),
            "gen_d_v" => g.d_v.to_string(),
            "gen_topics" => g.n_topics.to_string(),
            "gen_noise" => g.noise.to_string(),
            "gen_product_sentences" => g.product_sentences.to_string(),
            "gen_review_sentences" => g.review_sentences.to_string(),
            "gen_sentence_len" => g.sentence_len.to_string(),
            "gen_product_images" => g.product_images.to_string(),
            "gen_review_images" => g.review_images.to_string(),
            "gen_regions" => g.regions_per_image.to_string(),
            "gen_review_image_prob" => g.review_image_prob.to_string(),
            "gen_signature_size" => g.signature_size.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    /// Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: PathBuf::from("<config>"),
                line: n + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            s.push_str(k);
            s.push('=');
            s.push_str(&self.get(k).expect("listed key"));
            s.push('\n');
        }
        s
    }

    pub fn metrics(&self) -> MetricConventions {
        self.train.metrics
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::config("lr", "must be a non-negative number"));
        }
        if self.train.metrics.tau > crate::corpus::MAX_LABEL {
            return Err(Error::config("tau", "must not exceed the largest label"));
        }
        for (key, v) in [("train_frac", self.train_frac), ("dev_frac", self.dev_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0,1]"));
            }
        }
        if self.train_frac + self.dev_frac > 1.0 {
            return Err(Error::config("dev_frac", "train_frac + dev_frac exceeds 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msmn::FeatureKind;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.emit()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable_and_gettable() {
        let mut cfg = RunConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("k=ninety").unwrap_err().to_string();
        assert!(e.contains("k:"), "{e}");
        let e = RunConfig::parse("bogus=1").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn auto_centers_and_comments() {
        let cfg = RunConfig::parse("# comment\nk=96\nc=auto\n\nr = 4  # trailing").unwrap();
        assert_eq!(cfg.model.effective_centers(), 10);
        assert_eq!(cfg.model.r, 4);
    }

    proptest! {
        #[test]
        fn random_configs_round_trip(
            k in 1usize..500,
            c in prop::option::of(1usize..30),
            lr in 0.0f64..1.0,
            noise in 0.0f64..2.0,
            seed in any::<u64>(),
            drop_image in any::<bool>(),
            vision in any::<bool>(),
        ) {
            let mut cfg = RunConfig::default();
            cfg.model.k = k;
            cfg.model.centers = c;
            cfg.model.vision_layer2 = vision;
            if drop_image {
                cfg.model.kinds = cfg.model.kinds.without(FeatureKind::Image);
            }
            cfg.train.lr = lr;
            cfg.train.seed = seed;
            cfg.generator.noise = noise;
            cfg.train_path = Some(PathBuf::from("data/train.jsonl"));
            prop_assert_eq!(RunConfig::parse(&cfg.emit()).unwrap(), cfg);
        }
    }
}

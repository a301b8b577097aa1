//! Feature-kind ablation: the full model plus seven masked variants.

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::msmn::{FeatureKind, KindMask};
use crate::train::{eval_seed, train, TrainConfig};

/// A named set of kinds removed from the matched features.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub removed: Vec<FeatureKind>,
}

/// Full model, each of the five kinds alone, then the two paired removals.
pub fn variants() -> Vec<Variant> {
    use FeatureKind::*;
    let mut out = vec![Variant {
        name: "full".into(),
        removed: vec![],
    }];
    let sets: [&[FeatureKind]; 7] = [
        &[NgramToken],
        &[Sentence],
        &[NgramSentence],
        &[NgramRoi],
        &[Image],
        &[NgramToken, NgramRoi],
        &[NgramSentence, Image],
    ];
    for removed in sets {
        let names: Vec<&str> = removed.iter().map(|k| k.name()).collect();
        out.push(Variant {
            name: format!("w/o {}", names.join(" & ")),
            removed: removed.to_vec(),
        });
    }
    out
}

impl Variant {
    pub fn mask(&self, base: KindMask) -> KindMask {
        self.removed.iter().fold(base, |m, &k| m.without(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub kinds: KindMask,
    pub metrics: MetricsReport,
    /// Pairs whose assembled features were inspected for removed kinds.
    pub pairs_checked: usize,
}

/// Fails if any pair of `data` assembles a row of a removed kind.
pub fn check_provenance(model: &Model, data: &Dataset, removed: &[FeatureKind], seed: u64) -> Result<usize> {
    let mut checked = 0;
    for p in data.products() {
        for r in data.reviews(&p.id) {
            let features = model.score_pair(p, r, seed)?.features;
            if let Some(k) = removed.iter().find(|&&k| features.contains_kind(k)) {
                return Err(Error::Invariant {
                    id: r.id.clone(),
                    message: format!("masked kind {k} reached the matching matrices"),
                });
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Trains and evaluates one model per variant, each from the same seed.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &Dataset,
    dev: Option<&Dataset>,
    test: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in variants() {
        let kinds = variant.mask(model_cfg.kinds);
        let cfg = ModelConfig {
            kinds,
            ..model_cfg.clone()
        };
        let mut model = Model::new(cfg, train_cfg.seed)?;
        train(&mut model, train_set, dev, train_cfg)?;
        let seed = eval_seed(train_cfg.seed);
        let pairs_checked = check_provenance(&model, test, &variant.removed, seed)?;
        let metrics = evaluate(&model, test, &train_cfg.metrics, seed)?;
        let row = AblationRow {
            variant,
            kinds,
            metrics,
            pairs_checked,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub const TABLE_HEADER: &str = "variant,kinds,MAP,NDCG@3,NDCG@5";

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant.name,
            r.kinds.to_string().replace(',', "+"),
            r.metrics.map,
            r.metrics.ndcg3,
            r.metrics.ndcg5
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_variants_with_distinct_masks() {
        let v = variants();
        assert_eq!(v.len(), 8);
        let masks: std::collections::HashSet<_> = v.iter().map(|x| x.mask(KindMask::standard())).collect();
        assert_eq!(masks.len(), 8);
        assert_eq!(v[6].name, "w/o ngram_token & ngram_roi");
    }
}

//! Synthetic ranked lists drawn from a two-component score mixture: one
//! Gaussian for relevant documents and one for non-relevant documents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, RankedList};
use crate::error::{Error, Result};
use crate::metrics::LabelVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub queries: usize,
    pub list_len: usize,
    pub relevant_location: f64,
    pub relevant_spread: f64,
    pub nonrelevant_location: f64,
    pub nonrelevant_spread: f64,
    /// Relevant count per query is uniform in `min_relevant..=max_relevant`.
    pub min_relevant: usize,
    pub max_relevant: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            queries: 250,
            list_len: 300,
            relevant_location: 2.0,
            relevant_spread: 1.0,
            nonrelevant_location: 0.0,
            nonrelevant_spread: 1.0,
            min_relevant: 5,
            max_relevant: 50,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Both spreads set to `spread`.
    pub fn with_spread(mut self, spread: f64) -> Self {
        self.relevant_spread = spread;
        self.nonrelevant_spread = spread;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.list_len == 0 {
            return Err(Error::Config(
                "queries and list_len must be positive".into(),
            ));
        }
        if self.relevant_location <= self.nonrelevant_location {
            return Err(Error::Config(format!(
                "relevant location {} must exceed non-relevant location {}",
                self.relevant_location, self.nonrelevant_location
            )));
        }
        let spreads = [self.relevant_spread, self.nonrelevant_spread];
        if spreads.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config(
                "spreads must be finite and non-negative".into(),
            ));
        }
        if self.min_relevant > self.max_relevant || self.max_relevant > self.list_len {
            return Err(Error::Config(format!(
                "relevant count range {}..={} must be ordered and within list length {}",
                self.min_relevant, self.max_relevant, self.list_len
            )));
        }
        Ok(())
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let relevant = Normal::new(cfg.relevant_location, cfg.relevant_spread)
        .map_err(|e| Error::Config(e.to_string()))?;
    let nonrelevant = Normal::new(cfg.nonrelevant_location, cfg.nonrelevant_spread)
        .map_err(|e| Error::Config(e.to_string()))?;
    let width = (cfg.queries - 1).to_string().len();

    let mut examples = Vec::with_capacity(cfg.queries);
    for q in 0..cfg.queries {
        let r = rng.random_range(cfg.min_relevant..=cfg.max_relevant);
        let mut docs: Vec<(f64, bool)> = (0..cfg.list_len)
            .map(|i| {
                if i < r {
                    (relevant.sample(&mut rng), true)
                } else {
                    (nonrelevant.sample(&mut rng), false)
                }
            })
            .collect();
        let qid = format!("q{q:0width$}");
        let doc_ids: Vec<String> = (0..cfg.list_len).map(|i| format!("{qid}-d{i}")).collect();
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|&a, &b| docs[b].0.total_cmp(&docs[a].0));
        let sorted: Vec<(f64, bool)> = order.iter().map(|&i| docs[i]).collect();
        let sorted_ids = order.iter().map(|&i| doc_ids[i].clone()).collect();
        docs = sorted;
        let labels = LabelVector::from_relevance(&docs.iter().map(|d| d.1).collect::<Vec<_>>());
        let list = RankedList::new(qid, sorted_ids, docs.iter().map(|d| d.0).collect(), labels)?;
        examples.push(Example::new(list, None)?);
    }
    Dataset::new(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::oracle_cutoff;

    #[test]
    fn perfect_separation() {
        let cfg = SynthConfig {
            queries: 20,
            ..Default::default()
        }
        .with_spread(0.0);
        let ds = synth_generate(&cfg).unwrap();
        for e in &ds.examples {
            let r = e.list.labels.relevant_count();
            assert!((5..=50).contains(&r));
            assert!(e.list.labels.as_slice()[..r].iter().all(|&y| y == 1));
            assert_eq!(oracle_cutoff(&e.f1).unwrap(), (r, 1.0));
        }
    }

    #[test]
    fn deterministic_and_sorted() {
        let cfg = SynthConfig {
            queries: 10,
            list_len: 40,
            min_relevant: 2,
            max_relevant: 9,
            ..Default::default()
        };
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        assert_ne!(a, synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap());
        for e in &a.examples {
            assert!(e.list.scores.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(e.list.len(), 40);
        }
    }

    #[test]
    fn validation() {
        let base = SynthConfig::default();
        assert!(SynthConfig {
            relevant_location: 0.0,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            min_relevant: 60,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            max_relevant: 400,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(base.clone().with_spread(-1.0).validate().is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn relevant_mean_within_three_standard_errors() {
        let cfg = SynthConfig {
            queries: 400,
            list_len: 50,
            min_relevant: 25,
            max_relevant: 25,
            relevant_spread: 0.7,
            seed: 9,
            ..Default::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let rel: Vec<f64> = ds
            .examples
            .iter()
            .flat_map(|e| {
                e.list
                    .scores
                    .iter()
                    .zip(e.list.labels.as_slice())
                    .filter(|(_, &y)| y == 1)
                    .map(|(&s, _)| s)
            })
            .collect();
        assert_eq!(rel.len(), 10_000);
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let se = 0.7 / (rel.len() as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }
}

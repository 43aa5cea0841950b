//! Inverse-frequency resampling: each sample is drawn with probability
//! proportional to `1 / count(class)`, with replacement, so every class has
//! the same expected share of an epoch.

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::dataset::ClassCatalog;
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
}

impl SampleWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Total normalized probability mass per class.
    pub fn class_mass(&self, labels: &[usize], classes: usize) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        let mut mass = vec![0.0; classes];
        for (w, &l) in self.weights.iter().zip(labels) {
            mass[l] += w / total;
        }
        mass
    }
}

/// Weights for the samples with the given `labels`. Class counts are tallied
/// from `labels` itself; `catalog` only fixes the class set.
pub fn compute_sample_weights(catalog: &ClassCatalog, labels: &[usize]) -> Result<SampleWeights> {
    let mut counts = vec![0usize; catalog.len()];
    for &l in labels {
        *counts.get_mut(l).ok_or(Error::Label {
            label: l,
            classes: catalog.len(),
        })? += 1;
    }
    weights_from_counts(catalog, &counts, labels)
}

/// Weights using explicit class counts (e.g. the catalog's dataset-wide
/// tallies). Every label must belong to a class with a positive count.
pub fn weights_from_counts(catalog: &ClassCatalog, counts: &[usize], labels: &[usize]) -> Result<SampleWeights> {
    let weights = labels
        .iter()
        .map(|&l| match counts.get(l) {
            None => Err(Error::Label {
                label: l,
                classes: counts.len(),
            }),
            Some(0) => Err(Error::ZeroCount(
                catalog.names().get(l).cloned().unwrap_or_else(|| l.to_string()),
            )),
            Some(&n) => Ok(1.0 / n as f64),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleWeights { weights })
}

/// Draw `epoch_len` indices i.i.d. with replacement, proportional to weight.
pub fn draw_epoch_indices(weights: &SampleWeights, epoch_len: usize, seed: u64) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if epoch_len == 0 {
        return Err(Error::Config("epoch length must be >= 1".into()));
    }
    let dist = WeightedIndex::new(&weights.weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_from(seed);
    Ok((0..epoch_len).map(|_| dist.sample(&mut rng)).collect())
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// One ingested sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub pixels: Image,
    pub label: usize,
    pub source_id: String,
}

impl LabeledImage {
    /// Checked constructor for ingested data: pixels must lie in [0,1].
    pub fn new(pixels: Image, label: usize, source_id: impl Into<String>) -> Result<Self> {
        if !pixels.in_unit_range() {
            return Err(Error::Config("pixel values must lie in [0,1]".into()));
        }
        Ok(Self {
            pixels,
            label,
            source_id: source_id.into(),
        })
    }
}

/// Ordered class names with per-class tallies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
    counts: Vec<usize>,
    /// new class name -> original class names fused into it
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merged_from: Option<BTreeMap<String, Vec<String>>>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, counts: Vec<usize>) -> Result<Self> {
        if names.len() != counts.len() {
            return Err(Error::Config(format!(
                "{} class names but {} counts",
                names.len(),
                counts.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self {
            names,
            counts,
            merged_from: None,
        })
    }

    /// Tally `labels` against an ordered name list.
    pub fn from_labels(names: Vec<String>, labels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = vec![0; names.len()];
        for l in labels {
            *counts.get_mut(l).ok_or(Error::Label {
                label: l,
                classes: names.len(),
            })? += 1;
        }
        Self::new(names, counts)
    }

    pub fn with_merge_record(mut self, merged_from: BTreeMap<String, Vec<String>>) -> Self {
        self.merged_from = if merged_from.is_empty() {
            None
        } else {
            Some(merged_from)
        };
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn merged_from(&self) -> Option<&BTreeMap<String, Vec<String>>> {
        self.merged_from.as_ref()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn max_count(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn min_count(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    /// max/min class count; infinite when some class is empty.
    pub fn imbalance_ratio(&self) -> f64 {
        let min = self.min_count();
        if min == 0 {
            f64::INFINITY
        } else {
            self.max_count() as f64 / min as f64
        }
    }

    /// Check that `labels` is consistent with this catalog's tallies.
    pub fn validate_labels(&self, labels: &[usize]) -> Result<()> {
        let mut seen = vec![0usize; self.len()];
        for &l in labels {
            *seen.get_mut(l).ok_or(Error::Label {
                label: l,
                classes: self.len(),
            })? += 1;
        }
        if seen != self.counts {
            return Err(Error::Config(format!(
                "catalog counts {:?} disagree with label tally {:?}",
                self.counts, seen
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn duplicate_names_rejected() {
        assert!(ClassCatalog::new(names(&["a", "a"]), vec![1, 1]).is_err());
    }

    #[test]
    fn ratio_from_field_dataset_extremes() {
        let c = ClassCatalog::new(names(&["healthy", "basal_rot"]), vec![1072, 140]).unwrap();
        assert!((c.imbalance_ratio() - 7.657_142_857).abs() < 1e-6);
        assert_eq!(c.total(), 1212);
    }

    #[test]
    fn tally_rejects_out_of_range_label() {
        assert!(ClassCatalog::from_labels(names(&["a"]), [0, 1]).is_err());
    }
}

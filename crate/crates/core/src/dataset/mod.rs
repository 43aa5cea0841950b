//! Ingestion, class bookkeeping, stratified splitting and the synthetic
//! long-tailed generator.

mod catalog;
mod manifest;
mod split;
mod synthetic;

use std::collections::BTreeMap;

pub use catalog::{ClassCatalog, LabeledImage};
pub use manifest::{load_manifest, scan_class_dirs, write_manifest, ManifestRow};
pub use split::{make_folds, stratified_split, Fold, FoldPlan, SplitFractions, SplitPlan};
pub use synthetic::{generate_synthetic, onion_class_names, SyntheticSpec, TextureParams};

use crate::error::{Error, Result};

/// Images together with the catalog that governs their labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub catalog: ClassCatalog,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>, catalog: ClassCatalog) -> Result<Self> {
        let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
        catalog.validate_labels(&labels)?;
        Ok(Self { images, catalog })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    pub fn class_count(&self) -> usize {
        self.catalog.len()
    }

    pub fn merge_classes(self, fuse: (&str, &str), new_name: &str) -> Result<Self> {
        let (catalog, images) = merge_classes(&self.catalog, self.images, fuse, new_name)?;
        Ok(Self { images, catalog })
    }

    pub fn coarsen_to_binary(self, healthy_name: &str) -> Result<Self> {
        let (catalog, images) = coarsen_to_binary(&self.catalog, self.images, healthy_name)?;
        Ok(Self { images, catalog })
    }
}

/// Old class index -> new class index, plus the catalog it produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub mapping: Vec<usize>,
    pub catalog: ClassCatalog,
}

impl LabelMap {
    pub fn apply(&self, label: usize) -> usize {
        self.mapping[label]
    }

    pub fn relabel(&self, mut images: Vec<LabeledImage>) -> Result<Vec<LabeledImage>> {
        for img in &mut images {
            img.label = *self.mapping.get(img.label).ok_or(Error::Label {
                label: img.label,
                classes: self.mapping.len(),
            })?;
        }
        Ok(images)
    }
}

/// Fuse two classes into one. The fused class takes the position of whichever
/// of the pair appears first; the remaining classes keep their relative order.
pub fn merge_map(catalog: &ClassCatalog, fuse: (&str, &str), new_name: &str) -> Result<LabelMap> {
    let a = catalog.index_of(fuse.0)?;
    let b = catalog.index_of(fuse.1)?;
    if a == b {
        return Err(Error::Config(format!("cannot fuse `{}` with itself", fuse.0)));
    }
    let (keep, drop) = (a.min(b), a.max(b));
    if catalog
        .names()
        .iter()
        .enumerate()
        .any(|(i, n)| n == new_name && i != a && i != b)
    {
        return Err(Error::Config(format!("class `{new_name}` already exists")));
    }

    let mut names = Vec::with_capacity(catalog.len() - 1);
    let mut counts = Vec::with_capacity(catalog.len() - 1);
    let mut mapping = vec![0; catalog.len()];
    for (old, (name, &count)) in catalog.names().iter().zip(catalog.counts()).enumerate() {
        if old == drop {
            continue;
        }
        mapping[old] = names.len();
        if old == keep {
            names.push(new_name.to_string());
            counts.push(count + catalog.counts()[drop]);
        } else {
            names.push(name.clone());
            counts.push(count);
        }
    }
    mapping[drop] = mapping[keep];

    let mut record: BTreeMap<String, Vec<String>> = catalog
        .merged_from()
        .cloned()
        .unwrap_or_default()
        .into_iter()
        .filter(|(k, _)| k != fuse.0 && k != fuse.1)
        .collect();
    let mut originals = Vec::new();
    for n in [fuse.0, fuse.1] {
        match catalog.merged_from().and_then(|m| m.get(n)) {
            Some(prev) => originals.extend(prev.iter().cloned()),
            None => originals.push(n.to_string()),
        }
    }
    record.insert(new_name.to_string(), originals);

    Ok(LabelMap {
        mapping,
        catalog: ClassCatalog::new(names, counts)?.with_merge_record(record),
    })
}

pub fn merge_classes(
    catalog: &ClassCatalog,
    images: Vec<LabeledImage>,
    fuse: (&str, &str),
    new_name: &str,
) -> Result<(ClassCatalog, Vec<LabeledImage>)> {
    let map = merge_map(catalog, fuse, new_name)?;
    let images = map.relabel(images)?;
    Ok((map.catalog, images))
}

pub const UNHEALTHY: &str = "unhealthy";

/// Healthy keeps index 0, every other class collapses into index 1.
pub fn binary_map(catalog: &ClassCatalog, healthy_name: &str) -> Result<LabelMap> {
    let h = catalog.index_of(healthy_name)?;
    let healthy_count = catalog.counts()[h];
    let other_name = if catalog.len() == 2 && h == 0 {
        catalog.names()[1].clone()
    } else {
        UNHEALTHY.to_string()
    };
    let mapping = (0..catalog.len()).map(|i| usize::from(i != h)).collect();
    let mut record = BTreeMap::new();
    let others: Vec<String> = catalog
        .names()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != h)
        .map(|(_, n)| n.clone())
        .collect();
    if others.len() > 1 {
        record.insert(other_name.clone(), others);
    }
    Ok(LabelMap {
        mapping,
        catalog: ClassCatalog::new(
            vec![healthy_name.to_string(), other_name],
            vec![healthy_count, catalog.total() - healthy_count],
        )?
        .with_merge_record(record),
    })
}

pub fn coarsen_to_binary(
    catalog: &ClassCatalog,
    images: Vec<LabeledImage>,
    healthy_name: &str,
) -> Result<(ClassCatalog, Vec<LabeledImage>)> {
    let map = binary_map(catalog, healthy_name)?;
    let images = map.relabel(images)?;
    Ok((map.catalog, images))
}

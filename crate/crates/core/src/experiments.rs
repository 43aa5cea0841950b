//! Experiment configurations and the registry of named runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{PipelineConfig, PipelineKind};
use crate::dataset::{
    coarsen_to_binary, generate_synthetic, load_manifest, merge_classes, ClassCatalog, LabeledImage,
    SplitFractions, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::losses::{Alpha, LossConfig, LossKind};
use crate::model::{BackboneFamily, ModelConfig};
use crate::training::TrainConfig;

/// Seed of the registered synthetic dataset.
pub const DATA_SEED: u64 = 17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Paths relative to the config file are resolved by the caller.
    Manifest { root: PathBuf, manifest: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeOp {
    pub fuse: (String, String),
    pub into: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassOps {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merge: Vec<MergeOp>,
    /// Collapse every class except this one into a single class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<String>,
}

impl ClassOps {
    pub fn apply(&self, catalog: ClassCatalog, images: Vec<LabeledImage>) -> Result<(ClassCatalog, Vec<LabeledImage>)> {
        let (mut catalog, mut images) = (catalog, images);
        for m in &self.merge {
            (catalog, images) = merge_classes(&catalog, images, (&m.fuse.0, &m.fuse.1), &m.into)?;
        }
        if let Some(healthy) = &self.binary {
            (catalog, images) = coarsen_to_binary(&catalog, images, healthy)?;
        }
        Ok((catalog, images))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    /// One stratified train/val/test split.
    Holdout,
    /// k folds over the development share, each evaluated on the same test set.
    CrossValidation { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    /// Short column label, e.g. `D121s+CBAM+WCE+D`.
    pub label: String,
    pub group: String,
    pub data: DataSource,
    #[serde(default)]
    pub classes: ClassOps,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    /// Inverse-frequency resampling of the training set.
    #[serde(default)]
    pub sampler: bool,
    pub loss: LossConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitFractions,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.sampler && matches!(self.loss.kind, LossKind::Wce | LossKind::WceCutmix) {
            return Err(Error::Config("the resampler and class-weighted losses are exclusive".into()));
        }
        if self.loss.kind == LossKind::WceCutmix && !self.pipeline.kind.uses_cutmix() {
            return Err(Error::Config("loss `wce+cutmix` needs a CutMix pipeline".into()));
        }
        if let Protocol::CrossValidation { k } = self.protocol {
            if k < 2 {
                return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
            }
        }
        Ok(())
    }

    /// Replace the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// TOML or JSON, by extension.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            Self::from_toml(&text)?
        };
        if let (DataSource::Manifest { root, manifest }, Some(dir)) = (&mut cfg.data, path.parent()) {
            for p in [root, manifest] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load the images and apply the class operations.
    pub fn load_data(&self) -> Result<(Vec<LabeledImage>, ClassCatalog)> {
        let (images, catalog) = match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Manifest { root, manifest } => load_manifest(root, manifest)?,
        };
        let (catalog, images) = self.classes.apply(catalog, images)?;
        self.model.validate(catalog.len())?;
        Ok((images, catalog))
    }
}

fn base(id: &str, label: &str, group: &str, classes: usize) -> ExperimentConfig {
    let classes_ops = match classes {
        9 => ClassOps::default(),
        8 => ClassOps {
            merge: vec![merge_anthracnose_twister()],
            binary: None,
        },
        _ => ClassOps {
            merge: Vec::new(),
            binary: Some("healthy".into()),
        },
    };
    ExperimentConfig {
        id: id.into(),
        label: label.into(),
        group: group.into(),
        data: DataSource::Synthetic(SyntheticSpec::desk_default(DATA_SEED)),
        classes: classes_ops,
        model: ModelConfig::new(BackboneFamily::DenseSmall, false, classes),
        pipeline: PipelineConfig::of_kind(PipelineKind::A),
        sampler: false,
        loss: LossConfig::of_kind(LossKind::Wce),
        train: TrainConfig::default(),
        split: SplitFractions::NESTED_80_20,
        protocol: Protocol::Holdout,
        output_dir: None,
    }
}

pub fn merge_anthracnose_twister() -> MergeOp {
    MergeOp {
        fuse: ("anthracnose".into(), "twister".into()),
        into: "anthracnose_twister".into(),
    }
}

struct Variant {
    id: &'static str,
    label: &'static str,
    group: &'static str,
    classes: usize,
    family: BackboneFamily,
    cbam: bool,
    pipeline: PipelineKind,
    sampler: bool,
    loss: LossKind,
}

#[allow(clippy::too_many_arguments)]
const fn v(
    id: &'static str,
    label: &'static str,
    group: &'static str,
    classes: usize,
    family: BackboneFamily,
    cbam: bool,
    pipeline: PipelineKind,
    sampler: bool,
    loss: LossKind,
) -> Variant {
    Variant {
        id,
        label,
        group,
        classes,
        family,
        cbam,
        pipeline,
        sampler,
        loss,
    }
}

use BackboneFamily::{DenseSmall as D, ResidualSmall as R};
use LossKind::{Ce, Focal, Wce, WceCutmix};
use PipelineKind::{A, C, CD as Cd, D as Dm};

/// In report order: the nine-class comparison, the eight-class comparison,
/// then the binary run.
const VARIANTS: [Variant; 12] = [
    v("table1-r50s-sampler-ce", "R50s Sampler(B)+CE", "table1", 9, R, false, A, true, Ce),
    v("table1-d121s-sampler-ce", "D121s Sampler(B)+CE", "table1", 9, D, false, A, true, Ce),
    v("table1-r50s-aug-wce", "R50s Aug(A)+WCE", "table1", 9, R, false, A, false, Wce),
    v("table1-d121s-aug-wce", "D121s Aug(A)+WCE", "table1", 9, D, false, A, false, Wce),
    v("table2-d121s-wce-a", "D121s+WCE+A", "table2", 8, D, false, A, false, Wce),
    v("table2-d121s-cbam-wce-a", "D121s+CBAM+WCE+A", "table2", 8, D, true, A, false, Wce),
    v("table2-d121s-cbam-focal-a", "D121s+CBAM+Focal+A", "table2", 8, D, true, A, false, Focal),
    v("table2-d121s-wce-c", "D121s+WCE+C", "table2", 8, D, false, C, false, Wce),
    v("table2-d121s-wce-d", "D121s+WCE+D", "table2", 8, D, false, Dm, false, WceCutmix),
    v("table2-d121s-cbam-wce-cd", "D121s+CBAM+WCE+C+D", "table2", 8, D, true, Cd, false, WceCutmix),
    v("table2-d121s-cbam-wce-d", "D121s+CBAM+WCE+D", "table2", 8, D, true, Dm, false, WceCutmix),
    v("table4-d121s-cbam-wce-d-binary", "D121s+CBAM+WCE+D (2-class)", "table4", 2, D, true, Dm, false, WceCutmix),
];

fn build(v: &Variant) -> ExperimentConfig {
    let mut cfg = base(v.id, v.label, v.group, v.classes);
    cfg.model = ModelConfig::new(v.family, v.cbam, v.classes);
    cfg.pipeline = PipelineConfig::of_kind(v.pipeline);
    cfg.sampler = v.sampler;
    cfg.loss = LossConfig::of_kind(v.loss);
    if v.loss == Focal {
        cfg.loss.alpha = Alpha::InverseFrequency;
    }
    cfg
}

pub fn registry() -> Vec<ExperimentConfig> {
    VARIANTS.iter().map(build).collect()
}

pub fn lookup(id: &str) -> Result<ExperimentConfig> {
    VARIANTS
        .iter()
        .find(|v| v.id == id)
        .map(build)
        .ok_or_else(|| Error::Config(format!("unknown experiment `{id}`")))
}

/// Registered experiments whose id or group matches `selector`.
pub fn select(selector: &str) -> Vec<ExperimentConfig> {
    VARIANTS
        .iter()
        .filter(|v| v.id == selector || v.group == selector || selector == "all")
        .map(build)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_unique_ids() {
        let reg = registry();
        assert_eq!(reg.len(), 12);
        let mut ids: Vec<&str> = reg.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 12);
        assert_eq!(select("table1").len(), 4);
        assert_eq!(select("table2").len(), 7);
        assert_eq!(select("table4").len(), 1);
        assert!(lookup("nope").is_err());
    }

    #[test]
    fn every_config_validates_and_round_trips() {
        for cfg in registry() {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{}", cfg.id);
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        }
    }

    #[test]
    fn sampler_with_weighted_loss_is_rejected() {
        let mut cfg = lookup("table1-d121s-aug-wce").unwrap();
        cfg.sampler = true;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn class_ops_shape_the_catalog() {
        let small = |mut cfg: ExperimentConfig| {
            if let DataSource::Synthetic(spec) = &mut cfg.data {
                spec.counts = vec![3; spec.counts.len()];
                spec.image_size = 8;
            }
            cfg.load_data().unwrap().1
        };
        assert_eq!(small(lookup("table1-r50s-aug-wce").unwrap()).len(), 9);
        let eight = small(lookup("table2-d121s-wce-a").unwrap());
        assert_eq!(eight.len(), 8);
        assert!(eight.names().contains(&"anthracnose_twister".to_string()));
        let two = small(lookup("table4-d121s-cbam-wce-d-binary").unwrap());
        assert_eq!(two.counts(), &[3, 24]);
    }

    #[test]
    fn manifest_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = lookup("table2-d121s-wce-a").unwrap();
        cfg.data = DataSource::Manifest {
            root: "images".into(),
            manifest: "manifest.csv".into(),
        };
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        let back = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(
            back.data,
            DataSource::Manifest {
                root: dir.path().join("images"),
                manifest: dir.path().join("manifest.csv"),
            }
        );
    }
}

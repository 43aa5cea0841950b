//! Training-time augmentation pipelines.
//!
//! * **A**: resize, horizontal flip (p=0.5), rotation in ±limit, normalize.
//! * **C**: exactly one transform from a weighted one-of set, then resize and
//!   normalize.
//! * **D**: pipeline A per image, then CutMix per batch.
//! * **C+D**: pipeline C per image, then CutMix per batch.
//!
//! Every call is a pure function of `(image, config, seed)`.

pub mod cutmix;
pub mod transforms;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use cutmix::{apply_cutmix, apply_cutmix_batch, sample_cutmix_box, sample_cutmix_box_seeded, MaskBox};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng::{rng_from, Rng};

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub probs: Vec<f32>,
}

impl SoftLabel {
    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        Self { probs }
    }

    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::Config("soft label entries must be finite and >= 0".into()));
        }
        let sum: f32 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("soft label sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sum(&self) -> f32 {
        self.probs.iter().sum()
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &SoftLabel, lambda: f32) -> Result<SoftLabel> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "cannot mix labels of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(SoftLabel {
            probs: self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    A,
    C,
    D,
    #[serde(rename = "cd")]
    CD,
}

impl PipelineKind {
    pub fn uses_cutmix(self) -> bool {
        matches!(self, PipelineKind::D | PipelineKind::CD)
    }

    pub fn uses_one_of(self) -> bool {
        matches!(self, PipelineKind::C | PipelineKind::CD)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OneOfTransform {
    HorizontalFlip,
    VerticalFlip,
    MotionBlur,
    MedianBlur,
    GaussianBlur,
    HueShift,
    GridShuffle,
    CoarseDropout,
}

impl OneOfTransform {
    pub const ALL: [OneOfTransform; 8] = [
        OneOfTransform::HorizontalFlip,
        OneOfTransform::VerticalFlip,
        OneOfTransform::MotionBlur,
        OneOfTransform::MedianBlur,
        OneOfTransform::GaussianBlur,
        OneOfTransform::HueShift,
        OneOfTransform::GridShuffle,
        OneOfTransform::CoarseDropout,
    ];
}

/// One member of the pipeline-C one-of set: it is selected with
/// probability `weight` and, once selected, applied with probability `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneOfEntry {
    pub transform: OneOfTransform,
    pub weight: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub target_size: usize,
    pub hflip_p: f64,
    pub rotation_limit: f32,
    pub one_of: Vec<OneOfEntry>,
    /// Odd kernel sizes drawn from this inclusive range.
    pub blur_kernel: (usize, usize),
    pub hue_shift_limit: f32,
    pub grid: usize,
    pub dropout_holes: (usize, usize),
    /// Hole side as a fraction of the image side.
    pub dropout_size: (f32, f32),
    pub dropout_fill: f32,
    /// Probability that a batch is CutMix'd (pipelines D and C+D).
    pub cutmix_p: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kind: PipelineKind::A,
            target_size: 64,
            hflip_p: 0.5,
            rotation_limit: 30.0,
            one_of: OneOfTransform::ALL
                .iter()
                .map(|&transform| OneOfEntry {
                    transform,
                    weight: 1.0 / OneOfTransform::ALL.len() as f64,
                    p: 1.0,
                })
                .collect(),
            blur_kernel: (3, 7),
            hue_shift_limit: 18.0,
            grid: 3,
            dropout_holes: (1, 8),
            dropout_size: (0.04, 0.08),
            dropout_fill: 0.0,
            cutmix_p: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PipelineConfig {
    pub fn of_kind(kind: PipelineKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target size must be positive".into()));
        }
        let probs = [self.hflip_p, self.cutmix_p];
        if probs.iter().chain(self.one_of.iter().map(|e| &e.p)).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0,1]".into()));
        }
        if self.kind.uses_one_of() {
            if self.one_of.is_empty() {
                return Err(Error::Config("one-of transform set is empty".into()));
            }
            let total: f64 = self.one_of.iter().map(|e| e.weight).sum();
            if self.one_of.iter().any(|e| e.weight < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("one-of weights must be >= 0 and sum to 1, got {total}")));
            }
        }
        let (lo, hi) = self.blur_kernel;
        if lo == 0 || lo > hi || lo % 2 == 0 || hi % 2 == 0 {
            return Err(Error::Config(format!("blur kernel bounds must be odd and ordered, got {lo}..{hi}")));
        }
        if self.dropout_holes.0 > self.dropout_holes.1 || self.dropout_size.0 > self.dropout_size.1 {
            return Err(Error::Config("coarse dropout bounds are inverted".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    fn finish(&self, img: &Image) -> Result<Image> {
        let resized = transforms::resize(img, self.target_size, self.target_size)?;
        transforms::normalize(&resized, self.mean, self.std)
    }

    fn odd_kernel(&self, rng: &mut Rng) -> usize {
        let (lo, hi) = self.blur_kernel;
        lo + 2 * rng.gen_range(0..=(hi - lo) / 2)
    }
}

/// Resize and normalize only; used at evaluation time.
pub fn eval_transform(image: &LabeledImage, config: &PipelineConfig) -> Result<LabeledImage> {
    if config.target_size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    Ok(LabeledImage {
        pixels: config.finish(&image.pixels)?,
        label: image.label,
        source_id: image.source_id.clone(),
    })
}

pub fn pipeline_a(image: &LabeledImage, config: &PipelineConfig, seed: u64) -> Result<LabeledImage> {
    if config.target_size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let mut rng = rng_from(seed);
    let mut img = transforms::resize(&image.pixels, config.target_size, config.target_size)?;
    if rng.gen_bool(config.hflip_p) {
        img = transforms::hflip(&img);
    }
    if config.rotation_limit > 0.0 {
        let angle = rng.gen_range(-config.rotation_limit..=config.rotation_limit);
        img = transforms::rotate(&img, angle);
    }
    Ok(LabeledImage {
        pixels: transforms::normalize(&img, config.mean, config.std)?,
        label: image.label,
        source_id: image.source_id.clone(),
    })
}

/// Apply one transform from the one-of set. Returns the selected transform
/// and whether its probability gate let it through.
pub fn apply_one_of(img: &Image, config: &PipelineConfig, rng: &mut Rng) -> Result<(Image, OneOfTransform, bool)> {
    if config.one_of.is_empty() {
        return Err(Error::Config("one-of transform set is empty".into()));
    }
    let entry = config
        .one_of
        .choose_weighted(rng, |e| e.weight)
        .map_err(|e| Error::Config(e.to_string()))?;
    if !rng.gen_bool(entry.p) {
        return Ok((img.clone(), entry.transform, false));
    }
    let out = match entry.transform {
        OneOfTransform::HorizontalFlip => transforms::hflip(img),
        OneOfTransform::VerticalFlip => transforms::vflip(img),
        OneOfTransform::MotionBlur => {
            let k = config.odd_kernel(rng);
            let angle = rng.gen_range(0.0..180.0);
            transforms::motion_blur(img, k, angle)
        }
        OneOfTransform::MedianBlur => transforms::median_blur(img, config.odd_kernel(rng)),
        OneOfTransform::GaussianBlur => transforms::gaussian_blur(img, config.odd_kernel(rng)),
        OneOfTransform::HueShift => {
            let d = rng.gen_range(-config.hue_shift_limit..=config.hue_shift_limit);
            transforms::hue_shift(img, d)
        }
        OneOfTransform::GridShuffle => {
            let mut perm: Vec<usize> = (0..config.grid * config.grid).collect();
            perm.shuffle(rng);
            transforms::grid_shuffle(img, config.grid, &perm)?
        }
        OneOfTransform::CoarseDropout => {
            let n = rng.gen_range(config.dropout_holes.0..=config.dropout_holes.1);
            let side = |frac: f32, len: usize| ((frac * len as f32).round() as usize).clamp(1, len);
            let holes: Vec<transforms::Hole> = (0..n)
                .map(|_| {
                    let f = rng.gen_range(config.dropout_size.0..=config.dropout_size.1);
                    let (h, w) = (side(f, img.height), side(f, img.width));
                    let y0 = rng.gen_range(0..=img.height - h);
                    let x0 = rng.gen_range(0..=img.width - w);
                    (y0, x0, h, w)
                })
                .collect();
            transforms::coarse_dropout(img, &holes, config.dropout_fill)
        }
    };
    Ok((out, entry.transform, true))
}

/// Pipeline C, also reporting which transform was drawn.
pub fn pipeline_c_traced(
    image: &LabeledImage,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(LabeledImage, OneOfTransform)> {
    if config.target_size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let mut rng = rng_from(seed);
    let (img, which, _) = apply_one_of(&image.pixels, config, &mut rng)?;
    Ok((
        LabeledImage {
            pixels: config.finish(&img)?,
            label: image.label,
            source_id: image.source_id.clone(),
        },
        which,
    ))
}

pub fn pipeline_c(image: &LabeledImage, config: &PipelineConfig, seed: u64) -> Result<LabeledImage> {
    pipeline_c_traced(image, config, seed).map(|(img, _)| img)
}

/// Per-image stage of whichever pipeline `config.kind` names.
pub fn per_image(image: &LabeledImage, config: &PipelineConfig, seed: u64) -> Result<LabeledImage> {
    if config.kind.uses_one_of() {
        pipeline_c(image, config, seed)
    } else {
        pipeline_a(image, config, seed)
    }
}

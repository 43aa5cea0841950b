//! Training criteria over logits of shape (N, C, 1, 1).
//!
//! Every loss is mean-reduced over the batch and returns its gradient with
//! respect to the logits alongside the value. Arithmetic is carried out in
//! f64 whatever the logit precision.

use serde::{Deserialize, Serialize};

use crate::dataset::ClassCatalog;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Real};

/// Probabilities are floored at this value inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_GAMMA: f64 = 2.0;

/// Focusing parameters tried when tuning the focal loss.
pub const GAMMA_GRID: [f64; 4] = [0.5, 1.0, 2.0, 5.0];

/// Inverse-frequency weights: `w_i = max_count / count_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::ZeroCount(format!("#{i}")));
        }
        let max = counts.iter().copied().max().unwrap_or(0) as f64;
        Ok(Self(counts.iter().map(|&c| max / c as f64).collect()))
    }

    /// Arbitrary positive weights, e.g. a rescaled copy of another set.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::Config("class weights must be positive and finite".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn compute_class_weights(catalog: &ClassCatalog) -> Result<ClassWeights> {
    ClassWeights::from_counts(catalog.counts()).map_err(|e| match e {
        Error::ZeroCount(idx) => {
            let i: usize = idx[1..].parse().expect("index tag");
            Error::ZeroCount(catalog.names()[i].clone())
        }
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "wce")]
    Wce,
    #[serde(rename = "focal")]
    Focal,
    /// Weighted cross-entropy, trained on CutMix batches.
    #[serde(rename = "wce+cutmix")]
    WceCutmix,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Wce => "wce",
            Self::Focal => "focal",
            Self::WceCutmix => "wce+cutmix",
        }
    }
}

/// Source of the per-class factor `alpha_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alpha {
    Uniform,
    /// Inverse-frequency weights of the training partition.
    InverseFrequency,
    Fixed(ClassWeights),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Only read for the focal loss; the weighted kinds always use
    /// inverse-frequency weights and plain CE uses none.
    #[serde(default = "default_alpha")]
    pub alpha: Alpha,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_alpha() -> Alpha {
    Alpha::Uniform
}

impl LossConfig {
    pub fn of_kind(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: DEFAULT_GAMMA,
            alpha: Alpha::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Fix the weights against the class counts of the training partition.
    pub fn resolve(&self, train_counts: &[usize]) -> Result<Criterion> {
        self.validate()?;
        let classes = train_counts.len();
        let (weights, gamma) = match self.kind {
            LossKind::Ce => (ClassWeights::uniform(classes), 0.0),
            LossKind::Wce | LossKind::WceCutmix => (ClassWeights::from_counts(train_counts)?, 0.0),
            LossKind::Focal => {
                let w = match &self.alpha {
                    Alpha::Uniform => ClassWeights::uniform(classes),
                    Alpha::InverseFrequency => ClassWeights::from_counts(train_counts)?,
                    Alpha::Fixed(w) if w.len() == classes => w.clone(),
                    Alpha::Fixed(w) => {
                        return Err(Error::Config(format!("{} alpha weights for {classes} classes", w.len())))
                    }
                };
                (w, self.gamma)
            }
        };
        Ok(Criterion { weights, gamma })
    }
}

/// A loss with its weights fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub weights: ClassWeights,
    pub gamma: f64,
}

impl Criterion {
    pub fn evaluate<T: Real>(&self, logits: &FeatureMap<T>, labels: &[usize]) -> Result<LossValue<T>> {
        focal_loss(logits, labels, &self.weights, self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T: Real = f32> {
    pub loss: f64,
    /// d loss / d logits, same shape as the logits.
    pub grad: FeatureMap<T>,
}

fn check_inputs<T: Real>(logits: &FeatureMap<T>, labels: &[usize], weights: Option<&ClassWeights>) -> Result<()> {
    let classes = logits.channels;
    if logits.height != 1 || logits.width != 1 {
        return Err(Error::Shape(format!("logits must be (N, C, 1, 1), got {:?}", logits.shape())));
    }
    if labels.len() != logits.batch {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), logits.batch)));
    }
    if logits.batch == 0 {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(w) = weights {
        if w.len() != classes {
            return Err(Error::Config(format!("{} class weights for {classes} classes", w.len())));
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    if !logits.is_finite() {
        return Err(Error::Numeric { layer: "logits".into() });
    }
    Ok(())
}

/// Log-softmax of one row with the max subtracted.
fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - max - lse).collect()
}

/// Per-row `(log p_t floored, softmax)`.
fn row_terms<T: Real>(row: &[T], label: usize) -> (f64, bool, Vec<f64>) {
    let logp = log_softmax(row);
    let probs = logp.iter().map(|v| v.exp()).collect();
    let floored = logp[label] < PROB_FLOOR.ln();
    (logp[label].max(PROB_FLOOR.ln()), floored, probs)
}

/// `-(1/N) sum_i log p_i[y_i]`.
pub fn cross_entropy<T: Real>(logits: &FeatureMap<T>, labels: &[usize]) -> Result<LossValue<T>> {
    check_inputs(logits, labels, None)?;
    let n = logits.batch as f64;
    let mut grad = FeatureMap::zeros(logits.batch, logits.channels, 1, 1);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (logp, floored, probs) = row_terms(logits.item(i), y);
        total -= logp;
        if !floored {
            for (j, (g, p)) in grad.item_mut(i).iter_mut().zip(probs).enumerate() {
                *g = T::lit((p - f64::from(u8::from(j == y))) / n);
            }
        }
    }
    Ok(LossValue { loss: total / n, grad })
}

/// `-(1/N) sum_i w[y_i] log p_i[y_i]`.
pub fn weighted_ce<T: Real>(logits: &FeatureMap<T>, labels: &[usize], weights: &ClassWeights) -> Result<LossValue<T>> {
    check_inputs(logits, labels, Some(weights))?;
    let n = logits.batch as f64;
    let mut grad = FeatureMap::zeros(logits.batch, logits.channels, 1, 1);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let w = weights.0[y];
        let (logp, floored, probs) = row_terms(logits.item(i), y);
        total -= w * logp;
        if !floored {
            for (j, (g, p)) in grad.item_mut(i).iter_mut().zip(probs).enumerate() {
                *g = T::lit(w * (p - f64::from(u8::from(j == y))) / n);
            }
        }
    }
    Ok(LossValue { loss: total / n, grad })
}

/// `(1/N) sum_i -alpha[y_i] (1 - p_t)^gamma log p_t`.
pub fn focal_loss<T: Real>(
    logits: &FeatureMap<T>,
    labels: &[usize],
    alpha: &ClassWeights,
    gamma: f64,
) -> Result<LossValue<T>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    check_inputs(logits, labels, Some(alpha))?;
    let n = logits.batch as f64;
    let mut grad = FeatureMap::zeros(logits.batch, logits.channels, 1, 1);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let a = alpha.0[y];
        let (logp, floored, probs) = row_terms(logits.item(i), y);
        // 1 - p_t without cancellation
        let q = -logp.exp_m1();
        let focus = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        total -= a * focus * logp;
        // d/dz_j = -a [(1-p)^g - g (1-p)^(g-1) p log p] (delta_jt - p_j)
        let log_term = if floored { 0.0 } else { focus };
        let focus_term = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * logp.exp() * logp
        };
        let coef = -a * (log_term - focus_term) / n;
        for (j, (g, p)) in grad.item_mut(i).iter_mut().zip(probs).enumerate() {
            *g = T::lit(coef * (f64::from(u8::from(j == y)) - p));
        }
    }
    Ok(LossValue { loss: total / n, grad })
}

/// `lambda L(logits, a) + (1 - lambda) L(logits, b)` for a resolved base
/// criterion; CutMix targets pass through the base loss this way.
pub fn mixed_loss<T: Real>(
    base: &Criterion,
    logits: &FeatureMap<T>,
    label_a: &[usize],
    label_b: &[usize],
    lambda_eff: f64,
) -> Result<LossValue<T>> {
    if !(0.0..=1.0).contains(&lambda_eff) {
        return Err(Error::Config(format!("mixing weight {lambda_eff} outside [0, 1]")));
    }
    let a = base.evaluate(logits, label_a)?;
    let b = base.evaluate(logits, label_b)?;
    let mut grad = a.grad;
    for (g, gb) in grad.data.iter_mut().zip(&b.grad.data) {
        *g = T::lit(lambda_eff * g.as_f64() + (1.0 - lambda_eff) * gb.as_f64());
    }
    Ok(LossValue {
        loss: lambda_eff * a.loss + (1.0 - lambda_eff) * b.loss,
        grad,
    })
}

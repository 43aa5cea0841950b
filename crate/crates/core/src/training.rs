//! Epoch loop, evaluation, early-stopped fitting and cross-validation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_cutmix_batch, eval_transform, per_image, sample_cutmix_box, PipelineConfig};
use crate::dataset::{make_folds, stratified_split, ClassCatalog, LabeledImage, SplitPlan};
use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, Protocol};
use crate::losses::{mixed_loss, Criterion};
use crate::metrics::{render_confusion_png, report, write_metrics_csv, ConfusionMatrix, MetricsReport};
use crate::model::{build_model, count_params, Model, Parameterized};
use crate::rng::{derive_seed, derive_seed_tagged, rng_from};
use crate::sampling::{compute_sample_weights, draw_epoch_indices};
use crate::tensor::FeatureMap;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd-momentum")]
    SgdMomentum,
    #[serde(rename = "adam")]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// SGD only.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without a new best validation macro F1 before stopping.
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: default_momentum(),
            weight_decay: 1e-4,
            patience: 10,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0,1) and weight decay be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state, in `visit` order. L2 weight decay is added
/// to the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            kind: config.optimizer,
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Plain gradient descent: no momentum, no decay.
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(&TrainConfig {
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        })
    }

    pub fn step(&mut self, model: &mut impl Parameterized) {
        if self.first.is_empty() {
            model.visit(&mut |p| {
                self.first.push(vec![0.0; p.len()]);
                self.second.push(vec![0.0; p.len()]);
            });
        }
        self.steps += 1;
        let (lr, wd, mu) = (self.learning_rate as f32, self.weight_decay as f32, self.momentum as f32);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let kind = self.kind;
        let mut k = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |p| {
            let (m, v) = (&mut first[k], &mut second[k]);
            k += 1;
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                match kind {
                    OptimizerKind::SgdMomentum => {
                        m[i] = mu * m[i] + g;
                        p.value[i] -= lr * m[i];
                    }
                    OptimizerKind::Adam => {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        });
    }
}

/// Everything an epoch needs besides the model and optimizer.
pub struct EpochData<'a> {
    pub images: &'a [LabeledImage],
    pub train: &'a [usize],
    pub classes: usize,
    pub pipeline: &'a PipelineConfig,
    pub sampler: bool,
    pub criterion: &'a Criterion,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub cutmix_batches: usize,
}

fn stack(images: &[LabeledImage]) -> Result<FeatureMap> {
    let first = images.first().ok_or(Error::EmptyEvaluation)?;
    let (h, w) = (first.pixels.height, first.pixels.width);
    let mut data = Vec::with_capacity(images.len() * first.pixels.data.len());
    for img in images {
        if (img.pixels.height, img.pixels.width) != (h, w) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(&img.pixels.data);
    }
    FeatureMap::from_vec(images.len(), 3, h, w, data)
}

fn divergence(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { .. } => Error::Divergence { epoch, batch },
        other => other,
    }
}

/// One pass over the training indices, resampled when `data.sampler` is
/// set. CutMix batches are scored with the mixed loss at the batch's exact
/// area ratio.
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut Optimizer,
    data: &EpochData<'_>,
    epoch: usize,
    seed: u64,
) -> Result<EpochStats> {
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<usize> = data.train.iter().map(|&i| data.images[i].label).collect();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Config("training set holds a single class".into()));
    }
    let order: Vec<usize> = if data.sampler {
        let catalog = ClassCatalog::from_labels((0..data.classes).map(|c| c.to_string()).collect(), labels.clone())?;
        let weights = compute_sample_weights(&catalog, &labels)?;
        draw_epoch_indices(&weights, data.train.len(), derive_seed_tagged(seed, "sampler"))?
            .into_iter()
            .map(|j| data.train[j])
            .collect()
    } else {
        let mut order = data.train.to_vec();
        order.shuffle(&mut rng_from(derive_seed_tagged(seed, "order")));
        order
    };

    let mut mix_rng = rng_from(derive_seed_tagged(seed, "cutmix"));
    let (mut total, mut seen, mut mixed) = (0.0, 0usize, 0usize);
    let batches: Vec<&[usize]> = order.chunks(data.batch_size).collect();
    for (b, chunk) in batches.iter().enumerate() {
        let images = chunk
            .par_iter()
            .enumerate()
            .map(|(j, &i)| per_image(&data.images[i], data.pipeline, derive_seed(seed, (b * data.batch_size + j) as u64)))
            .collect::<Result<Vec<_>>>()?;
        let label_a: Vec<usize> = images.iter().map(|im| im.label).collect();
        let mut x = stack(&images)?;
        let mut cut = None;
        if data.pipeline.kind.uses_cutmix() && chunk.len() > 1 && mix_rng.gen_bool(data.pipeline.cutmix_p) {
            let mask = sample_cutmix_box(x.width, x.height, &mut mix_rng);
            let mut partners: Vec<usize> = (0..chunk.len()).collect();
            partners.shuffle(&mut mix_rng);
            x = apply_cutmix_batch(&x, &partners, &mask)?;
            cut = Some((partners.iter().map(|&p| label_a[p]).collect::<Vec<_>>(), mask.lambda_effective));
        }
        let (logits, trace) = model
            .forward_traced(&x, Some(derive_seed_tagged(derive_seed(seed, b as u64), "dropout")))
            .map_err(divergence(epoch, b))?;
        let value = match &cut {
            Some((label_b, lambda)) => {
                mixed += 1;
                mixed_loss(data.criterion, &logits, &label_a, label_b, *lambda)
            }
            None => data.criterion.evaluate(&logits, &label_a),
        }
        .map_err(divergence(epoch, b))?;
        if !value.loss.is_finite() || !value.grad.is_finite() {
            return Err(Error::Divergence { epoch, batch: b });
        }
        model.zero_grad();
        model.backward(&trace, &value.grad, false);
        optimizer.step(model);
        total += value.loss * chunk.len() as f64;
        seen += chunk.len();
    }
    let mut finite = true;
    model.visit(&mut |p| finite &= p.value.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Divergence {
            epoch,
            batch: batches.len() - 1,
        });
    }
    Ok(EpochStats {
        mean_loss: total / seen as f64,
        batches: batches.len(),
        cutmix_batches: mixed,
    })
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Predictions for `indices` after the evaluation transform only.
pub fn predict(model: &Model, images: &[LabeledImage], indices: &[usize], pipeline: &PipelineConfig) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = chunk
            .par_iter()
            .map(|&i| eval_transform(&images[i], pipeline))
            .collect::<Result<Vec<_>>>()?;
        let logits = model.forward(&stack(&batch)?)?;
        out.extend((0..logits.batch).map(|n| argmax(logits.item(n))));
    }
    Ok(out)
}

pub fn evaluate_confusion(
    model: &Model,
    images: &[LabeledImage],
    indices: &[usize],
    pipeline: &PipelineConfig,
) -> Result<ConfusionMatrix> {
    if indices.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let classes = model.class_count;
    if let Some(bad) = indices.iter().find(|&&i| images[i].label >= classes) {
        return Err(Error::Config(format!(
            "label {} outside the model's {classes} classes",
            images[*bad].label
        )));
    }
    let predicted = predict(model, images, indices, pipeline)?;
    let truth: Vec<usize> = indices.iter().map(|&i| images[i].label).collect();
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(&truth, &predicted)?;
    Ok(cm)
}

pub fn evaluate(model: &Model, images: &[LabeledImage], indices: &[usize], pipeline: &PipelineConfig) -> Result<MetricsReport> {
    report(&evaluate_confusion(model, images, indices, pipeline)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub val_accuracy: f64,
    pub cutmix_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: ExperimentConfig,
    pub class_names: Vec<String>,
    /// Training-partition counts per class.
    pub train_counts: Vec<usize>,
    pub fold: Option<usize>,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub test: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub parameter_count: usize,
    pub initial_checksum: String,
    pub final_checksum: String,
    pub split_sizes: [usize; 3],
    pub wall_clock_seconds: f64,
}

/// Test indices must not occur among the training or validation ones.
pub fn check_no_leakage(train: &[usize], val: &[usize], test: &[usize]) -> Result<()> {
    let mut dev: Vec<usize> = train.iter().chain(val).copied().collect();
    dev.sort_unstable();
    if let Some(i) = test.iter().find(|i| dev.binary_search(i).is_ok()) {
        return Err(Error::Config(format!("test index {i} also used for training or validation")));
    }
    let mut v = val.to_vec();
    v.sort_unstable();
    if let Some(i) = train.iter().find(|i| v.binary_search(i).is_ok()) {
        return Err(Error::Config(format!("index {i} in both train and validation")));
    }
    Ok(())
}

pub struct Partition<'a> {
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub test: &'a [usize],
}

/// Train with early stopping on validation macro F1, restore the best
/// epoch's parameters and score them on the test indices.
///
/// With `progress`, `config.json` is written up front and `curves.csv` after
/// every epoch; a failed run leaves those plus `failure.txt` behind.
pub fn fit_partition(
    images: &[LabeledImage],
    catalog: &ClassCatalog,
    part: &Partition<'_>,
    config: &ExperimentConfig,
    seed: u64,
    fold: Option<usize>,
    progress: Option<&Path>,
) -> Result<(RunRecord, Model)> {
    if let Some(dir) = progress {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    }
    let mut epochs = Vec::new();
    let result = fit_inner(images, catalog, part, config, seed, fold, &mut epochs, progress);
    if let (Err(e), Some(dir)) = (&result, progress) {
        write_curves_csv(&dir.join("curves.csv"), &epochs)?;
        std::fs::write(dir.join("failure.txt"), format!("{e}\n"))?;
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn fit_inner(
    images: &[LabeledImage],
    catalog: &ClassCatalog,
    part: &Partition<'_>,
    config: &ExperimentConfig,
    seed: u64,
    fold: Option<usize>,
    epochs: &mut Vec<EpochRecord>,
    progress: Option<&Path>,
) -> Result<(RunRecord, Model)> {
    config.validate()?;
    check_no_leakage(part.train, part.val, part.test)?;
    let started = Instant::now();
    let classes = catalog.len();
    let mut train_counts = vec![0; classes];
    for &i in part.train {
        train_counts[images[i].label] += 1;
    }
    let criterion = config.loss.resolve(&train_counts)?;
    let mut model = build_model(&config.model, classes, derive_seed_tagged(seed, "init"))?;
    let initial_checksum = model.param_checksum();
    let mut optimizer = Optimizer::new(&config.train);
    let data = EpochData {
        images,
        train: part.train,
        classes,
        pipeline: &config.pipeline,
        sampler: config.sampler,
        criterion: &criterion,
        batch_size: config.train.batch_size,
    };

    let mut best: Option<(usize, f64, Vec<Vec<f32>>)> = None;
    let mut since_best = 0;
    for epoch in 0..config.train.epochs {
        let stats = train_epoch(&mut model, &mut optimizer, &data, epoch, derive_seed(seed, epoch as u64))?;
        let val = evaluate(&model, images, part.val, &config.pipeline)?;
        log::info!(
            "{} epoch {}: loss {:.4} val macro-F1 {:.4}",
            config.id,
            epoch + 1,
            stats.mean_loss,
            val.macro_f1
        );
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: stats.mean_loss,
            val_macro_f1: val.macro_f1,
            val_accuracy: val.overall_accuracy,
            cutmix_batches: stats.cutmix_batches,
        });
        if let Some(dir) = progress {
            write_curves_csv(&dir.join("curves.csv"), epochs)?;
        }
        if best.as_ref().is_none_or(|b| val.macro_f1 > b.1) {
            best = Some((epoch + 1, val.macro_f1, model.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.train.patience {
            break;
        }
    }
    let (best_epoch, best_val, params) = best.expect("at least one epoch");
    model.restore(&params);
    let confusion = evaluate_confusion(&model, images, part.test, &config.pipeline)?;
    let record = RunRecord {
        experiment: config.clone(),
        class_names: catalog.names().to_vec(),
        train_counts,
        fold,
        seed,
        epochs: std::mem::take(epochs),
        best_epoch,
        best_val_macro_f1: best_val,
        test: report(&confusion)?,
        confusion,
        parameter_count: count_params(&model),
        initial_checksum,
        final_checksum: model.param_checksum(),
        split_sizes: [part.train.len(), part.val.len(), part.test.len()],
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}

/// The stratified split used by an experiment at a given seed.
pub fn split_for(config: &ExperimentConfig, labels: &[usize], classes: usize) -> Result<SplitPlan> {
    stratified_split(classes, labels, config.split, derive_seed_tagged(config.train.seed, "split"))
}

fn in_pool<R: Send>(deterministic: bool, f: impl FnOnce() -> R + Send) -> R {
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("thread pool")
            .install(f)
    } else {
        f()
    }
}

/// Holdout training on `plan`; writes artifacts when `out` is given.
pub fn fit(
    images: &[LabeledImage],
    catalog: &ClassCatalog,
    plan: &SplitPlan,
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<RunRecord> {
    let part = Partition {
        train: &plan.train_indices,
        val: &plan.val_indices,
        test: &plan.test_indices,
    };
    let (record, model) = in_pool(config.train.deterministic, || {
        fit_partition(images, catalog, &part, config, config.train.seed, None, out)
    })?;
    if let Some(dir) = out {
        write_run_artifacts(dir, &record, Some(&model))?;
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<RunRecord>,
    pub mean_macro_f1: f64,
    /// Sample standard deviation over folds.
    pub std_macro_f1: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `k` stratified folds over the development share of `plan`; every fold is
/// scored on the shared test indices. Completed folds are written before an
/// error from a later fold is returned.
pub fn run_cross_validation(
    images: &[LabeledImage],
    catalog: &ClassCatalog,
    plan: &SplitPlan,
    config: &ExperimentConfig,
    k: usize,
    out: Option<&Path>,
) -> Result<CvSummary> {
    let labels: Vec<usize> = images.iter().map(|im| im.label).collect();
    let folds = make_folds(&plan.development_indices(), &labels, k, derive_seed_tagged(config.train.seed, "folds"))?;
    let mut records = Vec::with_capacity(k);
    for (i, fold) in folds.folds.iter().enumerate() {
        let part = Partition {
            train: &fold.train_indices,
            val: &fold.val_indices,
            test: &plan.test_indices,
        };
        let seed = derive_seed_tagged(config.train.seed, &format!("fold{i}"));
        let dir = out.map(|d| d.join(format!("fold{i}")));
        let (record, model) = in_pool(config.train.deterministic, || {
            fit_partition(images, catalog, &part, config, seed, Some(i), dir.as_deref())
        })?;
        if let Some(dir) = out {
            write_run_artifacts(&dir.join(format!("fold{i}")), &record, Some(&model))?;
        }
        records.push(record);
    }
    let scores: Vec<f64> = records.iter().map(|r| r.test.macro_f1).collect();
    let (mean, std) = mean_std(&scores);
    let summary = CvSummary {
        folds: records,
        mean_macro_f1: mean,
        std_macro_f1: std,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cv_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

pub fn write_curves_csv(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// `run_record.json`, `config.json`, `metrics.csv`, `curves.csv`,
/// `confusion.png`, `report.md` and, with a model, `model.safetensors`.
pub fn write_run_artifacts(dir: &Path, record: &RunRecord, model: Option<&Model>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("run_record.json"), serde_json::to_string_pretty(record)?)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&record.experiment)?)?;
    write_metrics_csv(&dir.join("metrics.csv"), &record.test, &record.class_names)?;
    write_curves_csv(&dir.join("curves.csv"), &record.epochs)?;
    render_confusion_png(&record.confusion, &dir.join("confusion.png"), 24)?;
    let rows = crate::metrics::per_class_table(&record.test, &record.class_names);
    std::fs::write(
        dir.join("report.md"),
        format!(
            "# {}\n\n{}\n{}",
            record.experiment.label,
            crate::metrics::summary_markdown(&record.test),
            crate::metrics::per_class_markdown(&rows)
        ),
    )?;
    if let Some(m) = model {
        m.save(&dir.join("model.safetensors"))?;
    }
    Ok(())
}

/// Result of executing an experiment under its protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Holdout(Box<RunRecord>),
    CrossValidation(CvSummary),
}

impl Outcome {
    /// The headline record: the holdout run, or the best fold.
    pub fn primary(&self) -> &RunRecord {
        match self {
            Outcome::Holdout(r) => r,
            Outcome::CrossValidation(cv) => cv
                .folds
                .iter()
                .max_by(|a, b| a.test.macro_f1.total_cmp(&b.test.macro_f1))
                .expect("k >= 2 folds"),
        }
    }
}

/// Load data, split, and train per the experiment's protocol.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<Outcome> {
    config.validate()?;
    let (images, catalog) = config.load_data()?;
    let labels: Vec<usize> = images.iter().map(|im| im.label).collect();
    let plan = split_for(config, &labels, catalog.len())?;
    match config.protocol {
        Protocol::Holdout => fit(&images, &catalog, &plan, config, out).map(|r| Outcome::Holdout(Box::new(r))),
        Protocol::CrossValidation { k } => {
            run_cross_validation(&images, &catalog, &plan, config, k, out).map(Outcome::CrossValidation)
        }
    }
}

/// Classes holding fewer training images than the per-class mean.
pub fn minority_classes(counts: &[usize]) -> Vec<usize> {
    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    (0..counts.len()).filter(|&i| (counts[i] as f64) < mean).collect()
}

/// Output directory `<root>/<id>-<unix seconds>`, made unique if taken.
pub fn run_dir(root: &Path, id: &str) -> PathBuf {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut dir = root.join(format!("{id}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{id}-{stamp}-{n}"));
        n += 1;
    }
    dir
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::PipelineKind;
    use crate::experiments::lookup;
    use crate::losses::{LossConfig, LossKind};
    use crate::model::layers::{Init, Linear};
    use crate::model::{BackboneFamily, ModelConfig};
    use crate::raster::Image;

    /// Bright vs dark images with mild noise: linearly separable.
    fn toy(n_per_class: usize, size: usize, seed: u64) -> (Vec<LabeledImage>, ClassCatalog) {
        let mut rng = rng_from(seed);
        let mut images = Vec::new();
        for class in 0..2 {
            for k in 0..n_per_class {
                let base = if class == 0 { 0.2 } else { 0.8 };
                let data = (0..3 * size * size).map(|_| base + rng.gen_range(-0.05..0.05)).collect();
                images.push(LabeledImage::new(Image::new(size, size, data).unwrap(), class, format!("{class}-{k}")).unwrap());
            }
        }
        let catalog = ClassCatalog::from_labels(vec!["dark".into(), "bright".into()], images.iter().map(|i| i.label)).unwrap();
        (images, catalog)
    }

    fn quick_config(size: usize) -> ExperimentConfig {
        let mut cfg = lookup("table2-d121s-wce-a").unwrap();
        cfg.model = ModelConfig::new(BackboneFamily::DenseSmall, false, 2);
        cfg.pipeline = PipelineConfig {
            target_size: size,
            hflip_p: 0.0,
            rotation_limit: 0.0,
            ..PipelineConfig::of_kind(PipelineKind::A)
        };
        cfg.train.epochs = 3;
        cfg.train.batch_size = 8;
        cfg.train.seed = 5;
        cfg
    }

    fn plan_for(images: &[LabeledImage], cfg: &ExperimentConfig) -> SplitPlan {
        let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
        split_for(cfg, &labels, 2).unwrap()
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        let mut layer: Linear = Linear::new("l", 2, 1, Init::Linear, 3);
        layer.weight.value = vec![0.5, -1.0];
        layer.weight.grad = vec![2.0, 4.0];
        layer.bias.value = vec![0.25];
        layer.bias.grad = vec![-1.0];
        Optimizer::sgd(0.1).step(&mut layer);
        assert_eq!(layer.weight.value, vec![0.5 - 0.1 * 2.0, -1.0 - 0.1 * 4.0]);
        assert_eq!(layer.bias.value, vec![0.25 + 0.1]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (images, catalog) = toy(8, 16, 1);
        let mut cfg = quick_config(16);
        cfg.train.learning_rate = 0.0;
        cfg.train.weight_decay = 0.0;
        let criterion = cfg.loss.resolve(catalog.counts()).unwrap();
        let mut model = build_model(&cfg.model, 2, 0).unwrap();
        let before = model.param_checksum();
        let train: Vec<usize> = (0..images.len()).collect();
        let data = EpochData {
            images: &images,
            train: &train,
            classes: 2,
            pipeline: &cfg.pipeline,
            sampler: false,
            criterion: &criterion,
            batch_size: 4,
        };
        let stats = train_epoch(&mut model, &mut Optimizer::new(&cfg.train), &data, 0, 9).unwrap();
        assert_eq!(stats.batches, 4);
        assert_eq!(model.param_checksum(), before);
    }

    #[test]
    fn epoch_is_deterministic_with_cutmix_and_sampler() {
        let (images, catalog) = toy(6, 16, 2);
        let mut cfg = quick_config(16);
        cfg.pipeline.kind = PipelineKind::D;
        cfg.pipeline.cutmix_p = 1.0;
        cfg.loss = LossConfig::of_kind(LossKind::Ce);
        let criterion = cfg.loss.resolve(catalog.counts()).unwrap();
        let train: Vec<usize> = (0..images.len()).collect();
        let run = |sampler| {
            let mut model = build_model(&cfg.model, 2, 0).unwrap();
            let data = EpochData {
                images: &images,
                train: &train,
                classes: 2,
                pipeline: &cfg.pipeline,
                sampler,
                criterion: &criterion,
                batch_size: 4,
            };
            let stats = train_epoch(&mut model, &mut Optimizer::new(&cfg.train), &data, 0, 3).unwrap();
            (model.param_checksum(), stats)
        };
        let (a, sa) = run(false);
        assert_eq!(sa.cutmix_batches, 3);
        assert_eq!(run(false).0, a);
        assert_eq!(run(true).0, run(true).0);
    }

    #[test]
    fn single_class_training_set_rejected() {
        let (images, catalog) = toy(4, 8, 3);
        let cfg = quick_config(8);
        let criterion = cfg.loss.resolve(catalog.counts()).unwrap();
        let mut model = build_model(&cfg.model, 2, 0).unwrap();
        let data = EpochData {
            images: &images,
            train: &[0, 1, 2],
            classes: 2,
            pipeline: &cfg.pipeline,
            sampler: false,
            criterion: &criterion,
            batch_size: 4,
        };
        assert!(matches!(
            train_epoch(&mut model, &mut Optimizer::new(&cfg.train), &data, 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (images, catalog) = toy(8, 16, 4);
        let mut cfg = quick_config(16);
        cfg.train.learning_rate = 1e30;
        cfg.train.optimizer = OptimizerKind::SgdMomentum;
        let criterion = cfg.loss.resolve(catalog.counts()).unwrap();
        let mut model = build_model(&cfg.model, 2, 0).unwrap();
        let train: Vec<usize> = (0..images.len()).collect();
        let data = EpochData {
            images: &images,
            train: &train,
            classes: 2,
            pipeline: &cfg.pipeline,
            sampler: false,
            criterion: &criterion,
            batch_size: 4,
        };
        let mut opt = Optimizer::new(&cfg.train);
        let err = (0..5).find_map(|e| train_epoch(&mut model, &mut opt, &data, e, e as u64).err());
        assert!(matches!(err, Some(Error::Divergence { .. })), "{err:?}");
    }

    #[test]
    fn diverged_fit_leaves_partial_artifacts() {
        let (images, catalog) = toy(10, 16, 4);
        let mut cfg = quick_config(16);
        cfg.train.learning_rate = 1e30;
        cfg.train.optimizer = OptimizerKind::SgdMomentum;
        cfg.train.epochs = 5;
        let plan = plan_for(&images, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let err = fit(&images, &catalog, &plan, &cfg, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
        for f in ["config.json", "curves.csv", "failure.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(!dir.path().join("run_record.json").exists());
    }

    #[test]
    fn empty_evaluation_errors() {
        let (images, _) = toy(2, 8, 5);
        let model = build_model(&ModelConfig::new(BackboneFamily::DenseSmall, false, 2), 2, 0).unwrap();
        let cfg = quick_config(8);
        assert!(matches!(evaluate(&model, &images, &[], &cfg.pipeline), Err(Error::EmptyEvaluation)));
        let three = build_model(&ModelConfig::new(BackboneFamily::DenseSmall, false, 3), 3, 0).unwrap();
        assert!(evaluate(&three, &images, &[0, 1], &cfg.pipeline).is_ok());
        let one = build_model(&ModelConfig::new(BackboneFamily::DenseSmall, false, 1), 1, 0).unwrap();
        assert!(matches!(evaluate(&one, &images, &[0, 3], &cfg.pipeline), Err(Error::Config(_))));
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let (images, _) = toy(20, 16, 6);
        let cfg = quick_config(16);
        let all: Vec<usize> = (0..images.len()).collect();
        let accs: Vec<f64> = (0..8)
            .map(|seed| {
                let model = build_model(&cfg.model, 2, seed).unwrap();
                evaluate(&model, &images, &all, &cfg.pipeline).unwrap().overall_accuracy
            })
            .collect();
        let (mean, _) = mean_std(&accs);
        assert!((mean - 0.5).abs() <= 0.1, "{accs:?}");
    }

    #[test]
    fn patience_zero_trains_one_epoch() {
        let (images, catalog) = toy(10, 16, 7);
        let mut cfg = quick_config(16);
        cfg.train.patience = 0;
        let plan = plan_for(&images, &cfg);
        let r = fit(&images, &catalog, &plan, &cfg, None).unwrap();
        assert_eq!((r.epochs.len(), r.best_epoch), (1, 1));
    }

    #[test]
    fn best_epoch_is_restored_and_run_is_reproducible() {
        let (images, catalog) = toy(10, 16, 8);
        let mut cfg = quick_config(16);
        cfg.train.epochs = 4;
        cfg.train.deterministic = true;
        let plan = plan_for(&images, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let a = fit(&images, &catalog, &plan, &cfg, Some(dir.path())).unwrap();
        let b = fit(&images, &catalog, &plan, &cfg, None).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.final_checksum, b.final_checksum);
        let max = a.epochs.iter().map(|e| e.val_macro_f1).fold(f64::MIN, f64::max);
        assert_eq!(a.best_val_macro_f1, max);
        assert_eq!(a.epochs[a.best_epoch - 1].val_macro_f1, max);
        // the restored parameters reproduce the recorded validation score
        let model = Model::load(&dir.path().join("model.safetensors")).unwrap();
        assert_eq!(model.param_checksum(), a.final_checksum);
        let val = evaluate(&model, &images, &plan.val_indices, &cfg.pipeline).unwrap();
        assert_eq!(val.macro_f1, max);
        for f in ["run_record.json", "config.json", "metrics.csv", "curves.csv", "confusion.png", "report.md"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn leakage_is_detected() {
        assert!(check_no_leakage(&[0, 1], &[2], &[3]).is_ok());
        assert!(check_no_leakage(&[0, 1], &[2], &[1]).is_err());
        assert!(check_no_leakage(&[0, 2], &[2], &[3]).is_err());
    }

    #[test]
    fn two_fold_separable_reaches_perfect_f1() {
        let (images, catalog) = toy(12, 16, 9);
        let mut cfg = quick_config(16);
        cfg.train.epochs = 15;
        cfg.train.patience = 15;
        cfg.train.learning_rate = 3e-3;
        let plan = plan_for(&images, &cfg);
        let cv = run_cross_validation(&images, &catalog, &plan, &cfg, 2, None).unwrap();
        assert_eq!(cv.folds.len(), 2);
        assert_ne!(cv.folds[0].initial_checksum, cv.folds[1].initial_checksum);
        for f in &cv.folds {
            assert_eq!(f.test.macro_f1, 1.0, "fold {:?}: {:?}", f.fold, f.epochs);
        }
        assert_eq!(cv.std_macro_f1, 0.0);
    }

    #[test]
    fn mean_std_of_identical_scores() {
        assert_eq!(mean_std(&[0.75, 0.75, 0.75]), (0.75, 0.0));
        assert_eq!(minority_classes(&[10, 5, 2, 9]), vec![1, 2]);
    }
}

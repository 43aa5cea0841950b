//! Confusion matrix and the metrics derived from it.
//!
//! Everything is computed from the matrix alone. Ratios are formed as exact
//! reduced fractions (macro means included) and converted to `f64` once, as
//! `numerator / denominator`.
//!
//! Zero-division convention: precision is 0 for a class never predicted,
//! recall, per-class accuracy and F1 are 0 for a class absent from the truth
//! (F1 is 0 whenever `2TP + FP + FN = 0`). Absent classes still count in the
//! macro means.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelMap;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Row-major `classes x classes` counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{} counts for a {classes}x{classes} matrix", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Self::from_counts(c, rows.concat())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn accumulate(&mut self, truth: &[usize], predicted: &[usize]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels but {} predictions", truth.len(), predicted.len())));
        }
        let c = self.classes;
        if let Some(&label) = truth.iter().chain(predicted).find(|&&l| l >= c) {
            return Err(Error::Label { label, classes: c });
        }
        for (&t, &p) in truth.iter().zip(predicted) {
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum, for combining per-worker or per-chunk matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!("merging {} classes into {}", other.classes, self.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Re-tally under a label map, e.g. all disease classes into one.
    pub fn coarsen(&self, map: &LabelMap) -> Result<ConfusionMatrix> {
        if map.mapping.len() != self.classes {
            return Err(Error::Shape(format!("label map covers {} of {} classes", map.mapping.len(), self.classes)));
        }
        let mut out = ConfusionMatrix::new(map.catalog.len());
        for t in 0..self.classes {
            for p in 0..self.classes {
                out.counts[map.apply(t) * out.classes + map.apply(p)] += self.get(t, p);
            }
        }
        Ok(out)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// `N_i`: samples whose true class is `i`.
    pub fn support(&self, i: usize) -> u64 {
        (0..self.classes).map(|p| self.get(i, p)).sum()
    }

    pub fn predicted(&self, i: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, i)).sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.get(i, i)
    }

    pub fn false_positives(&self, i: usize) -> u64 {
        self.predicted(i) - self.get(i, i)
    }

    pub fn false_negatives(&self, i: usize) -> u64 {
        self.support(i) - self.get(i, i)
    }
}

pub fn accumulate(mut cm: ConfusionMatrix, truth: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    cm.accumulate(truth, predicted)?;
    Ok(cm)
}

/// Non-negative fraction kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Frac {
    num: u128,
    den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Frac {
    const ZERO: Frac = Frac { num: 0, den: 1 };

    /// `num / den`, or zero when `den` is zero.
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            return Self::ZERO;
        }
        Self::reduced(num.into(), den.into())
    }

    fn reduced(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    fn add(self, o: Frac) -> Self {
        let g = gcd(self.den, o.den);
        let l = self.den / g * o.den;
        Self::reduced(self.num * (l / self.den) + o.num * (l / o.den), l)
    }

    fn div_int(self, k: u128) -> Self {
        let g = gcd(self.num, k).max(1);
        Self::reduced(self.num / g, self.den * (k / g))
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn mean(values: &[Frac]) -> Frac {
    if values.is_empty() {
        return Frac::ZERO;
    }
    values.iter().fold(Frac::ZERO, |acc, &v| acc.add(v)).div_int(values.len() as u128)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `TP_i / N_i`.
    pub per_class_accuracy: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub overall_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Unweighted mean of the per-class F1 values.
    pub macro_f1: f64,
    pub samples: u64,
}

impl MetricsReport {
    pub fn classes(&self) -> usize {
        self.f1.len()
    }

    /// Mean F1 over a subset of classes, e.g. the minority ones.
    pub fn mean_f1_of(&self, classes: &[usize]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        classes.iter().map(|&i| self.f1[i]).sum::<f64>() / classes.len() as f64
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let c = cm.classes();
    let mut acc = Vec::with_capacity(c);
    let mut prec = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    for i in 0..c {
        let (tp, fp, fnn) = (cm.true_positives(i), cm.false_positives(i), cm.false_negatives(i));
        acc.push(Frac::ratio(tp, tp + fnn));
        prec.push(Frac::ratio(tp, tp + fp));
        f1.push(Frac::ratio(2 * tp, 2 * tp + fp + fnn));
    }
    let floats = |v: &[Frac]| v.iter().map(|f| f.to_f64()).collect::<Vec<_>>();
    Ok(MetricsReport {
        per_class_accuracy: floats(&acc),
        precision: floats(&prec),
        recall: floats(&acc),
        f1: floats(&f1),
        overall_accuracy: Frac::ratio(cm.trace(), total).to_f64(),
        macro_precision: mean(&prec).to_f64(),
        macro_recall: mean(&acc).to_f64(),
        macro_f1: mean(&f1).to_f64(),
        samples: total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub accuracy: f64,
    pub f1: f64,
}

impl ClassRow {
    /// `(class, accuracy, f1)` with two decimals.
    pub fn display(&self) -> (String, String, String) {
        (self.class.clone(), format!("{:.2}", self.accuracy), format!("{:.2}", self.f1))
    }
}

/// One row per class in catalog order.
pub fn per_class_table(report: &MetricsReport, class_names: &[String]) -> Vec<ClassRow> {
    class_names
        .iter()
        .enumerate()
        .map(|(i, name)| ClassRow {
            class: name.clone(),
            accuracy: report.per_class_accuracy[i],
            f1: report.f1[i],
        })
        .collect()
}

pub fn per_class_markdown(rows: &[ClassRow]) -> String {
    let mut out = String::from("| Class | Accuracy | F1 score |\n|---|---|---|\n");
    for r in rows {
        let (c, a, f) = r.display();
        let _ = writeln!(out, "| {c} | {a} | {f} |");
    }
    out
}

/// Overall accuracy as a percentage and macro P/R/F1 with two decimals.
pub fn summary_markdown(report: &MetricsReport) -> String {
    format!(
        "| Overall accuracy | Macro precision | Macro recall | Macro F1 |\n|---|---|---|---|\n| {:.2} | {:.2} | {:.2} | {:.2} |\n",
        100.0 * report.overall_accuracy,
        report.macro_precision,
        report.macro_recall,
        report.macro_f1
    )
}

/// Per-class rows at full precision, followed by the macro row.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport, class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "accuracy", "precision", "recall", "f1"])?;
    for (i, name) in class_names.iter().enumerate() {
        w.write_record([
            name.clone(),
            report.per_class_accuracy[i].to_string(),
            report.precision[i].to_string(),
            report.recall[i].to_string(),
            report.f1[i].to_string(),
        ])?;
    }
    w.write_record([
        "macro".to_string(),
        report.overall_accuracy.to_string(),
        report.macro_precision.to_string(),
        report.macro_recall.to_string(),
        report.macro_f1.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Row-normalized heatmap, white (0) to dark blue (1), `cell` pixels per
/// entry with a one-pixel grid.
pub fn render_confusion_png(cm: &ConfusionMatrix, path: &Path, cell: u32) -> Result<()> {
    let c = cm.classes() as u32;
    let side = c * (cell + 1) + 1;
    let mut img = image::RgbImage::from_pixel(side, side, image::Rgb([90, 90, 90]));
    for t in 0..c {
        let support = cm.support(t as usize).max(1) as f64;
        for p in 0..c {
            let v = cm.get(t as usize, p as usize) as f64 / support;
            let shade = |hi: f64, lo: f64| (hi + (lo - hi) * v).round() as u8;
            let color = image::Rgb([shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)]);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(1 + p * (cell + 1) + x, 1 + t * (cell + 1) + y, color);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{binary_map, ClassCatalog};
    use num_rational::Ratio;
    use proptest::prelude::*;

    type Q = Ratio<u128>;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let a = accumulate(ConfusionMatrix::new(2), &[0, 1], &[0, 1]).unwrap();
        assert_eq!(a, cm(&[&[1, 0], &[0, 1]]));
        let b = accumulate(ConfusionMatrix::new(2), &[1, 0, 0], &[1, 1, 0]).unwrap();
        assert_eq!(b, cm(&[&[1, 1], &[0, 1]]));
        assert!(matches!(
            accumulate(ConfusionMatrix::new(2), &[2], &[0]),
            Err(Error::Label { label: 2, classes: 2 })
        ));
        assert!(accumulate(ConfusionMatrix::new(2), &[0, 1], &[0]).is_err());
    }

    #[test]
    fn perfect_matrix_gives_ones() {
        let r = report(&cm(&[&[3, 0, 0], &[0, 5, 0], &[0, 0, 1]])).unwrap();
        assert!(r.f1.iter().chain(&r.precision).chain(&r.recall).all(|&v| v == 1.0));
        assert_eq!((r.overall_accuracy, r.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn hand_computed_two_class() {
        let r = report(&cm(&[&[1, 1], &[0, 1]])).unwrap();
        assert_eq!(r.precision[1], 0.5);
        assert_eq!(r.recall[1], 1.0);
        assert_eq!(r.f1[1], 2.0 / 3.0);
        assert_eq!(r.overall_accuracy, 2.0 / 3.0);
    }

    #[test]
    fn absent_and_never_predicted_classes_score_zero() {
        // class 2 absent from truth and never predicted
        let r = report(&cm(&[&[2, 1, 0], &[0, 3, 0], &[0, 0, 0]])).unwrap();
        assert_eq!((r.precision[2], r.recall[2], r.f1[2]), (0.0, 0.0, 0.0));
        // (4/5 + 6/7 + 0) / 3
        assert_eq!(r.macro_f1, 58.0 / 105.0);
        assert!(matches!(report(&ConfusionMatrix::new(3)), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn perfect_eight_class_table() {
        let names: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
        let mut m = ConfusionMatrix::new(8);
        m.accumulate(&(0..8).collect::<Vec<_>>(), &(0..8).collect::<Vec<_>>()).unwrap();
        let rows = per_class_table(&report(&m).unwrap(), &names);
        assert_eq!(rows.len(), 8);
        for (r, name) in rows.iter().zip(&names) {
            assert_eq!(r.display(), (name.clone(), "1.00".into(), "1.00".into()));
        }
        assert!(per_class_markdown(&rows).contains("| c3 | 1.00 | 1.00 |"));
    }

    #[test]
    fn coarsening_merges_off_diagonal_disease_errors() {
        let names = vec!["healthy".to_string(), "rot".into(), "smut".into()];
        let cat = ClassCatalog::new(names, vec![4, 3, 3]).unwrap();
        let map = binary_map(&cat, "healthy").unwrap();
        let m = cm(&[&[3, 1, 0], &[0, 1, 2], &[1, 0, 2]]);
        let b = m.coarsen(&map).unwrap();
        let h = map.apply(0);
        let u = 1 - h;
        assert_eq!(b.get(h, h), 3);
        assert_eq!(b.get(u, u), 5);
        assert_eq!(b.total(), m.total());
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let m = cm(&[&[5, 1], &[2, 4]]);
        let r = report(&m).unwrap();
        let names = vec!["a".to_string(), "b".into()];
        let csv_path = dir.path().join("metrics.csv");
        write_metrics_csv(&csv_path, &r, &names).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("class,accuracy,precision,recall,f1\na,"));
        assert!(text.contains(&r.macro_f1.to_string()));
        let png = dir.path().join("confusion.png");
        render_confusion_png(&m, &png, 12).unwrap();
        let img = image::open(&png).unwrap();
        assert_eq!(img.width(), 2 * 13 + 1);
        assert!(summary_markdown(&r).contains("| 75.00 |"));
    }

    /// Per-sample tallies and the textbook ratio forms, in exact rationals.
    struct Oracle {
        acc: Vec<Q>,
        prec: Vec<Q>,
        rec: Vec<Q>,
        f1: Vec<Q>,
        overall: Q,
    }

    fn q_or_zero(n: u128, d: u128) -> Q {
        if d == 0 {
            Q::from_integer(0)
        } else {
            Q::new(n, d)
        }
    }

    fn oracle(c: usize, truth: &[usize], pred: &[usize]) -> Oracle {
        let mut o = Oracle { acc: vec![], prec: vec![], rec: vec![], f1: vec![], overall: Q::from_integer(0) };
        for k in 0..c {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p == k).count() as u128;
            let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != k && p == k).count() as u128;
            let n_k = truth.iter().filter(|&&t| t == k).count() as u128;
            let p = q_or_zero(tp, tp + fp);
            let r = q_or_zero(tp, n_k);
            let f = if p + r == Q::from_integer(0) { p } else { Q::from_integer(2) * p * r / (p + r) };
            o.acc.push(q_or_zero(tp, n_k));
            o.prec.push(p);
            o.rec.push(r);
            o.f1.push(f);
        }
        let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as u128;
        o.overall = Q::new(correct, truth.len() as u128);
        o
    }

    fn to_f64(q: Q) -> f64 {
        *q.numer() as f64 / *q.denom() as f64
    }

    fn mean_q(v: &[Q]) -> Q {
        v.iter().sum::<Q>() / Q::from_integer(v.len() as u128)
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
        (2usize..=10, 1usize..=200).prop_flat_map(|(c, n)| {
            (Just(c), prop::collection::vec(0..c, n), prop::collection::vec(0..c, n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn report_matches_rational_oracle((c, truth, pred) in instance()) {
            let r = report(&accumulate(ConfusionMatrix::new(c), &truth, &pred).unwrap()).unwrap();
            let o = oracle(c, &truth, &pred);
            let f = |v: &[Q]| v.iter().map(|&q| to_f64(q)).collect::<Vec<_>>();
            prop_assert_eq!(&r.per_class_accuracy, &f(&o.acc));
            prop_assert_eq!(&r.precision, &f(&o.prec));
            prop_assert_eq!(&r.recall, &f(&o.rec));
            prop_assert_eq!(&r.f1, &f(&o.f1));
            prop_assert_eq!(r.overall_accuracy, to_f64(o.overall));
            prop_assert_eq!(r.macro_precision, to_f64(mean_q(&o.prec)));
            prop_assert_eq!(r.macro_recall, to_f64(mean_q(&o.rec)));
            prop_assert_eq!(r.macro_f1, to_f64(mean_q(&o.f1)));
            let fraction_correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
            prop_assert_eq!(r.overall_accuracy, fraction_correct);
        }
    }

    proptest! {
        #[test]
        fn chunks_merge_to_whole((c, truth, pred) in instance(), cut in 0usize..200) {
            let cut = cut.min(truth.len());
            let whole = accumulate(ConfusionMatrix::new(c), &truth, &pred).unwrap();
            let mut left = accumulate(ConfusionMatrix::new(c), &truth[..cut], &pred[..cut]).unwrap();
            let right = accumulate(ConfusionMatrix::new(c), &truth[cut..], &pred[cut..]).unwrap();
            left.merge(&right).unwrap();
            prop_assert_eq!(&left, &whole);
            prop_assert_eq!(whole.total() as usize, truth.len());
            for i in 0..c {
                prop_assert_eq!(whole.support(i) as usize, truth.iter().filter(|&&t| t == i).count());
            }
        }

        #[test]
        fn permuting_classes_permutes_metrics((c, truth, pred) in instance(), shift in 1usize..10) {
            let perm: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();
            let map = |v: &[usize]| v.iter().map(|&l| perm[l]).collect::<Vec<_>>();
            let a = report(&accumulate(ConfusionMatrix::new(c), &truth, &pred).unwrap()).unwrap();
            let b = report(&accumulate(ConfusionMatrix::new(c), &map(&truth), &map(&pred)).unwrap()).unwrap();
            for (i, &j) in perm.iter().enumerate() {
                prop_assert_eq!(a.f1[i], b.f1[j]);
                prop_assert_eq!(a.precision[i], b.precision[j]);
                prop_assert_eq!(a.recall[i], b.recall[j]);
            }
            prop_assert_eq!(a.overall_accuracy, b.overall_accuracy);
            prop_assert_eq!(a.macro_f1, b.macro_f1);
            prop_assert_eq!(a.macro_precision, b.macro_precision);
            prop_assert_eq!(a.macro_recall, b.macro_recall);
        }
    }
}

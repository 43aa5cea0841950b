//! Side-by-side comparison of finished runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use imbalance_core::metrics::{per_class_markdown, per_class_table, render_confusion_png};
use imbalance_core::training::{CvSummary, RunRecord};

/// A record and the column heading it is reported under.
#[derive(Debug, Clone)]
pub struct Column {
    pub heading: String,
    pub source: PathBuf,
    pub record: RunRecord,
}

/// Read `run_record.json` from a run directory. A cross-validation
/// directory contributes its best fold.
pub fn load_record(path: &Path) -> Result<RunRecord, String> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    let file = if path.is_dir() { path.join("run_record.json") } else { path.to_path_buf() };
    if file.exists() {
        return serde_json::from_str(&read(&file)?).map_err(|e| format!("{}: {e}", file.display()));
    }
    let cv = path.join("cv_summary.json");
    if cv.exists() {
        let summary: CvSummary = serde_json::from_str(&read(&cv)?).map_err(|e| format!("{}: {e}", cv.display()))?;
        return summary
            .folds
            .into_iter()
            .max_by(|a, b| a.test.macro_f1.total_cmp(&b.test.macro_f1))
            .ok_or_else(|| format!("{}: no folds", cv.display()));
    }
    Err(format!("{}: no run_record.json", path.display()))
}

/// Headings default to the experiment label; repeats get the seed appended.
pub fn columns(records: Vec<(PathBuf, RunRecord)>) -> Vec<Column> {
    let mut out: Vec<Column> = Vec::with_capacity(records.len());
    for (source, record) in records {
        let mut heading = record.experiment.label.clone();
        if out.iter().any(|c| c.heading == heading) {
            heading = format!("{heading} (seed {})", record.seed);
        }
        let mut n = 2;
        while out.iter().any(|c| c.heading == heading) {
            heading = format!("{} #{n}", record.experiment.label);
            n += 1;
        }
        out.push(Column { heading, source, record });
    }
    out
}

/// Index of the column with the highest test macro F1 (first on ties).
pub fn best_column(cols: &[Column]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cols.iter().enumerate() {
        if best.is_none_or(|b| c.record.test.macro_f1 > cols[b].record.test.macro_f1) {
            best = Some(i);
        }
    }
    best
}

/// Metrics as rows, runs as columns in the order given, then one per-class
/// table per run.
type Row = (&'static str, fn(&RunRecord) -> String);

pub fn comparison_markdown(cols: &[Column]) -> String {
    let best = best_column(cols);
    let mut out = String::from("# Comparison\n\n| Metric |");
    for (i, c) in cols.iter().enumerate() {
        let mark = if Some(i) == best { " (best)" } else { "" };
        let _ = write!(out, " {}{mark} |", c.heading);
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(cols.len()));
    out.push('\n');
    let rows: [Row; 4] = [
        ("Overall Accuracy (%)", |r| format!("{:.2}", 100.0 * r.test.overall_accuracy)),
        ("Macro Precision", |r| format!("{:.2}", r.test.macro_precision)),
        ("Macro Recall", |r| format!("{:.2}", r.test.macro_recall)),
        ("Macro F1 Score", |r| format!("{:.2}", r.test.macro_f1)),
    ];
    for (name, cell) in rows {
        let _ = write!(out, "| {name} |");
        for c in cols {
            let _ = write!(out, " {} |", cell(&c.record));
        }
        out.push('\n');
    }
    for c in cols {
        let _ = write!(
            out,
            "\n## {}\n\n`{}`, seed {}, best epoch {} of {}\n\n",
            c.heading,
            c.source.display(),
            c.record.seed,
            c.record.best_epoch,
            c.record.epochs.len()
        );
        out.push_str(&per_class_markdown(&per_class_table(&c.record.test, &c.record.class_names)));
    }
    out
}

/// Write `report.md` and one confusion heatmap per column into `dir`.
pub fn write_report(dir: &Path, cols: &[Column]) -> imbalance_core::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut md = comparison_markdown(cols);
    md.push_str("\n## Confusion matrices\n\n");
    for (i, c) in cols.iter().enumerate() {
        let name = format!("confusion-{}.png", i + 1);
        render_confusion_png(&c.record.confusion, &dir.join(&name), 24)?;
        let _ = writeln!(md, "![{}]({name})\n", c.heading);
    }
    let path = dir.join("report.md");
    std::fs::write(&path, md)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use imbalance_core::experiments::lookup;
    use imbalance_core::metrics::{report, ConfusionMatrix};

    fn record(id: &str, rows: &[Vec<u64>], seed: u64) -> RunRecord {
        let confusion = ConfusionMatrix::from_rows(rows).unwrap();
        RunRecord {
            experiment: lookup(id).unwrap().with_seed(seed),
            class_names: (0..rows.len()).map(|i| format!("c{i}")).collect(),
            train_counts: vec![10; rows.len()],
            fold: None,
            seed,
            epochs: Vec::new(),
            best_epoch: 1,
            best_val_macro_f1: 1.0,
            test: report(&confusion).unwrap(),
            confusion,
            parameter_count: 0,
            initial_checksum: String::new(),
            final_checksum: String::new(),
            split_sizes: [0, 0, 0],
            wall_clock_seconds: 0.0,
        }
    }

    fn cols(recs: Vec<RunRecord>) -> Vec<Column> {
        columns(recs.into_iter().map(|r| (PathBuf::from("run"), r)).collect())
    }

    fn row<'a>(md: &'a str, name: &str) -> Vec<&'a str> {
        let line = md.lines().find(|l| l.starts_with(&format!("| {name} |"))).unwrap();
        line.split('|').map(str::trim).filter(|s| !s.is_empty()).skip(1).collect()
    }

    #[test]
    fn perfect_record_row() {
        let c = cols(vec![record("table2-d121s-wce-a", &[vec![5, 0], vec![0, 3]], 0)]);
        let md = comparison_markdown(&c);
        assert_eq!(row(&md, "Overall Accuracy (%)"), ["100.00"]);
        for m in ["Macro Precision", "Macro Recall", "Macro F1 Score"] {
            assert_eq!(row(&md, m), ["1.00"]);
        }
    }

    #[test]
    fn columns_follow_argument_order_and_best_is_marked() {
        let weak = record("table2-d121s-cbam-wce-d", &[vec![3, 2], vec![1, 2]], 0);
        let strong = record("table2-d121s-wce-a", &[vec![5, 0], vec![1, 2]], 0);
        let md = comparison_markdown(&cols(vec![weak.clone(), strong.clone()]));
        let header = md.lines().find(|l| l.starts_with("| Metric |")).unwrap();
        assert_eq!(header, "| Metric | D121s+CBAM+WCE+D | D121s+WCE+A (best) |");
        // the marker follows the maximum, not the position
        let md = comparison_markdown(&cols(vec![strong, weak]));
        assert!(md.contains("| Metric | D121s+WCE+A (best) | D121s+CBAM+WCE+D |"));
    }

    #[test]
    fn repeated_experiment_headings_are_distinct() {
        let a = record("table2-d121s-wce-a", &[vec![1, 0], vec![0, 1]], 0);
        let b = record("table2-d121s-wce-a", &[vec![1, 0], vec![0, 1]], 7);
        let c = cols(vec![a, b]);
        assert_eq!(c[1].heading, "D121s+WCE+A (seed 7)");
        assert_eq!(best_column(&c), Some(0));
    }

    #[test]
    fn report_directory_has_heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        let c = cols(vec![
            record("table2-d121s-wce-a", &[vec![5, 0], vec![0, 3]], 0),
            record("table2-d121s-wce-d", &[vec![4, 1], vec![0, 3]], 0),
        ]);
        let path = write_report(dir.path(), &c).unwrap();
        assert!(std::fs::read_to_string(path).unwrap().contains("confusion-2.png"));
        assert!(dir.path().join("confusion-1.png").exists());
    }

    #[test]
    fn corrupt_record_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run_record.json"), "{not json").unwrap();
        assert!(load_record(dir.path()).is_err());
        assert!(load_record(&dir.path().join("missing")).is_err());
    }
}

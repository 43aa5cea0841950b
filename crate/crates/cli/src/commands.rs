use std::path::{Path, PathBuf};
use std::process::Command;

use imbalance_core::dataset::{generate_synthetic, write_manifest, ManifestRow, SyntheticSpec};
use imbalance_core::experiments::{lookup, registry, select, ExperimentConfig};
use imbalance_core::model::{build_model, count_params};
use imbalance_core::training::{run_dir, run_experiment, Outcome};

use crate::report::{columns, load_record, write_report};
use crate::{jobs, output_root, CliError, CliResult};

fn parse_by_extension<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Render a synthetic dataset as PNGs with `manifest.csv`, `catalog.json`
/// and the `spec.json` it came from. Returns the manifest path.
pub fn generate(spec_file: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<PathBuf> {
    let mut spec = match spec_file {
        Some(p) => parse_by_extension::<SyntheticSpec>(p)?,
        None => SyntheticSpec::desk_default(0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (images, catalog) = generate_synthetic(&spec)?;
    let mut rows = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let class = &catalog.names()[img.label];
        let rel = format!("images/{class}/{class}_{i:05}.png");
        let path = out.join(&rel);
        std::fs::create_dir_all(path.parent().expect("nested path"))?;
        img.pixels.save_png(&path)?;
        rows.push(ManifestRow {
            path: rel,
            class: class.clone(),
        });
    }
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    std::fs::write(out.join("catalog.json"), serde_json::to_string_pretty(&catalog)?)?;
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    println!(
        "{} images, {} classes, imbalance ratio {:.2}",
        images.len(),
        catalog.len(),
        catalog.imbalance_ratio()
    );
    println!("manifest: {}", manifest.display());
    Ok(manifest)
}

pub fn list(selector: Option<&str>) -> CliResult<()> {
    let exps = match selector {
        Some(s) => select(s),
        None => registry(),
    };
    if exps.is_empty() {
        return Err(CliError::Usage(format!("no experiment matches `{}`", selector.unwrap_or_default())));
    }
    let width = exps.iter().map(|e| e.id.len()).max().unwrap_or(0);
    for e in exps {
        println!("{:<width$}  {:<7} {}", e.id, e.group, e.label);
    }
    Ok(())
}

/// Where an experiment came from, so a worker process can be pointed at it.
#[derive(Debug, Clone)]
enum Source {
    Registered(String),
    File(PathBuf),
}

fn resolve(source: &Source) -> CliResult<ExperimentConfig> {
    match source {
        Source::Registered(id) => lookup(id).map_err(|e| CliError::Usage(e.to_string())),
        Source::File(p) => ExperimentConfig::from_file(p).map_err(|e| CliError::Usage(e.to_string())),
    }
}

pub fn describe(id: Option<&str>, config: Option<&Path>) -> CliResult<()> {
    let source = match (id, config) {
        (Some(id), None) => Source::Registered(id.into()),
        (None, Some(p)) => Source::File(p.into()),
        _ => return Err(CliError::Usage("describe takes one experiment id or --config".into())),
    };
    let cfg = resolve(&source)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{}", cfg.to_toml()?);
    let (_, catalog) = cfg.load_data()?;
    println!("\n# {} classes, imbalance ratio {:.2}", catalog.len(), catalog.imbalance_ratio());
    for (name, n) in catalog.names().iter().zip(catalog.counts()) {
        println!("#   {name:<22} {n}");
    }
    let mut plain = cfg.model.clone();
    plain.use_cbam = false;
    let mut with = cfg.model.clone();
    with.use_cbam = true;
    let p0 = count_params(&build_model(&plain, catalog.len(), 0)?);
    let p1 = count_params(&build_model(&with, catalog.len(), 0)?);
    let own = if cfg.model.use_cbam { p1 } else { p0 };
    println!("# parameters: {own} (attention block adds {})", p1 - p0);
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub ids: Vec<String>,
    pub all: Option<String>,
    pub config: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
}

impl RunArgs {
    fn sources(&self) -> CliResult<Vec<Source>> {
        let mut out: Vec<Source> = self.ids.iter().cloned().map(Source::Registered).collect();
        if let Some(sel) = &self.all {
            let picked = select(sel);
            if picked.is_empty() {
                return Err(CliError::Usage(format!("no experiment matches `{sel}`")));
            }
            out.extend(picked.into_iter().map(|c| Source::Registered(c.id)));
        }
        out.extend(self.config.iter().cloned().map(Source::File));
        if out.is_empty() {
            return Err(CliError::Usage("nothing to run: give experiment ids, --all or --config".into()));
        }
        Ok(out)
    }

    fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg
    }

    fn worker(&self, exe: &Path, source: &Source, root: &Path) -> Command {
        let mut cmd = Command::new(exe);
        cmd.arg("run");
        match source {
            Source::Registered(id) => cmd.arg(id),
            Source::File(p) => cmd.arg("--config").arg(p),
        };
        cmd.arg("--out").arg(root).args(["--jobs", "1"]);
        if let Some(s) = self.seed {
            cmd.arg("--seed").arg(s.to_string());
        }
        if let Some(e) = self.epochs {
            cmd.arg("--epochs").arg(e.to_string());
        }
        if self.deterministic {
            cmd.arg("--deterministic");
        }
        cmd
    }
}

/// Run every selected experiment; returns the run directories written.
pub fn run(args: &RunArgs) -> CliResult<Vec<PathBuf>> {
    let sources = args.sources()?;
    // resolve everything up front so a typo fails before any training
    let configs = sources
        .iter()
        .map(|s| resolve(s).map(|c| args.apply(c)))
        .collect::<CliResult<Vec<_>>>()?;
    for c in &configs {
        c.validate().map_err(|e| CliError::Usage(format!("{}: {e}", c.id)))?;
    }

    if args.jobs > 1 && configs.len() > 1 {
        let root = output_root(args.out.clone());
        std::fs::create_dir_all(&root)?;
        let root = root.canonicalize()?;
        let exe = std::env::current_exe()?;
        let cmds = sources.iter().map(|s| args.worker(&exe, s, &root)).collect();
        let statuses = jobs::run_parallel(cmds, args.jobs);
        let failed: Vec<&str> = configs
            .iter()
            .zip(&statuses)
            .filter(|(_, st)| **st != Some(0))
            .map(|(c, _)| c.id.as_str())
            .collect();
        if !failed.is_empty() {
            return Err(CliError::Runtime(format!("failed: {}", failed.join(", "))));
        }
        return Ok(Vec::new());
    }

    let mut dirs = Vec::new();
    let mut failed = Vec::new();
    for cfg in &configs {
        let root = output_root(args.out.clone().or_else(|| cfg.output_dir.clone()));
        let dir = run_dir(&root, &cfg.id);
        match run_experiment(cfg, Some(&dir)) {
            Ok(outcome) => {
                let r = outcome.primary();
                let extra = match &outcome {
                    Outcome::CrossValidation(cv) => {
                        format!(", fold mean {:.4} +/- {:.4}", cv.mean_macro_f1, cv.std_macro_f1)
                    }
                    Outcome::Holdout(_) => String::new(),
                };
                println!(
                    "{}: accuracy {:.2}%, macro F1 {:.4}{extra} -> {}",
                    cfg.id,
                    100.0 * r.test.overall_accuracy,
                    r.test.macro_f1,
                    dir.display()
                );
                dirs.push(dir);
            }
            Err(e) => {
                log::error!("{}: {e} (partial output in {})", cfg.id, dir.display());
                failed.push(cfg.id.clone());
            }
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!("failed: {}", failed.join(", "))));
    }
    Ok(dirs)
}

/// Compare run directories; prints the markdown and, with `out`, writes
/// it with confusion heatmaps. Unreadable records are skipped.
pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let mut records = Vec::new();
    for d in dirs {
        match load_record(d) {
            Ok(r) => records.push((d.clone(), r)),
            Err(e) => log::warn!("skipping {e}"),
        }
    }
    if records.is_empty() {
        return Err(CliError::Runtime("no readable run records".into()));
    }
    let cols = columns(records);
    print!("{}", crate::report::comparison_markdown(&cols));
    if let Some(dir) = out {
        let path = write_report(dir, &cols)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

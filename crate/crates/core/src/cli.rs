//! Command-line front end: config loading with dotted overrides, command
//! dispatch, and the results report.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datagen::Split;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::harness::{run_experiment, Experiment, ExperimentConfig, Lab, Manifest, MANIFEST_FILE};
use crate::par::{self, Exec};
use crate::risk;

#[derive(Debug, Parser)]
#[command(name = "desklab", version, about = "Desk-scale teacher-student distillation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its per-seed splits.
    GenData(RunArgs),
    /// Train hard-label teacher, assistant and student models.
    Train(RunArgs),
    /// Label unsupervised data with the teacher and distill a student.
    Distill(RunArgs),
    /// Compare KD and teacher-assistant chains.
    Takd(RunArgs),
    /// Student learning curve over sub-epochs.
    Curve(RunArgs),
    /// Supervised x unsupervised grid with teacher reference points.
    Grid(RunArgs),
    /// WERR against growing amounts of unsupervised data.
    Saturation(RunArgs),
    /// Brute-force check of the risk lemma and theorem.
    RiskVerify(RiskArgs),
    /// Summarise every manifest under a results directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Experiment config or a manifest from an earlier run.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Results root; each command writes into `<out>/<command>`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Top-level seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub jobs: usize,
    /// Set a config field by dotted path, value parsed as JSON when possible.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Fail if any unsupervised label was read outside the oracle path.
    #[arg(long)]
    pub audit_labels: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RiskArgs {
    /// Samples per exhaustive enumeration.
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Extra random triples to check.
    #[arg(long, default_value_t = 0)]
    pub random: u64,
    /// Samples per random triple.
    #[arg(long, default_value_t = 64)]
    pub random_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory holding experiment outputs.
    pub dir: PathBuf,
    /// Combined CSV path; defaults to `<dir>/report.csv`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Sets `key` (dot separated, numeric segments index arrays) in `doc`.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation(assignment, "override must look like key=value"))?;
    if key.is_empty() {
        return Err(Error::validation(assignment, "empty override key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for seg in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = seg.parse().map_err(|_| Error::validation(key, format!("`{seg}` is not an array index")))?;
                let len = items.len();
                items.get_mut(i).ok_or_else(|| Error::validation(key, format!("index {i} out of range (len {len})")))?
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                match cur {
                    Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
                    _ => unreachable!(),
                }
            }
            _ => return Err(Error::validation(key, format!("`{seg}` does not address an object or array"))),
        };
    }
    *cur = value;
    Ok(())
}

fn parse_config(doc: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            Error::Config(inner.to_string())
        } else {
            Error::Config(format!("at `{path}`: {inner}"))
        }
    })
}

fn is_manifest(doc: &Value) -> bool {
    doc.get("config_hash").is_some() && doc.get("config").is_some() && doc.get("outputs").is_some()
}

/// Resolves the config from a file (plain config or manifest), overrides and
/// the seed flag, then validates it.
pub fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut doc = match &args.config {
        None => serde_json::to_value(ExperimentConfig::default())?,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read: {e}")))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
            if is_manifest(&doc) {
                serde_json::to_value(Manifest::load(path)?.config)?
            } else {
                doc
            }
        }
    };
    for o in &args.overrides {
        apply_override(&mut doc, o)?;
    }
    let mut config = parse_config(doc)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn config_label(args: &RunArgs) -> String {
    match &args.config {
        Some(p) => format!("config {}", p.display()),
        None => "config <defaults>".into(),
    }
}

fn experiment_for(command: &Command) -> Option<(Experiment, &RunArgs)> {
    match command {
        Command::GenData(a) => Some((Experiment::GenData, a)),
        Command::Train(a) => Some((Experiment::Train, a)),
        Command::Distill(a) => Some((Experiment::Distill, a)),
        Command::Takd(a) => Some((Experiment::Takd, a)),
        Command::Curve(a) => Some((Experiment::Curve, a)),
        Command::Grid(a) => Some((Experiment::Grid, a)),
        Command::Saturation(a) => Some((Experiment::Saturation, a)),
        Command::RiskVerify(_) | Command::Report(_) => None,
    }
}

/// Runs one experiment command and returns the directory it wrote.
pub fn run_command(experiment: Experiment, args: &RunArgs) -> Result<PathBuf> {
    let label = config_label(args);
    let config = load_config(args).map_err(|e| e.context(&label))?;
    let root = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    let dir = root.join(experiment.name());
    par::with_jobs(args.jobs, || {
        let lab = Lab::new(config, Exec::default())?;
        let manifest = run_experiment(&lab, experiment, &dir)?;
        if args.audit_labels {
            let log = lab.corpus.access_log();
            let bad = log.non_oracle_reads(Split::Unsupervised);
            eprintln!("label reads: {} total, {bad} non-oracle reads of the unsupervised split", log.reads().len());
            if bad > 0 {
                return Err(Error::Data(format!("{bad} non-oracle reads of unsupervised labels")));
            }
        }
        println!("{}: wrote {} files to {}", experiment.name(), manifest.outputs.len() + 1, dir.display());
        Ok(())
    })
    .map_err(|e| e.context(&label))?;
    Ok(dir)
}

fn risk_verify(args: &RiskArgs) -> Result<()> {
    par::with_jobs(args.jobs, || {
        let s = risk::exhaustive_verify(args.n)?;
        println!("{s}");
        let mut violations = s.lemma_violations + s.theorem_violations;
        if args.random > 0 {
            let r = risk::random_verify(args.random_n, args.random, args.seed)?;
            println!("{r}");
            violations += r.lemma_violations + r.theorem_violations;
        }
        if violations > 0 {
            return Err(Error::Data(format!("{violations} violations")));
        }
        Ok(())
    })
}

/// Parses and runs `argv`, returning the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::RiskVerify(a) => risk_verify(a),
        Command::Report(a) => report(&a.dir, a.out.as_deref()).map(|r| print!("{}", r.text)),
        other => match experiment_for(other) {
            Some((exp, args)) => run_command(exp, args).map(|_| ()),
            None => Ok(()),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Aligned text table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                if i < widths.len() {
                    widths[i] = widths[i].max(c.len());
                }
            }
        }
        let line = |f: &mut fmt::Formatter<'_>, cells: &[String]| -> fmt::Result {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(f, "  {}", parts.join("  ").trim_end())
        };
        line(f, &self.header)?;
        for r in &self.rows {
            line(f, r)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
    pub warnings: Vec<String>,
    pub text: String,
    pub csv: String,
}

type Row = BTreeMap<String, String>;

fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?.clone();
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            Ok(header.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn num(row: &Row, key: &str) -> Result<f64> {
    row.get(key)
        .ok_or_else(|| Error::Format(format!("missing column {key}")))?
        .parse()
        .map_err(|_| Error::Format(format!("column {key} is not a number")))
}

fn text(row: &Row, key: &str) -> Result<String> {
    row.get(key).cloned().ok_or_else(|| Error::Format(format!("missing column {key}")))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Key for grouping by hours; exact up to picohour rounding.
fn hours_key(h: f64) -> i64 {
    (h * 1e6).round() as i64
}

struct Source<'a> {
    dir: &'a Path,
    label: String,
    manifest: &'a Manifest,
}

struct Builder {
    tables: Vec<Table>,
    warnings: Vec<String>,
    csv: String,
}

impl Builder {
    fn point(&mut self, src: &Source<'_>, series: &str, x: f64, value: f64, seeds: usize) {
        let _ = writeln!(self.csv, "{},{},{},{},{},{}", src.manifest.experiment.name(), src.label, series, x, value, seeds);
    }

    fn curve(&mut self, src: &Source<'_>) -> Result<()> {
        let rows = read_csv(&src.dir.join("curve.csv"))?;
        let mut by_seed: BTreeMap<String, Vec<&Row>> = BTreeMap::new();
        for r in &rows {
            by_seed.entry(text(r, "seed")?).or_default().push(r);
        }
        let points = by_seed.values().map(|v| v.len()).max().unwrap_or(0);
        let mut t = Table {
            title: format!("curve ({})", src.label),
            header: vec!["checkpoint".into(), "unsupervised_hours".into(), "mean_werr".into(), "seeds".into()],
            rows: Vec::new(),
        };
        for i in 0..points {
            let at: Vec<&Row> = by_seed.values().filter_map(|v| v.get(i).copied()).collect();
            let hours = mean(&at.iter().map(|r| num(r, "unsupervised_hours")).collect::<Result<Vec<_>>>()?);
            let werr = mean(&at.iter().map(|r| num(r, "werr_vs_baseline")).collect::<Result<Vec<_>>>()?);
            t.rows.push(vec![(i + 1).to_string(), format!("{hours:.2}"), pct(werr), at.len().to_string()]);
            self.point(src, "student", hours, werr, at.len());
        }
        if by_seed.values().any(|v| v.len() != points) {
            self.warnings.push(format!("{}: seeds have different checkpoint counts", src.label));
        }
        self.tables.push(t);
        Ok(())
    }

    fn saturation(&mut self, src: &Source<'_>) -> Result<()> {
        let rows = read_csv(&src.dir.join("saturation.csv"))?;
        let seeds = src.manifest.config.seeds.len();
        let mut t = Table {
            title: format!("saturation ({})", src.label),
            header: vec!["unsupervised_hours".into(), "mean_werr".into(), "marginal_werr".into()],
            rows: Vec::new(),
        };
        for r in &rows {
            let h = num(r, "unsupervised_hours")?;
            let w = num(r, "mean_werr")?;
            let m = r.get("marginal_werr").filter(|s| !s.is_empty()).map(|s| s.parse::<f64>().map(pct)).transpose();
            let m = m.map_err(|_| Error::Format("column marginal_werr is not a number".into()))?;
            t.rows.push(vec![format!("{h}"), pct(w), m.unwrap_or_else(|| "-".into())]);
            self.point(src, "mean_werr", h, w, seeds);
        }
        self.tables.push(t);
        Ok(())
    }

    fn grid(&mut self, src: &Source<'_>) -> Result<()> {
        let points = read_csv(&src.dir.join("grid_points.csv"))?;
        let dots = read_csv(&src.dir.join("teacher_dots.csv"))?;
        let analyses = read_csv(&src.dir.join("risk_analysis.csv"))?;
        let config = &src.manifest.config;
        let mut cells: BTreeMap<(i64, i64), (f64, f64, Vec<f64>)> = BTreeMap::new();
        for r in &points {
            let (s, u) = (num(r, "supervised_hours")?, num(r, "unsupervised_hours")?);
            cells.entry((hours_key(s), hours_key(u))).or_insert((s, u, Vec::new())).2.push(num(r, "werr_vs_baseline")?);
        }
        let mut t = Table {
            title: format!("grid ({})", src.label),
            header: vec!["supervised_hours".into(), "unsupervised_hours".into(), "mean_werr".into(), "seeds".into()],
            rows: Vec::new(),
        };
        for (s, u, w) in cells.values() {
            t.rows.push(vec![format!("{s}"), format!("{u}"), pct(mean(w)), w.len().to_string()]);
            self.point(src, &format!("sup{s}"), *u, mean(w), w.len());
        }
        for row in &config.grid.rows {
            for &u in &row.unsupervised_hours {
                let n = cells.get(&(hours_key(row.supervised_hours), hours_key(u))).map_or(0, |c| c.2.len());
                if n < config.seeds.len() {
                    self.warnings.push(format!(
                        "{}: incomplete grid cell {}h + {u}h ({n} of {} seeds)",
                        src.label,
                        row.supervised_hours,
                        config.seeds.len()
                    ));
                }
            }
        }
        self.tables.push(t);
        let mut by_sup: BTreeMap<i64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &dots {
            let s = num(r, "supervised_hours")?;
            let e = by_sup.entry(hours_key(s)).or_insert((s, Vec::new(), Vec::new()));
            e.1.push(num(r, "frame_error")?);
            e.2.push(num(r, "werr_vs_baseline")?);
        }
        let mut t = Table {
            title: format!("teacher dots ({})", src.label),
            header: vec!["supervised_hours".into(), "mean_frame_error".into(), "mean_werr".into()],
            rows: Vec::new(),
        };
        for (s, e, w) in by_sup.values() {
            t.rows.push(vec![format!("{s}"), format!("{:.4}", mean(e)), pct(mean(w))]);
            self.point(src, "teacher", *s, mean(w), w.len());
        }
        self.tables.push(t);
        if !analyses.is_empty() {
            let mut t = Table {
                title: format!("student vs teacher ({})", src.label),
                header: vec!["seed".into(), "student_error".into(), "teacher_error".into(), "certified_classes".into()],
                rows: Vec::new(),
            };
            for r in &analyses {
                let certified = text(r, "certified_classes")?.split_whitespace().count();
                t.rows.push(vec![
                    text(r, "seed")?,
                    format!("{:.4}", num(r, "student_error")?),
                    format!("{:.4}", num(r, "teacher_error")?),
                    certified.to_string(),
                ]);
            }
            self.tables.push(t);
        }
        Ok(())
    }

    fn takd(&mut self, src: &Source<'_>) -> Result<()> {
        let rows = read_csv(&src.dir.join("takd_stages.csv"))?;
        let mut order: Vec<(String, String)> = Vec::new();
        let mut groups: BTreeMap<(String, String), (String, Vec<f64>)> = BTreeMap::new();
        for r in &rows {
            let key = (text(r, "chain")?, text(r, "stage")?);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_insert((text(r, "params")?, Vec::new())).1.push(num(r, "werr_vs_baseline")?);
        }
        let mut t = Table {
            title: format!("takd ({})", src.label),
            header: vec!["chain".into(), "stage".into(), "params".into(), "mean_werr".into(), "seeds".into()],
            rows: Vec::new(),
        };
        for (i, key) in order.iter().enumerate() {
            let (params, w) = &groups[key];
            t.rows.push(vec![key.0.clone(), key.1.clone(), params.clone(), pct(mean(w)), w.len().to_string()]);
            self.point(src, &format!("{}/{}", key.0, key.1), i as f64, mean(w), w.len());
        }
        self.tables.push(t);
        Ok(())
    }

    fn train(&mut self, src: &Source<'_>) -> Result<()> {
        let rows = read_csv(&src.dir.join("train.csv"))?;
        let mut groups: BTreeMap<String, (String, String, Vec<f64>)> = BTreeMap::new();
        for r in &rows {
            groups.entry(text(r, "role")?).or_insert((text(r, "arch")?, text(r, "params")?, Vec::new())).2.push(num(r, "frame_error")?);
        }
        let mut t = Table {
            title: format!("train ({})", src.label),
            header: vec!["role".into(), "arch".into(), "params".into(), "mean_frame_error".into(), "seeds".into()],
            rows: Vec::new(),
        };
        for (role, (arch, params, e)) in &groups {
            t.rows.push(vec![role.clone(), arch.clone(), params.clone(), format!("{:.4}", mean(e)), e.len().to_string()]);
            self.point(src, role, 0.0, mean(e), e.len());
        }
        self.tables.push(t);
        Ok(())
    }

    fn distill(&mut self, src: &Source<'_>) -> Result<()> {
        let rows = read_csv(&src.dir.join("distill.csv"))?;
        let get = |k: &str| rows.iter().map(|r| num(r, k)).collect::<Result<Vec<_>>>();
        let (hours, kept, err, werr) = (get("unsupervised_hours")?, get("kept_fraction")?, get("frame_error")?, get("werr_vs_baseline")?);
        let t = Table {
            title: format!("distill ({})", src.label),
            header: vec!["unsupervised_hours".into(), "kept_fraction".into(), "mean_frame_error".into(), "mean_werr".into(), "seeds".into()],
            rows: vec![vec![
                format!("{:.2}", mean(&hours)),
                format!("{:.3}", mean(&kept)),
                format!("{:.4}", mean(&err)),
                pct(mean(&werr)),
                rows.len().to_string(),
            ]],
        };
        self.point(src, "student", mean(&hours), mean(&werr), rows.len());
        self.tables.push(t);
        Ok(())
    }

    fn gen_data(&mut self, src: &Source<'_>) -> Result<()> {
        let rows = read_csv(&src.dir.join("splits.csv"))?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in &rows {
            *counts.entry(text(r, "split")?).or_default() += 1;
        }
        let seeds = src.manifest.config.seeds.len().max(1);
        let utterances = src.manifest.outputs.keys().filter(|k| k.ends_with(".bin")).count();
        let mut t = Table {
            title: format!("gen-data ({})", src.label),
            header: vec!["split".into(), "utterances_per_seed".into()],
            rows: vec![vec!["all".into(), utterances.to_string()]],
        };
        for (split, n) in &counts {
            let name = if split.is_empty() { "unused" } else { split.as_str() };
            t.rows.push(vec![name.into(), format!("{:.1}", *n as f64 / seeds as f64)]);
        }
        self.tables.push(t);
        Ok(())
    }
}

/// Checks every output hash recorded in the manifest at `dir`.
pub fn verify_outputs(dir: &Path, manifest: &Manifest) -> Result<()> {
    for (name, hash) in &manifest.outputs {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        if hex::encode(Sha256::digest(&bytes)) != *hash {
            return Err(Error::Format(format!("{name}: content hash mismatch")));
        }
    }
    Ok(())
}

/// Text tables and a combined long-format CSV
/// (`experiment,source,series,x,value,seeds`) over every manifest found
/// under `dir`. The CSV is written to `csv_out` or `<dir>/report.csv`.
pub fn report(dir: &Path, csv_out: Option<&Path>) -> Result<Report> {
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == MANIFEST_FILE)
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no {MANIFEST_FILE} under {}", dir.display())));
    }
    let mut loaded = Vec::new();
    let mut broken = Vec::new();
    for p in &paths {
        let parent = p.parent().unwrap_or(dir);
        match Manifest::load(p).and_then(|m| verify_outputs(parent, &m).map(|_| m)) {
            Ok(m) => loaded.push((parent.to_path_buf(), m)),
            Err(e) => broken.push(format!("{}: {e}", p.display())),
        }
    }
    if !broken.is_empty() {
        return Err(Error::Data(format!("unreadable manifests:\n  {}", broken.join("\n  "))));
    }
    let mut b = Builder { tables: Vec::new(), warnings: Vec::new(), csv: String::from("experiment,source,series,x,value,seeds\n") };
    for (d, m) in &loaded {
        let label = d.strip_prefix(dir).ok().map(|p| p.display().to_string()).filter(|s| !s.is_empty()).unwrap_or_else(|| ".".into());
        let src = Source { dir: d, label, manifest: m };
        let r = match m.experiment {
            Experiment::GenData => b.gen_data(&src),
            Experiment::Train => b.train(&src),
            Experiment::Distill => b.distill(&src),
            Experiment::Curve => b.curve(&src),
            Experiment::Saturation => b.saturation(&src),
            Experiment::Grid => b.grid(&src),
            Experiment::Takd => b.takd(&src),
        };
        r.map_err(|e| e.context(d.display().to_string()))?;
    }
    let mut text = String::new();
    for t in &b.tables {
        let _ = writeln!(text, "{t}");
    }
    for w in &b.warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    let out = csv_out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("report.csv"));
    write_atomic(&out, b.csv.as_bytes())?;
    Ok(Report { tables: b.tables, warnings: b.warnings, text, csv: b.csv })
}

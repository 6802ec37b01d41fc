//! Declarative experiments: learning curves over sub-epochs, saturation
//! ladders, the supervised x unsupervised grid with teacher reference
//! points, and KD versus TAKD comparisons.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    encode_utterance, generate_corpus_with, split_corpus, Corpus, LabeledView, Split, SyntheticHmm,
    WindowSpec,
};
use crate::distill::{self, LabelSettings, MixWeight, SoftSet, SoftTargetBatch, StudentSettings, TeacherLabels};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::net::{self, Activation, ArchSpec, CheckpointMeta, ModelParams, TrainSchedule};
use crate::par::Exec;
use crate::risk::{self, RiskReport};
use crate::rng::derive_seed;
use crate::takd::{self, CompareSettings, Comparison, DataPlan, LinkSettings, TakdPlans};

pub const SCHEMA_VERSION: u32 = 1;

/// Relative error reduction of `model_error` over `baseline_error`.
pub fn werr(baseline_error: f64, model_error: f64) -> Result<f64> {
    if !(baseline_error > 0.0) || !baseline_error.is_finite() {
        return Err(Error::Data(format!("WERR is undefined for baseline error {baseline_error}")));
    }
    if !(model_error >= 0.0) || !model_error.is_finite() {
        return Err(Error::validation("model_error", "must be finite and non-negative"));
    }
    Ok((baseline_error - model_error) / baseline_error)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub hmm: SyntheticHmm,
    /// Raw frames per desk-hour.
    pub frames_per_hour: f64,
    pub utterance_frames: (usize, usize),
    pub supervised_hours: f64,
    pub unsupervised_hours: f64,
    pub test_hours: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            hmm: SyntheticHmm::default(),
            frames_per_hour: 300.0,
            utterance_frames: (100, 300),
            supervised_hours: 70.0,
            unsupervised_hours: 700.0,
            test_hours: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchTable {
    pub teacher: ArchSpec,
    pub assistant: ArchSpec,
    pub student: ArchSpec,
    /// Student for the low-resource grid.
    pub grid_student: ArchSpec,
}

fn default_arch(name: &str, window: WindowSpec, hidden: Vec<usize>) -> ArchSpec {
    ArchSpec { name: name.into(), window, feature_dim: 16, hidden_layers: hidden, num_classes: 32, activation: Activation::Tanh }
}

impl Default for ArchTable {
    fn default() -> Self {
        Self {
            teacher: default_arch("teacher", WindowSpec::symmetric(4, 3), vec![64; 5]),
            assistant: default_arch("assistant", WindowSpec::causal(4, 3), vec![32; 3]),
            student: default_arch("student", WindowSpec::causal(4, 3), vec![16; 2]),
            grid_student: default_arch("grid-student", WindowSpec::causal(4, 3), vec![64; 5]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    pub teacher: TrainSchedule,
    /// Used for baselines and every distilled student.
    pub student: TrainSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub label: LabelSettings,
    pub mix: MixWeight,
    pub warm_start: bool,
    /// Also give supervised frames teacher soft targets, mixed by `mix`.
    pub soft_on_supervised: bool,
    /// Checkpoints along the learning curve.
    pub sub_epochs: usize,
    /// Stream chunk size for the saturation ladder.
    pub sub_epoch_hours: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            label: LabelSettings::default(),
            mix: MixWeight::default(),
            warm_start: false,
            soft_on_supervised: false,
            sub_epochs: 17,
            sub_epoch_hours: 700.0 / 17.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaturationConfig {
    /// Unsupervised desk-hours, ascending.
    pub levels: Vec<f64>,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self { levels: vec![70.0, 140.0, 280.0, 560.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub supervised_hours: f64,
    pub unsupervised_hours: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Supervised plus unsupervised hours never exceed this pool.
    pub pool_hours: f64,
    pub sub_epoch_hours: f64,
    pub rows: Vec<GridRow>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let pool = 70.0;
        let rows = [1.0, 2.5, 5.0, 10.0, 35.0, 70.0]
            .into_iter()
            .map(|s: f64| {
                let rest = pool - s;
                let mut u = vec![0.0];
                if rest > 0.0 {
                    u.extend([0.25 * rest, 0.5 * rest, rest]);
                }
                GridRow { supervised_hours: s, unsupervised_hours: u }
            })
            .collect();
        Self { pool_hours: pool, sub_epoch_hours: 4.0, rows }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub archs: ArchTable,
    pub schedules: Schedules,
    pub distill: DistillConfig,
    pub saturation: SaturationConfig,
    pub grid: GridConfig,
    pub takd: TakdPlans,
    pub seeds: Vec<u64>,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 2020,
            corpus: CorpusConfig::default(),
            archs: ArchTable::default(),
            schedules: Schedules::default(),
            distill: DistillConfig::default(),
            saturation: SaturationConfig::default(),
            grid: GridConfig::default(),
            takd: TakdPlans::default(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: None,
        }
    }
}

fn finite_nonneg(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, "must be finite and non-negative"))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "must not be empty"));
        }
        let c = &self.corpus;
        if !(c.frames_per_hour > 0.0) || !c.frames_per_hour.is_finite() {
            return Err(Error::validation("corpus.frames_per_hour", "must be finite and positive"));
        }
        if c.utterance_frames.0 < 1 || c.utterance_frames.1 < c.utterance_frames.0 {
            return Err(Error::validation("corpus.utterance_frames", "need 1 <= min <= max"));
        }
        finite_nonneg("corpus.supervised_hours", c.supervised_hours)?;
        finite_nonneg("corpus.unsupervised_hours", c.unsupervised_hours)?;
        if !(c.test_hours > 0.0) {
            return Err(Error::validation("corpus.test_hours", "must be positive"));
        }
        for (name, a) in [
            ("archs.teacher", &self.archs.teacher),
            ("archs.assistant", &self.archs.assistant),
            ("archs.student", &self.archs.student),
            ("archs.grid_student", &self.archs.grid_student),
        ] {
            a.validate().map_err(|e| e.context(name))?;
            if a.feature_dim != c.hmm.feature_dim || a.num_classes != c.hmm.num_states {
                return Err(Error::validation(name, "feature_dim and num_classes must match the corpus"));
            }
        }
        self.schedules.teacher.validate().map_err(|e| e.context("schedules.teacher"))?;
        self.schedules.student.validate().map_err(|e| e.context("schedules.student"))?;
        self.distill.label.selection.validate()?;
        self.distill.mix.validate()?;
        if self.distill.sub_epochs == 0 {
            return Err(Error::validation("distill.sub_epochs", "must be at least 1"));
        }
        if !(self.distill.sub_epoch_hours > 0.0) {
            return Err(Error::validation("distill.sub_epoch_hours", "must be positive"));
        }
        let levels = &self.saturation.levels;
        if levels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::validation("saturation.levels", "must be ascending"));
        }
        if let Some(&top) = levels.last() {
            if top > c.unsupervised_hours {
                return Err(Error::validation("saturation.levels", "exceed corpus.unsupervised_hours"));
            }
        }
        if !(self.grid.sub_epoch_hours > 0.0) {
            return Err(Error::validation("grid.sub_epoch_hours", "must be positive"));
        }
        for (i, row) in self.grid.rows.iter().enumerate() {
            finite_nonneg(&format!("grid.rows[{i}].supervised_hours"), row.supervised_hours)?;
            if row.supervised_hours <= 0.0 {
                return Err(Error::validation(format!("grid.rows[{i}].supervised_hours"), "must be positive"));
            }
            for (j, u) in row.unsupervised_hours.iter().enumerate() {
                finite_nonneg(&format!("grid.rows[{i}].unsupervised_hours[{j}]"), *u)?;
                if row.supervised_hours + u > self.grid.pool_hours + 1e-9 {
                    return Err(Error::validation(
                        format!("grid.rows[{i}].unsupervised_hours[{j}]"),
                        format!("supervised + unsupervised exceeds the {} hour pool", self.grid.pool_hours),
                    ));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(&bytes))
    }

    /// Hours the generated corpus must hold.
    pub fn required_hours(&self) -> f64 {
        let c = &self.corpus;
        let pool = if self.grid.rows.is_empty() { 0.0 } else { self.grid.pool_hours };
        (c.supervised_hours + c.unsupervised_hours).max(pool) + c.test_hours
    }
}

/// Generates a corpus large enough for every experiment in `config`.
pub fn build_corpus(config: &ExperimentConfig, exec: Exec) -> Result<Corpus> {
    let c = &config.corpus;
    let spec = c.hmm.build(derive_seed(config.seed, "hmm", 0))?;
    let (lo, hi) = c.utterance_frames;
    // Greedy split filling overshoots each request by less than one utterance.
    let needed = config.required_hours() * c.frames_per_hour + 3.0 * hi as f64;
    let mean = (lo + hi) as f64 / 2.0;
    let mut n = ((needed / mean) * 1.05).ceil() as usize + 1;
    loop {
        let corpus = generate_corpus_with(&spec, n, (lo, hi), derive_seed(config.seed, "corpus", 0), exec)?
            .with_frames_per_hour(c.frames_per_hour)?;
        if corpus.num_frames() as f64 >= needed {
            return Ok(corpus);
        }
        n += n / 10 + 1;
    }
}

/// Content hash of a corpus: HMM spec plus every encoded utterance.
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&corpus.spec).unwrap_or_default());
    h.update(corpus.frames_per_hour.to_le_bytes());
    for u in corpus.utterances() {
        h.update(u.id.as_bytes());
        h.update(encode_utterance(u));
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub supervised_hours: f64,
    pub unsupervised_hours: f64,
    pub frame_error: f64,
    pub baseline_error: f64,
    pub werr_vs_baseline: f64,
    pub model_name: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherDot {
    pub supervised_hours: f64,
    pub frame_error: f64,
    pub baseline_error: f64,
    pub werr_vs_baseline: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaturationRow {
    pub unsupervised_hours: f64,
    pub mean_werr: f64,
    /// Change in mean WERR from the previous level.
    pub marginal_werr: Option<f64>,
    pub marginal_werr_per_hour: Option<f64>,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: usize,
    pub report: RiskReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellAnalysis {
    pub seed: u64,
    pub supervised_hours: f64,
    pub unsupervised_hours: f64,
    pub student_error: f64,
    pub teacher_error: f64,
    /// Classes whose one-vs-rest report has student risk <= teacher risk.
    pub certified_classes: Vec<usize>,
    /// Classes with strictly lower student risk.
    pub strict_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridResult {
    pub points: Vec<CurvePoint>,
    pub dots: Vec<TeacherDot>,
    pub analyses: Vec<CellAnalysis>,
}

/// One-vs-rest risk reports of `student` against `teacher` for `classes`.
pub fn student_beats_teacher_analysis(
    student: &ModelParams,
    teacher: &ModelParams,
    test: &LabeledView<'_>,
    classes: &[usize],
) -> Result<Vec<ClassReport>> {
    if test.utterances().is_empty() {
        return Err(Error::validation("test", "must not be empty"));
    }
    classes
        .iter()
        .map(|&class| {
            let run = risk::binarize_run(student, teacher, test, class)?;
            let report = risk::truth_over_teacher(&run.teacher, &run.student, &run.samples)?;
            Ok(ClassReport { class, report })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub job: String,
    pub seconds: f64,
}

/// Shared state for running experiments from one config: the generated
/// corpus and models reused across experiments with matching provenance.
pub struct Lab {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub exec: Exec,
    models: Mutex<BTreeMap<String, Arc<ModelParams>>>,
    timings: Mutex<Vec<JobTiming>>,
}

impl Lab {
    pub fn new(config: ExperimentConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let corpus = build_corpus(&config, exec)?;
        Ok(Self::with_corpus(config, corpus, exec))
    }

    pub fn with_corpus(config: ExperimentConfig, corpus: Corpus, exec: Exec) -> Self {
        Self { config, corpus, exec, models: Mutex::new(BTreeMap::new()), timings: Mutex::new(Vec::new()) }
    }

    pub fn timings(&self) -> Vec<JobTiming> {
        let mut t = self.timings.lock().map(|t| t.clone()).unwrap_or_default();
        t.sort_by(|a, b| a.job.cmp(&b.job));
        t
    }

    fn timed<T>(&self, job: String, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.context(job.clone()))?;
        if let Ok(mut t) = self.timings.lock() {
            t.push(JobTiming { job, seconds: start.elapsed().as_secs_f64() });
        }
        Ok(out)
    }

    fn run_seed(&self, seed: u64) -> u64 {
        derive_seed(self.config.seed, "run", seed)
    }

    fn schedule(&self, base: &TrainSchedule, seed: u64, role: &str) -> TrainSchedule {
        base.with_seed(takd::role_seed(self.run_seed(seed), role))
    }

    /// Supervised, unsupervised and test splits for one seed.
    pub fn main_split(&self, seed: u64) -> Result<Corpus> {
        let c = &self.config.corpus;
        split_corpus(&self.corpus, c.supervised_hours, c.unsupervised_hours, c.test_hours, derive_seed(self.config.seed, "split", seed))
    }

    /// Splits the fixed grid pool into `supervised_hours` and the rest.
    pub fn grid_split(&self, seed: u64, supervised_hours: f64) -> Result<Corpus> {
        let pool = self.config.grid.pool_hours;
        split_corpus(
            &self.corpus,
            supervised_hours,
            (pool - supervised_hours).max(0.0),
            self.config.corpus.test_hours,
            derive_seed(self.config.seed, "grid-split", seed),
        )
    }

    fn cached(&self, key: String, train: impl FnOnce() -> Result<ModelParams>) -> Result<Arc<ModelParams>> {
        if let Some(m) = self.models.lock().ok().and_then(|m| m.get(&key).cloned()) {
            return Ok(m);
        }
        let model = Arc::new(self.timed(format!("train {key}"), train)?);
        if let Ok(mut m) = self.models.lock() {
            m.insert(key, Arc::clone(&model));
        }
        Ok(model)
    }

    /// A hard-label model of `arch` on the split's supervised data.
    fn supervised_model(&self, tag: &str, split: &Corpus, arch: &ArchSpec, base: &TrainSchedule, seed: u64) -> Result<Arc<ModelParams>> {
        let key = format!("{tag}/seed{seed}/{}", arch.name);
        self.cached(key, || {
            let schedule = self.schedule(base, seed, &arch.name);
            takd::train_teacher(arch, &split.supervised()?.stack(&arch.window), &schedule)
        })
    }

    fn main_teacher(&self, split: &Corpus, seed: u64) -> Result<Arc<ModelParams>> {
        self.supervised_model("main", split, &self.config.archs.teacher, &self.config.schedules.teacher, seed)
    }

    fn main_baseline(&self, split: &Corpus, seed: u64) -> Result<Arc<ModelParams>> {
        self.supervised_model("main", split, &self.config.archs.student, &self.config.schedules.student, seed)
    }

    fn student_settings(&self, seed: u64, arch: &ArchSpec, sub_epoch_hours: f64) -> StudentSettings {
        let d = &self.config.distill;
        StudentSettings {
            mix: d.mix,
            schedule: self.schedule(&self.config.schedules.student, seed, &arch.name),
            sub_epoch_hours,
            warm_start: d.warm_start,
        }
    }

    /// Compressed teacher targets for the first `max_hours` of the
    /// unsupervised split (and the supervised split when configured).
    fn soft_batch(&self, teacher: &ModelParams, split: &Corpus, max_hours: f64) -> Result<TeacherLabels> {
        let unsup = split.unlabeled(Split::Unsupervised)?.take_hours(max_hours);
        let label = &self.config.distill.label;
        let mut out = distill::teacher_label_with(teacher, &unsup, label, self.exec)?;
        if self.config.distill.soft_on_supervised {
            let sup = distill::teacher_label_with(teacher, &split.supervised()?.unlabeled(), label, self.exec)?;
            out.batch.extend(&sup.batch)?;
            out.report.candidates += sup.report.candidates;
            out.report.kept += sup.report.kept;
        }
        Ok(out)
    }

    /// [`Lab::soft_batch`] joined with student windows.
    fn soft_targets(&self, batch: &SoftTargetBatch, split: &Corpus, student: &ArchSpec, max_hours: f64) -> Result<SoftSet> {
        let unsup = split.unlabeled(Split::Unsupervised)?.take_hours(max_hours);
        if self.config.distill.soft_on_supervised {
            let sup = split.supervised()?.unlabeled();
            return SoftSet::build(batch, &[&unsup, &sup], student);
        }
        SoftSet::build(batch, &[&unsup], student)
    }

    fn soft_set(&self, teacher: &ModelParams, split: &Corpus, student: &ArchSpec, max_hours: f64) -> Result<SoftSet> {
        let labels = self.soft_batch(teacher, split, max_hours)?;
        self.soft_targets(&labels.batch, split, student, max_hours)
    }

    /// Student trained on the supervised labels and the first `hours` of
    /// unsupervised soft targets in `soft`.
    fn soft_prefix(&self, split: &Corpus, soft: &SoftSet, hours: f64) -> Result<SoftSet> {
        let keep: HashSet<u64> = split.unlabeled(Split::Unsupervised)?.take_hours(hours).utterances().map(|u| u.id_hash()).collect();
        let sup: HashSet<u64> = if self.config.distill.soft_on_supervised {
            split.supervised()?.unlabeled().utterances().map(|u| u.id_hash()).collect()
        } else {
            HashSet::new()
        };
        let mut out = SoftSet::empty(soft.frames.dim, soft.frames.hours_per_frame);
        for (i, r) in soft.frames.refs.iter().enumerate() {
            if keep.contains(&r.utterance) || sup.contains(&r.utterance) {
                out.frames.data.extend_from_slice(soft.frames.row(i));
                out.frames.refs.push(*r);
                out.targets.push(soft.targets[i].clone());
            }
        }
        Ok(out)
    }

    fn test_error(model: &ModelParams, split: &Corpus) -> Result<f64> {
        net::frame_error_rate(model, &split.evaluation(Split::Test)?.stack(&model.arch.window))
    }

    fn curve_seed(&self, seed: u64) -> Result<(Vec<CurvePoint>, ModelParams)> {
        let split = self.main_split(seed)?;
        let student = &self.config.archs.student;
        let baseline = self.main_baseline(&split, seed)?;
        let baseline_error = Self::test_error(&baseline, &split)?;
        let teacher = self.main_teacher(&split, seed)?;
        let soft = self.soft_set(&teacher, &split, student, self.config.corpus.unsupervised_hours)?;
        let sup = split.supervised()?.stack(&student.window);
        let unsup_hours = soft.frames.hours() - if self.config.distill.soft_on_supervised { sup.frames.hours() } else { 0.0 };
        let sub_epoch = (unsup_hours / self.config.distill.sub_epochs as f64).max(f64::MIN_POSITIVE);
        let run = self.timed(format!("curve/seed{seed}/student"), || {
            distill::train_student(student, &sup, &soft, &self.student_settings(seed, student, sub_epoch))
        })?;
        let sup_hours = sup.frames.hours();
        let points = run
            .checkpoints
            .iter()
            .map(|c| {
                let e = Self::test_error(&c.params, &split)?;
                Ok(CurvePoint {
                    supervised_hours: sup_hours,
                    unsupervised_hours: c.unsupervised_hours,
                    frame_error: e,
                    baseline_error,
                    werr_vs_baseline: werr(baseline_error, e)?,
                    model_name: student.name.clone(),
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((points, run.params))
    }

    /// Hard-label models of every configured role on each seed's
    /// supervised split.
    pub fn train_table(&self) -> Result<(Vec<TrainRow>, Vec<(String, ModelParams, u64)>)> {
        let a = &self.config.archs;
        let sched = &self.config.schedules;
        let roles = [("teacher", &a.teacher, &sched.teacher), ("assistant", &a.assistant, &sched.student), ("student", &a.student, &sched.student)];
        let per_seed = self.exec.map(&self.config.seeds, |&seed| {
            let split = self.main_split(seed)?;
            roles
                .iter()
                .map(|(role, arch, schedule)| {
                    let model = self.supervised_model("main", &split, arch, schedule, seed)?;
                    let row = TrainRow {
                        seed,
                        role: (*role).into(),
                        arch: arch.name.clone(),
                        params: arch.param_count(),
                        supervised_hours: split.split_hours(Split::Supervised),
                        frame_error: Self::test_error(&model, &split)?,
                    };
                    Ok((row, (format!("{role}-seed{seed}.ckpt"), (*model).clone(), seed)))
                })
                .collect::<Result<Vec<_>>>()
        });
        let mut rows = Vec::new();
        let mut models = Vec::new();
        for r in per_seed {
            for (row, m) in r? {
                rows.push(row);
                models.push(m);
            }
        }
        Ok((rows, models))
    }

    /// One distilled student per seed over all configured unsupervised data,
    /// with the compressed soft targets it was trained on.
    pub fn distill_table(&self) -> Result<Vec<DistillOutput>> {
        let student = &self.config.archs.student;
        let per_seed = self.exec.map(&self.config.seeds, |&seed| {
            let split = self.main_split(seed)?;
            let baseline_error = Self::test_error(&*self.main_baseline(&split, seed)?, &split)?;
            let teacher = self.main_teacher(&split, seed)?;
            let hours = self.config.corpus.unsupervised_hours;
            let labels = self.soft_batch(&teacher, &split, hours)?;
            let soft = self.soft_targets(&labels.batch, &split, student, hours)?;
            let sup = split.supervised()?.stack(&student.window);
            let settings = self.student_settings(seed, student, self.config.distill.sub_epoch_hours);
            let run = self.timed(format!("distill/seed{seed}/student"), || distill::train_student(student, &sup, &soft, &settings))?;
            let frame_error = Self::test_error(&run.params, &split)?;
            Ok(DistillOutput {
                row: DistillRow {
                    seed,
                    teacher: teacher.arch.name.clone(),
                    student: student.name.clone(),
                    supervised_hours: sup.frames.hours(),
                    unsupervised_hours: split.unlabeled(Split::Unsupervised)?.take_hours(hours).hours(),
                    kept_fraction: labels.report.kept_fraction(),
                    frame_error,
                    baseline_error,
                    werr_vs_baseline: werr(baseline_error, frame_error)?,
                },
                soft_targets: labels.batch,
                student: run.params,
            })
        });
        per_seed.into_iter().collect()
    }

    /// One point per sub-epoch checkpoint per seed.
    pub fn subepoch_curve(&self) -> Result<Vec<CurvePoint>> {
        Ok(self.subepoch_curve_models()?.0)
    }

    fn subepoch_curve_models(&self) -> Result<(Vec<CurvePoint>, Vec<(u64, ModelParams)>)> {
        let per_seed = self.exec.map(&self.config.seeds, |&s| self.curve_seed(s));
        let mut points = Vec::new();
        let mut models = Vec::new();
        for (s, r) in self.config.seeds.iter().zip(per_seed) {
            let (p, m) = r?;
            points.extend(p);
            models.push((*s, m));
        }
        Ok((points, models))
    }

    fn saturation_seed(&self, seed: u64) -> Result<Vec<f64>> {
        let split = self.main_split(seed)?;
        let student = &self.config.archs.student;
        let baseline_error = Self::test_error(&*self.main_baseline(&split, seed)?, &split)?;
        let teacher = self.main_teacher(&split, seed)?;
        let levels = &self.config.saturation.levels;
        let top = levels.last().copied().unwrap_or(0.0);
        let soft = self.soft_set(&teacher, &split, student, top)?;
        let sup = split.supervised()?.stack(&student.window);
        levels
            .iter()
            .map(|&level| {
                let subset = self.soft_prefix(&split, &soft, level)?;
                let settings = self.student_settings(seed, student, self.config.distill.sub_epoch_hours);
                let run = self.timed(format!("saturation/seed{seed}/{level}h"), || {
                    distill::train_student(student, &sup, &subset, &settings)
                })?;
                werr(baseline_error, Self::test_error(&run.params, &split)?)
            })
            .collect()
    }

    /// Seed-mean WERR per unsupervised level.
    pub fn saturation_study(&self) -> Result<Vec<SaturationRow>> {
        let levels = &self.config.saturation.levels;
        if levels.len() < 3 {
            return Err(Error::validation("saturation.levels", "need at least three levels"));
        }
        let per_seed = self.exec.map(&self.config.seeds, |&s| self.saturation_seed(s)).into_iter().collect::<Result<Vec<_>>>()?;
        let mut rows: Vec<SaturationRow> = Vec::with_capacity(levels.len());
        for (i, &level) in levels.iter().enumerate() {
            let values: Vec<f64> = per_seed.iter().map(|v| v[i]).collect();
            let mean_werr = takd::mean(values.iter().copied());
            let (marginal_werr, marginal_werr_per_hour) = match rows.last() {
                Some(prev) => {
                    let d = mean_werr - prev.mean_werr;
                    let dh = level - prev.unsupervised_hours;
                    (Some(d), (dh > 0.0).then(|| d / dh))
                }
                None => (None, None),
            };
            rows.push(SaturationRow { unsupervised_hours: level, mean_werr, marginal_werr, marginal_werr_per_hour, per_seed: values });
        }
        Ok(rows)
    }

    fn grid_seed(&self, seed: u64) -> Result<GridResult> {
        let g = &self.config.grid;
        let student = &self.config.archs.grid_student;
        let teacher_arch = &self.config.archs.teacher;
        let mut out = GridResult { points: Vec::new(), dots: Vec::new(), analyses: Vec::new() };
        let smallest = g.rows.iter().map(|r| r.supervised_hours).fold(f64::INFINITY, f64::min);
        for row in &g.rows {
            let split = self.grid_split(seed, row.supervised_hours)?;
            let tag = format!("grid{}", row.supervised_hours);
            let baseline = self.supervised_model(&tag, &split, student, &self.config.schedules.student, seed)?;
            let baseline_error = Self::test_error(&baseline, &split)?;
            let teacher = self.supervised_model(&tag, &split, teacher_arch, &self.config.schedules.teacher, seed)?;
            let teacher_error = Self::test_error(&teacher, &split)?;
            out.dots.push(TeacherDot {
                supervised_hours: row.supervised_hours,
                frame_error: teacher_error,
                baseline_error,
                werr_vs_baseline: werr(baseline_error, teacher_error)?,
                seed,
            });
            let top = row.unsupervised_hours.iter().copied().fold(0.0, f64::max);
            let soft = self.soft_set(&teacher, &split, student, top)?;
            let sup = split.supervised()?.stack(&student.window);
            for &u in &row.unsupervised_hours {
                let subset = self.soft_prefix(&split, &soft, u)?;
                let settings = self.student_settings(seed, student, g.sub_epoch_hours);
                let run = self.timed(format!("grid/seed{seed}/{}h+{u}h", row.supervised_hours), || {
                    if u == 0.0 && !self.config.distill.soft_on_supervised {
                        distill::train_student(student, &sup, &SoftSet::empty(student.input_dim(), soft.frames.hours_per_frame), &settings)
                    } else {
                        distill::train_student(student, &sup, &subset, &settings)
                    }
                })?;
                let e = Self::test_error(&run.params, &split)?;
                out.points.push(CurvePoint {
                    supervised_hours: row.supervised_hours,
                    unsupervised_hours: u,
                    frame_error: e,
                    baseline_error,
                    werr_vs_baseline: werr(baseline_error, e)?,
                    model_name: student.name.clone(),
                    seed,
                });
                if row.supervised_hours == smallest && u == top && u > 0.0 {
                    let test = split.evaluation(Split::Test)?;
                    let classes: Vec<usize> = (0..student.num_classes).collect();
                    let reports = student_beats_teacher_analysis(&run.params, &teacher, &test, &classes)?;
                    out.analyses.push(CellAnalysis {
                        seed,
                        supervised_hours: row.supervised_hours,
                        unsupervised_hours: u,
                        student_error: e,
                        teacher_error,
                        certified_classes: reports.iter().filter(|r| r.report.student_beats_teacher).map(|r| r.class).collect(),
                        strict_classes: reports.iter().filter(|r| r.report.r_student < r.report.r_teacher).map(|r| r.class).collect(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Curves per supervised level, teacher dots, and a risk analysis at the
    /// smallest supervised level with the most unsupervised data.
    pub fn low_resource_grid(&self) -> Result<GridResult> {
        if self.config.grid.rows.is_empty() {
            return Err(Error::validation("grid.rows", "must not be empty"));
        }
        let per_seed = self.exec.map(&self.config.seeds, |&s| self.grid_seed(s));
        let mut out = GridResult { points: Vec::new(), dots: Vec::new(), analyses: Vec::new() };
        for r in per_seed {
            let r = r?;
            out.points.extend(r.points);
            out.dots.extend(r.dots);
            out.analyses.extend(r.analyses);
        }
        Ok(out)
    }

    fn compare_settings(&self) -> CompareSettings {
        let d = &self.config.distill;
        let t = &self.config.takd;
        let link = |plan: DataPlan| LinkSettings {
            label: d.label,
            student: StudentSettings {
                mix: d.mix,
                schedule: self.config.schedules.student.clone(),
                sub_epoch_hours: d.sub_epoch_hours,
                warm_start: d.warm_start,
            },
            plan,
        };
        CompareSettings {
            teacher_schedule: self.config.schedules.teacher.clone(),
            baseline_schedule: self.config.schedules.student.clone(),
            first_link: link(t.first_link.clone()),
            later_links: link(t.later_links.clone()),
        }
    }

    /// KD versus TAKD with the configured teacher, assistant and student.
    pub fn takd_comparison(&self) -> Result<Comparison> {
        Ok(self.takd_stages()?.0)
    }

    /// The comparison plus every stage of both chains per seed.
    pub fn takd_stages(&self) -> Result<(Comparison, Vec<StageRow>)> {
        let a = &self.config.archs;
        if self.config.seeds.len() < 3 {
            return Err(Error::validation("seeds", "a comparison needs at least three seeds"));
        }
        let settings = self.compare_settings();
        let per_seed = self.exec.map(&self.config.seeds, |&s| {
            let split = self.main_split(s)?;
            self.timed(format!("takd/seed{s}"), || takd::compare_seed(&split, [&a.teacher, &a.assistant, &a.student], &settings, self.run_seed(s)))
        });
        let mut rows = Vec::new();
        let mut stages = Vec::new();
        for (&seed, r) in self.config.seeds.iter().zip(per_seed) {
            let (mut row, chains) = r?;
            row.seed = seed;
            stages.push(StageRow {
                seed,
                chain: "baseline".into(),
                stage: a.student.name.clone(),
                params: a.student.param_count(),
                frame_error: row.baseline_error,
                werr_vs_baseline: 0.0,
            });
            for (name, chain) in ["kd", "takd"].iter().zip(&chains) {
                for st in &chain.stages {
                    stages.push(StageRow {
                        seed,
                        chain: (*name).into(),
                        stage: st.name.clone(),
                        params: st.params,
                        frame_error: st.frame_error,
                        werr_vs_baseline: st.werr_vs_baseline.unwrap_or(0.0),
                    });
                }
            }
            rows.push(row);
        }
        Ok((Comparison { rows, degenerate: a.assistant == a.teacher }, stages))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub seed: u64,
    pub role: String,
    pub arch: String,
    pub params: usize,
    pub supervised_hours: f64,
    pub frame_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRow {
    pub seed: u64,
    pub teacher: String,
    pub student: String,
    pub supervised_hours: f64,
    pub unsupervised_hours: f64,
    pub kept_fraction: f64,
    pub frame_error: f64,
    pub baseline_error: f64,
    pub werr_vs_baseline: f64,
}

pub struct DistillOutput {
    pub row: DistillRow,
    pub soft_targets: SoftTargetBatch,
    pub student: ModelParams,
}

/// One trained stage of a KD or TAKD chain, or the hard-label baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub seed: u64,
    pub chain: String,
    pub stage: String,
    pub params: usize,
    pub frame_error: f64,
    pub werr_vs_baseline: f64,
}

pub fn train_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from("seed,role,arch,params,supervised_hours,frame_error\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.seed, r.role, r.arch, r.params, r.supervised_hours, r.frame_error);
    }
    out
}

pub fn distill_csv(rows: &[DistillRow]) -> String {
    let mut out = String::from("seed,teacher,student,supervised_hours,unsupervised_hours,kept_fraction,frame_error,baseline_error,werr_vs_baseline\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.seed, r.teacher, r.student, r.supervised_hours, r.unsupervised_hours, r.kept_fraction, r.frame_error, r.baseline_error, r.werr_vs_baseline
        );
    }
    out
}

pub fn stages_csv(rows: &[StageRow]) -> String {
    let mut out = String::from("seed,chain,stage,params,frame_error,werr_vs_baseline\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.seed, r.chain, r.stage, r.params, r.frame_error, r.werr_vs_baseline);
    }
    out
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("seed,model_name,supervised_hours,unsupervised_hours,frame_error,baseline_error,werr_vs_baseline\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.seed, p.model_name, p.supervised_hours, p.unsupervised_hours, p.frame_error, p.baseline_error, p.werr_vs_baseline
        );
    }
    out
}

pub fn dots_csv(dots: &[TeacherDot]) -> String {
    let mut out = String::from("seed,supervised_hours,frame_error,baseline_error,werr_vs_baseline\n");
    for d in dots {
        let _ = writeln!(out, "{},{},{},{},{}", d.seed, d.supervised_hours, d.frame_error, d.baseline_error, d.werr_vs_baseline);
    }
    out
}

pub fn saturation_csv(rows: &[SaturationRow], seeds: &[u64]) -> String {
    let mut out = String::from("unsupervised_hours,mean_werr,marginal_werr,marginal_werr_per_hour");
    for s in seeds {
        let _ = write!(out, ",seed_{s}");
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.unsupervised_hours, r.mean_werr, opt(r.marginal_werr), opt(r.marginal_werr_per_hour));
        for v in &r.per_seed {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn analysis_csv(analyses: &[CellAnalysis]) -> String {
    let mut out = String::from("seed,supervised_hours,unsupervised_hours,student_error,teacher_error,certified_classes,strict_classes\n");
    let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
    for a in analyses {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            a.seed, a.supervised_hours, a.unsupervised_hours, a.student_error, a.teacher_error, join(&a.certified_classes), join(&a.strict_classes)
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    GenData,
    Train,
    Distill,
    Curve,
    Saturation,
    Grid,
    Takd,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::GenData => "gen-data",
            Experiment::Train => "train",
            Experiment::Distill => "distill",
            Experiment::Curve => "curve",
            Experiment::Saturation => "saturation",
            Experiment::Grid => "grid",
            Experiment::Takd => "takd",
        }
    }
}

const CURVE_COLUMNS: &[(&str, &str)] = &[
    ("seed", "run seed"),
    ("model_name", "student architecture"),
    ("supervised_hours", "supervised desk-hours the student saw"),
    ("unsupervised_hours", "unsupervised desk-hours consumed at this checkpoint"),
    ("frame_error", "test frame error rate"),
    ("baseline_error", "test frame error of the supervised-only baseline"),
    ("werr_vs_baseline", "(baseline_error - frame_error) / baseline_error"),
];

fn schema_for(experiment: Experiment, seeds: &[u64]) -> serde_json::Value {
    let cols = |c: &[(&str, &str)]| serde_json::Value::Object(c.iter().map(|(k, v)| (k.to_string(), (*v).into())).collect());
    let seed_cols: Vec<String> = seeds.iter().map(|s| format!("seed_{s}")).collect();
    match experiment {
        Experiment::GenData => serde_json::json!({
            "corpus/spec.json": "HMM, generation parameters and utterance ids",
            "corpus/<id>.bin": "one encoded utterance",
            "splits.csv": cols(&[
                ("seed", "run seed"),
                ("utterance", "utterance id"),
                ("split", "supervised, unsupervised, test or empty when unused"),
            ]),
        }),
        Experiment::Train => serde_json::json!({
            "train.csv": cols(&[
                ("seed", "run seed"),
                ("role", "teacher, assistant or student"),
                ("arch", "architecture name"),
                ("params", "parameter count"),
                ("supervised_hours", "supervised desk-hours"),
                ("frame_error", "test frame error rate"),
            ]),
            "checkpoints/<role>-seed<s>.ckpt": "trained model",
        }),
        Experiment::Distill => serde_json::json!({
            "distill.csv": cols(&[
                ("seed", "run seed"),
                ("teacher", "teacher architecture"),
                ("student", "student architecture"),
                ("supervised_hours", "supervised desk-hours"),
                ("unsupervised_hours", "unsupervised desk-hours labelled by the teacher"),
                ("kept_fraction", "fraction of frames kept by the selection policy"),
                ("frame_error", "student test frame error"),
                ("baseline_error", "supervised-only baseline test frame error"),
                ("werr_vs_baseline", "(baseline_error - frame_error) / baseline_error"),
            ]),
            "soft/seed<s>.dlst": "compressed soft targets",
            "checkpoints/student-seed<s>.ckpt": "distilled student",
        }),
        Experiment::Curve => serde_json::json!({ "curve.csv": cols(CURVE_COLUMNS) }),
        Experiment::Grid => serde_json::json!({
            "grid_points.csv": cols(CURVE_COLUMNS),
            "teacher_dots.csv": cols(&[
                ("seed", "run seed"),
                ("supervised_hours", "supervised desk-hours of the teacher and its curve"),
                ("frame_error", "teacher test frame error"),
                ("baseline_error", "the curve's supervised-only baseline error"),
                ("werr_vs_baseline", "teacher WERR against that baseline"),
            ]),
            "risk_analysis.csv": cols(&[
                ("seed", "run seed"),
                ("supervised_hours", "grid row"),
                ("unsupervised_hours", "grid column"),
                ("student_error", "student test frame error"),
                ("teacher_error", "teacher test frame error"),
                ("certified_classes", "classes whose one-vs-rest student risk is at most the teacher's"),
                ("strict_classes", "classes whose one-vs-rest student risk is below the teacher's"),
            ]),
        }),
        Experiment::Saturation => serde_json::json!({
            "saturation.csv": {
                "unsupervised_hours": "unsupervised desk-hours",
                "mean_werr": "seed-mean WERR against the supervised-only baseline",
                "marginal_werr": "change in mean_werr from the previous level",
                "marginal_werr_per_hour": "marginal_werr divided by the added hours",
                "seed_<s>": format!("per-seed WERR ({})", seed_cols.join(", ")),
            }
        }),
        Experiment::Takd => serde_json::json!({
            "takd.csv": {
                "row": "baseline_error, kd_error, takd_error, kd_werr or takd_werr",
                "seed_<s>": format!("per-seed value ({})", seed_cols.join(", ")),
                "mean": "mean over seeds",
            },
            "takd_stages.csv": cols(&[
                ("seed", "run seed"),
                ("chain", "baseline, kd or takd"),
                ("stage", "architecture name"),
                ("params", "parameter count"),
                ("frame_error", "test frame error rate"),
                ("werr_vs_baseline", "WERR against the hard-label baseline student"),
            ]),
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub corpus_hash: String,
    /// SHA-256 per output file.
    pub outputs: BTreeMap<String, String>,
    pub timings: Vec<JobTiming>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.config.hash() != m.config_hash {
            return Err(Error::Format(format!("{}: config hash mismatch", path.display())));
        }
        Ok(m)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Runs `experiment` and writes its CSVs, schema, checkpoints and manifest
/// into `dir`.
pub fn run_experiment(lab: &Lab, experiment: Experiment, dir: &Path) -> Result<Manifest> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    match experiment {
        Experiment::GenData => {
            let corpus_dir = dir.join("corpus");
            lab.corpus.save(&corpus_dir)?;
            let mut names: Vec<String> = std::fs::read_dir(&corpus_dir)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<std::io::Result<_>>()?;
            names.sort();
            for name in names {
                files.push((format!("corpus/{name}"), std::fs::read(corpus_dir.join(&name))?));
            }
            let mut csv = String::from("seed,utterance,split\n");
            for &seed in &lab.config.seeds {
                let split = lab.main_split(seed)?;
                for u in split.utterances() {
                    let name = match split.split_of(&u.id) {
                        Some(Split::Supervised) => "supervised",
                        Some(Split::Unsupervised) => "unsupervised",
                        Some(Split::Test) => "test",
                        None => "",
                    };
                    let _ = writeln!(csv, "{seed},{},{name}", u.id);
                }
            }
            files.push(("splits.csv".into(), csv.into_bytes()));
        }
        Experiment::Train => {
            let (rows, models) = lab.train_table()?;
            files.push(("train.csv".into(), train_csv(&rows).into_bytes()));
            for (name, m, seed) in models {
                let meta = CheckpointMeta { schedule: None, seed };
                files.push((format!("checkpoints/{name}"), net::write_checkpoint(&m, &meta).into_bytes()));
            }
        }
        Experiment::Distill => {
            let out = lab.distill_table()?;
            let rows: Vec<DistillRow> = out.iter().map(|o| o.row.clone()).collect();
            files.push(("distill.csv".into(), distill_csv(&rows).into_bytes()));
            for o in out {
                let seed = o.row.seed;
                files.push((format!("soft/seed{seed}.dlst"), o.soft_targets.encode()));
                let meta = CheckpointMeta { schedule: None, seed };
                files.push((format!("checkpoints/student-seed{seed}.ckpt"), net::write_checkpoint(&o.student, &meta).into_bytes()));
            }
        }
        Experiment::Curve => {
            let (points, models) = lab.subepoch_curve_models()?;
            files.push(("curve.csv".into(), curve_csv(&points).into_bytes()));
            for (seed, m) in models {
                let meta = CheckpointMeta { schedule: None, seed };
                files.push((format!("checkpoints/student-seed{seed}.ckpt"), net::write_checkpoint(&m, &meta).into_bytes()));
            }
        }
        Experiment::Saturation => {
            let rows = lab.saturation_study()?;
            files.push(("saturation.csv".into(), saturation_csv(&rows, &lab.config.seeds).into_bytes()));
        }
        Experiment::Grid => {
            let g = lab.low_resource_grid()?;
            files.push(("grid_points.csv".into(), curve_csv(&g.points).into_bytes()));
            files.push(("teacher_dots.csv".into(), dots_csv(&g.dots).into_bytes()));
            files.push(("risk_analysis.csv".into(), analysis_csv(&g.analyses).into_bytes()));
        }
        Experiment::Takd => {
            let (cmp, stages) = lab.takd_stages()?;
            files.push(("takd.csv".into(), cmp.to_csv().into_bytes()));
            files.push(("takd_stages.csv".into(), stages_csv(&stages).into_bytes()));
        }
    }
    files.push(("schema.json".into(), serde_json::to_vec_pretty(&schema_for(experiment, &lab.config.seeds))?));
    std::fs::create_dir_all(dir)?;
    let mut outputs = BTreeMap::new();
    for (name, bytes) in &files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_atomic(&path, bytes)?;
        outputs.insert(name.clone(), hex::encode(Sha256::digest(bytes)));
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        experiment,
        config: lab.config.clone(),
        config_hash: lab.config.hash(),
        corpus_hash: corpus_hash(&lab.corpus),
        outputs,
        timings: lab.timings(),
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Small corpus and models for fast tests and smoke runs.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.corpus.hmm = SyntheticHmm { num_states: 4, feature_dim: 3, ..Default::default() };
    c.corpus.frames_per_hour = 100.0;
    c.corpus.utterance_frames = (30, 60);
    c.corpus.supervised_hours = 4.0;
    c.corpus.unsupervised_hours = 12.0;
    c.corpus.test_hours = 4.0;
    let arch = |name: &str, window: WindowSpec, hidden: Vec<usize>| ArchSpec {
        name: name.into(),
        window,
        feature_dim: 3,
        hidden_layers: hidden,
        num_classes: 4,
        activation: Activation::Tanh,
    };
    c.archs = ArchTable {
        teacher: arch("teacher", WindowSpec::symmetric(2, 2), vec![12, 12]),
        assistant: arch("assistant", WindowSpec::causal(2, 2), vec![8]),
        student: arch("student", WindowSpec::causal(2, 2), vec![4]),
        grid_student: arch("grid-student", WindowSpec::causal(2, 2), vec![12, 12]),
    };
    let s = TrainSchedule { epochs: 3, ..Default::default() };
    c.schedules = Schedules { teacher: s.clone(), student: s };
    c.distill.sub_epochs = 3;
    c.distill.sub_epoch_hours = 4.0;
    c.saturation.levels = vec![3.0, 6.0, 12.0];
    c.grid = GridConfig {
        pool_hours: 10.0,
        sub_epoch_hours: 3.0,
        rows: vec![
            GridRow { supervised_hours: 1.0, unsupervised_hours: vec![0.0, 9.0] },
            GridRow { supervised_hours: 4.0, unsupervised_hours: vec![0.0, 3.0, 6.0] },
        ],
    };
    c.seeds = vec![1, 2, 3];
    c
}

//! Direct and step-wise (teacher-assistant) distillation chains.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, LabeledFrames, Split, UnlabeledView};
use crate::distill::{self, LabelSettings, SoftSet, SoftTargetBatch, StudentSettings};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::harness::werr;
use crate::net::{self, ArchSpec, CheckpointMeta, Dataset, ModelParams, TrainSchedule};
use crate::rng;

/// Which data feeds one link of a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPlan {
    /// Splits the previous stage labels with soft targets.
    pub soft_splits: Vec<Split>,
    /// Supervised frames join every pass. Their hard label is mixed by the
    /// link's lambda with any soft target they received, so lambda = 1 with
    /// the supervised split in `soft_splits` trains on soft targets alone.
    pub supervised_frames: bool,
}

impl Default for DataPlan {
    fn default() -> Self {
        Self { soft_splits: vec![Split::Unsupervised], supervised_frames: false }
    }
}

/// Data plans for a teacher-assistant comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TakdPlans {
    /// Links out of the teacher: supervised labels plus unsupervised soft targets.
    pub first_link: DataPlan,
    /// Links out of an assistant: its soft targets on both splits, no labels.
    pub later_links: DataPlan,
}

impl Default for TakdPlans {
    fn default() -> Self {
        Self {
            first_link: DataPlan { soft_splits: vec![Split::Unsupervised], supervised_frames: true },
            later_links: DataPlan { soft_splits: vec![Split::Unsupervised, Split::Supervised], supervised_frames: true },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSettings {
    pub label: LabelSettings,
    pub student: StudentSettings,
    pub plan: DataPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillChain {
    /// Teacher first, student last, assistants between.
    pub stages: Vec<ArchSpec>,
    pub teacher_schedule: TrainSchedule,
    /// One entry per link (`stages.len() - 1`).
    pub links: Vec<LinkSettings>,
}

impl DistillChain {
    /// Uses the same link settings everywhere.
    pub fn uniform(stages: Vec<ArchSpec>, teacher_schedule: TrainSchedule, link: LinkSettings) -> Self {
        let links = vec![link; stages.len().saturating_sub(1)];
        Self { stages, teacher_schedule, links }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        for (i, w) in self.stages.windows(2).enumerate() {
            let (a, b) = (w[0].param_count(), w[1].param_count());
            if b >= a {
                return Err(Error::validation(
                    format!("stages[{}]", i + 1),
                    format!("{} has {b} parameters, not fewer than {}'s {a}", w[1].name, w[0].name),
                ));
            }
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::validation("stages", "a chain needs at least a teacher and a student"));
        }
        if self.links.len() != self.stages.len() - 1 {
            return Err(Error::validation("links", format!("expected {} entries", self.stages.len() - 1)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate().map_err(|e| e.context(format!("stages[{i}]")))?;
        }
        self.teacher_schedule.validate()?;
        let head = &self.stages[0];
        if self.stages.iter().any(|s| s.num_classes != head.num_classes || s.feature_dim != head.feature_dim) {
            return Err(Error::validation("stages", "all stages must share num_classes and feature_dim"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageResult {
    pub name: String,
    pub params: usize,
    pub frame_error: f64,
    pub werr_vs_baseline: Option<f64>,
    pub seconds: f64,
    #[serde(skip)]
    pub model: ModelParams,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainResult {
    pub baseline_error: Option<f64>,
    pub stages: Vec<StageResult>,
}

impl ChainResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,params,frame_error,werr_vs_baseline,seconds\n");
        for s in &self.stages {
            let w = s.werr_vs_baseline.map(|w| w.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{:.3}", s.name, s.params, s.frame_error, w, s.seconds);
        }
        out
    }

    /// Writes `chain.json`, `chain.csv` and one checkpoint per stage.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("chain.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        write_atomic(&dir.join("chain.csv"), self.to_csv().as_bytes())?;
        for (i, s) in self.stages.iter().enumerate() {
            let meta = CheckpointMeta { schedule: None, seed: 0 };
            let path = dir.join(format!("stage{i}-{}.ckpt", s.name));
            write_atomic(&path, net::write_checkpoint(&s.model, &meta).as_bytes())?;
        }
        Ok(())
    }
}

/// Trains on supervised hard labels from a fresh initialisation.
pub fn train_teacher(arch: &ArchSpec, supervised: &LabeledFrames, schedule: &TrainSchedule) -> Result<ModelParams> {
    if supervised.is_empty() {
        return Err(Error::validation("supervised", "teacher training needs labeled frames"));
    }
    let init = net::init_params(arch, schedule.seed)?;
    Ok(net::train(init, &Dataset::from_labeled(supervised), schedule)?.0)
}

fn soft_views<'a>(corpus: &'a Corpus, plan: &DataPlan) -> Result<Vec<UnlabeledView<'a>>> {
    plan.soft_splits
        .iter()
        .map(|&split| match split {
            Split::Supervised => Ok(corpus.supervised()?.unlabeled()),
            Split::Unsupervised => corpus.unlabeled(split),
            Split::Test => Err(Error::Config("the test split cannot feed distillation".into())),
        })
        .collect()
}

/// Trains `student` on soft targets produced by `teacher` per `link`.
pub fn distill_link(teacher: &ModelParams, student: &ArchSpec, corpus: &Corpus, link: &LinkSettings) -> Result<ModelParams> {
    let views = soft_views(corpus, &link.plan)?;
    let mut batch: Option<SoftTargetBatch> = None;
    for view in &views {
        let part = distill::teacher_label(teacher, view, &link.label)?.batch;
        match batch.as_mut() {
            Some(b) => b.extend(&part)?,
            None => batch = Some(part),
        }
    }
    let soft = match &batch {
        Some(b) => SoftSet::build(b, &views.iter().collect::<Vec<_>>(), student)?,
        None => SoftSet::empty(student.input_dim(), 1.0),
    };
    let supervised = if link.plan.supervised_frames {
        corpus.supervised()?.stack(&student.window)
    } else {
        LabeledFrames::default()
    };
    Ok(distill::train_student(student, &supervised, &soft, &link.student)?.params)
}

fn test_error(model: &ModelParams, corpus: &Corpus) -> Result<f64> {
    net::frame_error_rate(model, &corpus.evaluation(Split::Test)?.stack(&model.arch.window))
}

/// Trains every stage in order and scores it on the test split.
pub fn run_chain(chain: &DistillChain, corpus: &Corpus, baseline_error: Option<f64>) -> Result<ChainResult> {
    chain.validate()?;
    run_unchecked(chain, corpus, baseline_error, None)
}

fn run_unchecked(
    chain: &DistillChain,
    corpus: &Corpus,
    baseline_error: Option<f64>,
    pretrained_teacher: Option<&ModelParams>,
) -> Result<ChainResult> {
    chain.validate_shape()?;
    let mut stages: Vec<StageResult> = Vec::with_capacity(chain.stages.len());
    for (i, arch) in chain.stages.iter().enumerate() {
        let start = Instant::now();
        let model = match (i, pretrained_teacher) {
            (0, Some(t)) => Ok(t.clone()),
            (0, None) => train_teacher(arch, &corpus.supervised()?.stack(&arch.window), &chain.teacher_schedule),
            _ => distill_link(&stages[i - 1].model, arch, corpus, &chain.links[i - 1]),
        }
        .map_err(|e| e.context(format!("stage {i} ({})", arch.name)))?;
        let seconds = start.elapsed().as_secs_f64();
        let frame_error = test_error(&model, corpus)?;
        stages.push(StageResult {
            name: arch.name.clone(),
            params: arch.param_count(),
            frame_error,
            werr_vs_baseline: baseline_error.map(|b| werr(b, frame_error)).transpose()?,
            seconds,
            model,
        });
    }
    Ok(ChainResult { baseline_error, stages })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSettings {
    pub teacher_schedule: TrainSchedule,
    /// Links out of the teacher (KD student, TAKD assistant).
    pub first_link: LinkSettings,
    /// Links out of an assistant.
    pub later_links: LinkSettings,
    /// Schedule for the hard-label baseline student.
    pub baseline_schedule: TrainSchedule,
}

impl Default for CompareSettings {
    fn default() -> Self {
        let plans = TakdPlans::default();
        let link = |plan: DataPlan| LinkSettings { plan, ..Default::default() };
        Self {
            teacher_schedule: TrainSchedule::default(),
            first_link: link(plans.first_link),
            later_links: link(plans.later_links),
            baseline_schedule: TrainSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub baseline_error: f64,
    pub kd_error: f64,
    pub takd_error: f64,
    pub kd_werr: f64,
    pub takd_werr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<SeedComparison>,
    /// The assistant equals the teacher, so TAKD only repeats KD.
    pub degenerate: bool,
}

impl Comparison {
    pub fn mean_kd_werr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.kd_werr))
    }

    pub fn mean_takd_werr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.takd_werr))
    }

    /// Rows baseline/kd/takd, one column per seed plus the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for r in &self.rows {
            let _ = write!(out, ",seed_{}", r.seed);
        }
        out.push_str(",mean\n");
        let rows: [(&str, fn(&SeedComparison) -> f64); 5] = [
            ("baseline_error", |r| r.baseline_error),
            ("kd_error", |r| r.kd_error),
            ("takd_error", |r| r.takd_error),
            ("kd_werr", |r| r.kd_werr),
            ("takd_werr", |r| r.takd_werr),
        ];
        for (name, get) in rows {
            out.push_str(name);
            for r in &self.rows {
                let _ = write!(out, ",{}", get(r));
            }
            let _ = writeln!(out, ",{}", mean(self.rows.iter().map(get)));
        }
        if self.degenerate {
            out.push_str("# degenerate: assistant architecture equals the teacher\n");
        }
        out
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Schedule seed for a role within one comparison seed; models with the
/// same role name share their initialisation.
pub fn role_seed(seed: u64, role: &str) -> u64 {
    rng::derive_seed(seed, role, 0)
}

/// For one seed: the hard-label baseline student, then KD (teacher to
/// student) and TAKD (teacher to assistant to student) sharing one teacher.
pub fn compare_seed(
    corpus: &Corpus,
    archs: [&ArchSpec; 3],
    settings: &CompareSettings,
    seed: u64,
) -> Result<(SeedComparison, [ChainResult; 2])> {
    let [teacher, assistant, student] = archs;
    let with_seed = |link: &LinkSettings, role: &ArchSpec| {
        let mut l = link.clone();
        l.student.schedule.seed = role_seed(seed, &role.name);
        l
    };
    let baseline_schedule = settings.baseline_schedule.with_seed(role_seed(seed, &student.name));
    let baseline = train_teacher(student, &corpus.supervised()?.stack(&student.window), &baseline_schedule)
        .map_err(|e| e.context("baseline"))?;
    let baseline_error = test_error(&baseline, corpus)?;
    let teacher_schedule = settings.teacher_schedule.with_seed(role_seed(seed, &teacher.name));
    let teacher_model = train_teacher(teacher, &corpus.supervised()?.stack(&teacher.window), &teacher_schedule)
        .map_err(|e| e.context(format!("stage 0 ({})", teacher.name)))?;
    let kd = DistillChain {
        stages: vec![teacher.clone(), student.clone()],
        teacher_schedule: teacher_schedule.clone(),
        links: vec![with_seed(&settings.first_link, student)],
    };
    let takd = DistillChain {
        stages: vec![teacher.clone(), assistant.clone(), student.clone()],
        teacher_schedule,
        links: vec![with_seed(&settings.first_link, assistant), with_seed(&settings.later_links, student)],
    };
    let degenerate = assistant == teacher;
    if !degenerate {
        kd.validate()?;
        takd.validate()?;
    }
    let kd = run_unchecked(&kd, corpus, Some(baseline_error), Some(&teacher_model))?;
    let takd = run_unchecked(&takd, corpus, Some(baseline_error), Some(&teacher_model))?;
    let last = |c: &ChainResult| c.stages.last().map(|s| (s.frame_error, s.werr_vs_baseline.unwrap_or(0.0))).unwrap();
    let (kd_error, kd_werr) = last(&kd);
    let (takd_error, takd_werr) = last(&takd);
    Ok((SeedComparison { seed, baseline_error, kd_error, takd_error, kd_werr, takd_werr }, [kd, takd]))
}

/// KD versus TAKD over `seeds` (at least three).
pub fn compare_kd_takd(
    corpus: &Corpus,
    teacher: &ArchSpec,
    assistant: &ArchSpec,
    student: &ArchSpec,
    settings: &CompareSettings,
    seeds: &[u64],
) -> Result<Comparison> {
    if seeds.len() < 3 {
        return Err(Error::validation("seeds", "a comparison needs at least three seeds"));
    }
    let rows = seeds
        .iter()
        .map(|&s| compare_seed(corpus, [teacher, assistant, student], settings, s).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { rows, degenerate: assistant == teacher })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, split_corpus, HmmSpec, WindowSpec};
    use crate::net::Activation;

    fn arch(name: &str, window: WindowSpec, hidden: &[usize]) -> ArchSpec {
        ArchSpec {
            name: name.into(),
            window,
            feature_dim: 2,
            hidden_layers: hidden.to_vec(),
            num_classes: 2,
            activation: Activation::Tanh,
        }
    }

    fn corpus() -> Corpus {
        let c = generate_corpus(&crate::distill::tests::two_state(), 40, (30, 50), 8).unwrap();
        let h = c.hours_equivalent();
        split_corpus(&c, 0.2 * h, 0.5 * h, 0.3 * h, 2).unwrap()
    }

    fn link() -> LinkSettings {
        let mut l = LinkSettings::default();
        l.label.k = 2;
        l.student.schedule = TrainSchedule { epochs: 2, ..Default::default() };
        l.student.sub_epoch_hours = 1e-4;
        l
    }

    fn three() -> Vec<ArchSpec> {
        vec![
            arch("teacher", WindowSpec::symmetric(2, 1), &[8, 8]),
            arch("assistant", WindowSpec::causal(2, 1), &[6]),
            arch("student", WindowSpec::causal(2, 1), &[3]),
        ]
    }

    fn schedule() -> TrainSchedule {
        TrainSchedule { epochs: 3, ..Default::default() }
    }

    #[test]
    fn chain_validation() {
        let ok = DistillChain::uniform(three(), schedule(), link());
        ok.validate().unwrap();
        let mut flat = ok.clone();
        flat.stages[2] = flat.stages[1].clone();
        assert!(matches!(flat.validate(), Err(Error::Validation { .. })));
        let mut short = ok.clone();
        short.stages.truncate(1);
        short.links.clear();
        assert!(short.validate().is_err());
        let mut links = ok;
        links.links.pop();
        assert!(links.validate().is_err());
    }

    #[test]
    fn two_stage_chain_is_direct_distillation() {
        let c = corpus();
        let stages = vec![three()[0].clone(), three()[2].clone()];
        let chain = DistillChain::uniform(stages.clone(), schedule(), link());
        let result = run_chain(&chain, &c, None).unwrap();
        assert_eq!(result.stages.len(), 2);

        let teacher = train_teacher(&stages[0], &c.supervised().unwrap().stack(&stages[0].window), &schedule()).unwrap();
        assert_eq!(result.stages[0].model, teacher);
        let view = c.unlabeled(Split::Unsupervised).unwrap();
        let batch = distill::teacher_label(&teacher, &view, &chain.links[0].label).unwrap().batch;
        let soft = SoftSet::build(&batch, &[&view], &stages[1]).unwrap();
        let direct = distill::train_student(&stages[1], &LabeledFrames::default(), &soft, &chain.links[0].student).unwrap();
        assert_eq!(result.stages[1].model, direct.params);
    }

    #[test]
    fn three_stage_chain_checkpoints_reload() {
        let c = corpus();
        let chain = DistillChain::uniform(three(), schedule(), link());
        let result = run_chain(&chain, &c, Some(0.5)).unwrap();
        assert_eq!(result.stages.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["teacher", "assistant", "student"]);
        for s in &result.stages {
            assert_eq!(s.werr_vs_baseline, Some(werr(0.5, s.frame_error).unwrap()));
        }
        let dir = tempfile::tempdir().unwrap();
        result.write(dir.path()).unwrap();
        for (i, s) in result.stages.iter().enumerate() {
            let text = std::fs::read_to_string(dir.path().join(format!("stage{i}-{}.ckpt", s.name))).unwrap();
            let (model, _) = net::read_checkpoint(&text).unwrap();
            assert_eq!(test_error(&model, &c).unwrap(), s.frame_error);
        }
        let csv = std::fs::read_to_string(dir.path().join("chain.csv")).unwrap();
        assert!(csv.starts_with("stage,params,frame_error,werr_vs_baseline,seconds\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn missing_test_split_in_plan_is_a_config_error() {
        let c = corpus();
        let mut l = link();
        l.plan.soft_splits = vec![Split::Test];
        let chain = DistillChain::uniform(vec![three()[0].clone(), three()[2].clone()], schedule(), l);
        assert_eq!(run_chain(&chain, &c, None).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn comparison_shape_and_degenerate_flag() {
        let c = corpus();
        let a = three();
        let settings = CompareSettings { teacher_schedule: schedule(), first_link: link(), later_links: link(), baseline_schedule: schedule() };
        assert!(compare_kd_takd(&c, &a[0], &a[1], &a[2], &settings, &[1, 2]).is_err());
        let cmp = compare_kd_takd(&c, &a[0], &a[1], &a[2], &settings, &[1, 2, 3]).unwrap();
        assert!(!cmp.degenerate);
        let csv = cmp.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "row,seed_1,seed_2,seed_3,mean");
        assert_eq!(lines.len(), 6);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));

        let same = compare_kd_takd(&c, &a[0], &a[0], &a[2], &settings, &[1, 2, 3]).unwrap();
        assert!(same.degenerate);
        assert!(same.to_csv().contains("degenerate"));
    }

    #[test]
    fn degenerate_single_state_teacher_is_perfect() {
        let hmm = HmmSpec {
            num_states: 2,
            feature_dim: 2,
            transition: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            emission_means: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            emission_stddevs: vec![vec![1e-15, 1e-15], vec![1e-15, 1e-15]],
            self_loop_bias: 0.5,
        };
        let c = generate_corpus(&hmm, 5, (10, 20), 1).unwrap();
        let h = c.hours_equivalent();
        let c = split_corpus(&c, h, 0.0, 0.0, 0).unwrap();
        let sup = c.supervised().unwrap().stack(&WindowSpec::identity());
        let a = arch("t", WindowSpec::identity(), &[2]);
        let t = train_teacher(&a, &sup, &schedule()).unwrap();
        assert_eq!(net::frame_error_rate(&t, &sup).unwrap(), 0.0);
        assert_eq!(t, train_teacher(&a, &sup, &schedule()).unwrap());
    }
}

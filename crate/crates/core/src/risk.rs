//! Binary teacher/student risks: the acc/err partition, the decomposition
//! of student risk over it, and the condition under which a student beats
//! its teacher.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledView;
use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::par::Exec;
use crate::rng;

pub const MAX_EXHAUSTIVE_N: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarySample {
    pub x_id: u64,
    pub y: i8,
}

impl BinarySample {
    pub fn new(x_id: u64, y: i8) -> Result<Self> {
        check_sign("y", y)?;
        Ok(Self { x_id, y })
    }
}

fn check_sign(field: &str, v: i8) -> Result<()> {
    if v == 1 || v == -1 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("{v} is not in {{-1, +1}}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub name: String,
    pub values: BTreeMap<u64, i8>,
}

impl Labeling {
    pub fn new(name: &str, values: impl IntoIterator<Item = (u64, i8)>) -> Result<Self> {
        let values: BTreeMap<u64, i8> = values.into_iter().collect();
        for v in values.values() {
            check_sign(name, *v)?;
        }
        Ok(Self { name: name.to_owned(), values })
    }

    /// Labels `samples` in order with `values`.
    pub fn over(name: &str, samples: &[BinarySample], values: &[i8]) -> Result<Self> {
        if samples.len() != values.len() {
            return Err(Error::Shape { what: "labeling", expected: samples.len(), got: values.len() });
        }
        Self::new(name, samples.iter().map(|s| s.x_id).zip(values.iter().copied()))
    }

    pub fn get(&self, x_id: u64) -> Result<i8> {
        self.values
            .get(&x_id)
            .copied()
            .ok_or_else(|| Error::validation(self.name.clone(), format!("no label for sample {x_id}")))
    }

    pub fn negated(&self, name: &str) -> Self {
        Self { name: name.to_owned(), values: self.values.iter().map(|(k, v)| (*k, -v)).collect() }
    }
}

/// Builds samples `0..n` from `y`.
pub fn samples_from(y: &[i8]) -> Result<Vec<BinarySample>> {
    y.iter().enumerate().map(|(i, v)| BinarySample::new(i as u64, *v)).collect()
}

pub fn empirical_risk(h: &Labeling, samples: &[BinarySample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("samples", "must not be empty"));
    }
    let mut wrong = 0usize;
    for s in samples {
        if h.get(s.x_id)? != s.y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / samples.len() as f64)
}

/// Disagreement rate between student and teacher on `subset`; `None` for an
/// empty subset.
pub fn ts_risk(student: &Labeling, teacher: &Labeling, subset: &[BinarySample]) -> Result<Option<f64>> {
    if subset.is_empty() {
        return Ok(None);
    }
    let mut differ = 0usize;
    for s in subset {
        if student.get(s.x_id)? != teacher.get(s.x_id)? {
            differ += 1;
        }
    }
    Ok(Some(differ as f64 / subset.len() as f64))
}

/// Splits samples into those the teacher gets right and those it gets wrong,
/// preserving order.
pub fn partition(teacher: &Labeling, samples: &[BinarySample]) -> Result<(Vec<BinarySample>, Vec<BinarySample>)> {
    let mut acc = Vec::new();
    let mut err = Vec::new();
    for s in samples {
        if teacher.get(s.x_id)? == s.y {
            acc.push(*s);
        } else {
            err.push(*s);
        }
    }
    Ok((acc, err))
}

/// Integer counts from which every risk is derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n: u64,
    /// Samples the teacher classifies correctly.
    pub acc: u64,
    /// Samples the teacher gets wrong.
    pub err: u64,
    /// Student/teacher disagreements inside `acc`.
    pub acc_disagree: u64,
    /// Student/teacher disagreements inside `err`.
    pub err_disagree: u64,
}

impl Counts {
    pub fn from_labelings(teacher: &Labeling, student: &Labeling, samples: &[BinarySample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("samples", "must not be empty"));
        }
        let mut c = Counts { n: samples.len() as u64, acc: 0, err: 0, acc_disagree: 0, err_disagree: 0 };
        for s in samples {
            let t = teacher.get(s.x_id)?;
            let differ = student.get(s.x_id)? != t;
            if t == s.y {
                c.acc += 1;
                c.acc_disagree += u64::from(differ);
            } else {
                c.err += 1;
                c.err_disagree += u64::from(differ);
            }
        }
        Ok(c)
    }

    /// Counts for labelings packed as bitmasks over `n` samples, bit set
    /// meaning +1.
    pub fn from_masks(n: u32, y: u64, teacher: u64, student: u64) -> Self {
        let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        let err_mask = (y ^ teacher) & full;
        let acc_mask = !err_mask & full;
        let disagree = (teacher ^ student) & full;
        Counts {
            n: u64::from(n),
            acc: u64::from(acc_mask.count_ones()),
            err: u64::from(err_mask.count_ones()),
            acc_disagree: u64::from((disagree & acc_mask).count_ones()),
            err_disagree: u64::from((disagree & err_mask).count_ones()),
        }
    }

    fn student_errors(&self) -> u64 {
        self.acc_disagree + self.err - self.err_disagree
    }

    fn subset_risk(part: u64, whole: u64) -> f64 {
        if whole == 0 {
            0.0
        } else {
            part as f64 / whole as f64
        }
    }

    pub fn report(&self) -> RiskReport {
        let r_teacher = self.err as f64 / self.n as f64;
        let r_acc = Self::subset_risk(self.acc_disagree, self.acc);
        let r_err = Self::subset_risk(self.err_disagree, self.err);
        RiskReport {
            r_teacher,
            r_student: self.student_errors() as f64 / self.n as f64,
            r_acc,
            r_err,
            acc_size: self.acc,
            err_size: self.err,
            threshold: (self.err > 0).then(|| self.acc as f64 / self.err as f64),
            ratio: (self.acc_disagree > 0 && self.err > 0)
                .then(|| (self.err_disagree * self.acc) as f64 / (self.err * self.acc_disagree) as f64),
            student_beats_teacher: self.student_errors() <= self.err,
        }
    }

    fn rational(part: u64, whole: u64) -> Ratio<i128> {
        if whole == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(part as i128, whole as i128)
        }
    }

    /// Student risk and the decomposed right-hand side as exact rationals.
    pub fn lemma_sides(&self) -> (Ratio<i128>, Ratio<i128>) {
        let r_t = Self::rational(self.err, self.n);
        let r_acc = Self::rational(self.acc_disagree, self.acc);
        let r_err = Self::rational(self.err_disagree, self.err);
        let one = Ratio::from_integer(1);
        let lhs = Self::rational(self.student_errors(), self.n);
        (lhs, r_t * (one - r_acc - r_err) + r_acc)
    }

    /// `r_acc <= r_teacher * (r_acc + r_err)`, evaluated exactly.
    pub fn division_free_holds(&self) -> bool {
        let r_t = Self::rational(self.err, self.n);
        let r_acc = Self::rational(self.acc_disagree, self.acc);
        let r_err = Self::rational(self.err_disagree, self.err);
        r_acc <= r_t * (r_acc + r_err)
    }

    /// Whether the lemma identity and the theorem biconditional hold, both
    /// exactly and in floating point.
    pub fn check(&self) -> Check {
        let (lhs, rhs) = self.lemma_sides();
        let r = self.report();
        let float_rhs = r.r_teacher * (1.0 - r.r_acc - r.r_err) + r.r_acc;
        let lemma = lhs == rhs && (r.r_student - float_rhs).abs() < 1e-12;
        let beats = self.student_errors() <= self.err;
        let theorem = beats == self.division_free_holds() && beats == r.student_beats_teacher;
        let forms_agree = match (r.ratio, r.threshold) {
            (Some(ratio), Some(threshold)) => (ratio >= threshold) == beats,
            _ => true,
        };
        Check { lemma, theorem: theorem && forms_agree }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Check {
    pub lemma: bool,
    pub theorem: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub r_teacher: f64,
    pub r_student: f64,
    /// Student/teacher disagreement on samples the teacher gets right.
    pub r_acc: f64,
    /// Student/teacher disagreement on samples the teacher gets wrong.
    pub r_err: f64,
    pub acc_size: u64,
    pub err_size: u64,
    /// `1 / r_teacher - 1`, absent for a perfect teacher.
    pub threshold: Option<f64>,
    /// `r_err / r_acc`, absent when undefined.
    pub ratio: Option<f64>,
    pub student_beats_teacher: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decomposition {
    pub lhs: f64,
    pub rhs: f64,
    pub report: RiskReport,
}

pub fn decomposition_check(teacher: &Labeling, student: &Labeling, samples: &[BinarySample]) -> Result<Decomposition> {
    let counts = Counts::from_labelings(teacher, student, samples)?;
    let report = counts.report();
    let lhs = empirical_risk(student, samples)?;
    let rhs = report.r_teacher * (1.0 - report.r_acc - report.r_err) + report.r_acc;
    debug_assert!(counts.check().lemma);
    Ok(Decomposition { lhs, rhs, report })
}

/// Evaluates both sides of the student-beats-teacher condition. Fails only
/// if the two sides disagree, which would be an arithmetic bug.
pub fn truth_over_teacher(teacher: &Labeling, student: &Labeling, samples: &[BinarySample]) -> Result<RiskReport> {
    let counts = Counts::from_labelings(teacher, student, samples)?;
    let report = counts.report();
    let direct = empirical_risk(student, samples)? <= empirical_risk(teacher, samples)?;
    if direct != counts.division_free_holds() || !counts.check().theorem {
        return Err(Error::Data(format!("risk biconditional failed for {counts:?}")));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifySummary {
    pub n: usize,
    pub triples: u64,
    pub lemma_violations: u64,
    pub theorem_violations: u64,
    pub seconds: f64,
}

impl fmt::Display for VerifySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} triples={} lemma_violations={} theorem_violations={} seconds={:.3}",
            self.n, self.triples, self.lemma_violations, self.theorem_violations, self.seconds
        )
    }
}

/// Calls `f` with the counts of every `(y, teacher, student)` labeling
/// triple over `n` samples whose ground truth is `y`.
pub fn for_each_with_truth(n: usize, y: u64, mut f: impl FnMut(Counts)) {
    let size = 1u64 << n;
    for t in 0..size {
        for s in 0..size {
            f(Counts::from_masks(n as u32, y, t, s));
        }
    }
}

/// Checks the lemma and the theorem on all `8^n` triples.
pub fn exhaustive_verify(n: usize) -> Result<VerifySummary> {
    exhaustive_verify_with(n, Exec::default())
}

pub fn exhaustive_verify_with(n: usize, exec: Exec) -> Result<VerifySummary> {
    if n == 0 {
        return Err(Error::validation("n", "must be at least 1"));
    }
    if n > MAX_EXHAUSTIVE_N {
        return Err(Error::Resource(format!(
            "exhaustive verification over n={n} samples needs 8^{n} triples; limit is n={MAX_EXHAUSTIVE_N}"
        )));
    }
    let start = Instant::now();
    let shards = exec.map_range(1usize << n, |y| {
        let (mut lemma, mut theorem, mut triples) = (0u64, 0u64, 0u64);
        for_each_with_truth(n, y as u64, |c| {
            let check = c.check();
            triples += 1;
            lemma += u64::from(!check.lemma);
            theorem += u64::from(!check.theorem);
        });
        (triples, lemma, theorem)
    });
    let (triples, lemma_violations, theorem_violations) =
        shards.into_iter().fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok(VerifySummary { n, triples, lemma_violations, theorem_violations, seconds: start.elapsed().as_secs_f64() })
}

/// Checks the lemma and the theorem on `count` uniformly drawn triples over
/// `n` samples (at most 64).
pub fn random_verify(n: usize, count: u64, seed: u64) -> Result<VerifySummary> {
    if n == 0 || n > 64 {
        return Err(Error::validation("n", "random verification needs 1 <= n <= 64"));
    }
    let start = Instant::now();
    let mut rng = rng::stream(seed, "risk-verify", n as u64);
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let (mut lemma_violations, mut theorem_violations) = (0u64, 0u64);
    for _ in 0..count {
        let (y, t, s) = (rng.random::<u64>() & full, rng.random::<u64>() & full, rng.random::<u64>() & full);
        let check = Counts::from_masks(n as u32, y, t, s).check();
        lemma_violations += u64::from(!check.lemma);
        theorem_violations += u64::from(!check.theorem);
    }
    Ok(VerifySummary { n, triples: count, lemma_violations, theorem_violations, seconds: start.elapsed().as_secs_f64() })
}

/// Ground truth, teacher and student as one-vs-rest labelings.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryRun {
    pub samples: Vec<BinarySample>,
    pub truth: Labeling,
    pub teacher: Labeling,
    pub student: Labeling,
}

/// Maps a multiclass test set to `+1` iff the class equals `target_class`
/// for the labels and each model's argmax. Each model sees its own window.
pub fn binarize_run(student: &ModelParams, teacher: &ModelParams, test: &LabeledView<'_>, target_class: usize) -> Result<BinaryRun> {
    let classes = teacher.arch.num_classes;
    if student.arch.num_classes != classes {
        return Err(Error::Shape { what: "student num_classes", expected: classes, got: student.arch.num_classes });
    }
    if target_class >= classes {
        return Err(Error::validation("target_class", format!("must be below {classes}")));
    }
    let t_frames = test.stack(&teacher.arch.window);
    let s_frames = test.stack(&student.arch.window);
    if t_frames.frames.refs != s_frames.frames.refs {
        return Err(Error::Data("teacher and student windows select different frames".into()));
    }
    let sign = |c: usize| if c == target_class { 1i8 } else { -1 };
    let y: Vec<i8> = t_frames.labels.iter().map(|&c| sign(c)).collect();
    let samples = samples_from(&y)?;
    let t: Vec<i8> = teacher.predict_rows(&t_frames.frames)?.into_iter().map(sign).collect();
    let s: Vec<i8> = student.predict_rows(&s_frames.frames)?.into_iter().map(sign).collect();
    Ok(BinaryRun {
        truth: Labeling::over("truth", &samples, &y)?,
        teacher: Labeling::over(&teacher.arch.name, &samples, &t)?,
        student: Labeling::over(&student.arch.name, &samples, &s)?,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ArchSpec};
    use crate::datagen::{generate_corpus, split_corpus, Split, WindowSpec};
    use proptest::prelude::*;

    const P: i8 = 1;
    const M: i8 = -1;

    fn worked() -> (Vec<BinarySample>, Labeling, Labeling) {
        let samples = samples_from(&[P, P, M, M]).unwrap();
        let t = Labeling::over("t", &samples, &[P, P, M, P]).unwrap();
        let s = Labeling::over("s", &samples, &[P, M, M, M]).unwrap();
        (samples, t, s)
    }

    fn truth(samples: &[BinarySample]) -> Labeling {
        Labeling::new("y", samples.iter().map(|s| (s.x_id, s.y))).unwrap()
    }

    #[test]
    fn empirical_risk_cases() {
        let (samples, t, _) = worked();
        assert_eq!(empirical_risk(&t, &samples).unwrap(), 0.25);
        let y = truth(&samples);
        assert_eq!(empirical_risk(&y, &samples).unwrap(), 0.0);
        assert_eq!(empirical_risk(&y.negated("-y"), &samples).unwrap(), 1.0);
        assert!(empirical_risk(&y, &[]).is_err());
        let partial = Labeling::new("p", [(0, P)]).unwrap();
        assert!(empirical_risk(&partial, &samples).is_err());
        assert!(BinarySample::new(0, 0).is_err());
        assert!(Labeling::new("bad", [(0, 2)]).is_err());
    }

    #[test]
    fn ts_risk_cases() {
        let (samples, t, _) = worked();
        assert_eq!(ts_risk(&t, &t, &samples).unwrap(), Some(0.0));
        assert_eq!(ts_risk(&t.negated("n"), &t, &samples).unwrap(), Some(1.0));
        let one_off = Labeling::over("o", &samples, &[P, P, M, M]).unwrap();
        assert_eq!(ts_risk(&one_off, &t, &samples).unwrap(), Some(0.25));
        assert_eq!(ts_risk(&one_off, &t, &[]).unwrap(), None);
    }

    #[test]
    fn partition_of_worked_example() {
        let (samples, t, _) = worked();
        let (acc, err) = partition(&t, &samples).unwrap();
        assert_eq!(acc.iter().map(|s| s.x_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(err.iter().map(|s| s.x_id).collect::<Vec<_>>(), vec![3]);
        let (_, none) = partition(&truth(&samples), &samples).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn decomposition_of_worked_example() {
        let (samples, t, s) = worked();
        let d = decomposition_check(&t, &s, &samples).unwrap();
        assert_eq!(d.report.r_teacher, 0.25);
        assert!((d.report.r_acc - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.report.r_err, 1.0);
        assert!((d.lhs - 0.25).abs() < 1e-15 && (d.rhs - 0.25).abs() < 1e-12);
        let again = decomposition_check(&t, &t, &samples).unwrap();
        assert_eq!(again.lhs, again.report.r_teacher);
        let y = truth(&samples);
        let perfect = decomposition_check(&y, &s, &samples).unwrap();
        assert_eq!(perfect.lhs, perfect.report.r_acc);
        assert_eq!(perfect.rhs, perfect.report.r_acc);
    }

    #[test]
    fn theorem_boundary_case() {
        let (samples, t, s) = worked();
        let r = truth_over_teacher(&t, &s, &samples).unwrap();
        assert_eq!(r.r_student, r.r_teacher);
        assert_eq!(r.ratio, Some(3.0));
        assert_eq!(r.threshold, Some(3.0));
        assert!(r.student_beats_teacher);
    }

    #[test]
    fn theorem_student_equals_teacher() {
        let (samples, t, _) = worked();
        let r = truth_over_teacher(&t, &t, &samples).unwrap();
        assert_eq!(r.r_acc, 0.0);
        assert_eq!(r.ratio, None);
        assert!(r.student_beats_teacher);
    }

    #[test]
    fn student_flipping_a_bad_teacher() {
        let samples = samples_from(&[P, P, M, M]).unwrap();
        let t = Labeling::over("t", &samples, &[M, M, P, M]).unwrap();
        let s = t.negated("s");
        let r = truth_over_teacher(&t, &s, &samples).unwrap();
        assert_eq!(r.r_teacher, 0.75);
        assert_eq!(r.r_student, 0.25);
        assert!(r.student_beats_teacher);
        // Flipping every label disagrees everywhere, so both sub-risks are 1.
        assert_eq!((r.r_acc, r.r_err), (1.0, 1.0));
        assert_eq!(r.ratio, Some(1.0));
        assert!((r.threshold.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // The unbounded ratio arises when the student is the ground truth.
        let best = truth_over_teacher(&t, &truth(&samples), &samples).unwrap();
        assert_eq!(best.r_acc, 0.0);
        assert_eq!(best.ratio, None);
        assert!(best.student_beats_teacher);
    }

    #[test]
    fn exhaustive_small_n() {
        let one = exhaustive_verify(1).unwrap();
        assert_eq!((one.triples, one.lemma_violations, one.theorem_violations), (8, 0, 0));
        let four = exhaustive_verify(4).unwrap();
        assert_eq!((four.triples, four.lemma_violations, four.theorem_violations), (4096, 0, 0));
        assert!(four.to_string().starts_with("n=4 triples=4096 lemma_violations=0 theorem_violations=0 seconds="));
        assert!(matches!(exhaustive_verify(9), Err(Error::Resource(_))));
        assert_eq!(exhaustive_verify(9).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn exhaustive_n6_under_five_seconds() {
        let six = exhaustive_verify(6).unwrap();
        assert_eq!((six.triples, six.lemma_violations, six.theorem_violations), (262144, 0, 0));
        assert!(six.seconds < 5.0, "{six}");
    }

    #[test]
    fn parallel_and_sequential_enumeration_agree() {
        let a = exhaustive_verify_with(5, Exec::Parallel).unwrap();
        let b = exhaustive_verify_with(5, Exec::Sequential).unwrap();
        assert_eq!((a.triples, a.lemma_violations, a.theorem_violations), (b.triples, b.lemma_violations, b.theorem_violations));
    }

    #[test]
    fn good_teacher_needs_ratio_above_one() {
        for n in 1..=6 {
            for y in 0..1u64 << n {
                for_each_with_truth(n, y, |c| {
                    let r = c.report();
                    if r.r_teacher < 0.5 && r.r_student <= r.r_teacher && r.r_acc > 0.0 {
                        assert!(r.ratio.unwrap() > 1.0, "{c:?}");
                    }
                });
            }
        }
    }

    #[test]
    fn mask_counts_match_labelings() {
        let (samples, t, s) = worked();
        let from_maps = Counts::from_labelings(&t, &s, &samples).unwrap();
        let mask = |v: &[i8]| v.iter().enumerate().filter(|(_, x)| **x == P).map(|(i, _)| 1u64 << i).sum::<u64>();
        assert_eq!(from_maps, Counts::from_masks(4, mask(&[P, P, M, M]), mask(&[P, P, M, P]), mask(&[P, M, M, M])));
    }

    fn tiny_arch(name: &str, window: WindowSpec, hidden: usize) -> ArchSpec {
        ArchSpec {
            name: name.into(),
            window,
            feature_dim: 2,
            hidden_layers: vec![hidden],
            num_classes: 2,
            activation: crate::net::Activation::Tanh,
        }
    }

    #[test]
    fn binarize_cases() {
        let corpus = generate_corpus(&crate::distill::tests::two_state(), 6, (20, 30), 1).unwrap();
        let h = corpus.hours_equivalent();
        let corpus = split_corpus(&corpus, 0.0, 0.0, h, 0).unwrap();
        let test = corpus.evaluation(Split::Test).unwrap();
        let t = init_params(&tiny_arch("t", WindowSpec::symmetric(1, 1), 3), 1).unwrap();
        let s = init_params(&tiny_arch("s", WindowSpec::causal(1, 1), 2), 2).unwrap();
        let same = binarize_run(&t, &t, &test, 1).unwrap();
        assert_eq!(same.teacher.values, same.student.values);
        let run = binarize_run(&s, &t, &test, 1).unwrap();
        let labels = test.stack(&WindowSpec::symmetric(1, 1)).labels;
        let positives = run.truth.values.values().filter(|v| **v == 1).count();
        assert_eq!(positives, labels.iter().filter(|c| **c == 1).count());
        assert!(binarize_run(&s, &t, &test, 2).is_err());
        truth_over_teacher(&run.teacher, &run.student, &run.samples).unwrap();
    }

    #[test]
    fn absent_class_gives_all_negative_truth() {
        let samples = samples_from(&[M, M, M]).unwrap();
        assert!(truth(&samples).values.values().all(|v| *v == M));
    }

    #[test]
    fn random_verify_counts_and_rejects_bad_n() {
        let s = random_verify(64, 2000, 3).unwrap();
        assert_eq!((s.triples, s.lemma_violations, s.theorem_violations), (2000, 0, 0));
        assert_eq!(random_verify(5, 100, 9).unwrap().triples, 100);
        assert!(random_verify(0, 1, 0).is_err());
        assert!(random_verify(65, 1, 0).is_err());
    }

    fn triple(max_n: usize) -> impl Strategy<Value = (u32, u64, u64, u64)> {
        (1..=max_n as u32).prop_flat_map(|n| {
            let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
            (Just(n), 0..=full, 0..=full, 0..=full)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100_000))]
        #[test]
        fn lemma_holds_on_random_triples((n, y, t, s) in triple(64)) {
            let c = Counts::from_masks(n, y, t, s);
            prop_assert!(c.check().lemma);
            prop_assert_eq!(c.acc + c.err, c.n);
        }
    }

    proptest! {
        #[test]
        fn partition_is_a_disjoint_cover(y in proptest::collection::vec(prop_oneof![Just(P), Just(M)], 1..40), seed in any::<u64>()) {
            let samples = samples_from(&y).unwrap();
            let t: Vec<i8> = (0..y.len()).map(|i| if (seed >> (i % 64)) & 1 == 1 { P } else { M }).collect();
            let teacher = Labeling::over("t", &samples, &t).unwrap();
            let (acc, err) = partition(&teacher, &samples).unwrap();
            prop_assert_eq!(acc.len() + err.len(), samples.len());
            prop_assert!(acc.iter().all(|a| !err.contains(a)));
        }

        #[test]
        fn ratio_and_division_free_forms_agree((n, y, t, s) in triple(64)) {
            let c = Counts::from_masks(n, y, t, s);
            let r = c.report();
            if let (Some(ratio), Some(threshold)) = (r.ratio, r.threshold) {
                prop_assert_eq!(ratio >= threshold, c.division_free_holds());
            }
            prop_assert!(c.check().theorem);
        }
    }
}

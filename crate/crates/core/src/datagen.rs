//! Synthetic frame corpora: a Markov state chain with Gaussian emissions
//! stands in for speech features, with state ids playing the role of senone
//! labels.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::par::Exec;
use crate::rng::{self, fnv1a64};

/// Raw frames per hour: one frame every 10 ms, before subsampling.
pub const FRAMES_PER_HOUR: f64 = 100.0 * 3600.0;

const ROW_SUM_TOL: f64 = 1e-12;
const UTTERANCE_MAGIC: &[u8; 4] = b"DLAB";
const UTTERANCE_VERSION: u8 = 1;
const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmSpec {
    pub num_states: usize,
    pub feature_dim: usize,
    /// Row-stochastic, `num_states` rows of `num_states` entries.
    pub transition: Vec<Vec<f64>>,
    pub emission_means: Vec<Vec<f64>>,
    pub emission_stddevs: Vec<Vec<f64>>,
    pub self_loop_bias: f64,
}

impl HmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_states < 2 {
            return Err(Error::validation("num_states", "must be at least 2"));
        }
        if self.feature_dim < 1 {
            return Err(Error::validation("feature_dim", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.self_loop_bias) {
            return Err(Error::validation("self_loop_bias", "must lie in [0, 1)"));
        }
        check_matrix_shape("transition", &self.transition, self.num_states, self.num_states)?;
        for (i, row) in self.transition.iter().enumerate() {
            if let Some(j) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::validation(
                    format!("transition[{i}][{j}]"),
                    "entries must be finite and non-negative",
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(
                    format!("transition[{i}]"),
                    format!("row sums to {sum}, not 1"),
                ));
            }
        }
        check_matrix_shape("emission_means", &self.emission_means, self.num_states, self.feature_dim)?;
        for (i, row) in self.emission_means.iter().enumerate() {
            if row.iter().any(|m| !m.is_finite()) {
                return Err(Error::validation(format!("emission_means[{i}]"), "must be finite"));
            }
        }
        check_matrix_shape(
            "emission_stddevs",
            &self.emission_stddevs,
            self.num_states,
            self.feature_dim,
        )?;
        for (i, row) in self.emission_stddevs.iter().enumerate() {
            if let Some(j) = row.iter().position(|s| !s.is_finite() || *s <= 0.0) {
                return Err(Error::validation(
                    format!("emission_stddevs[{i}][{j}]"),
                    "must be finite and positive",
                ));
            }
        }
        let closed = closed_class_count(&self.transition);
        if closed != 1 {
            return Err(Error::validation(
                "transition",
                format!("chain has {closed} closed classes; a unique stationary distribution needs exactly one"),
            ));
        }
        Ok(())
    }

    /// Stationary distribution by solving `pi (P - I) = 0, sum(pi) = 1`.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.num_states;
        // Rows of A are equations; A = P^T - I with the last row replaced by ones.
        let mut a = vec![vec![0.0; n + 1]; n];
        for (i, row) in a.iter_mut().enumerate().take(n - 1) {
            for (j, cell) in row.iter_mut().enumerate().take(n) {
                *cell = self.transition[j][i] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for cell in a[n - 1].iter_mut().take(n) {
            *cell = 1.0;
        }
        a[n - 1][n] = 1.0;
        let mut pi = solve_augmented(a).ok_or_else(|| {
            Error::validation("transition", "singular stationary system")
        })?;
        for p in pi.iter_mut() {
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        Ok(pi)
    }
}

fn check_matrix_shape(field: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows {
        return Err(Error::validation(field, format!("expected {rows} rows, got {}", m.len())));
    }
    if let Some(i) = m.iter().position(|r| r.len() != cols) {
        return Err(Error::validation(
            format!("{field}[{i}]"),
            format!("expected {cols} entries, got {}", m[i].len()),
        ));
    }
    Ok(())
}

/// Number of closed communicating classes of the chain's transition graph.
fn closed_class_count(transition: &[Vec<f64>]) -> usize {
    let n = transition.len();
    let reach: Vec<Vec<bool>> = (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for (v, &p) in transition[u].iter().enumerate() {
                    if p > 0.0 && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            seen
        })
        .collect();
    let mut assigned = vec![false; n];
    let mut closed = 0;
    for s in 0..n {
        if assigned[s] {
            continue;
        }
        let class: Vec<usize> = (0..n).filter(|&t| reach[s][t] && reach[t][s]).collect();
        for &t in &class {
            assigned[t] = true;
        }
        let is_closed = class
            .iter()
            .all(|&u| (0..n).all(|v| !reach[u][v] || class.contains(&v)));
        if is_closed {
            closed += 1;
        }
    }
    closed
}

/// Gaussian elimination with partial pivoting on an `n x (n+1)` system.
fn solve_augmented(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = a[row][n];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Recipe for a random, irreducible, sticky chain with a sparse successor
/// structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticHmm {
    pub num_states: usize,
    pub feature_dim: usize,
    pub self_loop_bias: f64,
    /// Successor states per state besides itself (the ring successor is always one).
    pub successors: usize,
    pub mean_scale: f64,
    pub stddev: f64,
}

impl Default for SyntheticHmm {
    fn default() -> Self {
        Self {
            num_states: 32,
            feature_dim: 16,
            self_loop_bias: 0.8,
            successors: 3,
            mean_scale: 1.0,
            stddev: 2.0,
        }
    }
}

impl SyntheticHmm {
    pub fn build(&self, seed: u64) -> Result<HmmSpec> {
        let n = self.num_states;
        if n < 2 {
            return Err(Error::validation("num_states", "must be at least 2"));
        }
        if self.successors < 1 || self.successors >= n {
            return Err(Error::validation("successors", format!("must lie in [1, {})", n)));
        }
        if !(self.stddev > 0.0) || !self.stddev.is_finite() {
            return Err(Error::validation("stddev", "must be finite and positive"));
        }
        let mut r = rng::stream(seed, "hmm", 0);
        let mut transition = vec![vec![0.0; n]; n];
        for (s, row) in transition.iter_mut().enumerate() {
            let mut succ = vec![(s + 1) % n];
            let mut others: Vec<usize> = (0..n).filter(|&t| t != s && t != (s + 1) % n).collect();
            others.shuffle(&mut r);
            succ.extend(others.into_iter().take(self.successors - 1));
            let w: Vec<f64> = succ.iter().map(|_| r.random_range(0.5..1.5)).collect();
            let total: f64 = w.iter().sum();
            row[s] = self.self_loop_bias;
            for (t, wi) in succ.iter().zip(&w) {
                row[*t] += (1.0 - self.self_loop_bias) * wi / total;
            }
            // Put rounding residue on the self loop so the row sums to 1.
            let sum: f64 = row.iter().sum();
            row[s] += 1.0 - sum;
        }
        let emission_means = (0..n)
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut r); self.mean_scale * z })
                    .collect::<Vec<f64>>()
            })
            .collect();
        let emission_stddevs = (0..n)
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| self.stddev * r.random_range(0.8..1.2))
                    .collect::<Vec<f64>>()
            })
            .collect();
        let spec = HmmSpec {
            num_states: n,
            feature_dim: self.feature_dim,
            transition,
            emission_means,
            emission_stddevs,
            self_loop_bias: self.self_loop_bias,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub left_context: usize,
    pub right_context: usize,
    pub subsample_factor: usize,
}

impl WindowSpec {
    pub fn symmetric(context: usize, subsample_factor: usize) -> Self {
        Self { left_context: context, right_context: context, subsample_factor }
    }

    pub fn causal(context: usize, subsample_factor: usize) -> Self {
        Self { left_context: context, right_context: 0, subsample_factor }
    }

    pub fn identity() -> Self {
        Self::symmetric(0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsample_factor < 1 {
            return Err(Error::validation("window.subsample_factor", "must be at least 1"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.left_context + self.right_context + 1
    }

    pub fn stacked_dim(&self, feature_dim: usize) -> usize {
        self.width() * feature_dim
    }

    /// Centers kept after subsampling an utterance of `t_len` frames.
    pub fn centers(&self, t_len: usize) -> impl Iterator<Item = usize> {
        (0..t_len).step_by(self.subsample_factor.max(1))
    }
}

/// Address of one frame: utterance id hash plus frame index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameRef {
    pub utterance: u64,
    pub frame: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub feature_dim: usize,
    /// Row-major `T x feature_dim`.
    pub frames: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, feature_dim: usize, frames: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let id = id.into();
        if labels.is_empty() {
            return Err(Error::validation(format!("utterance {id}"), "needs at least one frame"));
        }
        if feature_dim == 0 || frames.len() != labels.len() * feature_dim {
            return Err(Error::Shape {
                what: "utterance frames",
                expected: labels.len() * feature_dim,
                got: frames.len(),
            });
        }
        Ok(Self { id, feature_dim, frames, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    pub fn id_hash(&self) -> u64 {
        fnv1a64(self.id.as_bytes())
    }

    /// Writes the stacked window centred at `t` into `out`, replicating edge
    /// frames where the context runs past the utterance.
    pub fn stack_into(&self, window: &WindowSpec, t: usize, out: &mut [f64]) {
        let d = self.feature_dim;
        let last = self.len() - 1;
        for (slot, offset) in (0..window.width()).enumerate() {
            let src = (t + offset).saturating_sub(window.left_context).min(last);
            out[slot * d..(slot + 1) * d].copy_from_slice(self.frame(src));
        }
    }
}

/// Stacks context windows around every kept center. Returns a row-major
/// `T' x D'` matrix and the center labels.
pub fn stack_frames(utt: &Utterance, window: &WindowSpec) -> (Vec<f64>, Vec<u32>) {
    let dim = window.stacked_dim(utt.feature_dim);
    let mut out = Vec::new();
    let mut labels = Vec::new();
    let mut buf = vec![0.0; dim];
    for t in window.centers(utt.len()) {
        utt.stack_into(window, t, &mut buf);
        out.extend_from_slice(&buf);
        labels.push(utt.labels[t]);
    }
    (out, labels)
}

/// Row-major matrix of stacked windows with the frame each row came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StackedFrames {
    pub dim: usize,
    pub data: Vec<f64>,
    pub refs: Vec<FrameRef>,
    /// Corpus hours represented by one row (subsampling included).
    pub hours_per_frame: f64,
}

impl StackedFrames {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn hours(&self) -> f64 {
        self.len() as f64 * self.hours_per_frame
    }

    fn build<'a>(
        utts: impl Iterator<Item = &'a Utterance>,
        window: &WindowSpec,
        feature_dim: usize,
        frames_per_hour: f64,
        mut labels: Option<&mut Vec<usize>>,
    ) -> Self {
        let dim = window.stacked_dim(feature_dim);
        let mut out = StackedFrames {
            dim,
            data: Vec::new(),
            refs: Vec::new(),
            hours_per_frame: window.subsample_factor as f64 / frames_per_hour,
        };
        let mut buf = vec![0.0; dim];
        for u in utts {
            let h = u.id_hash();
            for t in window.centers(u.len()) {
                u.stack_into(window, t, &mut buf);
                out.data.extend_from_slice(&buf);
                out.refs.push(FrameRef { utterance: h, frame: t as u32 });
                if let Some(l) = labels.as_deref_mut() {
                    l.push(u.labels[t] as usize);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledFrames {
    pub frames: StackedFrames,
    pub labels: Vec<usize>,
}

impl LabeledFrames {
    pub fn new(frames: StackedFrames, labels: Vec<usize>) -> Result<Self> {
        if frames.len() != labels.len() {
            return Err(Error::Shape { what: "labels", expected: frames.len(), got: labels.len() });
        }
        Ok(Self { frames, labels })
    }

    /// Builds an anonymous labeled set from plain rows (tests, toy tasks).
    pub fn from_rows(dim: usize, rows: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != dim * labels.len() {
            return Err(Error::Shape { what: "rows", expected: dim * labels.len(), got: rows.len() });
        }
        let refs = (0..labels.len())
            .map(|i| FrameRef { utterance: 0, frame: i as u32 })
            .collect();
        Ok(Self {
            frames: StackedFrames { dim, data: rows, refs, hours_per_frame: 1.0 / FRAMES_PER_HOUR },
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Supervised,
    Unsupervised,
    Test,
}

/// Which accessor a label read went through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessPath {
    Training,
    Evaluation,
    Oracle,
}

#[derive(Clone, Debug, Default)]
pub struct AccessLog {
    reads: Arc<Mutex<Vec<(Split, AccessPath)>>>,
}

impl AccessLog {
    fn record(&self, split: Split, path: AccessPath) {
        if let Ok(mut r) = self.reads.lock() {
            r.push((split, path));
        }
    }

    pub fn reads(&self) -> Vec<(Split, AccessPath)> {
        self.reads.lock().map(|r| r.clone()).unwrap_or_default()
    }

    /// Label reads of `split` through any path other than `Oracle`.
    pub fn non_oracle_reads(&self, split: Split) -> usize {
        self.reads()
            .iter()
            .filter(|(s, p)| *s == split && *p != AccessPath::Oracle)
            .count()
    }

    pub fn clear(&self) {
        if let Ok(mut r) = self.reads.lock() {
            r.clear();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub num_utterances: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: HmmSpec,
    pub seed: u64,
    pub generation: GenerationParams,
    pub frames_per_hour: f64,
    utterances: Vec<Arc<Utterance>>,
    split: BTreeMap<String, Split>,
    access: AccessLog,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.seed == other.seed
            && self.generation == other.generation
            && self.frames_per_hour == other.frames_per_hour
            && self.split == other.split
            && self.utterances.len() == other.utterances.len()
            && self.utterances.iter().zip(&other.utterances).all(|(a, b)| a == b)
    }
}

/// Labels-absent view handed to trainers for unlabeled data.
#[derive(Clone, Debug)]
pub struct UnlabeledView<'a> {
    utterances: Vec<&'a Utterance>,
    feature_dim: usize,
    frames_per_hour: f64,
}

/// A read-only utterance without its labels.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledUtterance<'a>(&'a Utterance);

impl<'a> UnlabeledUtterance<'a> {
    pub fn id(&self) -> &'a str {
        &self.0.id
    }
    pub fn id_hash(&self) -> u64 {
        self.0.id_hash()
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn frame(&self, t: usize) -> &'a [f64] {
        self.0.frame(t)
    }
    pub fn stack_into(&self, window: &WindowSpec, t: usize, out: &mut [f64]) {
        self.0.stack_into(window, t, out)
    }
}

impl<'a> UnlabeledView<'a> {
    pub fn utterances(&self) -> impl Iterator<Item = UnlabeledUtterance<'a>> + '_ {
        self.utterances.iter().map(|u| UnlabeledUtterance(u))
    }

    pub fn utterance(&self, i: usize) -> UnlabeledUtterance<'a> {
        UnlabeledUtterance(self.utterances[i])
    }

    pub fn num_utterances(&self) -> usize {
        self.utterances.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn frames_per_hour(&self) -> f64 {
        self.frames_per_hour
    }

    pub fn hours(&self) -> f64 {
        self.utterances.iter().map(|u| u.len()).sum::<usize>() as f64 / self.frames_per_hour
    }

    /// Leading utterances up to (at least) `hours`; the whole view if shorter.
    pub fn take_hours(&self, hours: f64) -> UnlabeledView<'a> {
        UnlabeledView {
            utterances: take_hours(&self.utterances, hours, self.frames_per_hour),
            feature_dim: self.feature_dim,
            frames_per_hour: self.frames_per_hour,
        }
    }

    pub fn stack(&self, window: &WindowSpec) -> StackedFrames {
        StackedFrames::build(
            self.utterances.iter().copied(),
            window,
            self.feature_dim,
            self.frames_per_hour,
            None,
        )
    }
}

/// View with labels. Only obtainable for supervised data on the training
/// path, or explicitly through evaluation / oracle accessors.
#[derive(Clone, Debug)]
pub struct LabeledView<'a> {
    utterances: Vec<&'a Utterance>,
    feature_dim: usize,
    frames_per_hour: f64,
}

impl<'a> LabeledView<'a> {
    pub fn utterances(&self) -> &[&'a Utterance] {
        &self.utterances
    }

    pub fn hours(&self) -> f64 {
        self.utterances.iter().map(|u| u.len()).sum::<usize>() as f64 / self.frames_per_hour
    }

    pub fn take_hours(&self, hours: f64) -> LabeledView<'a> {
        LabeledView {
            utterances: take_hours(&self.utterances, hours, self.frames_per_hour),
            feature_dim: self.feature_dim,
            frames_per_hour: self.frames_per_hour,
        }
    }

    pub fn unlabeled(&self) -> UnlabeledView<'a> {
        UnlabeledView {
            utterances: self.utterances.clone(),
            feature_dim: self.feature_dim,
            frames_per_hour: self.frames_per_hour,
        }
    }

    pub fn stack(&self, window: &WindowSpec) -> LabeledFrames {
        let mut labels = Vec::new();
        let frames = StackedFrames::build(
            self.utterances.iter().copied(),
            window,
            self.feature_dim,
            self.frames_per_hour,
            Some(&mut labels),
        );
        LabeledFrames { frames, labels }
    }
}

fn take_hours<'a>(utts: &[&'a Utterance], hours: f64, frames_per_hour: f64) -> Vec<&'a Utterance> {
    let want = hours * frames_per_hour;
    let mut have = 0.0;
    let mut out = Vec::new();
    for u in utts {
        if have >= want - 1e-9 {
            break;
        }
        have += u.len() as f64;
        out.push(*u);
    }
    out
}

pub enum TrainingView<'a> {
    Labeled(LabeledView<'a>),
    Unlabeled(UnlabeledView<'a>),
}

impl Corpus {
    pub fn utterances(&self) -> &[Arc<Utterance>] {
        &self.utterances
    }

    pub fn num_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.len()).sum()
    }

    pub fn hours_equivalent(&self) -> f64 {
        self.num_frames() as f64 / self.frames_per_hour
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.get(id).copied()
    }

    pub fn is_split(&self) -> bool {
        !self.split.is_empty()
    }

    pub fn access_log(&self) -> &AccessLog {
        &self.access
    }

    pub fn split_hours(&self, split: Split) -> f64 {
        self.members(split).iter().map(|u| u.len()).sum::<usize>() as f64 / self.frames_per_hour
    }

    pub fn with_frames_per_hour(mut self, frames_per_hour: f64) -> Result<Self> {
        if !(frames_per_hour > 0.0) || !frames_per_hour.is_finite() {
            return Err(Error::validation("frames_per_hour", "must be finite and positive"));
        }
        self.frames_per_hour = frames_per_hour;
        Ok(self)
    }

    fn members(&self, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| self.split.get(&u.id) == Some(&split))
            .map(|u| u.as_ref())
            .collect()
    }

    fn require_split(&self, split: Split) -> Result<Vec<&Utterance>> {
        if !self.is_split() {
            return Err(Error::Data("corpus has not been split".into()));
        }
        Ok(self.members(split))
    }

    /// Trainer-facing accessor: supervised data comes with labels, unlabeled
    /// data without; the test split is not a training source.
    pub fn training_view(&self, split: Split) -> Result<TrainingView<'_>> {
        match split {
            Split::Supervised => self.supervised().map(TrainingView::Labeled),
            Split::Unsupervised => self.unlabeled(split).map(TrainingView::Unlabeled),
            Split::Test => Err(Error::Config("the test split is not a training source".into())),
        }
    }

    pub fn supervised(&self) -> Result<LabeledView<'_>> {
        let utterances = self.require_split(Split::Supervised)?;
        self.access.record(Split::Supervised, AccessPath::Training);
        Ok(self.labeled(utterances))
    }

    pub fn unlabeled(&self, split: Split) -> Result<UnlabeledView<'_>> {
        let utterances = self.require_split(split)?;
        Ok(UnlabeledView {
            utterances,
            feature_dim: self.spec.feature_dim,
            frames_per_hour: self.frames_per_hour,
        })
    }

    /// Labels for scoring. Unsupervised labels are only reachable through
    /// [`Corpus::oracle_labels`].
    pub fn evaluation(&self, split: Split) -> Result<LabeledView<'_>> {
        if split == Split::Unsupervised {
            return Err(Error::Config(
                "unsupervised labels are only available through the oracle accessor".into(),
            ));
        }
        let utterances = self.require_split(split)?;
        self.access.record(split, AccessPath::Evaluation);
        Ok(self.labeled(utterances))
    }

    pub fn oracle_labels(&self, split: Split) -> Result<LabeledView<'_>> {
        let utterances = self.require_split(split)?;
        self.access.record(split, AccessPath::Oracle);
        Ok(self.labeled(utterances))
    }

    fn labeled<'a>(&'a self, utterances: Vec<&'a Utterance>) -> LabeledView<'a> {
        LabeledView {
            utterances,
            feature_dim: self.spec.feature_dim,
            frames_per_hour: self.frames_per_hour,
        }
    }
}

/// Samples a labeled corpus from `spec`. Each utterance draws from its own
/// stream keyed by `(seed, index)`, so the result is independent of how the
/// work is scheduled.
pub fn generate_corpus(
    spec: &HmmSpec,
    num_utterances: usize,
    length_range: (usize, usize),
    seed: u64,
) -> Result<Corpus> {
    generate_corpus_with(spec, num_utterances, length_range, seed, Exec::default())
}

pub fn generate_corpus_with(
    spec: &HmmSpec,
    num_utterances: usize,
    (min_t, max_t): (usize, usize),
    seed: u64,
    exec: Exec,
) -> Result<Corpus> {
    if min_t < 1 {
        return Err(Error::validation("length_range.min", "must be at least 1"));
    }
    if max_t < min_t {
        return Err(Error::validation("length_range.max", "must be at least min"));
    }
    spec.validate()?;
    let pi = spec.stationary_distribution()?;
    let cumulative = |row: &[f64]| -> Vec<f64> {
        row.iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    };
    let start = cumulative(&pi);
    let rows: Vec<Vec<f64>> = spec.transition.iter().map(|r| cumulative(r)).collect();

    let utterances = exec.map_range(num_utterances, |index| {
        let mut r = rng::stream(seed, "utterance", index as u64);
        let t_len = r.random_range(min_t..=max_t);
        let d = spec.feature_dim;
        let mut frames = Vec::with_capacity(t_len * d);
        let mut labels = Vec::with_capacity(t_len);
        let mut state = sample_cumulative(&start, r.random());
        for t in 0..t_len {
            if t > 0 {
                state = sample_cumulative(&rows[state], r.random());
            }
            labels.push(state as u32);
            for k in 0..d {
                let z: f64 = StandardNormal.sample(&mut r);
                frames.push(spec.emission_means[state][k] + spec.emission_stddevs[state][k] * z);
            }
        }
        normalize_features(&mut frames, d);
        Arc::new(Utterance {
            id: format!("utt{index:06}"),
            feature_dim: d,
            frames,
            labels,
        })
    });
    Ok(Corpus {
        spec: spec.clone(),
        seed,
        generation: GenerationParams { num_utterances, min_frames: min_t, max_frames: max_t },
        frames_per_hour: FRAMES_PER_HOUR,
        utterances,
        split: BTreeMap::new(),
        access: AccessLog::default(),
    })
}

fn sample_cumulative(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().unwrap_or(&1.0);
    let target = u * total;
    cdf.iter().position(|&c| target < c).unwrap_or(cdf.len() - 1)
}

/// Per-utterance mean/variance normalisation of each feature dimension.
fn normalize_features(frames: &mut [f64], d: usize) {
    let t = frames.len() / d;
    if t == 0 {
        return;
    }
    for k in 0..d {
        let mean = (0..t).map(|i| frames[i * d + k]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (frames[i * d + k] - mean).powi(2)).sum::<f64>() / t as f64;
        let sd = var.sqrt();
        for i in 0..t {
            let v = frames[i * d + k] - mean;
            frames[i * d + k] = if sd > 1e-12 { v / sd } else { v };
        }
    }
}

/// Assigns whole utterances to splits after a seeded shuffle, filling
/// supervised, then unsupervised, then test. Utterances left over after all
/// requests are met are dropped from the returned corpus. The split shares
/// the parent's access log.
pub fn split_corpus(
    corpus: &Corpus,
    supervised_hours: f64,
    unsupervised_hours: f64,
    test_hours: f64,
    seed: u64,
) -> Result<Corpus> {
    let requests = [
        (Split::Supervised, supervised_hours),
        (Split::Unsupervised, unsupervised_hours),
        (Split::Test, test_hours),
    ];
    for (split, h) in requests {
        if !(h >= 0.0) || !h.is_finite() {
            return Err(Error::validation(format!("{split:?} hours"), "must be finite and >= 0"));
        }
    }
    let available = corpus.hours_equivalent();
    let requested = supervised_hours + unsupervised_hours + test_hours;
    if requested > available * (1.0 + 1e-12) {
        return Err(Error::Data(format!(
            "requested {requested} hours but the corpus holds {available} hours"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.utterances.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));
    let mut split = BTreeMap::new();
    let mut cursor = 0;
    let mut kept = vec![false; order.len()];
    for (s, hours) in requests {
        let want = hours * corpus.frames_per_hour;
        let mut have = 0.0;
        while cursor < order.len() && have < want - 1e-9 {
            let u = &corpus.utterances[order[cursor]];
            have += u.len() as f64;
            split.insert(u.id.clone(), s);
            kept[order[cursor]] = true;
            cursor += 1;
        }
    }
    let utterances = corpus
        .utterances
        .iter()
        .enumerate()
        .filter(|(i, _)| kept[*i])
        .map(|(_, u)| Arc::clone(u))
        .collect();
    Ok(Corpus {
        spec: corpus.spec.clone(),
        seed: corpus.seed,
        generation: corpus.generation,
        frames_per_hour: corpus.frames_per_hour,
        utterances,
        split,
        access: corpus.access.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusManifest {
    format_version: u32,
    hmm: HmmSpec,
    seed: u64,
    generation: GenerationParams,
    frames_per_hour: f64,
    utterances: Vec<String>,
    splits: BTreeMap<String, Split>,
}

pub fn encode_utterance(u: &Utterance) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + u.frames.len() * 8 + u.labels.len() * 4);
    out.extend_from_slice(UTTERANCE_MAGIC);
    out.push(UTTERANCE_VERSION);
    out.extend_from_slice(&(u.len() as u32).to_le_bytes());
    out.extend_from_slice(&(u.feature_dim as u32).to_le_bytes());
    for v in &u.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &u.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_utterance(id: &str, bytes: &[u8]) -> Result<Utterance> {
    let bad = |why: &str| Error::Format(format!("utterance {id}: {why}"));
    if bytes.len() < 13 || &bytes[..4] != UTTERANCE_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != UTTERANCE_VERSION {
        return Err(bad("unsupported version"));
    }
    let t = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = 13 + t * d * 8 + t * 4;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let body = &bytes[13..];
    let frames = body[..t * d * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = body[t * d * 8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Utterance::new(id, d, frames, labels)
}

impl Corpus {
    /// Writes `spec.json` plus one `<id>.bin` per utterance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = CorpusManifest {
            format_version: CORPUS_FORMAT_VERSION,
            hmm: self.spec.clone(),
            seed: self.seed,
            generation: self.generation,
            frames_per_hour: self.frames_per_hour,
            utterances: self.utterances.iter().map(|u| u.id.clone()).collect(),
            splits: self.split.clone(),
        };
        for u in &self.utterances {
            write_atomic(&dir.join(format!("{}.bin", u.id)), &encode_utterance(u))?;
        }
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(&dir.join("spec.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let text = fs::read(dir.join("spec.json"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("spec.json").display())))?;
        let m: CorpusManifest = serde_json::from_slice(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", dir.join("spec.json").display())))?;
        if m.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported corpus format {}", m.format_version)));
        }
        m.hmm.validate()?;
        let mut seen = HashMap::new();
        let mut utterances = Vec::with_capacity(m.utterances.len());
        for id in &m.utterances {
            if seen.insert(id.clone(), ()).is_some() {
                return Err(Error::Format(format!("duplicate utterance id {id}")));
            }
            let bytes = fs::read(dir.join(format!("{id}.bin")))?;
            let u = decode_utterance(id, &bytes)?;
            if u.feature_dim != m.hmm.feature_dim {
                return Err(Error::Format(format!("utterance {id}: feature_dim mismatch")));
            }
            utterances.push(Arc::new(u));
        }
        if !m.splits.is_empty() && m.splits.len() != utterances.len() {
            return Err(Error::Format("split manifest does not cover every utterance".into()));
        }
        if let Some(k) = m.splits.keys().find(|k| !seen.contains_key(*k)) {
            return Err(Error::Format(format!("split names unknown utterance {k}")));
        }
        Ok(Corpus {
            spec: m.hmm,
            seed: m.seed,
            generation: m.generation,
            frames_per_hour: m.frames_per_hour,
            utterances,
            split: m.splits,
            access: AccessLog::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(p: f64) -> HmmSpec {
        HmmSpec {
            num_states: 2,
            feature_dim: 2,
            transition: vec![vec![p, 1.0 - p], vec![1.0 - p, p]],
            emission_means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            emission_stddevs: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            self_loop_bias: 0.5,
        }
    }

    /// Power iteration on the lazy chain (P + I) / 2.
    fn power_iteration(p: &[Vec<f64>]) -> Vec<f64> {
        let n = p.len();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..200_000 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[j] += pi[i] * 0.5 * (p[i][j] + if i == j { 1.0 } else { 0.0 });
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let spec = SyntheticHmm { num_states: 8, feature_dim: 3, ..Default::default() }
            .build(3)
            .unwrap();
        let direct = spec.stationary_distribution().unwrap();
        let oracle = power_iteration(&spec.transition);
        for (a, b) in direct.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let sym = two_state(0.9).stationary_distribution().unwrap();
        let oracle = power_iteration(&two_state(0.9).transition);
        assert!((sym[0] - 0.5).abs() < 1e-12 && (oracle[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_chain_is_rejected() {
        let mut spec = two_state(0.9);
        spec.transition = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("transition"), "{err}");
        assert!(generate_corpus(&spec, 1, (5, 5), 0).is_err());
    }

    #[test]
    fn transient_state_with_single_closed_class_is_accepted() {
        let mut spec = two_state(0.9);
        spec.transition = vec![vec![0.5, 0.5], vec![0.0, 1.0]];
        spec.validate().unwrap();
        let pi = spec.stationary_distribution().unwrap();
        assert!(pi[0].abs() < 1e-12 && (pi[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = two_state(0.9);
        spec.transition[1] = vec![0.5, 0.6];
        assert!(spec.validate().unwrap_err().to_string().contains("transition[1]"));
        let mut spec = two_state(0.9);
        spec.emission_stddevs[0][1] = 0.0;
        assert!(spec.validate().unwrap_err().to_string().contains("emission_stddevs[0][1]"));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = two_state(0.9);
        let a = generate_corpus(&spec, 10, (50, 100), 7).unwrap();
        let b = generate_corpus(&spec, 10, (50, 100), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus_with(&spec, 10, (50, 100), 7, Exec::Sequential).unwrap();
        assert_eq!(a, c);
        assert!(a.utterances().iter().all(|u| (50..=100).contains(&u.len())));
    }

    #[test]
    fn symmetric_chain_label_frequency() {
        let corpus = generate_corpus(&two_state(0.9), 200, (100, 100), 11).unwrap();
        let total = corpus.num_frames();
        let zeros: usize = corpus
            .utterances()
            .iter()
            .map(|u| u.labels.iter().filter(|&&l| l == 0).count())
            .sum();
        let freq = zeros as f64 / total as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn empirical_frequencies_converge_to_stationary() {
        let spec = SyntheticHmm { num_states: 6, feature_dim: 2, ..Default::default() }
            .build(5)
            .unwrap();
        let pi = spec.stationary_distribution().unwrap();
        let corpus = generate_corpus(&spec, 400, (100, 200), 9).unwrap();
        let n = corpus.num_frames();
        assert!(n >= 10_000);
        let mut counts = [0usize; 6];
        for u in corpus.utterances() {
            for &l in &u.labels {
                counts[l as usize] += 1;
            }
        }
        let bound = 5.0 / (n as f64).sqrt();
        for (c, p) in counts.iter().zip(&pi) {
            assert!((*c as f64 / n as f64 - p).abs() < bound);
        }
    }

    #[test]
    fn spec_json_round_trip_keeps_rows_stochastic() {
        let spec = SyntheticHmm::default().build(1).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: HmmSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
        for row in &back.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn equal_corpus(n: usize) -> Corpus {
        generate_corpus(&two_state(0.8), n, (60, 60), 1).unwrap()
    }

    #[test]
    fn split_boundaries() {
        let c = equal_corpus(100);
        let total = c.hours_equivalent();
        let all_test = split_corpus(&c, 0.0, 0.0, total, 3).unwrap();
        assert_eq!(all_test.unlabeled(Split::Test).unwrap().num_utterances(), 100);
        assert!(split_corpus(&c, total, 0.0, total * 0.1, 3).unwrap_err().to_string().contains("requested"));
        let half = split_corpus(&c, total / 2.0, total / 2.0, 0.0, 3).unwrap();
        assert_eq!(half.supervised().unwrap().utterances().len(), 50);
        assert_eq!(half.unlabeled(Split::Unsupervised).unwrap().num_utterances(), 50);
    }

    #[test]
    fn split_is_seeded_and_covers() {
        let c = equal_corpus(40);
        let per = 60.0 / c.frames_per_hour;
        let a = split_corpus(&c, 10.0 * per, 20.0 * per, 5.0 * per, 8).unwrap();
        let b = split_corpus(&c, 10.0 * per, 20.0 * per, 5.0 * per, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.utterances().len(), 35);
        assert!(a.utterances().iter().all(|u| a.split_of(&u.id).is_some()));
        assert!((a.split_hours(Split::Supervised) - 10.0 * per).abs() <= per);
    }

    #[test]
    fn unsupervised_labels_need_the_oracle() {
        let c = equal_corpus(10);
        let h = c.hours_equivalent();
        let s = split_corpus(&c, h * 0.3, h * 0.4, h * 0.3, 1).unwrap();
        assert!(matches!(s.training_view(Split::Unsupervised).unwrap(), TrainingView::Unlabeled(_)));
        assert!(s.training_view(Split::Test).is_err());
        assert!(s.evaluation(Split::Unsupervised).is_err());
        let _ = s.evaluation(Split::Test).unwrap();
        assert_eq!(s.access_log().non_oracle_reads(Split::Unsupervised), 0);
        let _ = s.oracle_labels(Split::Unsupervised).unwrap();
        assert_eq!(s.access_log().non_oracle_reads(Split::Unsupervised), 0);
        assert!(s.access_log().reads().contains(&(Split::Unsupervised, AccessPath::Oracle)));
    }

    fn ramp(t: usize, d: usize) -> Utterance {
        let frames = (0..t * d).map(|v| v as f64).collect();
        Utterance::new("u", d, frames, (0..t as u32).collect()).unwrap()
    }

    #[test]
    fn identity_window_is_identity() {
        let u = ramp(7, 3);
        let (out, labels) = stack_frames(&u, &WindowSpec::identity());
        assert_eq!(out, u.frames);
        assert_eq!(labels, u.labels);
    }

    #[test]
    fn edge_replication() {
        let u = ramp(5, 2);
        let (out, labels) = stack_frames(&u, &WindowSpec::symmetric(1, 1));
        assert_eq!(labels.len(), 5);
        assert_eq!(out.len(), 5 * 6);
        assert_eq!(&out[..6], &[0.0, 1.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&out[24..], &[6.0, 7.0, 8.0, 9.0, 8.0, 9.0]);
    }

    #[test]
    fn subsampling_keeps_every_third_center() {
        let u = ramp(10, 1);
        let (out, labels) = stack_frames(&u, &WindowSpec::causal(0, 3));
        assert_eq!(labels, vec![0, 3, 6, 9]);
        assert_eq!(out, vec![0.0, 3.0, 6.0, 9.0]);
    }

    #[test]
    fn utterance_codec_round_trip_and_rejects_garbage() {
        let u = ramp(4, 3);
        let bytes = encode_utterance(&u);
        assert_eq!(&bytes[..4], b"DLAB");
        assert_eq!(decode_utterance("u", &bytes).unwrap(), u);
        assert!(decode_utterance("u", &bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_utterance("u", &wrong).is_err());
    }

    #[test]
    fn corpus_directory_round_trip() {
        let c = equal_corpus(6);
        let s = split_corpus(&c, 0.0005, 0.0, 0.0, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(s, back);
    }
}

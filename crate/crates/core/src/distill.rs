//! Teacher soft targets: confidence-based selection, top-k quantized
//! posterior compression, and student training against soft and hard
//! targets.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{FrameRef, LabeledFrames, StackedFrames, UnlabeledView};
use crate::error::{Error, Result};
use crate::net::{self, ArchSpec, Dataset, ModelParams, Sgd, Target, TrainSchedule};
use crate::par::Exec;

const BATCH_MAGIC: &[u8; 4] = b"DLST";
const BATCH_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    /// Minimum teacher max-posterior for a frame to be kept.
    pub min_confidence: f64,
    /// Upper bound on the kept fraction; the most confident frames win.
    pub max_fraction: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { min_confidence: 0.0, max_fraction: 1.0 }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::validation("selection.min_confidence", "must lie in [0, 1]"));
        }
        if !(self.max_fraction > 0.0 && self.max_fraction <= 1.0) {
            return Err(Error::validation("selection.max_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Weight on the soft-target term when a frame has both a soft target and a
/// hard label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixWeight(pub f64);

impl Default for MixWeight {
    fn default() -> Self {
        MixWeight(1.0)
    }
}

impl MixWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        let m = MixWeight(lambda);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.0) {
            return Err(Error::validation("lambda", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.0
    }
}

/// One compressed posterior: `(class, code)` pairs, most probable first.
pub type CompressedEntry = Vec<(u16, u16)>;

fn check_codec(num_classes: usize, k: usize, quant_bits: u8) -> Result<()> {
    if k < 1 || k > num_classes {
        return Err(Error::validation("k", format!("must lie in [1, {num_classes}]")));
    }
    if !(2..=16).contains(&quant_bits) {
        return Err(Error::validation("quant_bits", "must lie in [2, 16]"));
    }
    if num_classes > usize::from(u16::MAX) + 1 {
        return Err(Error::validation("num_classes", "must fit in 16 bits"));
    }
    Ok(())
}

fn code_max(quant_bits: u8) -> f64 {
    ((1u32 << quant_bits) - 1) as f64
}

/// Keeps the `k` most probable classes (ties to the lower index),
/// renormalises their mass to 1 and quantises each to
/// `round(p * (2^bits - 1))`.
pub fn compress_posterior(posterior: &[f64], k: usize, quant_bits: u8) -> Result<CompressedEntry> {
    check_codec(posterior.len(), k, quant_bits)?;
    let mut order: Vec<usize> = (0..posterior.len()).collect();
    order.sort_by(|&a, &b| posterior[b].total_cmp(&posterior[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mass: f64 = order.iter().map(|&c| posterior[c]).sum();
    let scale = code_max(quant_bits);
    Ok(order
        .into_iter()
        .map(|c| {
            let q = if mass > 0.0 { posterior[c] / mass } else { 1.0 / k as f64 };
            (c as u16, (q * scale).round() as u16)
        })
        .collect())
}

/// Decodes to a sparse distribution whose masses sum to 1. An entry whose
/// codes are all zero decodes to a one-hot on its first class.
pub fn decompress(entry: &[(u16, u16)], quant_bits: u8, num_classes: usize) -> Result<Vec<(usize, f64)>> {
    if entry.is_empty() {
        return Err(Error::Format("empty posterior entry".into()));
    }
    let max = code_max(quant_bits);
    let mut seen = vec![false; num_classes];
    for &(c, code) in entry {
        let c = usize::from(c);
        if c >= num_classes {
            return Err(Error::Format(format!("class {c} out of range")));
        }
        if seen[c] {
            return Err(Error::Format(format!("duplicate class {c}")));
        }
        seen[c] = true;
        if f64::from(code) > max {
            return Err(Error::Format(format!("code {code} exceeds {quant_bits}-bit range")));
        }
    }
    let total: f64 = entry.iter().map(|&(_, code)| f64::from(code) / max).sum();
    if total == 0.0 {
        let mut out: Vec<(usize, f64)> = entry.iter().map(|&(c, _)| (usize::from(c), 0.0)).collect();
        out[0].1 = 1.0;
        return Ok(out);
    }
    Ok(entry
        .iter()
        .map(|&(c, code)| (usize::from(c), f64::from(code) / max / total))
        .collect())
}

/// `lambda * CE(student, soft) + (1 - lambda) * CE(student, onehot(hard))`;
/// without a hard label only the soft term is used.
pub fn kd_loss(student_posterior: &[f64], soft_target: &[(usize, f64)], hard_label: Option<usize>, mix: MixWeight) -> f64 {
    let soft_ce: f64 = soft_target
        .iter()
        .filter(|(_, p)| *p != 0.0)
        .map(|(c, p)| -p * student_posterior[*c].max(net::LOG_CLAMP).ln())
        .sum();
    match hard_label {
        None => soft_ce,
        Some(h) => {
            let hard_ce = -student_posterior[h].max(net::LOG_CLAMP).ln();
            mix.0 * soft_ce + (1.0 - mix.0) * hard_ce
        }
    }
}

/// The training target whose cross-entropy equals [`kd_loss`].
pub fn mixed_target(soft: &[(usize, f64)], hard: Option<usize>, mix: MixWeight) -> Target {
    match hard {
        None => Target::Soft(soft.to_vec()),
        Some(h) if mix.0 == 0.0 => Target::Hard(h),
        Some(_) if mix.0 == 1.0 => Target::Soft(soft.to_vec()),
        Some(h) => {
            let mut entries: Vec<(usize, f64)> = soft.iter().map(|(c, p)| (*c, mix.0 * p)).collect();
            match entries.iter_mut().find(|(c, _)| *c == h) {
                Some(e) => e.1 += 1.0 - mix.0,
                None => entries.push((h, 1.0 - mix.0)),
            }
            Target::Soft(entries)
        }
    }
}

/// Compressed teacher posteriors for a set of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargetBatch {
    pub teacher_name: String,
    pub k: usize,
    pub quant_bits: u8,
    pub num_classes: usize,
    /// Corpus hours represented by one frame.
    pub hours_per_frame: f64,
    pub frame_refs: Vec<FrameRef>,
    /// `k` pairs per frame, flattened.
    codes: Vec<(u16, u16)>,
}

impl SoftTargetBatch {
    pub fn empty(teacher_name: &str, k: usize, quant_bits: u8, num_classes: usize, hours_per_frame: f64) -> Result<Self> {
        check_codec(num_classes, k, quant_bits)?;
        Ok(Self {
            teacher_name: teacher_name.to_owned(),
            k,
            quant_bits,
            num_classes,
            hours_per_frame,
            frame_refs: Vec::new(),
            codes: Vec::new(),
        })
    }

    pub fn push(&mut self, frame: FrameRef, entry: &[(u16, u16)]) -> Result<()> {
        if entry.len() != self.k {
            return Err(Error::Shape { what: "soft-target entry", expected: self.k, got: entry.len() });
        }
        self.frame_refs.push(frame);
        self.codes.extend_from_slice(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frame_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_refs.is_empty()
    }

    pub fn hours(&self) -> f64 {
        self.len() as f64 * self.hours_per_frame
    }

    pub fn entry(&self, i: usize) -> &[(u16, u16)] {
        &self.codes[i * self.k..(i + 1) * self.k]
    }

    pub fn decode(&self, i: usize) -> Result<Vec<(usize, f64)>> {
        decompress(self.entry(i), self.quant_bits, self.num_classes)
    }

    /// Appends another batch produced with the same codec settings.
    pub fn extend(&mut self, other: &SoftTargetBatch) -> Result<()> {
        if other.k != self.k || other.quant_bits != self.quant_bits || other.num_classes != self.num_classes {
            return Err(Error::Data("cannot merge soft-target batches with different codecs".into()));
        }
        self.frame_refs.extend_from_slice(&other.frame_refs);
        self.codes.extend_from_slice(&other.codes);
        Ok(())
    }

    /// Checks per-entry invariants: unique in-range classes, descending codes.
    pub fn validate(&self) -> Result<()> {
        check_codec(self.num_classes, self.k, self.quant_bits)?;
        for i in 0..self.len() {
            let e = self.entry(i);
            self.decode(i)?;
            if e.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(Error::Format(format!("frame {i}: entries not in descending order")));
            }
        }
        Ok(())
    }

    /// Little-endian binary layout: magic, version, teacher name, codec
    /// header, frame count, then per frame the utterance hash (u64), frame
    /// index (u32) and `k` `(class: u16, code: u16)` pairs.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.len() * (12 + 4 * self.k));
        out.extend_from_slice(BATCH_MAGIC);
        out.push(BATCH_VERSION);
        let name = self.teacher_name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.k as u16).to_le_bytes());
        out.push(self.quant_bits);
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.hours_per_frame.to_le_bytes());
        for (i, r) in self.frame_refs.iter().enumerate() {
            out.extend_from_slice(&r.utterance.to_le_bytes());
            out.extend_from_slice(&r.frame.to_le_bytes());
            for &(c, code) in self.entry(i) {
                out.extend_from_slice(&c.to_le_bytes());
                out.extend_from_slice(&code.to_le_bytes());
            }
        }
        out
    }

    pub fn decode_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != BATCH_MAGIC {
            return Err(Error::Format("soft-target batch: bad magic".into()));
        }
        if cur.take(1)?[0] != BATCH_VERSION {
            return Err(Error::Format("soft-target batch: unsupported version".into()));
        }
        let name_len = usize::from(cur.u16()?);
        let teacher_name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("soft-target batch: teacher name is not utf-8".into()))?;
        let k = usize::from(cur.u16()?);
        let quant_bits = cur.take(1)?[0];
        let num_classes = cur.u32()? as usize;
        let count = cur.u64()? as usize;
        let hours_per_frame = f64::from_bits(cur.u64()?);
        let mut batch = SoftTargetBatch::empty(&teacher_name, k, quant_bits, num_classes, hours_per_frame)?;
        let record = 12 + 4 * k;
        if bytes.len() - cur.pos != count * record {
            return Err(Error::Format(format!(
                "soft-target batch: expected {count} records of {record} bytes"
            )));
        }
        let mut entry = Vec::with_capacity(k);
        for _ in 0..count {
            let utterance = cur.u64()?;
            let frame = cur.u32()?;
            entry.clear();
            for _ in 0..k {
                entry.push((cur.u16()?, cur.u16()?));
            }
            batch.push(FrameRef { utterance, frame }, &entry)?;
        }
        batch.validate()?;
        Ok(batch)
    }

    /// Human-readable dump, one frame per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "teacher={} k={} quant_bits={} num_classes={} frames={} hours_per_frame={}\n",
            self.teacher_name,
            self.k,
            self.quant_bits,
            self.num_classes,
            self.len(),
            self.hours_per_frame
        );
        let max = code_max(self.quant_bits);
        for (i, r) in self.frame_refs.iter().enumerate() {
            let _ = write!(out, "{:016x} {}", r.utterance, r.frame);
            for &(c, code) in self.entry(i) {
                let _ = write!(out, " {c}:{code}({:.5})", f64::from(code) / max);
            }
            out.push('\n');
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("soft-target batch: truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelectionReport {
    pub candidates: usize,
    pub kept: usize,
}

impl SelectionReport {
    pub fn kept_fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.kept as f64 / self.candidates as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLabels {
    pub batch: SoftTargetBatch,
    pub report: SelectionReport,
}

/// Codec and selection settings for [`teacher_label`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSettings {
    pub selection: SelectionPolicy,
    pub k: usize,
    pub quant_bits: u8,
    pub temperature: f64,
}

impl Default for LabelSettings {
    fn default() -> Self {
        Self { selection: SelectionPolicy::default(), k: 4, quant_bits: 8, temperature: 1.0 }
    }
}

/// Runs the teacher over every subsampled frame of `data`, keeps confident
/// frames and compresses their posteriors. Utterances are processed in
/// parallel and merged in view order.
pub fn teacher_label(teacher: &ModelParams, data: &UnlabeledView<'_>, settings: &LabelSettings) -> Result<TeacherLabels> {
    teacher_label_with(teacher, data, settings, Exec::default())
}

pub fn teacher_label_with(
    teacher: &ModelParams,
    data: &UnlabeledView<'_>,
    settings: &LabelSettings,
    exec: Exec,
) -> Result<TeacherLabels> {
    let LabelSettings { selection, k, quant_bits, temperature } = *settings;
    selection.validate()?;
    let arch = &teacher.arch;
    check_codec(arch.num_classes, k, quant_bits)?;
    if arch.feature_dim != data.feature_dim() {
        return Err(Error::Shape { what: "teacher feature_dim", expected: data.feature_dim(), got: arch.feature_dim });
    }
    net::softmax_temperature(&[0.0], temperature)?;
    let window = arch.window;
    let per_utt = exec.map_range(data.num_utterances(), |i| -> Result<Vec<(FrameRef, f64, CompressedEntry)>> {
        let u = data.utterance(i);
        let hash = u.id_hash();
        let mut buf = vec![0.0; arch.input_dim()];
        window
            .centers(u.len())
            .map(|t| {
                u.stack_into(&window, t, &mut buf);
                let post = net::softmax_temperature(&teacher.logits(&buf)?, temperature)?;
                let confidence = post.iter().copied().fold(0.0, f64::max);
                Ok((FrameRef { utterance: hash, frame: t as u32 }, confidence, compress_posterior(&post, k, quant_bits)?))
            })
            .collect()
    });
    let mut frames = Vec::new();
    for part in per_utt {
        frames.extend(part?);
    }
    let candidates = frames.len();
    let mut keep: Vec<usize> = (0..candidates).filter(|&i| frames[i].1 >= selection.min_confidence).collect();
    let cap = (selection.max_fraction * candidates as f64).floor() as usize;
    if keep.len() > cap {
        keep.sort_by(|&a, &b| frames[b].1.total_cmp(&frames[a].1).then(a.cmp(&b)));
        keep.truncate(cap);
        keep.sort_unstable();
    }
    let hours_per_frame = window.subsample_factor as f64 / data.frames_per_hour();
    let mut batch = SoftTargetBatch::empty(&arch.name, k, quant_bits, arch.num_classes, hours_per_frame)?;
    for &i in &keep {
        batch.push(frames[i].0, &frames[i].2)?;
    }
    Ok(TeacherLabels { report: SelectionReport { candidates, kept: batch.len() }, batch })
}

/// Soft targets joined with the student's input windows for the same frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoftSet {
    pub frames: StackedFrames,
    pub targets: Vec<Vec<(usize, f64)>>,
}

impl SoftSet {
    pub fn empty(dim: usize, hours_per_frame: f64) -> Self {
        Self { frames: StackedFrames { dim, hours_per_frame, ..Default::default() }, targets: Vec::new() }
    }

    /// Stacks `student`'s window around every frame in `batch`; the frames
    /// must come from utterances in `sources`.
    pub fn build(batch: &SoftTargetBatch, sources: &[&UnlabeledView<'_>], student: &ArchSpec) -> Result<Self> {
        let mut by_hash = HashMap::new();
        for view in sources {
            if view.feature_dim() != student.feature_dim {
                return Err(Error::Shape { what: "student feature_dim", expected: view.feature_dim(), got: student.feature_dim });
            }
            for u in view.utterances() {
                by_hash.insert(u.id_hash(), u);
            }
        }
        let dim = student.input_dim();
        let mut out = SoftSet::empty(dim, batch.hours_per_frame);
        out.frames.data.reserve(batch.len() * dim);
        let mut buf = vec![0.0; dim];
        for (i, r) in batch.frame_refs.iter().enumerate() {
            let u = by_hash
                .get(&r.utterance)
                .ok_or_else(|| Error::Data(format!("soft target references unknown utterance {:016x}", r.utterance)))?;
            if r.frame as usize >= u.len() {
                return Err(Error::Data(format!("soft target frame {} beyond utterance end", r.frame)));
            }
            u.stack_into(&student.window, r.frame as usize, &mut buf);
            out.frames.data.extend_from_slice(&buf);
            out.frames.refs.push(*r);
            out.targets.push(batch.decode(i)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSettings {
    pub mix: MixWeight,
    pub schedule: TrainSchedule,
    /// Unsupervised hours consumed between checkpoints.
    pub sub_epoch_hours: f64,
    /// Train on the supervised data alone before streaming soft targets.
    pub warm_start: bool,
}

impl Default for StudentSettings {
    fn default() -> Self {
        Self { mix: MixWeight::default(), schedule: TrainSchedule::default(), sub_epoch_hours: 1.0, warm_start: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentCheckpoint {
    pub unsupervised_hours: f64,
    pub params: ModelParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentRun {
    pub params: ModelParams,
    pub checkpoints: Vec<StudentCheckpoint>,
    /// Mean loss of every pass (warm-start epochs first, then sub-epochs).
    pub loss_trace: Vec<f64>,
}

/// Trains a student from scratch.
///
/// Supervised frames are always part of every pass; a supervised frame that
/// also has a soft target is trained on the `mix`-weighted combination. The
/// remaining soft-target frames form the unsupervised stream, consumed in
/// order, `sub_epoch_hours` at a time, one SGD pass per chunk with the
/// schedule's exponential decay stretched over the whole stream. A checkpoint
/// is taken after every chunk. Without unsupervised frames this is exactly
/// [`net::train`] on the supervised data, with a single checkpoint at zero
/// hours.
pub fn train_student(
    arch: &ArchSpec,
    supervised: &LabeledFrames,
    soft: &SoftSet,
    settings: &StudentSettings,
) -> Result<StudentRun> {
    arch.validate()?;
    settings.mix.validate()?;
    let schedule = &settings.schedule;
    schedule.validate()?;
    let dim = arch.input_dim();
    for (what, d, n) in [("supervised", supervised.frames.dim, supervised.len()), ("soft", soft.frames.dim, soft.len())] {
        if n > 0 && d != dim {
            return Err(Error::Shape { what: if what == "soft" { "soft-set input" } else { "supervised input" }, expected: dim, got: d });
        }
    }
    if supervised.is_empty() && soft.is_empty() {
        return Err(Error::validation("student data", "both supervised and soft-target sources are empty"));
    }

    let soft_index: HashMap<FrameRef, usize> = soft.frames.refs.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let mut used = vec![false; soft.len()];
    let mut data = Dataset { dim, ..Default::default() };
    for i in 0..supervised.len() {
        let label = supervised.labels[i];
        let target = match soft_index.get(&supervised.frames.refs[i]) {
            Some(&j) if supervised.frames.refs[i].utterance != 0 => {
                used[j] = true;
                mixed_target(&soft.targets[j], Some(label), settings.mix)
            }
            _ => Target::Hard(label),
        };
        data.push(supervised.frames.row(i), target);
    }
    let sup_n = data.len();
    for j in (0..soft.len()).filter(|&j| !used[j]) {
        data.push(soft.frames.row(j), Target::Soft(soft.targets[j].clone()));
    }
    let stream_n = data.len() - sup_n;

    let init = net::init_params(arch, schedule.seed)?;
    if stream_n == 0 {
        let (params, trace) = net::train(init, &data, schedule)?;
        return Ok(StudentRun {
            checkpoints: vec![StudentCheckpoint { unsupervised_hours: 0.0, params: params.clone() }],
            params,
            loss_trace: trace,
        });
    }
    if !(settings.sub_epoch_hours > 0.0) || !settings.sub_epoch_hours.is_finite() {
        return Err(Error::validation("sub_epoch_hours", "must be finite and positive"));
    }

    let mut loss_trace = Vec::new();
    let mut params = init;
    if settings.warm_start && sup_n > 0 {
        let warm = Dataset { dim, inputs: data.inputs[..sup_n * dim].to_vec(), targets: data.targets[..sup_n].to_vec() };
        let (p, trace) = net::train(params, &warm, schedule)?;
        params = p;
        loss_trace.extend(trace);
    }

    let hours_per_frame = soft.frames.hours_per_frame;
    let chunk_frames = settings.sub_epoch_hours / hours_per_frame;
    let chunks = ((stream_n as f64 / chunk_frames) - 1e-9).ceil().max(1.0) as usize;
    let boundary = |c: usize| -> usize {
        if c >= chunks {
            stream_n
        } else {
            ((c as f64 * chunk_frames).round() as usize).min(stream_n)
        }
    };

    let mut sgd = Sgd::new(params, &data, schedule.batch_size)?;
    let mut checkpoints = Vec::with_capacity(chunks);
    for c in 0..chunks {
        let (lo, hi) = (boundary(c), boundary(c + 1));
        let mut order: Vec<usize> = (0..sup_n).chain(sup_n + lo..sup_n + hi).collect();
        let perm = net::shuffled(order.len(), schedule.seed, "sub-epoch", c as u64);
        order = perm.into_iter().map(|i| order[i]).collect();
        let epoch = schedule.epochs as f64 * c as f64 / chunks as f64;
        let loss = sgd
            .pass(&order, schedule.lr_at(epoch))
            .map_err(|e| e.context(format!("sub-epoch {c}")))?;
        if !loss.is_finite() || !sgd.params().is_finite() {
            return Err(Error::Diverged { epoch: c, loss });
        }
        loss_trace.push(loss);
        checkpoints.push(StudentCheckpoint {
            unsupervised_hours: hi as f64 * hours_per_frame,
            params: sgd.params().clone(),
        });
    }
    Ok(StudentRun { params: sgd.into_params(), checkpoints, loss_trace })
}

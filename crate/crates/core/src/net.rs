//! Feedforward frame classifier over stacked context windows, trained with
//! cross-entropy and plain minibatch SGD under an exponential learning-rate
//! decay.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledFrames, StackedFrames, WindowSpec};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng;

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub window: WindowSpec,
    /// Raw frame dimension; the input layer is `window.width() * feature_dim`.
    pub feature_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::validation(format!("{}.feature_dim", self.name), "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation(format!("{}.num_classes", self.name), "must be at least 2"));
        }
        if let Some(i) = self.hidden_layers.iter().position(|&w| w == 0) {
            return Err(Error::validation(
                format!("{}.hidden_layers[{i}]", self.name),
                "widths must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.window.stacked_dim(self.feature_dim)
    }

    /// `[input, hidden..., classes]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden_layers);
        dims.push(self.num_classes);
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `inputs x outputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub layers: Vec<Layer>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut r = rng::stream(seed, "init", 0);
    let layers = arch
        .layer_dims()
        .windows(2)
        .map(|w| {
            let (inputs, outputs) = (w[0], w[1]);
            let s = (6.0 / (inputs + outputs) as f64).sqrt();
            Layer {
                inputs,
                outputs,
                weights: (0..inputs * outputs).map(|_| r.random_range(-s..=s)).collect(),
                biases: vec![0.0; outputs],
            }
        })
        .collect();
    Ok(ModelParams { arch: arch.clone(), layers })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape { what: "input", expected: self.input_dim(), got: x.len() });
        }
        let mut ws = Workspace::new(self);
        self.forward_ws(x, &mut ws);
        Ok(ws.acts.last().cloned().unwrap_or_default())
    }

    /// Argmax class with ties broken by lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Predicted classes for every row.
    pub fn predict_rows(&self, frames: &StackedFrames) -> Result<Vec<usize>> {
        if frames.dim != self.input_dim() {
            return Err(Error::Shape { what: "input", expected: self.input_dim(), got: frames.dim });
        }
        const CHUNK: usize = 512;
        let chunks = frames.len().div_ceil(CHUNK);
        let parts = Exec::default().map_range(chunks, |c| {
            let mut ws = Workspace::new(self);
            (c * CHUNK..((c + 1) * CHUNK).min(frames.len()))
                .map(|i| {
                    self.forward_ws(frames.row(i), &mut ws);
                    argmax(ws.logits())
                })
                .collect::<Vec<_>>()
        });
        Ok(parts.concat())
    }

    fn forward_ws(&self, x: &[f64], ws: &mut Workspace) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
            let out = &mut after[0];
            out.copy_from_slice(&layer.biases);
            for (xi, row) in input.iter().zip(layer.weights.chunks_exact(layer.outputs)) {
                if *xi != 0.0 {
                    for (o, w) in out.iter_mut().zip(row) {
                        *o += xi * w;
                    }
                }
            }
            if l < last {
                match self.arch.activation {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
        }
    }
}

/// Per-thread scratch space for forward/backward passes.
pub struct Workspace {
    /// Output of each layer; the last entry holds logits.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    probs: Vec<f64>,
}

impl Workspace {
    pub fn new(params: &ModelParams) -> Self {
        let widest = params.layers.iter().map(|l| l.inputs.max(l.outputs)).max().unwrap_or(0);
        Self {
            acts: params.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
            probs: vec![0.0; params.num_classes()],
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, 1.0, &mut out);
    out
}

fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = ((z - m) / temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::validation("temperature", "must be finite and positive"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(out)
}

/// `-sum_c target_c * log(max(posterior_c, 1e-12))`.
pub fn ce_loss(posterior: &[f64], target: &[f64]) -> f64 {
    posterior
        .iter()
        .zip(target)
        .filter(|(_, t)| **t != 0.0)
        .map(|(p, t)| -t * p.max(LOG_CLAMP).ln())
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.ln()).sum()
}

/// A training target: a hard class or a sparse distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Hard(usize),
    Soft(Vec<(usize, f64)>),
}

impl Target {
    pub fn to_dense(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        match self {
            Target::Hard(c) => v[*c] = 1.0,
            Target::Soft(entries) => entries.iter().for_each(|(c, p)| v[*c] += p),
        }
        v
    }

    fn loss(&self, probs: &[f64]) -> f64 {
        match self {
            Target::Hard(c) => -probs[*c].max(LOG_CLAMP).ln(),
            Target::Soft(entries) => entries
                .iter()
                .filter(|(_, p)| *p != 0.0)
                .map(|(c, p)| -p * probs[*c].max(LOG_CLAMP).ln())
                .sum(),
        }
    }

    fn max_class(&self) -> usize {
        match self {
            Target::Hard(c) => *c,
            Target::Soft(entries) => entries.iter().map(|(c, _)| *c).max().unwrap_or(0),
        }
    }
}

/// Input rows paired with targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<Target>,
}

impl Dataset {
    pub fn new(dim: usize, inputs: Vec<f64>, targets: Vec<Target>) -> Result<Self> {
        if inputs.len() != dim * targets.len() {
            return Err(Error::Shape { what: "dataset inputs", expected: dim * targets.len(), got: inputs.len() });
        }
        Ok(Self { dim, inputs, targets })
    }

    pub fn from_labeled(frames: &LabeledFrames) -> Self {
        Self {
            dim: frames.frames.dim,
            inputs: frames.frames.data.clone(),
            targets: frames.labels.iter().map(|&c| Target::Hard(c)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64], target: Target) {
        self.inputs.extend_from_slice(row);
        self.targets.push(target);
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        if self.dim != params.input_dim() {
            return Err(Error::Shape { what: "input", expected: params.input_dim(), got: self.dim });
        }
        if let Some(bad) = self.targets.iter().find(|t| t.max_class() >= params.num_classes()) {
            return Err(Error::Shape {
                what: "target class",
                expected: params.num_classes(),
                got: bad.max_class() + 1,
            });
        }
        Ok(())
    }
}

/// Gradient with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros(params: &ModelParams) -> Self {
        Self {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| v.fill(0.0));
    }

    fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(|v| v.iter_mut().for_each(|g| *g *= s));
    }

    /// Flattened in the same order as [`ModelParams::values`].
    pub fn values(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

/// Adds the gradient of one example's loss into `grad`; returns the loss.
fn accumulate(
    params: &ModelParams,
    x: &[f64],
    target: &Target,
    ws: &mut Workspace,
    grad: &mut Gradient,
) -> Result<f64> {
    params.forward_ws(x, ws);
    let c = params.num_classes();
    let Workspace { acts, delta, delta_prev, probs } = ws;
    softmax_into(&acts[acts.len() - 1], 1.0, probs);
    let loss = target.loss(probs);
    if !loss.is_finite() || acts[acts.len() - 1].iter().any(|v| !v.is_finite()) {
        let layer = acts.iter().position(|a| a.iter().any(|v| !v.is_finite())).unwrap_or(acts.len() - 1);
        return Err(Error::NonFinite { layer });
    }
    delta[..c].copy_from_slice(probs);
    match target {
        Target::Hard(k) => delta[*k] -= 1.0,
        Target::Soft(entries) => entries.iter().for_each(|(k, p)| delta[*k] -= p),
    }
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
        let d = &delta[..layer.outputs];
        for (b, g) in grad.biases[l].iter_mut().zip(d) {
            *b += g;
        }
        for (xi, grow) in input.iter().zip(grad.weights[l].chunks_exact_mut(layer.outputs)) {
            if *xi != 0.0 {
                for (g, di) in grow.iter_mut().zip(d) {
                    *g += xi * di;
                }
            }
        }
        if l > 0 {
            let prev = &mut delta_prev[..layer.inputs];
            for ((p, wrow), h) in prev.iter_mut().zip(layer.weights.chunks_exact(layer.outputs)).zip(input) {
                let s: f64 = wrow.iter().zip(d).map(|(w, g)| w * g).sum();
                *p = match params.arch.activation {
                    Activation::Tanh => s * (1.0 - h * h),
                    Activation::Relu => {
                        if *h > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                };
            }
            std::mem::swap(delta, delta_prev);
        }
    }
    Ok(loss)
}

/// Exact gradient of the mean cross-entropy over `batch`.
pub fn backward(params: &ModelParams, batch: &Dataset) -> Result<Gradient> {
    batch.check(params)?;
    if batch.is_empty() {
        return Err(Error::validation("batch", "must not be empty"));
    }
    let mut ws = Workspace::new(params);
    let mut grad = Gradient::zeros(params);
    for i in 0..batch.len() {
        accumulate(params, batch.row(i), &batch.targets[i], &mut ws, &mut grad)?;
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok(grad)
}

/// Mean cross-entropy of `params` over `data`.
pub fn mean_loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    data.check(params)?;
    let mut ws = Workspace::new(params);
    let mut total = 0.0;
    for i in 0..data.len() {
        params.forward_ws(data.row(i), &mut ws);
        let Workspace { acts, probs, .. } = &mut ws;
        softmax_into(&acts[acts.len() - 1], 1.0, probs);
        total += data.targets[i].loss(probs);
    }
    Ok(total / data.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub initial_lr: f64,
    pub decay_gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { epochs: 12, initial_lr: 0.1, decay_gamma: 0.8, batch_size: 32, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("schedule.epochs", "must be at least 1"));
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::validation("schedule.initial_lr", "must be finite and positive"));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::validation("schedule.decay_gamma", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("schedule.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// `initial_lr * decay_gamma^epoch`; fractional epochs are allowed.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        self.initial_lr * self.decay_gamma.powf(epoch)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Reusable SGD state for a sequence of passes over one dataset.
pub struct Sgd<'a> {
    params: ModelParams,
    data: &'a Dataset,
    batch_size: usize,
    ws: Workspace,
    grad: Gradient,
}

impl<'a> Sgd<'a> {
    pub fn new(params: ModelParams, data: &'a Dataset, batch_size: usize) -> Result<Self> {
        data.check(&params)?;
        let ws = Workspace::new(&params);
        let grad = Gradient::zeros(&params);
        Ok(Self { params, data, batch_size: batch_size.max(1), ws, grad })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// One pass over `order` at learning rate `lr`; returns the mean loss.
    pub fn pass(&mut self, order: &[usize], lr: f64) -> Result<f64> {
        let mut total = 0.0;
        for batch in order.chunks(self.batch_size) {
            self.grad.clear();
            for &i in batch {
                total += accumulate(&self.params, self.data.row(i), &self.data.targets[i], &mut self.ws, &mut self.grad)?;
            }
            let step = lr / batch.len() as f64;
            for (layer, (gw, gb)) in self.params.layers.iter_mut().zip(self.grad.weights.iter().zip(&self.grad.biases)) {
                for (w, g) in layer.weights.iter_mut().zip(gw) {
                    *w -= step * g;
                }
                for (b, g) in layer.biases.iter_mut().zip(gb) {
                    *b -= step * g;
                }
            }
        }
        Ok(total / order.len().max(1) as f64)
    }
}

/// Seeded permutation of `0..n` for `(seed, stream, index)`.
pub fn shuffled(n: usize, seed: u64, stream: &str, index: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, stream, index));
    order
}

/// Plain SGD for `schedule.epochs` epochs; returns the trained parameters and
/// the mean training loss of every epoch.
pub fn train(params: ModelParams, data: &Dataset, schedule: &TrainSchedule) -> Result<(ModelParams, Vec<f64>)> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training data", "must not be empty"));
    }
    let mut sgd = Sgd::new(params, data, schedule.batch_size)?;
    let mut trace = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let order = shuffled(data.len(), schedule.seed, "epoch", epoch as u64);
        let loss = sgd
            .pass(&order, schedule.lr_at(epoch as f64))
            .map_err(|e| e.context(format!("epoch {epoch}")))?;
        if !loss.is_finite() || !sgd.params().is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        trace.push(loss);
    }
    Ok((sgd.into_params(), trace))
}

/// Fraction of rows whose argmax posterior differs from the label.
pub fn frame_error_rate(params: &ModelParams, test: &LabeledFrames) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::validation("test set", "must not be empty"));
    }
    let predictions = params.predict_rows(&test.frames)?;
    let errors = predictions.iter().zip(&test.labels).filter(|(p, y)| p != y).count();
    Ok(errors as f64 / test.len() as f64)
}

const CHECKPOINT_MAGIC: &str = "desklab-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub schedule: Option<TrainSchedule>,
    pub seed: u64,
}

/// Text header followed by one lowercase-hex f64 bit pattern per line.
pub fn write_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str(&format!("arch {}\n", serde_json::to_string(&params.arch).unwrap_or_default()));
    match &meta.schedule {
        Some(s) => out.push_str(&format!("schedule {}\n", serde_json::to_string(s).unwrap_or_default())),
        None => out.push_str("schedule none\n"),
    }
    out.push_str(&format!("seed {}\n", meta.seed));
    out.push_str(&format!("values {}\n", params.param_count()));
    for v in params.values() {
        out.push_str(&format!("{:016x}\n", v.to_bits()));
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<(ModelParams, CheckpointMeta)> {
    let bad = |why: String| Error::Format(format!("checkpoint: {why}"));
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing header".into()));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(format!("missing {name}")))?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| bad(format!("expected `{name}` line, found `{line}`")))
    };
    let arch: ArchSpec = serde_json::from_str(&field("arch")?).map_err(|e| bad(e.to_string()))?;
    let schedule_text = field("schedule")?;
    let schedule = if schedule_text == "none" {
        None
    } else {
        Some(serde_json::from_str(&schedule_text).map_err(|e| bad(e.to_string()))?)
    };
    let seed = field("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
    let count: usize = field("values")?.parse().map_err(|_| bad("bad value count".into()))?;
    let mut params = init_params(&arch, 0)?;
    if count != params.param_count() {
        return Err(bad(format!("arch needs {} values, header says {count}", params.param_count())));
    }
    let values: Vec<f64> = lines
        .map(|l| u64::from_str_radix(l.trim(), 16).map(f64::from_bits).map_err(|_| bad(format!("bad value `{l}`"))))
        .collect::<Result<_>>()?;
    if values.len() != count {
        return Err(bad(format!("expected {count} values, found {}", values.len())));
    }
    for (slot, v) in params.values_mut().zip(values) {
        *slot = v;
    }
    Ok((params, CheckpointMeta { schedule, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn arch(input: usize, hidden: &[usize], classes: usize, activation: Activation) -> ArchSpec {
        ArchSpec {
            name: "t".into(),
            window: WindowSpec::identity(),
            feature_dim: input,
            hidden_layers: hidden.to_vec(),
            num_classes: classes,
            activation,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch(6, &[8], 4, Activation::Tanh);
        let p = init_params(&a, 3).unwrap();
        assert_eq!(p, init_params(&a, 3).unwrap());
        assert_ne!(p, init_params(&a, 4).unwrap());
        assert!(p.layers.iter().all(|l| l.biases.iter().all(|b| *b == 0.0)));
        assert_eq!(p.param_count(), 92);
        assert_eq!(a.param_count(), 92);
        let s = (6.0f64 / 14.0).sqrt();
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= s));
    }

    #[test]
    fn forward_sums_to_one_and_checks_shape() {
        let p = init_params(&arch(5, &[7, 3], 6, Activation::Relu), 1).unwrap();
        let out = p.forward(&[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(p.forward(&[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_net_is_uniform() {
        let mut p = init_params(&arch(3, &[], 4, Activation::Tanh), 1).unwrap();
        p.values_mut().for_each(|v| *v = 0.0);
        let out = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn tiny_net_matches_hand_computation() {
        // 2 inputs -> 1 tanh unit -> 2 classes.
        let mut p = init_params(&arch(2, &[1], 2, Activation::Tanh), 0).unwrap();
        p.layers[0].weights = vec![0.5, -0.25];
        p.layers[0].biases = vec![0.1];
        p.layers[1].weights = vec![2.0, -1.0];
        p.layers[1].biases = vec![0.0, 0.3];
        let x = [1.0, 2.0];
        let h = (0.5 * 1.0 - 0.25 * 2.0 + 0.1f64).tanh();
        let z0 = 2.0 * h;
        let z1 = -h + 0.3;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let expected = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let got = p.forward(&x).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_softmax_cases() {
        let p = softmax_temperature(&[2.0, 0.0], 1.0).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        let hot = softmax_temperature(&[5.0, -3.0, 1.0], 1e6).unwrap();
        assert!(hot.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
        for t in [0.1, 1.0, 7.0] {
            let eq = softmax_temperature(&[4.0; 5], t).unwrap();
            assert!(eq.iter().all(|v| (v - 0.2).abs() < 1e-15));
        }
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -2.0).is_err());
        let big = softmax(&[1000.0, -1000.0, 999.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(ce_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]), 0.0);
        let t = [0.2, 0.3, 0.5];
        assert!((ce_loss(&t, &t) - entropy(&t)).abs() < 1e-15);
        let u = [0.25; 4];
        assert!((ce_loss(&u, &[1.0, 0.0, 0.0, 0.0]) - 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.3863).abs() < 1e-4);
        assert!(ce_loss(&[0.0, 1.0], &[1.0, 0.0]).is_finite());
    }

    fn random_batch(p: &ModelParams, n: usize, seed: u64, soft: bool) -> Dataset {
        let mut r = rng::stream(seed, "batch", 0);
        let c = p.num_classes();
        let mut data = Dataset { dim: p.input_dim(), ..Default::default() };
        for _ in 0..n {
            let row: Vec<f64> = (0..p.input_dim()).map(|_| StandardNormal.sample(&mut r)).collect();
            let target = if soft {
                let w: Vec<f64> = (0..c).map(|_| r.random_range(0.0..1.0)).collect();
                let s: f64 = w.iter().sum();
                Target::Soft(w.iter().enumerate().map(|(i, v)| (i, v / s)).collect())
            } else {
                Target::Hard(r.random_range(0..c))
            };
            data.push(&row, target);
        }
        data
    }

    /// Central differences over every parameter.
    pub(crate) fn numeric_gradient(p: &ModelParams, data: &Dataset, h: f64) -> Vec<f64> {
        let n = p.param_count();
        (0..n)
            .map(|k| {
                let mut plus = p.clone();
                let mut minus = p.clone();
                *plus.values_mut().nth(k).unwrap() += h;
                *minus.values_mut().nth(k).unwrap() -= h;
                (mean_loss(&plus, data).unwrap() - mean_loss(&minus, data).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    pub(crate) fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = init_params(&arch(6, &[5], 4, Activation::Tanh), 11).unwrap();
        for soft in [false, true] {
            let data = random_batch(&p, 8, 2, soft);
            let analytic = backward(&p, &data).unwrap().values();
            let numeric = numeric_gradient(&p, &data, 1e-5);
            assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn zero_net_uniform_target_bias_gradient_vanishes() {
        let mut p = init_params(&arch(3, &[], 4, Activation::Tanh), 0).unwrap();
        p.values_mut().for_each(|v| *v = 0.0);
        let data = Dataset::new(3, vec![1.0, 2.0, 3.0], vec![Target::Soft((0..4).map(|c| (c, 0.25)).collect())]).unwrap();
        let g = backward(&p, &data).unwrap();
        assert!(g.biases[0].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn duplicating_the_batch_keeps_the_gradient() {
        let p = init_params(&arch(4, &[3], 3, Activation::Relu), 5).unwrap();
        let data = random_batch(&p, 6, 9, false);
        let mut doubled = data.clone();
        for i in 0..data.len() {
            doubled.push(data.row(i), data.targets[i].clone());
        }
        let a = backward(&p, &data).unwrap().values();
        let b = backward(&p, &doubled).unwrap().values();
        assert!(max_relative_error(&a, &b) < 1e-12);
    }

    #[test]
    fn non_finite_input_is_reported_with_layer() {
        let p = init_params(&arch(2, &[3], 2, Activation::Tanh), 5).unwrap();
        let data = Dataset::new(2, vec![f64::NAN, 1.0], vec![Target::Hard(0)]).unwrap();
        assert!(matches!(backward(&p, &data), Err(Error::NonFinite { layer: 0 })));
    }

    #[test]
    fn learning_rate_schedule() {
        let s = TrainSchedule { decay_gamma: 1.0, ..Default::default() };
        assert_eq!(s.lr_at(0.0), s.lr_at(11.0));
        let s = TrainSchedule { epochs: 12, initial_lr: 0.1, decay_gamma: 0.8, ..Default::default() };
        let last = s.lr_at((s.epochs - 1) as f64);
        assert!((last - 0.1 * 0.8f64.powi(11)).abs() < 1e-15);
        assert!((last - 0.00859).abs() < 1e-5);
    }

    fn separable(n: usize) -> LabeledFrames {
        let mut r = rng::stream(1, "sep", 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let x: f64 = r.random_range(0.2..1.0) * if c == 0 { -1.0 } else { 1.0 };
            rows.extend([x, r.random_range(-1.0..1.0)]);
            labels.push(c);
        }
        LabeledFrames::from_rows(2, rows, labels).unwrap()
    }

    #[test]
    fn separable_toy_set_reaches_zero_error() {
        let data = separable(200);
        let p = init_params(&arch(2, &[4], 2, Activation::Tanh), 2).unwrap();
        let schedule = TrainSchedule { epochs: 12, initial_lr: 0.5, decay_gamma: 0.9, batch_size: 8, seed: 3 };
        let (trained, trace) = train(p, &Dataset::from_labeled(&data), &schedule).unwrap();
        assert_eq!(trace.len(), 12);
        assert!(trace.iter().all(|l| l.is_finite()));
        assert_eq!(frame_error_rate(&trained, &data).unwrap(), 0.0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = Dataset::from_labeled(&separable(64));
        let p = init_params(&arch(2, &[4], 2, Activation::Tanh), 2).unwrap();
        let s = TrainSchedule { epochs: 3, batch_size: 5, ..Default::default() };
        let a = train(p.clone(), &data, &s).unwrap();
        let b = train(p, &data, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_rejects_empty_data_and_reports_divergence() {
        let p = init_params(&arch(2, &[4], 2, Activation::Relu), 2).unwrap();
        assert!(train(p.clone(), &Dataset { dim: 2, ..Default::default() }, &TrainSchedule::default()).is_err());
        let data = Dataset::new(2, vec![1e10, 1e10, 1e10, 1e10], vec![Target::Hard(0), Target::Hard(1)]).unwrap();
        let mut s = TrainSchedule { epochs: 2, initial_lr: 1e300, ..Default::default() };
        s.batch_size = 1;
        let err = train(p, &data, &s).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn frame_error_rate_cases() {
        assert!(frame_error_rate(
            &init_params(&arch(1, &[], 2, Activation::Tanh), 0).unwrap(),
            &LabeledFrames::from_rows(1, vec![], vec![]).unwrap()
        )
        .is_err());
        // Uniform net predicts class 0 everywhere (lowest-index tie rule).
        let mut p = init_params(&arch(1, &[], 4, Activation::Tanh), 0).unwrap();
        p.values_mut().for_each(|v| *v = 0.0);
        let mut r = rng::stream(4, "labels", 0);
        let labels: Vec<usize> = (0..10_000).map(|_| r.random_range(0..4)).collect();
        let frames = LabeledFrames::from_rows(1, vec![0.0; 10_000], labels.clone()).unwrap();
        let expected = labels.iter().filter(|&&l| l != 0).count() as f64 / 10_000.0;
        let fer = frame_error_rate(&p, &frames).unwrap();
        assert_eq!(fer, expected);
        assert!((fer - 0.75).abs() < 0.02);
        let balanced = LabeledFrames::from_rows(1, vec![0.0; 1000], (0..1000).map(|i| i % 2).collect()).unwrap();
        let mut p2 = init_params(&arch(1, &[], 2, Activation::Tanh), 0).unwrap();
        p2.values_mut().for_each(|v| *v = 0.0);
        assert_eq!(frame_error_rate(&p2, &balanced).unwrap(), 0.5);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init_params(&arch(6, &[8], 4, Activation::Tanh), 3).unwrap();
        let meta = CheckpointMeta { schedule: Some(TrainSchedule::default()), seed: 3 };
        let text = write_checkpoint(&p, &meta);
        assert!(text.lines().nth(5).unwrap().chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        let (back, meta_back) = read_checkpoint(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(meta_back, meta);
        assert!(read_checkpoint(&text.replace("values 92", "values 91")).is_err());
        assert!(read_checkpoint("garbage").is_err());
    }
}

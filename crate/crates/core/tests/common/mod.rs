#![allow(dead_code)]

use desklab::datagen::WindowSpec;
use desklab::distill::{compress_posterior, decompress};
use desklab::net::{self, Activation, ArchSpec, Dataset, ModelParams, Target};
use desklab::rng::StreamRng;
use rand::Rng;

pub fn random_simplex(r: &mut StreamRng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -r.random_range(1e-12..1.0f64).ln()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Round-trip measurements for one posterior.
pub struct CodecCheck {
    pub argmax_kept: bool,
    pub linf: f64,
    pub bound: f64,
    pub sum_error: f64,
}

pub fn codec_check(p: &[f64], k: usize, bits: u8) -> CodecCheck {
    let entry = compress_posterior(p, k, bits).unwrap();
    let d = decompress(&entry, bits, p.len()).unwrap();
    let mut dense = vec![0.0; p.len()];
    for &(c, v) in &d {
        dense[c] = v;
    }
    let top = d[0].0;
    let argmax_kept = top == net::argmax(p) && dense.iter().all(|&v| v <= dense[top]);
    let linf = p.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut sorted = p.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let kept_mass: f64 = sorted.iter().take(k).sum();
    let bound = k as f64 / ((1u64 << bits) - 1) as f64 + (1.0 - kept_mass);
    let sum_error = (d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs();
    CodecCheck { argmax_kept, linf, bound, sum_error }
}

pub fn small_arch(input: usize, hidden: Vec<usize>, classes: usize, activation: Activation) -> ArchSpec {
    ArchSpec {
        name: "net".into(),
        window: WindowSpec::identity(),
        feature_dim: input,
        hidden_layers: hidden,
        num_classes: classes,
        activation,
    }
}

pub fn random_batch(r: &mut StreamRng, p: &ModelParams, rows: usize, soft: bool) -> Dataset {
    let dim = p.input_dim();
    let classes = p.num_classes();
    let mut d = Dataset { dim, inputs: Vec::new(), targets: Vec::new() };
    for _ in 0..rows {
        let x: Vec<f64> = (0..dim).map(|_| r.random_range(-1.5..1.5)).collect();
        let t = if soft {
            Target::Soft(random_simplex(r, classes).into_iter().enumerate().collect())
        } else {
            Target::Hard(r.random_range(0..classes))
        };
        d.push(&x, t);
    }
    d
}

/// Max relative error between the analytic gradient and central differences.
pub fn gradient_error(p: &ModelParams, data: &Dataset, h: f64) -> f64 {
    let analytic = net::backward(p, data).unwrap().values();
    let numeric: Vec<f64> = (0..p.param_count())
        .map(|k| {
            let mut plus = p.clone();
            let mut minus = p.clone();
            *plus.values_mut().nth(k).unwrap() += h;
            *minus.values_mut().nth(k).unwrap() -= h;
            (net::mean_loss(&plus, data).unwrap() - net::mean_loss(&minus, data).unwrap()) / (2.0 * h)
        })
        .collect();
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// A random net: 1-8 inputs, up to two hidden layers, 2-5 classes.
pub fn random_net(r: &mut StreamRng, seed: u64) -> ModelParams {
    let input = r.random_range(1..=8);
    let depth = r.random_range(0..=2);
    let hidden = (0..depth).map(|_| r.random_range(1..=6)).collect();
    let classes = r.random_range(2..=5);
    let act = if r.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let mut p = net::init_params(&small_arch(input, hidden, classes, act), seed).unwrap();
    for layer in &mut p.layers {
        for b in &mut layer.biases {
            *b = r.random_range(-0.5..0.5);
        }
    }
    p
}

/// Smallest |pre-activation| of any ReLU unit over `data`; infinite for
/// tanh nets. Central differences are only meaningful away from the kink.
pub fn relu_margin(p: &ModelParams, data: &Dataset) -> f64 {
    if p.arch.activation != Activation::Relu {
        return f64::INFINITY;
    }
    let hidden = p.layers.len() - 1;
    let mut margin = f64::INFINITY;
    for i in 0..data.len() {
        let mut x = data.row(i).to_vec();
        for layer in &p.layers[..hidden] {
            let mut z = layer.biases.clone();
            for (a, xa) in x.iter().enumerate() {
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo += xa * layer.weights[a * layer.outputs + o];
                }
            }
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            x = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

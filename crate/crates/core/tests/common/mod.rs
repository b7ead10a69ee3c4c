//! Helpers shared by the integration tests: random models, loss values
//! written out independently of the library, and a finite-difference
//! gradient checker that steps around ReLU kinks.

#![allow(dead_code)]

use std::path::PathBuf;

use fedd2s::baselines::ProtocolName;
use fedd2s::experiment::RunConfig;
use fedd2s::nn::{
    cross_entropy_grad, distill_kl_grad, forward_range, mse_grad, Activation, KlOrder, LayerSpec, ModelParams,
    ModelSpec, ParamRange, Tape, Tensor,
};
use fedd2s::protocol::DropRate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// The desk task: the 8×8 digit fixture, 8 clients, α = 0.1, 30 rounds.
pub fn desk_config(protocol: ProtocolName, seed: u64) -> RunConfig {
    RunConfig {
        protocol,
        dataset: format!("csv:{}", fixture("digits8x8.csv").display()),
        z0: Some(DropRate::Every(3)),
        fixed_layer: "C3".into(),
        seed,
        ..RunConfig::default()
    }
}

/// A small synthetic task for tests that only need a working federation.
pub fn tiny_config(protocol: ProtocolName, seed: u64) -> RunConfig {
    RunConfig {
        protocol,
        rounds: 4,
        clients: 4,
        dataset: "synth:3,20,16,2.0".into(),
        batch_size: 8,
        ua_window: 2,
        seed,
        ..RunConfig::default()
    }
}

/// A random conv/dense stack with at most `max_params` parameters.
pub fn random_model(rng: &mut ChaCha8Rng, max_params: usize) -> (ModelSpec, ModelParams) {
    loop {
        let conv_input = rng.random_bool(0.7);
        let input = if conv_input {
            vec![rng.random_range(3..=8), rng.random_range(3..=8), rng.random_range(1..=3)]
        } else {
            vec![1, 1, rng.random_range(2..=12)]
        };
        let mut layers = Vec::new();
        if conv_input {
            for _ in 0..rng.random_range(1..=3) {
                let kernel = rng.random_range(1..=3);
                layers.push(LayerSpec::Conv2d {
                    out_channels: rng.random_range(1..=6),
                    kernel_size: kernel,
                    stride: rng.random_range(1..=2),
                    padding: rng.random_range(0..=kernel / 2 + 1),
                    activation: if rng.random_bool(0.8) { Activation::Relu } else { Activation::None },
                });
            }
        }
        layers.push(LayerSpec::Flatten);
        for _ in 0..rng.random_range(0..=2) {
            layers.push(LayerSpec::Dense { units: rng.random_range(2..=16), activation: Activation::Relu });
        }
        layers.push(LayerSpec::Dense { units: rng.random_range(2..=5), activation: Activation::None });
        let Ok(spec) = ModelSpec::new(input, layers) else {
            continue;
        };
        if spec.num_params() > max_params {
            continue;
        }
        let mut params = ModelParams::init(&spec, rng);
        // Non-zero biases so that every parameter matters.
        for i in 0..params.num_params() {
            let v = params.flat_mut(i);
            if *v == 0.0 {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        return (spec, params);
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_distribution(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = m + row.iter().map(|&z| (z / tau - m).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z / tau - lse).collect()
}

/// A loss on logits, with its value computed directly from the definition.
#[derive(Clone, Debug)]
pub enum Objective {
    CrossEntropy { labels: Vec<usize>, tau: f64 },
    Kl { teacher: Tensor, tau: f64, order: KlOrder },
    Mse { target: Tensor },
}

impl Objective {
    pub fn name(&self) -> String {
        match self {
            Objective::CrossEntropy { tau, .. } => format!("ce(tau={tau})"),
            Objective::Kl { tau, order, .. } => format!("kl(tau={tau}, {order:?})"),
            Objective::Mse { .. } => "mse".into(),
        }
    }

    /// Loss value from the textbook formula.
    pub fn value(&self, logits: &Tensor) -> f64 {
        let b = logits.batch() as f64;
        match self {
            Objective::CrossEntropy { labels, tau } => {
                logits.rows().zip(labels).map(|(r, &y)| -log_softmax(r, *tau)[y]).sum::<f64>() / b
            }
            Objective::Kl { teacher, tau, order } => {
                let total: f64 = logits
                    .rows()
                    .zip(teacher.rows())
                    .map(|(r, p)| {
                        let lq = log_softmax(r, *tau);
                        match order {
                            KlOrder::TeacherStudent => {
                                p.iter().zip(&lq).map(|(&p, &lq)| p * (p.ln() - lq)).sum::<f64>()
                            }
                            KlOrder::StudentTeacher => {
                                lq.iter().zip(p).map(|(&lq, &p)| lq.exp() * (lq - p.ln())).sum::<f64>()
                            }
                        }
                    })
                    .sum();
                tau * tau * total / b
            }
            Objective::Mse { target } => {
                logits.data().iter().zip(target.data()).map(|(a, t)| (a - t) * (a - t)).sum::<f64>()
                    / logits.len() as f64
            }
        }
    }

    /// Loss and gradient from the library.
    pub fn analytic(&self, logits: &Tensor) -> (f64, Tensor) {
        match self {
            Objective::CrossEntropy { labels, tau } => cross_entropy_grad(logits, labels, *tau).unwrap(),
            Objective::Kl { teacher, tau, order } => distill_kl_grad(logits, teacher, *tau, *order).unwrap(),
            Objective::Mse { target } => mse_grad(logits, target).unwrap(),
        }
    }
}

/// Output of layers `from+1..=to` plus the sign pattern of every ReLU
/// layer's output along the way.
pub fn forward_pattern(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    from: usize,
    to: usize,
) -> (Tensor, Vec<bool>) {
    let mut h = x.clone();
    let mut pattern = Vec::new();
    for l in from + 1..=to {
        h = forward_range(spec, params, &h, l - 1, l).unwrap();
        if spec.layer(l).activation() == Activation::Relu {
            pattern.extend(h.data().iter().map(|&v| v > 0.0));
        }
    }
    (h, pattern)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates where every step size crossed a ReLU kink.
    pub excluded: usize,
    pub worst_rel_err: f64,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.worst_rel_err = self.worst_rel_err.max(other.worst_rel_err);
    }
}

const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Entries smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central difference of `f` along one coordinate, using the first step size
/// whose two evaluation points share the base activation pattern.
fn central_difference(mut eval: impl FnMut(f64) -> (f64, Vec<bool>), base: &[bool]) -> Option<f64> {
    for h in STEPS {
        let (fp, pp) = eval(h);
        let (fm, pm) = eval(-h);
        if pp == base && pm == base {
            return Some((fp - fm) / (2.0 * h));
        }
    }
    None
}

/// Compares parameter and input gradients of `objective ∘ model` against
/// central finite differences.
pub fn check_model_gradients(spec: &ModelSpec, params: &ModelParams, x: &Tensor, objective: &Objective) -> GradReport {
    let mut tape = Tape::new();
    let logits = tape.forward(spec, params, x, 0, spec.num_layers()).unwrap().clone();
    let (_, g) = objective.analytic(&logits);
    let bw = tape.backward(spec, params, &g, ParamRange::all(spec), true).unwrap();
    let analytic_params = bw.grads.flat();
    let analytic_input = bw.input_grad.unwrap();
    assert_eq!(analytic_params.len(), params.num_params());
    let (_, base) = forward_pattern(spec, params, x, 0, spec.num_layers());

    let mut report = GradReport::default();
    let mut record = |a: f64, n: Option<f64>| match n {
        Some(n) => {
            report.checked += 1;
            report.worst_rel_err = report.worst_rel_err.max(rel_err(a, n));
        }
        None => report.excluded += 1,
    };

    let mut p = params.clone();
    for (i, &a) in analytic_params.iter().enumerate() {
        let orig = *p.flat_mut(i);
        let n = central_difference(
            |h| {
                *p.flat_mut(i) = orig + h;
                let (out, pat) = forward_pattern(spec, &p, x, 0, spec.num_layers());
                *p.flat_mut(i) = orig;
                (objective.value(&out), pat)
            },
            &base,
        );
        record(a, n);
    }

    let mut xp = x.clone();
    for (i, &a) in analytic_input.data().iter().enumerate() {
        let orig = xp.data()[i];
        let n = central_difference(
            |h| {
                xp.data_mut()[i] = orig + h;
                let (out, pat) = forward_pattern(spec, params, &xp, 0, spec.num_layers());
                xp.data_mut()[i] = orig;
                (objective.value(&out), pat)
            },
            &base,
        );
        record(a, n);
    }
    report
}

/// Kink-aware finite-difference gradient of `f` with respect to the
/// parameters of layers `lo..=hi`. `f` returns a value and an activation
/// pattern; coordinates outside the range are `Some(0.0)` and coordinates
/// where every step crossed a kink are `None`.
pub fn numeric_param_grad(
    params: &ModelParams,
    lo: usize,
    hi: usize,
    mut f: impl FnMut(&ModelParams) -> (f64, Vec<bool>),
) -> Vec<Option<f64>> {
    let (_, base) = f(params);
    let mut p = params.clone();
    (0..params.num_params())
        .map(|i| {
            let l = params.layer_of_flat(i);
            if l < lo || l > hi {
                return Some(0.0);
            }
            let orig = *p.flat_mut(i);
            central_difference(
                |h| {
                    *p.flat_mut(i) = orig + h;
                    let out = f(&p);
                    *p.flat_mut(i) = orig;
                    out
                },
                &base,
            )
        })
        .collect()
}

/// Flattens a gradient container, reading absent blocks as zeros.
pub fn dense_flat(grads: &ModelParams, like: &ModelParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(like.num_params());
    for (g, p) in grads.blocks().iter().zip(like.blocks()) {
        match (g, p) {
            (Some(g), Some(_)) => {
                out.extend_from_slice(g.weight.data());
                out.extend_from_slice(g.bias.data());
            }
            (None, Some(p)) => out.extend(std::iter::repeat_n(0.0, p.weight.len() + p.bias.len())),
            _ => {}
        }
    }
    out
}

pub fn desk_dataset() -> fedd2s::data::Dataset {
    fedd2s::data::load_csv(&fixture("digits8x8.csv")).unwrap()
}

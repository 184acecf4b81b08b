//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stressformer::metrics::ConfusionMatrix;
use stressformer::model::Mode;
use stressformer::{ModelConfig, Tape, Tensor, Transformer, Var};

pub const H: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Random entries bounded away from zero so ReLU kinks are not straddled.
fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `sum(build(inputs) ⊙ r)`.
fn weighted_loss(inputs: &[Tensor], r: &Tensor, build: Build) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

/// Worst relative error over every input coordinate at 10 seeded points.
pub fn max_rel_error_primitive(shapes: &[Vec<usize>], build: Build) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng).with_grad()).collect();
        let out_shape = {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x)).collect();
            let o = build(&mut t, &vars);
            t.value(o).shape().to_vec()
        };
        let r = random_tensor(&out_shape, &mut rng);
        let (tape, vars, loss) = weighted_loss(&inputs, &r, build);
        let grads = tape.backward(loss).unwrap();
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("input gradient").to_vec();
            for j in 0..inputs[i].len() {
                let orig = inputs[i].data()[j];
                inputs[i].data_mut()[j] = orig + H;
                let (t, _, l) = weighted_loss(&inputs, &r, build);
                let plus = t.value(l).item();
                inputs[i].data_mut()[j] = orig - H;
                let (t, _, l) = weighted_loss(&inputs, &r, build);
                let minus = t.value(l).item();
                inputs[i].data_mut()[j] = orig;
                worst = worst.max(rel_error(analytic[j], (plus - minus) / (2.0 * H)));
            }
        }
    }
    worst
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch_len: 4,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        ff_dim: 8,
        dropout_rate: 0.1,
        ..ModelConfig::for_window(16)
    }
}

fn model_loss(model: &Transformer, windows: &[&[f64]], labels: &[usize], dropout_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (tape, loss, _) = model.loss_tape(windows, labels, Mode::Train(&mut rng)).unwrap();
    tape.value(loss).item()
}

/// Full-model loss gradient check on `coords` sampled coordinates at each of
/// `points` seeded weight initializations, dropout active with a reseeded rng.
pub fn full_model_max_rel_error(points: u64, coords: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut model = Transformer::new(tiny_config(), &mut rng).unwrap();
        let windows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..16).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
        let labels = [0, 1, 2, 1];
        let dropout_seed = 77 + seed;

        model.weights.set_requires_grad(true);
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (tape, loss, out) = model.loss_tape(&refs, &labels, Mode::Train(&mut drng)).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = out
            .params
            .iter()
            .map(|v| grads.get(*v).expect("parameter gradient").to_vec())
            .collect();
        model.weights.set_requires_grad(false);

        for _ in 0..coords {
            let pi = rng.random_range(0..analytic.len());
            let ei = rng.random_range(0..analytic[pi].len());
            let orig = model.weights.params()[pi].1.data()[ei];
            let set = |m: &mut Transformer, v: f64| {
                let mut ps = m.weights.params_mut();
                ps[pi].1.data_mut()[ei] = v;
            };
            set(&mut model, orig + H);
            let plus = model_loss(&model, &refs, &labels, dropout_seed);
            set(&mut model, orig - H);
            let minus = model_loss(&model, &refs, &labels, dropout_seed);
            set(&mut model, orig);
            worst = worst.max(rel_error(analytic[pi][ei], (plus - minus) / (2.0 * H)));
        }
    }
    worst
}

/// Metrics recomputed from raw prediction/label lists without a confusion matrix.
pub struct BruteMetrics {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

pub fn brute_metrics(preds: &[usize], labels: &[usize]) -> BruteMetrics {
    let n = labels.len() as f64;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..3 {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let predicted = preds.iter().filter(|p| **p == c).count() as f64;
        let support = labels.iter().filter(|l| **l == c).count() as f64;
        let prec = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let rec = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        wp += prec * support;
        wr += rec * support;
        wf += f1 * support;
    }
    BruteMetrics {
        accuracy: correct / n,
        weighted_precision: wp / n,
        weighted_recall: wr / n,
        weighted_f1: wf / n,
    }
}

pub fn brute_confusion(preds: &[usize], labels: &[usize]) -> ConfusionMatrix {
    let mut counts = [[0u64; 3]; 3];
    for t in 0..3 {
        for p in 0..3 {
            counts[t][p] = preds.iter().zip(labels).filter(|(pp, l)| **pp == p && **l == t).count() as u64;
        }
    }
    ConfusionMatrix { counts }
}

//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use fha_lab::autodiff::{Tape, Tensor, Var};
use fha_lab::dependency::DiscreteJoint;
use fha_lab::kernels::KernelConfig;
use fha_lab::losses::{
    adaptation_loss_with_generated, classification_loss, discriminator_loss, similarity_loss, AdaptationInputs, G4Sign,
    GroupId, SimilarityNorm, SimilarityTarget,
};
use fha_lab::training::ExperimentConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Backward-pass gradient of `f` at `inputs` against central differences.
/// Returns `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)`
/// over all inputs jointly.
pub fn gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();

    let eval = |inp: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inp.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for t in 0..work.len() {
        for e in 0..work[t].len() {
            let orig = work[t].data()[e];
            work[t].data_mut()[e] = orig + FD_STEP;
            let up = eval(&work);
            work[t].data_mut()[e] = orig - FD_STEP;
            let down = eval(&work);
            work[t].data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8)
}

fn softmax_rows(tape: &mut Tape, logits: Var) -> Var {
    tape.softmax(logits, 1).unwrap()
}

/// Relative gradient errors of every loss on one random small instance,
/// labelled by loss name.
pub fn loss_gradient_errors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let classes = rng.random_range(2..=4);
    let batch = rng.random_range(2..=5);
    let feat = rng.random_range(1..=4);
    let mut out = Vec::new();

    let logits: Vec<Tensor> = (0..classes).map(|_| random_matrix(rng, batch, classes, 2.0)).collect();
    out.push((
        "L_c",
        gradient_error(&logits, |tape, v| {
            let probs: Vec<Var> = v.iter().map(|&l| softmax_rows(tape, l)).collect();
            classification_loss(tape, &probs).unwrap()
        }),
    ));

    let sems: Vec<Tensor> = (0..classes).map(|_| random_matrix(rng, batch, feat, 1.5)).collect();
    let m_l = rng.random_range(1..=3) * classes;
    let target = random_matrix(rng, m_l, feat, 1.5);
    let labels: Vec<usize> = (0..m_l).map(|i| i % classes).collect();
    let restricted = rng.random_bool(0.5);
    let norm = rng.random_range(0.5..5.0);
    out.push((
        "L_s",
        gradient_error(&sems, |tape, v| {
            let t = SimilarityTarget {
                features: &target,
                labels: &labels,
                class_restricted: restricted,
            };
            similarity_loss(tape, v, &t, SimilarityNorm::Fixed(norm)).unwrap()
        }),
    ));

    let sigma = rng.random_range(0.5..2.0);
    let kernel = KernelConfig::fixed(sigma, 1e-6);
    let div: Vec<Tensor> = (0..classes)
        .map(|_| random_matrix(rng, batch.max(3), feat, 1.0))
        .collect();
    out.push((
        "L_d",
        gradient_error(&div, |tape, v| fha_lab::hsic::diversity_loss(tape, v, &kernel).unwrap()),
    ));

    let pairs = rng.random_range(2..=8);
    let d_logits = random_matrix(rng, pairs, 4, 2.0);
    let groups: Vec<GroupId> = (0..pairs).map(|_| GroupId::ALL[rng.random_range(0..4)]).collect();
    out.push((
        "L_D",
        gradient_error(&[d_logits], |tape, v| {
            let p = softmax_rows(tape, v[0]);
            discriminator_loss(tape, p, &groups).unwrap()
        }),
    ));

    let g2 = random_matrix(rng, pairs, 4, 2.0);
    let g4 = random_matrix(rng, pairs, 4, 2.0);
    let tgt = random_matrix(rng, m_l, classes, 2.0);
    let gen = random_matrix(rng, batch, classes, 2.0);
    let gen_labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let gamma = rng.random_range(0.0..1.0);
    let sign = if rng.random_bool(0.5) {
        G4Sign::Opposed
    } else {
        G4Sign::Symmetric
    };
    let with_generated = rng.random_bool(0.5);
    out.push((
        "L_f",
        gradient_error(&[g2, g4, tgt, gen], |tape, v| {
            let d2 = softmax_rows(tape, v[0]);
            let d4 = softmax_rows(tape, v[1]);
            let tp = softmax_rows(tape, v[2]);
            let inputs = AdaptationInputs {
                d_on_g2: d2,
                d_on_g4: d4,
                target_probs: tp,
                target_labels: &labels,
                gamma,
                g4_sign: sign,
            };
            let generated = if with_generated {
                let gp = softmax_rows(tape, v[3]);
                Some((gp, gen_labels.as_slice()))
            } else {
                None
            };
            adaptation_loss_with_generated(tape, &inputs, generated).unwrap()
        }),
    ));
    out
}

/// Log-influence by brute force over pairs of full assignments that agree
/// outside coordinates `i` and `j`.
pub fn log_influence_oracle(joint: &DiscreteJoint, j: usize, i: usize) -> f64 {
    let sizes = joint.support_sizes().to_vec();
    let cells: usize = sizes.iter().product();
    let decode = |mut idx: usize| {
        let mut a = vec![0; sizes.len()];
        for k in (0..sizes.len()).rev() {
            a[k] = idx % sizes[k];
            idx /= sizes[k];
        }
        a
    };
    let mut best = f64::NEG_INFINITY;
    for x in 0..cells {
        for y in 0..cells {
            let a = decode(x);
            let b = decode(y);
            let same_rest = (0..sizes.len()).filter(|&k| k != i && k != j).all(|k| a[k] == b[k]);
            if !same_rest {
                continue;
            }
            let mut swap_i = a.clone();
            swap_i[i] = b[i];
            let mut swap_j = a.clone();
            swap_j[j] = b[j];
            let ratio = joint.p(&a) * joint.p(&b) / (joint.p(&swap_i) * joint.p(&swap_j));
            best = best.max(ratio.ln());
        }
    }
    best / 4.0
}

pub fn log_coefficient_oracle(joint: &DiscreteJoint) -> f64 {
    let m = joint.coordinates();
    (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| log_influence_oracle(joint, j, i))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

pub fn random_joint<R: Rng>(rng: &mut R, max_coords: usize, max_alphabet: usize) -> DiscreteJoint {
    let coords = rng.random_range(2..=max_coords);
    let sizes: Vec<usize> = (0..coords).map(|_| rng.random_range(2..=max_alphabet)).collect();
    let cells: usize = sizes.iter().product();
    let raw: Vec<f64> = (0..cells).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    DiscreteJoint::new(sizes, raw.into_iter().map(|p| p / total).collect()).unwrap()
}

/// A short rot60 configuration for tests that only need the training loop
/// structure, not converged models.
pub fn quick_config(method: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(&format!(r#"{{"method":"{method}"}}"#)).unwrap();
    cfg.seeds = vec![3];
    cfg.epochs = 24;
    cfg.gen_pretrain_epochs = 10;
    cfg.disc_pretrain_epochs = 5;
    cfg.adaptation_steps = 6;
    cfg.batch = 8;
    cfg.pairs_per_group = 6;
    cfg.diversity_batches = 3;
    cfg.ft_steps = 20;
    cfg.task.source_per_class = 60;
    cfg.task.target_per_class = 40;
    cfg.source.max_epochs = 300;
    cfg
}

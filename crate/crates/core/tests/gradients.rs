mod common;

use fha_lab::autodiff::{Tape, Tensor, Var};
use fha_lab::hsic::diversity_loss;
use fha_lab::kernels::KernelConfig;
use fha_lab::losses::{
    classification_loss, generator_loss, similarity_loss, LossWeights, SimilarityNorm, SimilarityTarget,
};
use fha_lab::models::{Architecture, ClassifierParams, GeneratorParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gradient_error, random_matrix};

const TOL: f64 = 1e-6;

/// Contracts `out` with fixed random weights so every output entry
/// contributes to the checked scalar.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn check(name: &str, inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var) {
    let err = gradient_error(&inputs, |tape, v| {
        let out = op(tape, v);
        contract(tape, out, 99)
    });
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_and_matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_matrix(&mut rng, 3, 4, 1.5);
    let b = random_matrix(&mut rng, 3, 4, 1.5);
    let c = random_matrix(&mut rng, 4, 2, 1.5);
    let sq = random_matrix(&mut rng, 4, 4, 1.5);
    let positive = a.map(|v| v.abs() + 0.3);
    let bias = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());

    check("matmul", vec![a.clone(), c.clone()], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -2.5).unwrap());
    check("tanh", vec![a.clone()], |t, v| t.tanh(v[0]).unwrap());
    check("exp", vec![a.clone()], |t, v| t.exp(v[0]).unwrap());
    check("log", vec![positive.clone()], |t, v| t.log(v[0]).unwrap());
    check("sqrt", vec![positive.clone()], |t, v| t.sqrt(v[0]).unwrap());
    check("mean", vec![a.clone()], |t, v| t.mean(v[0]).unwrap());
    check("softmax rows", vec![a.clone()], |t, v| t.softmax(v[0], 1).unwrap());
    check("softmax cols", vec![a.clone()], |t, v| t.softmax(v[0], 0).unwrap());
    check("concat", vec![a.clone(), b.clone()], |t, v| {
        t.concat(&[v[0], v[1]], 1).unwrap()
    });
    check("transpose", vec![a.clone()], |t, v| t.transpose(v[0]).unwrap());
    check("trace", vec![sq], |t, v| t.trace(v[0]).unwrap());
    check("row broadcast", vec![a.clone(), bias], |t, v| {
        t.row_broadcast(v[0], v[1]).unwrap()
    });
    check("pairwise sq dist", vec![a.clone()], |t, v| {
        t.pairwise_sq_dist(v[0]).unwrap()
    });
    check("pairwise weighted l1", vec![a.clone(), b.clone()], |t, v| {
        t.pairwise_weighted_l1(v[0], v[1]).unwrap()
    });
}

#[test]
fn kinked_ops_away_from_the_kink() {
    let away = Tensor::matrix(2, 3, vec![-1.2, 0.7, 2.0, -0.4, 1.1, -2.2]).unwrap();
    check("relu", vec![away.clone()], |t, v| t.relu(v[0]).unwrap());
    check("clamp_min", vec![away], |t, v| t.clamp_min(v[0], 0.1).unwrap());
}

#[test]
fn losses_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        for (name, err) in common::loss_gradient_errors(&mut rng) {
            assert!(err < 1e-4, "trial {trial} {name}: {err:e}");
        }
    }
}

fn generator_objective(
    tape: &mut Tape,
    gen: &GeneratorParams,
    clf: &ClassifierParams,
    z: &[Tensor],
    target: &Tensor,
) -> (Var, Vec<Var>) {
    let labels = vec![0usize; target.rows()];
    let bound = gen.bind(tape, true);
    let fs = clf.bind(tape, false);
    let mut probs = Vec::new();
    let mut sems = Vec::new();
    for (class, noise) in z.iter().enumerate() {
        let x = gen.generate_tape(tape, &bound, noise, class).unwrap();
        let out = clf.classify_tape(tape, &fs, x).unwrap();
        probs.push(out.probs);
        sems.push(out.semantic_feature);
    }
    let l_c = classification_loss(tape, &probs).unwrap();
    let t = SimilarityTarget {
        features: target,
        labels: &labels,
        class_restricted: false,
    };
    let l_s = similarity_loss(tape, &sems, &t, SimilarityNorm::Fixed(2.0)).unwrap();
    let l_d = diversity_loss(tape, &sems, &KernelConfig::fixed(1.0, 1e-6)).unwrap();
    let total = generator_loss(tape, l_c, l_s, Some(l_d), &LossWeights::default()).unwrap();
    (total, bound.vars())
}

#[test]
fn generator_objective_through_both_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = Architecture {
        encoder_hidden: vec![6, 5],
        generator_hidden: vec![7],
        noise_dim: 3,
        ..Architecture::default()
    };
    let clf = ClassifierParams::init(2, 2, &arch, &mut rng);
    let gen = GeneratorParams::init(2, 2, &arch, &mut rng);
    let z: Vec<Tensor> = (0..2).map(|_| random_matrix(&mut rng, 4, 3, 1.0)).collect();
    let target = clf
        .classify(&random_matrix(&mut rng, 4, 2, 2.0))
        .unwrap()
        .semantic_feature;

    let mut tape = Tape::new();
    let (loss, vars) = generator_objective(&mut tape, &gen, &clf, &z, &target);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.wrt(v).into_data()).collect();

    let value = |g: &GeneratorParams| {
        let mut tape = Tape::new();
        let (loss, _) = generator_objective(&mut tape, g, &clf, &z, &target);
        tape.value(loss).item()
    };
    let mut numeric = Vec::new();
    let lens = gen.block_lens();
    for (b, &len) in lens.iter().enumerate() {
        for e in 0..len {
            let mut up = gen.clone();
            up.blocks_mut()[b].1.data_mut()[e] += common::FD_STEP;
            let mut down = gen.clone();
            down.blocks_mut()[b].1.data_mut()[e] -= common::FD_STEP;
            numeric.push((value(&up) - value(&down)) / (2.0 * common::FD_STEP));
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let err = norm(&diff) / norm(&analytic).max(1e-8);
    assert!(err < 1e-5, "relative error {err:e}");
}

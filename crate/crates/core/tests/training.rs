mod common;

use fha_lab::autodiff::Tensor;
use fha_lab::losses::SimilarityTarget;
use fha_lab::models::{Architecture, ClassifierParams};
use fha_lab::training::{
    build_task, median, pretrain_source, run_baseline, run_experiment, run_seed, write_outputs, ExperimentConfig,
    GeneratorContext, GeneratorSet, Method, Phase,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::quick_config;

#[test]
fn generative_runs_have_one_row_per_epoch_in_phase_order() {
    for method in ["DEGNET", "DEGNET_NO_DIVERSITY", "SEPARATE_GEN", "DEGNET_GEN_SUPERVISED"] {
        let mut cfg = quick_config(method);
        cfg.generated_per_class = 2;
        let run = run_seed(&cfg, 3).unwrap();
        assert_eq!(run.epochs.len(), cfg.epochs, "{method}");
        let adapt_start = cfg.epochs - cfg.adaptation_steps;
        for (t, row) in run.epochs.iter().enumerate() {
            assert_eq!(row.epoch, t);
            let want = if t >= adapt_start {
                Phase::Adapt
            } else if t < cfg.gen_pretrain_epochs {
                Phase::GenPretrain
            } else {
                Phase::Generate
            };
            assert_eq!(row.phase, want, "{method} epoch {t}");
            assert!((0.0..=1.0).contains(&row.eval_acc));
            assert!(row.loss_gd.unwrap().is_finite());
            assert!(row.diversity_semantic.unwrap() >= 0.0);
            assert!(row.diversity_raw.unwrap() >= 0.0);
            assert_eq!(row.loss_f.is_some(), t >= adapt_start, "{method} epoch {t}");
            assert_eq!(row.loss_disc.is_some(), t >= adapt_start, "{method} epoch {t}");
        }
        let csv = run.to_csv();
        assert_eq!(csv.lines().count(), cfg.epochs + 1);
        assert!(!csv.contains("NaN"));
    }
}

#[test]
fn generator_loss_includes_diversity_only_after_pretraining() {
    for method in ["DEGNET", "DEGNET_NO_DIVERSITY"] {
        let cfg = quick_config(method);
        let run = run_seed(&cfg, 3).unwrap();
        for row in &run.epochs {
            let active = method == "DEGNET" && row.epoch >= cfg.gen_pretrain_epochs;
            let (c, s, d) = (row.loss_c.unwrap(), row.loss_s.unwrap(), row.loss_d.unwrap());
            let mut want = c + cfg.weights.lambda * s;
            if active {
                want += cfg.weights.beta * d;
            }
            assert!(
                (row.loss_gd.unwrap() - want).abs() <= 1e-12,
                "{method} epoch {}",
                row.epoch
            );
        }
    }
}

#[test]
fn same_seed_same_metrics_and_different_seed_differs() {
    let cfg = quick_config("DEGNET");
    let a = run_seed(&cfg, 3).unwrap();
    let b = run_seed(&cfg, 3).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a, b);
    let c = run_seed(&cfg, 4).unwrap();
    assert_ne!(a.to_csv(), c.to_csv());
}

#[test]
fn parallel_jobs_match_sequential() {
    let mut cfg = quick_config("SEPARATE_GEN");
    cfg.seeds = vec![5, 1, 2];
    let seq = run_experiment(&cfg, 1).unwrap();
    let par = run_experiment(&cfg, 3).unwrap();
    assert_eq!(seq, par);
    assert_eq!(par.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![5, 1, 2]);
}

#[test]
fn zero_beta_matches_no_diversity() {
    let mut cfg = quick_config("DEGNET");
    cfg.weights.beta = 0.0;
    let a = run_seed(&cfg, 3).unwrap();
    let b = run_seed(&quick_config("DEGNET_NO_DIVERSITY"), 3).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn generated_supervision_with_zero_count_matches_degnet() {
    let mut cfg = quick_config("DEGNET_GEN_SUPERVISED");
    cfg.generated_per_class = 0;
    let a = run_seed(&cfg, 3).unwrap();
    let b = run_seed(&quick_config("DEGNET"), 3).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.final_accuracy.to_bits(), b.final_accuracy.to_bits());

    cfg.generated_per_class = 4;
    let c = run_seed(&cfg, 3).unwrap();
    let last = cfg.epochs - 1;
    assert_ne!(c.epochs[last].loss_f, b.epochs[last].loss_f);
}

#[test]
fn separate_generator_for_one_class_matches_shared() {
    let cfg = quick_config("SEPARATE_GEN");
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let clf = ClassifierParams::init(2, 1, &Architecture::default(), &mut rng);
    let x = common::random_matrix(&mut rng, 4, 2, 2.0);
    let target_features = clf.classify(&x).unwrap().semantic_feature;
    let labels = vec![0usize; 4];
    let ctx = GeneratorContext {
        source: &clf,
        target: SimilarityTarget {
            features: &target_features,
            labels: &labels,
            class_restricted: false,
        },
        cfg: &cfg,
    };
    let mut shared = GeneratorSet::init(false, 1, 2, &cfg, 11).unwrap();
    let mut separate = GeneratorSet::init(true, 1, 2, &cfg, 11).unwrap();
    assert_eq!(shared.parameter_count(), separate.parameter_count());
    assert_eq!(shared.fingerprint(), separate.fingerprint());
    for epoch in 0..15 {
        let data: Vec<f64> = (0..cfg.batch * cfg.architecture.noise_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let z = vec![Tensor::matrix(cfg.batch, cfg.architecture.noise_dim, data).unwrap()];
        let a = shared.step(&ctx, &z, false, true, epoch).unwrap();
        let b = separate.step(&ctx, &z, false, true, epoch).unwrap();
        assert!((a.loss_c - b.loss_c).abs() <= 1e-12, "epoch {epoch}");
        assert!((a.loss_s - b.loss_s).abs() <= 1e-12, "epoch {epoch}");
        assert!((a.loss_gd - b.loss_gd).abs() <= 1e-12, "epoch {epoch}");
        for (ga, gb) in a.generated[0].data().iter().zip(b.generated[0].data()) {
            assert!((ga - gb).abs() <= 1e-12);
        }
    }
}

#[test]
fn fine_tuning_never_loses_labeled_accuracy() {
    for seed in 0..4 {
        let wa = run_baseline(&ExperimentConfig::for_method(Method::Wa), seed).unwrap();
        let mut cfg = ExperimentConfig::for_method(Method::Ft);
        cfg.ft_steps = 60;
        let ft = run_baseline(&cfg, seed).unwrap();
        assert!(ft.labeled_accuracy >= wa.labeled_accuracy, "seed {seed}");
        assert_eq!(ft.source_train_accuracy, wa.source_train_accuracy);
    }
}

#[test]
fn fine_tuning_with_seven_labels_beats_without_adaptation() {
    let mut wa = ExperimentConfig::for_method(Method::Wa);
    wa.labeled_per_class = 7;
    let mut ft = ExperimentConfig::for_method(Method::Ft);
    ft.labeled_per_class = 7;
    let acc = |cfg: &ExperimentConfig| {
        let runs = run_experiment(cfg, 5).unwrap();
        median(&runs.iter().map(|r| r.final_accuracy).collect::<Vec<_>>())
    };
    assert!(acc(&ft) > acc(&wa));
}

#[test]
fn without_shift_the_source_classifier_transfers() {
    let mut cfg = ExperimentConfig::for_method(Method::Wa);
    cfg.task.shift = fha_lab::data::ShiftSpec::identity();
    cfg.task.target_per_class = 172;
    for seed in 0..3 {
        let run = run_baseline(&cfg, seed).unwrap();
        assert!(
            (run.final_accuracy - run.source_train_accuracy).abs() <= 0.03,
            "seed {seed}: {} vs {}",
            run.final_accuracy,
            run.source_train_accuracy
        );
    }
}

#[test]
fn rotation_hurts_the_source_classifier() {
    let runs = run_experiment(&ExperimentConfig::for_method(Method::Wa), 5).unwrap();
    let gaps: Vec<f64> = runs
        .iter()
        .map(|r| r.source_train_accuracy - r.final_accuracy)
        .collect();
    assert!(gaps.iter().all(|&g| g > 0.0), "{gaps:?}");
    assert!(median(&gaps) >= 0.10, "{gaps:?}");
}

#[test]
fn source_pretraining_is_deterministic() {
    let cfg = ExperimentConfig::for_method(Method::Wa);
    let task = build_task(&cfg.task, 5, 2).unwrap();
    let (a, acc_a) = pretrain_source(&cfg, &task.source, 2).unwrap();
    let (b, acc_b) = pretrain_source(&cfg, &task.source, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(acc_a, acc_b);
    assert!(acc_a >= cfg.source.target_accuracy);
    assert_eq!(task.labeled.class_counts(), vec![5, 5, 5]);
}

#[test]
fn outputs_are_written_per_seed() {
    let mut cfg = quick_config("DEGNET_NO_DIVERSITY");
    cfg.seeds = vec![0, 1];
    let runs = run_experiment(&cfg, 2).unwrap();
    let dir = tempfile::TempDir::new().unwrap();
    let (summary, paths) = write_outputs(&runs, dir.path()).unwrap();
    assert_eq!(summary.seeds, vec![0, 1]);
    assert_eq!(paths.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("metrics_DEGNET_NO_DIVERSITY_ml5_seed1.csv")).unwrap();
    assert_eq!(csv, runs[1].to_csv());
    let json = std::fs::read_to_string(dir.path().join("summary_DEGNET_NO_DIVERSITY_ml5.json")).unwrap();
    let back: fha_lab::training::Summary = serde_json::from_str(&json).unwrap();
    assert_eq!(back, summary);
}

#[test]
fn config_json_round_trip_and_defaults() {
    let cfg = ExperimentConfig::from_json(r#"{"method":"DEGNET"}"#).unwrap();
    assert_eq!(cfg.gen_pretrain_epochs, 300);
    assert_eq!(cfg.disc_pretrain_epochs, 100);
    assert_eq!(cfg.adaptation_steps, 50);
    assert_eq!(cfg.batch, 32);
    assert_eq!((cfg.lr_gen, cfg.lr_disc, cfg.lr_classifier), (1e-4, 1e-4, 1e-3));
    assert_eq!((cfg.weights.lambda, cfg.weights.beta), (0.9, 0.1));
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

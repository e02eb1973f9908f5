use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ExperimentConfig, Method, TaskConfig};
use super::metrics::{EpochMetrics, Phase, RunMetrics};
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::data::{apply_shift, few_shot_sample, make_blobs, DomainDataset};
use crate::error::{Error, Result};
use crate::hsic::{diversity_loss, diversity_report};
use crate::losses::{
    adaptation_loss_with_generated, build_pair_groups, classification_loss, cross_entropy, discriminator_loss,
    gamma_at, generator_loss, separate_generator_loss, similarity_loss, AdaptationInputs, GroupId, PairGroup, Side,
    SimilarityNorm, SimilarityTarget,
};
use crate::models::{ClassifierParams, DiscriminatorParams, GeneratorParams, Mlp};

/// Independent random streams derived from a run seed.
mod stream {
    pub const SOURCE_DATA: u64 = 1;
    pub const TARGET_DATA: u64 = 2;
    pub const FEW_SHOT: u64 = 3;
    pub const CLASSIFIER_INIT: u64 = 4;
    pub const GENERATOR_INIT: u64 = 5;
    pub const DISCRIMINATOR_INIT: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const PAIRS: u64 = 8;
    pub const DIVERSITY_NOISE: u64 = 9;
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}

fn noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("noise shape")
}

fn check_finite(epoch: usize, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericAbort {
            epoch,
            loss: name.to_string(),
        })
    }
}

fn unchanged(before: u64, after: u64, what: &str, during: &str) -> Result<()> {
    if before != after {
        return Err(Error::invalid(format!("{what} parameters changed during {during}")));
    }
    Ok(())
}

/// Source data, labeled target points and the held-out target set.
#[derive(Clone, Debug)]
pub struct Task {
    pub source: DomainDataset,
    pub labeled: DomainDataset,
    pub eval: DomainDataset,
}

pub fn build_task(task: &TaskConfig, labeled_per_class: usize, seed: u64) -> Result<Task> {
    let source = make_blobs(
        task.classes,
        task.source_per_class,
        task.dim,
        task.spread,
        derived_seed(seed, stream::SOURCE_DATA),
    )?;
    let pool = make_blobs(
        task.classes,
        task.target_per_class,
        task.dim,
        task.spread,
        derived_seed(seed, stream::TARGET_DATA),
    )?;
    let target = apply_shift(&pool, &task.shift)?;
    let (labeled, eval) = few_shot_sample(&target, labeled_per_class, derived_seed(seed, stream::FEW_SHOT))?;
    Ok(Task { source, labeled, eval })
}

/// Source classifier trained by full-batch cross-entropy until the train
/// accuracy target or the epoch cap. Returns it with its train accuracy.
pub fn pretrain_source(cfg: &ExperimentConfig, source: &DomainDataset, seed: u64) -> Result<(ClassifierParams, f64)> {
    let mut rng = stream_rng(seed, stream::CLASSIFIER_INIT);
    let mut clf = ClassifierParams::init(source.dim(), source.classes, &cfg.architecture, &mut rng);
    let mut adam = Adam::new(
        &clf.block_lens(),
        AdamConfig::with_learning_rate(cfg.source.learning_rate),
    )?;
    for epoch in 0..cfg.source.max_epochs {
        if clf.accuracy(&source.features, &source.labels)? >= cfg.source.target_accuracy {
            break;
        }
        let mut tape = Tape::new();
        let bound = clf.bind(&mut tape, true);
        let x = tape.constant(source.features.clone());
        let out = clf.classify_tape(&mut tape, &bound, x)?;
        let loss = cross_entropy(&mut tape, out.probs, &source.labels)?;
        check_finite(epoch, "source cross-entropy", tape.value(loss).item())?;
        let vars = bound.vars();
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(&mut clf.blocks_mut(), &g)?;
    }
    let acc = clf.accuracy(&source.features, &source.labels)?;
    if acc <= 1.0 / source.classes as f64 {
        return Err(Error::Degenerate(format!(
            "source classifier reached only {acc} train accuracy with {} classes",
            source.classes
        )));
    }
    Ok((clf, acc))
}

/// Runs one seed of any method.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    match cfg.method {
        Method::Wa | Method::Ft => run_baseline(cfg, seed),
        Method::Degnet => run_degnet(cfg, seed),
        Method::DegnetNoDiversity | Method::SeparateGen | Method::DegnetGenSupervised => run_ablation(cfg, seed),
    }
}

/// The without-adaptation and fine-tuning baselines.
pub fn run_baseline(cfg: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    cfg.validate()?;
    let task = build_task(&cfg.task, cfg.labeled_per_class, seed)?;
    let (f_s, source_acc) = pretrain_source(cfg, &task.source, seed)?;
    match cfg.method {
        Method::Wa => {
            let acc = f_s.accuracy(&task.eval.features, &task.eval.labels)?;
            Ok(RunMetrics {
                method: cfg.method,
                seed,
                labeled_per_class: cfg.labeled_per_class,
                source_train_accuracy: source_acc,
                epochs: vec![EpochMetrics::new(0, Phase::Evaluate, acc)],
                final_accuracy: acc,
                labeled_accuracy: f_s.accuracy(&task.labeled.features, &task.labeled.labels)?,
                final_diversity_semantic: None,
                final_diversity_raw: None,
            })
        }
        Method::Ft => fine_tune(cfg, seed, &task, f_s, source_acc),
        other => Err(Error::invalid(format!("{other} is not a baseline method"))),
    }
}

/// Retrains the head on the labeled target points with the encoder frozen
/// and keeps the snapshot with the best labeled accuracy (ties: lower
/// loss), counting the untouched source head as a candidate.
fn fine_tune(
    cfg: &ExperimentConfig,
    seed: u64,
    task: &Task,
    f_s: ClassifierParams,
    source_acc: f64,
) -> Result<RunMetrics> {
    let mut clf = f_s;
    let encoder_hash = {
        let mut h = clf.clone();
        h.head = Mlp { layers: Vec::new() };
        h.fingerprint()
    };
    let feats = clf.classify(&task.labeled.features)?.encoder_feature;
    let labels = &task.labeled.labels;
    let head_lens: Vec<usize> = clf.head_blocks_mut().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(&head_lens, AdamConfig::with_learning_rate(cfg.lr_classifier))?;

    let score = |clf: &ClassifierParams| -> Result<(f64, f64)> {
        let probs = clf.head.forward(&feats)?;
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let loss = cross_entropy(&mut tape, p, labels)?;
        let loss = tape.value(loss).item();
        Ok((clf.accuracy(&task.labeled.features, labels)?, loss))
    };
    let mut best = clf.clone();
    let mut best_score = score(&clf)?;
    let mut rows = Vec::with_capacity(cfg.ft_steps);
    for step in 0..cfg.ft_steps {
        let started = Instant::now();
        let mut tape = Tape::new();
        let head = clf.head.bind(&mut tape, true);
        let x = tape.constant(feats.clone());
        let probs = Mlp::forward_tape(&mut tape, &head, x)?;
        let loss = cross_entropy(&mut tape, probs, labels)?;
        let loss_value = check_finite(step, "loss_f", tape.value(loss).item())?;
        let grads = tape.backward(loss)?;
        adam.step(&mut clf.head_blocks_mut(), &head.gradients(&grads))?;

        let s = score(&clf)?;
        if s.0 > best_score.0 || (s.0 == best_score.0 && s.1 < best_score.1) {
            best = clf.clone();
            best_score = s;
        }
        let mut row = EpochMetrics::new(
            step,
            Phase::FineTune,
            clf.accuracy(&task.eval.features, &task.eval.labels)?,
        );
        row.loss_f = Some(loss_value);
        if cfg.record_timing {
            row.wall_ms = started.elapsed().as_millis() as u64;
        }
        rows.push(row);
    }
    let mut check = best.clone();
    check.head = Mlp { layers: Vec::new() };
    unchanged(encoder_hash, check.fingerprint(), "encoder", "fine-tuning")?;
    Ok(RunMetrics {
        method: cfg.method,
        seed,
        labeled_per_class: cfg.labeled_per_class,
        source_train_accuracy: source_acc,
        epochs: rows,
        final_accuracy: best.accuracy(&task.eval.features, &task.eval.labels)?,
        labeled_accuracy: best_score.0,
        final_diversity_semantic: None,
        final_diversity_raw: None,
    })
}

/// The full method: generator, discriminator and classifier adaptation.
pub fn run_degnet(cfg: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    if cfg.method != Method::Degnet {
        return Err(Error::invalid(format!("run_degnet called with {}", cfg.method)));
    }
    run_generative(cfg, seed)
}

/// The no-diversity, separate-generator and generated-supervised variants.
pub fn run_ablation(cfg: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    match cfg.method {
        Method::DegnetNoDiversity | Method::SeparateGen | Method::DegnetGenSupervised => run_generative(cfg, seed),
        other => Err(Error::invalid(format!("{other} is not an ablation method"))),
    }
}

/// One class-conditional generator shared by every class, or one
/// generator per class; each with its own optimizer.
pub enum GeneratorSet {
    Shared(GeneratorParams, Adam),
    Separate(Vec<(GeneratorParams, Adam)>),
}

/// Values of one generator update.
#[derive(Clone, Debug)]
pub struct GeneratorStep {
    /// Samples generated for each class, before the update.
    pub generated: Vec<Tensor>,
    /// Semantic features of those samples under the source classifier.
    pub semantic: Vec<Tensor>,
    pub loss_c: f64,
    pub loss_s: f64,
    /// Diversity loss value; on the record only when `diversity_on_tape`.
    pub loss_d: f64,
    pub loss_gd: f64,
}

/// Inputs shared by every generator update.
pub struct GeneratorContext<'a> {
    pub source: &'a ClassifierParams,
    pub target: SimilarityTarget<'a>,
    pub cfg: &'a ExperimentConfig,
}

impl GeneratorSet {
    pub fn init(separate: bool, classes: usize, dim: usize, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, stream::GENERATOR_INIT);
        let adam_cfg = AdamConfig::with_learning_rate(cfg.lr_gen);
        let mut one = || -> Result<(GeneratorParams, Adam)> {
            let g = GeneratorParams::init(classes, dim, &cfg.architecture, &mut rng);
            let adam = Adam::new(&g.block_lens(), adam_cfg)?;
            Ok((g, adam))
        };
        if separate {
            Ok(GeneratorSet::Separate(
                (0..classes).map(|_| one()).collect::<Result<_>>()?,
            ))
        } else {
            let (g, a) = one()?;
            Ok(GeneratorSet::Shared(g, a))
        }
    }

    fn for_class(&self, class: usize) -> &GeneratorParams {
        match self {
            GeneratorSet::Shared(g, _) => g,
            GeneratorSet::Separate(gs) => &gs[class].0,
        }
    }

    pub fn generate(&self, z: &Tensor, class: usize) -> Result<Tensor> {
        self.for_class(class).generate(z, class)
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            GeneratorSet::Shared(g, _) => g.fingerprint(),
            GeneratorSet::Separate(gs) => gs.iter().fold(0u64, |acc, (g, _)| acc.rotate_left(7) ^ g.fingerprint()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            GeneratorSet::Shared(g, _) => g.parameter_count(),
            GeneratorSet::Separate(gs) => gs.iter().map(|(g, _)| g.parameter_count()).sum(),
        }
    }

    /// Generates one batch per class from `noise` and, when `update` is set,
    /// takes one optimizer step on the generator objective.
    pub fn step(
        &mut self,
        ctx: &GeneratorContext<'_>,
        noise: &[Tensor],
        diversity_on_tape: bool,
        update: bool,
        epoch: usize,
    ) -> Result<GeneratorStep> {
        match self {
            GeneratorSet::Shared(g, adam) => shared_step(g, adam, ctx, noise, diversity_on_tape, update, epoch),
            GeneratorSet::Separate(gs) => separate_step(gs, ctx, noise, update, epoch),
        }
    }
}

fn mean_diversity(batches: &[Tensor], cfg: &ExperimentConfig) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += diversity_report(b, &cfg.kernel)?;
    }
    Ok(total / batches.len() as f64)
}

fn shared_step(
    g: &mut GeneratorParams,
    adam: &mut Adam,
    ctx: &GeneratorContext<'_>,
    noise: &[Tensor],
    diversity_on_tape: bool,
    update: bool,
    epoch: usize,
) -> Result<GeneratorStep> {
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, true);
    let fs = ctx.source.bind(&mut tape, false);
    let mut xs = Vec::with_capacity(noise.len());
    let mut probs = Vec::with_capacity(noise.len());
    let mut sems = Vec::with_capacity(noise.len());
    for (class, z) in noise.iter().enumerate() {
        let x = g.generate_tape(&mut tape, &bound, z, class)?;
        let out = ctx.source.classify_tape(&mut tape, &fs, x)?;
        xs.push(x);
        probs.push(out.probs);
        sems.push(out.semantic_feature);
    }
    let l_c = classification_loss(&mut tape, &probs)?;
    let l_s = similarity_loss(&mut tape, &sems, &ctx.target, SimilarityNorm::BatchMax)?;
    let l_d = if diversity_on_tape {
        Some(diversity_loss(&mut tape, &sems, &ctx.cfg.kernel)?)
    } else {
        None
    };
    let l_gd = generator_loss(&mut tape, l_c, l_s, l_d, &ctx.cfg.weights)?;

    let generated: Vec<Tensor> = xs.iter().map(|&v| tape.value(v).clone()).collect();
    let semantic: Vec<Tensor> = sems.iter().map(|&v| tape.value(v).clone()).collect();
    let loss_c = check_finite(epoch, "loss_c", tape.value(l_c).item())?;
    let loss_s = check_finite(epoch, "loss_s", tape.value(l_s).item())?;
    let loss_d = match l_d {
        Some(v) => tape.value(v).item(),
        None => mean_diversity(&semantic, ctx.cfg)?,
    };
    let loss_d = check_finite(epoch, "loss_d", loss_d)?;
    let loss_gd = check_finite(epoch, "loss_gd", tape.value(l_gd).item())?;
    if update {
        let grads = tape.backward(l_gd)?;
        adam.step(&mut g.blocks_mut(), &bound.gradients(&grads))?;
    }
    Ok(GeneratorStep {
        generated,
        semantic,
        loss_c,
        loss_s,
        loss_d,
        loss_gd,
    })
}

fn separate_step(
    gs: &mut [(GeneratorParams, Adam)],
    ctx: &GeneratorContext<'_>,
    noise: &[Tensor],
    update: bool,
    epoch: usize,
) -> Result<GeneratorStep> {
    let k = gs.len() as f64;
    let mut out = GeneratorStep {
        generated: Vec::with_capacity(gs.len()),
        semantic: Vec::with_capacity(gs.len()),
        loss_c: 0.0,
        loss_s: 0.0,
        loss_d: 0.0,
        loss_gd: 0.0,
    };
    for (class, ((g, adam), z)) in gs.iter_mut().zip(noise).enumerate() {
        let mut tape = Tape::new();
        let bound = g.bind(&mut tape, true);
        let fs = ctx.source.bind(&mut tape, false);
        let x = g.generate_tape(&mut tape, &bound, z, class)?;
        let o = ctx.source.classify_tape(&mut tape, &fs, x)?;
        let loss = separate_generator_loss(
            &mut tape,
            o.probs,
            class,
            o.semantic_feature,
            &ctx.target,
            ctx.cfg.weights.lambda,
            SimilarityNorm::BatchMax,
        )?;
        out.loss_c += check_finite(epoch, "loss_c", tape.value(loss.classification).item())? / k;
        out.loss_s += check_finite(epoch, "loss_s", tape.value(loss.similarity).item())? / k;
        out.loss_gd += check_finite(epoch, "loss_gd", tape.value(loss.total).item())? / k;
        out.generated.push(tape.value(x).clone());
        out.semantic.push(tape.value(o.semantic_feature).clone());
        if update {
            let grads = tape.backward(loss.total)?;
            adam.step(&mut g.blocks_mut(), &bound.gradients(&grads))?;
        }
    }
    out.loss_d = check_finite(epoch, "loss_d", mean_diversity(&out.semantic, ctx.cfg)?)?;
    Ok(out)
}

/// `rows x n` matrix whose row `i` is the one-hot vector of `picks[i]`.
fn selector(picks: &[usize], n: usize) -> Tensor {
    let mut s = Tensor::zeros(&[picks.len(), n]);
    for (i, &j) in picks.iter().enumerate() {
        s.set(i, j, 1.0);
    }
    s
}

/// Pair features `[left, right]` for pairs of a single group, recorded.
fn pair_features_on_tape(tape: &mut Tape, pairs: &[&PairGroup], gen: Var, target: Var) -> Result<Var> {
    let n_gen = tape.value(gen).rows();
    let n_tgt = tape.value(target).rows();
    let left: Vec<usize> = pairs.iter().map(|p| p.left).collect();
    let right: Vec<usize> = pairs.iter().map(|p| p.right).collect();
    let (rsrc, rn) = match pairs[0].right_side {
        Side::Generated => (gen, n_gen),
        Side::Target => (target, n_tgt),
    };
    let sl = tape.constant(selector(&left, n_gen));
    let sr = tape.constant(selector(&right, rn));
    let l = tape.matmul(sl, gen)?;
    let r = tape.matmul(sr, rsrc)?;
    tape.concat(&[l, r], 1)
}

fn pair_features(pairs: &[PairGroup], gen: &Tensor, target: &Tensor) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            let right = match p.right_side {
                Side::Generated => gen.row(p.right),
                Side::Target => target.row(p.right),
            };
            gen.row(p.left).iter().chain(right).copied().collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// One discriminator update on freshly encoded pairs; returns its loss.
fn discriminator_step(
    d: &mut DiscriminatorParams,
    adam: &mut Adam,
    pairs: &[PairGroup],
    gen_feat: &Tensor,
    tgt_feat: &Tensor,
    epoch: usize,
) -> Result<f64> {
    let x = pair_features(pairs, gen_feat, tgt_feat)?;
    let groups: Vec<GroupId> = pairs.iter().map(|p| p.group).collect();
    let mut tape = Tape::new();
    let bound = d.bind(&mut tape, true);
    let xv = tape.constant(x);
    let probs = d.discriminate_tape(&mut tape, &bound, xv)?;
    let loss = discriminator_loss(&mut tape, probs, &groups)?;
    let value = check_finite(epoch, "loss_D", tape.value(loss).item())?;
    let grads = tape.backward(loss)?;
    adam.step(&mut d.blocks_mut(), &bound.gradients(&grads))?;
    Ok(value)
}

fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = parts.iter().collect();
    crate::autodiff::Op::Concat { axis: 0 }.eval(&refs)
}

fn run_generative(cfg: &ExperimentConfig, seed: u64) -> Result<RunMetrics> {
    cfg.validate()?;
    let task = build_task(&cfg.task, cfg.labeled_per_class, seed)?;
    let (f_s, source_acc) = pretrain_source(cfg, &task.source, seed)?;
    let classes = task.source.classes;
    let source_hash = f_s.fingerprint();

    let mut f_t = f_s.clone();
    let mut clf_adam = Adam::new(&f_t.block_lens(), AdamConfig::with_learning_rate(cfg.lr_classifier))?;
    let mut gens = GeneratorSet::init(cfg.method == Method::SeparateGen, classes, task.source.dim(), cfg, seed)?;
    let mut d = DiscriminatorParams::init(
        f_t.feature_dim(),
        &cfg.architecture,
        &mut stream_rng(seed, stream::DISCRIMINATOR_INIT),
    );
    let mut d_adam = Adam::new(&d.block_lens(), AdamConfig::with_learning_rate(cfg.lr_disc))?;
    let mut noise_rng = stream_rng(seed, stream::NOISE);
    let mut pair_rng = stream_rng(seed, stream::PAIRS);

    let target_semantic = f_s.classify(&task.labeled.features)?.semantic_feature;
    let ctx = GeneratorContext {
        source: &f_s,
        target: SimilarityTarget {
            features: &target_semantic,
            labels: &task.labeled.labels,
            class_restricted: cfg.similarity_class_restricted,
        },
        cfg,
    };
    let gen_labels: Vec<usize> = (0..classes).flat_map(|c| vec![c; cfg.batch]).collect();
    let supervised_rows: Vec<usize> = if cfg.method == Method::DegnetGenSupervised {
        (0..classes)
            .flat_map(|c| (0..cfg.generated_per_class).map(move |i| c * cfg.batch + i))
            .collect()
    } else {
        Vec::new()
    };
    let supervised_labels: Vec<usize> = supervised_rows.iter().map(|&r| gen_labels[r]).collect();

    let adapt_start = cfg.epochs - cfg.adaptation_steps;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let adapting = epoch >= adapt_start;
        let phase = if adapting {
            Phase::Adapt
        } else if epoch < cfg.gen_pretrain_epochs {
            Phase::GenPretrain
        } else {
            Phase::Generate
        };

        // Generator update; the classifier, discriminator and source
        // classifier stay fixed.
        let z: Vec<Tensor> = (0..classes)
            .map(|_| noise(cfg.batch, cfg.architecture.noise_dim, &mut noise_rng))
            .collect();
        let frozen = (f_t.fingerprint(), d.fingerprint());
        let update_gen = !(adapting && cfg.freeze_generator_in_adaptation);
        let gstep = gens.step(&ctx, &z, cfg.diversity_active(epoch), update_gen, epoch)?;
        unchanged(frozen.0, f_t.fingerprint(), "classifier", "the generator update")?;
        unchanged(frozen.1, d.fingerprint(), "discriminator", "the generator update")?;
        unchanged(source_hash, f_s.fingerprint(), "source classifier", "training")?;

        let mut row = EpochMetrics::new(epoch, phase, 0.0);
        row.loss_c = Some(gstep.loss_c);
        row.loss_s = Some(gstep.loss_s);
        row.loss_d = Some(gstep.loss_d);
        row.loss_gd = Some(gstep.loss_gd);
        row.diversity_semantic = Some(mean_diversity(&gstep.semantic, cfg)?);
        row.diversity_raw = Some(mean_diversity(&gstep.generated, cfg)?);

        if adapting {
            let d_m = stack_rows(&gstep.generated)?;
            let gen_hash = gens.fingerprint();

            if epoch == adapt_start {
                let gen_feat = f_t.classify(&d_m)?.encoder_feature;
                let tgt_feat = f_t.classify(&task.labeled.features)?.encoder_feature;
                let clf_hash = f_t.fingerprint();
                for _ in 0..cfg.disc_pretrain_epochs {
                    let pairs =
                        build_pair_groups(&gen_labels, &task.labeled.labels, cfg.pairs_per_group, &mut pair_rng)?;
                    row.loss_disc = Some(discriminator_step(
                        &mut d,
                        &mut d_adam,
                        &pairs,
                        &gen_feat,
                        &tgt_feat,
                        epoch,
                    )?);
                }
                unchanged(clf_hash, f_t.fingerprint(), "classifier", "discriminator pretraining")?;
            }

            // Classifier update against the fixed discriminator.
            let pairs = build_pair_groups(&gen_labels, &task.labeled.labels, cfg.pairs_per_group, &mut pair_rng)?;
            let k = epoch - adapt_start;
            let gamma = gamma_at((k + 1) as f64 / cfg.adaptation_steps as f64)?;
            let d_hash = d.fingerprint();
            let loss_f = {
                let mut tape = Tape::new();
                let bound = f_t.bind(&mut tape, true);
                let dv = d.bind(&mut tape, false);
                let xg = tape.constant(d_m.clone());
                let xt = tape.constant(task.labeled.features.clone());
                let og = f_t.classify_tape(&mut tape, &bound, xg)?;
                let ot = f_t.classify_tape(&mut tape, &bound, xt)?;
                let of_group = |g: GroupId| pairs.iter().filter(|p| p.group == g).collect::<Vec<_>>();
                let g2 = pair_features_on_tape(
                    &mut tape,
                    &of_group(GroupId::G2),
                    og.encoder_feature,
                    ot.encoder_feature,
                )?;
                let g4 = pair_features_on_tape(
                    &mut tape,
                    &of_group(GroupId::G4),
                    og.encoder_feature,
                    ot.encoder_feature,
                )?;
                let d_on_g2 = d.discriminate_tape(&mut tape, &dv, g2)?;
                let d_on_g4 = d.discriminate_tape(&mut tape, &dv, g4)?;
                let inputs = AdaptationInputs {
                    d_on_g2,
                    d_on_g4,
                    target_probs: ot.probs,
                    target_labels: &task.labeled.labels,
                    gamma,
                    g4_sign: cfg.g4_sign,
                };
                let generated = if supervised_rows.is_empty() {
                    None
                } else {
                    let s = tape.constant(selector(&supervised_rows, d_m.rows()));
                    let p = tape.matmul(s, og.probs)?;
                    Some((p, supervised_labels.as_slice()))
                };
                let loss = adaptation_loss_with_generated(&mut tape, &inputs, generated)?;
                let value = check_finite(epoch, "loss_f", tape.value(loss).item())?;
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
                clf_adam.step(&mut f_t.blocks_mut(), &g)?;
                value
            };
            row.loss_f = Some(loss_f);
            unchanged(d_hash, d.fingerprint(), "discriminator", "the classifier update")?;

            // Discriminator update on the same pairs, re-encoded by the
            // updated classifier.
            let clf_hash = f_t.fingerprint();
            let gen_feat = f_t.classify(&d_m)?.encoder_feature;
            let tgt_feat = f_t.classify(&task.labeled.features)?.encoder_feature;
            row.loss_disc = Some(discriminator_step(
                &mut d,
                &mut d_adam,
                &pairs,
                &gen_feat,
                &tgt_feat,
                epoch,
            )?);
            unchanged(clf_hash, f_t.fingerprint(), "classifier", "the discriminator update")?;
            unchanged(gen_hash, gens.fingerprint(), "generator", "adaptation")?;
        }

        row.eval_acc = f_t.accuracy(&task.eval.features, &task.eval.labels)?;
        if cfg.record_timing {
            row.wall_ms = started.elapsed().as_millis() as u64;
        }
        rows.push(row);
    }

    let (div_sem, div_raw) = final_diversity(&gens, &f_s, classes, cfg, seed)?;
    Ok(RunMetrics {
        method: cfg.method,
        seed,
        labeled_per_class: cfg.labeled_per_class,
        source_train_accuracy: source_acc,
        final_accuracy: rows.last().map_or(0.0, |r| r.eval_acc),
        epochs: rows,
        labeled_accuracy: f_t.accuracy(&task.labeled.features, &task.labeled.labels)?,
        final_diversity_semantic: Some(div_sem),
        final_diversity_raw: Some(div_raw),
    })
}

/// Diversity of fresh generated batches: per-class batches of `batch`
/// samples, semantic features from the source classifier, averaged over
/// classes and `diversity_batches` draws.
fn final_diversity(
    gens: &GeneratorSet,
    f_s: &ClassifierParams,
    classes: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = stream_rng(seed, stream::DIVERSITY_NOISE);
    let (mut sem, mut raw) = (0.0, 0.0);
    for _ in 0..cfg.diversity_batches {
        for class in 0..classes {
            let z = noise(cfg.batch, cfg.architecture.noise_dim, &mut rng);
            let x = gens.generate(&z, class)?;
            let s = f_s.classify(&x)?.semantic_feature;
            sem += diversity_report(&s, &cfg.kernel)?;
            raw += diversity_report(&x, &cfg.kernel)?;
        }
    }
    let n = (cfg.diversity_batches * classes) as f64;
    Ok((sem / n, raw / n))
}

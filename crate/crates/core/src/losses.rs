//! Training objectives for the generator, the pair discriminator and the
//! adapted classifier, plus pair-group sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{weighted_l1_value, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities below this are raised to it before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Lower bound of the similarity normaliser.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.9, beta: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("weights.lambda", self.lambda), ("weights.beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sign applied to the mixed different-class term of the adaptation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum G4Sign {
    /// `-gamma * (log D(G2)[G1] - log D(G4)[G3])`.
    #[default]
    Opposed,
    /// `-gamma * (log D(G2)[G1] + log D(G4)[G3])`.
    Symmetric,
}

/// `2 / (1 + exp(-10 q)) - 1`.
pub fn gamma_at(q: f64) -> Result<f64> {
    if !(q >= 0.0) {
        return Err(Error::Domain {
            op: "gamma_at",
            detail: format!("progress must be >= 0, got {q}"),
        });
    }
    Ok(2.0 / (1.0 + (-10.0 * q).exp()) - 1.0)
}

/// `sum_i |x_i - y_i|^3 / ||x - y||_2`, zero when `x == y`.
pub fn weighted_l1(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "weighted_l1",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    Ok(weighted_l1_value(x, y))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

fn one_hot_mask(rows: usize, cols: usize, hot: impl Fn(usize) -> usize) -> Tensor {
    let mut m = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        m.set(i, hot(i), 1.0);
    }
    m
}

/// Mean own-class squared shortfall `(p_{i,n} - 1)^2`, averaged within each
/// class batch and then across classes. Entry `n` of `probs_by_class` holds
/// the probabilities for samples generated for class `n`.
pub fn classification_loss(tape: &mut Tape, probs_by_class: &[Var]) -> Result<Var> {
    if probs_by_class.is_empty() {
        return Err(Error::invalid("classification loss over zero classes"));
    }
    let mut terms = Vec::with_capacity(probs_by_class.len());
    for (class, &probs) in probs_by_class.iter().enumerate() {
        terms.push(own_class_shortfall(tape, probs, class)?);
    }
    mean_of(tape, &terms)
}

fn own_class_shortfall(tape: &mut Tape, probs: Var, class: usize) -> Result<Var> {
    let p = tape.value(probs);
    let (b, k) = (p.rows(), p.cols());
    if p.rank() != 2 || b == 0 {
        return Err(Error::invalid(format!("class {class} probability batch is empty")));
    }
    if class >= k {
        return Err(Error::invalid(format!("class {class} has no column among {k}")));
    }
    let mask = tape.constant(one_hot_mask(b, k, |_| class));
    let picked = tape.mul(probs, mask)?;
    let diff = tape.sub(picked, mask)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / b as f64)
}

/// How the similarity loss is normalised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SimilarityNorm {
    /// Largest pairwise distance in the current batch, floored at
    /// [`NORM_FLOOR`], held constant under differentiation.
    BatchMax,
    Fixed(f64),
}

/// Labeled target semantic features the generated batches are compared to.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityTarget<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [usize],
    /// Compare class-`n` generated samples only with class-`n` targets.
    pub class_restricted: bool,
}

impl SimilarityTarget<'_> {
    fn for_class(&self, class: usize) -> Result<Tensor> {
        if self.features.rank() != 2 || self.features.rows() == 0 {
            return Err(Error::invalid("similarity loss needs at least one target feature"));
        }
        if self.labels.len() != self.features.rows() {
            return Err(Error::invalid(format!(
                "{} target labels for {} target features",
                self.labels.len(),
                self.features.rows()
            )));
        }
        if !self.class_restricted {
            return Ok(self.features.clone());
        }
        let rows: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == class).collect();
        if rows.is_empty() {
            return Err(Error::invalid(format!(
                "class-restricted similarity: no target feature for class {class}"
            )));
        }
        Ok(self.features.select_rows(&rows))
    }
}

/// Per-class pairwise distance matrices on the tape, and their normaliser.
fn similarity_pairs(
    tape: &mut Tape,
    semantic_by_class: &[(usize, Var)],
    target: &SimilarityTarget<'_>,
    norm: SimilarityNorm,
) -> Result<(Vec<Var>, f64)> {
    let mut pairs = Vec::with_capacity(semantic_by_class.len());
    let mut max = 0.0f64;
    for &(class, gen) in semantic_by_class {
        if tape.value(gen).rows() == 0 {
            return Err(Error::invalid(format!("class {class} has no generated samples")));
        }
        let t = tape.constant(target.for_class(class)?);
        let w = tape.pairwise_weighted_l1(gen, t)?;
        max = tape.value(w).data().iter().fold(max, |m, &v| m.max(v));
        pairs.push(w);
    }
    let m = match norm {
        SimilarityNorm::BatchMax => max.max(NORM_FLOOR),
        SimilarityNorm::Fixed(m) if m > 0.0 && m.is_finite() => m,
        SimilarityNorm::Fixed(m) => return Err(Error::invalid(format!("similarity normaliser must be > 0, got {m}"))),
    };
    Ok((pairs, m))
}

fn normalised_pair_mean(tape: &mut Tape, w: Var, norm: f64) -> Result<Var> {
    let (b, m) = (tape.value(w).rows(), tape.value(w).cols());
    let total = tape.sum(w)?;
    tape.scale(total, 1.0 / (m as f64 * norm * b as f64))
}

/// Mean weighted-l1 distance between each class's generated semantic
/// features and the target features, divided by the normaliser and averaged
/// over classes. Entry `n` of `semantic_by_class` belongs to class `n`.
pub fn similarity_loss(
    tape: &mut Tape,
    semantic_by_class: &[Var],
    target: &SimilarityTarget<'_>,
    norm: SimilarityNorm,
) -> Result<Var> {
    if semantic_by_class.is_empty() {
        return Err(Error::invalid("similarity loss over zero classes"));
    }
    let indexed: Vec<(usize, Var)> = semantic_by_class.iter().copied().enumerate().collect();
    let (pairs, m) = similarity_pairs(tape, &indexed, target, norm)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for w in pairs {
        terms.push(normalised_pair_mean(tape, w, m)?);
    }
    mean_of(tape, &terms)
}

/// `L_c + lambda * L_s + beta * L_d`. Pass `None` for `l_d` to leave the
/// diversity term off the record entirely.
pub fn generator_loss(tape: &mut Tape, l_c: Var, l_s: Var, l_d: Option<Var>, weights: &LossWeights) -> Result<Var> {
    let ws = tape.scale(l_s, weights.lambda)?;
    let mut total = tape.add(l_c, ws)?;
    if let Some(d) = l_d {
        let wd = tape.scale(d, weights.beta)?;
        total = tape.add(total, wd)?;
    }
    Ok(total)
}

/// Terms of the single-class generator objective.
#[derive(Clone, Copy, Debug)]
pub struct SeparateLoss {
    pub total: Var,
    pub classification: Var,
    pub similarity: Var,
}

/// Single-class objective used when every class has its own generator:
/// own-class shortfall plus `lambda` times that class's similarity term.
pub fn separate_generator_loss(
    tape: &mut Tape,
    probs: Var,
    class: usize,
    semantic: Var,
    target: &SimilarityTarget<'_>,
    lambda: f64,
    norm: SimilarityNorm,
) -> Result<SeparateLoss> {
    let classification = own_class_shortfall(tape, probs, class)?;
    let (pairs, m) = similarity_pairs(tape, &[(class, semantic)], target, norm)?;
    let similarity = normalised_pair_mean(tape, pairs[0], m)?;
    let weighted = tape.scale(similarity, lambda)?;
    let total = tape.add(classification, weighted)?;
    Ok(SeparateLoss {
        total,
        classification,
        similarity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    /// Generated / generated, same class.
    G1,
    /// Generated / target, same class.
    G2,
    /// Generated / generated, different classes.
    G3,
    /// Generated / target, different classes.
    G4,
}

impl GroupId {
    pub const ALL: [GroupId; 4] = [GroupId::G1, GroupId::G2, GroupId::G3, GroupId::G4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn same_class(self) -> bool {
        matches!(self, GroupId::G1 | GroupId::G2)
    }

    pub fn right_side(self) -> Side {
        match self {
            GroupId::G1 | GroupId::G3 => Side::Generated,
            GroupId::G2 | GroupId::G4 => Side::Target,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generated,
    Target,
}

/// One sampled pair. `left` indexes the generated set; `right` indexes the
/// set named by `right_side`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairGroup {
    pub group: GroupId,
    pub left: usize,
    pub left_class: usize,
    pub right: usize,
    pub right_class: usize,
    pub right_side: Side,
}

impl PairGroup {
    /// Whether the pair obeys its group's rule, looked up in the label lists.
    pub fn is_valid(&self, generated_labels: &[usize], target_labels: &[usize]) -> bool {
        let right_labels = match self.right_side {
            Side::Generated => generated_labels,
            Side::Target => target_labels,
        };
        let (Some(&l), Some(&r)) = (generated_labels.get(self.left), right_labels.get(self.right)) else {
            return false;
        };
        self.right_side == self.group.right_side()
            && l == self.left_class
            && r == self.right_class
            && (l == r) == self.group.same_class()
    }
}

fn indices_by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by[y].push(i);
    }
    by
}

/// `per_group` pairs for each of G1..G4 (in that order), each drawn
/// uniformly with replacement from the valid (left, right) combinations.
pub fn build_pair_groups<R: Rng + ?Sized>(
    generated_labels: &[usize],
    target_labels: &[usize],
    per_group: usize,
    rng: &mut R,
) -> Result<Vec<PairGroup>> {
    if per_group == 0 {
        return Err(Error::invalid("pairs per group must be >= 1"));
    }
    let classes = generated_labels.iter().chain(target_labels).max().map_or(0, |m| m + 1);
    let gen = indices_by_class(generated_labels, classes);
    let tgt = indices_by_class(target_labels, classes);
    let present = |by: &[Vec<usize>]| by.iter().filter(|v| !v.is_empty()).count();
    if present(&gen) < 2 {
        return Err(Error::Degenerate(
            "pair group G3 needs generated samples from at least two classes".into(),
        ));
    }
    if present(&tgt) < 2 {
        return Err(Error::Degenerate(
            "pair group G4 needs target samples from at least two classes".into(),
        ));
    }
    let mut out = Vec::with_capacity(4 * per_group);
    for group in GroupId::ALL {
        let right = match group.right_side() {
            Side::Generated => &gen,
            Side::Target => &tgt,
        };
        let right_total: usize = right.iter().map(Vec::len).sum();
        let compatible = |c: usize| {
            if group.same_class() {
                right[c].len()
            } else {
                right_total - right[c].len()
            }
        };
        let weights: Vec<usize> = (0..classes).map(|c| gen[c].len() * compatible(c)).collect();
        let total: usize = weights.iter().sum();
        if total == 0 {
            return Err(Error::Degenerate(format!(
                "pair group {group:?} has no valid combinations"
            )));
        }
        for _ in 0..per_group {
            let mut pick = rng.random_range(0..total);
            let mut c = 0;
            while pick >= weights[c] {
                pick -= weights[c];
                c += 1;
            }
            let left = gen[c][rng.random_range(0..gen[c].len())];
            let (right_idx, right_class) = if group.same_class() {
                (right[c][rng.random_range(0..right[c].len())], c)
            } else {
                let mut k = rng.random_range(0..compatible(c));
                let mut rc = 0;
                loop {
                    if rc != c {
                        if k < right[rc].len() {
                            break;
                        }
                        k -= right[rc].len();
                    }
                    rc += 1;
                }
                (right[rc][k], rc)
            };
            out.push(PairGroup {
                group,
                left,
                left_class: c,
                right: right_idx,
                right_class,
                right_side: group.right_side(),
            });
        }
    }
    Ok(out)
}

/// Per-row `log(max(p[i][col_i], PROB_FLOOR))` as an `n x 1` column.
fn log_prob_at(tape: &mut Tape, probs: Var, cols: &[usize]) -> Result<Var> {
    let p = tape.value(probs);
    let (n, k) = (p.rows(), p.cols());
    if p.rank() != 2 || n != cols.len() || n == 0 {
        return Err(Error::Shape {
            op: "log_prob_at",
            lhs: p.shape().to_vec(),
            rhs: vec![cols.len()],
        });
    }
    if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} outputs")));
    }
    let mask = tape.constant(one_hot_mask(n, k, |i| cols[i]));
    let picked = tape.mul(probs, mask)?;
    let ones = tape.constant(Tensor::ones(&[k, 1]));
    let col = tape.matmul(picked, ones)?;
    let floored = tape.clamp_min(col, PROB_FLOOR)?;
    tape.log(floored)
}

/// Mean negative log probability of the true label.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let lp = log_prob_at(tape, probs, labels)?;
    let m = tape.mean(lp)?;
    tape.scale(m, -1.0)
}

/// Cross-entropy of the discriminator's 4-way output against group labels.
pub fn discriminator_loss(tape: &mut Tape, probs: Var, groups: &[GroupId]) -> Result<Var> {
    let labels: Vec<usize> = groups.iter().map(|g| g.index()).collect();
    cross_entropy(tape, probs, &labels)
}

fn mean_log_at(tape: &mut Tape, probs: Var, group: GroupId) -> Result<Var> {
    let n = tape.value(probs).rows();
    let lp = log_prob_at(tape, probs, &vec![group.index(); n])?;
    tape.mean(lp)
}

/// Inputs of the classifier adaptation loss.
#[derive(Clone, Copy, Debug)]
pub struct AdaptationInputs<'a> {
    /// Discriminator output on encoded G2 pairs.
    pub d_on_g2: Var,
    /// Discriminator output on encoded G4 pairs.
    pub d_on_g4: Var,
    /// Classifier output on the labeled target points.
    pub target_probs: Var,
    pub target_labels: &'a [usize],
    pub gamma: f64,
    pub g4_sign: G4Sign,
}

/// `-gamma * (mean log D(G2)[G1] -/+ mean log D(G4)[G3])` plus the
/// cross-entropy on labeled target data.
pub fn adaptation_loss(tape: &mut Tape, inputs: &AdaptationInputs<'_>) -> Result<Var> {
    if !(inputs.gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {}", inputs.gamma)));
    }
    let g2 = mean_log_at(tape, inputs.d_on_g2, GroupId::G1)?;
    let g4 = mean_log_at(tape, inputs.d_on_g4, GroupId::G3)?;
    let adversarial = match inputs.g4_sign {
        G4Sign::Opposed => tape.sub(g2, g4)?,
        G4Sign::Symmetric => tape.add(g2, g4)?,
    };
    let adversarial = tape.scale(adversarial, -inputs.gamma)?;
    let supervised = cross_entropy(tape, inputs.target_probs, inputs.target_labels)?;
    tape.add(adversarial, supervised)
}

/// The adaptation loss plus cross-entropy on generated samples labeled by
/// their conditioning class. With no generated samples this is exactly
/// [`adaptation_loss`].
pub fn adaptation_loss_with_generated(
    tape: &mut Tape,
    inputs: &AdaptationInputs<'_>,
    generated: Option<(Var, &[usize])>,
) -> Result<Var> {
    let base = adaptation_loss(tape, inputs)?;
    match generated {
        Some((probs, labels)) if !labels.is_empty() => {
            let extra = cross_entropy(tape, probs, labels)?;
            tape.add(base, extra)
        }
        _ => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    fn probs_rows(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn classification_examples() {
        let mut tape = Tape::new();
        let perfect = tape.constant(probs_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
        let perfect2 = tape.constant(probs_rows(&[vec![0.0, 1.0]]));
        let l = classification_loss(&mut tape, &[perfect, perfect2]).unwrap();
        assert_eq!(value(&tape, l), 0.0);

        let half = tape.constant(probs_rows(&[vec![0.5]]));
        let l = classification_loss(&mut tape, &[half]).unwrap();
        assert_eq!(value(&tape, l), 0.25);

        let a = tape.constant(probs_rows(&[vec![0.5, 0.5]]));
        let b = tape.constant(probs_rows(&[vec![0.0, 1.0]]));
        let l = classification_loss(&mut tape, &[a, b]).unwrap();
        assert_eq!(value(&tape, l), 0.125);

        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(classification_loss(&mut tape, &[empty]).is_err());
    }

    #[test]
    fn weighted_l1_examples() {
        assert_eq!(weighted_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((weighted_l1(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 18.2).abs() < 1e-12);
        assert!((weighted_l1(&[-2.5], &[0.0]).unwrap() - 6.25).abs() < 1e-12);
        assert!(weighted_l1(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let target = probs_rows(&[vec![3.0, 4.0]]);
        let labels = [0];
        let st = SimilarityTarget {
            features: &target,
            labels: &labels,
            class_restricted: false,
        };
        let mut tape = Tape::new();
        let gen = tape.leaf(probs_rows(&[vec![0.0, 0.0]]));
        let l = similarity_loss(&mut tape, &[gen], &st, SimilarityNorm::Fixed(18.2)).unwrap();
        assert!((value(&tape, l) - 1.0).abs() < 1e-12);
        let l = similarity_loss(&mut tape, &[gen], &st, SimilarityNorm::BatchMax).unwrap();
        assert!((value(&tape, l) - 1.0).abs() < 1e-12);

        let same = tape.leaf(probs_rows(&[vec![3.0, 4.0], vec![3.0, 4.0]]));
        let l = similarity_loss(&mut tape, &[same], &st, SimilarityNorm::BatchMax).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn class_restriction_needs_a_target_per_class() {
        let target = probs_rows(&[vec![1.0]]);
        let labels = [0];
        let st = SimilarityTarget {
            features: &target,
            labels: &labels,
            class_restricted: true,
        };
        let mut tape = Tape::new();
        let a = tape.leaf(probs_rows(&[vec![0.0]]));
        let b = tape.leaf(probs_rows(&[vec![0.0]]));
        assert!(similarity_loss(&mut tape, &[a, b], &st, SimilarityNorm::BatchMax).is_err());
    }

    #[test]
    fn generator_loss_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(0.1));
        let s = tape.constant(Tensor::scalar(0.2));
        let d = tape.constant(Tensor::scalar(0.3));
        let l = generator_loss(&mut tape, c, s, Some(d), &LossWeights::default()).unwrap();
        assert!((value(&tape, l) - 0.31).abs() < 1e-15);
        let zero = LossWeights { lambda: 0.0, beta: 0.0 };
        let l = generator_loss(&mut tape, c, s, Some(d), &zero).unwrap();
        assert_eq!(value(&tape, l), 0.1);
    }

    #[test]
    fn gamma_schedule() {
        assert_eq!(gamma_at(0.0).unwrap(), 0.0);
        assert!((gamma_at(1.0).unwrap() - 0.999909).abs() < 1e-6);
        assert!((gamma_at(1e6).unwrap() - 1.0).abs() < 1e-15);
        assert!(gamma_at(-0.1).is_err());
    }

    #[test]
    fn discriminator_examples() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::full(&[3, 4], 0.25));
        let l = discriminator_loss(&mut tape, uniform, &[GroupId::G1, GroupId::G3, GroupId::G4]).unwrap();
        assert!((value(&tape, l) - 4f64.ln()).abs() < 1e-12);
        let sure = tape.constant(probs_rows(&[vec![0.0, 1.0, 0.0, 0.0]]));
        let l = discriminator_loss(&mut tape, sure, &[GroupId::G2]).unwrap();
        assert_eq!(value(&tape, l), 0.0);
        let wrong = discriminator_loss(&mut tape, sure, &[GroupId::G1]).unwrap();
        assert!((value(&tape, wrong) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn adaptation_examples() {
        let mut tape = Tape::new();
        let target = tape.constant(probs_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let labels = [0, 1];
        let g2 = tape.constant(probs_rows(&[vec![0.9, 0.05, 0.03, 0.02]]));
        let g4 = tape.constant(probs_rows(&[vec![0.3, 0.3, 0.1, 0.3]]));
        let inputs = AdaptationInputs {
            d_on_g2: g2,
            d_on_g4: g4,
            target_probs: target,
            target_labels: &labels,
            gamma: 1.0,
            g4_sign: G4Sign::Opposed,
        };
        let l = adaptation_loss(&mut tape, &inputs).unwrap();
        assert!((value(&tape, l) + 9f64.ln()).abs() < 1e-12);

        let sym = AdaptationInputs {
            g4_sign: G4Sign::Symmetric,
            ..inputs
        };
        let l = adaptation_loss(&mut tape, &sym).unwrap();
        assert!((value(&tape, l) + 0.9f64.ln() + 0.1f64.ln()).abs() < 1e-12);

        let uniform = tape.constant(Tensor::full(&[2, 4], 0.25));
        let u = AdaptationInputs {
            d_on_g2: uniform,
            d_on_g4: uniform,
            ..inputs
        };
        let l = adaptation_loss(&mut tape, &u).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn gamma_zero_is_plain_cross_entropy() {
        let mut tape = Tape::new();
        let target = tape.constant(probs_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]));
        let labels = [0, 1];
        let g2 = tape.constant(probs_rows(&[vec![0.1, 0.2, 0.3, 0.4]]));
        let inputs = AdaptationInputs {
            d_on_g2: g2,
            d_on_g4: g2,
            target_probs: target,
            target_labels: &labels,
            gamma: 0.0,
            g4_sign: G4Sign::Opposed,
        };
        let l = adaptation_loss(&mut tape, &inputs).unwrap();
        let ce = cross_entropy(&mut tape, target, &labels).unwrap();
        assert_eq!(value(&tape, l), value(&tape, ce));

        let with_none = adaptation_loss_with_generated(&mut tape, &inputs, None).unwrap();
        assert_eq!(value(&tape, with_none), value(&tape, l));
        let gen = tape.constant(probs_rows(&[vec![0.5, 0.5]]));
        let with_one = adaptation_loss_with_generated(&mut tape, &inputs, Some((gen, &[1]))).unwrap();
        assert!((value(&tape, with_one) - value(&tape, l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separate_loss_with_zero_lambda_is_shortfall() {
        let target = probs_rows(&[vec![1.0, 2.0]]);
        let labels = [0];
        let st = SimilarityTarget {
            features: &target,
            labels: &labels,
            class_restricted: false,
        };
        let mut tape = Tape::new();
        let p = tape.constant(probs_rows(&[vec![0.2, 0.8], vec![0.1, 0.9]]));
        let s = tape.constant(probs_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]));
        let l = separate_generator_loss(&mut tape, p, 1, s, &st, 0.0, SimilarityNorm::BatchMax).unwrap();
        let expected = (0.2f64 * 0.2 + 0.1 * 0.1) / 2.0;
        assert!((value(&tape, l.total) - expected).abs() < 1e-15);
        assert_eq!(value(&tape, l.total), value(&tape, l.classification));
    }

    #[test]
    fn pair_groups_small_enumeration() {
        let gen = [0, 1];
        let tgt = [0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = build_pair_groups(&gen, &tgt, 400, &mut rng).unwrap();
        let mut g2 = std::collections::BTreeSet::new();
        let mut g4 = std::collections::BTreeSet::new();
        for p in &pairs {
            assert!(p.is_valid(&gen, &tgt));
            match p.group {
                GroupId::G2 => {
                    g2.insert((p.left, p.right));
                }
                GroupId::G4 => {
                    g4.insert((p.left, p.right));
                }
                _ => {}
            }
        }
        assert_eq!(g2.into_iter().collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert_eq!(g4.into_iter().collect::<Vec<_>>(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn pair_groups_reject_single_target_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = build_pair_groups(&[0, 1], &[0, 0], 3, &mut rng).unwrap_err();
        assert!(err.to_string().contains("G4"));
    }

    #[test]
    fn pair_groups_are_deterministic() {
        let gen = [0, 0, 1, 2, 2];
        let tgt = [0, 1, 2];
        let a = build_pair_groups(&gen, &tgt, 7, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = build_pair_groups(&gen, &tgt, 7, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 28);
    }
}

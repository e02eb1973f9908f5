//! Log-influence and log-coefficient of enumerable joint distributions, and
//! the unlabeled/labeled sample-size calculator driven by them.
//!
//! All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of ratio evaluations a single log-influence may
/// enumerate.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Strictly positive probability table over a finite product space, stored
/// row-major (last coordinate varies fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    support_sizes: Vec<usize>,
    prob: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(support_sizes: Vec<usize>, prob: Vec<f64>) -> Result<Self> {
        if support_sizes.is_empty() || support_sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid support sizes {support_sizes:?}")));
        }
        let cells: usize = support_sizes.iter().product();
        if cells != prob.len() {
            return Err(Error::invalid(format!(
                "support {support_sizes:?} has {cells} cells but {} probabilities were given",
                prob.len()
            )));
        }
        if let Some(p) = prob.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::invalid(format!(
                "every probability must be strictly positive, found {p}"
            )));
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { support_sizes, prob })
    }

    /// Build from `(assignment, probability)` rows covering the whole space
    /// exactly once. Alphabet sizes are inferred as `max value + 1`.
    pub fn from_rows(rows: &[(Vec<usize>, f64)]) -> Result<Self> {
        let m = rows
            .first()
            .map(|(a, _)| a.len())
            .ok_or_else(|| Error::invalid("empty joint table"))?;
        if m == 0 || rows.iter().any(|(a, _)| a.len() != m) {
            return Err(Error::invalid("every row must assign the same coordinates"));
        }
        let mut sizes = vec![0usize; m];
        for (a, _) in rows {
            for (s, &v) in sizes.iter_mut().zip(a) {
                *s = (*s).max(v + 1);
            }
        }
        let cells: usize = sizes.iter().product();
        let mut prob = vec![f64::NAN; cells];
        for (a, p) in rows {
            let idx = flat_index(&sizes, a);
            if !prob[idx].is_nan() {
                return Err(Error::invalid(format!("assignment {a:?} listed twice")));
            }
            prob[idx] = *p;
        }
        if let Some(missing) = prob.iter().position(|p| p.is_nan()) {
            return Err(Error::invalid(format!(
                "assignment {:?} missing from the table",
                unflatten(&sizes, missing)
            )));
        }
        Self::new(sizes, prob)
    }

    /// Product of independent marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let sizes: Vec<usize> = marginals.iter().map(Vec::len).collect();
        let cells: usize = sizes.iter().product();
        let mut prob = Vec::with_capacity(cells);
        for idx in 0..cells {
            let a = unflatten(&sizes, idx);
            prob.push(a.iter().zip(marginals).map(|(&v, m)| m[v]).product());
        }
        let total: f64 = prob.iter().sum();
        for p in &mut prob {
            *p /= total;
        }
        Self::new(sizes, prob)
    }

    pub fn coordinates(&self) -> usize {
        self.support_sizes.len()
    }

    pub fn support_sizes(&self) -> &[usize] {
        &self.support_sizes
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }

    pub fn p(&self, assignment: &[usize]) -> f64 {
        self.prob[flat_index(&self.support_sizes, assignment)]
    }
}

fn flat_index(sizes: &[usize], assignment: &[usize]) -> usize {
    assignment.iter().zip(sizes).fold(0, |acc, (&v, &s)| acc * s + v)
}

fn unflatten(sizes: &[usize], mut idx: usize) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for (slot, &s) in out.iter_mut().zip(sizes).rev() {
        *slot = idx % s;
        idx /= s;
    }
    out
}

/// Visit every arrangement `(z_i, z_i', z_j, z_j', rest)` and fold the
/// value produced by `term` into a running maximum.
fn max_over_arrangements(
    joint: &DiscreteJoint,
    j: usize,
    i: usize,
    cap: u64,
    term: impl Fn(&[usize; 4]) -> f64,
) -> Result<f64> {
    let m = joint.coordinates();
    if i == j {
        return Err(Error::invalid(format!("log-influence needs i != j, got {i} twice")));
    }
    if i >= m || j >= m {
        return Err(Error::invalid(format!(
            "coordinate index out of range for {m} coordinates: ({j}, {i})"
        )));
    }
    let sizes = joint.support_sizes();
    let (si, sj) = (sizes[i] as u64, sizes[j] as u64);
    let rest: Vec<usize> = (0..m).filter(|&k| k != i && k != j).collect();
    let rest_cells: u64 = rest.iter().map(|&k| sizes[k] as u64).product();
    let evaluations = rest_cells.saturating_mul(si * si).saturating_mul(sj * sj);
    if evaluations > cap {
        return Err(Error::invalid(format!(
            "log-influence would enumerate {evaluations} ratios, above the cap of {cap}"
        )));
    }
    let rest_sizes: Vec<usize> = rest.iter().map(|&k| sizes[k]).collect();
    let mut assignment = vec![0usize; m];
    let mut best = f64::NEG_INFINITY;
    for r in 0..rest_cells as usize {
        for (&k, v) in rest.iter().zip(unflatten(&rest_sizes, r)) {
            assignment[k] = v;
        }
        let mut cell = |zi: usize, zj: usize| {
            assignment[i] = zi;
            assignment[j] = zj;
            flat_index(sizes, &assignment)
        };
        for zi in 0..sizes[i] {
            for zi2 in 0..sizes[i] {
                for zj in 0..sizes[j] {
                    for zj2 in 0..sizes[j] {
                        let cells = [cell(zi, zj), cell(zi2, zj2), cell(zi2, zj), cell(zi, zj2)];
                        best = best.max(term(&cells));
                    }
                }
            }
        }
    }
    Ok(best)
}

/// `(1/4) * max log[ p(z_i z_j r) p(z_i' z_j' r) / (p(z_i' z_j r) p(z_i z_j' r)) ]`
/// over every assignment `r` of the other coordinates and every choice of
/// the four values, by exhaustive enumeration.
pub fn log_influence(joint: &DiscreteJoint, j: usize, i: usize) -> Result<f64> {
    log_influence_capped(joint, j, i, DEFAULT_ENUMERATION_CAP)
}

pub fn log_influence_capped(joint: &DiscreteJoint, j: usize, i: usize, cap: u64) -> Result<f64> {
    let p = joint.prob();
    let best = max_over_arrangements(joint, j, i, cap, |c| ((p[c[0]] * p[c[1]]) / (p[c[2]] * p[c[3]])).ln())?;
    Ok(best / 4.0)
}

/// Same quantity as [`log_influence`], evaluated as a sum of four entries of
/// a precomputed log-probability table.
pub fn log_influence_log_table(joint: &DiscreteJoint, j: usize, i: usize) -> Result<f64> {
    let logs: Vec<f64> = joint.prob().iter().map(|p| p.ln()).collect();
    let best = max_over_arrangements(joint, j, i, DEFAULT_ENUMERATION_CAP, |c| {
        logs[c[0]] + logs[c[1]] - logs[c[2]] - logs[c[3]]
    })?;
    Ok(best / 4.0)
}

/// `max_i sum_{j != i} I(j, i)`; zero for a single coordinate.
pub fn log_coefficient(joint: &DiscreteJoint) -> Result<f64> {
    log_coefficient_capped(joint, DEFAULT_ENUMERATION_CAP)
}

pub fn log_coefficient_capped(joint: &DiscreteJoint, cap: u64) -> Result<f64> {
    let m = joint.coordinates();
    let mut best = 0.0f64;
    for i in 0..m {
        let mut total = 0.0;
        for j in (0..m).filter(|&j| j != i) {
            total += log_influence_capped(joint, j, i, cap)?;
        }
        best = best.max(total);
    }
    Ok(best)
}

/// Inputs of the sample-size calculator. The two constants stand in for the
/// unspecified factors hidden in the big-O terms, so outputs are exact only
/// up to those constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityInputs {
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
    pub vc_dim: f64,
    /// Compatibility defect of the optimal hypothesis, in `[0, 1]`.
    pub t: f64,
    /// Expected number of splits of `2 m_l` points by sufficiently
    /// compatible hypotheses; supplied by the caller.
    pub split_count: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for ComplexityInputs {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            delta: 0.05,
            alpha: 0.0,
            vc_dim: 1.0,
            t: 0.0,
            split_count: 1.0,
            c1: 1.0,
            c2: 1.0,
        }
    }
}

impl ComplexityInputs {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.epsilon) {
            return Err(Error::invalid(format!(
                "epsilon must be in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !open_unit(self.delta) {
            return Err(Error::invalid(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.alpha >= 0.5 {
            return Err(Error::invalid(format!(
                "alpha = {} violates the weak-dependence hypothesis of the sample-complexity \
                 theorem (log-coefficient < 1/2); the bound does not apply",
                self.alpha
            )));
        }
        if !(self.vc_dim > 0.0) {
            return Err(Error::invalid(format!("vc_dim must be positive, got {}", self.vc_dim)));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::invalid(format!("t must be in [0, 1], got {}", self.t)));
        }
        if !(self.split_count > 0.0) {
            return Err(Error::invalid(format!(
                "split_count must be positive, got {}",
                self.split_count
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::invalid("c1 and c2 must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub unlabeled: u64,
    pub labeled: u64,
}

/// Ceiling that ignores floating noise: values within 1e-9 (relative) of an
/// integer snap to it before rounding up.
fn ceil_exact(x: f64) -> u64 {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        return nearest as u64;
    }
    x.ceil() as u64
}

/// Unlabeled and labeled sample sizes sufficient for error `epsilon` with
/// probability `1 - delta`:
///
/// ```text
/// m_u = ceil(max(c1 ln(2/delta) / ((1 - alpha) eps^2), c2 vc / ((1 - 2 alpha) eps^2)))
/// m_l = ceil((2/eps) (ln(2 split_count) + ln(4/delta)))
/// ```
pub fn sample_complexity(inputs: &ComplexityInputs) -> Result<SampleSizes> {
    inputs.validate()?;
    let ComplexityInputs {
        epsilon: eps,
        delta,
        alpha,
        vc_dim,
        split_count,
        c1,
        c2,
        ..
    } = *inputs;
    let eps2 = eps * eps;
    let confidence_term = c1 * (2.0 / delta).ln() / ((1.0 - alpha) * eps2);
    let capacity_term = c2 * vc_dim / ((1.0 - 2.0 * alpha) * eps2);
    let unlabeled = ceil_exact(confidence_term.max(capacity_term));
    let labeled = ceil_exact((2.0 / eps) * ((2.0 * split_count).ln() + (4.0 / delta).ln()));
    Ok(SampleSizes { unlabeled, labeled })
}

/// Evaluate the calculator at each `alpha`, keeping every other input fixed.
pub fn alpha_sweep(inputs: &ComplexityInputs, alphas: &[f64]) -> Result<Vec<(f64, SampleSizes)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let sizes = sample_complexity(&ComplexityInputs { alpha, ..*inputs })?;
            Ok((alpha, sizes))
        })
        .collect()
}

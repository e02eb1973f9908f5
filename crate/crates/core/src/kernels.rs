//! Gaussian kernel matrices, the centering matrix and bandwidth selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{pairwise_sq_dist, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Kernel width: a fixed positive value or the per-batch median heuristic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Heuristic(Heuristic),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    MedianHeuristic,
}

impl Bandwidth {
    pub const MEDIAN: Bandwidth = Bandwidth::Heuristic(Heuristic::MedianHeuristic);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "default_bandwidth")]
    pub bandwidth: Bandwidth,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_bandwidth() -> Bandwidth {
    Bandwidth::MEDIAN
}

fn default_jitter() -> f64 {
    1e-6
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: default_bandwidth(),
            jitter: default_jitter(),
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64, jitter: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
            jitter,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("kernel.bandwidth", format!("must be > 0, got {s}")));
            }
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config(
                "kernel.jitter",
                format!("must be >= 0, got {}", self.jitter),
            ));
        }
        Ok(())
    }

    /// The bandwidth to use for batch `x`. Batches with fewer than two rows
    /// fall back to 1.0 under the median heuristic.
    pub fn resolve(&self, x: &Tensor) -> Result<f64> {
        self.validate()?;
        match self.bandwidth {
            Bandwidth::Fixed(s) => Ok(s),
            Bandwidth::Heuristic(Heuristic::MedianHeuristic) if x.rows() < 2 => Ok(1.0),
            Bandwidth::Heuristic(Heuristic::MedianHeuristic) => median_bandwidth(x),
        }
    }
}

/// Median of all pairwise Euclidean distances between rows; 1.0 when that
/// median is zero.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let n = x.rows();
    if x.rank() != 2 || n < 2 {
        return Err(Error::invalid(format!(
            "median bandwidth needs at least 2 rows, got shape {:?}",
            x.shape()
        )));
    }
    let sq = pairwise_sq_dist(x);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq.get(i, j).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// `K[i][j] = exp(-||x_i - x_j||^2 / (2 sigma^2)) + jitter * [i == j]`.
pub fn gram_matrix(x: &Tensor, cfg: &KernelConfig) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::invalid(format!(
            "gram matrix of an empty or non-matrix batch {:?}",
            x.shape()
        )));
    }
    let sigma = cfg.resolve(x)?;
    let mut k = pairwise_sq_dist(x).map(|d| (-d / (2.0 * sigma * sigma)).exp());
    for i in 0..x.rows() {
        let v = k.get(i, i);
        k.set(i, i, v + cfg.jitter);
    }
    Ok(k)
}

/// Differentiable gram matrix for a recorded batch. The bandwidth is a plain
/// number here: it does not carry gradient.
pub fn gram_on_tape(tape: &mut Tape, x: Var, sigma: f64, jitter: f64) -> Result<Var> {
    let n = tape.value(x).rows();
    let sq = tape.pairwise_sq_dist(x)?;
    let scaled = tape.scale(sq, -1.0 / (2.0 * sigma * sigma))?;
    let k = tape.exp(scaled)?;
    if jitter == 0.0 {
        return Ok(k);
    }
    let diag = tape.constant(Tensor::identity(n).map(|v| v * jitter));
    tape.add(k, diag)
}

/// `H = I - (1/n) 1 1^T`.
pub fn centering_matrix(n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("centering matrix of size 0"));
    }
    let inv = 1.0 / n as f64;
    let mut h = Tensor::full(&[n, n], -inv);
    for i in 0..n {
        h.set(i, i, 1.0 - inv);
    }
    Ok(h)
}

//! Operation set shared by eager evaluation and the recording tape.
//!
//! Every operation has a forward rule ([`Op::eval`]) and a vector-Jacobian
//! product ([`Op::vjp`]). Shape rules are checked in `eval`; `vjp` trusts
//! that its inputs already passed them.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Mean of all entries, producing a scalar.
    Mean,
    Softmax {
        axis: usize,
    },
    Concat {
        axis: usize,
    },
    Transpose,
    Trace,
    /// `x + b` with `b` (length `cols`) added to every row of `x`.
    RowBroadcast,
    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    ClampMin(f64),
    /// Squared Euclidean distances between all rows of one matrix.
    PairwiseSqDist,
    /// `W[i][j] = sum_k |a_ik - b_jk|^3 / ||a_i - b_j||_2`, zero when the rows coincide.
    PairwiseWeightedL1,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Transpose => "transpose",
            Op::Trace => "trace",
            Op::RowBroadcast => "row_broadcast",
            Op::ClampMin(_) => "clamp_min",
            Op::PairwiseSqDist => "pairwise_sq_dist",
            Op::PairwiseWeightedL1 => "pairwise_weighted_l1",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::RowBroadcast | Op::PairwiseWeightedL1 => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }

    pub fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} expects {n} inputs, got {}",
                    self.name(),
                    inputs.len()
                )));
            }
        }
        match *self {
            Op::MatMul => matmul(inputs[0], inputs[1]),
            Op::Add => elementwise(self.name(), inputs[0], inputs[1], |a, b| a + b),
            Op::Sub => elementwise(self.name(), inputs[0], inputs[1], |a, b| a - b),
            Op::Mul => elementwise(self.name(), inputs[0], inputs[1], |a, b| a * b),
            Op::Scale(c) => Ok(inputs[0].map(|x| c * x)),
            Op::Relu => Ok(inputs[0].map(|x| if x > 0.0 { x } else { 0.0 })),
            Op::ClampMin(floor) => Ok(inputs[0].map(|x| if x > floor { x } else { floor })),
            Op::Tanh => Ok(inputs[0].map(f64::tanh)),
            Op::Exp => Ok(inputs[0].map(f64::exp)),
            Op::Log => {
                reject_negative(self.name(), inputs[0])?;
                Ok(inputs[0].map(f64::ln))
            }
            Op::Sqrt => {
                reject_negative(self.name(), inputs[0])?;
                Ok(inputs[0].map(f64::sqrt))
            }
            Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
            Op::Mean => {
                let x = inputs[0];
                if x.is_empty() {
                    return Err(Error::Domain {
                        op: "mean",
                        detail: "empty tensor".into(),
                    });
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
            }
            Op::Softmax { axis } => softmax(inputs[0], axis),
            Op::Concat { axis } => concat(inputs, axis),
            Op::Transpose => {
                require_rank2("transpose", inputs[0])?;
                Ok(transpose(inputs[0]))
            }
            Op::Trace => {
                let x = inputs[0];
                if x.rank() != 2 || x.rows() != x.cols() {
                    return Err(Error::Shape {
                        op: "trace",
                        lhs: x.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                Ok(Tensor::scalar((0..x.rows()).map(|i| x.get(i, i)).sum()))
            }
            Op::RowBroadcast => row_broadcast(inputs[0], inputs[1]),
            Op::PairwiseSqDist => {
                require_rank2("pairwise_sq_dist", inputs[0])?;
                Ok(pairwise_sq_dist(inputs[0]))
            }
            Op::PairwiseWeightedL1 => pairwise_weighted_l1(inputs[0], inputs[1]),
        }
    }

    /// Gradients of a downstream scalar with respect to each input, given
    /// the gradient `grad` with respect to this operation's output `out`.
    /// Entries of `needs` that are false yield `None`.
    pub fn vjp(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match *self {
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = want(0).then(|| matmul_unchecked(grad, &transpose(b)));
                let gb = want(1).then(|| matmul_unchecked(&transpose(a), grad));
                vec![ga, gb]
            }
            Op::Add => vec![want(0).then(|| grad.clone()), want(1).then(|| grad.clone())],
            Op::Sub => vec![want(0).then(|| grad.clone()), want(1).then(|| grad.map(|g| -g))],
            Op::Mul => vec![
                want(0).then(|| grad.zip_map(inputs[1], |g, b| g * b)),
                want(1).then(|| grad.zip_map(inputs[0], |g, a| g * a)),
            ],
            Op::Scale(c) => vec![Some(grad.map(|g| c * g))],
            Op::Relu => vec![Some(grad.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::ClampMin(floor) => vec![Some(grad.zip_map(inputs[0], |g, x| if x > floor { g } else { 0.0 }))],
            Op::Tanh => vec![Some(grad.zip_map(out, |g, y| g * (1.0 - y * y)))],
            Op::Exp => vec![Some(grad.zip_map(out, |g, y| g * y))],
            Op::Log => vec![Some(grad.zip_map(inputs[0], |g, x| g / x))],
            // Subgradient 0 at the origin keeps clamped square roots finite.
            Op::Sqrt => vec![Some(grad.zip_map(
                out,
                |g, y| {
                    if y > 0.0 {
                        g / (2.0 * y)
                    } else {
                        0.0
                    }
                },
            ))],
            Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), grad.item()))],
            Op::Mean => {
                let n = inputs[0].len() as f64;
                vec![Some(Tensor::full(inputs[0].shape(), grad.item() / n))]
            }
            Op::Softmax { axis } => vec![Some(softmax_vjp(out, grad, axis))],
            Op::Concat { axis } => concat_vjp(inputs, grad, axis, needs),
            Op::Transpose => vec![Some(transpose(grad))],
            Op::Trace => {
                let n = inputs[0].rows();
                let mut g = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    g.set(i, i, grad.item());
                }
                vec![Some(g)]
            }
            Op::RowBroadcast => {
                let gb = want(1).then(|| {
                    let (r, c) = (grad.rows(), grad.cols());
                    let mut sums = vec![0.0; c];
                    for i in 0..r {
                        for (s, g) in sums.iter_mut().zip(grad.row(i)) {
                            *s += g;
                        }
                    }
                    Tensor::new(inputs[1].shape().to_vec(), sums).expect("bias shape")
                });
                vec![want(0).then(|| grad.clone()), gb]
            }
            Op::PairwiseSqDist => vec![Some(pairwise_sq_dist_vjp(inputs[0], grad))],
            Op::PairwiseWeightedL1 => pairwise_weighted_l1_vjp(inputs[0], inputs[1], grad, needs),
        }
    }
}

fn require_rank2(op: &'static str, x: &Tensor) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(())
}

fn reject_negative(op: &'static str, x: &Tensor) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| **v < 0.0 || v.is_nan()) {
        return Err(Error::Domain {
            op,
            detail: format!("argument {v} outside the domain"),
        });
    }
    Ok(())
}

fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.zip_map(b, f))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(matmul_unchecked(a, b))
}

pub(crate) fn matmul_unchecked(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out).expect("matmul shape")
}

pub(crate) fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.get(i, j);
        }
    }
    Tensor::matrix(c, r, out).expect("transpose shape")
}

fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let valid = match x.rank() {
        1 => axis == 0,
        2 => axis < 2,
        _ => false,
    };
    if !valid {
        return Err(Error::Shape {
            op: "softmax",
            lhs: x.shape().to_vec(),
            rhs: vec![axis],
        });
    }
    let mut out = x.clone();
    for_each_slice(x, axis, |idx| {
        let max = idx.iter().map(|&i| x.data()[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &i in idx {
            let e = (x.data()[i] - max).exp();
            out.data_mut()[i] = e;
            total += e;
        }
        for &i in idx {
            out.data_mut()[i] /= total;
        }
    });
    Ok(out)
}

fn softmax_vjp(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let mut out = Tensor::zeros(y.shape());
    for_each_slice(y, axis, |idx| {
        let dot: f64 = idx.iter().map(|&i| y.data()[i] * g.data()[i]).sum();
        for &i in idx {
            out.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
        }
    });
    out
}

/// Visit the flat indices of every 1-D slice along `axis`.
fn for_each_slice(x: &Tensor, axis: usize, mut f: impl FnMut(&[usize])) {
    if x.rank() == 1 {
        let idx: Vec<usize> = (0..x.len()).collect();
        f(&idx);
        return;
    }
    let (r, c) = (x.rows(), x.cols());
    if axis == 1 {
        for i in 0..r {
            let idx: Vec<usize> = (i * c..(i + 1) * c).collect();
            f(&idx);
        }
    } else {
        for j in 0..c {
            let idx: Vec<usize> = (0..r).map(|i| i * c + j).collect();
            f(&idx);
        }
    }
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
    for t in inputs {
        require_rank2("concat", t)?;
        let ok = match axis {
            0 => t.cols() == first.cols(),
            1 => t.rows() == first.rows(),
            _ => false,
        };
        if !ok {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    if axis == 0 {
        let rows = inputs.iter().map(|t| t.rows()).sum();
        let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
        return Tensor::matrix(rows, first.cols(), data);
    }
    let rows = first.rows();
    let cols: usize = inputs.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for t in inputs {
            data.extend_from_slice(t.row(i));
        }
    }
    Tensor::matrix(rows, cols, data)
}

fn concat_vjp(inputs: &[&Tensor], g: &Tensor, axis: usize, needs: &[bool]) -> Vec<Option<Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for (k, t) in inputs.iter().enumerate() {
        let (r, c) = (t.rows(), t.cols());
        if !needs.get(k).copied().unwrap_or(false) {
            out.push(None);
        } else if axis == 0 {
            let start = offset * c;
            let data = g.data()[start..start + r * c].to_vec();
            out.push(Some(Tensor::matrix(r, c, data).expect("concat grad")));
        } else {
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                data.extend_from_slice(&g.row(i)[offset..offset + c]);
            }
            out.push(Some(Tensor::matrix(r, c, data).expect("concat grad")));
        }
        offset += if axis == 0 { r } else { c };
    }
    out
}

fn row_broadcast(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bias_ok = match b.rank() {
        1 => true,
        2 => b.rows() == 1,
        _ => false,
    };
    if x.rank() != 2 || !bias_ok || b.len() != x.cols() {
        return Err(Error::Shape {
            op: "row_broadcast",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let c = x.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % c];
    }
    Ok(out)
}

pub(crate) fn pairwise_sq_dist(x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

fn pairwise_sq_dist_vjp(x: &Tensor, g: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = 2.0 * (g.get(i, j) + g.get(j, i));
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                let delta = x.get(i, k) - x.get(j, k);
                let cur = out.get(i, k);
                out.set(i, k, cur + w * delta);
            }
        }
    }
    out
}

/// Cubic-over-norm distance between two vectors; 0 when they coincide.
pub fn weighted_l1_value(x: &[f64], y: &[f64]) -> f64 {
    let mut cubes = 0.0;
    let mut squares = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = (a - b).abs();
        cubes += d * d * d;
        squares += d * d;
    }
    if squares == 0.0 {
        0.0
    } else {
        cubes / squares.sqrt()
    }
}

fn pairwise_weighted_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "pairwise_weighted_l1",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (n, m) = (a.rows(), b.rows());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.push(weighted_l1_value(a.row(i), b.row(j)));
        }
    }
    Tensor::matrix(n, m, data)
}

#[allow(clippy::needless_range_loop)]
fn pairwise_weighted_l1_vjp(a: &Tensor, b: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let mut diff = vec![0.0; d];
    for i in 0..n {
        for j in 0..m {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            let mut cubes = 0.0;
            let mut squares = 0.0;
            for k in 0..d {
                diff[k] = a.get(i, k) - b.get(j, k);
                let ad = diff[k].abs();
                cubes += ad * ad * ad;
                squares += ad * ad;
            }
            if squares == 0.0 {
                continue;
            }
            let r = squares.sqrt();
            let r3 = r * squares;
            for k in 0..d {
                let dk = diff[k];
                let partial = gij * (3.0 * dk.abs() * dk / r - cubes * dk / r3);
                let va = ga.get(i, k);
                ga.set(i, k, va + partial);
                let vb = gb.get(j, k);
                gb.set(j, k, vb - partial);
            }
        }
    }
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    vec![want(0).then_some(ga), want(1).then_some(gb)]
}

//! Biased empirical HSIC, the per-class diversity loss built on it, and a
//! loop-based reference estimator.

use crate::autodiff::{matmul_unchecked, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kernels::{centering_matrix, gram_matrix, gram_on_tape, KernelConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsicValue {
    pub value: f64,
    pub n: usize,
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<usize> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(Error::Shape {
            op: "hsic",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::invalid(format!("hsic needs N >= 2, got {}", x.rows())));
    }
    Ok(x.rows())
}

/// `Tr(K H L H) / (N - 1)^2`, clamped at zero.
pub fn hsic_biased(x: &Tensor, y: &Tensor, cfg: &KernelConfig) -> Result<HsicValue> {
    let n = check_pair(x, y)?;
    let k = gram_matrix(x, cfg)?;
    let l = gram_matrix(y, cfg)?;
    let h = centering_matrix(n)?;
    let kh = matmul_unchecked(&k, &h);
    let lh = matmul_unchecked(&l, &h);
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += kh.get(i, j) * lh.get(j, i);
        }
    }
    let denom = ((n - 1) * (n - 1)) as f64;
    Ok(HsicValue {
        value: (trace / denom).max(0.0),
        n,
    })
}

/// Square root of the self-HSIC of a feature batch. Lower means the rows
/// depend less on each other.
pub fn diversity_report(features: &Tensor, cfg: &KernelConfig) -> Result<f64> {
    Ok(hsic_biased(features, features, cfg)?.value.sqrt())
}

/// Mean over classes of the square-rooted self-HSIC of each class batch,
/// recorded so gradients reach the features. Bandwidths are resolved from
/// the current values and held fixed.
pub fn diversity_loss(tape: &mut Tape, features_by_class: &[Var], cfg: &KernelConfig) -> Result<Var> {
    if features_by_class.is_empty() {
        return Err(Error::invalid("diversity loss over zero classes"));
    }
    let mut terms = Vec::with_capacity(features_by_class.len());
    for (class, &features) in features_by_class.iter().enumerate() {
        let value = tape.value(features);
        let n = value.rows();
        if value.rank() != 2 || n < 2 {
            return Err(Error::invalid(format!(
                "diversity loss: class {class} batch has {n} rows, need at least 2"
            )));
        }
        let sigma = cfg.resolve(value)?;
        let gram = gram_on_tape(tape, features, sigma, cfg.jitter)?;
        let h = tape.constant(centering_matrix(n)?);
        let gh = tape.matmul(gram, h)?;
        let ghgh = tape.matmul(gh, gh)?;
        let trace = tape.trace(ghgh)?;
        let hsic = tape.scale(trace, 1.0 / ((n - 1) * (n - 1)) as f64)?;
        let clamped = tape.clamp_min(hsic, 0.0)?;
        terms.push(tape.sqrt(clamped)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Reference estimator by explicit element loops: the kernels, both doubly
/// centred matrices and the final trace are each formed entry by entry.
/// Intended for N up to a few dozen.
#[allow(clippy::needless_range_loop)]
pub fn hsic_oracle(x: &Tensor, y: &Tensor, cfg: &KernelConfig) -> Result<f64> {
    let n = check_pair(x, y)?;
    let sx = cfg.resolve(x)?;
    let sy = cfg.resolve(y)?;
    let kernel = |t: &Tensor, sigma: f64, i: usize, j: usize| {
        let mut d2 = 0.0;
        for c in 0..t.cols() {
            let d = t.get(i, c) - t.get(j, c);
            d2 += d * d;
        }
        let jitter = if i == j { cfg.jitter } else { 0.0 };
        (-d2 / (2.0 * sigma * sigma)).exp() + jitter
    };
    let centring = |i: usize, j: usize| (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64;
    let doubly_centred = |t: &Tensor, sigma: f64| {
        let mut raw = vec![vec![0.0; n]; n];
        for (i, row) in raw.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = kernel(t, sigma, i, j);
            }
        }
        let mut left = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for a in 0..n {
                    left[i][j] += centring(i, a) * raw[a][j];
                }
            }
        }
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for b in 0..n {
                    out[i][j] += left[i][b] * centring(b, j);
                }
            }
        }
        out
    };
    let kc = doubly_centred(x, sx);
    let lc = doubly_centred(y, sy);
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += kc[i][j] * lc[j][i];
        }
    }
    Ok((trace / ((n - 1) * (n - 1)) as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()
    }

    fn two_point() -> f64 {
        let a = (-0.5f64).exp();
        (1.0 - a) * (1.0 - a)
    }

    #[test]
    fn constant_batch_has_zero_hsic() {
        let x = Tensor::full(&[6, 2], 0.7);
        let y = Tensor::from_rows(&(0..6).map(|i| vec![i as f64, (i * i) as f64]).collect::<Vec<_>>()).unwrap();
        let cfg = KernelConfig::fixed(1.0, 0.0);
        assert!(hsic_biased(&x, &y, &cfg).unwrap().value.abs() < 1e-15);
        assert!(hsic_oracle(&x, &y, &cfg).unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_point_closed_form() {
        let x = column(&[0.0, 1.0]);
        let cfg = KernelConfig::fixed(1.0, 0.0);
        let v = hsic_biased(&x, &x, &cfg).unwrap();
        assert_eq!(v.n, 2);
        assert!((v.value - two_point()).abs() < 1e-12);
        assert!((v.value - 0.154818).abs() < 1e-6);
        assert!((hsic_oracle(&x, &x, &cfg).unwrap() - two_point()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_batches_rejected() {
        let cfg = KernelConfig::default();
        assert!(hsic_biased(&column(&[0.0, 1.0]), &column(&[0.0, 1.0, 2.0]), &cfg).is_err());
        assert!(hsic_oracle(&column(&[0.0]), &column(&[0.0]), &cfg).is_err());
    }

    #[test]
    fn diversity_loss_single_class_two_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(column(&[0.0, 1.0]));
        let loss = diversity_loss(&mut tape, &[x], &KernelConfig::fixed(1.0, 0.0)).unwrap();
        let v = tape.value(loss).item();
        assert!((v - two_point().sqrt()).abs() < 1e-12);
        assert!((v - 0.393469).abs() < 1e-6);
    }

    #[test]
    fn diversity_loss_of_constant_batches_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[4, 3], 1.0));
        let b = tape.leaf(Tensor::full(&[5, 3], -2.0));
        let loss = diversity_loss(&mut tape, &[a, b], &KernelConfig::fixed(1.0, 0.0)).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(a).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn diversity_loss_rejects_single_row_class() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2]));
        assert!(diversity_loss(&mut tape, &[a], &KernelConfig::default()).is_err());
    }

    #[test]
    fn diversity_report_of_constant_batch_is_zero() {
        let x = Tensor::full(&[32, 2], 3.0);
        assert!(diversity_report(&x, &KernelConfig::fixed(1.0, 0.0)).unwrap() < 1e-12);
    }
}

use crate::error::{Error, Result};

use super::Matrix;

/// Rows with a smaller Euclidean norm cannot be normalized.
pub const NORM_FLOOR: f64 = 1e-12;

/// Elementwise `max(x, slope·x)` for `slope ∈ (0, 1)`.
pub fn leaky_relu(x: &Matrix, slope: f64) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient of [`leaky_relu`] evaluated at the forward input `x`.
/// Ties at exactly zero take the `slope` branch.
pub fn leaky_relu_backward(x: &Matrix, grad_out: &Matrix, slope: f64) -> Result<Matrix> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Dimension {
            op: "leaky_relu_backward",
            left: x.shape(),
            right: grad_out.shape(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect();
    Matrix::new(x.rows(), x.cols(), data)
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > NORM_FLOOR) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {norm:e}, cannot normalize"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Backward of [`l2_normalize_rows`]: per row `(I − ẑẑᵀ) g / ‖x‖`.
pub fn l2_normalize_rows_backward(x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Dimension {
            op: "l2_normalize_rows_backward",
            left: x.shape(),
            right: grad_out.shape(),
        });
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let xr = x.row(i);
        let g = grad_out.row(i);
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > NORM_FLOOR) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {norm:e}, cannot normalize"
            )));
        }
        let zg: f64 = xr.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
        for ((o, &xv), &gv) in out.row_mut(i).iter_mut().zip(xr).zip(g) {
            *o = (gv - (xv / norm) * zg) / norm;
        }
    }
    Ok(out)
}

/// `log Σ exp(tᵢ)` with the maximum shifted out.
pub fn logsumexp_stable(terms: &[f64]) -> Result<f64> {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if terms.is_empty() {
        return Err(Error::Contract("logsumexp of an empty sequence".into()));
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let s: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    Ok(max + s.ln())
}

/// Replaces `values` by their softmax; returns the log-normalizer.
pub fn softmax_in_place(values: &mut [f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    values.iter_mut().for_each(|v| *v /= s);
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Rng;

    const H: f64 = 1e-5;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn leaky_relu_values() {
        let x = Matrix::row_vector(&[5.0, -5.0, 0.0]);
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[5.0, -1.0, 0.0]);
        let g = leaky_relu_backward(
            &Matrix::row_vector(&[-1.0, 2.0, 0.0]),
            &Matrix::row_vector(&[3.0, 3.0, 3.0]),
            0.2,
        )
        .unwrap();
        assert!((g.get(0, 0) - 0.6).abs() < 1e-15);
        assert_eq!(g.get(0, 1), 3.0);
        // tie at zero takes the slope branch
        assert!((g.get(0, 2) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let y = l2_normalize_rows(&Matrix::row_vector(&[3.0, 4.0])).unwrap();
        assert!((y.get(0, 0) - 0.6).abs() < 1e-15 && (y.get(0, 1) - 0.8).abs() < 1e-15);
        let u = Matrix::row_vector(&[0.6, 0.8]);
        let again = l2_normalize_rows(&u).unwrap();
        for (a, b) in again.data().iter().zip(u.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            l2_normalize_rows(&Matrix::row_vector(&[0.0, 1e-13])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let x = Matrix::from_fn(3, 4, |_, _| rng.normal());
            let w = Matrix::from_fn(3, 4, |_, _| rng.normal());
            let f = |x: &Matrix| l2_normalize_rows(x).unwrap().hadamard(&w).unwrap().sum();
            let analytic = l2_normalize_rows_backward(&x, &w).unwrap();
            for k in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[k] += H;
                let mut xm = x.clone();
                xm.data_mut()[k] -= H;
                let fd = (f(&xp) - f(&xm)) / (2.0 * H);
                assert!(
                    (fd - analytic.data()[k]).abs() < 1e-6 * analytic.max_abs().max(1.0),
                    "{fd} vs {}",
                    analytic.data()[k]
                );
            }
        }
    }

    #[test]
    fn leaky_backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let mut checked = 0;
        while checked < 100 {
            let x = rng.normal();
            if x.abs() < 1e-3 {
                continue;
            }
            let g = rng.normal();
            let f = |v: f64| g * leaky_relu(&Matrix::row_vector(&[v]), 0.2).get(0, 0);
            let fd = (f(x + H) - f(x - H)) / (2.0 * H);
            let an = leaky_relu_backward(&Matrix::row_vector(&[x]), &Matrix::row_vector(&[g]), 0.2)
                .unwrap()
                .get(0, 0);
            assert!(rel_err(fd, an) < 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp_stable(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = logsumexp_stable(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let t = [0.3, -1.2, 2.0];
        let naive = t.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((logsumexp_stable(&t).unwrap() - naive).abs() < 1e-14);
        assert!(matches!(logsumexp_stable(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = [1.0, 2.0, 3.0, 800.0];
        let lse = softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((lse - logsumexp_stable(&[1.0, 2.0, 3.0, 800.0]).unwrap()).abs() < 1e-12);
    }
}

//! Deterministic numeric kernels shared by every other module.

mod matrix;
mod rng;

pub use matrix::{mat_vec, Matrix};
pub use rng::{derive_seed, Rng};

use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Row-wise softmax of a logits matrix.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if logits.cols() == 0 {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let mut data = Vec::with_capacity(logits.rows() * logits.cols());
    for row in logits.row_iter() {
        data.extend(softmax_unchecked(row));
    }
    Ok(Matrix::from_raw(logits.rows(), logits.cols(), data))
}

/// `KL(target ‖ predicted) = Σ tᵢ (ln tᵢ − ln pᵢ)`, with `0 · ln 0 = 0` and
/// `pᵢ` clamped below at [`LOG_CLAMP`].
pub fn kl_divergence(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "KL between distributions of length {} and {}",
            target.len(),
            predicted.len()
        )));
    }
    for (name, dist) in [("target", target), ("predicted", predicted)] {
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 || dist.iter().any(|&p| p < 0.0) {
            return Err(Error::Data(format!(
                "{name} is not a probability vector (sums to {total})"
            )));
        }
    }
    Ok(kl_unchecked(target, predicted))
}

pub(crate) fn kl_unchecked(target: &[f64], predicted: &[f64]) -> f64 {
    target
        .iter()
        .zip(predicted)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t.ln() - p.max(LOG_CLAMP).ln()))
        .sum()
}

pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "distance between vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(squared_distance(x, y).sqrt())
}

pub(crate) fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Residual `MᵀM − I` of a square matrix.
fn gram_residual(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "orthogonality penalty needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    m.transpose().matmul(m)?.sub(&Matrix::identity(m.rows()))
}

/// Entrywise l1 norm of `MᵀM − I`.
pub fn orth_penalty(m: &Matrix) -> Result<f64> {
    Ok(gram_residual(m)?.l1_norm())
}

/// Subgradient of [`orth_penalty`] with `sign(0) = 0`.
///
/// With `S = sign(MᵀM − I)` (symmetric), the gradient is `M (S + Sᵀ) = 2 M S`.
pub fn orth_penalty_subgradient(m: &Matrix) -> Result<Matrix> {
    let signs = gram_residual(m)?.map(sign);
    Ok(m.matmul(&signs)?.scale(2.0))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Random orthogonal `d × d` matrix: Gram–Schmidt over the columns of a
/// Gaussian matrix, with one re-orthogonalization pass per column.
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> Matrix {
    assert!(d >= 1, "random_orthogonal needs d >= 1");
    loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut degenerate = false;
        for _ in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for _pass in 0..2 {
                for q in &cols {
                    let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= dot * qi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                degenerate = true;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
        if degenerate {
            continue;
        }
        let mut m = Matrix::zeros(d, d);
        for (c, col) in cols.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                m.set(r, c, v);
            }
        }
        return m;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest entry; ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn rotation(theta: f64) -> Matrix {
        Matrix::from_rows(&[[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-50.0, 0.0, 3.5, 700.0] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        // exp(ln k) = k, normalised by 1 + 2 + 3.
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_examples() {
        let q = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        // 0.5 ln(0.5 / 1e-12) + 0.5 ln(0.5 / 1)
        let want = 0.5 * (0.5f64 / 1e-12).ln() + 0.5 * 0.5f64.ln();
        let got = kl_divergence(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert!(got.is_finite());
        assert!((got - want).abs() < 1e-12);
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        let r = rotation(0.7);
        let (x, y) = ([1.0, 2.0], [-3.0, 0.5]);
        let d0 = euclidean_distance(&x, &y).unwrap();
        let d1 = euclidean_distance(&mat_vec(&r, &x).unwrap(), &mat_vec(&r, &y).unwrap()).unwrap();
        assert!((d0 - d1).abs() < 1e-12);
        assert!(matches!(
            euclidean_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn orth_penalty_examples() {
        assert_eq!(orth_penalty(&Matrix::identity(4)).unwrap(), 0.0);
        assert!(orth_penalty(&rotation(1.234)).unwrap() < 1e-12);
        // (2I)ᵀ(2I) − I = 3I, l1 norm 6.
        assert_eq!(orth_penalty(&Matrix::identity(2).scale(2.0)).unwrap(), 6.0);
        assert!(matches!(
            orth_penalty(&Matrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn orth_subgradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let m = Matrix::new(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
        let g = orth_penalty_subgradient(&m).unwrap();
        let h = 1e-6;
        for i in 0..9 {
            let mut plus = m.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = m.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (orth_penalty(&plus).unwrap() - orth_penalty(&minus).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.as_slice()[i]).abs() < 1e-6,
                "{i}: {fd} vs {}",
                g.as_slice()[i]
            );
        }
    }

    #[test]
    fn random_orthogonal_examples() {
        let mut rng = Rng::new(5);
        let one = random_orthogonal(1, &mut rng);
        assert_eq!(one.as_slice()[0].abs(), 1.0);
        for d in [2, 5, 32] {
            let m = random_orthogonal(d, &mut rng);
            assert!(orth_penalty(&m).unwrap() < 1e-9);
            let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let mx = mat_vec(&m, &x).unwrap();
            let n0 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1 = mx.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_and_argmin_prefer_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
    }

    fn random_matrix(rng: &mut Rng, n: usize) -> Matrix {
        Matrix::new(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn prob_vec(raw: &[f64]) -> Vec<f64> {
        softmax(raw).unwrap()
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (a, b, c) = (random_matrix(&mut rng, 8), random_matrix(&mut rng, 8), random_matrix(&mut rng, 8));
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            prop_assert!(left.sub(&right).unwrap().frobenius_norm() / scale < 1e-9);
        }

        #[test]
        fn softmax_is_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let (p, q) = (softmax(&xs).unwrap(), softmax(&shifted).unwrap());
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_is_nonnegative(
            raw in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
        ) {
            let t = prob_vec(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
            let p = prob_vec(&raw.iter().map(|r| r.1).collect::<Vec<_>>());
            let kl = kl_divergence(&t, &p).unwrap();
            prop_assert!(kl >= -1e-15);
            prop_assert!(kl_divergence(&t, &t).unwrap().abs() < 1e-15);
            if kl < 1e-14 {
                for (a, b) in t.iter().zip(&p) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn distance_triangle_inequality(seed in any::<u64>(), n in 1usize..10) {
            let mut rng = Rng::new(seed);
            let mut v = || (0..n).map(|_| rng.normal() * 10.0).collect::<Vec<_>>();
            let (x, y, z) = (v(), v(), v());
            let xy = euclidean_distance(&x, &y).unwrap();
            let yz = euclidean_distance(&y, &z).unwrap();
            let xz = euclidean_distance(&x, &z).unwrap();
            prop_assert!(xz <= xy + yz + 1e-9);
        }
    }
}

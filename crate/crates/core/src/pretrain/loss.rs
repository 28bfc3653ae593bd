//! Dot-product similarities and in-batch InfoNCE with a learnable
//! log-temperature.

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Scalar, Tape, Tensor, Var};

/// `S[i][j] = z[i] · v[j]`, no normalization.
pub fn similarity_matrix<T: Scalar>(z: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape().len() != 2 || z.shape() != v.shape() {
        return Err(Error::dim("similarity_matrix", z.shape(), v.shape()));
    }
    let (b, e) = (z.rows(), z.cols());
    let mut s = vec![T::zero(); b * b];
    crate::tensor::gemm(b, e, b, z.data(), false, v.data(), true, &mut s, false);
    Tensor::new([b, b], s)
}

/// Recorded version of [`similarity_matrix`].
pub fn similarity<T: Scalar>(tape: &Tape<'_, T>, z: Var, v: Var) -> Result<Var> {
    let (zs, vs) = (tape.shape(z), tape.shape(v));
    if zs.len() != 2 || zs != vs {
        return Err(Error::dim("similarity", &zs, &vs));
    }
    tape.matmul_t(z, false, v, true)
}

/// Row-softmax probabilities of `s / tau` and the mean negative log
/// likelihood of the diagonal.
fn softmax_nll<T: Scalar>(s: &[T], b: usize, tau: T) -> (Vec<T>, T) {
    let mut probs = vec![T::zero(); b * b];
    let mut loss = T::zero();
    for i in 0..b {
        let row = &s[i * b..(i + 1) * b];
        let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x / tau));
        let mut z = T::zero();
        for j in 0..b {
            let e = (row[j] / tau - m).exp();
            probs[i * b + j] = e;
            z += e;
        }
        probs[i * b..(i + 1) * b].iter_mut().for_each(|p| *p = *p / z);
        loss += z.ln() + m - row[i] / tau;
    }
    (probs, loss / T::of(b as f64))
}

/// InfoNCE of a square similarity matrix at temperature `tau`.
pub fn info_nce<T: Scalar>(s: &Tensor<T>, tau: T) -> Result<T> {
    let b = square(s.shape())?;
    if !(tau > T::zero()) {
        return Err(Error::Input(format!("temperature must be positive, got {}", tau.f64())));
    }
    Ok(softmax_nll(s.data(), b, tau).1)
}

fn square(shape: &[usize]) -> Result<usize> {
    match shape {
        [r, c] if r == c && *r > 0 => Ok(*r),
        _ => Err(Error::dim("info_nce", shape, &[0, 0])),
    }
}

struct InfoNceOp<T> {
    b: usize,
    tau: T,
    probs: Vec<T>,
}

impl<T: Scalar> BackwardOp<T> for InfoNceOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let b = self.b;
        let scale = grad[0] / T::of(b as f64);
        // d loss / d logits = (p - I) / B
        let mut dlogits = self.probs.clone();
        for i in 0..b {
            dlogits[i * b + i] -= T::one();
        }
        dlogits.iter_mut().for_each(|d| *d *= scale);
        let ds = needs[0].then(|| dlogits.iter().map(|&d| d / self.tau).collect());
        let dlt = needs[1].then(|| {
            let s = inputs[0].data();
            let acc = dlogits.iter().zip(s).fold(T::zero(), |a, (&d, &x)| a + d * x);
            vec![-acc / self.tau]
        });
        vec![ds, dlt]
    }
}

/// Recorded InfoNCE; `log_tau` is a one-element node with `tau = exp(log_tau)`.
pub fn info_nce_loss<T: Scalar>(tape: &Tape<'_, T>, s: Var, log_tau: Var) -> Result<Var> {
    let b = square(&tape.shape(s))?;
    let lt = tape.value(log_tau).data().to_vec();
    if lt.len() != 1 {
        return Err(Error::dim("info_nce log_tau", &[lt.len()], &[1]));
    }
    let tau = lt[0].exp();
    let (probs, loss) = softmax_nll(tape.value(s).data(), b, tau);
    Ok(tape.custom(&[s, log_tau], Tensor::scalar(loss), Box::new(InfoNceOp { b, tau, probs })))
}

/// Fraction of rows whose diagonal entry strictly exceeds every other entry.
pub fn row_max_alignment<T: Scalar>(s: &Tensor<T>) -> Result<f64> {
    let b = square(s.shape())?;
    let hits = (0..b)
        .filter(|&i| {
            let row = s.row(i);
            (0..b).all(|j| j == i || row[i] > row[j])
        })
        .count();
    Ok(hits as f64 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_inputs, DEFAULT_STEP};
    use crate::tensor::rng::Rng;

    fn loop_similarity(z: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
        let b = z.rows();
        let mut s = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                s[i * b + j] = z.row(i).iter().zip(v.row(j)).map(|(a, c)| a * c).sum();
            }
        }
        s
    }

    fn loop_info_nce(s: &[f64], b: usize, tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            let denom: f64 = (0..b).map(|j| (s[i * b + j] / tau).exp()).sum();
            total -= ((s[i * b + i] / tau).exp() / denom).ln();
        }
        total / b as f64
    }

    #[test]
    fn similarity_matches_double_loop() {
        let mut rng = Rng::new(3, "sim");
        for b in [1, 2, 7] {
            let z = rng.normal_tensor::<f64>(&[b, 5], 1.0);
            let v = rng.normal_tensor::<f64>(&[b, 5], 1.0);
            let s = similarity_matrix(&z, &v).unwrap();
            for (a, c) in s.data().iter().zip(loop_similarity(&z, &v)) {
                assert!((a - c).abs() <= 1e-6);
            }
        }
        let eye = Tensor::<f64>::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(similarity_matrix(&eye, &eye).unwrap(), eye);
        let z = Tensor::<f64>::zeros([2, 3]);
        assert!(matches!(similarity_matrix(&z, &Tensor::zeros([3, 3])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn closed_forms() {
        let s = Tensor::from_f64([2, 2], &[1., 0., 0., 1.]).unwrap();
        let l = info_nce(&s, 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
        assert_eq!(info_nce(&Tensor::from_f64([1, 1], &[4.2]).unwrap(), 0.3).unwrap(), 0.0);
        let eye = Tensor::<f64>::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert!(info_nce(&eye, 0.05).unwrap() < 1e-3);
        assert!(info_nce(&s, 0.0).is_err());
    }

    #[test]
    fn matches_naive_and_is_row_shift_invariant() {
        let mut rng = Rng::new(4, "nce");
        for b in [2, 5, 9] {
            let s = rng.normal_tensor::<f64>(&[b, b], 3.0);
            let tau = rng.uniform(0.05, 2.0);
            let l = info_nce(&s, tau).unwrap();
            assert!((l - loop_info_nce(s.data(), b, tau)).abs() < 1e-9);
            assert!(l >= 0.0);
            let mut shifted = s.clone();
            let row = rng.below(b);
            shifted.data_mut()[row * b..(row + 1) * b].iter_mut().for_each(|x| *x += 1e3);
            assert!((info_nce(&shifted, tau).unwrap() - l).abs() < 1e-9);
            let mut up = s.clone();
            up.data_mut()[row * b + row] += 0.5;
            assert!(info_nce(&up, tau).unwrap() < l);
        }
    }

    #[test]
    fn recorded_loss_gradients() {
        let mut rng = Rng::new(6, "nce-grad");
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let b = 2 + trial % 5;
            let s = rng.normal_tensor::<f64>(&[b, b], 2.0);
            let lt = Tensor::scalar(rng.uniform(-1.5, 0.5));
            let rep = check_inputs(&[s, lt], DEFAULT_STEP, |tape, v| info_nce_loss(tape, v[0], v[1])).unwrap();
            worst = worst.max(rep.max_rel);
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn alignment_counts_strict_row_maxima() {
        let s = Tensor::<f64>::from_f64([3, 3], &[2., 1., 0., 3., 1., 0., 0., 0., 0.]).unwrap();
        assert!((row_max_alignment(&s).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }
}

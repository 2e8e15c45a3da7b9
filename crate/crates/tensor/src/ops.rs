//! Stateless numeric kernels shared by the tape and by callers that only
//! need a forward value.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::ensure_finite;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(TensorError::Contract("softmax of an empty vector".into()));
    }
    ensure_finite(x, "softmax")?;
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Layer normalization of a single vector: `gain ⊙ (x − μ)/√(σ² + eps) + bias`.
pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(TensorError::Shape {
            op: "layer_norm",
            detail: format!("x {} gain {} bias {}", x.len(), gain.len(), bias.len()),
        });
    }
    if eps <= T::zero() {
        return Err(TensorError::Contract("layer_norm eps must be positive".into()));
    }
    ensure_finite(x, "layer_norm")?;
    let (xhat, _) = normalize(x, eps);
    Ok(xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&h, (&g, &b))| h * g + b)
        .collect())
}

/// Returns the standardized vector and `1/√(σ² + eps)`.
pub(crate) fn normalize<T: Real>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    (x.iter().map(|&v| (v - mean) * rstd).collect(), rstd)
}

/// Halves a sequence by taking the elementwise max of consecutive pairs.
/// An odd trailing element is dropped.
pub fn seq_max_pool<T: Real>(seq: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    if seq.len() < 2 {
        return Err(TensorError::PoolingUnderflow { len: seq.len() });
    }
    let width = seq[0].len();
    if seq.iter().any(|r| r.len() != width) {
        return Err(TensorError::Shape {
            op: "seq_max_pool",
            detail: "ragged sequence".into(),
        });
    }
    Ok(seq
        .chunks_exact(2)
        .map(|pair| {
            pair[0]
                .iter()
                .zip(&pair[1])
                .map(|(&a, &b)| if b > a { b } else { a })
                .collect()
        })
        .collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_log_ratio() {
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan_and_empty() {
        assert_eq!(
            softmax(&[f32::NAN, 1.0]),
            Err(TensorError::NumericInput { op: "softmax" })
        );
        assert!(softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let p = softmax(&[1000.0f32, 999.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let y = layer_norm(&[4.0f64; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_points() {
        let y = layer_norm(&[1.0f64, 3.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_bad_eps_and_shapes() {
        assert!(layer_norm(&[1.0f32, 2.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
        assert!(layer_norm(&[1.0f32, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn pool_pairwise_max() {
        let out = seq_max_pool(&[vec![1.0f32, 4.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(out, vec![vec![3.0, 4.0]]);
    }

    #[test]
    fn pool_hand_example() {
        let x = vec![
            vec![-1.0f32, -1.0],
            vec![-2.0, -2.0],
            vec![0.0, 0.0],
            vec![5.0, 5.0],
        ];
        assert_eq!(
            seq_max_pool(&x).unwrap(),
            vec![vec![-1.0, -1.0], vec![5.0, 5.0]]
        );
    }

    #[test]
    fn pool_odd_length_drops_tail() {
        let x: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32]).collect();
        let out = seq_max_pool(&x).unwrap();
        assert_eq!(out, vec![vec![1.0], vec![3.0]]);
    }

    #[test]
    fn pool_underflow() {
        assert_eq!(
            seq_max_pool(&[vec![1.0f32]]),
            Err(TensorError::PoolingUnderflow { len: 1 })
        );
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

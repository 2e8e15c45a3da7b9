use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Bias-corrected Adam.
///
/// Parameters whose gradient is `None` (not reached by the loss) are left
/// untouched, moments included.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T, params: &[Tensor<T>]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    detail: format!("parameter {i} changed size"),
                });
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::Shape {
                        op: "adam_step",
                        detail: format!("grad {:?} vs param {:?}", g.shape(), p.shape()),
                    });
                }
                g.ensure_finite("adam_step")?;
            }
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(lr: f64) -> (AdamState<f64>, Vec<Tensor<f64>>) {
        let params = vec![Tensor::scalar(1.0)];
        (AdamState::new(lr, 0.9, 0.999, 1e-8, &params), params)
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut adam, mut params) = scalar_state(1e-3);
        for _ in 0..5 {
            adam.step(&mut params, &[Some(Tensor::scalar(0.0))]).unwrap();
        }
        assert_eq!(params[0].data(), &[1.0]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 8e-5;
        for g in [-3.0, 0.2, 42.0] {
            let (mut adam, mut params) = scalar_state(lr);
            adam.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
            let delta = params[0].data()[0] - 1.0;
            assert!(delta.signum() == -g.signum());
            assert!(delta.abs() <= lr && delta.abs() >= lr * (1.0 - 1e-3));
        }
    }

    #[test]
    fn two_identical_steps_follow_recursion() {
        let g = 0.5;
        let (mut adam, mut params) = scalar_state(1e-2);
        for _ in 0..2 {
            adam.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
        }
        // m1 = 0.1 g, m2 = 0.09 g + 0.1 g; v likewise with 0.001 / 0.999.
        let m2 = 0.9 * 0.1 * g + 0.1 * g;
        let v2 = 0.999 * 0.001 * g * g + 0.001 * g * g;
        assert_eq!(adam.step_count(), 2);
        assert!((adam.first_moment(0)[0] - m2).abs() < 1e-15);
        assert!((adam.second_moment(0)[0] - v2).abs() < 1e-15);
        // bias-corrected moments equal g and g² exactly for a constant gradient
        assert!((m2 / (1.0 - 0.81) - g).abs() < 1e-12);
        assert!((v2 / (1.0 - 0.999f64.powi(2)) - g * g).abs() < 1e-12);
        assert!((params[0].data()[0] - (1.0 - 2.0 * 1e-2 * g / (g + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_skips_parameter_and_moments() {
        let params0 = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut params = params0.clone();
        let mut adam = AdamState::new(0.1, 0.9, 0.999, 1e-8, &params);
        adam.step(&mut params, &[Some(Tensor::scalar(1.0)), None]).unwrap();
        assert_eq!(params[1], params0[1]);
        assert_eq!(adam.first_moment(1), &[0.0]);
        assert_ne!(params[0], params0[0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut adam, mut params) = scalar_state(1e-3);
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert!(adam.step(&mut params, &[Some(g)]).is_err());
        assert!(adam.step(&mut params, &[]).is_err());
    }
}

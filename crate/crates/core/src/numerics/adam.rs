use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moment estimates for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, with the usual defaults
    /// (0.9, 0.999, 1e-8).
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            second: zeros.clone(),
            first: zeros,
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    kind: "adam",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                w[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = single(0.3);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[Tensor::scalar(0.0)], 1e-3).unwrap();
        assert_eq!(p.by_name("w").unwrap().data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[Tensor::scalar(0.5)], 1e-3).unwrap();
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε).
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.by_name("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((p.by_name("w").unwrap().data()[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn step_counter_increments() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[Tensor::scalar(0.1)], 1e-3).unwrap();
        s.step(&mut p, &[Tensor::scalar(0.1)], 1e-3).unwrap();
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let err = s.step(&mut p, &[Tensor::scalar(f64::NAN)], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.step_count, 0);
        assert_eq!(p.by_name("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::row(&[3.0, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].squared_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}

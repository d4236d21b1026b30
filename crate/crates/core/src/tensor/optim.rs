use super::{ParamStore, Scalar, TensorError};

pub trait Optimizer<T: Scalar> {
    /// Updates every trainable parameter from its accumulated gradient.
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), TensorError>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn check_finite<T: Scalar>(store: &ParamStore<T>) -> Result<(), TensorError> {
    for p in store.iter().filter(|p| p.trainable) {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        check_finite(store)?;
        let lr = T::from_f64c(self.lr);
        for p in store.iter_mut().filter(|p| p.trainable) {
            for (w, &g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                *w = *w - lr * g;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with per-parameter moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: std::collections::HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Default::default() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Drops moment state, e.g. after re-initialising a head.
    pub fn reset(&mut self) {
        self.t = 0;
        self.moments.clear();
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl<T: Scalar> Optimizer<T> for Adam {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        check_finite(store)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in store.iter_mut().filter(|p| p.trainable) {
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; p.grad.len()], vec![0.0; p.grad.len()]));
            if m.len() != p.grad.len() {
                *m = vec![0.0; p.grad.len()];
                *v = vec![0.0; p.grad.len()];
            }
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[i].to_f64().unwrap();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let upd = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *w = *w - T::from_f64c(upd);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn sgd_skips_frozen() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::full(&[2], 1.0));
        let b = s.insert("b", Tensor::full(&[2], 1.0));
        s.set_trainable("b", false);
        s.get_mut(a).grad = vec![1.0, 2.0];
        s.get_mut(b).grad = vec![1.0, 2.0];
        Sgd { lr: 0.5 }.step(&mut s).unwrap();
        assert_eq!(s.get(a).value.data(), &[0.5, 0.0]);
        assert_eq!(s.get(b).value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::full(&[2], 0.0));
        s.get_mut(a).grad = vec![3.0, -0.01];
        let mut opt = Adam::new(0.1);
        opt.step(&mut s).unwrap();
        let v = s.get(a).value.data();
        assert!((v[0] + 0.1).abs() < 1e-6 && (v[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn nan_gradient_is_reported() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("w", Tensor::full(&[1], 0.0));
        s.get_mut(a).grad = vec![f32::NAN];
        let err = Adam::default().step(&mut s).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient(n) if n == "w"));
    }
}

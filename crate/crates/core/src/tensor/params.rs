use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

/// Named trainable tensors. Names are dotted paths (`encoder.0.conv1.w`),
/// so groups can be frozen by prefix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    /// Adds or replaces `name`.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let grad = vec![T::zero(); value.numel()];
        if let Some(&i) = self.index.get(name) {
            self.params[i].value = value;
            self.params[i].grad = grad;
            return ParamId(i);
        }
        self.params.push(Param { name: name.to_string(), value, grad, trainable: true });
        self.index.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialised weight with `fan_in` inputs per output.
    pub fn insert_he<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64c(normal.sample(rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("length matches"))
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Copies of all values under `prefix`, for freeze checks and snapshots.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Vec<T>)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.data().to_vec()))
            .collect()
    }

    /// Largest absolute gradient under `prefix`.
    pub fn grad_max_abs(&self, prefix: &str) -> T {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.iter())
            .fold(T::zero(), |m, g| m.max(g.abs()))
    }

    /// Euclidean norm of all gradients under `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.iter())
            .map(|g| g.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values of every parameter present in `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), TensorError> {
        for p in &other.params {
            let id = self.id(&p.name)?;
            let mine = &mut self.params[id.0];
            if mine.value.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{}: shape {:?} does not match {:?}",
                    p.name,
                    p.value.shape(),
                    mine.value.shape()
                )));
            }
            mine.value = p.value.clone();
        }
        Ok(())
    }
}

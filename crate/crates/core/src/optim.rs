//! Named parameters and the Adam optimizer.

use indexmap::IndexMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named leaf tensor. Only trainable parameters take part in the tape.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: String,
    tensor: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, data: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            tensor: Tensor::leaf(data, shape, trainable)?,
            trainable,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    fn replace_data(&mut self, data: Vec<f64>) {
        self.tensor = Tensor::leaf(data, self.tensor.shape(), self.trainable).expect("same shape");
    }
}

/// Ordered registry of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: IndexMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<()> {
        if self.params.contains_key(param.id()) {
            return Err(Error::Contract(format!("duplicate parameter id `{}`", param.id())));
        }
        self.params.insert(param.id.clone(), param);
        Ok(())
    }

    pub fn add(&mut self, id: impl Into<String>, data: Vec<f64>, shape: &[usize], trainable: bool) -> Result<()> {
        self.insert(Parameter::new(id, data, shape, trainable)?)
    }

    pub fn get(&self, id: &str) -> Result<&Parameter> {
        self.params
            .get(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{id}`")))
    }

    /// The parameter's current leaf tensor.
    pub fn tensor(&self, id: &str) -> Result<&Tensor> {
        self.get(id).map(Parameter::tensor)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn remove(&mut self, id: &str) -> Option<Parameter> {
        self.params.shift_remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, id: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(id)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{id}`")))?;
        if p.trainable != trainable {
            p.trainable = trainable;
            let data = p.tensor.data().to_vec();
            p.replace_data(data);
        }
        Ok(())
    }

    /// Set the trainable flag of every parameter whose id starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        let ids: Vec<String> = self.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        for id in ids {
            self.set_trainable(&id, trainable).expect("id taken from the set");
        }
    }

    /// Copy of the parameters under `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Add every parameter of `other`; ids must not collide.
    pub fn merge(&mut self, other: ParameterSet) -> Result<()> {
        for p in other.params.into_values() {
            self.insert(p)?;
        }
        Ok(())
    }

    /// Total scalar count, optionally restricted to trainable parameters.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.data().len())
            .sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|p| p.id.starts_with(prefix))
            .map(|p| p.data().len())
            .sum()
    }

    /// Bitwise equality of ids, shapes and values (trainable flags ignored).
    pub fn bit_equal(&self, other: &ParameterSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|(a, b)| {
                a.id == b.id
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn zero_grad(&self) {
        self.iter().for_each(|p| p.tensor.zero_grad());
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// First and second moment of a parameter, once it has been stepped.
    pub fn moments(&self, id: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every trainable parameter in `params`; frozen parameters
    /// are untouched. Gradients are consumed: updated parameters carry none.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if p.tensor.grad().is_none() {
                return Err(Error::Contract(format!("trainable parameter `{}` has no gradient", p.id)));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.params.values_mut().filter(|p| p.trainable) {
            let grad = p.tensor.grad().expect("checked above");
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(p.id.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = p.tensor.data().to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.replace_data(data);
        }
        Ok(())
    }
}

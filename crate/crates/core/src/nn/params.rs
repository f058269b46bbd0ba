use std::collections::BTreeMap;

use rand::Rng;

use super::{NdArray, RngState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    by_name: BTreeMap<String, ParamId>,
    values: Vec<NdArray>,
    grads: Vec<NdArray>,
    first_moment: Vec<NdArray>,
    second_moment: Vec<NdArray>,
    step: u64,
    has_grads: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: NdArray) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        let zeros = NdArray::zeros(value.shape());
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        self.grads.push(zeros.clone());
        self.first_moment.push(zeros.clone());
        self.second_moment.push(zeros);
        self.values.push(value);
        Ok(id)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngState,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, NdArray::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, NdArray::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &NdArray {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(NdArray::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Parameter ids in name order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_name.values().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> + '_ {
        self.by_name
            .iter()
            .map(|(n, id)| (n.as_str(), &self.values[id.0]))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(NdArray::all_finite)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &NdArray) {
        self.grads[id.0].add_assign(g);
        self.has_grads = true;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self.has_grads = false;
    }

    /// Clears moments and the step counter; values are kept.
    pub fn reset_optimizer(&mut self) {
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        self.step = 0;
        self.zero_grads();
    }

    /// One bias-corrected Adam update; clears the gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.has_grads {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = self.grads[i].data();
            let m = self.first_moment[i].data_mut();
            for (mv, gv) in m.iter_mut().zip(g) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            }
            let v = self.second_moment[i].data_mut();
            for (vv, gv) in v.iter_mut().zip(g) {
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            }
            let m = self.first_moment[i].data();
            let v = self.second_moment[i].data();
            let w = self.values[i].data_mut();
            for ((wv, mv), vv) in w.iter_mut().zip(m).zip(v) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *wv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::shape(
                    "load_values_from",
                    format!("`{name}`: {:?} vs {:?}", self.values[id.0].shape(), value.shape()),
                ));
            }
            self.values[id.0] = value.clone();
        }
        if other.len() != self.len() {
            return Err(Error::Invalid(format!(
                "parameter count {} vs {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

//! Named parameters, seeded initialization and the AdamW optimizer.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(1/fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Declares one parameter of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    value: Array,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters with AdamW moment accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Parameters bound to a tape, looked up by name during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Merges another binding (e.g. frozen weights next to trainable ones).
    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    /// Creates every parameter in `specs` order from one seeded stream.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            store.insert(&spec.name, Array::new(spec.shape.clone(), data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(TensorError::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.slots.get(name).map(|s| &s.value)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(TensorError::GradientShape {
                name: name.to_string(),
                expected: slot.value.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.slots.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if m.len() != slot.value.len() || v.len() != slot.value.len() {
            return Err(TensorError::Checkpoint(format!("moment length mismatch for `{name}`")));
        }
        slot.m = m;
        slot.v = v;
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Checks that this store holds exactly the parameters in `specs`.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.slots.len() {
            return Err(TensorError::Checkpoint(format!(
                "architecture expects {} parameters, store has {}",
                specs.len(),
                self.slots.len()
            )));
        }
        for spec in specs {
            let value = self
                .get(&spec.name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter `{}`", spec.name)))?;
            if value.shape() != spec.shape.as_slice() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, architecture expects {:?}",
                    spec.name,
                    value.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Binds every parameter to `tape`: as differentiable parameters when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .slots
            .iter()
            .map(|(name, slot)| {
                let var = if trainable {
                    tape.param(name, &slot.value)
                } else {
                    tape.constant(slot.value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// One AdamW update. Every parameter must have a gradient of matching shape.
    pub fn adamw_step(&mut self, grads: &BTreeMap<String, Array>, opt: &AdamW) -> Result<()> {
        for name in grads.keys() {
            if !self.slots.contains_key(name) {
                return Err(TensorError::UnknownParameter(name.clone()));
            }
        }
        for (name, slot) in &self.slots {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            if g.shape() != slot.value.shape() {
                return Err(TensorError::GradientShape {
                    name: name.clone(),
                    expected: slot.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            let g = grads[name].data();
            let decay = 1.0 - opt.lr * opt.weight_decay;
            let Slot { value, m, v } = slot;
            for (((p, m), v), &g) in value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
        Ok(())
    }
}

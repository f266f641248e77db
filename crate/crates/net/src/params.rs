//! Named trainable parameters with order-independent seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `±bound`.
    Uniform(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// All trainable tensors of a model, keyed by dotted path.
///
/// Each parameter draws from its own generator seeded by `(seed, name)`, so
/// adding a layer never perturbs the initial values of the others.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    detached: bool,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            detached: false,
            seed,
            dtype,
            device,
        }
    }

    /// The same parameters handed out without gradient tracking. Storage is
    /// shared, so later assignments are visible, but graphs built from the
    /// view keep no intermediates alive.
    pub fn detached_view(&self) -> Self {
        Self {
            vars: self.vars.clone(),
            detached: true,
            seed: self.seed,
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }

    fn hand_out(&self, v: &Var) -> Tensor {
        if self.detached {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (or returns the existing) parameter `name`.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(NetError::Shape(format!("parameter {name}: {:?} vs {:?}", v.dims(), shape)));
            }
            return Ok(self.hand_out(v));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::FanIn(f) => {
                let b = 1.0 / (f.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = self.hand_out(&v);
        self.vars.insert(name.to_string(), v);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; layers holding it see the new value.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| NetError::Checkpoint(format!("unknown parameter {name}")))?;
        if v.dims() != value.dims() {
            return Err(NetError::Shape(format!("parameter {name}: {:?} vs {:?}", v.dims(), value.dims())));
        }
        v.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }
}

/// Names used to key parameters: `Path::root().push("enc").push("conv")`.
#[derive(Debug, Clone, Default)]
pub struct Path(String);

impl Path {
    pub fn root() -> Self {
        Self(String::new())
    }

    pub fn push(&self, part: impl std::fmt::Display) -> Self {
        if self.0.is_empty() {
            Self(part.to_string())
        } else {
            Self(format!("{}.{part}", self.0))
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        self.push(leaf).0
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

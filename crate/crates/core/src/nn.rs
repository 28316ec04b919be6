//! Parameters, initializers and the convolution layer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors keyed by module path (e.g. `decoder.fuse.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.shape().numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (name, value) in other.names.iter().zip(&other.values) {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {}, checkpoint has {}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    /// FNV-1a over names and the raw bits of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            n.bytes().for_each(&mut eat);
            for x in v.data() {
                x.to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform He initialization for ReLU stacks.
    HeUniform,
    /// Uniform Xavier/Glorot initialization.
    XavierUniform,
    Zeros,
}

/// Creates parameters under a dotted module path.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    init: Init,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, init: Init) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
            init,
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            init: self.init,
        }
    }

    fn path(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        geo: ConvGeometry,
        bias: bool,
    ) -> Result<Conv2d> {
        let init = self.init;
        self.conv_with(name, c_in, c_out, geo, bias, init)
    }

    pub fn conv_with(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        geo: ConvGeometry,
        bias: bool,
        init: Init,
    ) -> Result<Conv2d> {
        let k = geo.kernel;
        let fan_in = (c_in * k * k) as f64;
        let fan_out = (c_out * k * k) as f64;
        let bound = match init {
            Init::HeUniform => (6.0 / fan_in).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out)).sqrt(),
            Init::Zeros => 0.0,
        };
        let shape = Shape::new(c_out, c_in, k, k);
        let data = (0..shape.numel())
            .map(|_| {
                if bound > 0.0 {
                    self.rng.gen_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        let sub = self.sub(name);
        let weight = sub
            .store
            .insert(sub.path("weight"), Tensor::from_vec(shape, data)?)?;
        let bias = if bias {
            let b = Tensor::zeros(Shape::new(c_out, 1, 1, 1));
            Some(sub.store.insert(sub.path("bias"), b)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            geo,
            c_in,
            c_out,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.geo)
    }

    /// Convolution followed by ReLU.
    pub fn forward_relu(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = self.forward(tape, x)?;
        Ok(tape.relu(y))
    }
}

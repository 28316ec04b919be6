//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Tape`] records every operation of one forward pass. Losses live outside
//! the tape: they hand back gradients with respect to network outputs, which
//! are fed to [`Tape::backward`] as seeds.

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Expand(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Resize(Var),
    AvgPool(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        Ok(self.push(out, Op::Conv { x, w, b, geo }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn expand_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let out = self.value(x).expand_channels(c)?;
        Ok(self.push(out, Op::Expand(x)))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, count)?;
        Ok(self.push(out, Op::Narrow { x, start }))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let out = self.value(x).resize_bilinear(h, w);
        self.push(out, Op::Resize(x))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 1 {
            return Ok(x);
        }
        let out = self.value(x).avg_pool(k)?;
        Ok(self.push(out, Op::AvgPool(x, k)))
    }

    /// Back-propagates the seed gradients through the whole tape.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            contract!(
                g.shape() == self.value(v).shape(),
                "seed gradient {} does not match value {}",
                g.shape(),
                self.value(v).shape()
            );
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geo } => {
                    let cg = tensor::conv2d_backward(self.value(*x), self.value(*w), &g, *geo)?;
                    accumulate(&mut grads[x.0], cg.input);
                    accumulate(&mut grads[w.0], cg.weight);
                    if let Some(b) = b {
                        let bias = cg.bias.reshape(self.value(*b).shape())?;
                        accumulate(&mut grads[b.0], bias);
                    }
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads[x.0], d);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                    accumulate(&mut grads[x.0], d);
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    accumulate(&mut grads[x.0], g.map(|v| v * s));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |g, v| g * v)?;
                    let db = g.zip_map(self.value(*a), |g, v| g * v)?;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Concat(parts) => {
                    let counts: Vec<usize> =
                        parts.iter().map(|p| self.value(*p).shape().c).collect();
                    for (p, d) in parts.iter().zip(g.split_channels(&counts)) {
                        accumulate(&mut grads[p.0], d);
                    }
                }
                Op::Expand(x) => accumulate(&mut grads[x.0], g.sum_channels()),
                Op::Narrow { x, start } => {
                    let total = self.value(*x).shape().c;
                    accumulate(&mut grads[x.0], g.widen_channels(total, *start));
                }
                Op::Resize(x) => {
                    let s = self.value(*x).shape();
                    accumulate(&mut grads[x.0], g.resize_bilinear_adjoint(s.h, s.w));
                }
                Op::AvgPool(x, k) => accumulate(&mut grads[x.0], g.avg_pool_adjoint(*k)),
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// Parameter gradients indexed by [`ParamId`]; parameters that did not
    /// take part in the forward pass get `None`.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for &(id, v) in &self.params {
            out[id.index()] = self.nodes[v.0].clone();
        }
        out
    }
}

use std::collections::{BTreeMap, HashMap};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Extension point for operations whose adjoint is easier to write by hand
/// than to compose from primitives.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Adjoints for each input given the output adjoint `grad`. Entries for
    /// inputs with `needs[i] == false` may be `None`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Exp,
    Ln,
    Sqrt,
    Gelu,
    Scale(f64),
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Var, Unary),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
    pub param: Option<String>,
}

/// Per-parameter adjoints produced by a backward sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    inner: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.inner.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.inner.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn add(&mut self, name: &str, g: &[f64]) {
        match self.inner.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.inner.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (k, v) in other.iter() {
            self.add(k, v);
        }
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds the store entry `name` as a leaf. Repeated requests for the same
    /// name on one tape return the same handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.set_requires_grad(false);
        let v = self.push(value, Op::Leaf, needs);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar read of a single-element value.
    pub fn item(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "item() on non-scalar of shape {:?}", t.shape());
        t.data()[0]
    }

    /// Backpropagates from scalar `loss` and accumulates adjoints into the
    /// trainable entries of `store`. Frozen entries are never touched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads)
    }

    /// Adjoints of scalar `loss` with respect to every trainable parameter
    /// leaf reachable from it.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.gradients_seeded(loss, vec![1.0])
    }

    /// Vector-Jacobian product: adjoints given an explicit output adjoint.
    pub fn gradients_seeded(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::dim("backward seed", self.shape(out), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result = Gradients::default();
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(name) = &node.param {
                result.add(name, &g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(result)
    }

    pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }
}

//! Parameters, convolution layers and the execution backends that network
//! code runs on.
//!
//! Network structure is written once against [`Backend`]. [`Recorder`]
//! records onto a [`Graph`] for training; [`Eager`] evaluates directly and
//! drops intermediates as soon as they go out of scope.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(),
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the gradients of parameter leaves recorded in `graph`.
    pub fn accumulate_from(&mut self, graph: &Graph<T>) {
        for (tag, grad) in graph.tagged_grads() {
            if let Some(g) = grad {
                self.params[tag].tensor.accumulate_grad(g);
            }
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
}

/// A convolution and the parameter slots holding its weight and bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub kind: ConvKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    /// Allocates a layer with Kaiming-uniform fan-in weights (negative
    /// slope `sqrt(5)`, i.e. bound `1/sqrt(fan_in)`) and zero bias.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let wshape = match kind {
            ConvKind::Standard => Shape::new(c_out, c_in, kernel, kernel),
            ConvKind::Depthwise => {
                if c_in != c_out {
                    return Err(Error::config(format!("{name}: depthwise layer needs c_in == c_out")));
                }
                Shape::new(c_out, 1, kernel, kernel)
            }
        };
        let fan_in = (wshape.c * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Tensor::from_fn(wshape, |_, _, _, _| T::from_f64_lossy(rng.random_range(-bound..bound)));
        let weight = store.add(format!("{name}.weight"), weight)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(c_out, 1, 1, 1)))?;
        Ok(ConvLayer {
            name: name.to_string(),
            kind,
            c_in,
            c_out,
            kernel,
            weight,
            bias,
        })
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
}

/// Execution target for network code.
pub trait Backend<T: Element> {
    type Value: Clone;

    fn conv(&mut self, x: &Self::Value, layer: &ConvLayer) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn add_scaled(&mut self, a: &Self::Value, b: &Self::Value, alpha: f64) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[Self::Value]) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value>;
    fn channel_shift(&mut self, x: &Self::Value, shift: &[f64]) -> Result<Self::Value>;
}

fn check_output<T: Element>(t: &Tensor<T>, layer: &ConvLayer) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite output in layer {}", layer.name)))
    }
}

fn to_elems<T: Element>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

/// Records network evaluation onto a graph.
pub struct Recorder<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    params: &'a ParamStore<T>,
    leaves: HashMap<ParamId, Var>,
    trainable: bool,
}

impl<'a, T: Element> Recorder<'a, T> {
    /// With `trainable` set, parameter leaves require gradients.
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>, trainable: bool) -> Self {
        Recorder {
            graph,
            params,
            leaves: HashMap::new(),
            trainable,
        }
    }

    /// Leaf holding parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let mut t = self.params.get(id).tensor.clone();
        t.clear_grad();
        t.set_requires_grad(self.trainable);
        let v = self.graph.tagged_leaf(t, id.0);
        self.leaves.insert(id, v);
        v
    }
}

impl<T: Element> Backend<T> for Recorder<'_, T> {
    type Value = Var;

    fn conv(&mut self, x: &Var, layer: &ConvLayer) -> Result<Var> {
        let w = self.param(layer.weight);
        let b = self.param(layer.bias);
        let out = match layer.kind {
            ConvKind::Standard => self.graph.conv2d(*x, w, b, 1, layer.pad()),
            ConvKind::Depthwise => self.graph.depthwise_conv2d(*x, w, b),
        }
        .map_err(|e| annotate(e, layer))?;
        check_output(self.graph.value(out), layer)?;
        Ok(out)
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.graph.relu(*x)
    }

    fn add_scaled(&mut self, a: &Var, b: &Var, alpha: f64) -> Result<Var> {
        self.graph.add_scaled(*a, *b, T::from_f64_lossy(alpha))
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.graph.concat_channels(xs)
    }

    fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        self.graph.pixel_shuffle(*x, r)
    }

    fn channel_shift(&mut self, x: &Var, shift: &[f64]) -> Result<Var> {
        self.graph.channel_shift(*x, &to_elems::<T>(shift))
    }
}

fn annotate(e: Error, layer: &ConvLayer) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", layer.name)),
        Error::Numeric(m) => Error::Numeric(format!("{}: {m}", layer.name)),
        other => other,
    }
}

/// Direct evaluation without gradient bookkeeping.
pub struct Eager<'a, T: Element> {
    params: &'a ParamStore<T>,
}

impl<'a, T: Element> Eager<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Eager { params }
    }
}

impl<T: Element> Backend<T> for Eager<'_, T> {
    type Value = Rc<Tensor<T>>;

    fn conv(&mut self, x: &Self::Value, layer: &ConvLayer) -> Result<Self::Value> {
        let w = &self.params.get(layer.weight).tensor;
        let b = &self.params.get(layer.bias).tensor;
        let out = match layer.kind {
            ConvKind::Standard => ops::conv2d(x, w, b, 1, layer.pad()),
            ConvKind::Depthwise => ops::depthwise_conv2d(x, w, b),
        }
        .map_err(|e| annotate(e, layer))?;
        check_output(&out, layer)?;
        Ok(Rc::new(out))
    }

    fn relu(&mut self, x: &Self::Value) -> Self::Value {
        Rc::new(ops::relu(x))
    }

    fn add_scaled(&mut self, a: &Self::Value, b: &Self::Value, alpha: f64) -> Result<Self::Value> {
        Ok(Rc::new(ops::add_scaled(a, b, T::from_f64_lossy(alpha))?))
    }

    fn concat(&mut self, xs: &[Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|t| t.as_ref()).collect();
        Ok(Rc::new(ops::concat_channels(&refs)?))
    }

    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value> {
        Ok(Rc::new(ops::pixel_shuffle(x, r)?))
    }

    fn channel_shift(&mut self, x: &Self::Value, shift: &[f64]) -> Result<Self::Value> {
        Ok(Rc::new(ops::channel_shift(x, &to_elems::<T>(shift))?))
    }
}

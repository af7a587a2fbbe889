//! Named parameter storage and the small building blocks (dense layers,
//! perceptrons) shared by every differentiable module.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Internal(format!("missing parameter {name}"))),
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in &mut self.entries {
            if n.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

/// Binds a [`ParamStore`] into one graph, creating leaves on first use.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Binds already-created graph nodes, one per stored tensor in store
    /// order. Lets a caller own the leaves (finite-difference checks do).
    pub fn with_vars(store: &'a ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::contract(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Binder {
            store,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.store.tensor_at(i).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Gradients aligned with the store; unused parameters get zeros.
    pub fn gradients(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| g.grad(v).map(|s| s.to_vec()))
                    .unwrap_or_else(|| vec![0.0; self.store.tensor_at(i).numel()])
            })
            .collect()
    }
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if bound > 0.0 {
        let u = Uniform::new_inclusive(-bound, bound);
        t.data_mut().iter_mut().for_each(|x| *x = u.sample(rng));
    }
    t
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let n = Normal::new(0.0, std).expect("finite std");
    t.data_mut().iter_mut().for_each(|x| *x = n.sample(rng));
    t
}

/// Dense perceptron `widths[0] → … → widths[last]` with SiLU between
/// layers. Weights are stored input-major (`in × out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
    /// apply SiLU after the last layer as well
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: &[usize], activate_last: bool) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            prefix: prefix.into(),
            widths: widths.to_vec(),
            activate_last,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (l, pair) in self.widths.windows(2).enumerate() {
            let bound = (6.0 / pair[0] as f64).sqrt();
            store.insert(self.weight_name(l), uniform_tensor(rng, &[pair[0], pair[1]], bound))?;
            store.insert(self.bias_name(l), Tensor::zeros(&[pair[1]]))?;
        }
        Ok(())
    }

    /// Applies the perceptron row-wise to `x: R × in`.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let w = p.var(g, &self.weight_name(l))?;
            let b = p.var(g, &self.bias_name(l))?;
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if l + 1 < layers || self.activate_last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Plain-loop evaluation of one row, independent of the graph.
    pub fn eval_row(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let layers = self.widths.len() - 1;
        let mut h = x.to_vec();
        for l in 0..layers {
            let w = store.get(&self.weight_name(l))?;
            let b = store.get(&self.bias_name(l))?;
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            if h.len() != n_in {
                return Err(Error::shape("mlp", &[h.len()], w.shape()));
            }
            let mut out = b.data().to_vec();
            for (i, &hi) in h.iter().enumerate() {
                for (o, acc) in out.iter_mut().enumerate() {
                    *acc += hi * w.data()[i * n_out + o];
                }
            }
            if l + 1 < layers || self.activate_last {
                out.iter_mut().for_each(|v| *v = crate::kan::silu(*v));
            }
            h = out;
        }
        Ok(h)
    }
}

//! Named parameter storage and the two layer types the network uses:
//! fully connected layers and MLP stacks of them.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Registration order within the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// All learnable tensors, addressable by id or by dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            grad: Tensor::zeros(value.shape()),
            name: name.clone(),
            value,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.value.data_mut().fill(0.0);
            }
        }
    }

    /// Copies values from `other` for every name both stores share.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            if let Some(id) = other.id(&e.name) {
                let v = other.value(id);
                if v.shape() != e.value.shape() {
                    return Err(Error::shape("load_values", e.value.shape(), v.shape()));
                }
                e.value = v.clone();
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Layer widths, including the input width as the first entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub has_bias: bool,
}

impl MlpSpec {
    /// ReLU after every layer.
    pub fn relu(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
            activations: vec![Activation::Relu; widths.len().saturating_sub(1)],
            has_bias: true,
        }
    }

    /// A single affine layer without activation ("FC").
    pub fn fc(input: usize, output: usize) -> Self {
        Self {
            widths: vec![input, output],
            activations: vec![Activation::None],
            has_bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("MLP needs at least one layer"));
        }
        if self.activations.len() != self.widths.len() - 1 {
            return Err(Error::invalid("one activation per MLP layer required"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("MLP widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weight and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (1.0 / input as Real).sqrt();
        let mut sample = |n: usize| -> Vec<Real> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let w = Tensor::new(&[input, output], sample(input * output))?;
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = if bias {
            let b = Tensor::new(&[output], sample(output))?;
            Some(store.insert(format!("{name}.bias"), b)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for (i, w) in spec.widths.windows(2).enumerate() {
            layers.push(Linear::new(
                store,
                &format!("{name}.{i}"),
                w[0],
                w[1],
                spec.has_bias,
                rng,
            )?);
        }
        Ok(Self { spec, layers })
    }

    /// Single FC layer, no activation.
    pub fn fc(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, MlpSpec::fc(input, output), rng)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.spec.input_width() {
            return Err(Error::shape("MLP input", &[self.spec.input_width()], &[width]));
        }
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.spec.activations) {
            h = layer.forward(g, store, h)?;
            if *act == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// One slice of a concatenated MLP input, optionally row-gathered.
#[derive(Clone, Copy, Debug)]
pub struct Part<'a> {
    pub x: Var,
    pub rows: Option<&'a [usize]>,
}

impl<'a> Part<'a> {
    pub fn dense(x: Var) -> Self {
        Self { x, rows: None }
    }

    pub fn gathered(x: Var, rows: &'a [usize]) -> Self {
        Self { x, rows: Some(rows) }
    }
}

impl Mlp {
    /// Same result as [`Mlp::forward`] on the column-concatenation of the
    /// (gathered) parts. The first layer is applied to every part before its
    /// rows are gathered, so repeated rows are multiplied only once.
    pub fn forward_parts(&self, g: &mut Graph, store: &ParamStore, parts: &[Part]) -> Result<Var> {
        let width: usize = parts.iter().map(|p| g.value(p.x).cols()).sum();
        if width != self.spec.input_width() {
            return Err(Error::shape("MLP input", &[self.spec.input_width()], &[width]));
        }
        let first = &self.layers[0];
        let w = g.param(store, first.weight);
        let b = first.bias.map(|b| g.param(store, b));
        let mut acc: Option<Var> = None;
        let mut row0 = 0;
        for (k, p) in parts.iter().enumerate() {
            let cols = g.value(p.x).cols();
            let mut y = g.linear_rows(p.x, w, row0, if k == 0 { b } else { None })?;
            row0 += cols;
            if let Some(idx) = p.rows {
                y = g.gather(y, idx)?;
            }
            acc = Some(match acc {
                None => y,
                Some(a) => {
                    if g.value(a).rows() != g.value(y).rows() {
                        return Err(Error::shape(
                            "MLP part rows",
                            &[g.value(a).rows()],
                            &[g.value(y).rows()],
                        ));
                    }
                    g.add(a, y)?
                }
            });
        }
        let mut h = acc.ok_or_else(|| Error::invalid("MLP input has no parts"))?;
        if self.spec.activations[0] == Activation::Relu {
            h = g.relu(h);
        }
        for (layer, act) in self.layers.iter().zip(&self.spec.activations).skip(1) {
            h = layer.forward(g, store, h)?;
            if *act == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Evaluates an MLP on a plain tensor (no gradient recording kept).
pub fn mlp_forward(x: &Tensor, mlp: &Mlp, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = mlp.forward(&mut g, store, xv)?;
    Ok(g.value(y).clone())
}

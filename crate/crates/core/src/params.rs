//! Named trainable parameters and their per-graph bindings.
//!
//! Parameter tensors live in a [`ParamStore`] in a fixed insertion order.
//! Each training step opens a fresh [`Recorder`], which lazily places every
//! parameter it touches on the graph (as a trainable leaf, or as a constant
//! when frozen) and maps gradients back to store order afterwards.

use crate::error::{Error, Result};
use crate::graph::{Gradients, NodeId, ValueGraph};
use crate::report::fmt_g17;
use crate::tensor::Tensor;
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !name.contains(char::is_whitespace),
            "parameter names must not contain whitespace: {name:?}"
        );
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "parameter shape is fixed");
        self.values[id.0] = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Flat text serialization: one parameter per line as
    /// `name rank dims... values...`.
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        for (_, name, value) in self.iter() {
            write!(w, "{name} {}", value.rank())?;
            for d in value.shape() {
                write!(w, " {d}")?;
            }
            for v in value.data() {
                write!(w, " {}", fmt_g17(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Overwrite the values of already-registered parameters from the
    /// serialized form. Names and shapes must match what the model
    /// construction registered.
    pub fn load_values(&mut self, r: &mut impl BufRead) -> Result<()> {
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let name = it.next().ok_or_else(|| Error::ParamFormat("missing name".into()))?;
            let rank: usize = parse_field(it.next(), "rank")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(parse_field(it.next(), "dimension")?);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(parse_field(it.next(), "value")?);
            }
            if it.next().is_some() {
                return Err(Error::ParamFormat(format!("trailing fields for {name}")));
            }
            let idx = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::ParamFormat(format!("unknown parameter {name}")))?;
            if self.values[idx].shape() != shape.as_slice() {
                return Err(Error::ParamFormat(format!(
                    "shape mismatch for {name}: stored {:?}, file {:?}",
                    self.values[idx].shape(),
                    shape
                )));
            }
            self.values[idx] = Tensor::new(shape, data)?;
        }
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T> {
    field
        .ok_or_else(|| Error::ParamFormat(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::ParamFormat(format!("unparsable {what}")))
}

/// A recording session: one graph plus the store bindings made on it.
pub struct Recorder<'s> {
    pub graph: ValueGraph,
    store: &'s ParamStore,
    bound: Vec<Option<NodeId>>,
    bound_frozen: Vec<Option<NodeId>>,
}

impl<'s> Recorder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Recorder {
            graph: ValueGraph::new(),
            store,
            bound: vec![None; store.len()],
            bound_frozen: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Bind a parameter as a trainable leaf (once per graph).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.index()] {
            return n;
        }
        let n = self.graph.leaf(self.store.get(id).clone());
        self.bound[id.index()] = Some(n);
        n
    }

    /// Bind a parameter as a constant: it contributes its value but
    /// receives no gradient.
    pub fn frozen(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound_frozen[id.index()] {
            return n;
        }
        let n = self.graph.constant(self.store.get(id).clone());
        self.bound_frozen[id.index()] = Some(n);
        n
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.graph.constant(value)
    }

    /// Run backward and return one gradient tensor per store entry, in
    /// store order. Parameters never bound (or bound frozen) get zeros.
    pub fn parameter_gradients(&self, loss: NodeId) -> Result<Vec<Tensor>> {
        let grads = self.graph.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Some(node) => grads
                    .get(*node)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.values[i].shape().to_vec())),
                None => Tensor::zeros(self.store.values[i].shape().to_vec()),
            })
            .collect())
    }

    /// Gradient of a single bound parameter (zeros when unbound).
    pub fn parameter_gradient(&self, grads: &Gradients, id: ParamId) -> Tensor {
        match self.bound[id.index()] {
            Some(node) => grads
                .get(node)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec())),
            None => Tensor::zeros(self.store.get(id).shape().to_vec()),
        }
    }
}

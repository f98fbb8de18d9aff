use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, TensorError, Var};

pub const PARAMS_VERSION: &str = "netdyn-params-v1";

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

/// A [`ParamSet`] recorded onto a tape, one leaf per parameter.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `t` as a learnable parameter, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.with_grad());
    }

    /// Glorot-uniform weight matrix.
    pub fn init_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound { tape, vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect() }
    }

    /// Adds the gradients of every bound parameter into its buffer.
    pub fn absorb(&mut self, grads: &Gradients, bound: &Bound<'_>) -> Result<(), TensorError> {
        for (name, t) in self.tensors.iter_mut() {
            let var = bound.get(name)?;
            match grads.raw(&var) {
                Some(g) => t.accumulate_grad(g)?,
                // Unreached parameters get an explicit zero gradient.
                None => t.accumulate_grad(&vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn scale_grads(&mut self, c: f64) {
        for t in self.tensors.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors.values().filter_map(Tensor::grad).flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Copies every entry whose name starts with `prefix` into `self`.
    pub fn extend_prefixed(&mut self, other: &ParamSet, prefix: &str) {
        for (k, v) in other.iter() {
            if k.starts_with(prefix) {
                self.insert(k, v.clone());
            }
        }
    }

    pub fn to_file(&self) -> ParamsFile {
        ParamsFile {
            version: PARAMS_VERSION.to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), NamedTensor { shape: [t.rows(), t.cols()], data: t.data().to_vec() }))
                .collect(),
        }
    }

    pub fn from_file(file: &ParamsFile) -> Result<Self, TensorError> {
        if file.version != PARAMS_VERSION {
            return Err(TensorError::Argument {
                op: "params",
                msg: format!("unsupported version `{}`", file.version),
            });
        }
        let mut out = ParamSet::new();
        for (k, nt) in &file.tensors {
            out.insert(k.clone(), Tensor::new(nt.shape[0], nt.shape[1], nt.data.clone())?);
        }
        Ok(out)
    }
}

/// Serialized form of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub version: String,
    pub tensors: IndexMap<String, NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

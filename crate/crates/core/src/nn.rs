//! Small differentiable building blocks shared by the models.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Bound, ParamSet, Tensor, TensorError, Var};

/// One-hidden-layer perceptron `tanh(x W0 + b0) W1 + b1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

pub struct MlpVars<'t> {
    pub w0: Var<'t>,
    pub b0: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    /// Biases tiled to the row count given at bind time.
    pub b0_tiled: Var<'t>,
    pub b1_tiled: Var<'t>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, output: usize) -> Self {
        Self { prefix: prefix.into(), input, hidden, output }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Glorot weights, zero biases; the output layer is scaled by `out_gain`.
    pub fn init(&self, params: &mut ParamSet, out_gain: f64, rng: &mut impl Rng) {
        params.init_weight(self.name("w0"), self.input, self.hidden, rng);
        params.insert(self.name("b0"), Tensor::zeros(1, self.hidden));
        params.init_weight(self.name("w1"), self.hidden, self.output, rng);
        if let Some(w) = params.get_mut(&self.name("w1")) {
            w.data_mut().iter_mut().for_each(|v| *v *= out_gain);
        }
        params.insert(self.name("b1"), Tensor::zeros(1, self.output));
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.output + self.output
    }

    pub fn bind<'t>(&self, b: &Bound<'t>, rows: usize) -> Result<MlpVars<'t>, TensorError> {
        let b0 = b.get(&self.name("b0"))?;
        let b1 = b.get(&self.name("b1"))?;
        Ok(MlpVars {
            w0: b.get(&self.name("w0"))?,
            w1: b.get(&self.name("w1"))?,
            b0_tiled: b0.tile_rows(rows)?,
            b1_tiled: b1.tile_rows(rows)?,
            b0,
            b1,
        })
    }
}

impl<'t> MlpVars<'t> {
    /// Forward pass for an input with the bound row count.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul(self.w0)?.add(self.b0_tiled)?.tanh()?.matmul(self.w1)?.add(self.b1_tiled)
    }
}

/// A row vector repeated down `rows` rows, recorded as a constant.
pub fn constant_rows<'t>(tape: &'t crate::autodiff::Tape, values: &[f64], rows: usize) -> Var<'t> {
    tape.constant(Tensor::new(rows, values.len(), values.repeat(rows)).expect("sizes agree"))
}

/// Per-row factors expanded from per-block values (`block_rows` rows each).
pub fn expand_blocks(values: &[f64], block_rows: usize) -> Arc<[f64]> {
    values.iter().flat_map(|&v| std::iter::repeat_n(v, block_rows)).collect()
}

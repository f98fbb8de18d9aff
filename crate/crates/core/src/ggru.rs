//! Graph GRU cell with a reliability input and a time-aware forget gate,
//! plus the linear readout and the mask-based imputation combine.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Bound, ParamSet, Tensor, TensorError, Var};
use crate::graph::EdgeIndex;
use crate::{Error, Result};

/// `H W1 + (A H) W2`, with `A H` gathered over the directed pairs of
/// `edges`.
pub fn mpnn_apply<'t>(h: Var<'t>, edges: &EdgeIndex, w1: Var<'t>, w2: Var<'t>) -> Result<Var<'t>, TensorError> {
    if h.rows() != edges.n_rows() {
        return Err(TensorError::Shape { op: "mpnn_apply", lhs: h.shape(), rhs: (edges.n_rows(), h.cols()) });
    }
    let own = h.matmul(w1)?;
    if edges.n_pairs() == 0 {
        return Ok(own);
    }
    let agg = h.gather_rows(edges.sources().clone())?.scatter_add_rows(edges.targets().clone(), edges.n_rows())?;
    own.add(agg.matmul(w2)?)
}

/// Per-entry confidence in the combined state.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMatrix {
    pub u: Tensor,
    pub alpha: f64,
}

/// `alpha` is the masked mean squared gap between `x_hat` and the observed
/// entries of `x_obs` (carried over from `alpha_prev` when nothing is
/// observed). Observed entries get 1, the rest `1 / (1 + |alpha|)`.
pub fn compute_reliability(x_obs: &Tensor, x_hat: &Tensor, mask: &Tensor, alpha_prev: f64) -> Result<ReliabilityMatrix> {
    if x_obs.shape() != mask.shape() || x_hat.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "reliability inputs {:?}, {:?}, {:?} differ",
            x_obs.shape(),
            x_hat.shape(),
            mask.shape()
        )));
    }
    let observed = observed_mask(mask)?;
    let (mut sq, mut count) = (0.0, 0usize);
    for (k, &seen) in observed.iter().enumerate() {
        if seen {
            let d = x_hat.data()[k] - x_obs.data()[k];
            sq += d * d;
            count += 1;
        }
    }
    let alpha = if count == 0 { alpha_prev } else { sq / count as f64 };
    let fill = 1.0 / (1.0 + alpha.abs());
    let data = observed.iter().map(|&seen| if seen { 1.0 } else { fill }).collect();
    Ok(ReliabilityMatrix { u: Tensor::new(mask.rows(), mask.cols(), data)?, alpha })
}

/// Mask entries as booleans; anything other than 0 or 1 is rejected.
pub fn observed_mask(mask: &Tensor) -> Result<Arc<[bool]>> {
    mask.data()
        .iter()
        .map(|&v| match v {
            1.0 => Ok(true),
            0.0 => Ok(false),
            _ => Err(Error::Contract(format!("mask entries must be 0 or 1, found {v}"))),
        })
        .collect()
}

/// Scales column `k` of `z` by `exp(-max(0, w_dec[k] * dt))`.
pub fn time_decay_gate<'t>(z: Var<'t>, dt: f64, w_dec: Var<'t>) -> Result<Var<'t>> {
    if !(dt >= 0.0) {
        return Err(Error::Argument(format!("time gap must be non-negative, got {dt}")));
    }
    if w_dec.shape() != (1, z.cols()) {
        return Err(TensorError::Shape { op: "time_decay_gate", lhs: z.shape(), rhs: w_dec.shape() }.into());
    }
    let factor = w_dec.scale(dt)?.relu_max0()?.neg()?.exp()?;
    Ok(z.hadamard(factor.tile_rows(z.rows())?)?)
}

/// Observed entries copied from `x_obs`, missing ones from `x_hat`.
pub fn combine_imputation<'t>(x_obs: &Tensor, mask: &Tensor, x_hat: Var<'t>) -> Result<Var<'t>> {
    if x_obs.shape() != mask.shape() || x_hat.shape() != mask.shape() {
        return Err(Error::Shape(format!("combine inputs {:?}, {:?}, {:?} differ", x_obs.shape(), mask.shape(), x_hat.shape())));
    }
    Ok(x_hat.where_mask(observed_mask(mask)?, x_obs)?)
}

/// Shapes and parameter names of the cell; parameters live under
/// `<prefix>.{r,z,c,readout,init}.*` and `<prefix>.wdec`.
#[derive(Clone, Debug, PartialEq)]
pub struct GgruCell {
    pub prefix: String,
    pub state_dim: usize,
    pub hidden: usize,
}

pub const DECAY_INIT: f64 = 0.1;

impl GgruCell {
    pub fn new(prefix: impl Into<String>, state_dim: usize, hidden: usize) -> Self {
        Self { prefix: prefix.into(), state_dim, hidden }
    }

    /// Gates read `state || reliability || hidden`.
    pub fn input_width(&self) -> usize {
        2 * self.state_dim + self.hidden
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let (c, h, d) = (self.input_width(), self.hidden, self.state_dim);
        for gate in ["r", "z", "c"] {
            params.init_weight(self.name(&format!("{gate}.w1")), c, h, rng);
            params.init_weight(self.name(&format!("{gate}.w2")), c, h, rng);
            params.insert(self.name(&format!("{gate}.b")), Tensor::zeros(1, h));
        }
        params.init_weight(self.name("readout.v"), h, d, rng);
        params.insert(self.name("readout.b"), Tensor::zeros(1, d));
        params.init_weight(self.name("init.v"), h, d, rng);
        params.insert(self.name("init.b"), Tensor::zeros(1, d));
        params.insert(self.name("wdec"), Tensor::full(1, h, DECAY_INIT));
    }

    pub fn param_count(&self) -> usize {
        let (c, h, d) = (self.input_width(), self.hidden, self.state_dim);
        3 * (2 * c * h + h) + 2 * (h * d + d) + h
    }

    pub fn bind<'t>(&self, b: &Bound<'t>, edges: &EdgeIndex) -> Result<GgruVars<'t>> {
        let rows = edges.n_rows();
        let gate = |g: &str| -> Result<GateVars<'t>, TensorError> {
            Ok(GateVars {
                w1: b.get(&self.name(&format!("{g}.w1")))?,
                w2: b.get(&self.name(&format!("{g}.w2")))?,
                bias: b.get(&self.name(&format!("{g}.b")))?.tile_rows(rows)?,
            })
        };
        Ok(GgruVars {
            r: gate("r")?,
            z: gate("z")?,
            c: gate("c")?,
            readout: Affine::bind(b, &self.name("readout.v"), &self.name("readout.b"), rows)?,
            init: Affine::bind(b, &self.name("init.v"), &self.name("init.b"), rows)?,
            wdec: b.get(&self.name("wdec"))?,
            cell: self.clone(),
            edges: edges.clone(),
        })
    }
}

pub struct GateVars<'t> {
    pub w1: Var<'t>,
    pub w2: Var<'t>,
    pub bias: Var<'t>,
}

/// `H V + b` with `b` tiled to the bound row count.
pub struct Affine<'t> {
    pub v: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> Affine<'t> {
    pub fn bind(b: &Bound<'t>, v: &str, bias: &str, rows: usize) -> Result<Self, TensorError> {
        Ok(Self { v: b.get(v)?, bias: b.get(bias)?.tile_rows(rows)? })
    }

    pub fn apply(&self, h: Var<'t>) -> Result<Var<'t>, TensorError> {
        h.matmul(self.v)?.add(self.bias)
    }
}

pub struct GgruVars<'t> {
    pub r: GateVars<'t>,
    pub z: GateVars<'t>,
    pub c: GateVars<'t>,
    pub readout: Affine<'t>,
    pub init: Affine<'t>,
    pub wdec: Var<'t>,
    cell: GgruCell,
    edges: EdgeIndex,
}

impl<'t> GgruVars<'t> {
    fn gate(&self, g: &GateVars<'t>, input: Var<'t>) -> Result<Var<'t>, TensorError> {
        mpnn_apply(input, &self.edges, g.w1, g.w2)?.add(g.bias)
    }

    pub fn update(&self, x_tilde: Var<'t>, u: &Tensor, h_prev: Var<'t>, dt: f64) -> Result<Var<'t>> {
        self.update_with(x_tilde, u, h_prev, dt, None)
    }

    /// `force_z` replaces the (decayed) update gate with a constant.
    pub fn update_with(
        &self,
        x_tilde: Var<'t>,
        u: &Tensor,
        h_prev: Var<'t>,
        dt: f64,
        force_z: Option<f64>,
    ) -> Result<Var<'t>> {
        let (rows, d, h) = (self.edges.n_rows(), self.cell.state_dim, self.cell.hidden);
        if x_tilde.shape() != (rows, d) || u.shape() != (rows, d) || h_prev.shape() != (rows, h) {
            return Err(Error::Shape(format!(
                "ggru_update got X~ {:?}, U {:?}, H {:?} for {rows} nodes, d={d}, d_h={h}",
                x_tilde.shape(),
                u.shape(),
                h_prev.shape()
            )));
        }
        let tape = h_prev.tape();
        let u = tape.constant(u.clone());
        let input = tape.concat_cols(&[x_tilde, u, h_prev])?;
        let r = self.gate(&self.r, input)?.sigmoid()?;
        let z = match force_z {
            Some(v) => tape.constant(Tensor::full(rows, h, v)),
            None => time_decay_gate(self.gate(&self.z, input)?.sigmoid()?, dt, self.wdec)?,
        };
        let reset = tape.concat_cols(&[x_tilde, u, r.hadamard(h_prev)?])?;
        let cand = self.gate(&self.c, reset)?.tanh()?;
        // Z H + (1 - Z) C = C + Z (H - C)
        Ok(cand.add(z.hadamard(h_prev.sub(cand)?)?)?)
    }

    pub fn readout(&self, h: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.readout.apply(h)
    }

    /// Zero hidden state and the first combined state.
    pub fn initial_impute(&self, x0: &Tensor, m0: &Tensor) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let tape = self.wdec.tape();
        let h0 = tape.constant(Tensor::zeros(self.edges.n_rows(), self.cell.hidden));
        let fill = self.init.apply(h0)?;
        Ok((combine_imputation(x0, m0, fill)?, fill, h0))
    }
}

//! Comparison models run through the same recurrent pipeline: a GRU fed
//! the time gap, a GRU whose hidden state decays between observations, and
//! an ODE-RNN whose vector field ignores the graph.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tensor, TensorError, Var};
use crate::ggru::Affine;
use crate::gnode::{rk4, SolverConfig, StepSizes};
use crate::graph::NetworkGraph;
use crate::impute::ModelConfig;
use crate::nn::{Mlp, MlpVars};
use crate::pipeline::{BoundCell, Recurrent, StepInput};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RnnDt,
    GruDecay,
    OdeRnn,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::RnnDt, BaselineKind::GruDecay, BaselineKind::OdeRnn];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::RnnDt => "rnn_dt",
            BaselineKind::GruDecay => "gru_decay",
            BaselineKind::OdeRnn => "ode_rnn",
        }
    }

    fn gru_input(self, d: usize) -> usize {
        match self {
            BaselineKind::RnnDt => 2 * d + 1,
            BaselineKind::GruDecay => 2 * d,
            BaselineKind::OdeRnn => d,
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Node-wise GRU with dense weights shared across nodes.
#[derive(Clone, Debug, PartialEq)]
struct DenseGru {
    prefix: String,
    input: usize,
    hidden: usize,
}

struct DenseGruVars<'t> {
    gates: [(Var<'t>, Var<'t>, Var<'t>); 3],
}

impl DenseGru {
    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        for g in ["r", "z", "c"] {
            params.init_weight(self.name(&format!("{g}.wx")), self.input, self.hidden, rng);
            params.init_weight(self.name(&format!("{g}.wh")), self.hidden, self.hidden, rng);
            params.insert(self.name(&format!("{g}.b")), Tensor::zeros(1, self.hidden));
        }
    }

    fn param_count(&self) -> usize {
        3 * (self.input * self.hidden + self.hidden * self.hidden + self.hidden)
    }

    fn bind<'t>(&self, b: &Bound<'t>, rows: usize) -> Result<DenseGruVars<'t>, TensorError> {
        let gate = |g: &str| -> Result<_, TensorError> {
            Ok((
                b.get(&self.name(&format!("{g}.wx")))?,
                b.get(&self.name(&format!("{g}.wh")))?,
                b.get(&self.name(&format!("{g}.b")))?.tile_rows(rows)?,
            ))
        };
        Ok(DenseGruVars { gates: [gate("r")?, gate("z")?, gate("c")?] })
    }
}

impl<'t> DenseGruVars<'t> {
    fn pre(&self, k: usize, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>, TensorError> {
        let (wx, wh, b) = self.gates[k];
        x.matmul(wx)?.add(h.matmul(wh)?)?.add(b)
    }

    fn update(&self, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>, TensorError> {
        let r = self.pre(0, x, h)?.sigmoid()?;
        let z = self.pre(1, x, h)?.sigmoid()?;
        let c = self.pre(2, x, r.hadamard(h)?)?.tanh()?;
        c.add(z.hadamard(h.sub(c)?)?)
    }
}

/// A baseline sized for a parameter budget.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub state_dim: usize,
    pub n_nodes: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub solver: SolverConfig,
    pub field_init_gain: f64,
}

impl BaselineModel {
    pub fn new(kind: BaselineKind, state_dim: usize, n_nodes: usize, hidden: usize, config: &ModelConfig) -> Self {
        Self {
            kind,
            state_dim,
            n_nodes,
            hidden,
            mlp_hidden: config.mlp_hidden,
            solver: config.solver,
            field_init_gain: config.field_init_gain,
        }
    }

    /// Hidden width whose parameter count is closest to `target`.
    pub fn matched(kind: BaselineKind, state_dim: usize, n_nodes: usize, config: &ModelConfig, target: usize) -> Self {
        (1..=256)
            .map(|h| Self::new(kind, state_dim, n_nodes, h, config))
            .min_by_key(|m| m.param_count().abs_diff(target))
            .expect("range is nonempty")
    }

    fn prefix(&self) -> String {
        format!("baseline.{}", self.kind)
    }

    fn gru(&self) -> DenseGru {
        DenseGru { prefix: format!("{}.gru", self.prefix()), input: self.kind.gru_input(self.state_dim), hidden: self.hidden }
    }

    fn field(&self) -> Mlp {
        let flat = self.n_nodes * self.hidden;
        Mlp::new(format!("{}.field", self.prefix()), flat, self.mlp_hidden, flat)
    }
}

impl Recurrent for BaselineModel {
    fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let p = self.prefix();
        self.gru().init(params, rng);
        params.init_weight(format!("{p}.readout.v"), self.hidden, self.state_dim, rng);
        params.insert(format!("{p}.readout.b"), Tensor::zeros(1, self.state_dim));
        params.init_weight(format!("{p}.init.v"), self.hidden, self.state_dim, rng);
        params.insert(format!("{p}.init.b"), Tensor::zeros(1, self.state_dim));
        match self.kind {
            BaselineKind::RnnDt => {}
            BaselineKind::GruDecay => params.insert(format!("{p}.wdec"), Tensor::full(1, self.hidden, crate::ggru::DECAY_INIT)),
            BaselineKind::OdeRnn => self.field().init(params, self.field_init_gain, rng),
        }
    }

    fn param_count(&self) -> usize {
        let maps = 2 * (self.hidden * self.state_dim + self.state_dim);
        let extra = match self.kind {
            BaselineKind::RnnDt => 0,
            BaselineKind::GruDecay => self.hidden,
            BaselineKind::OdeRnn => self.field().param_count(),
        };
        self.gru().param_count() + maps + extra
    }

    fn bind<'t>(&self, b: &Bound<'t>, graph: &NetworkGraph) -> Result<Box<dyn BoundCell<'t> + 't>> {
        let rows = graph.n_nodes();
        if rows != self.n_nodes {
            return Err(Error::Shape(format!("baseline built for {} nodes, graph has {rows}", self.n_nodes)));
        }
        let p = self.prefix();
        let extra = match self.kind {
            BaselineKind::RnnDt => Evolve::Hold,
            BaselineKind::GruDecay => Evolve::Decay(b.get(&format!("{p}.wdec"))?),
            BaselineKind::OdeRnn => Evolve::Field(self.field().bind(b, 1)?),
        };
        Ok(Box::new(BoundBaseline {
            kind: self.kind,
            gru: self.gru().bind(b, rows)?,
            readout: Affine::bind(b, &format!("{p}.readout.v"), &format!("{p}.readout.b"), rows)?,
            init: Affine::bind(b, &format!("{p}.init.v"), &format!("{p}.init.b"), rows)?,
            evolve: extra,
            rows,
            hidden: self.hidden,
            solver: self.solver,
            tape: b.tape(),
        }))
    }
}

enum Evolve<'t> {
    Hold,
    Decay(Var<'t>),
    Field(MlpVars<'t>),
}

struct BoundBaseline<'t> {
    kind: BaselineKind,
    gru: DenseGruVars<'t>,
    readout: Affine<'t>,
    init: Affine<'t>,
    evolve: Evolve<'t>,
    rows: usize,
    hidden: usize,
    solver: SolverConfig,
    tape: &'t crate::autodiff::Tape,
}

impl<'t> BoundCell<'t> for BoundBaseline<'t> {
    fn start(&self) -> Result<(Var<'t>, Var<'t>)> {
        let h0 = self.tape.constant(Tensor::zeros(self.rows, self.hidden));
        Ok((self.init.apply(h0)?, h0))
    }

    fn evolve(&self, h: Var<'t>, dt: f64) -> Result<Var<'t>> {
        if !(dt >= 0.0) {
            return Err(Error::Argument(format!("time gap must be non-negative, got {dt}")));
        }
        match &self.evolve {
            Evolve::Hold => Ok(h),
            Evolve::Decay(w) => {
                let factor = w.scale(dt)?.relu_max0()?.neg()?.exp()?.tile_rows(self.rows)?;
                Ok(h.hadamard(factor)?)
            }
            Evolve::Field(mlp) => {
                if dt == 0.0 {
                    return Ok(h);
                }
                let (rows, cols) = h.shape();
                let field = |y: Var<'t>| mlp.forward(y.reshape(1, rows * cols)?)?.reshape(rows, cols);
                let n = self.solver.substeps(dt);
                Ok(rk4(field, h, &StepSizes::Uniform(dt / n as f64), n)?)
            }
        }
    }

    fn readout(&self, h: Var<'t>) -> Result<Var<'t>> {
        Ok(self.readout.apply(h)?)
    }

    fn update(&self, input: &StepInput<'_, 't>, h: Var<'t>) -> Result<Var<'t>> {
        let mask = || self.tape.constant(input.mask.clone());
        let x = match self.kind {
            BaselineKind::RnnDt => {
                let gap = self.tape.constant(Tensor::full(self.rows, 1, input.dt));
                self.tape.concat_cols(&[input.x_tilde, mask(), gap])?
            }
            BaselineKind::GruDecay => self.tape.concat_cols(&[input.x_tilde, mask()])?,
            BaselineKind::OdeRnn => input.x_tilde,
        };
        Ok(self.gru.update(x, h)?)
    }
}

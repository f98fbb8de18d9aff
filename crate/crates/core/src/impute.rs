//! The proposed imputation network: a graph neural ODE carries the hidden
//! state between observations and the graph GRU folds each observation in.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Var};
use crate::gnode::{GnodeDynamics, GnodeVars, SolverConfig};
use crate::ggru::{GgruCell, GgruVars};
use crate::graph::NetworkGraph;
use crate::pipeline::{BoundCell, Recurrent, StepInput};
use crate::{Error, Result};

/// Architecture shared by the learned models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub solver: SolverConfig,
    /// Scale of the initial output layers of learned vector fields.
    pub field_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 16, mlp_hidden: 32, solver: SolverConfig::default(), field_init_gain: 0.1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.mlp_hidden == 0 {
            return Err(Error::Argument("model widths must be positive".into()));
        }
        self.solver.validate()
    }
}

/// Graph ODE between observations, graph GRU at observations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputeModel {
    pub state_dim: usize,
    pub config: ModelConfig,
    pub dynamics: GnodeDynamics,
    pub cell: GgruCell,
}

impl ImputeModel {
    pub fn new(state_dim: usize, config: &ModelConfig) -> Self {
        Self {
            state_dim,
            config: config.clone(),
            dynamics: GnodeDynamics::new("gnode", config.hidden, config.mlp_hidden),
            cell: GgruCell::new("ggru", state_dim, config.hidden),
        }
    }
}

impl Recurrent for ImputeModel {
    fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.dynamics.init(params, self.config.field_init_gain, rng);
        self.cell.init(params, rng);
    }

    fn param_count(&self) -> usize {
        self.dynamics.param_count() + self.cell.param_count()
    }

    fn bind<'t>(&self, b: &Bound<'t>, graph: &NetworkGraph) -> Result<Box<dyn BoundCell<'t> + 't>> {
        let edges = graph.edge_index();
        Ok(Box::new(BoundImpute {
            field: self.dynamics.bind(b, &edges)?,
            gru: self.cell.bind(b, &edges)?,
            solver: self.config.solver,
        }))
    }
}

struct BoundImpute<'t> {
    field: GnodeVars<'t>,
    gru: GgruVars<'t>,
    solver: SolverConfig,
}

impl<'t> BoundCell<'t> for BoundImpute<'t> {
    fn start(&self) -> Result<(Var<'t>, Var<'t>)> {
        let h0 = self.gru.wdec.tape().constant(crate::autodiff::Tensor::zeros(self.field.edges().n_rows(), self.gru.wdec.cols()));
        Ok((self.gru.init.apply(h0)?, h0))
    }

    fn evolve(&self, h: Var<'t>, dt: f64) -> Result<Var<'t>> {
        self.field.solve(h, 0.0, dt, &self.solver)
    }

    fn readout(&self, h: Var<'t>) -> Result<Var<'t>> {
        Ok(self.gru.readout(h)?)
    }

    fn update(&self, input: &StepInput<'_, 't>, h: Var<'t>) -> Result<Var<'t>> {
        self.gru.update(input.x_tilde, input.reliability, h, input.dt)
    }
}

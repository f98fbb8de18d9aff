use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::graph::NetworkGraph;
use crate::{Error, Result};

/// Right-hand side of an autonomous ODE over an `n_nodes x state_dim`
/// row-major state.
pub trait VectorField {
    fn n_nodes(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn name(&self) -> &str;
    fn eval(&self, x: &[f64], dx: &mut [f64]);
}

/// Which state equation receives the diffusive coupling term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingTarget {
    #[default]
    First,
    Second,
}

/// Planar cubic oscillator per node with coupling `x1_i - x1_j` summed over
/// neighbors:
///
/// ```text
/// dx1 = -0.1 x1^3 - 2 x2 (+ coupling)
/// dx2 =  x1 - 0.1 x2      (+ coupling)
/// ```
#[derive(Clone, Debug)]
pub struct CubicOscillator2d {
    graph: NetworkGraph,
    coupling: CouplingTarget,
}

impl CubicOscillator2d {
    pub const NAME: &'static str = "cubic2d";

    pub fn new(graph: NetworkGraph, coupling: CouplingTarget) -> Self {
        Self { graph, coupling }
    }
}

impl VectorField for CubicOscillator2d {
    fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        Self::NAME
    }

    fn eval(&self, x: &[f64], dx: &mut [f64]) {
        let slot = match self.coupling {
            CouplingTarget::First => 0,
            CouplingTarget::Second => 1,
        };
        for i in 0..self.graph.n_nodes() {
            let (x1, x2) = (x[2 * i], x[2 * i + 1]);
            dx[2 * i] = -0.1 * x1 * x1 * x1 - 2.0 * x2;
            dx[2 * i + 1] = x1 - 0.1 * x2;
            let coupling: f64 = self.graph.neighbors(i).iter().map(|&j| x1 - x[2 * j]).sum();
            dx[2 * i + slot] += coupling;
        }
    }
}

/// Evaluates the cubic oscillator field at an `N x 2` state.
pub fn rhs_2d_cubic(x: &Tensor, graph: &NetworkGraph) -> Result<Tensor> {
    if x.cols() != 2 || x.rows() != graph.n_nodes() {
        return Err(Error::Shape(format!(
            "cubic oscillator needs a {}x2 state, got {:?}",
            graph.n_nodes(),
            x.shape()
        )));
    }
    let field = CubicOscillator2d::new(graph.clone(), CouplingTarget::First);
    let mut out = vec![0.0; x.len()];
    field.eval(x.data(), &mut out);
    Ok(Tensor::new(x.rows(), 2, out)?)
}

/// Densely sampled reference solution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    pub rhs: String,
}

impl GroundTruthTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Points with `lo < t <= hi`.
    pub fn window(&self, lo: f64, hi: f64) -> (Vec<f64>, Vec<Tensor>) {
        self.times
            .iter()
            .zip(&self.states)
            .filter(|(&t, _)| t > lo && t <= hi)
            .map(|(&t, s)| (t, s.clone()))
            .unzip()
    }
}

/// Classic fourth-order Runge-Kutta from `(t_grid[0], x0)` through every
/// grid time, using `ceil(gap / step_max)` equal substeps per gap.
pub fn integrate(
    field: &dyn VectorField,
    x0: &Tensor,
    t_start: f64,
    t_grid: &[f64],
    step_max: f64,
) -> Result<GroundTruthTrajectory> {
    if !(step_max > 0.0) {
        return Err(Error::Argument(format!("step_max must be positive, got {step_max}")));
    }
    if x0.shape() != (field.n_nodes(), field.state_dim()) {
        return Err(Error::Shape(format!(
            "initial state {:?} does not match field {}x{}",
            x0.shape(),
            field.n_nodes(),
            field.state_dim()
        )));
    }
    if t_grid.is_empty() {
        return Err(Error::Argument("empty time grid".into()));
    }
    if t_grid[0] < t_start || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("time grid must be strictly increasing from the start time".into()));
    }

    let n = x0.len();
    let mut x = x0.data().to_vec();
    let mut t = t_start;
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    let mut states = Vec::with_capacity(t_grid.len());

    for &target in t_grid {
        let gap = target - t;
        if gap > 0.0 {
            let steps = (gap / step_max).ceil().max(1.0) as usize;
            let h = gap / steps as f64;
            for s in 0..steps {
                rk4_step(field, &mut x, h, &mut k, &mut tmp);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { time: t + (s + 1) as f64 * h });
                }
            }
        }
        t = target;
        states.push(Tensor::new(x0.rows(), x0.cols(), x.clone())?);
    }
    Ok(GroundTruthTrajectory { times: t_grid.to_vec(), states, rhs: field.name().to_string() })
}

fn rk4_step(field: &dyn VectorField, x: &mut [f64], h: f64, k: &mut [Vec<f64>; 4], tmp: &mut [f64]) {
    let [k1, k2, k3, k4] = k;
    field.eval(x, k1);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    field.eval(tmp, k2);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    field.eval(tmp, k3);
    for i in 0..x.len() {
        tmp[i] = x[i] + h * k3[i];
    }
    field.eval(tmp, k4);
    for i in 0..x.len() {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

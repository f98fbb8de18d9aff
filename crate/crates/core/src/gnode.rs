//! Graph neural ODE: a learnable right-hand side split into per-node
//! self-dynamics and summed pairwise coupling,
//!
//! ```text
//! dh_i/dt = gamma(h_i) + sum_{j in N(i)} phi(h_i || h_j)
//! ```
//!
//! integrated with fixed-step RK4 on the autodiff tape so gradients flow
//! through the solver into both the initial state and the parameters.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tensor, TensorError, Var};
use crate::graph::EdgeIndex;
use crate::nn::{Mlp, MlpVars};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub step_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { step_max: 0.05 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_max > 0.0 && self.step_max.is_finite() {
            Ok(())
        } else {
            Err(Error::Argument(format!("step_max must be positive, got {}", self.step_max)))
        }
    }

    /// Substep count for a span: `ceil(span / step_max)`.
    pub fn substeps(&self, span: f64) -> usize {
        (span / self.step_max).ceil() as usize
    }
}

/// Step size of one RK4 substep, shared or per row.
#[derive(Clone, Debug)]
pub enum StepSizes {
    Uniform(f64),
    PerRow(Arc<[f64]>),
}

impl StepSizes {
    fn scale<'t>(&self, v: Var<'t>, factor: f64) -> Result<Var<'t>, TensorError> {
        match self {
            StepSizes::Uniform(h) => v.scale(h * factor),
            StepSizes::PerRow(h) => v.scale_rows(h.iter().map(|x| x * factor).collect()),
        }
    }
}

/// `n_steps` classic RK4 substeps of `f` starting from `y0`.
pub fn rk4<'t, F>(f: F, y0: Var<'t>, steps: &StepSizes, n_steps: usize) -> Result<Var<'t>, TensorError>
where
    F: Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let half = |v| steps.scale(v, 0.5);
    let mut y = y0;
    for _ in 0..n_steps {
        let k1 = f(y)?;
        let k2 = f(y.add(half(k1)?)?)?;
        let k3 = f(y.add(half(k2)?)?)?;
        let k4 = f(y.add(steps.scale(k3, 1.0)?)?)?;
        let mid = k2.add(k3)?.scale(2.0)?;
        let total = k1.add(mid)?.add(k4)?;
        y = y.add(steps.scale(total, 1.0 / 6.0)?)?;
    }
    Ok(y)
}

/// Learnable graph-structured vector field over `width`-dimensional
/// node states.
#[derive(Clone, Debug, PartialEq)]
pub struct GnodeDynamics {
    pub width: usize,
    gamma: Mlp,
    phi: Mlp,
}

impl GnodeDynamics {
    /// Parameters live under `<prefix>.gamma.*` and `<prefix>.phi.*`.
    pub fn new(prefix: &str, width: usize, hidden: usize) -> Self {
        Self {
            width,
            gamma: Mlp::new(format!("{prefix}.gamma"), width, hidden, width),
            phi: Mlp::new(format!("{prefix}.phi"), 2 * width, hidden, width),
        }
    }

    pub fn init(&self, params: &mut ParamSet, out_gain: f64, rng: &mut impl Rng) {
        self.gamma.init(params, out_gain, rng);
        self.phi.init(params, out_gain, rng);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.param_count() + self.phi.param_count()
    }

    pub fn gamma(&self) -> &Mlp {
        &self.gamma
    }

    pub fn phi(&self) -> &Mlp {
        &self.phi
    }

    /// Records the parameters for states laid out like `edges`.
    pub fn bind<'t>(&self, b: &Bound<'t>, edges: &EdgeIndex) -> Result<GnodeVars<'t>> {
        let rows = edges.n_rows();
        let gamma = self.gamma.bind(b, rows)?;
        let phi = self.phi.bind(b, edges.n_pairs())?;
        // phi's first layer applied to [h_i || h_j] equals h_i W_top + h_j W_bot.
        let phi_top = phi.w0.slice_rows(0, self.width)?;
        let phi_bot = phi.w0.slice_rows(self.width, self.width)?;
        let degree = phi.w0.tape().constant(Tensor::new(rows, 1, edges.degree().to_vec())?);
        let coupling_bias = degree.matmul(phi.b1)?;
        Ok(GnodeVars { width: self.width, gamma, phi, phi_top, phi_bot, coupling_bias, edges: edges.clone() })
    }
}

pub struct GnodeVars<'t> {
    width: usize,
    gamma: MlpVars<'t>,
    phi: MlpVars<'t>,
    phi_top: Var<'t>,
    phi_bot: Var<'t>,
    coupling_bias: Var<'t>,
    edges: EdgeIndex,
}

impl<'t> GnodeVars<'t> {
    pub fn edges(&self) -> &EdgeIndex {
        &self.edges
    }

    /// Vector field at `h` (`rows x width`).
    pub fn hidden_rhs(&self, h: Var<'t>) -> Result<Var<'t>, TensorError> {
        if h.shape() != (self.edges.n_rows(), self.width) {
            return Err(TensorError::Shape { op: "hidden_rhs", lhs: h.shape(), rhs: (self.edges.n_rows(), self.width) });
        }
        let own = self.gamma.forward(h)?;
        if self.edges.n_pairs() == 0 {
            return Ok(own);
        }
        let at_target = h.matmul(self.phi_top)?.gather_rows(self.edges.targets().clone())?;
        let at_source = h.matmul(self.phi_bot)?.gather_rows(self.edges.sources().clone())?;
        let act = at_target.add(at_source)?.add(self.phi.b0_tiled)?.tanh()?;
        // The output layer is linear, so summing activations per target
        // before it is exact: sum_j (a_ij W1 + b1) = (sum_j a_ij) W1 + deg_i b1.
        let summed = act.scatter_add_rows(self.edges.targets().clone(), self.edges.n_rows())?;
        let coupling = summed.matmul(self.phi.w1)?.add(self.coupling_bias)?;
        own.add(coupling)
    }

    /// State at `t1` from `h0` at `t0`, using `ceil((t1 - t0) / step_max)`
    /// equal RK4 substeps.
    pub fn solve(&self, h0: Var<'t>, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Var<'t>> {
        if t1 < t0 {
            return Err(Error::Argument(format!("cannot integrate backwards from {t0} to {t1}")));
        }
        if t1 == t0 {
            return Ok(h0);
        }
        let n = cfg.substeps(t1 - t0);
        Ok(rk4(|h| self.hidden_rhs(h), h0, &StepSizes::Uniform((t1 - t0) / n as f64), n)?)
    }

    /// Advances row `r` by `spans[r] >= 0` time units in one shared
    /// substep loop; every row's substep is at most `step_max`.
    pub fn solve_rows(&self, h0: Var<'t>, spans: &[f64], cfg: &SolverConfig) -> Result<Var<'t>> {
        solve_rows_with(|h| self.hidden_rhs(h), h0, spans, cfg)
    }
}

/// Shared-substep RK4 where each row advances by its own span.
pub fn solve_rows_with<'t, F>(f: F, h0: Var<'t>, spans: &[f64], cfg: &SolverConfig) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>, TensorError>,
{
    if spans.len() != h0.rows() {
        return Err(Error::Shape(format!("{} spans for {} rows", spans.len(), h0.rows())));
    }
    if spans.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::Argument("spans must be non-negative".into()));
    }
    let longest = spans.iter().copied().fold(0.0, f64::max);
    if longest == 0.0 {
        return Ok(h0);
    }
    let n = cfg.substeps(longest);
    let steps: Arc<[f64]> = spans.iter().map(|s| s / n as f64).collect();
    Ok(rk4(f, h0, &StepSizes::PerRow(steps), n)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::graph::NetworkGraph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(width: usize, hidden: usize, seed: u64) -> (GnodeDynamics, ParamSet) {
        let dynamics = GnodeDynamics::new("gnode", width, hidden);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dynamics.init(&mut params, 1.0, &mut rng);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        (dynamics, params)
    }

    fn random_state(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn eval_rhs(dynamics: &GnodeDynamics, params: &ParamSet, g: &NetworkGraph, h: &Tensor) -> Tensor {
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
        vars.hidden_rhs(tape.constant(h.clone())).unwrap().value()
    }

    /// Plain-loop evaluation of one tanh MLP on a single input row.
    fn mlp_row(p: &ParamSet, prefix: &str, x: &[f64]) -> Vec<f64> {
        let w0 = p.get(&format!("{prefix}.w0")).unwrap();
        let b0 = p.get(&format!("{prefix}.b0")).unwrap();
        let w1 = p.get(&format!("{prefix}.w1")).unwrap();
        let b1 = p.get(&format!("{prefix}.b1")).unwrap();
        let hidden: Vec<f64> = (0..w0.cols())
            .map(|k| (b0.get(0, k) + (0..x.len()).map(|i| x[i] * w0.get(i, k)).sum::<f64>()).tanh())
            .collect();
        (0..w1.cols())
            .map(|o| b1.get(0, o) + (0..hidden.len()).map(|k| hidden[k] * w1.get(k, o)).sum::<f64>())
            .collect()
    }

    #[test]
    fn constant_coupling_counts_neighbors() {
        let g = NetworkGraph::new(3, [(0, 1), (0, 2)]).unwrap();
        let dynamics = GnodeDynamics::new("gnode", 2, 4);
        let mut params = ParamSet::new();
        for (name, (r, c)) in [
            ("gamma.w0", (2, 4)),
            ("gamma.b0", (1, 4)),
            ("gamma.w1", (4, 2)),
            ("gamma.b1", (1, 2)),
            ("phi.w0", (4, 4)),
            ("phi.b0", (1, 4)),
            ("phi.w1", (4, 2)),
        ] {
            params.insert(format!("gnode.{name}"), Tensor::zeros(r, c));
        }
        params.insert("gnode.phi.b1", Tensor::from_rows(&[[0.5, -1.5]]).unwrap());
        let h = random_state(3, 2, 4);
        let out = eval_rhs(&dynamics, &params, &g, &h);
        assert_eq!(out.row(0), &[1.0, -3.0]);
        assert_eq!(out.row(1), &[0.5, -1.5]);
    }

    #[test]
    fn empty_graph_reduces_to_self_dynamics() {
        let (dynamics, params) = random_model(3, 5, 1);
        let g = NetworkGraph::new(4, []).unwrap();
        let h = random_state(4, 3, 2);
        let out = eval_rhs(&dynamics, &params, &g, &h);
        for i in 0..4 {
            let expect = mlp_row(&params, "gnode.gamma", h.row(i));
            for (a, b) in out.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_double_loop_over_edge_list() {
        let (dynamics, params) = random_model(3, 6, 7);
        let g = NetworkGraph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]).unwrap();
        let h = random_state(5, 3, 8);
        let out = eval_rhs(&dynamics, &params, &g, &h);
        let a = g.adjacency();
        for i in 0..5 {
            let mut expect = mlp_row(&params, "gnode.gamma", h.row(i));
            for j in 0..5 {
                if a.get(i, j) == 1.0 {
                    let pair: Vec<f64> = h.row(i).iter().chain(h.row(j)).copied().collect();
                    for (e, m) in expect.iter_mut().zip(mlp_row(&params, "gnode.phi", &pair)) {
                        *e += m;
                    }
                }
            }
            for (x, y) in out.row(i).iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "node {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let (dynamics, params) = random_model(3, 4, 1);
        let g = NetworkGraph::new(2, [(0, 1)]).unwrap();
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
        assert!(vars.hidden_rhs(tape.constant(Tensor::zeros(2, 4))).is_err());
    }

    #[test]
    fn empty_interval_returns_input() {
        let (dynamics, params) = random_model(2, 4, 1);
        let g = NetworkGraph::paper8();
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
        let h0 = tape.constant(random_state(8, 2, 3));
        let out = vars.solve(h0, 1.5, 1.5, &SolverConfig::default()).unwrap();
        assert_eq!(out.value(), h0.value());
        assert!(vars.solve(h0, 1.5, 1.0, &SolverConfig::default()).is_err());
    }

    #[test]
    fn zero_field_keeps_state() {
        let (dynamics, mut params) = random_model(2, 4, 1);
        params.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        let g = NetworkGraph::paper8();
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
        let h0 = tape.constant(random_state(8, 2, 3));
        let out = vars.solve(h0, 0.0, 2.0, &SolverConfig::default()).unwrap();
        assert_eq!(out.value(), h0.value());
    }

    #[test]
    fn rigged_linear_field_matches_exponential() {
        // gamma(h) = (lambda / eps) * tanh(eps * h) ~ lambda * h
        let (eps, lambda) = (1e-4, -1.0);
        let dynamics = GnodeDynamics::new("gnode", 1, 1);
        let mut params = ParamSet::new();
        params.insert("gnode.gamma.w0", Tensor::scalar(eps));
        params.insert("gnode.gamma.b0", Tensor::scalar(0.0));
        params.insert("gnode.gamma.w1", Tensor::scalar(lambda / eps));
        params.insert("gnode.gamma.b1", Tensor::scalar(0.0));
        for (n, r) in [("w0", 2), ("b0", 1), ("w1", 1), ("b1", 1)] {
            params.insert(format!("gnode.phi.{n}"), Tensor::zeros(r, 1));
        }
        let g = NetworkGraph::new(1, []).unwrap();
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
        let h0 = tape.constant(Tensor::scalar(0.8));
        let out = vars.solve(h0, 0.0, 1.0, &SolverConfig { step_max: 0.01 }).unwrap();
        assert!((out.item() - 0.8 * (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn solves_compose_when_substeps_align() {
        let (dynamics, params) = random_model(3, 5, 11);
        let g = NetworkGraph::paper8();
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
        let h0 = tape.constant(random_state(8, 3, 12));
        let cfg = SolverConfig { step_max: 0.1 };
        let mid = vars.solve(h0, 0.0, 1.0, &cfg).unwrap();
        let two = vars.solve(mid, 1.0, 2.0, &cfg).unwrap();
        let direct = vars.solve(h0, 0.0, 2.0, &cfg).unwrap();
        assert!(two.value().max_abs_diff(&direct.value()) < 1e-8);
    }

    #[test]
    fn isolated_node_ignores_other_states() {
        let (dynamics, params) = random_model(2, 4, 5);
        let g = NetworkGraph::new(4, [(1, 2), (2, 3)]).unwrap();
        let run = |h: &Tensor| {
            let tape = Tape::new();
            let b = params.bind(&tape);
            let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
            vars.solve(tape.constant(h.clone()), 0.0, 1.0, &SolverConfig::default()).unwrap().value()
        };
        let h = random_state(4, 2, 6);
        let mut perturbed = h.clone();
        for r in 1..4 {
            for c in 0..2 {
                perturbed.set(r, c, perturbed.get(r, c) + 0.7);
            }
        }
        let (a, b) = (run(&h), run(&perturbed));
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn per_row_spans_match_individual_solves() {
        let (dynamics, params) = random_model(2, 4, 21);
        let g = NetworkGraph::new(2, [(0, 1)]).unwrap();
        let cfg = SolverConfig { step_max: 0.05 };
        let h = random_state(2, 2, 22);
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index().replicate(2)).unwrap();
        let stacked = Tensor::vstack(&[h.clone(), h.clone()]).unwrap();
        // Both blocks use 10 substeps: 0.5 / 10 and 0.25 / 10.
        let out = vars.solve_rows(tape.constant(stacked), &[0.5, 0.5, 0.25, 0.25], &cfg).unwrap().value();
        let single = |t1: f64| {
            let tape = Tape::new();
            let b = params.bind(&tape);
            let v = dynamics.bind(&b, &g.edge_index()).unwrap();
            v.solve(tape.constant(h.clone()), 0.0, t1, &SolverConfig { step_max: t1 / 10.0 }).unwrap().value()
        };
        assert!(out.row_block(0, 2).max_abs_diff(&single(0.5)) < 1e-14);
        assert!(out.row_block(2, 2).max_abs_diff(&single(0.25)) < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (dynamics, params) = random_model(4, 5, 31);
        let g = NetworkGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let cfg = SolverConfig { step_max: 0.1 };
        let h0 = random_state(3, 4, 32);
        let objective = |p: &ParamSet, h: &Tensor| {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
            vars.solve(tape.constant(h.clone()), 0.0, 0.3, &cfg).unwrap().sum().unwrap().item()
        };
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = dynamics.bind(&b, &g.edge_index()).unwrap();
        let h_var = tape.leaf(&h0.clone().with_grad());
        let loss = vars.solve(h_var, 0.0, 0.3, &cfg).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = params.clone();
        analytic.absorb(&grads, &b).unwrap();

        let eps = 1e-6;
        let check = |a: f64, fd: f64| {
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-5, "analytic {a} vs fd {fd}");
        };
        let dh = grads.get(&h_var).unwrap();
        for k in 0..h0.len() {
            let (mut up, mut down) = (h0.clone(), h0.clone());
            up.data_mut()[k] += eps;
            down.data_mut()[k] -= eps;
            check(dh.data()[k], (objective(&params, &up) - objective(&params, &down)) / (2.0 * eps));
        }
        for (name, t) in analytic.iter() {
            for k in 0..t.len() {
                let (mut up, mut down) = (params.clone(), params.clone());
                up.get_mut(name).unwrap().data_mut()[k] += eps;
                down.get_mut(name).unwrap().data_mut()[k] -= eps;
                let fd = (objective(&up, &h0) - objective(&down, &h0)) / (2.0 * eps);
                check(t.grad().unwrap()[k], fd);
            }
        }
    }
}

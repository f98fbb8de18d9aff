//! Prediction network: a graph neural ODE over the observable state,
//! trained one step at a time on imputed trajectories with weights that
//! decay away from the observations, then rolled out freely.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, Bound, ParamSet, Tape, Tensor, Var};
use crate::gnode::{GnodeDynamics, SolverConfig};
use crate::graph::NetworkGraph;
use crate::impute::ModelConfig;
use crate::nn::expand_blocks;
use crate::pipeline::{diverged, ImputedTrajectory, Plateau, Standardizer, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PredictModel {
    pub state_dim: usize,
    pub dynamics: GnodeDynamics,
    pub solver: SolverConfig,
    pub init_gain: f64,
}

impl PredictModel {
    /// Parameters live under `pred.gamma.*` and `pred.phi.*`.
    pub fn new(state_dim: usize, config: &ModelConfig) -> Self {
        Self {
            state_dim,
            dynamics: GnodeDynamics::new("pred", state_dim, config.mlp_hidden),
            solver: config.solver,
            init_gain: config.field_init_gain,
        }
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        self.dynamics.init(params, self.init_gain, rng);
    }

    pub fn param_count(&self) -> usize {
        self.dynamics.param_count()
    }
}

/// `beta * exp(-zeta * (t_point - t_obs))`.
///
/// The decay runs in the distance from the preceding observation, so points
/// next to an observation weigh the most.
pub fn sample_weight(t_obs: f64, t_point: f64, beta: f64, zeta: f64) -> Result<f64> {
    if t_point < t_obs {
        return Err(Error::Argument(format!("point {t_point} precedes its observation {t_obs}")));
    }
    if !(0.0..=1.0).contains(&beta) || !(zeta >= 0.0) {
        return Err(Error::Argument(format!("need beta in [0, 1] and zeta >= 0, got {beta}, {zeta}")));
    }
    Ok(beta * (-zeta * (t_point - t_obs)).exp())
}

/// One-step transition between consecutive grid points.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample {
    pub t_from: f64,
    pub t_to: f64,
    pub x_from: Tensor,
    pub x_target: Tensor,
    pub weight: f64,
}

/// One sample per consecutive pair of grid points, weighted at the target.
/// Pairs whose weight would be zero are dropped.
pub fn build_weighted_samples(imputed: &ImputedTrajectory, zeta: f64) -> Result<Vec<WeightedSample>> {
    let mut out = Vec::with_capacity(imputed.len().saturating_sub(1));
    for k in 1..imputed.len() {
        let weight = sample_weight(imputed.nearest_observation[k], imputed.times[k], imputed.beta[k], zeta)?;
        if weight > 0.0 {
            out.push(WeightedSample {
                t_from: imputed.times[k - 1],
                t_to: imputed.times[k],
                x_from: imputed.values[k - 1].clone(),
                x_target: imputed.values[k].clone(),
                weight,
            });
        }
    }
    Ok(out)
}

/// `sum_s w_s ||solve(x_from) - x_target||^2 / sum_s w_s`, all samples
/// integrated together as disconnected copies of the graph.
pub fn weighted_mse_loss<'t>(
    model: &PredictModel,
    b: &Bound<'t>,
    graph: &NetworkGraph,
    samples: &[WeightedSample],
) -> Result<Var<'t>> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedLoss("sample weights sum to zero".into()));
    }
    let n = graph.n_nodes();
    let edges = graph.edge_index().replicate(samples.len());
    let vars = model.dynamics.bind(b, &edges)?;
    let tape = b.tape();
    let start = Tensor::vstack(&samples.iter().map(|s| s.x_from.clone()).collect::<Vec<_>>())?;
    let target = Tensor::vstack(&samples.iter().map(|s| s.x_target.clone()).collect::<Vec<_>>())?;
    let spans: Vec<f64> = samples.iter().map(|s| s.t_to - s.t_from).collect();
    let pred = vars.solve_rows(tape.constant(start), &expand_blocks(&spans, n), &model.solver)?;
    let diff = pred.sub(tape.constant(target))?;
    let weights: Vec<f64> = samples.iter().map(|s| s.weight / total).collect();
    Ok(diff.hadamard(diff)?.scale_rows(expand_blocks(&weights, n))?.sum()?)
}

fn standardized(samples: &[WeightedSample], std: &Standardizer) -> Vec<WeightedSample> {
    samples
        .iter()
        .map(|s| WeightedSample { x_from: std.forward(&s.x_from), x_target: std.forward(&s.x_target), ..s.clone() })
        .collect()
}

/// Minibatch Adam on the weighted one-step loss (samples in original units,
/// trained in standardized units). Returns the weighted mean loss per epoch.
pub fn train_predict(
    model: &PredictModel,
    params: &mut ParamSet,
    graph: &NetworkGraph,
    standardizer: &Standardizer,
    samples: &[WeightedSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    let samples = standardized(samples, standardizer);
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, params);
    let mut plateau = Plateau::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<WeightedSample> = chunk.iter().map(|&k| samples[k].clone()).collect();
            let share: f64 = batch.iter().map(|s| s.weight).sum::<f64>() / total;
            if share == 0.0 {
                continue;
            }
            params.zero_grad();
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let loss = weighted_mse_loss(model, &bound, graph, &batch).map_err(|e| diverged(e, epoch))?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Training { epoch });
            }
            let grads = tape.backward(loss)?;
            params.absorb(&grads, &bound)?;
            if !params.clip_grad_norm(cfg.clip).is_finite() {
                return Err(Error::Training { epoch });
            }
            adam.step(params)?;
            if !params.is_finite() {
                return Err(Error::Training { epoch });
            }
            epoch_loss += value * share;
        }
        history.push(epoch_loss);
        plateau.observe(epoch_loss, cfg, &mut adam);
    }
    Ok(history)
}

/// Free-running integration from `x_start` at `t_start` (original units),
/// reported at every `grid` time.
pub fn rollout(
    model: &PredictModel,
    params: &ParamSet,
    graph: &NetworkGraph,
    standardizer: &Standardizer,
    x_start: &Tensor,
    t_start: f64,
    grid: &[f64],
) -> Result<Vec<Tensor>> {
    if grid.first().is_some_and(|&t| t < t_start) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("rollout grid must be increasing and start at or after t_start".into()));
    }
    if x_start.shape() != (graph.n_nodes(), model.state_dim) {
        return Err(Error::Shape(format!("rollout start {:?} for {} nodes, d={}", x_start.shape(), graph.n_nodes(), model.state_dim)));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let vars = model.dynamics.bind(&bound, &graph.edge_index())?;
    let mut x = tape.constant(standardizer.forward(x_start));
    let mut t = t_start;
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        x = vars.solve(x, t, g, &model.solver)?;
        t = g;
        let v = x.value();
        if !v.is_finite() {
            return Err(Error::Divergence { time: g });
        }
        out.push(standardizer.inverse(&v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Origin;
    use proptest::prelude::*;
    use rand::Rng;

    fn model(hidden: usize) -> PredictModel {
        PredictModel::new(2, &ModelConfig { mlp_hidden: hidden, ..ModelConfig::default() })
    }

    fn params_for(m: &PredictModel, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        m.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    fn zeroed(m: &PredictModel) -> ParamSet {
        let mut p = params_for(m, 0);
        p.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        p
    }

    fn imputed(times: &[f64], obs: &[bool], beta: f64, seed: u64) -> ImputedTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last = times[0];
        let mut nearest = Vec::new();
        for (&t, &o) in times.iter().zip(obs) {
            if o {
                last = t;
            }
            nearest.push(last);
        }
        ImputedTrajectory {
            times: times.to_vec(),
            values: times.iter().map(|_| Tensor::from_fn(8, 2, |_, _| rng.random_range(-2.0..2.0))).collect(),
            origin: times.iter().map(|_| vec![Origin::Imputed; 16]).collect(),
            beta: vec![beta; times.len()],
            nearest_observation: nearest,
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(sample_weight(1.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((sample_weight(0.0, 2f64.ln(), 0.75, 1.0).unwrap() - 0.375).abs() < 1e-12);
        assert_eq!(sample_weight(0.0, 5.0, 0.6, 0.0).unwrap(), 0.6);
        assert!(sample_weight(2.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn samples_at_observations_carry_beta() {
        let times = [0.0, 0.3, 0.5];
        let s = build_weighted_samples(&imputed(&times, &[true; 3], 0.7, 1), 1.0).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|w| w.weight == 0.7));
        let full = build_weighted_samples(&imputed(&times, &[true; 3], 1.0, 1), 1.0).unwrap();
        assert!(full.iter().all(|w| w.weight == 1.0));
    }

    #[test]
    fn weights_decay_between_observations() {
        let times: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let obs: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
        let s = build_weighted_samples(&imputed(&times, &obs, 0.9, 2), 1.0).unwrap();
        for k in 1..s.len() {
            if !obs[k + 1] {
                assert!(s[k].weight <= s[k - 1].weight || obs[k]);
            }
            assert!(s[k].weight > 0.0 && s[k].weight <= 1.0);
        }
    }

    fn loss_value(m: &PredictModel, p: &ParamSet, s: &[WeightedSample]) -> f64 {
        let tape = Tape::new();
        let b = p.bind(&tape);
        weighted_mse_loss(m, &b, &crate::graph::NetworkGraph::paper8(), s).unwrap().item()
    }

    #[test]
    fn loss_examples() {
        let m = model(8);
        let p = params_for(&m, 3);
        let samples = build_weighted_samples(&imputed(&[0.0, 0.1, 0.35, 0.4], &[true, false, false, true], 0.8, 3), 1.0).unwrap();

        let zero = zeroed(&m);
        let still: Vec<_> = samples.iter().map(|s| WeightedSample { x_target: s.x_from.clone(), ..s.clone() }).collect();
        assert_eq!(loss_value(&m, &zero, &still), 0.0);

        let equal: Vec<_> = samples.iter().map(|s| WeightedSample { weight: 0.5, ..s.clone() }).collect();
        let singles: Vec<f64> = equal.iter().map(|s| loss_value(&m, &p, std::slice::from_ref(s))).collect();
        let mean = singles.iter().sum::<f64>() / singles.len() as f64;
        assert!((loss_value(&m, &p, &equal) - mean).abs() < 1e-12);

        let doubled: Vec<_> = samples.iter().map(|s| WeightedSample { weight: 2.0 * s.weight, ..s.clone() }).collect();
        assert!((loss_value(&m, &p, &doubled) - loss_value(&m, &p, &samples)).abs() < 1e-12);

        let tape = Tape::new();
        let b = p.bind(&tape);
        let g = crate::graph::NetworkGraph::paper8();
        let none: Vec<_> = samples.iter().map(|s| WeightedSample { weight: 0.0, ..s.clone() }).collect();
        assert!(matches!(weighted_mse_loss(&m, &b, &g, &none), Err(Error::UndefinedLoss(_))));
    }

    fn truth_samples() -> (crate::dynamics::Dataset, Vec<WeightedSample>) {
        use crate::dynamics::{make_dataset, ExperimentConfig};
        let ds = make_dataset(&ExperimentConfig { n_trajectories: 4, n_grid: 40, sim_step: 1e-2, ..ExperimentConfig::paper8() }).unwrap();
        let mut samples = Vec::new();
        for tr in ds.train_truth() {
            let n = 40;
            let traj = ImputedTrajectory {
                times: tr.times[..n].to_vec(),
                values: tr.states[..n].to_vec(),
                origin: vec![vec![Origin::Observed; 16]; n],
                beta: vec![1.0; n],
                nearest_observation: tr.times[..n].to_vec(),
            };
            samples.extend(build_weighted_samples(&traj, 0.0).unwrap());
        }
        (ds, samples)
    }

    #[test]
    fn training_descends_deterministically_and_unit_weights_match() {
        let (ds, samples) = truth_samples();
        assert!(samples.iter().all(|s| s.weight == 1.0));
        let m = model(16);
        let std = Standardizer::fit(&ds.train).unwrap();
        let cfg = TrainConfig { epochs: 20, batch: 32, ..TrainConfig::default() };
        let run = |s: &[WeightedSample]| {
            let mut p = params_for(&m, 5);
            let h = train_predict(&m, &mut p, &ds.graph, &std, s, &cfg).unwrap();
            (h, p)
        };
        let (h1, p1) = run(&samples);
        let (h2, p2) = run(&samples);
        assert_eq!(h1, h2);
        assert!(h1.iter().all(|v| v.is_finite()));
        assert!(h1[19] < h1[0], "{h1:?}");
        for ((_, a), (_, b)) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.data(), b.data());
        }
        let ones: Vec<_> = samples.iter().map(|s| WeightedSample { weight: 1.0, ..s.clone() }).collect();
        assert_eq!(run(&ones).0, h1);
    }

    #[test]
    fn rollout_examples() {
        let m = model(8);
        let g = crate::graph::NetworkGraph::paper8();
        let std = Standardizer { mean: vec![0.5, -1.0], std: vec![2.0, 3.0] };
        let x0 = Tensor::from_fn(8, 2, |r, c| r as f64 - c as f64);
        let still = rollout(&m, &zeroed(&m), &g, &std, &x0, 1.0, &[1.5, 2.0, 4.0]).unwrap();
        assert!(still.iter().all(|x| x.max_abs_diff(&x0) < 1e-12));
        let p = params_for(&m, 7);
        let same = rollout(&m, &p, &g, &std, &x0, 1.0, &[1.0]).unwrap();
        assert!(same[0].max_abs_diff(&x0) < 1e-12);
        assert!(rollout(&m, &p, &g, &std, &x0, 1.0, &[0.5]).is_err());

        let whole = rollout(&m, &p, &g, &std, &x0, 0.0, &[0.5, 1.0, 1.7]).unwrap();
        let first = rollout(&m, &p, &g, &std, &x0, 0.0, &[0.5, 1.0]).unwrap();
        let rest = rollout(&m, &p, &g, &std, &first[1], 1.0, &[1.7]).unwrap();
        assert!(rest[0].max_abs_diff(&whole[2]) < 1e-8);
    }

    #[test]
    fn blow_up_reports_time() {
        let m = PredictModel::new(2, &ModelConfig { mlp_hidden: 1, ..ModelConfig::default() });
        let mut p = zeroed(&m);
        // A constant drift of 1e307 per unit time overflows before t = 200.
        p.insert("pred.gamma.b1", Tensor::full(1, 2, 1e307));
        let g = crate::graph::NetworkGraph::paper8();
        let out = rollout(&m, &p, &g, &Standardizer::identity(2), &Tensor::zeros(8, 2), 0.0, &[0.5, 1.0, 200.0]);
        assert!(matches!(out, Err(Error::Divergence { .. })), "{out:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weights_are_bounded_and_exact_at_observations(
            beta in 0.01f64..=1.0,
            zeta in 0.0f64..5.0,
            gaps in prop::collection::vec(0.01f64..0.5, 2..20),
            every in 1usize..6,
        ) {
            let mut times = vec![0.0];
            for g in &gaps {
                times.push(times.last().unwrap() + g);
            }
            let obs: Vec<bool> = (0..times.len()).map(|i| i % every == 0).collect();
            let traj = imputed(&times, &obs, beta, 4);
            let s = build_weighted_samples(&traj, zeta).unwrap();
            for (k, w) in s.iter().enumerate() {
                prop_assert!(w.weight > 0.0 && w.weight <= 1.0);
                if obs[k + 1] {
                    prop_assert_eq!(w.weight, beta);
                } else {
                    prop_assert!(w.weight <= beta);
                }
            }
        }

        #[test]
        fn loss_ignores_a_common_weight_factor(c in 0.01f64..100.0, seed in 0u64..1000) {
            let m = model(4);
            let p = params_for(&m, seed);
            let samples = build_weighted_samples(&imputed(&[0.0, 0.2, 0.3, 0.6], &[true, false, true, false], 0.6, seed), 1.0).unwrap();
            let scaled: Vec<_> = samples.iter().map(|s| WeightedSample { weight: c * s.weight, ..s.clone() }).collect();
            let (a, b) = (loss_value(&m, &p, &samples), loss_value(&m, &p, &scaled));
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

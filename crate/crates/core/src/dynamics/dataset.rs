use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampling::{apply_feature_mask, sample_observation_times, SamplingMode};
use super::simulate::{integrate, CouplingTarget, CubicOscillator2d, GroundTruthTrajectory};
use crate::autodiff::Tensor;
use crate::graph::{check_permutation, NetworkGraph};
use crate::{Error, Result};

pub const DATA_VERSION: &str = "netdyn-data-v1";

/// Parameters of a synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: NetworkGraph,
    /// End of the observed window; observations live in `[0, t_train]`.
    pub t_train: f64,
    /// Length of the extrapolation window after `t_train`.
    pub t_extrap: f64,
    pub n_grid: usize,
    pub n_grid_extrap: usize,
    /// Fraction of grid timestamps kept as observations.
    pub p_obs: f64,
    /// Fraction of feature entries deleted at each observation.
    pub p_miss: f64,
    pub n_trajectories: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
    /// Initial conditions are uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    pub sim_step: f64,
    pub coupling: CouplingTarget,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::paper8()
    }
}

impl ExperimentConfig {
    pub fn paper8() -> Self {
        Self {
            graph: NetworkGraph::paper8(),
            t_train: 10.0,
            t_extrap: 10.0,
            n_grid: 100,
            n_grid_extrap: 100,
            p_obs: 0.5,
            p_miss: 0.3,
            n_trajectories: 100,
            train_fraction: 0.7,
            seed: 0,
            sampling: SamplingMode::UniformSubset,
            init_range: 2.0,
            sim_step: 1e-3,
            coupling: CouplingTarget::First,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if !(self.p_obs > 0.0 && self.p_obs <= 1.0) {
            return bad(format!("p_obs must be in (0, 1], got {}", self.p_obs));
        }
        if !(0.0..1.0).contains(&self.p_miss) {
            return bad(format!("p_miss must be in [0, 1), got {}", self.p_miss));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must be in (0, 1], got {}", self.train_fraction));
        }
        if self.n_grid < 2 {
            return bad(format!("n_grid must be at least 2, got {}", self.n_grid));
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be positive".into());
        }
        if !(self.t_train > 0.0) || !(self.t_extrap >= 0.0) {
            return bad("horizons must be positive".into());
        }
        if !(self.init_range > 0.0) || !(self.sim_step > 0.0) {
            return bad("init_range and sim_step must be positive".into());
        }
        if (self.p_obs * self.n_grid as f64).round() < 2.0 {
            return bad(format!("p_obs = {} keeps fewer than 2 of {} grid points", self.p_obs, self.n_grid));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        (self.train_fraction * self.n_trajectories as f64).round() as usize
    }
}

/// Irregular, partially observed samples of one trajectory.
///
/// Entries of `states` where the mask is 0 are carried along but must never
/// be read by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl ObservationSeries {
    pub fn new(times: Vec<f64>, states: Vec<Tensor>, masks: Vec<Tensor>) -> Result<Self> {
        let s = Self { times, states, masks };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::Argument("observation series is empty".into()));
        }
        if self.states.len() != self.times.len() || self.masks.len() != self.times.len() {
            return Err(Error::Shape("times, states and masks differ in length".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("observation times must be strictly increasing".into()));
        }
        let shape = self.states[0].shape();
        for (s, m) in self.states.iter().zip(&self.masks) {
            if s.shape() != shape || m.shape() != shape {
                return Err(Error::Shape(format!("state/mask shapes {:?}/{:?} differ from {shape:?}", s.shape(), m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract("masks must be binary".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.states[0].rows()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].cols()
    }

    /// Observed fraction of the features at step `i`.
    pub fn beta(&self, i: usize) -> f64 {
        self.masks[i].sum() / self.masks[i].len() as f64
    }

    pub fn observed_count(&self) -> f64 {
        self.masks.iter().map(Tensor::sum).sum()
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_nodes())?;
        let p = |t: &Tensor| permute_rows(t, perm);
        Ok(Self {
            times: self.times.clone(),
            states: self.states.iter().map(p).collect(),
            masks: self.masks.iter().map(p).collect(),
        })
    }
}

/// Row `i` of `t` moves to row `perm[i]`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), t.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.data_mut()[p * t.cols()..(p + 1) * t.cols()].copy_from_slice(t.row(i));
    }
    out
}

/// Simulated experiment: observation series plus the ground truth they
/// were drawn from. `truth[k]` belongs to `train[k]` for `k < n_train`
/// and to `test[k - n_train]` afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: NetworkGraph,
    pub state_dim: usize,
    pub grid_horizon: f64,
    pub extrap_horizon: f64,
    pub train: Vec<ObservationSeries>,
    pub test: Vec<ObservationSeries>,
    pub truth: Vec<GroundTruthTrajectory>,
}

impl Dataset {
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.test.is_empty() {
            w.push("test split is empty".to_string());
        }
        w
    }

    pub fn test_truth(&self) -> &[GroundTruthTrajectory] {
        if self.truth.is_empty() {
            &[]
        } else {
            &self.truth[self.train.len()..]
        }
    }

    pub fn train_truth(&self) -> &[GroundTruthTrajectory] {
        if self.truth.is_empty() {
            &[]
        } else {
            &self.truth[..self.train.len()]
        }
    }

    pub fn to_file(&self) -> DatasetFile {
        let nested = |t: &Tensor| t.to_rows();
        DatasetFile {
            version: DATA_VERSION.to_string(),
            n_nodes: self.graph.n_nodes(),
            state_dim: self.state_dim,
            edges: self.graph.edges().iter().map(|&(s, d)| [s, d]).collect(),
            grid_horizon: self.grid_horizon,
            extrap_horizon: self.extrap_horizon,
            n_train: self.train.len(),
            trajectories: self
                .train
                .iter()
                .chain(&self.test)
                .map(|s| SeriesRecord {
                    times: s.times.clone(),
                    states: s.states.iter().map(nested).collect(),
                    masks: s.masks.iter().map(nested).collect(),
                })
                .collect(),
            truth: (!self.truth.is_empty()).then(|| {
                self.truth
                    .iter()
                    .map(|t| TruthRecord { times: t.times.clone(), states: t.states.iter().map(nested).collect() })
                    .collect()
            }),
        }
    }

    pub fn from_file(file: DatasetFile) -> Result<Self> {
        if file.version != DATA_VERSION {
            return Err(Error::Format(format!("expected version {DATA_VERSION}, found `{}`", file.version)));
        }
        let graph = NetworkGraph::new(file.n_nodes, file.edges.iter().map(|e| (e[0], e[1])))?;
        let shape = (file.n_nodes, file.state_dim);
        let tensor = |rows: &Vec<Vec<f64>>| -> Result<Tensor> {
            let t = Tensor::from_rows(rows)?;
            if t.shape() != shape {
                return Err(Error::Format(format!("state of shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        if file.n_train > file.trajectories.len() {
            return Err(Error::Format("n_train exceeds trajectory count".into()));
        }
        let mut series = Vec::with_capacity(file.trajectories.len());
        for rec in &file.trajectories {
            let states = rec.states.iter().map(tensor).collect::<Result<Vec<_>>>()?;
            let masks = rec.masks.iter().map(tensor).collect::<Result<Vec<_>>>()?;
            series.push(ObservationSeries::new(rec.times.clone(), states, masks)?);
        }
        let truth = match &file.truth {
            None => Vec::new(),
            Some(recs) => {
                if recs.len() != series.len() {
                    return Err(Error::Format("truth and trajectory counts differ".into()));
                }
                recs.iter()
                    .map(|r| {
                        Ok(GroundTruthTrajectory {
                            times: r.times.clone(),
                            states: r.states.iter().map(tensor).collect::<Result<Vec<_>>>()?,
                            rhs: CubicOscillator2d::NAME.to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let test = series.split_off(file.n_train);
        Ok(Self {
            graph,
            state_dim: file.state_dim,
            grid_horizon: file.grid_horizon,
            extrap_horizon: file.extrap_horizon,
            train: series,
            test,
            truth,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_string(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_string(path)?;
        Self::from_file(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: String,
    pub n_nodes: usize,
    pub state_dim: usize,
    pub edges: Vec<[usize; 2]>,
    pub grid_horizon: f64,
    #[serde(default)]
    pub extrap_horizon: f64,
    pub n_train: usize,
    pub trajectories: Vec<SeriesRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<TruthRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub times: Vec<f64>,
    pub states: Vec<Vec<Vec<f64>>>,
    pub masks: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub times: Vec<f64>,
    pub states: Vec<Vec<Vec<f64>>>,
}

/// Independent RNG stream for one purpose of one trajectory.
pub(crate) fn stream(seed: u64, trajectory: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trajectory as u64 * 8 + purpose);
    rng
}

const STREAM_TRUTH: u64 = 0;
const STREAM_TIMES: u64 = 1;
const STREAM_MASKS: u64 = 2;

/// `count` distinct sorted uniform draws from `(lo, hi]` (`[lo, hi]` when
/// `closed_low`).
fn sorted_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64, count: usize, closed_low: bool) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(count);
    while out.len() < count {
        let t = rng.random_range(lo..=hi);
        if (!closed_low && t <= lo) || out.contains(&t) {
            continue;
        }
        out.push(t);
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Simulates one ground-truth trajectory from a random initial condition.
pub fn simulate_trajectory(config: &ExperimentConfig, index: usize) -> Result<GroundTruthTrajectory> {
    let mut rng = stream(config.seed, index, STREAM_TRUTH);
    let n = config.graph.n_nodes();
    let r = config.init_range;
    let x0 = Tensor::from_fn(n, 2, |_, _| rng.random_range(-r..=r));
    let mut grid = sorted_uniform(&mut rng, 0.0, config.t_train, config.n_grid, true);
    if config.t_extrap > 0.0 && config.n_grid_extrap > 0 {
        let hi = config.t_train + config.t_extrap;
        grid.extend(sorted_uniform(&mut rng, config.t_train, hi, config.n_grid_extrap, false));
    }
    let field = CubicOscillator2d::new(config.graph.clone(), config.coupling);
    integrate(&field, &x0, 0.0, &grid, config.sim_step)
}

/// Simulates, samples, masks and splits a full experiment.
pub fn make_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    config.validate()?;
    let built: Vec<(ObservationSeries, GroundTruthTrajectory)> = (0..config.n_trajectories)
        .into_par_iter()
        .map(|k| {
            let truth = simulate_trajectory(config, k)?;
            let idx = sample_observation_times(
                &truth.times[..config.n_grid],
                config.p_obs,
                config.sampling,
                &mut stream(config.seed, k, STREAM_TIMES),
            )?;
            let times: Vec<f64> = idx.iter().map(|&i| truth.times[i]).collect();
            let states: Vec<Tensor> = idx.iter().map(|&i| truth.states[i].clone()).collect();
            let masks = apply_feature_mask(&states, config.p_miss, &mut stream(config.seed, k, STREAM_MASKS))?;
            Ok((ObservationSeries::new(times, states, masks)?, truth))
        })
        .collect::<Result<_>>()?;
    let (mut train, truth): (Vec<_>, Vec<_>) = built.into_iter().unzip();
    let test = train.split_off(config.n_train());
    Ok(Dataset {
        graph: config.graph.clone(),
        state_dim: 2,
        grid_horizon: config.t_train,
        extrap_horizon: config.t_extrap,
        train,
        test,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig { n_trajectories: 10, ..ExperimentConfig::paper8() }
    }

    #[test]
    fn paper_split_is_seventy_thirty() {
        let cfg = ExperimentConfig { n_grid: 20, n_grid_extrap: 5, sim_step: 1e-2, ..ExperimentConfig::paper8() };
        let ds = make_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 70);
        assert_eq!(ds.test.len(), 30);
        assert_eq!(ds.truth.len(), 100);
        assert!(ds.warnings().is_empty());
    }

    #[test]
    fn full_split_warns_about_empty_test_set() {
        let ds = make_dataset(&ExperimentConfig { train_fraction: 1.0, ..small() }).unwrap();
        assert!(ds.test.is_empty());
        assert_eq!(ds.warnings().len(), 1);
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let a = make_dataset(&small()).unwrap().to_json().unwrap();
        let b = make_dataset(&small()).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = make_dataset(&ExperimentConfig { seed: 1, ..small() }).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn file_round_trip_is_exact() {
        let ds = make_dataset(&small()).unwrap();
        let back = Dataset::from_file(serde_json::from_str(&ds.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truth_is_independent_of_sampling_knobs() {
        let a = make_dataset(&ExperimentConfig { p_obs: 0.2, ..small() }).unwrap();
        let b = make_dataset(&ExperimentConfig { p_obs: 0.5, p_miss: 0.1, ..small() }).unwrap();
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn no_corruption_keeps_full_grid() {
        let cfg = ExperimentConfig { p_obs: 1.0, p_miss: 0.0, ..small() };
        let ds = make_dataset(&cfg).unwrap();
        for (s, t) in ds.train.iter().zip(&ds.truth) {
            assert_eq!(s.times, t.times[..cfg.n_grid]);
            assert!(s.masks.iter().all(|m| m.data().iter().all(|&v| v == 1.0)));
        }
    }

    #[test]
    fn observations_copy_truth_and_grids_are_in_range() {
        let cfg = small();
        let ds = make_dataset(&cfg).unwrap();
        for (s, t) in ds.train.iter().zip(&ds.truth) {
            assert_eq!(s.len(), 50);
            assert_eq!(s.times[0], t.times[0]);
            assert!(t.times[..100].iter().all(|&x| (0.0..=10.0).contains(&x)));
            assert!(t.times[100..].iter().all(|&x| x > 10.0 && x <= 20.0));
            for (time, state) in s.times.iter().zip(&s.states) {
                let k = t.times.iter().position(|x| x == time).unwrap();
                assert_eq!(state, &t.states[k]);
            }
            for m in &s.masks {
                assert_eq!(m.sum(), 12.0);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ExperimentConfig { p_obs: 0.0, ..small() },
            ExperimentConfig { p_miss: 1.0, ..small() },
            ExperimentConfig { n_grid: 1, ..small() },
            ExperimentConfig { train_fraction: 0.0, ..small() },
        ] {
            assert!(make_dataset(&cfg).is_err());
        }
    }

    #[test]
    fn initial_conditions_give_bounded_nondegenerate_trajectories() {
        // Boundedness sweep over the initial-condition box.
        let cfg = ExperimentConfig { n_grid: 50, n_grid_extrap: 50, sim_step: 5e-3, ..ExperimentConfig::paper8() };
        for k in 0..100 {
            let tr = simulate_trajectory(&cfg, k).unwrap();
            let max = tr.states.iter().flat_map(|s| s.data().iter().map(|v| v.abs())).fold(0.0, f64::max);
            let first = &tr.states[0];
            let spread = tr.states.iter().map(|s| s.max_abs_diff(first)).fold(0.0, f64::max);
            assert!(max < 30.0, "trajectory {k} reaches {max}");
            assert!(spread > 0.5, "trajectory {k} barely moves");
        }
    }

    #[test]
    fn permuted_series_moves_rows() {
        let ds = make_dataset(&small()).unwrap();
        let s = &ds.train[0];
        let perm = [7, 6, 5, 4, 3, 2, 1, 0];
        let p = s.permuted(&perm).unwrap();
        assert_eq!(p.states[3].row(7), s.states[3].row(0));
        assert_eq!(p.masks[3].row(0), s.masks[3].row(7));
    }
}

//! Evaluation against ground truth and the method × fraction × seed
//! benchmark grid.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::dynamics::{make_dataset, Dataset, ExperimentConfig, ObservationSeries};
use crate::gnode::SolverConfig;
use crate::impute::ModelConfig;
use crate::methods::{Registry, TrainContext, Trained};
use crate::pipeline::TrainConfig;
use crate::{Error, Result};

pub const REPORT_VERSION: &str = "netdyn-report-v1";
pub const EVALUATION_VERSION: &str = "netdyn-eval-v1";
/// Reports carry plain MSE; the customary table multiplies it by 100.
pub const UNITS_NOTE: &str = "MSE in original state units; tables conventionally list values x1e-2 (multiply by 100)";

/// One JSON document driving every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub model: ModelConfig,
    pub impute_train: TrainConfig,
    pub predict_train: TrainConfig,
    pub zeta: f64,
    /// Uniform grid points added to observation times when imputing the
    /// training series for the prediction model.
    pub dense_points: usize,
    pub methods: Vec<String>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Concurrent benchmark cells; `None` defers to `NETDYN_JOBS`, then 1.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::paper8(),
            model: ModelConfig { solver: SolverConfig { step_max: 0.1 }, ..ModelConfig::default() },
            impute_train: TrainConfig { epochs: 120, ..TrainConfig::default() },
            predict_train: TrainConfig { epochs: 30, batch: 128, ..TrainConfig::default() },
            zeta: 1.0,
            dense_points: 100,
            methods: Registry::default().names().into_iter().map(String::from).collect(),
            fractions: vec![0.2, 0.3, 0.5],
            seeds: vec![0, 1, 2, 3, 4],
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.model.validate()?;
        self.impute_train.validate()?;
        self.predict_train.validate()?;
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::Argument(format!("zeta must be finite and non-negative, got {}", self.zeta)));
        }
        if self.methods.is_empty() {
            return Err(Error::Argument("no methods selected".into()));
        }
        let registry = Registry::default();
        for m in &self.methods {
            registry.get(m)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Argument("seeds must be nonempty".into()));
        }
        if self.fractions.is_empty() {
            return Err(Error::Argument("fractions must be nonempty".into()));
        }
        for &f in &self.fractions {
            ExperimentConfig { p_obs: f, ..self.experiment.clone() }.validate()?;
        }
        if self.jobs == Some(0) {
            return Err(Error::Argument("jobs must be positive".into()));
        }
        Ok(())
    }

    pub fn context<'a>(&'a self, ds: &'a Dataset, seed: u64) -> TrainContext<'a> {
        TrainContext {
            graph: &ds.graph,
            state_dim: ds.state_dim,
            horizon: ds.grid_horizon,
            train: &ds.train,
            model: &self.model,
            impute_train: &self.impute_train,
            predict_train: &self.predict_train,
            zeta: self.zeta,
            dense_points: self.dense_points,
            seed,
        }
    }

    /// Resolved worker count.
    pub fn jobs(&self) -> usize {
        self.jobs
            .or_else(|| std::env::var("NETDYN_JOBS").ok().and_then(|v| v.parse().ok()))
            .filter(|&j| j > 0)
            .unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub interpolation: f64,
    pub extrapolation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub version: String,
    pub units: String,
    pub method: String,
    pub param_count: usize,
    pub trajectories: Vec<TrajectoryMetrics>,
    pub interpolation: Summary,
    pub extrapolation: Option<Summary>,
}

/// Mean squared difference over every entry of paired states.
pub fn mse(pred: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?}", p.shape(), t.shape())));
        }
        sum += p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.len();
    }
    Ok(sum / count as f64)
}

/// Interpolation error on every truth point of `[t0, horizon]` and
/// extrapolation error on `(horizon, horizon + extrap]` for each test
/// series. Extrapolation is skipped when `extrapolate` is false or the
/// dataset has no points past the horizon.
pub fn evaluate(trained: &dyn Trained, ds: &Dataset, extrapolate: bool) -> Result<Evaluation> {
    let truth = ds.test_truth();
    if truth.is_empty() || ds.test.is_empty() {
        return Err(Error::Argument("evaluation needs a test split with ground truth".into()));
    }
    let horizon = ds.grid_horizon;
    let mut rows = Vec::with_capacity(ds.test.len());
    for (series, tr) in ds.test.iter().zip(truth) {
        rows.push(evaluate_one(trained, series, &tr.times, &tr.states, horizon, ds.extrap_horizon, extrapolate)?);
    }
    let interp: Vec<f64> = rows.iter().map(|r| r.interpolation).collect();
    let extrap: Vec<f64> = rows.iter().filter_map(|r| r.extrapolation).collect();
    Ok(Evaluation {
        version: EVALUATION_VERSION.to_string(),
        units: UNITS_NOTE.to_string(),
        method: trained.method().to_string(),
        param_count: trained.param_count(),
        interpolation: Summary::of(&interp).expect("test split is nonempty"),
        extrapolation: if extrap.len() == rows.len() { Summary::of(&extrap) } else { None },
        trajectories: rows,
    })
}

fn evaluate_one(
    trained: &dyn Trained,
    series: &ObservationSeries,
    times: &[f64],
    states: &[Tensor],
    horizon: f64,
    extrap: f64,
    extrapolate: bool,
) -> Result<TrajectoryMetrics> {
    let t0 = series.times[0];
    let inside: Vec<usize> = (0..times.len()).filter(|&k| times[k] >= t0 && times[k] <= horizon).collect();
    let grid: Vec<f64> = inside.iter().map(|&k| times[k]).collect();
    let target: Vec<Tensor> = inside.iter().map(|&k| states[k].clone()).collect();
    let interpolation = mse(&trained.impute(series, &grid)?, &target)?;
    let after: Vec<usize> = (0..times.len()).filter(|&k| times[k] > horizon && times[k] <= horizon + extrap).collect();
    let extrapolation = if extrapolate && !after.is_empty() {
        let grid: Vec<f64> = after.iter().map(|&k| times[k]).collect();
        let target: Vec<Tensor> = after.iter().map(|&k| states[k].clone()).collect();
        Some(mse(&trained.extrapolate(series, &grid)?, &target)?)
    } else {
        None
    };
    Ok(TrajectoryMetrics { interpolation, extrapolation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellStatus {
    Ok { interpolation: f64, extrapolation: f64 },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub fraction: f64,
    pub seed: u64,
    /// Seed handed to the method, derived from the dataset seed and cell.
    pub train_seed: u64,
    pub param_count: usize,
    pub dataset_sha256: String,
    pub seconds: f64,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub fraction: f64,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    /// Mean wall-clock seconds of the contributing cells.
    pub seconds: f64,
    pub succeeded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub version: String,
    pub code_version: String,
    pub units: String,
    pub config: RunConfig,
    pub param_counts: Vec<(String, usize)>,
    pub cells: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
}

impl BenchmarkReport {
    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| matches!(c.status, CellStatus::Ok { .. })).count()
    }

    pub fn cell(&self, method: &str, fraction: f64, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.fraction == fraction && c.seed == seed)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["method", "fraction", "split", "metric", "mean", "std", "seconds"]).map_err(csv_err)?;
        for r in &self.aggregate {
            w.write_record([
                r.method.clone(),
                r.fraction.to_string(),
                r.split.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                format!("{:.3}", r.seconds),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seed for cell `index` of the grid belonging to dataset seed `seed`.
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// Runs every (method, fraction, seed) cell of `cfg`. A failing cell is
/// recorded with its reason; `on_cell` sees each result as it finishes.
pub fn run_benchmark(cfg: &RunConfig, on_cell: &(dyn Fn(&CellResult) + Sync)) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let registry = Registry::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs())
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;

    let datasets: Vec<((u64, f64), Result<(Dataset, String)>)> = pool.install(|| {
        let keys: Vec<(u64, f64)> = cfg.seeds.iter().flat_map(|&s| cfg.fractions.iter().map(move |&f| (s, f))).collect();
        keys.into_par_iter()
            .map(|(seed, fraction)| {
                let exp = ExperimentConfig { seed, p_obs: fraction, ..cfg.experiment.clone() };
                let built = make_dataset(&exp).and_then(|ds| {
                    let sha = sha256_hex(ds.to_json()?.as_bytes());
                    Ok((ds, sha))
                });
                ((seed, fraction), built)
            })
            .collect()
    });

    struct Job<'a> {
        method: &'a str,
        fraction: f64,
        seed: u64,
        train_seed: u64,
        data: &'a Result<(Dataset, String)>,
    }
    let mut jobs = Vec::new();
    for (k, ((seed, fraction), data)) in datasets.iter().enumerate() {
        for (m, method) in cfg.methods.iter().enumerate() {
            let index = k * cfg.methods.len() + m;
            jobs.push(Job { method, fraction: *fraction, seed: *seed, train_seed: cell_seed(*seed, index), data });
        }
    }

    let cells: Vec<CellResult> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let method = registry.get(job.method).expect("validated");
                let start = Instant::now();
                let mut cell = CellResult {
                    method: job.method.to_string(),
                    fraction: job.fraction,
                    seed: job.seed,
                    train_seed: job.train_seed,
                    param_count: 0,
                    dataset_sha256: String::new(),
                    seconds: 0.0,
                    status: CellStatus::Failed { reason: String::new() },
                };
                let outcome = match job.data {
                    Err(e) => Err(format!("dataset: {e}")),
                    Ok((ds, sha)) => {
                        cell.dataset_sha256 = sha.clone();
                        cell.param_count = method.param_count(&cfg.model, ds.state_dim, ds.graph.n_nodes());
                        method
                            .train(&cfg.context(ds, job.train_seed))
                            .and_then(|t| evaluate(t.as_ref(), ds, true))
                            .map_err(|e| e.to_string())
                    }
                };
                cell.seconds = start.elapsed().as_secs_f64();
                cell.status = match outcome {
                    Ok(ev) => match ev.extrapolation {
                        Some(x) => CellStatus::Ok { interpolation: ev.interpolation.mean, extrapolation: x.mean },
                        None => CellStatus::Failed { reason: "no extrapolation window in the dataset".into() },
                    },
                    Err(reason) => CellStatus::Failed { reason },
                };
                on_cell(&cell);
                cell
            })
            .collect()
    });

    let param_counts = cfg
        .methods
        .iter()
        .map(|m| {
            let method = registry.get(m).expect("validated");
            (m.clone(), method.param_count(&cfg.model, 2, cfg.experiment.graph.n_nodes()))
        })
        .collect();
    let aggregate = aggregate(cfg, &cells);
    Ok(BenchmarkReport {
        version: REPORT_VERSION.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        units: UNITS_NOTE.to_string(),
        config: cfg.clone(),
        param_counts,
        cells,
        aggregate,
    })
}

fn aggregate(cfg: &RunConfig, cells: &[CellResult]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for method in &cfg.methods {
        for &fraction in &cfg.fractions {
            let ok: Vec<(&CellResult, f64, f64)> = cells
                .iter()
                .filter(|c| &c.method == method && c.fraction == fraction)
                .filter_map(|c| match c.status {
                    CellStatus::Ok { interpolation, extrapolation } => Some((c, interpolation, extrapolation)),
                    CellStatus::Failed { .. } => None,
                })
                .collect();
            let seconds = Summary::of(&ok.iter().map(|c| c.0.seconds).collect::<Vec<_>>()).map_or(0.0, |s| s.mean);
            for (split, pick) in [("interpolation", 0), ("extrapolation", 1)] {
                let values: Vec<f64> = ok.iter().map(|c| if pick == 0 { c.1 } else { c.2 }).collect();
                let s = Summary::of(&values);
                rows.push(AggregateRow {
                    method: method.clone(),
                    fraction,
                    split: split.to_string(),
                    metric: "mse".to_string(),
                    mean: s.map_or(f64::NAN, |s| s.mean),
                    std: s.map_or(f64::NAN, |s| s.std),
                    seconds,
                    succeeded: ok.len(),
                });
            }
        }
    }
    rows
}

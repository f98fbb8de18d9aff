//! Shared recurrent machinery: a model evolves a hidden state between
//! observations and updates it at each observation. The same sweep, loss,
//! training loop and dense-grid output serve every method.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Bound, ParamSet, Tape, Tensor, Var};
use crate::dynamics::ObservationSeries;
use crate::ggru::{combine_imputation, compute_reliability, observed_mask};
use crate::graph::NetworkGraph;
use crate::{Error, Result};

/// What a cell sees at one observation.
pub struct StepInput<'a, 't> {
    pub x_tilde: Var<'t>,
    pub x_obs: &'a Tensor,
    pub mask: &'a Tensor,
    pub reliability: &'a Tensor,
    pub dt: f64,
}

/// A recurrent model bound to one tape.
pub trait BoundCell<'t> {
    /// Fill used at the first observation and the initial hidden state.
    fn start(&self) -> Result<(Var<'t>, Var<'t>)>;
    /// Hidden state after `dt >= 0` time units without observations.
    fn evolve(&self, h: Var<'t>, dt: f64) -> Result<Var<'t>>;
    fn readout(&self, h: Var<'t>) -> Result<Var<'t>>;
    fn update(&self, input: &StepInput<'_, 't>, h: Var<'t>) -> Result<Var<'t>>;
}

/// Parameter layout and binding of a recurrent imputation model.
pub trait Recurrent: Send + Sync {
    fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng);
    fn param_count(&self) -> usize;
    fn bind<'t>(&self, b: &Bound<'t>, graph: &NetworkGraph) -> Result<Box<dyn BoundCell<'t> + 't>>;
}

/// Outputs of one pass over a series.
pub struct Sweep<'t> {
    pub x_hat: Vec<Var<'t>>,
    pub x_tilde: Vec<Var<'t>>,
    /// Hidden state right after each update.
    pub hidden: Vec<Var<'t>>,
    pub alpha: Vec<f64>,
}

/// Reconstruct, combine, update at every observation, evolving the hidden
/// state across the gaps.
pub fn forward_series<'t>(cell: &dyn BoundCell<'t>, series: &ObservationSeries) -> Result<Sweep<'t>> {
    series.validate()?;
    let n = series.len();
    let mut out = Sweep {
        x_hat: Vec::with_capacity(n),
        x_tilde: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
    };
    let (fill, mut h) = cell.start()?;
    let mut alpha = 0.0;
    for i in 0..n {
        let dt = if i == 0 { 0.0 } else { series.times[i] - series.times[i - 1] };
        let x_hat = if i == 0 {
            fill
        } else {
            h = cell.evolve(h, dt)?;
            cell.readout(h)?
        };
        let (x, m) = (&series.states[i], &series.masks[i]);
        let x_tilde = combine_imputation(x, m, x_hat)?;
        let rel = x_hat.with_data(|hat| {
            let hat = Tensor::new(x.rows(), x.cols(), hat.to_vec())?;
            compute_reliability(x, &hat, m, alpha)
        })?;
        alpha = rel.alpha;
        let input = StepInput { x_tilde, x_obs: x, mask: m, reliability: &rel.u, dt };
        h = cell.update(&input, h)?;
        out.x_hat.push(x_hat);
        out.x_tilde.push(x_tilde);
        out.hidden.push(h);
        out.alpha.push(alpha);
    }
    Ok(out)
}

/// Mean squared error over observed entries only; unobserved entries of
/// the series are never read.
pub fn masked_mse_loss<'t>(x_hat: &[Var<'t>], series: &ObservationSeries) -> Result<Var<'t>> {
    if x_hat.len() != series.len() {
        return Err(Error::Shape(format!("{} reconstructions for {} observations", x_hat.len(), series.len())));
    }
    let count = series.observed_count();
    if count == 0.0 {
        return Err(Error::UndefinedLoss("no observed entries in the series".into()));
    }
    let mut total: Option<Var<'t>> = None;
    for ((hat, x), m) in x_hat.iter().zip(&series.states).zip(&series.masks) {
        let observed = observed_mask(m)?;
        let hidden: Arc<[bool]> = observed.iter().map(|&o| !o).collect();
        let target = Tensor::new(x.rows(), x.cols(), observed.iter().zip(x.data()).map(|(&o, &v)| if o { v } else { 0.0 }).collect())?;
        let diff = hat.sub(hat.tape().constant(target))?.where_mask(hidden, &Tensor::zeros(x.rows(), x.cols()))?;
        let sq = diff.hadamard(diff)?.sum()?;
        total = Some(match total {
            None => sq,
            Some(t) => t.add(sq)?,
        });
    }
    Ok(total.expect("series is nonempty").scale(1.0 / count)?)
}

/// Per-feature affine standardization fitted on observed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(series: &[ObservationSeries]) -> Result<Self> {
        let dim = series.first().ok_or_else(|| Error::Argument("cannot fit on an empty set".into()))?.state_dim();
        let (mut sum, mut sq, mut n) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
        for s in series {
            for (x, m) in s.states.iter().zip(&s.masks) {
                for (k, (&v, &o)) in x.data().iter().zip(m.data()).enumerate() {
                    if o == 1.0 {
                        sum[k % dim] += v;
                        sq[k % dim] += v * v;
                        n[k % dim] += 1.0;
                    }
                }
            }
        }
        let mean: Vec<f64> = (0..dim).map(|k| if n[k] > 0.0 { sum[k] / n[k] } else { 0.0 }).collect();
        let std = (0..dim)
            .map(|k| {
                let var = if n[k] > 1.0 { (sq[k] - n[k] * mean[k] * mean[k]) / (n[k] - 1.0) } else { 0.0 };
                let s = var.max(0.0).sqrt();
                if s > 1e-8 { s } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(Error::Shape(format!("standardizer for width {} used on width {dim}", self.mean.len())));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Argument("standardizer std entries must be positive".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        Tensor::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c % d]) / self.std[c % d])
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * self.std[c % d] + self.mean[c % d])
    }

    /// Standardized copy whose unobserved entries are zeroed.
    pub fn series(&self, s: &ObservationSeries) -> ObservationSeries {
        let states = s
            .states
            .iter()
            .zip(&s.masks)
            .map(|(x, m)| {
                let z = self.forward(x);
                Tensor::from_fn(x.rows(), x.cols(), |r, c| if m.get(r, c) == 1.0 { z.get(r, c) } else { 0.0 })
            })
            .collect();
        ObservationSeries { times: s.times.clone(), states, masks: s.masks.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    /// Epochs without improvement before the learning rate is halved.
    pub patience: usize,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 1e-2, batch: 10, clip: 5.0, patience: 10, min_lr: 1e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Argument("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Argument("lr and clip must be positive".into()));
        }
        Ok(())
    }
}

/// Halves the learning rate when the epoch loss stops improving.
pub(crate) struct Plateau {
    best: f64,
    stale: usize,
}

impl Plateau {
    pub(crate) fn new() -> Self {
        Self { best: f64::INFINITY, stale: 0 }
    }

    pub(crate) fn observe(&mut self, loss: f64, cfg: &TrainConfig, adam: &mut Adam) {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= cfg.patience {
                adam.set_lr((adam.config.lr * 0.5).max(cfg.min_lr));
                self.stale = 0;
            }
        }
    }
}

/// Loss and gradients of one standardized series, accumulated into
/// `params`.
pub fn series_gradient(model: &dyn Recurrent, params: &mut ParamSet, graph: &NetworkGraph, series: &ObservationSeries) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let cell = model.bind(&bound, graph)?;
    let sweep = forward_series(cell.as_ref(), series)?;
    let loss = masked_mse_loss(&sweep.x_hat, series)?;
    let value = loss.item();
    let grads = tape.backward(loss)?;
    params.absorb(&grads, &bound)?;
    Ok(value)
}

/// Minibatch Adam on the masked loss over standardized series; returns the
/// mean loss of every epoch.
pub fn train_recurrent(
    model: &dyn Recurrent,
    params: &mut ParamSet,
    graph: &NetworkGraph,
    train: &[ObservationSeries],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, params);
    let mut plateau = Plateau::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            params.zero_grad();
            for &k in batch {
                let loss = series_gradient(model, params, graph, &train[k]).map_err(|e| diverged(e, epoch))?;
                if !loss.is_finite() {
                    return Err(Error::Training { epoch });
                }
                total += loss;
            }
            params.scale_grads(1.0 / batch.len() as f64);
            if !params.clip_grad_norm(cfg.clip).is_finite() {
                return Err(Error::Training { epoch });
            }
            adam.step(params)?;
            if !params.is_finite() {
                return Err(Error::Training { epoch });
            }
        }
        let mean = total / train.len() as f64;
        history.push(mean);
        plateau.observe(mean, cfg, &mut adam);
    }
    Ok(history)
}

pub(crate) fn diverged(e: Error, epoch: usize) -> Error {
    if e.is_divergence() {
        Error::Training { epoch }
    } else {
        e
    }
}

pub const IMPUTED_VERSION: &str = "netdyn-imputed-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Observed,
    Imputed,
}

/// Reconstructed states on a dense grid, in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputedTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Tensor>,
    /// Row-major per-entry tags for each time.
    pub origin: Vec<Vec<Origin>>,
    /// Observed fraction at the nearest preceding observation.
    pub beta: Vec<f64>,
    pub nearest_observation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputedFile {
    pub version: String,
    pub trajectories: Vec<ImputedRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputedRecord {
    pub times: Vec<f64>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub origin: Vec<Vec<Vec<Origin>>>,
    pub beta: Vec<f64>,
    pub nearest_observation: Vec<f64>,
}

impl ImputedTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_record(&self) -> ImputedRecord {
        ImputedRecord {
            times: self.times.clone(),
            values: self.values.iter().map(Tensor::to_rows).collect(),
            origin: self
                .values
                .iter()
                .zip(&self.origin)
                .map(|(v, o)| o.chunks(v.cols()).map(<[Origin]>::to_vec).collect())
                .collect(),
            beta: self.beta.clone(),
            nearest_observation: self.nearest_observation.clone(),
        }
    }

    pub fn from_record(r: &ImputedRecord) -> Result<Self> {
        let values = r.values.iter().map(|v| Tensor::from_rows(v)).collect::<Result<Vec<_>, _>>()?;
        let n = r.times.len();
        if values.len() != n || r.origin.len() != n || r.beta.len() != n || r.nearest_observation.len() != n {
            return Err(Error::Format("imputed record arrays differ in length".into()));
        }
        if r.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Format("imputed times must be strictly increasing".into()));
        }
        Ok(Self {
            times: r.times.clone(),
            values,
            origin: r.origin.iter().map(|o| o.concat()).collect(),
            beta: r.beta.clone(),
            nearest_observation: r.nearest_observation.clone(),
        })
    }
}

pub fn imputed_file(trajectories: &[ImputedTrajectory]) -> ImputedFile {
    ImputedFile { version: IMPUTED_VERSION.into(), trajectories: trajectories.iter().map(ImputedTrajectory::to_record).collect() }
}

pub fn read_imputed_file(file: &ImputedFile) -> Result<Vec<ImputedTrajectory>> {
    if file.version != IMPUTED_VERSION {
        return Err(Error::Format(format!("expected version {IMPUTED_VERSION}, found `{}`", file.version)));
    }
    file.trajectories.iter().map(ImputedTrajectory::from_record).collect()
}

/// Dense reconstruction of `series` (original units) at every `grid` time.
///
/// Grid times at observations emit the combined state with observed entries
/// copied from the raw series; other times read out the hidden state
/// evolved from the latest preceding observation. Times after the last
/// observation keep evolving from it.
pub fn impute_dense_grid(
    model: &dyn Recurrent,
    params: &ParamSet,
    graph: &NetworkGraph,
    standardizer: &Standardizer,
    series: &ObservationSeries,
    grid: &[f64],
) -> Result<ImputedTrajectory> {
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("dense grid must be strictly increasing".into()));
    }
    if grid.first().is_some_and(|&t| t < series.times[0]) {
        return Err(Error::Argument(format!("grid starts at {} before the first observation {}", grid[0], series.times[0])));
    }
    let std_series = standardizer.series(series);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let cell = model.bind(&bound, graph)?;
    let sweep = forward_series(cell.as_ref(), &std_series)?;

    let mut out =
        ImputedTrajectory { times: grid.to_vec(), values: vec![], origin: vec![], beta: vec![], nearest_observation: vec![] };
    // (observation index, time of the chained state, chained state)
    let mut chain: Option<(usize, f64, Var<'_>)> = None;
    for &t in grid {
        let i = series.times.partition_point(|&s| s <= t) - 1;
        let (t_i, x, m) = (series.times[i], &series.states[i], &series.masks[i]);
        if t == t_i {
            let mut v = standardizer.inverse(&sweep.x_tilde[i].value());
            let mut tags = vec![Origin::Imputed; v.len()];
            for k in 0..v.len() {
                if m.data()[k] == 1.0 {
                    v.data_mut()[k] = x.data()[k];
                    tags[k] = Origin::Observed;
                }
            }
            out.values.push(v);
            out.origin.push(tags);
            chain = Some((i, t, sweep.hidden[i]));
        } else {
            let (from_t, from_h) = match chain {
                Some((j, ct, h)) if j == i => (ct, h),
                _ => (t_i, sweep.hidden[i]),
            };
            let h = cell.evolve(from_h, t - from_t)?;
            let v = standardizer.inverse(&cell.readout(h)?.value());
            if !v.is_finite() {
                return Err(Error::Divergence { time: t });
            }
            out.origin.push(vec![Origin::Imputed; v.len()]);
            out.values.push(v);
            chain = Some((i, t, h));
        }
        out.beta.push(series.beta(i));
        out.nearest_observation.push(t_i);
    }
    Ok(out)
}

/// Free-running readout of the hidden state after the last observation,
/// evolved through every `grid` time (all later than the last observation).
pub fn extrapolate_hidden(
    model: &dyn Recurrent,
    params: &ParamSet,
    graph: &NetworkGraph,
    standardizer: &Standardizer,
    series: &ObservationSeries,
    grid: &[f64],
) -> Result<Vec<Tensor>> {
    let last = *series.times.last().expect("validated series is nonempty");
    if grid.first().is_some_and(|&t| t < last) {
        return Err(Error::Argument("extrapolation grid starts before the last observation".into()));
    }
    let std_series = standardizer.series(series);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let cell = model.bind(&bound, graph)?;
    let sweep = forward_series(cell.as_ref(), &std_series)?;
    let (mut t, mut h) = (last, *sweep.hidden.last().expect("nonempty"));
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        h = cell.evolve(h, g - t)?;
        t = g;
        let v = standardizer.inverse(&cell.readout(h)?.value());
        if !v.is_finite() {
            return Err(Error::Divergence { time: g });
        }
        out.push(v);
    }
    Ok(out)
}

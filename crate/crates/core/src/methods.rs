//! Name-addressable registry of imputation/extrapolation methods.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, ParamsFile, Tensor};
use crate::baselines::{BaselineKind, BaselineModel};
use crate::dynamics::ObservationSeries;
use crate::graph::NetworkGraph;
use crate::impute::{ImputeModel, ModelConfig};
use crate::pipeline::{
    extrapolate_hidden, impute_dense_grid, train_recurrent, ImputedTrajectory, Recurrent, Standardizer, TrainConfig,
};
use crate::predict::{build_weighted_samples, rollout, train_predict, PredictModel, WeightedSample};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "netdyn-checkpoint-v1";

/// Everything a method needs to fit itself to a training split.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub graph: &'a NetworkGraph,
    pub state_dim: usize,
    /// End of the observed window.
    pub horizon: f64,
    pub train: &'a [ObservationSeries],
    pub model: &'a ModelConfig,
    pub impute_train: &'a TrainConfig,
    pub predict_train: &'a TrainConfig,
    pub zeta: f64,
    /// Uniform points in `[0, horizon]` added to the observation times when
    /// building one-step training pairs for the prediction model.
    pub dense_points: usize,
    /// Seeds initialisation and shuffling, overriding the training configs.
    pub seed: u64,
}

impl TrainContext<'_> {
    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.impute_train.validate()?;
        self.predict_train.validate()?;
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::Argument(format!("zeta must be a finite non-negative number, got {}", self.zeta)));
        }
        if self.train.is_empty() {
            return Err(Error::Argument("training split is empty".into()));
        }
        for s in self.train {
            if s.n_nodes() != self.graph.n_nodes() || s.state_dim() != self.state_dim {
                return Err(Error::Shape(format!(
                    "series has {}x{} states, graph expects {}x{}",
                    s.n_nodes(),
                    s.state_dim(),
                    self.graph.n_nodes(),
                    self.state_dim
                )));
            }
        }
        Ok(())
    }

    fn seeded(&self, cfg: &TrainConfig, stream: u64) -> TrainConfig {
        TrainConfig { seed: self.seed.wrapping_add(stream), ..cfg.clone() }
    }

    fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Per-epoch training losses of each stage a method runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub impute: Vec<f64>,
    pub predict: Vec<f64>,
}

/// Serialized trained method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    pub method: String,
    pub n_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub state_dim: usize,
    pub model: ModelConfig,
    /// Hidden width actually used; baselines pick theirs to match capacity.
    pub hidden: usize,
    pub zeta: f64,
    pub standardizer: Standardizer,
    /// Recurrent imputation model (or the baseline).
    pub params: Option<ParamsFile>,
    /// Prediction model, for methods that train one.
    pub predict_params: Option<ParamsFile>,
    pub history: History,
}

impl Checkpoint {
    /// Rejects checkpoints trained on a different graph or state width.
    pub fn check_compatible(&self, graph: &NetworkGraph, state_dim: usize) -> Result<()> {
        let edges: Vec<[usize; 2]> = graph.edges().iter().map(|&(s, d)| [s, d]).collect();
        if self.n_nodes != graph.n_nodes() || self.edges != edges || self.state_dim != state_dim {
            return Err(Error::Shape(format!(
                "checkpoint for {} nodes / {} edges / d={} does not match data with {} nodes / {} edges / d={}",
                self.n_nodes,
                self.edges.len(),
                self.state_dim,
                graph.n_nodes(),
                edges.len(),
                state_dim
            )));
        }
        Ok(())
    }

    /// Combines stage checkpoints of one method; parts present in `other`
    /// fill the gaps in `self`.
    pub fn merge(mut self, other: Checkpoint) -> Result<Checkpoint> {
        if self.method != other.method || self.n_nodes != other.n_nodes || self.edges != other.edges {
            return Err(Error::Argument(format!("cannot merge `{}` with `{}` checkpoint", self.method, other.method)));
        }
        if self.params.is_none() {
            self.params = other.params;
            self.standardizer = other.standardizer;
            self.history.impute = other.history.impute;
        }
        if self.predict_params.is_none() {
            self.predict_params = other.predict_params;
            self.history.predict = other.history.predict;
        }
        Ok(self)
    }

    fn base(method: &str, graph: &NetworkGraph, state_dim: usize, model: &ModelConfig, hidden: usize, zeta: f64) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            method: method.to_string(),
            n_nodes: graph.n_nodes(),
            edges: graph.edges().iter().map(|&(s, d)| [s, d]).collect(),
            state_dim,
            model: model.clone(),
            hidden,
            zeta,
            standardizer: Standardizer::identity(state_dim),
            params: None,
            predict_params: None,
            history: History::default(),
        }
    }

    fn validate(&self, method: &str) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version `{}`", self.version)));
        }
        if self.method != method {
            return Err(Error::Argument(format!("checkpoint is for `{}`, not `{method}`", self.method)));
        }
        self.model.validate()?;
        self.standardizer.validate(self.state_dim)
    }

    fn graph(&self) -> Result<NetworkGraph> {
        NetworkGraph::new(self.n_nodes, self.edges.iter().map(|e| (e[0], e[1])))
    }
}

/// A fitted method able to reconstruct and extend observation series.
/// All tensors are in original units.
pub trait Trained: Send {
    fn method(&self) -> &str;
    fn param_count(&self) -> usize;
    fn history(&self) -> &History;
    /// States at every `grid` time inside the observed window.
    fn impute(&self, series: &ObservationSeries, grid: &[f64]) -> Result<Vec<Tensor>>;
    /// Free-running states at `grid` times after the last observation.
    fn extrapolate(&self, series: &ObservationSeries, grid: &[f64]) -> Result<Vec<Tensor>>;
    fn checkpoint(&self) -> Checkpoint;
}

pub trait Method: Send + Sync {
    fn name(&self) -> &'static str;
    /// Scalar parameter count the method would train under `model`.
    fn param_count(&self, model: &ModelConfig, state_dim: usize, n_nodes: usize) -> usize;
    fn train(&self, ctx: &TrainContext<'_>) -> Result<Box<dyn Trained>>;
    fn restore(&self, checkpoint: &Checkpoint) -> Result<Box<dyn Trained>>;
}

/// Methods by name, in registration order.
pub struct Registry {
    methods: BTreeMap<&'static str, (usize, Box<dyn Method>)>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Registry::empty();
        r.register(Box::new(Proposed));
        for kind in BaselineKind::ALL {
            r.register(Box::new(Baseline(kind)));
        }
        r
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self { methods: BTreeMap::new() }
    }

    /// Adds `method`, replacing any method registered under the same name.
    pub fn register(&mut self, method: Box<dyn Method>) {
        let order = self.methods.get(method.name()).map_or(self.methods.len(), |e| e.0);
        self.methods.insert(method.name(), (order, method));
    }

    pub fn get(&self, name: &str) -> Result<&dyn Method> {
        self.methods.get(name).map(|e| e.1.as_ref()).ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v: Vec<_> = self.methods.iter().map(|(k, e)| (e.0, *k)).collect();
        v.sort();
        v.into_iter().map(|e| e.1).collect()
    }

    pub fn restore(&self, checkpoint: &Checkpoint) -> Result<Box<dyn Trained>> {
        self.get(&checkpoint.method)?.restore(checkpoint)
    }
}

pub const PROPOSED: &str = "proposed";

/// Graph neural ODE imputation followed by a second graph ODE trained on
/// the imputed series for extrapolation.
pub struct Proposed;

/// First stage of [`Proposed`]: the fitted imputation model.
pub struct ImputeStage {
    pub model: ImputeModel,
    pub params: ParamSet,
    pub standardizer: Standardizer,
    pub history: Vec<f64>,
}

/// Second stage of [`Proposed`]: the fitted prediction model.
pub struct PredictStage {
    pub model: PredictModel,
    pub params: ParamSet,
    pub history: Vec<f64>,
}

/// Observation times merged with `points` uniform times on `[t0, horizon]`.
pub fn dense_grid(series: &ObservationSeries, horizon: f64, points: usize) -> Vec<f64> {
    let t0 = series.times[0];
    let mut grid = series.times.clone();
    if points >= 2 && horizon > t0 {
        grid.extend((0..points).map(|k| t0 + (horizon - t0) * k as f64 / (points - 1) as f64));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

pub fn fit_impute_stage(
    graph: &NetworkGraph,
    state_dim: usize,
    train: &[ObservationSeries],
    model: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImputeStage> {
    let standardizer = Standardizer::fit(train)?;
    let std_train: Vec<_> = train.iter().map(|s| standardizer.series(s)).collect();
    let m = ImputeModel::new(state_dim, model);
    let mut params = ParamSet::new();
    m.init_params(&mut params, rng);
    let history = train_recurrent(&m, &mut params, graph, &std_train, cfg)?;
    Ok(ImputeStage { model: m, params, standardizer, history })
}

impl ImputeStage {
    pub fn impute(&self, graph: &NetworkGraph, series: &ObservationSeries, grid: &[f64]) -> Result<ImputedTrajectory> {
        impute_dense_grid(&self.model, &self.params, graph, &self.standardizer, series, grid)
    }
}

pub fn fit_predict_stage(
    graph: &NetworkGraph,
    state_dim: usize,
    standardizer: &Standardizer,
    imputed: &[ImputedTrajectory],
    model: &ModelConfig,
    zeta: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PredictStage> {
    let mut samples: Vec<WeightedSample> = Vec::new();
    for t in imputed {
        samples.extend(build_weighted_samples(t, zeta)?);
    }
    let m = PredictModel::new(state_dim, model);
    let mut params = ParamSet::new();
    m.init_params(&mut params, rng);
    let history = train_predict(&m, &mut params, graph, standardizer, &samples, cfg)?;
    Ok(PredictStage { model: m, params, history })
}

struct TrainedProposed {
    graph: NetworkGraph,
    impute: ImputeStage,
    predict: Option<PredictStage>,
    zeta: f64,
    history: History,
}

impl Method for Proposed {
    fn name(&self) -> &'static str {
        PROPOSED
    }

    fn param_count(&self, model: &ModelConfig, state_dim: usize, _n_nodes: usize) -> usize {
        ImputeModel::new(state_dim, model).param_count() + PredictModel::new(state_dim, model).param_count()
    }

    fn train(&self, ctx: &TrainContext<'_>) -> Result<Box<dyn Trained>> {
        ctx.validate()?;
        let mut rng = ctx.init_rng();
        let graph = ctx.graph;
        let impute =
            fit_impute_stage(graph, ctx.state_dim, ctx.train, ctx.model, &ctx.seeded(ctx.impute_train, 1), &mut rng)?;
        let imputed = ctx
            .train
            .iter()
            .map(|s| impute.impute(graph, s, &dense_grid(s, ctx.horizon, ctx.dense_points)))
            .collect::<Result<Vec<_>>>()?;
        let predict = fit_predict_stage(
            graph,
            ctx.state_dim,
            &impute.standardizer,
            &imputed,
            ctx.model,
            ctx.zeta,
            &ctx.seeded(ctx.predict_train, 2),
            &mut rng,
        )?;
        let history = History { impute: impute.history.clone(), predict: predict.history.clone() };
        Ok(Box::new(TrainedProposed { graph: graph.clone(), impute, predict: Some(predict), zeta: ctx.zeta, history }))
    }

    fn restore(&self, ck: &Checkpoint) -> Result<Box<dyn Trained>> {
        ck.validate(PROPOSED)?;
        let params = ck.params.as_ref().ok_or_else(|| Error::Argument("checkpoint lacks imputation parameters".into()))?;
        let model = ImputeModel::new(ck.state_dim, &ck.model);
        let impute = ImputeStage {
            params: checked_params(params, model.param_count())?,
            model,
            standardizer: ck.standardizer.clone(),
            history: ck.history.impute.clone(),
        };
        let predict = match &ck.predict_params {
            Some(p) => {
                let model = PredictModel::new(ck.state_dim, &ck.model);
                Some(PredictStage {
                    params: checked_params(p, model.param_count())?,
                    model,
                    history: ck.history.predict.clone(),
                })
            }
            None => None,
        };
        Ok(Box::new(TrainedProposed { graph: ck.graph()?, impute, predict, zeta: ck.zeta, history: ck.history.clone() }))
    }
}

fn checked_params(file: &ParamsFile, expected: usize) -> Result<ParamSet> {
    let p = ParamSet::from_file(file)?;
    if p.scalar_count() != expected {
        return Err(Error::Shape(format!("checkpoint holds {} parameters, model needs {expected}", p.scalar_count())));
    }
    Ok(p)
}

impl Trained for TrainedProposed {
    fn method(&self) -> &str {
        PROPOSED
    }

    fn param_count(&self) -> usize {
        self.impute.params.scalar_count() + self.predict.as_ref().map_or(0, |p| p.params.scalar_count())
    }

    fn history(&self) -> &History {
        &self.history
    }

    fn impute(&self, series: &ObservationSeries, grid: &[f64]) -> Result<Vec<Tensor>> {
        Ok(self.impute.impute(&self.graph, series, grid)?.values)
    }

    fn extrapolate(&self, series: &ObservationSeries, grid: &[f64]) -> Result<Vec<Tensor>> {
        let predict =
            self.predict.as_ref().ok_or_else(|| Error::Argument("no prediction model has been trained".into()))?;
        let last = *series.times.last().expect("validated series is nonempty");
        let start = self.impute.impute(&self.graph, series, &[last])?.values.remove(0);
        rollout(&predict.model, &predict.params, &self.graph, &self.impute.standardizer, &start, last, grid)
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::base(
            PROPOSED,
            &self.graph,
            self.impute.model.state_dim,
            &self.impute.model.config,
            self.impute.model.config.hidden,
            self.zeta,
        );
        ck.standardizer = self.impute.standardizer.clone();
        ck.params = Some(self.impute.params.to_file());
        ck.predict_params = self.predict.as_ref().map(|p| p.params.to_file());
        ck.history = self.history.clone();
        ck
    }
}

/// Checkpoint holding only the imputation stage of [`Proposed`].
pub fn impute_stage_checkpoint(graph: &NetworkGraph, stage: &ImputeStage, zeta: f64) -> Checkpoint {
    let m = &stage.model;
    let mut ck = Checkpoint::base(PROPOSED, graph, m.state_dim, &m.config, m.config.hidden, zeta);
    ck.standardizer = stage.standardizer.clone();
    ck.params = Some(stage.params.to_file());
    ck.history.impute = stage.history.clone();
    ck
}

/// Checkpoint holding only the prediction stage of [`Proposed`].
pub fn predict_stage_checkpoint(
    graph: &NetworkGraph,
    stage: &PredictStage,
    standardizer: &Standardizer,
    model: &ModelConfig,
    zeta: f64,
) -> Checkpoint {
    let mut ck = Checkpoint::base(PROPOSED, graph, stage.model.state_dim, model, model.hidden, zeta);
    ck.standardizer = standardizer.clone();
    ck.predict_params = Some(stage.params.to_file());
    ck.history.predict = stage.history.clone();
    ck
}

/// Recovers the imputation stage from a [`Proposed`] checkpoint.
pub fn restore_impute_stage(ck: &Checkpoint) -> Result<ImputeStage> {
    ck.validate(PROPOSED)?;
    let params = ck.params.as_ref().ok_or_else(|| Error::Argument("checkpoint lacks imputation parameters".into()))?;
    let model = ImputeModel::new(ck.state_dim, &ck.model);
    Ok(ImputeStage {
        params: checked_params(params, model.param_count())?,
        model,
        standardizer: ck.standardizer.clone(),
        history: ck.history.impute.clone(),
    })
}

/// One of the comparison models, with hidden width chosen so its parameter
/// count is closest to that of [`Proposed`].
pub struct Baseline(pub BaselineKind);

impl Baseline {
    fn model(&self, model: &ModelConfig, state_dim: usize, n_nodes: usize) -> BaselineModel {
        let target = Proposed.param_count(model, state_dim, n_nodes);
        BaselineModel::matched(self.0, state_dim, n_nodes, model, target)
    }
}

struct TrainedBaseline {
    graph: NetworkGraph,
    model: BaselineModel,
    config: ModelConfig,
    params: ParamSet,
    standardizer: Standardizer,
    zeta: f64,
    history: History,
}

impl Method for Baseline {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn param_count(&self, model: &ModelConfig, state_dim: usize, n_nodes: usize) -> usize {
        self.model(model, state_dim, n_nodes).param_count()
    }

    fn train(&self, ctx: &TrainContext<'_>) -> Result<Box<dyn Trained>> {
        ctx.validate()?;
        let model = self.model(ctx.model, ctx.state_dim, ctx.graph.n_nodes());
        let standardizer = Standardizer::fit(ctx.train)?;
        let std_train: Vec<_> = ctx.train.iter().map(|s| standardizer.series(s)).collect();
        let mut params = ParamSet::new();
        model.init_params(&mut params, &mut ctx.init_rng());
        let history = train_recurrent(&model, &mut params, ctx.graph, &std_train, &ctx.seeded(ctx.impute_train, 1))?;
        Ok(Box::new(TrainedBaseline {
            graph: ctx.graph.clone(),
            model,
            config: ctx.model.clone(),
            params,
            standardizer,
            zeta: ctx.zeta,
            history: History { impute: history, predict: vec![] },
        }))
    }

    fn restore(&self, ck: &Checkpoint) -> Result<Box<dyn Trained>> {
        ck.validate(self.name())?;
        let file = ck.params.as_ref().ok_or_else(|| Error::Argument("checkpoint lacks parameters".into()))?;
        let model = BaselineModel::new(self.0, ck.state_dim, ck.n_nodes, ck.hidden, &ck.model);
        Ok(Box::new(TrainedBaseline {
            graph: ck.graph()?,
            params: checked_params(file, model.param_count())?,
            model,
            config: ck.model.clone(),
            standardizer: ck.standardizer.clone(),
            zeta: ck.zeta,
            history: ck.history.clone(),
        }))
    }
}

impl Trained for TrainedBaseline {
    fn method(&self) -> &str {
        self.model.kind.name()
    }

    fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn history(&self) -> &History {
        &self.history
    }

    fn impute(&self, series: &ObservationSeries, grid: &[f64]) -> Result<Vec<Tensor>> {
        Ok(impute_dense_grid(&self.model, &self.params, &self.graph, &self.standardizer, series, grid)?.values)
    }

    fn extrapolate(&self, series: &ObservationSeries, grid: &[f64]) -> Result<Vec<Tensor>> {
        extrapolate_hidden(&self.model, &self.params, &self.graph, &self.standardizer, series, grid)
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::base(
            self.model.kind.name(),
            &self.graph,
            self.model.state_dim,
            &self.config,
            self.model.hidden,
            self.zeta,
        );
        ck.standardizer = self.standardizer.clone();
        ck.params = Some(self.params.to_file());
        ck.history = self.history.clone();
        ck
    }
}

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use netdyn_core::dynamics::{make_dataset, Dataset, ExperimentConfig};
use netdyn_core::harness::{evaluate, run_benchmark, CellStatus, RunConfig};
use netdyn_core::io::{read_string, write_string};
use netdyn_core::methods::{
    dense_grid, fit_impute_stage, fit_predict_stage, impute_stage_checkpoint, predict_stage_checkpoint,
    restore_impute_stage, Checkpoint, Registry, PROPOSED,
};
use netdyn_core::pipeline::{imputed_file, read_imputed_file, ImputedFile};
use netdyn_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Command, Common};

pub const EXIT_INVALID: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_divergence() { EXIT_DIVERGED } else { EXIT_INVALID };
        Failure { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(e) if e.is_divergence() => EXIT_DIVERGED,
            _ => EXIT_INVALID,
        };
        Failure { code, error }
    }
}

type Outcome = Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Generate { p_obs, trajectories, common } => generate(&common, p_obs, trajectories),
        Command::TrainImpute { data, history, common } => train_impute(&common, &data, history),
        Command::Impute { data, checkpoint, split, common } => impute(&common, &data, &checkpoint, &split),
        Command::TrainPredict { data, checkpoint, history, common } => train_predict(&common, &data, &checkpoint, history),
        Command::TrainBaseline { data, history, common } => train_baseline(&common, &data, history),
        Command::Evaluate { data, checkpoint, common } => evaluate_cmd(&common, &data, &checkpoint),
        Command::Benchmark { common } => benchmark(&common),
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match common.config.as_deref() {
        None | Some("paper8") => RunConfig::default(),
        Some(path) => {
            let text = read_string(Path::new(path))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))?
        }
    };
    if let Some(s) = common.seed {
        cfg.experiment.seed = s;
        cfg.seeds = vec![s];
    }
    if let Some(m) = &common.method {
        cfg.methods = m.clone();
    }
    if let Some(f) = &common.fractions {
        cfg.fractions = f.clone();
    }
    if let Some(e) = common.epochs {
        cfg.impute_train.epochs = e;
        cfg.predict_train.epochs = e;
    }
    if let Some(z) = common.zeta {
        cfg.zeta = z;
    }
    if let Some(p) = common.p_miss {
        cfg.experiment.p_miss = p;
    }
    if let Some(g) = common.grid {
        cfg.dense_points = g;
    }
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_string(path, &text)?;
    Ok(())
}

fn history_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".history.json");
        PathBuf::from(s)
    })
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let text = read_string(path)?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?)
}

fn generate(common: &Common, p_obs: Option<f64>, trajectories: Option<usize>) -> Outcome {
    let cfg = load_config(common)?;
    let exp = ExperimentConfig {
        p_obs: p_obs.unwrap_or(cfg.experiment.p_obs),
        n_trajectories: trajectories.unwrap_or(cfg.experiment.n_trajectories),
        ..cfg.experiment
    };
    let ds = make_dataset(&exp)?;
    for w in ds.warnings() {
        eprintln!("warning: {w}");
    }
    let out = out_path(common, "data.json");
    ds.save(&out)?;
    eprintln!("wrote {} ({} train / {} test trajectories)", out.display(), ds.train.len(), ds.test.len());
    Ok(())
}

fn train_seed(cfg: &RunConfig) -> u64 {
    cfg.experiment.seed
}

fn train_impute(common: &Common, data: &Path, history: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    let ds = load_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed(&cfg));
    let train = netdyn_core::pipeline::TrainConfig { seed: train_seed(&cfg), ..cfg.impute_train.clone() };
    let stage = fit_impute_stage(&ds.graph, ds.state_dim, &ds.train, &cfg.model, &train, &mut rng)?;
    let out = out_path(common, "impute.ckpt.json");
    write_json(&out, &impute_stage_checkpoint(&ds.graph, &stage, cfg.zeta))?;
    write_json(&history_path(history, &out), &stage.history)?;
    eprintln!("final loss {:.6}; wrote {}", stage.history.last().copied().unwrap_or(f64::NAN), out.display());
    Ok(())
}

fn impute(common: &Common, data: &Path, checkpoint: &Path, split: &str) -> Outcome {
    let cfg = load_config(common)?;
    let ds = load_dataset(data)?;
    let ck = load_checkpoint(checkpoint)?;
    ck.check_compatible(&ds.graph, ds.state_dim)?;
    let stage = restore_impute_stage(&ck)?;
    let series = match split {
        "train" => &ds.train,
        "test" => &ds.test,
        other => return Err(anyhow!("unknown split `{other}` (expected train or test)").into()),
    };
    let imputed = series
        .iter()
        .map(|s| stage.impute(&ds.graph, s, &dense_grid(s, ds.grid_horizon, cfg.dense_points)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = out_path(common, "imputed.json");
    write_json(&out, &imputed_file(&imputed))?;
    eprintln!("wrote {} imputed series to {}", imputed.len(), out.display());
    Ok(())
}

fn train_predict(common: &Common, data: &Path, checkpoint: &Path, history: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    let text = read_string(data)?;
    let file: ImputedFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", data.display()))?;
    let imputed = read_imputed_file(&file)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.method != PROPOSED {
        return Err(anyhow!("`{}` checkpoint cannot seed a prediction model", ck.method).into());
    }
    let graph = netdyn_core::graph::NetworkGraph::new(ck.n_nodes, ck.edges.iter().map(|e| (e[0], e[1])))?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed(&cfg).wrapping_add(1));
    let train = netdyn_core::pipeline::TrainConfig { seed: train_seed(&cfg), ..cfg.predict_train.clone() };
    let stage =
        fit_predict_stage(&graph, ck.state_dim, &ck.standardizer, &imputed, &ck.model, cfg.zeta, &train, &mut rng)?;
    let pred = predict_stage_checkpoint(&graph, &stage, &ck.standardizer, &ck.model, cfg.zeta);
    let full = if ck.params.is_some() { ck.merge(pred)? } else { pred };
    let out = out_path(common, "proposed.ckpt.json");
    write_json(&out, &full)?;
    write_json(&history_path(history, &out), &stage.history)?;
    eprintln!("final loss {:.6}; wrote {}", stage.history.last().copied().unwrap_or(f64::NAN), out.display());
    Ok(())
}

fn train_baseline(common: &Common, data: &Path, history: Option<PathBuf>) -> Outcome {
    let cfg = load_config(common)?;
    let name = match common.method.as_deref() {
        Some([one]) => one.clone(),
        _ => return Err(anyhow!("train-baseline needs exactly one --method").into()),
    };
    if name == PROPOSED {
        return Err(anyhow!("use train-impute and train-predict for `{PROPOSED}`").into());
    }
    let ds = load_dataset(data)?;
    let registry = Registry::default();
    let method = registry.get(&name)?;
    let trained = method.train(&cfg.context(&ds, train_seed(&cfg)))?;
    let out = out_path(common, &format!("{name}.ckpt.json"));
    write_json(&out, &trained.checkpoint())?;
    write_json(&history_path(history, &out), &trained.history().impute)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn evaluate_cmd(common: &Common, data: &Path, checkpoints: &[PathBuf]) -> Outcome {
    let ds = load_dataset(data)?;
    let mut merged: Vec<Checkpoint> = Vec::new();
    for path in checkpoints {
        let ck = load_checkpoint(path)?;
        ck.check_compatible(&ds.graph, ds.state_dim)?;
        match merged.iter().position(|m| m.method == ck.method) {
            Some(i) => {
                let prev = merged.remove(i);
                merged.insert(i, prev.merge(ck)?);
            }
            None => merged.push(ck),
        }
    }
    let registry = Registry::default();
    let mut reports = Vec::new();
    for ck in &merged {
        let trained = registry.restore(ck)?;
        let can_extrapolate = ck.method != PROPOSED || ck.predict_params.is_some();
        let ev = evaluate(trained.as_ref(), &ds, can_extrapolate)?;
        eprintln!(
            "{}: interpolation {:.5}{}",
            ev.method,
            ev.interpolation.mean,
            ev.extrapolation.map(|s| format!(", extrapolation {:.5}", s.mean)).unwrap_or_default()
        );
        reports.push(ev);
    }
    write_json(&out_path(common, "evaluation.json"), &reports)
}

fn benchmark(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let out = out_path(common, "report.json");
    let report = run_benchmark(&cfg, &|c| match &c.status {
        CellStatus::Ok { interpolation, extrapolation } => eprintln!(
            "{:>9} p={:.1} seed={} interp {:.5} extrap {:.5} ({:.0}s)",
            c.method, c.fraction, c.seed, interpolation, extrapolation, c.seconds
        ),
        CellStatus::Failed { reason } => {
            eprintln!("{:>9} p={:.1} seed={} FAILED: {reason}", c.method, c.fraction, c.seed)
        }
    })?;
    write_json(&out, &report)?;
    write_string(&out.with_extension("csv"), &report.to_csv()?)?;
    eprintln!("{} of {} cells succeeded; wrote {}", report.succeeded(), report.cells.len(), out.display());
    if report.succeeded() == 0 {
        return Err(Failure { code: EXIT_DIVERGED, error: anyhow!("every benchmark cell failed") });
    }
    Ok(())
}

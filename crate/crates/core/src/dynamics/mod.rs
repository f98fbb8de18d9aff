//! Ground-truth network dynamics, irregular sampling and dataset assembly.

mod dataset;
mod sampling;
mod simulate;

pub use dataset::{
    make_dataset, permute_rows, simulate_trajectory, Dataset, DatasetFile, ExperimentConfig, ObservationSeries,
    SeriesRecord, TruthRecord, DATA_VERSION,
};
pub use sampling::{apply_feature_mask, sample_observation_times, SamplingMode};
pub use simulate::{integrate, rhs_2d_cubic, CouplingTarget, CubicOscillator2d, GroundTruthTrajectory, VectorField};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    #[default]
    UniformSubset,
    ExponentialGaps,
}

/// Picks `round(p_obs * len)` grid indices, always including index 0,
/// returned in increasing order.
pub fn sample_observation_times(
    t_grid: &[f64],
    p_obs: f64,
    mode: SamplingMode,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if !(p_obs > 0.0 && p_obs <= 1.0) {
        return Err(Error::Argument(format!("p_obs must be in (0, 1], got {p_obs}")));
    }
    let n = t_grid.len();
    let count = (p_obs * n as f64).round() as usize;
    if count < 2 {
        return Err(Error::Argument(format!(
            "p_obs = {p_obs} keeps {count} of {n} grid points; at least 2 are required"
        )));
    }
    if count == n {
        return Ok((0..n).collect());
    }
    let mut picked = vec![false; n];
    picked[0] = true;
    match mode {
        SamplingMode::UniformSubset => {
            for i in index::sample(rng, n - 1, count - 1) {
                picked[i + 1] = true;
            }
        }
        SamplingMode::ExponentialGaps => {
            let exp = Exp::new(1.0).expect("unit rate is valid");
            let gaps: Vec<f64> = (0..count - 1).map(|_| exp.sample(rng)).collect();
            let total: f64 = gaps.iter().sum();
            let (t0, span) = (t_grid[0], t_grid[n - 1] - t_grid[0]);
            let mut acc = 0.0;
            for g in gaps {
                acc += g;
                let snapped = nearest_index(t_grid, t0 + span * acc / total);
                picked[snapped] = true;
            }
            // Snapping can merge draws; top up uniformly to the exact count.
            let have = picked.iter().filter(|&&p| p).count();
            if have < count {
                let free: Vec<usize> = (0..n).filter(|&i| !picked[i]).collect();
                for k in index::sample(rng, free.len(), count - have) {
                    picked[free[k]] = true;
                }
            }
        }
    }
    Ok((0..n).filter(|&i| picked[i]).collect())
}

fn nearest_index(grid: &[f64], t: f64) -> usize {
    let pos = grid.partition_point(|&g| g < t);
    if pos == 0 {
        0
    } else if pos == grid.len() {
        grid.len() - 1
    } else if t - grid[pos - 1] <= grid[pos] - t {
        pos - 1
    } else {
        pos
    }
}

/// One mask per state with exactly `floor(p_miss * N * d)` zeros, placed
/// uniformly at random.
pub fn apply_feature_mask(states: &[Tensor], p_miss: f64, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    if !(0.0..1.0).contains(&p_miss) {
        return Err(Error::Argument(format!("p_miss must be in [0, 1), got {p_miss}")));
    }
    Ok(states
        .iter()
        .map(|s| {
            let cells = s.len();
            let missing = (p_miss * cells as f64).floor() as usize;
            let mut m = Tensor::ones(s.rows(), s.cols());
            for i in index::sample(rng, cells, missing) {
                m.data_mut()[i] = 0.0;
            }
            m
        })
        .collect())
}

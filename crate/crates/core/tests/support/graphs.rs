//! Random composite autodiff graphs shared by the gradient checks.

use std::sync::Arc;

use netdyn_core::autodiff::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OPS: [&str; 20] = [
    "matmul", "add", "sub", "hadamard", "sigmoid", "tanh", "exp", "neg", "relu", "sum", "mean", "scale", "scale_rows",
    "concat", "slice", "tile", "gather", "scatter", "reshape", "where_mask",
];

/// Builds graph `seed` on `tape`. Every random draw depends only on the
/// seed, so passing `values` rebuilds the same graph with new leaf data.
struct Builder<'t, 'v> {
    tape: &'t Tape,
    rng: ChaCha8Rng,
    values: Option<&'v [Tensor]>,
    leaves: Vec<(Var<'t>, Tensor)>,
}

impl<'t> Builder<'t, '_> {
    fn leaf(&mut self, rows: usize, cols: usize) -> Var<'t> {
        let drawn = Tensor::from_fn(rows, cols, |_, _| self.rng.random_range(-1.0..1.0));
        let t = match self.values {
            Some(v) => v[self.leaves.len()].clone(),
            None => drawn,
        }
        .with_grad();
        let v = self.tape.leaf(&t);
        self.leaves.push((v, t));
        v
    }

    fn constant(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| self.rng.random_range(-1.0..1.0))
    }

    fn same_shape(&mut self, pool: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let matches: Vec<_> = pool.iter().filter(|v| v.shape() == x.shape() && v.id() != x.id()).copied().collect();
        if !matches.is_empty() && self.rng.random_bool(0.5) {
            matches[self.rng.random_range(0..matches.len())]
        } else {
            self.leaf(x.rows(), x.cols())
        }
    }

    fn apply(&mut self, op: &str, pool: &[Var<'t>]) -> Var<'t> {
        let x = pool[self.rng.random_range(0..pool.len())];
        let (r, c) = x.shape();
        match op {
            "matmul" => {
                let k = self.rng.random_range(1..=4);
                let w = self.leaf(c, k);
                x.matmul(w)
            }
            "add" => {
                let y = self.same_shape(pool, x);
                x.add(y)
            }
            "sub" => {
                let y = self.same_shape(pool, x);
                x.sub(y)
            }
            "hadamard" => {
                let y = self.same_shape(pool, x);
                x.hadamard(y)
            }
            "sigmoid" => x.sigmoid(),
            "tanh" => x.tanh(),
            "exp" => x.tanh().and_then(Var::exp),
            "neg" => x.neg(),
            "relu" => x.relu_max0(),
            "sum" => x.sum(),
            "mean" => x.mean(),
            "scale" => {
                let s = self.rng.random_range(-2.0..2.0);
                x.scale(s)
            }
            "scale_rows" => {
                let f: Arc<[f64]> = (0..r).map(|_| self.rng.random_range(-2.0..2.0)).collect();
                x.scale_rows(f)
            }
            "concat" => {
                let k = self.rng.random_range(1..=3);
                let y = self.leaf(r, k);
                self.tape.concat_cols(&[x, y, x])
            }
            "slice" => {
                let start = self.rng.random_range(0..r);
                let count = self.rng.random_range(1..=r - start);
                x.slice_rows(start, count)
            }
            "tile" => {
                let row = self.rng.random_range(0..r);
                let n = self.rng.random_range(1..=4);
                x.slice_rows(row, 1).and_then(|v| v.tile_rows(n))
            }
            "gather" => {
                let n = self.rng.random_range(1..=5);
                let idx: Arc<[usize]> = (0..n).map(|_| self.rng.random_range(0..r)).collect();
                x.gather_rows(idx)
            }
            "scatter" => {
                let n = self.rng.random_range(1..=4);
                let idx: Arc<[usize]> = (0..r).map(|_| self.rng.random_range(0..n)).collect();
                x.scatter_add_rows(idx, n)
            }
            "reshape" => {
                if self.rng.random_bool(0.5) {
                    x.reshape(1, r * c)
                } else {
                    x.reshape(r * c, 1)
                }
            }
            "where_mask" => {
                let mask: Arc<[bool]> = (0..r * c).map(|_| self.rng.random_bool(0.4)).collect();
                let fill = self.constant(r, c);
                x.where_mask(mask, &fill)
            }
            other => unreachable!("unknown op {other}"),
        }
        .expect("shapes are constructed to fit")
    }
}

pub fn build<'t>(tape: &'t Tape, seed: u64, values: Option<&[Tensor]>) -> (Var<'t>, Vec<(Var<'t>, Tensor)>) {
    let mut b = Builder { tape, rng: ChaCha8Rng::seed_from_u64(seed), values, leaves: Vec::new() };
    let (r, c) = (b.rng.random_range(2..=4), b.rng.random_range(1..=3));
    let mut pool = vec![b.leaf(r, c), b.leaf(r, c)];
    let mut ops = OPS.to_vec();
    ops.shuffle(&mut b.rng);
    for op in ops {
        let v = b.apply(op, &pool);
        pool.push(v);
    }
    let mut loss: Option<Var<'t>> = None;
    for v in &pool[2..] {
        let w = b.constant(v.rows(), v.cols());
        let term = v.hadamard(tape.constant(w)).and_then(Var::sum).unwrap();
        loss = Some(match loss {
            None => term,
            Some(l) => l.add(term).unwrap(),
        });
    }
    (loss.unwrap(), b.leaves)
}

pub fn loss_at(seed: u64, values: &[Tensor]) -> f64 {
    let tape = Tape::new();
    build(&tape, seed, Some(values)).0.item()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over graphs `seeds`, or the first failure above `tol`.
pub fn check_graphs(seeds: std::ops::Range<u64>, h: f64, tol: f64) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let tape = Tape::new();
        let (loss, leaves) = build(&tape, seed, None);
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
        for (k, (var, t)) in leaves.iter().enumerate() {
            let analytic = grads.raw(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            for i in 0..t.len() {
                let mut plus = values.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = values.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (loss_at(seed, &plus) - loss_at(seed, &minus)) / (2.0 * h);
                let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1.0);
                worst = worst.max(err);
                if err >= tol {
                    return Err(format!("graph {seed}, leaf {k}[{i}]: analytic {} vs numeric {numeric}", analytic[i]));
                }
            }
        }
    }
    Ok(worst)
}

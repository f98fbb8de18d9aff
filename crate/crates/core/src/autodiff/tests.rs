use std::sync::Arc;

use super::*;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let id = tape.constant(Tensor::identity(2));
    assert_eq!(id.matmul(a).unwrap().value(), t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let z = tape.constant(Tensor::zeros(2, 1));
    assert_eq!(a.matmul(z).unwrap().value(), Tensor::zeros(2, 1));
    let r = tape.constant(t(&[&[1.0, 2.0]]));
    let c = tape.constant(t(&[&[3.0], &[5.0]]));
    assert_eq!(r.matmul(c).unwrap().item(), 13.0);
    assert!(matches!(r.matmul(r), Err(TensorError::Shape { op: "matmul", .. })));
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let a = tape.constant(t(&[&[2.0, 3.0]]));
    let b = tape.constant(t(&[&[4.0, 5.0]]));
    assert_eq!(a.hadamard(b).unwrap().value(), t(&[&[8.0, 15.0]]));
    let x = tape.constant(t(&[&[1.5, -2.0], &[0.25, 7.0]]));
    let zero = tape.constant(Tensor::zeros(2, 2));
    assert_eq!(x.add(zero).unwrap().value(), x.value());
    assert_eq!(x.sub(x).unwrap().value(), Tensor::zeros(2, 2));
    assert!(a.add(x).is_err());
}

#[test]
fn unary_examples() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().unwrap().item(), 0.5);
    assert_eq!(z.tanh().unwrap().item(), 0.0);
    let neg = tape.constant(Tensor::scalar(-3.2));
    assert_eq!(neg.relu_max0().unwrap().item(), 0.0);
    assert_eq!(neg.neg().unwrap().item(), 3.2);
    assert_eq!(z.exp().unwrap().item(), 1.0);
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::new(1, 3, vec![0.0, 1.0, -1.0]).unwrap().with_grad());
    let loss = x.relu_max0().unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap().get(&x).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn concat_examples() {
    let tape = Tape::new();
    let a = tape.constant(t(&[&[1.0], &[2.0]]));
    let b = tape.constant(t(&[&[3.0], &[4.0]]));
    assert_eq!(tape.concat_cols(&[a, b]).unwrap().value(), t(&[&[1.0, 3.0], &[2.0, 4.0]]));
    assert_eq!(tape.concat_cols(&[a]).unwrap().value(), a.value());
    let c = tape.constant(Tensor::zeros(3, 1));
    assert!(matches!(tape.concat_cols(&[a, c]), Err(TensorError::Shape { .. })));
    assert!(matches!(tape.concat_cols(&[]), Err(TensorError::Argument { .. })));
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    assert_eq!(tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]])).sum().unwrap().item(), 10.0);
    assert_eq!(tape.constant(Tensor::zeros(3, 3)).mean().unwrap().item(), 0.0);
    assert_eq!(tape.constant(Tensor::scalar(7.0)).sum().unwrap().item(), 7.0);
}

#[test]
fn backward_square() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
    let loss = x.hadamard(x).unwrap().sum().unwrap();
    assert_eq!(tape.backward(loss).unwrap().get(&x).unwrap().data()[0], 6.0);
}

#[test]
fn backward_linear_map() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::identity(2));
    let x = tape.leaf(&t(&[&[1.0], &[2.0]]).with_grad());
    let loss = a.matmul(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap().get(&x).unwrap();
    assert_eq!(g, Tensor::ones(2, 1));
}

#[test]
fn fan_out_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_fn(2, 3, |r, c| (r + c) as f64).with_grad());
    let loss = x.sum().unwrap().add(x.sum().unwrap()).unwrap();
    assert_eq!(tape.backward(loss).unwrap().get(&x).unwrap(), Tensor::full(2, 3, 2.0));
}

#[test]
fn second_backward_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(1.0).with_grad());
    let loss = x.exp().unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(2, 2).with_grad());
    assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss((2, 2)));
}

#[test]
fn validating_tape_flags_overflow() {
    let tape = Tape::validating();
    let x = tape.constant(Tensor::scalar(1e300));
    assert_eq!(x.hadamard(x).unwrap_err(), TensorError::NonFinite { op: "hadamard" });
    let plain = Tape::new();
    let y = plain.constant(Tensor::scalar(1e300));
    assert!(y.hadamard(y).unwrap().item().is_infinite());
}

#[test]
fn foreign_vars_are_rejected() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.constant(Tensor::scalar(1.0));
    let b = t2.constant(Tensor::scalar(1.0));
    assert!(matches!(a.add(b), Err(TensorError::ForeignVar { .. })));
}

#[test]
fn structural_ops_match_finite_differences() {
    let x0 = Tensor::from_fn(4, 3, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1);
    let b0 = Tensor::from_fn(1, 3, |_, c| 0.5 - 0.4 * c as f64);
    let idx: Arc<[usize]> = Arc::from(vec![2, 0, 3, 3, 1]);
    let dst: Arc<[usize]> = Arc::from(vec![1, 1, 0, 2, 0]);
    let scales: Arc<[f64]> = Arc::from(vec![0.5, -1.0, 2.0, 1.5]);
    let mask: Arc<[bool]> = Arc::from((0..12).map(|i| i % 3 == 0).collect::<Vec<_>>());
    let fill = Tensor::full(4, 3, 9.0);
    let weights = Tensor::from_fn(4, 3, |r, c| ((r * 3 + c) as f64).sin());

    let eval = |x: &Tensor, b: &Tensor, grad: bool| -> (f64, Option<(Tensor, Tensor)>) {
        let tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_grad());
        let bv = tape.leaf(&b.clone().with_grad());
        let y = xv.add(bv.tile_rows(4).unwrap()).unwrap();
        let y = y.scale_rows(scales.clone()).unwrap().tanh().unwrap();
        let g = y.gather_rows(idx.clone()).unwrap().scatter_add_rows(dst.clone(), 3).unwrap();
        let s = y.slice_rows(1, 3).unwrap().add(g).unwrap();
        let r = s.reshape(1, 9).unwrap().reshape(3, 3).unwrap().scale(0.7).unwrap();
        let full = tape.concat_cols(&[r, r.sigmoid().unwrap()]).unwrap();
        let padded = tape.concat_cols(&[xv, xv]).unwrap().slice_rows(1, 3).unwrap();
        let m = padded.hadamard(full).unwrap().sum().unwrap();
        let w = xv.where_mask(mask.clone(), &fill).unwrap();
        let extra = w.hadamard(tape.constant(weights.clone())).unwrap().mean().unwrap();
        let loss = m.add(extra).unwrap();
        let v = loss.item();
        if !grad {
            return (v, None);
        }
        let grads = tape.backward(loss).unwrap();
        (v, Some((grads.get(&xv).unwrap(), grads.get(&bv).unwrap())))
    };

    let (_, g) = eval(&x0, &b0, true);
    let (gx, gb) = g.unwrap();
    let nx = numeric_grad(&x0, |x| eval(x, &b0, false).0);
    let nb = numeric_grad(&b0, |b| eval(&x0, b, false).0);
    for (a, n) in gx.data().iter().zip(&nx).chain(gb.data().iter().zip(&nb)) {
        assert!((a - n).abs() <= 1e-7 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
    }
}

#[test]
fn where_mask_blocks_gradient_on_filled_entries() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_fn(2, 2, |r, c| (r * 2 + c) as f64).with_grad());
    let mask: Arc<[bool]> = Arc::from(vec![true, false, false, true]);
    let fill = Tensor::full(2, 2, 1e9);
    let y = x.where_mask(mask, &fill).unwrap();
    assert_eq!(y.value().data(), &[1e9, 1.0, 2.0, 1e9]);
    let g = tape.backward(y.sum().unwrap()).unwrap().get(&x).unwrap();
    assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn adam_descends_on_square() {
    let mut params = ParamSet::new();
    params.insert("x", Tensor::scalar(1.0));
    let mut opt = Adam::new(AdamConfig::default(), &params);
    let tape = Tape::new();
    let b = params.bind(&tape);
    let x = b.get("x").unwrap();
    let loss = x.hadamard(x).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    params.absorb(&grads, &b).unwrap();
    opt.step(&mut params).unwrap();
    let x_new = params.get("x").unwrap().data()[0];
    assert!(x_new.abs() < 1.0);
    assert_eq!(opt.steps(), 1);
    assert!(params.get("x").unwrap().grad().is_none());
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut params = ParamSet::new();
    params.insert("x", Tensor::scalar(0.25));
    let mut opt = Adam::new(AdamConfig::default(), &params);
    params.get_mut("x").unwrap().accumulate_grad(&[0.0]).unwrap();
    opt.step(&mut params).unwrap();
    assert_eq!(params.get("x").unwrap().data()[0], 0.25);
}

#[test]
fn adam_requires_gradients() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::zeros(2, 2));
    let mut opt = Adam::new(AdamConfig::default(), &params);
    assert_eq!(opt.step(&mut params).unwrap_err(), TensorError::MissingGrad("w".into()));
}

#[test]
fn adam_converges_on_shifted_quadratic() {
    // Reference trajectory from an independent scalar Adam loop on
    // f(x) = (x - 3)^2 starting at x = 2.5 with lr = 1e-2.
    let reference = {
        let (mut x, mut m, mut v) = (2.5f64, 0.0f64, 0.0f64);
        for k in 1..=200 {
            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x -= 1e-2 * mh / (vh.sqrt() + 1e-8);
        }
        x
    };
    let mut params = ParamSet::new();
    params.insert("x", Tensor::scalar(2.5));
    let mut opt = Adam::new(AdamConfig::default(), &params);
    for _ in 0..200 {
        let tape = Tape::new();
        let b = params.bind(&tape);
        let x = b.get("x").unwrap();
        let d = x.sub(tape.constant(Tensor::scalar(3.0))).unwrap();
        let loss = d.hadamard(d).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        params.absorb(&grads, &b).unwrap();
        opt.step(&mut params).unwrap();
    }
    let x = params.get("x").unwrap().data()[0];
    assert!((x - 3.0).abs() < 1e-2, "x = {x}");
    assert!((x - reference).abs() < 1e-12);
}

#[test]
fn params_json_round_trip_is_exact() {
    let mut p = ParamSet::new();
    p.insert("a.w", Tensor::from_fn(2, 3, |r, c| (r as f64 + 0.1) / (c as f64 + 3.0)));
    p.insert("a.b", Tensor::new(1, 1, vec![std::f64::consts::PI]).unwrap());
    let json = serde_json::to_string(&p.to_file()).unwrap();
    let back = ParamSet::from_file(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back, p);
    assert!(json.contains(PARAMS_VERSION));
}

#[test]
fn clip_grad_norm_caps_norm() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::zeros(1, 2));
    p.get_mut("x").unwrap().accumulate_grad(&[3.0, 4.0]).unwrap();
    assert_eq!(p.clip_grad_norm(1.0), 5.0);
    assert!((p.grad_norm() - 1.0).abs() < 1e-15);
}

#![allow(dead_code)]

use xdseg::tensor::{Tape, Tensor, Var};

/// Central-difference gradient oracle.
///
/// `build` must construct a scalar from the given input vars. Returns, per
/// input, `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
pub fn grad_rel_errors<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Vec<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.scalar(loss)
    };

    let mut errors = Vec::new();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        let mut probe = inputs.to_vec();
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe);
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            *n = (up - down) / (2.0 * h);
        }
        errors.push(rel_error(grad, &numeric));
    }
    errors
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output element matters.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(Tensor::uniform(shape, -1.0, 1.0, seed));
    let p = tape.mul(out, r).unwrap();
    tape.sum(p).unwrap()
}

/// Uniform in [-1, 1] with every |value| ≥ `gap`, away from PReLU's kink.
pub fn away_from_zero(shape: &[usize], gap: f64, seed: u64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::uniform(shape.to_vec(), -1.0, 1.0, seed);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap };
        }
    }
    t
}

/// A permutation of evenly spaced values, so max-pool windows have no
/// near-ties under small perturbations.
pub fn distinct(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let keys = Tensor::<f64>::uniform(vec![n], 0.0, 1.0, seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys.data()[a].total_cmp(&keys.data()[b]));
    let mut data = vec![0.0; n];
    for (rank, &idx) in order.iter().enumerate() {
        data[idx] = -1.0 + 2.0 * rank as f64 / n as f64;
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

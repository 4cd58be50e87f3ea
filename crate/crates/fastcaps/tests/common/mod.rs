//! Shared helpers for the integration suites: central finite differences
//! and an independent straight-line transcription of the routing equations.
//!
//! The oracle here deliberately shares no code with the library: scalar
//! loops, its own softmax and squash, one flat function.
#![allow(dead_code)]

use fastcaps::network::Model;
use fastcaps::tensor::tape::{NodeId, Tape};
use fastcaps::tensor::Tensor;

pub const SQUASH_EPS: f64 = 1e-8;

/// Build a scalar-valued graph over leaf tensors and compare its backward
/// gradients against central finite differences. Returns the max relative
/// error over all leaf coordinates.
pub fn fd_check_tape(
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[slot], input);
        let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
        for i in 0..input.numel() {
            let mut data = input.data().to_vec();
            data[i] += eps;
            perturbed[slot] = Tensor::from_vec(input.dims(), data.clone()).unwrap();
            let fp = eval(&perturbed);
            data[i] -= 2.0 * eps;
            perturbed[slot] = Tensor::from_vec(input.dims(), data).unwrap();
            let fm = eval(&perturbed);
            perturbed[slot] = input.clone();
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Central finite differences of a scalar function at x0.
pub fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + eps;
        let fp = f(&x);
        x[i] = x0[i] - eps;
        let fm = f(&x);
        x[i] = x0[i];
        g.push((fp - fm) / (2.0 * eps));
    }
    g
}

/// max_i |a_i - b_i| / max(|b_i|, floor)
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Flatten all model parameters into one vector.
pub fn flatten_params(model: &Model<f64>) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|p| p.tensor.data().iter().copied())
        .collect()
}

/// Write a flat vector back into the model's parameters.
pub fn unflatten_params(model: &mut Model<f64>, flat: &[f64]) {
    let mut cursor = 0;
    for p in model.params_mut() {
        let n = p.tensor.numel();
        let dims = p.tensor.dims().to_vec();
        p.tensor = Tensor::from_vec(&dims, flat[cursor..cursor + n].to_vec()).unwrap();
        cursor += n;
    }
    assert_eq!(cursor, flat.len());
}

/// Straight-line dynamic routing: direct loop transcription of the parent
/// update (weighted sum + squash) and the coefficient update (softmax of
/// accumulated agreement logits), with children grouped by `group_of`.
/// Returns (v [J*D], c [G*J], b [G*J]).
#[allow(clippy::needless_range_loop)]
pub fn routing_oracle(
    votes: &[f64],
    children: usize,
    parents: usize,
    dim: usize,
    group_of: &[usize],
    groups: usize,
    iterations: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut b = vec![0.0f64; groups * parents];
    let mut c = vec![0.0f64; groups * parents];
    let mut v = vec![0.0f64; parents * dim];

    for _ in 0..iterations {
        // c_g = exp(b_g) / sum_k exp(b_gk), max-subtracted
        for g in 0..groups {
            let row = &b[g * parents..(g + 1) * parents];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..parents {
                denom += (row[j] - mx).exp();
            }
            for j in 0..parents {
                c[g * parents + j] = (row[j] - mx).exp() / denom;
            }
        }
        // s_j = sum_i c[g(i), j] * u_hat[i, j, :]; v_j = squash(s_j)
        for j in 0..parents {
            let mut s = vec![0.0f64; dim];
            for i in 0..children {
                let cij = c[group_of[i] * parents + j];
                for k in 0..dim {
                    s[k] += cij * votes[(i * parents + j) * dim + k];
                }
            }
            let q: f64 = s.iter().map(|x| x * x).sum();
            let factor = q / ((1.0 + q) * (q + SQUASH_EPS).sqrt());
            for k in 0..dim {
                v[j * dim + k] = factor * s[k];
            }
        }
        // b[g, j] += sum_{i in g} u_hat[i, j] . v_j
        for i in 0..children {
            for j in 0..parents {
                let mut dot = 0.0;
                for k in 0..dim {
                    dot += votes[(i * parents + j) * dim + k] * v[j * dim + k];
                }
                b[group_of[i] * parents + j] += dot;
            }
        }
    }
    (v, c, b)
}

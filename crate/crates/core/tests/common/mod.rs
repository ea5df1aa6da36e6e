//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

pub mod suite;

use gridcast::params::ParamStore;
use gridcast::{no_grad, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| r.gen_range(lo..hi)).collect(), shape).unwrap()
}

/// `sum(t * w)` for fixed random weights, so every output coordinate
/// contributes a distinct amount to the scalar loss.
pub fn weighted_sum(t: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = uniform(&mut rng(seed ^ 0x5eed), t.shape(), -1.0, 1.0);
    t.mul(&w).unwrap().sum_all()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn coords(n: usize, max: usize, r: &mut impl Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        sample(r, n, max).into_vec()
    }
}

/// Worst relative error between backprop and central differences over up to
/// `max_coords` coordinates of each input.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    max_coords: usize,
    seed: u64,
) -> f64 {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach_with_grad(true)).collect();
    f(&leaves).backward().unwrap();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad_vec().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for k in coords(leaf.numel(), max_coords, &mut r) {
            let eval = |delta: f64| {
                let moved: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut v = t.to_vec();
                        if j == i {
                            v[k] += delta;
                        }
                        Tensor::from_vec(v, t.shape()).unwrap()
                    })
                    .collect();
                no_grad(|| f(&moved).item())
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[k], numeric));
        }
    }
    worst
}

/// Same check over the parameters of a store.
pub fn check_store(
    store: &mut ParamStore<f64>,
    f: impl Fn(&ParamStore<f64>) -> Tensor<f64>,
    max_coords: usize,
    seed: u64,
) -> (f64, usize) {
    store.zero_grad();
    f(store).backward().unwrap();
    let analytic: Vec<Vec<f64>> = store
        .entries()
        .iter()
        .map(|e| e.value.grad_vec().unwrap_or_else(|| vec![0.0; e.value.numel()]))
        .collect();
    let ids: Vec<_> = store.ids().collect();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (p, &id) in ids.iter().enumerate() {
        let base = store.get(id).to_vec();
        for k in coords(base.len(), max_coords, &mut r) {
            let mut eval = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                store.set_values(id, v).unwrap();
                no_grad(|| f(store).item())
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            store.set_values(id, base.clone()).unwrap();
            worst = worst.max(rel_err(analytic[p][k], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

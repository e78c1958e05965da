//! Shared helpers for the integration suites: a central-difference
//! gradient oracle (independent of the reverse-mode path it checks) and
//! small deterministic fixtures.

#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scdem_core::backbone::{Backbone, BackboneConfig};
use scdem_core::graph::Activation;
use scdem_core::params::ParamSet;
use scdem_core::tensor::Tensor;

/// Central finite differences of a scalar function.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Infinity-norm relative disagreement between two gradient vectors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random point on the interior of the simplex (entries well above the
/// probability floor so FD probes stay in the smooth region).
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Overwrites the values of one parameter entry, keeping shape and flags.
pub fn set_param_values(set: &mut ParamSet, idx: usize, values: &[f64]) {
    let entry = set.entry_mut(idx);
    let shape = entry.tensor.shape().to_vec();
    let trainable = entry.trainable;
    entry.tensor = Tensor::new(shape, values.to_vec())
        .expect("shape preserved")
        .with_requires_grad(trainable);
}

/// Small two-backbone bank for composite-loss checks.
pub fn tiny_bank(seed: u64) -> Vec<Backbone> {
    let cfg = BackboneConfig {
        input_dim: 3,
        trunk_widths: vec![5],
        tail_layers: 2,
        feature_dim: 3,
        activation: Activation::Gelu,
        tail_activations: None,
    };
    (0..2)
        .map(|id| Backbone::new(id, &cfg, seed + id as u64).unwrap())
        .collect()
}

pub fn tiny_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
    Tensor::new(vec![b, d], random_vec(rng, b * d, -1.5, 1.5)).unwrap()
}

/// Best-vs-second-best perfect-assignment gap between equal-size clouds,
/// by exhaustive permutation search (test sizes only).
pub fn assignment_gap(x: &[f64], y: &[f64], b: usize, d: usize) -> f64 {
    let cost = |i: usize, j: usize| -> f64 {
        x[i * d..(i + 1) * d]
            .iter()
            .zip(&y[j * d..(j + 1) * d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut totals = Vec::new();
    let mut perm: Vec<usize> = (0..b).collect();
    permute_visit(&mut perm, 0, &mut |p| {
        totals.push(p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>());
    });
    totals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if totals.len() < 2 {
        f64::INFINITY
    } else {
        totals[1] - totals[0]
    }
}

fn permute_visit(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute_visit(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Largest pairwise squared distance across both clouds, the scale the
/// entropic solver normalizes against.
pub fn cloud_cost_scale(x: &[f64], y: &[f64], b: usize, d: usize) -> f64 {
    let mut m = 0.0_f64;
    for i in 0..b {
        for j in 0..b {
            let c: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&y[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            m = m.max(c);
        }
    }
    m
}

/// Worst relative deviation of the entropic cost from the exact matching
/// cost over `instances` random equal-size clouds (batch sizes 2..=8).
pub fn oracle_equivalence_worst_case(instances: usize) -> f64 {
    use scdem_core::ot::{exact_ot, sinkhorn_distance, OTConfig};
    let cfg = OTConfig {
        epsilon: 1e-3,
        max_iters: 20_000,
        tol: 1e-9,
    };
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let b = 2 + (instance % 7);
        let d = r.random_range(1..5usize);
        let x = random_vec(&mut r, b * d, -3.0, 3.0);
        let y = random_vec(&mut r, b * d, -3.0, 3.0);
        let exact = exact_ot(&x, &y, b, d).unwrap();
        let (entropic, _) = sinkhorn_distance(&x, &y, b, b, d, &cfg).unwrap();
        worst = worst.max((entropic - exact).abs() / exact.max(1e-6));
    }
    worst
}

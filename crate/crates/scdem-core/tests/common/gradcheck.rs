//! Shared implementation of the finite-difference gradient checks, used
//! by both the per-op suite and the acceptance gate.

use super::*;
use rand::Rng;
use scdem_core::backbone::Backbone;
use scdem_core::expert::Expert;
use scdem_core::graph::{Activation, Graph, Var};
use scdem_core::ot::{sinkhorn_node, OTConfig};
use scdem_core::regularizer::{
    com_loss, com_loss_graph, fused_loss, fused_loss_graph, OtHealth, Selector,
};
use scdem_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TOL_OT: f64 = 1e-3;
const TRIALS: usize = 50;

type Builder = dyn Fn(&mut Graph, &[Vec<f64>]) -> (Vec<Var>, Var);

/// Compares reverse-mode and central-difference gradients for one input
/// slot of a scalar loss built on a fresh graph per evaluation.
fn check_slot(build: &Builder, inputs: &[Vec<f64>], slot: usize, tol: f64, label: &str) {
    let mut eval = |x: &[f64]| -> f64 {
        let mut probe: Vec<Vec<f64>> = inputs.to_vec();
        probe[slot] = x.to_vec();
        let mut g = Graph::new();
        let (_, loss) = build(&mut g, &probe);
        g.scalar_value(loss)
    };
    let numeric = finite_diff(&mut eval, &inputs[slot], H);

    let mut g = Graph::new();
    let (leaves, loss) = build(&mut g, inputs);
    g.backward(loss).unwrap();
    let analytic = g
        .grad(leaves[slot])
        .map(|v| v.to_vec())
        .unwrap_or_else(|| vec![0.0; inputs[slot].len()]);

    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "{label}: slot {slot} rel err {err:.3e} ≥ {tol:e}");
}

pub fn affine_gradients() {
    let mut r = rng(11);
    for trial in 0..TRIALS {
        let (b, k, n) = (
            r.random_range(1..4usize),
            r.random_range(1..4usize),
            r.random_range(1..4usize),
        );
        let inputs = vec![
            random_vec(&mut r, b * k, -2.0, 2.0),
            random_vec(&mut r, k * n, -2.0, 2.0),
            random_vec(&mut r, n, -1.0, 1.0),
        ];
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let x = g.leaf(vals[0].clone(), vec![b, k], true);
            let w = g.leaf(vals[1].clone(), vec![k, n], true);
            let bias = g.leaf(vals[2].clone(), vec![n], true);
            let out = g.affine(x, w, bias).unwrap();
            let act = g.activation(out, Activation::Tanh);
            (vec![x, w, bias], g.sum(act))
        };
        for slot in 0..3 {
            check_slot(&build, &inputs, slot, TOL, &format!("affine t{trial}"));
        }
    }
}

pub fn activation_gradients() {
    let mut r = rng(12);
    for kind in [Activation::Relu, Activation::Gelu, Activation::Tanh] {
        for trial in 0..TRIALS {
            let n = r.random_range(1..6usize);
            // Keep relu probes away from the kink at zero.
            let vals: Vec<f64> = random_vec(&mut r, n, -2.0, 2.0)
                .into_iter()
                .map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v })
                .collect();
            let scale = random_vec(&mut r, n, -1.0, 1.0);
            let inputs = vec![vals];
            let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
                let x = g.leaf(vals[0].clone(), vec![vals[0].len()], true);
                let s = g.leaf(scale.clone(), vec![scale.len()], false);
                let a = g.activation(x, kind);
                let mixed = g.add(a, s).unwrap();
                let sq = g.activation(mixed, Activation::Tanh);
                (vec![x], g.sum(sq))
            };
            check_slot(&build, &inputs, 0, TOL, &format!("{kind} t{trial}"));
        }
    }
}

pub fn softmax_cross_entropy_gradients() {
    let mut r = rng(14);
    for trial in 0..TRIALS {
        let (b, u) = (r.random_range(1..4usize), r.random_range(2..5usize));
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..u)).collect();
        let inputs = vec![random_vec(&mut r, b * u, -2.0, 2.0)];
        let labels2 = labels.clone();
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let x = g.leaf(vals[0].clone(), vec![b, u], true);
            let p = g.softmax(x).unwrap();
            (vec![x], g.cross_entropy(p, &labels2).unwrap())
        };
        check_slot(&build, &inputs, 0, TOL, &format!("softmax+ce t{trial}"));
    }
}

pub fn softmax_into_kl_gradients() {
    let mut r = rng(23);
    for trial in 0..TRIALS {
        let u = r.random_range(2..5usize);
        let inputs = vec![
            random_vec(&mut r, u, -2.0, 2.0),
            random_vec(&mut r, u, -2.0, 2.0),
        ];
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let a = g.leaf(vals[0].clone(), vec![1, u], true);
            let b2 = g.leaf(vals[1].clone(), vec![1, u], true);
            let p = g.softmax(a).unwrap();
            let q = g.softmax(b2).unwrap();
            (vec![a, b2], g.kl_divergence(p, q).unwrap())
        };
        check_slot(&build, &inputs, 0, TOL, &format!("softmax+kl-p t{trial}"));
        check_slot(&build, &inputs, 1, TOL, &format!("softmax+kl-q t{trial}"));
    }
}

pub fn cross_entropy_on_probs_gradients() {
    let mut r = rng(15);
    for trial in 0..TRIALS {
        let u = r.random_range(2..5usize);
        let labels = vec![r.random_range(0..u)];
        let inputs = vec![random_simplex(&mut r, u)];
        let labels2 = labels.clone();
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let p = g.leaf(vals[0].clone(), vec![1, u], true);
            (vec![p], g.cross_entropy(p, &labels2).unwrap())
        };
        check_slot(&build, &inputs, 0, TOL, &format!("ce t{trial}"));
    }
}

pub fn kl_divergence_gradients() {
    let mut r = rng(16);
    for trial in 0..TRIALS {
        let u = r.random_range(2..6usize);
        let inputs = vec![random_simplex(&mut r, u), random_simplex(&mut r, u)];
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let p = g.leaf(vals[0].clone(), vec![u], true);
            let q = g.leaf(vals[1].clone(), vec![u], true);
            (vec![p, q], g.kl_divergence(p, q).unwrap())
        };
        check_slot(&build, &inputs, 0, TOL, &format!("kl-p t{trial}"));
        check_slot(&build, &inputs, 1, TOL, &format!("kl-q t{trial}"));
    }
}

pub fn entropy_gradients() {
    let mut r = rng(17);
    for trial in 0..TRIALS {
        let u = r.random_range(2..6usize);
        let inputs = vec![random_simplex(&mut r, u)];
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let p = g.leaf(vals[0].clone(), vec![u], true);
            (vec![p], g.entropy(p))
        };
        check_slot(&build, &inputs, 0, TOL, &format!("entropy t{trial}"));
    }
}

pub fn concat_gradients() {
    let mut r = rng(18);
    for trial in 0..TRIALS {
        let b = r.random_range(1..3usize);
        let (w1, w2) = (r.random_range(1..3usize), r.random_range(1..3usize));
        let inputs = vec![
            random_vec(&mut r, b * w1, -1.0, 1.0),
            random_vec(&mut r, b * w2, -1.0, 1.0),
        ];
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let a = g.leaf(vals[0].clone(), vec![b, w1], true);
            let c = g.leaf(vals[1].clone(), vec![b, w2], true);
            let cat = g.concat(&[a, c]).unwrap();
            let act = g.activation(cat, Activation::Tanh);
            (vec![a, c], g.sum(act))
        };
        check_slot(&build, &inputs, 0, TOL, &format!("concat-a t{trial}"));
        check_slot(&build, &inputs, 1, TOL, &format!("concat-b t{trial}"));
    }
}

pub fn stack_and_weighted_sum_gradients() {
    let mut r = rng(22);
    for trial in 0..TRIALS {
        let l = r.random_range(1..4usize);
        let d = r.random_range(1..4usize);
        let mut inputs = vec![random_vec(&mut r, l, -1.0, 1.0)];
        for _ in 0..l {
            inputs.push(random_vec(&mut r, d, -1.0, 1.0));
        }
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let mut leaves = Vec::new();
            let coeff_leaf = g.leaf(vals[0].clone(), vec![l], true);
            leaves.push(coeff_leaf);
            let layers: Vec<Var> = (0..l)
                .map(|k| {
                    let v = g.leaf(vals[1 + k].clone(), vec![1, d], true);
                    leaves.push(v);
                    v
                })
                .collect();
            // Route coefficients through softmax-of-stacked-means, the same
            // composition attention uses.
            let scalars: Vec<Var> = layers.iter().map(|&z| g.mean_all(z)).collect();
            let stacked = g.stack_scalars(&scalars).unwrap();
            let gate = g.softmax(stacked).unwrap();
            let gated = g.add(gate, coeff_leaf).unwrap();
            let fused = g.weighted_sum(gated, &layers).unwrap();
            let act = g.activation(fused, Activation::Gelu);
            (leaves, g.sum(act))
        };
        for slot in 0..=l {
            check_slot(&build, &inputs, slot, TOL, &format!("stack+wsum t{trial}"));
        }
    }
}

pub fn sinkhorn_output_gradients() {
    // Fixed-plan gradient against finite differences of the full
    // re-solved transport. The fixed plan is the declared derivative away
    // from assignment ties, so near-degenerate draws (best and runner-up
    // matchings closer than a few regularization widths) are resampled.
    let cfg = OTConfig {
        epsilon: 1e-3,
        max_iters: 50_000,
        tol: 1e-10,
    };
    let mut r = rng(19);
    let mut done = 0;
    while done < TRIALS {
        // Equal-size clouds: the case every consistency loss produces
        // (live batch vs snapshot batch), where the unregularized optimum
        // is a strict permutation.
        let b = r.random_range(2..5usize);
        let d = r.random_range(1..4usize);
        let inputs = vec![
            random_vec(&mut r, b * d, -2.0, 2.0),
            random_vec(&mut r, b * d, -2.0, 2.0),
        ];
        let scale = cloud_cost_scale(&inputs[0], &inputs[1], b, d);
        if assignment_gap(&inputs[0], &inputs[1], b, d) < 50.0 * cfg.epsilon * scale {
            continue;
        }
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let x = g.leaf(vals[0].clone(), vec![b, d], true);
            let y = g.leaf(vals[1].clone(), vec![b, d], true);
            (vec![x, y], sinkhorn_node(g, x, y, &cfg).unwrap().0)
        };
        check_slot(&build, &inputs, 0, TOL_OT, &format!("sinkhorn-x t{done}"));
        check_slot(&build, &inputs, 1, TOL_OT, &format!("sinkhorn-y t{done}"));
        done += 1;
    }
}

pub fn com_loss_gradients_through_frozen_experts() {
    let mut r = rng(20);
    for trial in 0..TRIALS {
        let d = r.random_range(2..4usize);
        let b = r.random_range(1..3usize);
        let mut e1 = Expert::new(1, d, 3, Activation::Gelu, vec![0, 1], 100 + trial as u64).unwrap();
        let mut e2 = Expert::new(2, d, 3, Activation::Gelu, vec![2, 3], 200 + trial as u64).unwrap();
        e1.freeze();
        e2.freeze();
        let experts = vec![e1, e2];
        let inputs = vec![
            random_vec(&mut r, b * d, -1.5, 1.5),
            random_vec(&mut r, b * d, -1.5, 1.5),
        ];
        let experts2 = experts.clone();
        let build = move |g: &mut Graph, vals: &[Vec<f64>]| {
            let live = g.leaf(vals[0].clone(), vec![b, d], true);
            let frozen = g.leaf(vals[1].clone(), vec![b, d], true);
            let loss = com_loss_graph(g, &experts2, live, frozen).unwrap();
            (vec![live, frozen], loss)
        };
        check_slot(&build, &inputs, 0, TOL, &format!("com-live t{trial}"));
        check_slot(&build, &inputs, 1, TOL, &format!("com-frozen t{trial}"));

        let mut g = Graph::new();
        let (_, loss) = build(&mut g, &inputs);
        let direct = com_loss(
            &experts,
            &Tensor::new(vec![b, d], inputs[0].clone()).unwrap(),
            &Tensor::new(vec![b, d], inputs[1].clone()).unwrap(),
        )
        .unwrap();
        assert!((g.scalar_value(loss) - direct).abs() < 1e-12);
    }
}

/// One fused-loss gradient trial: analytic tail/selector gradients versus
/// finite differences on a random coordinate subset. Returns false when
/// the draw lands near an assignment tie, where the fixed-plan derivative
/// is not defined; the caller resamples.
fn fused_trial(trial: u64, r: &mut rand_chacha::ChaCha8Rng, check_selector: bool) -> bool {
    let cfg = OTConfig {
        epsilon: 1e-3,
        max_iters: 50_000,
        tol: 1e-10,
    };
    let mut bank: Vec<Backbone> = tiny_bank(300 + trial);
    let snaps: Vec<_> = bank.iter().map(Backbone::snapshot).collect();
    // Perturb the live tails so the loss is away from its minimum.
    for bb in &mut bank {
        for idx in 0..bb.params.len() {
            if !bb.params.entry(idx).trainable {
                continue;
            }
            let vals: Vec<f64> = bb
                .params
                .entry(idx)
                .tensor
                .values()
                .iter()
                .map(|v| v + r.random_range(-0.05..0.05))
                .collect();
            set_param_values(&mut bb.params, idx, &vals);
        }
    }
    let mut selectors: Vec<Selector> = bank
        .iter()
        .map(|bb| Selector::new(bb.id, 2, bb.feature_dim(), 400 + trial).unwrap())
        .collect();
    let x = tiny_batch(r, 4, 3);

    // Degeneracy screen on the actual transported clouds.
    for (bb, (snap, sel)) in bank.iter().zip(snaps.iter().zip(&selectors)) {
        let live_taps: Vec<Tensor> = (1..=bb.tail_depth())
            .map(|k| bb.layer_features(&x, k).unwrap())
            .collect();
        let snap_taps: Vec<Tensor> = (1..=bb.tail_depth())
            .map(|k| snap.layer_features(&x, k).unwrap())
            .collect();
        let alpha_live = scdem_core::regularizer::attention_weights(sel, &live_taps).unwrap();
        let alpha_snap = scdem_core::regularizer::attention_weights(sel, &snap_taps).unwrap();
        let fused_live = scdem_core::regularizer::fused_features(&alpha_live, &live_taps).unwrap();
        let fused_snap = scdem_core::regularizer::fused_features(&alpha_snap, &snap_taps).unwrap();
        let (b, d) = (fused_live.rows(), fused_live.cols());
        let scale = cloud_cost_scale(fused_live.values(), fused_snap.values(), b, d);
        if assignment_gap(fused_live.values(), fused_snap.values(), b, d)
            < 50.0 * cfg.epsilon * scale
        {
            return false;
        }
    }

    let set_idx = r.random_range(0..bank.len());
    let entry_idx = if check_selector {
        0 // selector first-layer weight
    } else {
        bank[set_idx]
            .params
            .iter()
            .position(|e| e.trainable)
            .expect("tails are trainable")
    };

    // Analytic gradient through one graph, written back into the very
    // parameter sets that were bound.
    let analytic: Vec<f64> = {
        let mut g = Graph::new();
        let xv = g.input(&x);
        let live_taps: Vec<Vec<Var>> = bank
            .iter()
            .map(|bb| bb.tail_taps_graph(&mut g, xv).unwrap())
            .collect();
        let snap_taps: Vec<Vec<Var>> = snaps
            .iter()
            .map(|s| s.tail_taps_graph(&mut g, xv).unwrap())
            .collect();
        let mut health = OtHealth::default();
        let loss = fused_loss_graph(&mut g, &selectors, &live_taps, &snap_taps, &cfg, &mut health)
            .unwrap();
        g.backward(loss).unwrap();
        if check_selector {
            g.write_grads(&mut selectors[set_idx].params);
            selectors[set_idx].params.entry(entry_idx).tensor.grad.clone().unwrap()
        } else {
            g.write_grads(&mut bank[set_idx].params);
            bank[set_idx].params.entry(entry_idx).tensor.grad.clone().unwrap()
        }
    };

    let base = if check_selector {
        selectors[set_idx].params.entry(entry_idx).tensor.values().to_vec()
    } else {
        bank[set_idx].params.entry(entry_idx).tensor.values().to_vec()
    };
    let loss_at = |probe: &[f64]| -> f64 {
        let mut bank_p = bank.clone();
        let mut sel_p = selectors.clone();
        if check_selector {
            set_param_values(&mut sel_p[set_idx].params, entry_idx, probe);
        } else {
            set_param_values(&mut bank_p[set_idx].params, entry_idx, probe);
        }
        fused_loss(&bank_p, &snaps, &sel_p, &x, &cfg).unwrap().0
    };

    // Random coordinate subset keeps the suite inside its runtime budget.
    let n_coords = base.len().min(5);
    let mut coords: Vec<usize> = (0..base.len()).collect();
    for i in 0..n_coords {
        let j = r.random_range(i..coords.len());
        coords.swap(i, j);
    }
    let mut ana_sub = Vec::new();
    let mut num_sub = Vec::new();
    let mut probe = base.clone();
    for &c in &coords[..n_coords] {
        probe[c] = base[c] + H;
        let up = loss_at(&probe);
        probe[c] = base[c] - H;
        let down = loss_at(&probe);
        probe[c] = base[c];
        ana_sub.push(analytic[c]);
        num_sub.push((up - down) / (2.0 * H));
    }
    let err = max_rel_err(&ana_sub, &num_sub);
    assert!(
        err < TOL_OT,
        "fused trial {trial} ({}) rel err {err:.3e}",
        if check_selector { "selector" } else { "tail" }
    );
    true
}

pub fn fused_loss_gradients_wrt_tail_parameters() {
    let mut r = rng(21);
    let mut done = 0;
    let mut trial = 0;
    while done < TRIALS as u64 {
        if fused_trial(trial, &mut r, false) {
            done += 1;
        }
        trial += 1;
    }
}

pub fn fused_loss_gradients_wrt_selector_parameters() {
    let mut r = rng(24);
    let mut done = 0;
    let mut trial = 0;
    while done < TRIALS as u64 {
        if fused_trial(1000 + trial, &mut r, true) {
            done += 1;
        }
        trial += 1;
    }
}

/// Runs every gradient check in sequence; used by the acceptance gate.
pub fn run_full_suite() {
    affine_gradients();
    activation_gradients();
    softmax_cross_entropy_gradients();
    softmax_into_kl_gradients();
    cross_entropy_on_probs_gradients();
    kl_divergence_gradients();
    entropy_gradients();
    concat_gradients();
    stack_and_weighted_sum_gradients();
    sinkhorn_output_gradients();
    com_loss_gradients_through_frozen_experts();
    fused_loss_gradients_wrt_tail_parameters();
    fused_loss_gradients_wrt_selector_parameters();
}

//! Cross-checks of reverse-mode gradients against the finite-difference
//! oracles, on random computation graphs and on the real transformer loss.

use epgs_lab::epgs::{build_answer_mask, masked_loss_grad, masked_targets};
use epgs_lab::model::{ForwardInput, Model, ModelConfig, ParamLocation, ParamScope};
use epgs_lab::oracle::{dot, finite_diff_grad, hvp, max_rel_err};
use epgs_lab::rng;
use epgs_lab::tape::Tape;
use rand::Rng;

mod common;
use common::{Plan, PlanOp};

#[test]
fn backward_matches_finite_differences_on_50_random_graphs() {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let plan = loop {
            let p = Plan::random(seed * 31 + 7);
            if p.param_count() <= 64 {
                break p;
            }
        };
        let n = plan.param_count();
        let mut r = rng::stream(seed, "graph-params");
        let flat: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();

        let (_, grad) = plan.eval(&flat, true);
        let grad = grad.unwrap();
        let fd = finite_diff_grad(|p| plan.eval(p, false).0, &flat, 2e-5).unwrap();
        let err = max_rel_err(&grad, &fd, 1e-8);
        worst = worst.max(err);
        assert!(
            err <= 1e-4,
            "graph seed {seed}: max relative error {err} (plan {:?})",
            plan.ops
        );
    }
    println!("worst relative error over 50 graphs: {worst:.3e}");
}

#[test]
fn random_mlp_backward_matches_finite_differences() {
    // 3-layer MLP with ~10 parameters, checked coordinate by coordinate.
    let plan = Plan {
        rows: 1,
        cols: 2,
        ops: vec![PlanOp::Matmul(2), PlanOp::Gelu, PlanOp::Matmul(2), PlanOp::Tanh, PlanOp::Matmul(1)],
    };
    assert_eq!(plan.param_count(), 12);
    let mut r = rng::stream(17, "mlp-params");
    let flat: Vec<f64> = (0..plan.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, grad) = plan.eval(&flat, true);
    let fd = finite_diff_grad(|p| plan.eval(p, false).0, &flat, 1e-5).unwrap();
    let err = max_rel_err(&grad.unwrap(), &fd, 1e-8);
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn transformer_masked_loss_gradient_matches_finite_differences() {
    // Cross-check backward against the central-difference oracle on 8
    // sampled last-block coordinates of the real model.
    let model = Model::init(ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 24,
        max_seq_len: 10,
        seed: 77,
    })
    .unwrap();
    let full = vec![3usize, 5, 7, 9, 2, 11, 12, 1];
    let mask = build_answer_mask(5, &full).unwrap();
    let e = model.embed(&full).unwrap();
    let loc = ParamLocation::LastBlock;
    let (_, g) = masked_loss_grad(&model, &e, &full, &mask, &loc).unwrap();

    let theta0 = model.flatten_params(&loc).unwrap();
    let mut r = rng::stream(5, "coord-sample");
    let coords: Vec<usize> = (0..8).map(|_| r.random_range(0..theta0.len())).collect();

    let f = |coord_vals: &[f64]| -> f64 {
        let mut m = model.clone();
        let mut theta = theta0.clone();
        for (&c, &v) in coords.iter().zip(coord_vals) {
            theta[c] = v;
        }
        m.write_params(&loc, &theta).unwrap();
        epgs_lab::epgs::masked_loss(&m, &e, &full, &mask).unwrap()
    };
    let at: Vec<f64> = coords.iter().map(|&c| theta0[c]).collect();
    let fd = finite_diff_grad(f, &at, 1e-5).unwrap();
    for (i, &c) in coords.iter().enumerate() {
        let rel = (g.values[c] - fd[i]).abs() / g.values[c].abs().max(fd[i].abs()).max(1e-8);
        assert!(rel <= 1e-4, "coordinate {c}: backward {} vs fd {}", g.values[c], fd[i]);
    }
}

#[test]
fn hvp_is_symmetric_on_smooth_functions() {
    // u' H v == v' H u for the Hessian of a smooth scalar function.
    let plan = Plan {
        rows: 2,
        cols: 3,
        ops: vec![PlanOp::Matmul(3), PlanOp::Tanh, PlanOp::Matmul(2), PlanOp::Gelu],
    };
    let n = plan.param_count();
    let mut r = rng::stream(23, "hvp-sym");
    let theta: Vec<f64> = (0..n).map(|_| r.random_range(-0.8..0.8)).collect();
    let u: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();

    let grad = |p: &[f64]| plan.eval(p, true).1.unwrap();
    let hu = hvp(grad, &theta, &u, 1e-5).unwrap();
    let hv = hvp(grad, &theta, &v, 1e-5).unwrap();
    let left = dot(&v, &hu);
    let right = dot(&u, &hv);
    let rel = (left - right).abs() / left.abs().max(right.abs()).max(1e-10);
    assert!(rel <= 1e-5, "asymmetry: {left} vs {right} (rel {rel})");
}

#[test]
fn causal_masking_blocks_gradient_leaks() {
    // Gradient w.r.t. the embedding rows after the last kept position is
    // zero even when every parameter is tracked.
    let model = Model::init(ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 10,
        seed: 13,
    })
    .unwrap();
    let full = vec![3usize, 5, 7, 9, 2, 11, 12, 1];
    let mask = build_answer_mask(5, &full).unwrap();
    let e = model.embed(&full).unwrap();

    let mut tape = Tape::new();
    let (_, fwd) = model
        .forward_on_tape(&mut tape, ForwardInput::Embeddings(&e), ParamScope::All, true)
        .unwrap();
    let loss = tape.cross_entropy_masked(fwd.logits, &masked_targets(&full, &mask));
    tape.backward(loss).unwrap();
    let g = tape.grad(fwd.input_embeddings).unwrap();
    let d = model.config().d_model;
    for row in 6..8 {
        assert!(
            g[row * d..(row + 1) * d].iter().all(|&x| x == 0.0),
            "row {row} received gradient"
        );
    }
}

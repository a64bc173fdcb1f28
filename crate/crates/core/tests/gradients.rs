//! Analytic gradients against central differences of an independently
//! written loss.

mod common;

use comet::ndmath::{finite_diff_check, AdamW, Matrix, Rng};
use comet::network::{accumulate_objective, forward_window, ModelParams};
use comet::train::batch_gradient;
use comet::tta::contrastive_loss;
use common::oracle::{check_config, surrogate};
use common::{random_matrix, toy_config};

#[test]
fn total_loss_gradient_on_three_toy_configs() {
    let configs = [
        (toy_config(4, 2, 3, &[(2, 1), (4, 2)], 12), 2),
        (toy_config(8, 4, 4, &[(3, 3), (6, 2)], 16), 3),
        (toy_config(6, 3, 2, &[(2, 2), (5, 1)], 10), 1),
    ];
    for (n, (cfg, vars)) in configs.iter().enumerate() {
        let err = check_config(cfg, *vars, 100 + n as u64);
        assert!(err <= 1e-4, "config {n}: max relative error {err}");
    }
}

#[test]
fn surrogate_matches_forward_losses_at_base() {
    let cfg = toy_config(4, 2, 3, &[(2, 1), (4, 2)], 12);
    let mut rng = Rng::new(9);
    let params = ModelParams::init(&cfg, 2, &mut rng).unwrap();
    let window = random_matrix(12, 2, &mut rng);
    let fwd = forward_window(&params, &window).unwrap();
    let e = fwd.num_embeddings();
    let mut g = params.zeros_like();
    let parts = accumulate_objective(&params, &fwd, &vec![1.0 / e as f64; e], None, 0.7, 1.3, &mut g).unwrap();
    let oracle = surrogate(&params, &params, &window, 0.7, 1.3);
    assert!((parts.total(0.7, 1.3) - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
}

#[test]
fn contrastive_gradient_on_six_embeddings() {
    let mut rng = Rng::new(21);
    for trial in 0..3 {
        let x = random_matrix(6, 5, &mut rng);
        let labels = [0, 1, 0, 1, 1, 0];
        let tau = [0.1, 0.5, 1.0][trial];
        let (_, grad) = contrastive_loss(&x, &labels, tau).unwrap();
        let err = finite_diff_check(|p| contrastive_loss(&p[0], &labels, tau).unwrap().0, &[x], &[grad], 1e-6).unwrap();
        assert!(err <= 1e-4, "τ={tau}: {err}");
    }
}

#[test]
fn train_step_equals_hand_composition() {
    let cfg = toy_config(4, 2, 3, &[(2, 1), (4, 2)], 12);
    let mut rng = Rng::new(4);
    let params = ModelParams::init(&cfg, 2, &mut rng).unwrap();
    let windows: Vec<Matrix> = (0..3).map(|_| random_matrix(12, 2, &mut rng)).collect();
    let refs: Vec<&Matrix> = windows.iter().collect();

    let (grads, _) = batch_gradient(&params, &refs, &cfg).unwrap();
    let mut a = params.clone();
    AdamW::new(1e-3, 5e-4).step(&mut a.tensors_mut(), &grads.tensors()).unwrap();

    // hand: per-window accumulate with weight 1/(B·E), sum in order, then step
    let mut hand = params.zeros_like();
    for w in &windows {
        let fwd = forward_window(&params, w).unwrap();
        let e = fwd.num_embeddings();
        let mut g = params.zeros_like();
        let weights = vec![1.0 / (3 * e) as f64; e];
        accumulate_objective(&params, &fwd, &weights, None, cfg.train.alpha, cfg.train.beta, &mut g).unwrap();
        hand.add_assign(&g).unwrap();
    }
    let mut b = params.clone();
    AdamW::new(1e-3, 5e-4).step(&mut b.tensors_mut(), &hand.tensors()).unwrap();
    assert_eq!(a, b);
}

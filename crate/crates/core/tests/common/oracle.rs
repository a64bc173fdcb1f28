//! Independent loop-based forward pass and the stop-gradient surrogate
//! loss used as the finite-difference oracle.

use comet::config::RunConfig;
use comet::ndmath::{finite_diff_check, squared_distance, Matrix, Rng};
use comet::network::{accumulate_objective, forward_window, ModelParams};

use super::random_matrix;

/// Encoder output per `[var][patch]`, computed with plain loops.
pub fn oracle_encode(params: &ModelParams, k: usize, window: &Matrix) -> Vec<Vec<Vec<f64>>> {
    let sp = &params.scales[k];
    let spec = params.scale_specs[k];
    let (len, vars) = window.shape();
    let n = (len - spec.patch) / spec.stride + 1;
    let h = sp.series_w[0].rows();
    let dc = sp.core_w.rows();
    let d = sp.fuse_w.rows();
    let patch = |i: usize, j: usize| -> Vec<f64> {
        (0..spec.patch).map(|t| window.get(j * spec.stride + t, i)).collect()
    };
    let mut out = vec![vec![vec![0.0; d]; n]; vars];
    for j in 0..n {
        let concat: Vec<f64> = (0..vars).flat_map(|i| patch(i, j)).collect();
        let core: Vec<f64> = (0..dc)
            .map(|r| sp.core_b.get(0, r) + (0..concat.len()).map(|c| sp.core_w.get(r, c) * concat[c]).sum::<f64>())
            .collect();
        for i in 0..vars {
            let p = patch(i, j);
            let series: Vec<f64> = (0..h)
                .map(|r| sp.series_b[i].get(0, r) + (0..p.len()).map(|c| sp.series_w[i].get(r, c) * p[c]).sum::<f64>())
                .collect();
            let joined: Vec<f64> = series.iter().chain(&core).copied().collect();
            for r in 0..d {
                out[i][j][r] =
                    sp.fuse_b.get(0, r) + (0..joined.len()).map(|c| sp.fuse_w.get(r, c) * joined[c]).sum::<f64>();
            }
        }
    }
    out
}

pub fn set_tensors(base: &ModelParams, values: &[Matrix]) -> ModelParams {
    let mut p = base.clone();
    for (t, v) in p.tensors_mut().into_iter().zip(values) {
        *t = v.clone();
    }
    p
}

/// Mean loss over all embeddings with every stop-gradient quantity frozen at
/// `base`: decoder input `z_e(θ) − z_e⁰ + z_q⁰`, codebook term
/// `‖C(θ)[q⁰] − z_e⁰‖²`, commitment term `‖z_q⁰ − z_e(θ)‖²`.
pub fn surrogate(base: &ModelParams, theta: &ModelParams, window: &Matrix, alpha: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..base.scales.len() {
        let ze0 = oracle_encode(base, k, window);
        let ze = oracle_encode(theta, k, window);
        let spec = base.scale_specs[k];
        let sp = &theta.scales[k];
        for i in 0..ze.len() {
            for j in 0..ze[i].len() {
                let cb0 = &base.codebooks[k];
                let q0 = (0..cb0.len())
                    .min_by(|&a, &b| {
                        squared_distance(&ze0[i][j], cb0.entry(a))
                            .total_cmp(&squared_distance(&ze0[i][j], cb0.entry(b)))
                    })
                    .unwrap();
                let zq0 = cb0.entry(q0);
                let input: Vec<f64> = (0..zq0.len()).map(|r| ze[i][j][r] - ze0[i][j][r] + zq0[r]).collect();
                let mut rec = 0.0;
                for t in 0..spec.patch {
                    let y = sp.dec_b.get(0, t) + (0..input.len()).map(|c| sp.dec_w.get(t, c) * input[c]).sum::<f64>();
                    let target = window.get(j * spec.stride + t, i);
                    rec += (y - target) * (y - target);
                }
                let cb = squared_distance(theta.codebooks[k].entry(q0), &ze0[i][j]);
                let cm = squared_distance(zq0, &ze[i][j]);
                total += rec / spec.patch as f64 + alpha * cb + beta * cm;
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn check_config(cfg: &RunConfig, vars: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut params = ModelParams::init(cfg, vars, &mut rng).unwrap();
    // non-zero biases so their gradients are exercised too
    for sp in &mut params.scales {
        for b in sp.series_b.iter_mut().chain([&mut sp.core_b, &mut sp.fuse_b, &mut sp.dec_b]) {
            b.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let window = random_matrix(cfg.window.length, vars, &mut rng);
    let (alpha, beta) = (0.7, 1.3);
    let fwd = forward_window(&params, &window).unwrap();
    let e = fwd.num_embeddings();
    let mut grads = params.zeros_like();
    accumulate_objective(&params, &fwd, &vec![1.0 / e as f64; e], None, alpha, beta, &mut grads).unwrap();

    let values: Vec<Matrix> = params.tensors().into_iter().cloned().collect();
    let analytic: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let base = params.clone();
    // the surrogate is quadratic along every coordinate, so a wide step is exact
    finite_diff_check(
        |v| surrogate(&base, &set_tensors(&base, v), &window, alpha, beta),
        &values,
        &analytic,
        1e-3,
    )
    .unwrap()
}


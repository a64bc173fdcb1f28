//! Test-time adaptation: activation-based pseudo-labels, the supervised
//! contrastive objective and the per-batch optimizer step.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CometError, Result};
use crate::ndmath::{dot, AdamW, Matrix};
use crate::network::{accumulate_objective, forward_window, LossParts, ModelParams, WindowForward};
use crate::vq::{build_memory_bank, ActivationSet, MemoryBank};

pub const NORMAL: u8 = 0;
pub const ABNORMAL: u8 = 1;

/// One label per embedding of `fwd` in canonical order: normal iff the
/// selected `(scale, index)` was activated during training.
pub fn pseudo_labels(fwd: &WindowForward, activations: &ActivationSet) -> Vec<u8> {
    fwd.positions()
        .map(|(k, i, j)| {
            if activations.contains(k, fwd.index(k, i, j)) {
                NORMAL
            } else {
                ABNORMAL
            }
        })
        .collect()
}

/// Supervised contrastive loss on cosine similarity, averaged over anchors.
///
/// For anchor `n` with positives `P(n)` (same label, excluding itself):
/// `−(1/|P|) Σ_p log(exp(s_np/τ) / Σ_{a≠n} exp(s_na/τ))`. Anchors without
/// positives contribute zero but still count in the mean. Returns the loss
/// and its gradient with respect to every row of `embeddings`.
pub fn contrastive_loss(embeddings: &Matrix, labels: &[u8], tau: f64) -> Result<(f64, Matrix)> {
    let (n, d) = embeddings.shape();
    if labels.len() != n {
        return Err(CometError::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if !(tau > 0.0) {
        return Err(CometError::config("tta.temperature", "must be positive"));
    }
    let mut grad = Matrix::zeros(n, d);
    if n < 2 {
        return Ok((0.0, grad));
    }

    let norms: Vec<f64> = embeddings
        .iter_rows()
        .map(|r| dot(r, r).sqrt().max(1e-12))
        .collect();
    let mut unit = embeddings.clone();
    for (r, nrm) in norms.iter().enumerate() {
        unit.row_mut(r).iter_mut().for_each(|v| *v /= nrm);
    }
    let sim = unit.matmul_t(&unit)?;

    // Coefficients of ∂L/∂s_na, one row per anchor.
    let coeffs: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|a| {
            let positives = (0..n).filter(|&p| p != a && labels[p] == labels[a]).count();
            let mut row = vec![0.0; n];
            if positives == 0 {
                return (0.0, row);
            }
            let logits: Vec<f64> = (0..n).map(|b| sim.get(a, b) / tau).collect();
            let peak = (0..n)
                .filter(|&b| b != a)
                .map(|b| logits[b])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).filter(|&b| b != a).map(|b| (logits[b] - peak).exp()).sum();
            let log_z = peak + z.ln();
            let inv_p = 1.0 / positives as f64;
            let mut loss = 0.0;
            for b in (0..n).filter(|&b| b != a) {
                let soft = (logits[b] - log_z).exp();
                let positive = labels[b] == labels[a];
                if positive {
                    loss -= inv_p * (logits[b] - log_z);
                }
                row[b] = (soft - if positive { inv_p } else { 0.0 }) / (tau * n as f64);
            }
            (loss, row)
        })
        .collect();

    let loss = coeffs.iter().map(|(l, _)| l).sum::<f64>() / n as f64;

    // ∂L/∂u: each s_ab = u_a·u_b feeds both endpoints.
    let mut du = Matrix::zeros(n, d);
    for (a, (_, row)) in coeffs.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for t in 0..d {
                let ub = unit.get(b, t);
                let ua = unit.get(a, t);
                du.data_mut()[a * d + t] += c * ub;
                du.data_mut()[b * d + t] += c * ua;
            }
        }
    }
    // Through the normalization u = x/‖x‖.
    for r in 0..n {
        let u = unit.row(r);
        let g = du.row(r);
        let proj = dot(u, g);
        for ((o, gi), ui) in grad.row_mut(r).iter_mut().zip(g).zip(u) {
            *o = (gi - ui * proj) / norms[r];
        }
    }
    Ok((loss, grad))
}

/// At most `cap` evenly strided positions out of `total`.
pub fn contrastive_sample(total: usize, cap: usize) -> Vec<usize> {
    if total <= cap {
        (0..total).collect()
    } else {
        (0..cap).map(|i| i * total / cap).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TtaReport {
    pub normals: usize,
    pub abnormals: usize,
    /// Mean loss terms over the pseudo-normal embeddings of the last step.
    pub normal_loss: LossParts,
    pub contrastive: f64,
    /// Optimizer steps actually taken.
    pub steps_taken: usize,
}

/// Adapts `params` on one batch of test windows.
///
/// Each step minimizes the mean training objective over pseudo-normal
/// embeddings plus `weight·L_con` over a strided subsample of all
/// embeddings. A step whose objective is empty (no normals and no
/// contrastive term) is skipped so the optimizer state stays untouched.
pub fn tta_step(
    params: &mut ModelParams,
    optimizer: &mut AdamW,
    windows: &[Matrix],
    activations: &ActivationSet,
    cfg: &RunConfig,
) -> Result<TtaReport> {
    let mut report = TtaReport::default();
    if !cfg.tta.enabled || windows.is_empty() {
        return Ok(report);
    }
    let (alpha, beta) = (cfg.train.alpha, cfg.train.beta);
    for _ in 0..cfg.tta.steps {
        let fwds: Vec<WindowForward> = windows
            .par_iter()
            .map(|w| forward_window(params, w))
            .collect::<Result<_>>()?;
        let labels: Vec<Vec<u8>> = fwds.iter().map(|f| pseudo_labels(f, activations)).collect();
        let normals = labels.iter().flatten().filter(|&&l| l == NORMAL).count();
        let total: usize = labels.iter().map(Vec::len).sum();
        report.normals = normals;
        report.abnormals = total - normals;

        let width = params.width();
        let mut extras: Option<Vec<Matrix>> = None;
        report.contrastive = 0.0;
        if cfg.tta.weight != 0.0 {
            let sample = contrastive_sample(total, cfg.tta.max_contrastive);
            if sample.len() >= 2 {
                let locate: Vec<(usize, usize)> = labels
                    .iter()
                    .enumerate()
                    .flat_map(|(w, l)| (0..l.len()).map(move |r| (w, r)))
                    .collect();
                let rows: Vec<Vec<(usize, usize, usize)>> =
                    fwds.iter().map(|f| f.positions().collect()).collect();
                let mut x = Matrix::zeros(sample.len(), width);
                let mut y = Vec::with_capacity(sample.len());
                for (s, &g) in sample.iter().enumerate() {
                    let (w, r) = locate[g];
                    let (k, i, j) = rows[w][r];
                    x.row_mut(s).copy_from_slice(fwds[w].embedding(k, i, j));
                    y.push(labels[w][r]);
                }
                let (loss, grad) = contrastive_loss(&x, &y, cfg.tta.temperature)?;
                report.contrastive = loss;
                let mut per_window: Vec<Matrix> =
                    labels.iter().map(|l| Matrix::zeros(l.len(), width)).collect();
                for (s, &g) in sample.iter().enumerate() {
                    let (w, r) = locate[g];
                    for (o, v) in per_window[w].row_mut(r).iter_mut().zip(grad.row(s)) {
                        *o = cfg.tta.weight * v;
                    }
                }
                extras = Some(per_window);
            }
        }
        if normals == 0 && extras.is_none() {
            continue;
        }

        let inv = if normals > 0 { 1.0 / normals as f64 } else { 0.0 };
        let template = params.zeros_like();
        let shared: &ModelParams = params;
        let parts: Vec<(ModelParams, LossParts)> = fwds
            .par_iter()
            .enumerate()
            .map(|(w, f)| {
                let weights: Vec<f64> =
                    labels[w].iter().map(|&l| if l == NORMAL { inv } else { 0.0 }).collect();
                let mut g = template.clone();
                let extra = extras.as_ref().map(|e| &e[w]);
                let lp = accumulate_objective(shared, f, &weights, extra, alpha, beta, &mut g)?;
                Ok((g, lp))
            })
            .collect::<Result<_>>()?;
        let mut grads = template;
        let mut loss = LossParts::default();
        for (g, lp) in &parts {
            grads.add_assign(g)?;
            loss.add(*lp);
        }
        report.normal_loss = loss;
        let mut targets = params.tensors_mut();
        optimizer.step(&mut targets, &grads.tensors())?;
        report.steps_taken += 1;
        if !params.all_finite() {
            return Err(CometError::Numeric("non-finite parameters after adaptation".into()));
        }
    }
    Ok(report)
}

/// Rebuilds the bank from the adapted codebooks at the frozen training
/// activation indices.
pub fn refresh_coreset(params: &ModelParams, activations: &ActivationSet, n_sigma: usize) -> Result<MemoryBank> {
    build_memory_bank(&params.codebooks, activations, n_sigma)
}

//! Anomaly scores: local-scaling memory distance, quantization residual,
//! deviation-based variable selection, EMA min–max normalization and the
//! final weighted combination.

use crate::config::SelectionConfig;
use crate::error::{CometError, Result};
use crate::ndmath::{median, squared_distance, Matrix};
use crate::network::WindowForward;
use crate::patching::CoverageMap;
use crate::vq::{BankScale, Codebook, MemoryBank};

/// `‖q − m‖² / ((σ_q + σ_m)/2 + ε)`.
pub fn local_scaling_distance(q: &[f64], sigma_q: f64, m: &[f64], sigma_m: f64, eps: f64) -> f64 {
    squared_distance(q, m) / (0.5 * (sigma_q + sigma_m) + eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Row in the bank scale.
    pub position: usize,
    pub dist2: f64,
}

/// A query's `n` nearest bank entries and its local scale `σ_q`, the median
/// of their squared distances.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalScaleQuery {
    pub sigma: f64,
    pub neighbors: Vec<Neighbor>,
}

/// Nearest entries by squared distance, ties broken by bank position.
pub fn nearest_in_bank(q: &[f64], bank: &BankScale, n: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = (0..bank.len())
        .map(|position| Neighbor {
            position,
            dist2: squared_distance(q, bank.entries.row(position)),
        })
        .collect();
    all.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.position.cmp(&b.position)));
    all.truncate(n);
    all
}

pub fn query_scale(q: &[f64], bank: &BankScale, n: usize) -> LocalScaleQuery {
    let neighbors = nearest_in_bank(q, bank, n);
    let d: Vec<f64> = neighbors.iter().map(|nb| nb.dist2).collect();
    LocalScaleQuery {
        sigma: median(&d),
        neighbors,
    }
}

/// Mean distance from `q` to its `n` nearest entries of one bank scale.
/// With `local_scaling` off the plain squared distance is averaged.
pub fn memory_score_query(
    q: &[f64],
    bank: &BankScale,
    n: usize,
    eps: f64,
    local_scaling: bool,
) -> Result<f64> {
    if bank.is_empty() {
        return Err(CometError::Degenerate(format!(
            "memory bank scale {} is empty",
            bank.scale
        )));
    }
    let query = query_scale(q, bank, n);
    let sum: f64 = query
        .neighbors
        .iter()
        .map(|nb| {
            if local_scaling {
                nb.dist2 / (0.5 * (query.sigma + bank.sigmas[nb.position]) + eps)
            } else {
                nb.dist2
            }
        })
        .sum();
    Ok(sum / query.neighbors.len() as f64)
}

/// Memory score of every codebook entry used as a query.
///
/// Queries are quantized embeddings, so they are always codebook rows; the
/// table turns per-embedding scoring into a lookup. Rebuild it whenever the
/// codebooks or the bank change.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryTable {
    per_scale: Vec<Vec<f64>>,
}

impl MemoryTable {
    pub fn build(
        codebooks: &[Codebook],
        bank: &MemoryBank,
        n: usize,
        eps: f64,
        local_scaling: bool,
    ) -> Result<Self> {
        if bank.scales.len() != codebooks.len() {
            return Err(CometError::Degenerate(format!(
                "bank covers {} scales but the model has {}",
                bank.scales.len(),
                codebooks.len()
            )));
        }
        let per_scale = codebooks
            .iter()
            .zip(&bank.scales)
            .map(|(cb, bs)| {
                (0..cb.len())
                    .map(|m| memory_score_query(cb.entry(m), bs, n, eps, local_scaling))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(MemoryTable { per_scale })
    }

    pub fn score(&self, scale: usize, index: usize) -> f64 {
        self.per_scale[scale][index]
    }
}

/// Raw per-variable and per-timestep scores of one window, before
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowScores {
    /// `D×L` memory scores, averaged over scales.
    pub mem_vars: Matrix,
    /// `D×L` quantization scores, averaged over scales.
    pub quant_vars: Matrix,
    /// Memory score after variable selection (length `L`).
    pub mem: Vec<f64>,
    /// Quantization score after variable selection (length `L`).
    pub quant: Vec<f64>,
}

/// Per-embedding scores spread to timesteps and averaged over scales.
///
/// Returns `(memory, quantization)` as `D×L` matrices. `coverages[k]` maps
/// patches of scale `k` onto the window's timesteps.
pub fn per_variable_scores(
    fwd: &WindowForward,
    table: &MemoryTable,
    coverages: &[CoverageMap],
) -> Result<(Matrix, Matrix)> {
    if coverages.len() != fwd.scales.len() {
        return Err(CometError::Shape("one coverage map per scale is required".into()));
    }
    let vars = fwd.scales.first().map_or(0, |s| s.z_e.len());
    let len = coverages.first().map_or(0, CoverageMap::len);
    let k_count = fwd.scales.len() as f64;
    let mut mem = Matrix::zeros(vars, len);
    let mut quant = Matrix::zeros(vars, len);
    for (k, (sf, cov)) in fwd.scales.iter().zip(coverages).enumerate() {
        if cov.len() != len {
            return Err(CometError::Shape("coverage maps disagree on window length".into()));
        }
        for i in 0..vars {
            let n = sf.num_patches();
            let m_patch: Vec<f64> = (0..n).map(|j| table.score(k, sf.indices[i][j])).collect();
            let q_patch: Vec<f64> = (0..n)
                .map(|j| squared_distance(sf.z_e[i].row(j), sf.z_q[i].row(j)).sqrt())
                .collect();
            for (o, v) in mem.row_mut(i).iter_mut().zip(cov.spread(&m_patch)) {
                *o += v / k_count;
            }
            for (o, v) in quant.row_mut(i).iter_mut().zip(cov.spread(&q_patch)) {
                *o += v / k_count;
            }
        }
    }
    Ok((mem, quant))
}

pub fn window_scores(
    fwd: &WindowForward,
    table: &MemoryTable,
    coverages: &[CoverageMap],
    selection: &SelectionConfig,
    eps: f64,
) -> Result<WindowScores> {
    let (mem_vars, quant_vars) = per_variable_scores(fwd, table, coverages)?;
    let mem = select_variables(&mem_vars, selection, eps)?.scores;
    let quant = select_variables(&quant_vars, selection, eps)?.scores;
    Ok(WindowScores {
        mem_vars,
        quant_vars,
        mem,
        quant,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Zero-based selected variables per timestep, ascending.
    pub selected: Vec<Vec<usize>>,
    /// Mean score over the selected variables per timestep.
    pub scores: Vec<f64>,
}

/// Linear-interpolation percentile of an unsorted slice, `rho` in `[0, 100]`.
pub fn percentile(values: &[f64], rho: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = rho / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Deviation-based variable selection over a `D×T` score matrix.
///
/// `δ_t(i) = (S_t(i) − μ(i)) / (σ(i) + ε)` with per-variable temporal mean
/// and population std. Variable 0 is always kept.
pub fn select_variables(scores: &Matrix, cfg: &SelectionConfig, eps: f64) -> Result<Selection> {
    let (vars, len) = scores.shape();
    if vars == 0 || len == 0 {
        return Err(CometError::Shape("score matrix must be non-empty".into()));
    }
    if let SelectionConfig::None = cfg {
        let selected = vec![(0..vars).collect::<Vec<_>>(); len];
        let scores = (0..len)
            .map(|t| (0..vars).map(|i| scores.get(i, t)).sum::<f64>() / vars as f64)
            .collect();
        return Ok(Selection { selected, scores });
    }

    let mut dev = Matrix::zeros(vars, len);
    for i in 0..vars {
        let row = scores.row(i);
        let mu = row.iter().sum::<f64>() / len as f64;
        let sd = (row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64).sqrt();
        for (o, v) in dev.row_mut(i).iter_mut().zip(row) {
            *o = ((v - mu) / (sd + eps)).abs();
        }
    }

    let mut selected = Vec::with_capacity(len);
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let abs: Vec<f64> = (0..vars).map(|i| dev.get(i, t)).collect();
        let set: Vec<usize> = match *cfg {
            SelectionConfig::Percentile { rho } => {
                let thr = percentile(&abs, rho);
                (0..vars).filter(|&i| i == 0 || abs[i] <= thr).collect()
            }
            SelectionConfig::Budget { budget } => {
                let mut rest: Vec<usize> = (1..vars).collect();
                rest.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]).then(a.cmp(&b)));
                rest.truncate(budget.min(vars).saturating_sub(1));
                let mut set = vec![0];
                set.extend(rest);
                set.sort_unstable();
                set
            }
            SelectionConfig::None => unreachable!(),
        };
        out.push(set.iter().map(|&i| scores.get(i, t)).sum::<f64>() / set.len() as f64);
        selected.push(set);
    }
    Ok(Selection {
        selected,
        scores: out,
    })
}

/// Running min/max for EMA min–max normalization of one score stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub gamma: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub initialized: bool,
}

impl EmaState {
    pub fn new(gamma: f64) -> Self {
        EmaState {
            gamma,
            mu_min: 0.0,
            mu_max: 0.0,
            initialized: false,
        }
    }

    /// Folds in one window's min and max. The first window seeds the state.
    pub fn update(&mut self, min: f64, max: f64) {
        if self.initialized {
            self.mu_min = self.gamma * self.mu_min + (1.0 - self.gamma) * min;
            self.mu_max = self.gamma * self.mu_max + (1.0 - self.gamma) * max;
        } else {
            self.mu_min = min;
            self.mu_max = max;
            self.initialized = true;
        }
    }
}

/// Updates `state` with the window and returns
/// `(S − μ_min) / (μ_max − μ_min + ε)`.
pub fn ema_normalize(window: &[f64], state: &mut EmaState, eps: f64) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(CometError::Shape("cannot normalize an empty window".into()));
    }
    let min = window.iter().copied().fold(f64::INFINITY, f64::min);
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    state.update(min, max);
    let denom = state.mu_max - state.mu_min + eps;
    Ok(window.iter().map(|s| (s - state.mu_min) / denom).collect())
}

/// `(1 − λ)·mem + λ·quant`.
pub fn aggregate(mem: &[f64], quant: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if mem.len() != quant.len() {
        return Err(CometError::Shape(format!(
            "memory scores ({}) and quantization scores ({}) differ in length",
            mem.len(),
            quant.len()
        )));
    }
    Ok(mem
        .iter()
        .zip(quant)
        .map(|(m, q)| (1.0 - lambda) * m + lambda * q)
        .collect())
}

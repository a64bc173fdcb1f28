//! Codebooks, nearest-entry quantization, the VQ loss terms and the
//! coreset memory bank built from activated entries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CometError, Result};
use crate::ndmath::{median, squared_distance, Matrix, Rng};

/// `M` learnable prototypes of width `d` serving one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub scale: usize,
    pub entries: Matrix,
}

impl Codebook {
    /// Entries drawn i.i.d. from N(0, 1/d).
    pub fn init(scale: usize, size: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 {
            return Err(CometError::config("model.codebook_size", "must be >= 1"));
        }
        let std = 1.0 / (d as f64).sqrt();
        let data = (0..size * d).map(|_| std * rng.normal()).collect();
        Ok(Codebook {
            scale,
            entries: Matrix::from_vec(size, d, data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, m: usize) -> &[f64] {
        self.entries.row(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantResult {
    /// Zero-based entry id.
    pub index: usize,
    pub z_q: Vec<f64>,
    /// `‖z_e − z_q‖₂`.
    pub residual: f64,
}

fn nearest(z_e: &[f64], codebook: &Codebook) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for m in 0..codebook.len() {
        let d = squared_distance(z_e, codebook.entry(m));
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (m, d);
        }
    }
    best
}

/// Nearest codebook entry by squared Euclidean distance; ties go to the
/// lowest index.
pub fn quantize(z_e: &[f64], codebook: &Codebook) -> Result<QuantResult> {
    if codebook.is_empty() {
        return Err(CometError::config("model.codebook_size", "codebook is empty"));
    }
    if z_e.len() != codebook.dim() {
        return Err(CometError::Shape(format!(
            "embedding width {} vs codebook width {}",
            z_e.len(),
            codebook.dim()
        )));
    }
    let (index, d2) = nearest(z_e, codebook);
    Ok(QuantResult {
        index,
        z_q: codebook.entry(index).to_vec(),
        residual: d2.sqrt(),
    })
}

/// Quantizes each row of `z_e`. Returns the indices and the stacked `z_q`.
pub fn quantize_rows(z_e: &Matrix, codebook: &Codebook) -> Result<(Vec<usize>, Matrix)> {
    if codebook.is_empty() {
        return Err(CometError::config("model.codebook_size", "codebook is empty"));
    }
    if z_e.cols() != codebook.dim() {
        return Err(CometError::Shape(format!(
            "embedding width {} vs codebook width {}",
            z_e.cols(),
            codebook.dim()
        )));
    }
    let mut idx = Vec::with_capacity(z_e.rows());
    let mut z_q = Matrix::zeros(z_e.rows(), z_e.cols());
    for r in 0..z_e.rows() {
        let (m, _) = nearest(z_e.row(r), codebook);
        idx.push(m);
        z_q.row_mut(r).copy_from_slice(codebook.entry(m));
    }
    Ok((idx, z_q))
}

/// Codebook and commitment terms for one embedding.
///
/// `L_cb = ‖z_q − sg[z_e]‖²` only moves the selected codebook row and
/// `L_cm = ‖sg[z_q] − z_e‖²` only moves the encoder. The reconstruction
/// gradient reaches `z_e` by a straight-through copy, handled by the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct VqLosses {
    pub codebook: f64,
    pub commitment: f64,
    /// `α · ∂L_cb/∂c_q`.
    pub codebook_grad: Vec<f64>,
    /// `β · ∂L_cm/∂z_e`.
    pub encoder_grad: Vec<f64>,
}

pub fn vq_losses(z_e: &[f64], z_q: &[f64], alpha: f64, beta: f64) -> VqLosses {
    let sq = squared_distance(z_e, z_q);
    VqLosses {
        codebook: sq,
        commitment: sq,
        codebook_grad: z_q.iter().zip(z_e).map(|(q, e)| alpha * 2.0 * (q - e)).collect(),
        encoder_grad: z_e.iter().zip(z_q).map(|(e, q)| beta * 2.0 * (e - q)).collect(),
    }
}

/// Codebook entries selected at least once by training data, keyed by
/// `(scale, index)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSet {
    members: BTreeSet<(usize, usize)>,
}

impl ActivationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` if the pair was not present before.
    pub fn record(&mut self, scale: usize, index: usize) -> bool {
        self.members.insert((scale, index))
    }

    pub fn contains(&self, scale: usize, index: usize) -> bool {
        self.members.contains(&(scale, index))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Activated indices of one scale, ascending.
    pub fn indices(&self, scale: usize) -> Vec<usize> {
        self.members
            .range((scale, 0)..(scale + 1, 0))
            .map(|&(_, m)| m)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.members.iter().copied()
    }
}

/// Records one quantization result into `set`.
pub fn record_activation(set: &mut ActivationSet, scale: usize, result: &QuantResult) -> bool {
    set.record(scale, result.index)
}

/// The activated entries of one scale with their local scales.
#[derive(Clone, Debug, PartialEq)]
pub struct BankScale {
    pub scale: usize,
    pub ids: Vec<usize>,
    pub entries: Matrix,
    pub sigmas: Vec<f64>,
}

impl BankScale {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub n_sigma: usize,
    pub scales: Vec<BankScale>,
}

impl MemoryBank {
    pub fn total_entries(&self) -> usize {
        self.scales.iter().map(BankScale::len).sum()
    }
}

/// `σ_i` for every row: median squared distance to its `n_sigma` nearest
/// other rows (all other rows if there are fewer). A lone row gets 0.
pub fn local_scales(entries: &Matrix, n_sigma: usize) -> Vec<f64> {
    let n = entries.rows();
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(entries.row(i), entries.row(j)))
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            d.truncate(n_sigma);
            median(&d)
        })
        .collect()
}

/// Collects the activated rows of every codebook and precomputes their
/// local scales within their own scale.
pub fn build_memory_bank(
    codebooks: &[Codebook],
    activations: &ActivationSet,
    n_sigma: usize,
) -> Result<MemoryBank> {
    if n_sigma == 0 {
        return Err(CometError::config("scoring.n_sigma", "must be >= 1"));
    }
    let mut scales = Vec::with_capacity(codebooks.len());
    for (k, cb) in codebooks.iter().enumerate() {
        let ids = activations.indices(k);
        if ids.is_empty() {
            return Err(CometError::Degenerate(format!(
                "scale {k} has no activated codebook entries"
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&m| m >= cb.len()) {
            return Err(CometError::Degenerate(format!(
                "activation index {bad} out of range for scale {k} codebook of size {}",
                cb.len()
            )));
        }
        let rows: Vec<&[f64]> = ids.iter().map(|&m| cb.entry(m)).collect();
        let entries = Matrix::from_rows(&rows)?;
        let sigmas = local_scales(&entries, n_sigma);
        scales.push(BankScale {
            scale: k,
            ids,
            entries,
            sigmas,
        });
    }
    Ok(MemoryBank { n_sigma, scales })
}

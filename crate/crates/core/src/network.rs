//! The full multi-scale model: parameters of every scale plus codebooks, the
//! per-window forward pass, and the weighted training objective
//! `L_rec + α·L_cb + β·L_cm` with its gradient.
//!
//! Embeddings of a window are enumerated in a canonical order: scale, then
//! variable, then patch index. Per-embedding weights and extra encoder
//! gradients are indexed in that order.

use crate::config::RunConfig;
use crate::error::{CometError, Result};
use crate::model::{self, ForwardCache, ScaleDims, ScaleParams};
use crate::ndmath::{squared_distance, Matrix, Rng};
use crate::patching::{extract_patches, ScaleSpec};
use crate::vq::{quantize_rows, Codebook};

/// Everything gradient descent touches. Also used as its own gradient
/// accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub scale_specs: Vec<ScaleSpec>,
    pub scales: Vec<ScaleParams>,
    pub codebooks: Vec<Codebook>,
}

impl ModelParams {
    /// Initializes every scale from `rng`, in scale order: encoder and
    /// decoder weights, then the codebook.
    pub fn init(cfg: &RunConfig, vars: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if vars == 0 {
            return Err(CometError::Data("series has no variables".into()));
        }
        let mut scales = Vec::new();
        let mut codebooks = Vec::new();
        for (k, spec) in cfg.model.scales.iter().enumerate() {
            let dims = ScaleDims {
                vars,
                patch: spec.patch,
                d: cfg.model.d,
                d_core: cfg.model.d_core,
            };
            scales.push(ScaleParams::init(dims, rng)?);
            codebooks.push(Codebook::init(k, cfg.model.codebook_size, cfg.model.d, rng)?);
        }
        Ok(ModelParams {
            scale_specs: cfg.model.scales.clone(),
            scales,
            codebooks,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.scales.first().map_or(0, |s| s.dims().vars)
    }

    pub fn width(&self) -> usize {
        self.scales.first().map_or(0, |s| s.dims().d)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            scale_specs: self.scale_specs.clone(),
            scales: self.scales.iter().map(ScaleParams::zeros_like).collect(),
            codebooks: self
                .codebooks
                .iter()
                .map(|c| Codebook {
                    scale: c.scale,
                    entries: Matrix::zeros(c.len(), c.dim()),
                })
                .collect(),
        }
    }

    /// All tensors: each scale's encoder/decoder tensors, then the codebooks.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.scales.iter().flat_map(ScaleParams::tensors).collect();
        out.extend(self.codebooks.iter().map(|c| &c.entries));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .scales
            .iter_mut()
            .flat_map(ScaleParams::tensors_mut)
            .collect();
        out.extend(self.codebooks.iter_mut().map(|c| &mut c.entries));
        out
    }

    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Encoder output, quantization and cache for one scale of one window.
#[derive(Clone, Debug)]
pub struct ScaleForward {
    pub cache: ForwardCache,
    pub targets: Vec<Matrix>,
    pub z_e: Vec<Matrix>,
    pub indices: Vec<Vec<usize>>,
    pub z_q: Vec<Matrix>,
}

impl ScaleForward {
    pub fn num_patches(&self) -> usize {
        self.cache.num_patches()
    }

    pub fn num_embeddings(&self) -> usize {
        self.z_e.len() * self.num_patches()
    }
}

#[derive(Clone, Debug)]
pub struct WindowForward {
    pub scales: Vec<ScaleForward>,
}

impl WindowForward {
    pub fn num_embeddings(&self) -> usize {
        self.scales.iter().map(ScaleForward::num_embeddings).sum()
    }

    /// `(scale, variable, patch)` of every embedding in canonical order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.scales.iter().enumerate().flat_map(|(k, s)| {
            let n = s.num_patches();
            (0..s.z_e.len()).flat_map(move |i| (0..n).map(move |j| (k, i, j)))
        })
    }

    pub fn embedding(&self, k: usize, i: usize, j: usize) -> &[f64] {
        self.scales[k].z_e[i].row(j)
    }

    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        self.scales[k].indices[i][j]
    }
}

/// Encodes and quantizes one `L×D` window at every scale.
pub fn forward_window(params: &ModelParams, window: &Matrix) -> Result<WindowForward> {
    if window.cols() != params.num_vars() {
        return Err(CometError::Shape(format!(
            "window has {} variables, model expects {}",
            window.cols(),
            params.num_vars()
        )));
    }
    let mut scales = Vec::with_capacity(params.scales.len());
    for ((spec, sp), cb) in params
        .scale_specs
        .iter()
        .zip(&params.scales)
        .zip(&params.codebooks)
    {
        let patches = extract_patches(window, *spec)?;
        let (z_e, cache) = model::encode(&patches, sp)?;
        let mut indices = Vec::with_capacity(z_e.len());
        let mut z_q = Vec::with_capacity(z_e.len());
        for z in &z_e {
            let (idx, q) = quantize_rows(z, cb)?;
            indices.push(idx);
            z_q.push(q);
        }
        scales.push(ScaleForward {
            cache,
            targets: patches.patches,
            z_e,
            indices,
            z_q,
        });
    }
    Ok(WindowForward { scales })
}

/// Weighted sums of the three loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossParts {
    pub fn total(&self, alpha: f64, beta: f64) -> f64 {
        self.rec + alpha * self.codebook + beta * self.commitment
    }

    pub fn add(&mut self, other: LossParts) {
        self.rec += other.rec;
        self.codebook += other.codebook;
        self.commitment += other.commitment;
    }
}

/// Per-embedding loss terms without gradients: `(rec, cb, cm)` in canonical
/// order. Reconstruction is the mean squared error over the patch.
pub fn embedding_losses(params: &ModelParams, fwd: &WindowForward) -> Result<Vec<LossParts>> {
    let mut out = Vec::with_capacity(fwd.num_embeddings());
    for (sf, sp) in fwd.scales.iter().zip(&params.scales) {
        let p = sp.dims().patch as f64;
        for i in 0..sf.z_e.len() {
            let recon = model::decode(&sf.z_q[i], sp)?;
            for j in 0..sf.num_patches() {
                let vq = squared_distance(sf.z_e[i].row(j), sf.z_q[i].row(j));
                out.push(LossParts {
                    rec: squared_distance(recon.row(j), sf.targets[i].row(j)) / p,
                    codebook: vq,
                    commitment: vq,
                });
            }
        }
    }
    Ok(out)
}

/// Accumulates the gradient of `Σ_n weights[n]·L_total(n)` into `grads`, plus
/// `extra_dz_e` (rows in canonical order) added directly to the encoder
/// outputs. Returns the weighted loss sums.
///
/// Gradient routing: the decoder input gradient is copied straight through
/// to `z_e`; the codebook row only receives `α·∂L_cb`; the encoder receives
/// `β·∂L_cm`.
pub fn accumulate_objective(
    params: &ModelParams,
    fwd: &WindowForward,
    weights: &[f64],
    extra_dz_e: Option<&Matrix>,
    alpha: f64,
    beta: f64,
    grads: &mut ModelParams,
) -> Result<LossParts> {
    let total = fwd.num_embeddings();
    if weights.len() != total {
        return Err(CometError::Shape(format!(
            "{} weights for {total} embeddings",
            weights.len()
        )));
    }
    if let Some(extra) = extra_dz_e {
        if extra.shape() != (total, params.width()) {
            return Err(CometError::Shape("extra encoder gradient shape".into()));
        }
    }
    let mut parts = LossParts::default();
    let mut offset = 0;
    for (k, sf) in fwd.scales.iter().enumerate() {
        let sp = &params.scales[k];
        let n = sf.num_patches();
        let count = sf.num_embeddings();
        let w_scale = &weights[offset..offset + count];
        let has_extra = extra_dz_e.is_some();
        if !has_extra && w_scale.iter().all(|&w| w == 0.0) {
            offset += count;
            continue;
        }
        let p = sp.dims().patch as f64;
        let d = sp.dims().d;
        let mut dz_e = Vec::with_capacity(sf.z_e.len());
        for i in 0..sf.z_e.len() {
            let w_var = &w_scale[i * n..(i + 1) * n];
            let recon = model::decode(&sf.z_q[i], sp)?;
            let mut d_out = Matrix::zeros(n, recon.cols());
            let mut dz = Matrix::zeros(n, d);
            for j in 0..n {
                let w = w_var[j];
                if w == 0.0 {
                    continue;
                }
                let target = sf.targets[i].row(j);
                let mut rec = 0.0;
                for ((o, r), t) in d_out.row_mut(j).iter_mut().zip(recon.row(j)).zip(target) {
                    let diff = r - t;
                    rec += diff * diff;
                    *o = w * 2.0 * diff / p;
                }
                parts.rec += w * rec / p;

                let z_e = sf.z_e[i].row(j);
                let z_q = sf.z_q[i].row(j);
                let vq = squared_distance(z_e, z_q);
                parts.codebook += w * vq;
                parts.commitment += w * vq;
                let row = grads.codebooks[k].entries.row_mut(sf.indices[i][j]);
                for ((g, q), e) in row.iter_mut().zip(z_q).zip(z_e) {
                    *g += w * alpha * 2.0 * (q - e);
                }
                for ((g, e), q) in dz.row_mut(j).iter_mut().zip(z_e).zip(z_q) {
                    *g = w * beta * 2.0 * (e - q);
                }
            }
            let dz_q = model::decoder_backward(sp, &sf.z_q[i], &d_out, &mut grads.scales[k])?;
            dz.add_assign(&dz_q)?;
            if let Some(extra) = extra_dz_e {
                for j in 0..n {
                    let src = extra.row(offset + i * n + j);
                    for (g, x) in dz.row_mut(j).iter_mut().zip(src) {
                        *g += x;
                    }
                }
            }
            dz_e.push(dz);
        }
        model::backward(sp, &sf.cache, &dz_e, &mut grads.scales[k])?;
        offset += count;
    }
    Ok(parts)
}

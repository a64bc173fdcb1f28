//! Per-scale patch encoder and decoder, with hand-written backward passes.
//!
//! For scale `k` with patch length `p`, `D` variables, embedding width `d`
//! (even) and core width `d_c`:
//!
//! ```text
//! h_s[i,j] = W_s,i · P[i,j] + b_s,i                 (d/2)
//! h_c[j]   = W_c · [P[1,j]; …; P[D,j]] + b_c        (d_c)
//! z_e[i,j] = W_g · [h_s[i,j]; h_c[j]] + b_g         (d)
//! P̂        = W_dec · z_q + b_dec                    (p)
//! ```
//!
//! Every layer is affine; there are no activations. The decoder is shared by
//! all variables of a scale.

use crate::error::{CometError, Result};
use crate::ndmath::{Matrix, Rng};
use crate::patching::PatchSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleDims {
    pub vars: usize,
    pub patch: usize,
    pub d: usize,
    pub d_core: usize,
}

impl ScaleDims {
    pub fn half(&self) -> usize {
        self.d / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(CometError::config("model.d", format!("must be even and positive, got {}", self.d)));
        }
        if self.d_core == 0 {
            return Err(CometError::config("model.d_core", "must be positive"));
        }
        if self.vars == 0 || self.patch == 0 {
            return Err(CometError::Shape("scale needs at least one variable and patch length".into()));
        }
        Ok(())
    }
}

/// Weights of one scale. Also used as the gradient accumulator for itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams {
    pub series_w: Vec<Matrix>,
    pub series_b: Vec<Matrix>,
    pub core_w: Matrix,
    pub core_b: Matrix,
    pub fuse_w: Matrix,
    pub fuse_b: Matrix,
    pub dec_w: Matrix,
    pub dec_b: Matrix,
}

impl ScaleParams {
    pub fn zeros(dims: ScaleDims) -> Self {
        let h = dims.half();
        ScaleParams {
            series_w: (0..dims.vars).map(|_| Matrix::zeros(h, dims.patch)).collect(),
            series_b: (0..dims.vars).map(|_| Matrix::zeros(1, h)).collect(),
            core_w: Matrix::zeros(dims.d_core, dims.vars * dims.patch),
            core_b: Matrix::zeros(1, dims.d_core),
            fuse_w: Matrix::zeros(dims.d, h + dims.d_core),
            fuse_b: Matrix::zeros(1, dims.d),
            dec_w: Matrix::zeros(dims.patch, dims.d),
            dec_b: Matrix::zeros(1, dims.patch),
        }
    }

    /// Weights ~ U(−1/√fan_in, 1/√fan_in), biases zero.
    pub fn init(dims: ScaleDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut p = ScaleParams::zeros(dims);
        let fill = |m: &mut Matrix, rng: &mut Rng| {
            let bound = 1.0 / (m.cols() as f64).sqrt();
            m.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.uniform_range(-bound, bound));
        };
        for w in &mut p.series_w {
            fill(w, rng);
        }
        fill(&mut p.core_w, rng);
        fill(&mut p.fuse_w, rng);
        fill(&mut p.dec_w, rng);
        Ok(p)
    }

    pub fn dims(&self) -> ScaleDims {
        ScaleDims {
            vars: self.series_w.len(),
            patch: self.dec_w.rows(),
            d: self.fuse_w.rows(),
            d_core: self.core_w.rows(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ScaleParams::zeros(self.dims())
    }

    /// Tensors in a fixed order: series weights and biases per variable, then
    /// core, fusion and decoder.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * self.series_w.len() + 6);
        for (w, b) in self.series_w.iter().zip(&self.series_b) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &self.core_w,
            &self.core_b,
            &self.fuse_w,
            &self.fuse_b,
            &self.dec_w,
            &self.dec_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 * self.series_w.len() + 6);
        for (w, b) in self.series_w.iter_mut().zip(self.series_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &mut self.core_w,
            &mut self.core_b,
            &mut self.fuse_w,
            &mut self.fuse_b,
            &mut self.dec_w,
            &mut self.dec_b,
        ]);
        out
    }
}

/// Intermediates kept from [`encode`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    dims: ScaleDims,
    patches: Vec<Matrix>,
    concat: Matrix,
    series_h: Vec<Matrix>,
    core_h: Matrix,
}

impl ForwardCache {
    pub fn dims(&self) -> ScaleDims {
        self.dims
    }

    pub fn num_patches(&self) -> usize {
        self.concat.rows()
    }
}

/// Embeds every patch of every variable. Returns `z_e` as one `N×d` matrix
/// per variable, plus the cache needed for the backward pass.
pub fn encode(patches: &PatchSet, params: &ScaleParams) -> Result<(Vec<Matrix>, ForwardCache)> {
    let dims = params.dims();
    if patches.num_vars() != dims.vars || patches.scale.patch != dims.patch {
        return Err(CometError::Shape(format!(
            "patch set has {} variables of length {}, model expects {} of length {}",
            patches.num_vars(),
            patches.scale.patch,
            dims.vars,
            dims.patch
        )));
    }
    let h = dims.half();
    let concat = patches.concatenated();
    let mut core_h = concat.matmul_t(&params.core_w)?;
    core_h.add_row(params.core_b.data())?;
    // the core branch is shared by every variable, so fold it once
    let mut shared = core_h.matmul_t_block(&params.fuse_w, h..h + dims.d_core)?;
    shared.add_row(params.fuse_b.data())?;

    let mut series_h = Vec::with_capacity(dims.vars);
    let mut z_e = Vec::with_capacity(dims.vars);
    for (i, pm) in patches.patches.iter().enumerate() {
        let mut hs = pm.matmul_t(&params.series_w[i])?;
        hs.add_row(params.series_b[i].data())?;
        let mut z = hs.matmul_t_block(&params.fuse_w, 0..h)?;
        z.add_assign(&shared)?;
        series_h.push(hs);
        z_e.push(z);
    }
    let cache = ForwardCache {
        dims,
        patches: patches.patches.clone(),
        concat,
        series_h,
        core_h,
    };
    Ok((z_e, cache))
}

/// `W_dec · z_q + b_dec` for each row of `z_q` (`N×d` → `N×p`).
pub fn decode(z_q: &Matrix, params: &ScaleParams) -> Result<Matrix> {
    if z_q.cols() != params.dec_w.cols() {
        return Err(CometError::Shape(format!(
            "decoder expects width {}, got {}",
            params.dec_w.cols(),
            z_q.cols()
        )));
    }
    let mut out = z_q.matmul_t(&params.dec_w)?;
    out.add_row(params.dec_b.data())?;
    Ok(out)
}

/// Single-vector form of [`decode`].
pub fn decode_one(z_q: &[f64], params: &ScaleParams) -> Result<Vec<f64>> {
    Ok(decode(&Matrix::row_vector(z_q), params)?.into_vec())
}

/// Backpropagates `d_out` (gradient w.r.t. decoder outputs, `N×p`) into the
/// decoder parameters of `grads`. Returns the gradient w.r.t. `z_q`.
pub fn decoder_backward(
    params: &ScaleParams,
    z_q: &Matrix,
    d_out: &Matrix,
    grads: &mut ScaleParams,
) -> Result<Matrix> {
    if d_out.rows() != z_q.rows() || d_out.cols() != params.dec_w.rows() {
        return Err(CometError::Shape("decoder gradient shape".into()));
    }
    let width = z_q.cols();
    d_out.t_matmul_into(z_q, &mut grads.dec_w, 0..width)?;
    d_out.column_sums_into(grads.dec_b.data_mut());
    d_out.matmul(&params.dec_w)
}

/// Backpropagates `dz_e` (one `N×d` matrix per variable) through the encoder
/// and accumulates into `grads`. The core encoder collects contributions
/// from every variable.
pub fn backward(
    params: &ScaleParams,
    cache: &ForwardCache,
    dz_e: &[Matrix],
    grads: &mut ScaleParams,
) -> Result<()> {
    let dims = params.dims();
    if cache.dims != dims || grads.dims() != dims {
        return Err(CometError::Contract(
            "forward cache was produced by parameters of a different shape".into(),
        ));
    }
    let n = cache.num_patches();
    if dz_e.len() != dims.vars || dz_e.iter().any(|g| g.shape() != (n, dims.d)) {
        return Err(CometError::Contract(format!(
            "upstream gradient must be {} matrices of {n}x{}",
            dims.vars, dims.d
        )));
    }
    let h = dims.half();
    let mut dz_sum = Matrix::zeros(n, dims.d);
    for (i, dz) in dz_e.iter().enumerate() {
        dz_sum.add_assign(dz)?;
        dz.t_matmul_into(&cache.series_h[i], &mut grads.fuse_w, 0..h)?;
        let dhs = dz.matmul(&fuse_block(&params.fuse_w, 0..h))?;
        dhs.t_matmul_into(&cache.patches[i], &mut grads.series_w[i], 0..dims.patch)?;
        dhs.column_sums_into(grads.series_b[i].data_mut());
    }
    dz_sum.t_matmul_into(&cache.core_h, &mut grads.fuse_w, h..h + dims.d_core)?;
    dz_sum.column_sums_into(grads.fuse_b.data_mut());
    let dhc = dz_sum.matmul(&fuse_block(&params.fuse_w, h..h + dims.d_core))?;
    dhc.t_matmul_into(&cache.concat, &mut grads.core_w, 0..dims.vars * dims.patch)?;
    dhc.column_sums_into(grads.core_b.data_mut());
    Ok(())
}

fn fuse_block(w: &Matrix, cols: std::ops::Range<usize>) -> Matrix {
    let mut out = Matrix::zeros(w.rows(), cols.len());
    for r in 0..w.rows() {
        out.row_mut(r).copy_from_slice(&w.row(r)[cols.clone()]);
    }
    out
}

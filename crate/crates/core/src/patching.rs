//! Multi-scale patch extraction and the patch → timestep coverage map.

use serde::{Deserialize, Serialize};

use crate::error::{CometError, Result};
use crate::ndmath::Matrix;

/// One (patch size, stride) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub patch: usize,
    pub stride: usize,
}

impl ScaleSpec {
    pub fn new(patch: usize, stride: usize) -> Result<Self> {
        let s = ScaleSpec { patch, stride };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(CometError::config("scales.patch", "patch size must be >= 1"));
        }
        if self.stride == 0 || self.stride > self.patch {
            return Err(CometError::config(
                "scales.stride",
                format!(
                    "stride {} must be in [1, patch size {}] so every timestep is covered",
                    self.stride, self.patch
                ),
            ));
        }
        Ok(())
    }

    /// `floor((len − p) / s) + 1`.
    pub fn num_patches(&self, len: usize) -> Result<usize> {
        if len < self.patch {
            return Err(CometError::WindowTooShort {
                len,
                required: self.patch,
            });
        }
        Ok((len - self.patch) / self.stride + 1)
    }
}

/// Patches of every variable at one scale. `patches[i]` is an `N×p` matrix
/// whose row `j` is `X[j·s .. j·s+p, i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub scale: ScaleSpec,
    pub patches: Vec<Matrix>,
}

impl PatchSet {
    pub fn num_vars(&self) -> usize {
        self.patches.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.first().map_or(0, Matrix::rows)
    }

    pub fn patch(&self, var: usize, j: usize) -> &[f64] {
        self.patches[var].row(j)
    }

    /// All variables' patches at index `j`, stacked as an `N × (D·p)` matrix.
    pub fn concatenated(&self) -> Matrix {
        let n = self.num_patches();
        let p = self.scale.patch;
        let d = self.num_vars();
        let mut out = Matrix::zeros(n, d * p);
        for j in 0..n {
            let row = out.row_mut(j);
            for (i, pm) in self.patches.iter().enumerate() {
                row[i * p..(i + 1) * p].copy_from_slice(pm.row(j));
            }
        }
        out
    }
}

/// Cuts `window` (`L×D`, time along rows) into patches at one scale.
pub fn extract_patches(window: &Matrix, scale: ScaleSpec) -> Result<PatchSet> {
    scale.validate()?;
    let len = window.rows();
    let n = scale.num_patches(len)?;
    let p = scale.patch;
    let patches = (0..window.cols())
        .map(|var| {
            let mut m = Matrix::zeros(n, p);
            for j in 0..n {
                let start = j * scale.stride;
                for (o, row) in m.row_mut(j).iter_mut().zip(start..start + p) {
                    *o = window.get(row, var);
                }
            }
            m
        })
        .collect();
    Ok(PatchSet { scale, patches })
}

/// For each timestep, the patch indices whose span contains it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageMap {
    pub scale: ScaleSpec,
    covering: Vec<Vec<usize>>,
}

pub fn coverage(scale: ScaleSpec, len: usize) -> Result<CoverageMap> {
    scale.validate()?;
    let n = scale.num_patches(len)?;
    let mut covering = vec![Vec::new(); len];
    for j in 0..n {
        let start = j * scale.stride;
        for slot in &mut covering[start..start + scale.patch] {
            slot.push(j);
        }
    }
    Ok(CoverageMap { scale, covering })
}

impl CoverageMap {
    pub fn len(&self) -> usize {
        self.covering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covering.is_empty()
    }

    pub fn patches_at(&self, t: usize) -> &[usize] {
        &self.covering[t]
    }

    /// Spreads per-patch values onto timesteps.
    ///
    /// Each timestep gets the mean over the patches covering it. Trailing
    /// timesteps beyond the last full patch copy the last covered value.
    pub fn spread(&self, patch_values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.covering.len());
        let mut last = 0.0;
        for cov in &self.covering {
            if !cov.is_empty() {
                last = cov.iter().map(|&j| patch_values[j]).sum::<f64>() / cov.len() as f64;
            }
            out.push(last);
        }
        out
    }
}

//! Dense row-major matrices, a seeded random source, the AdamW optimizer and a
//! central-difference gradient checker.
//!
//! Everything is `f64`. The kernels are plain loops in `i-k-j` order, which is
//! fast enough for the layer sizes used here (a few hundred columns at most).

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CometError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CometError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(CometError::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix, used for bias vectors.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CometError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, restricted to columns `cols` of `other`.
    ///
    /// `self.cols()` must equal the width of the column range. Used to apply
    /// one block of a concatenated weight matrix without copying it out.
    pub fn matmul_t_block(&self, other: &Matrix, cols: std::ops::Range<usize>) -> Result<Matrix> {
        if cols.end > other.cols || self.cols != cols.len() {
            return Err(CometError::Shape(format!(
                "matmul_t {}x{} by block {:?} of {}x{}",
                self.rows, self.cols, cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = &other.row(j)[cols.clone()];
                out.data[i * other.rows + j] = dot(a, b);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        self.matmul_t_block(other, 0..other.cols)
    }

    /// Accumulates `selfᵀ · other` into columns `cols` of `out`.
    ///
    /// This is the weight-gradient kernel: `self` holds upstream gradients
    /// (N×out) and `other` the layer inputs (N×in).
    pub fn t_matmul_into(
        &self,
        other: &Matrix,
        out: &mut Matrix,
        cols: std::ops::Range<usize>,
    ) -> Result<()> {
        if self.rows != other.rows
            || out.rows != self.cols
            || cols.len() != other.cols
            || cols.end > out.cols
        {
            return Err(CometError::Shape(format!(
                "t_matmul {}x{}ᵀ by {}x{} into block {:?} of {}x{}",
                self.rows, self.cols, other.rows, other.cols, cols, out.rows, out.cols
            )));
        }
        let width = out.cols;
        for n in 0..self.rows {
            let g = self.row(n);
            let x = other.row(n);
            for (o, &gv) in g.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let dst = &mut out.data[o * width + cols.start..o * width + cols.end];
                for (d, xv) in dst.iter_mut().zip(x) {
                    *d += gv * xv;
                }
            }
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(CometError::Shape(format!(
                "bias of length {} on {} columns",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Accumulates the column sums of `self` into `out`.
    pub fn column_sums_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        for row in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.add_scaled(other, 1.0)
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CometError::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Median with the even-length case averaging the two middle values.
/// Returns 0 for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seeded random source.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output stream is fixed by the
/// seed and independent of platform and word size. `seed_from_u64` expands
/// the integer seed with PCG32, as documented by `rand_core`.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// AdamW with decoupled weight decay.
///
/// ```text
/// θ ← θ − lr·wd·θ
/// m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
/// θ ← θ − lr · m̂ / (√v̂ + ε)   with m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
/// ```
///
/// Moment buffers are created on the first step from the parameter shapes
/// and checked on every later step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.first
    }

    /// Applies one update to every parameter tensor in `params`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CometError::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(CometError::Shape(format!(
                    "parameter {i} is {:?} but its gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(CometError::Shape(
                "parameter shapes changed between optimizer steps".into(),
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((theta, &gv), mv), vv) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(&mut m.data)
                .zip(&mut v.data)
            {
                *theta -= lr * wd * *theta;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Single-tensor form: returns the updated copy of `param`.
    pub fn update(&mut self, param: &Matrix, grad: &Matrix) -> Result<Matrix> {
        let mut out = param.clone();
        self.step(&mut [&mut out], &[grad])?;
        Ok(out)
    }
}

/// Compares analytic gradients against central differences.
///
/// Returns the maximum over all coordinates of
/// `|analytic − fd| / (|fd| + 1e-8)`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[Matrix],
    analytic: &[Matrix],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> f64,
{
    if h <= 0.0 {
        return Err(CometError::config("h", "step must be positive"));
    }
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(CometError::Shape(
            "analytic gradients do not match parameter shapes".into(),
        ));
    }
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..work.len() {
        for c in 0..work[t].data.len() {
            let orig = work[t].data[c];
            work[t].data[c] = orig + h;
            let up = loss_fn(&work);
            work[t].data[c] = orig - h;
            let down = loss_fn(&work);
            work[t].data[c] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(CometError::Numeric(format!(
                    "non-finite loss while perturbing tensor {t} coordinate {c}"
                )));
            }
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[t].data[c] - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_row_col() {
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let col = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(eye.matmul(&col).unwrap(), col);

        let row = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(CometError::Shape(_))));
    }

    #[test]
    fn transposed_kernels_agree_with_matmul() {
        let mut rng = Rng::new(3);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 6, 5);
        let fast = a.matmul_t(&b).unwrap();
        let slow = naive_matmul(&a, &b.transpose());
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12);
        }

        let g = random(&mut rng, 4, 3);
        let mut out = Matrix::zeros(3, 5);
        g.t_matmul_into(&a, &mut out, 0..5).unwrap();
        let slow = naive_matmul(&g.transpose(), &a);
        for (x, y) in out.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let a = random(&mut rng, 3, 4);
            let b = random(&mut rng, 4, 5);
            let c = random(&mut rng, 5, 2);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..100).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(42);
            (0..100).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut other = Rng::new(43);
        assert_ne!(a[0], other.next_u64());
    }

    #[test]
    fn adamw_zero_gradient_fixed_point() {
        let mut opt = AdamW::new(0.1, 0.0);
        let p = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let out = opt.update(&p, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out, p);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut opt = AdamW::new(0.1, 0.0);
        let out = opt
            .update(&Matrix::zeros(1, 1), &Matrix::row_vector(&[1.0]))
            .unwrap();
        // m̂ = 1, v̂ = 1 at t = 1
        assert!((out.get(0, 0) + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut opt = AdamW::new(0.1, 0.5);
        let out = opt
            .update(&Matrix::row_vector(&[1.0]), &Matrix::zeros(1, 1))
            .unwrap();
        assert!((out.get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_lr_is_bit_identical() {
        let mut rng = Rng::new(5);
        let p = random(&mut rng, 3, 3);
        let g = random(&mut rng, 3, 3);
        let mut opt = AdamW::new(0.0, 5e-4);
        let mut cur = p.clone();
        for _ in 0..5 {
            cur = opt.update(&cur, &g).unwrap();
        }
        assert_eq!(cur.data(), p.data());
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn adamw_rejects_shape_changes() {
        let mut opt = AdamW::new(0.1, 0.0);
        assert!(opt.update(&Matrix::zeros(1, 2), &Matrix::zeros(2, 1)).is_err());
        opt.update(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)).unwrap();
        assert!(opt.update(&Matrix::zeros(2, 2), &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn finite_diff_quadratic() {
        let mut rng = Rng::new(9);
        let p = vec![random(&mut rng, 3, 2), random(&mut rng, 1, 4)];
        let loss = |ps: &[Matrix]| {
            0.5 * ps
                .iter()
                .flat_map(|m| m.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
        };
        let err = finite_diff_check(loss, &p, &p, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");

        let mut wrong = p.clone();
        wrong.iter_mut().for_each(|m| m.scale(2.0));
        let err = finite_diff_check(loss, &p, &wrong, 1e-5).unwrap();
        assert!((err - 1.0).abs() < 1e-3, "{err}");
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let p = vec![Matrix::zeros(1, 1)];
        let res = finite_diff_check(|_| f64::NAN, &p, &p, 1e-5);
        assert!(matches!(res, Err(CometError::Numeric(_))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[0.25, 0.25]), 0.25);
        assert_eq!(median(&[1.0, 4.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }
}

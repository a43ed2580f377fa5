//! Dense 2D arrays, discrete 2D convolution and the Toeplitz (convolution
//! matrix) representation of an image.
//!
//! Vectorization is row-major everywhere in the crate: entry `(r, c)` of a
//! `rows × cols` array lands at index `r * cols + c`. The row and column
//! ordering of every Toeplitz matrix follows from that choice.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Real-valued 2D grid stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    /// Builds an image from row-major data, checking the length and that every
    /// value is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid(format!(
                "image dimensions must be positive, got {rows}x{cols}"
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::SizeMismatch(format!(
                "{} values supplied for a {rows}x{cols} image",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!(
                "non-finite value at ({}, {})",
                pos / cols,
                pos % cols
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        let mut img = Self::zeros(rows, cols);
        img.data.fill(value);
        img
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds an image from nested rows of `f64` literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::SizeMismatch("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().map(|&v| T::lit(v)))
            .collect();
        Self::new(rows.len(), cols, data)
    }

    /// The 1×1 unit impulse δ.
    pub fn impulse() -> Self {
        Self::filled(1, 1, T::one())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn frobenius_norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Entrywise ℓ₁ norm.
    pub fn l1_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v.magnitude())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| {
            if v.magnitude() > acc {
                v.magnitude()
            } else {
                acc
            }
        })
    }

    pub fn min_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |a, b| if b < a { b } else { a })
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(self.data[0], |a, b| if b > a { b } else { a })
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    /// Frobenius inner product. Panics on shape mismatch.
    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in dot");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`. Panics on shape mismatch.
    pub fn axpy(&self, factor: T, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in axpy");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + factor * b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-T::one(), other)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(T::one(), other)
    }

    /// Copies the `rows × cols` window whose top-left corner is `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || r0 + rows > self.rows || c0 + cols > self.cols {
            return invalid(format!(
                "crop window {rows}x{cols} at ({r0}, {c0}) exceeds {}x{} image",
                self.rows, self.cols
            ));
        }
        Ok(Self::from_fn(rows, cols, |r, c| self.get(r0 + r, c0 + c)))
    }

    /// Places the image inside a zero canvas with its top-left corner at `(r0, c0)`.
    pub fn embed(&self, rows: usize, cols: usize, r0: usize, c0: usize) -> Result<Self> {
        if r0 + self.rows > rows || c0 + self.cols > cols {
            return invalid(format!(
                "{}x{} image does not fit in {rows}x{cols} canvas at ({r0}, {c0})",
                self.rows, self.cols
            ));
        }
        let mut out = Self::zeros(rows, cols);
        for r in 0..self.rows {
            let dst = (r0 + r) * cols + c0;
            out.data[dst..dst + self.cols].copy_from_slice(self.row(r));
        }
        Ok(out)
    }

    /// Cyclic shift: output `(r, c)` takes input `((r - dr) mod rows, (c - dc) mod cols)`.
    pub fn roll(&self, dr: isize, dc: isize) -> Self {
        let (rows, cols) = (self.rows as isize, self.cols as isize);
        Self::from_fn(self.rows, self.cols, |r, c| {
            let sr = (r as isize - dr).rem_euclid(rows) as usize;
            let sc = (c as isize - dc).rem_euclid(cols) as usize;
            self.get(sr, sc)
        })
    }

    /// Rotation by 180°.
    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        data.reverse();
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Converts the scalar type, e.g. `f64` to `f32`.
    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Row-major vectorization ν(·).
pub fn vectorize<T: Real>(x: &Image<T>) -> Vec<T> {
    x.as_slice().to_vec()
}

/// Inverse of [`vectorize`].
pub fn devectorize<T: Real>(v: &[T], rows: usize, cols: usize) -> Result<Image<T>> {
    if v.len() != rows * cols {
        return Err(Error::SizeMismatch(format!(
            "vector of length {} cannot be reshaped to {rows}x{cols}",
            v.len()
        )));
    }
    Image::new(rows, cols, v.to_vec())
}

/// Full 2D convolution: `out(i, j) = Σ x(i-u, j-v) y(u, v)`, of size
/// `(l₁+k₁-1) × (l₂+k₂-1)`.
pub fn conv2d_full<T: Real>(x: &Image<T>, y: &Image<T>) -> Image<T> {
    let (l1, l2) = x.shape();
    let (k1, k2) = y.shape();
    let out_cols = l2 + k2 - 1;
    let mut out = Image::zeros(l1 + k1 - 1, out_cols);
    // Iterate over the smaller operand so the inner loop runs over long rows.
    let (big, small) = if x.len() >= y.len() { (x, y) } else { (y, x) };
    for u in 0..small.rows() {
        for v in 0..small.cols() {
            let w = small.get(u, v);
            if w == T::zero() {
                continue;
            }
            for p in 0..big.rows() {
                let dst = (p + u) * out_cols + v;
                let src = big.row(p);
                let row = &mut out.data[dst..dst + src.len()];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
    out
}

/// Valid 2D convolution: only positions where `y` lies entirely inside `x`.
/// Equals the central `(l₁-k₁+1) × (l₂-k₂+1)` crop of [`conv2d_full`].
pub fn conv2d_valid<T: Real>(x: &Image<T>, y: &Image<T>) -> Result<Image<T>> {
    let (l1, l2) = x.shape();
    let (k1, k2) = y.shape();
    if k1 > l1 || k2 > l2 {
        return invalid(format!(
            "valid convolution needs the {k1}x{k2} operand to fit inside the {l1}x{l2} one"
        ));
    }
    let (o1, o2) = (l1 - k1 + 1, l2 - k2 + 1);
    let mut out = Image::zeros(o1, o2);
    for u in 0..k1 {
        for v in 0..k2 {
            let w = y.get(u, v);
            if w == T::zero() {
                continue;
            }
            for i in 0..o1 {
                let src = &x.row(i + k1 - 1 - u)[k2 - 1 - v..k2 - 1 - v + o2];
                let row = &mut out.data[i * o2..(i + 1) * o2];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
    Ok(out)
}

/// Lagged products `R(d) = Σ_p x(p) x(p + d)` for `|d_r| ≤ max_r`, `|d_c| ≤ max_c`.
/// Entry `(max_r + d_r, max_c + d_c)` of the result holds `R(d)`.
pub fn autocorrelation<T: Real>(x: &Image<T>, max_r: usize, max_c: usize) -> Image<T> {
    let (l1, l2) = x.shape();
    let mut out = Image::zeros(2 * max_r + 1, 2 * max_c + 1);
    for dr in 0..=max_r.min(l1 - 1) {
        for dc in -(max_c.min(l2 - 1) as isize)..=(max_c.min(l2 - 1) as isize) {
            let mut acc = T::zero();
            for p in 0..l1 - dr {
                let a = x.row(p);
                let b = x.row(p + dr);
                if dc >= 0 {
                    let d = dc as usize;
                    for q in 0..l2 - d {
                        acc += a[q] * b[q + d];
                    }
                } else {
                    let d = (-dc) as usize;
                    for q in d..l2 {
                        acc += a[q] * b[q - d];
                    }
                }
            }
            let rc = (max_c as isize + dc) as usize;
            out.set(max_r + dr, rc, acc);
            // R(-d) = R(d)
            out.set(max_r - dr, (max_c as isize - dc) as usize, acc);
        }
    }
    out
}

/// Assembles the `k₁k₂ × k₁k₂` block-Toeplitz matrix `G[(u,v),(u',v')] = R(u-u', v-v')`
/// from a lag table laid out as returned by [`autocorrelation`] with
/// `max_r ≥ k₁-1` and `max_c ≥ k₂-1`.
pub(crate) fn gram_from_lags<T: Real>(lags: &Image<T>, k1: usize, k2: usize) -> DMatrix<T> {
    let max_r = (lags.rows() - 1) / 2;
    let max_c = (lags.cols() - 1) / 2;
    debug_assert!(max_r + 1 >= k1 && max_c + 1 >= k2);
    let d = k1 * k2;
    DMatrix::from_fn(d, d, |a, b| {
        let (u, v) = (a / k2, a % k2);
        let (u2, v2) = (b / k2, b % k2);
        let dr = (max_r + u) - u2;
        let dc = (max_c + v) - v2;
        lags.get(dr, dc)
    })
}

/// Matrix-free view of the convolution operator `Y ↦ X ⊗ Y` on `k₁ × k₂` probes.
#[derive(Clone, Copy, Debug)]
pub struct ConvOperator<'a, T> {
    source: &'a Image<T>,
    probe_rows: usize,
    probe_cols: usize,
}

impl<'a, T: Real> ConvOperator<'a, T> {
    pub fn new(source: &'a Image<T>, probe_rows: usize, probe_cols: usize) -> Result<Self> {
        if probe_rows == 0 || probe_cols == 0 {
            return invalid("probe dimensions must be positive");
        }
        Ok(Self {
            source,
            probe_rows,
            probe_cols,
        })
    }

    /// `(rows, cols)` of the operator as a matrix.
    pub fn dims(&self) -> (usize, usize) {
        let (o1, o2) = self.output_shape();
        (o1 * o2, self.probe_rows * self.probe_cols)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (
            self.source.rows() + self.probe_rows - 1,
            self.source.cols() + self.probe_cols - 1,
        )
    }

    pub fn apply(&self, probe: &[T]) -> Result<Vec<T>> {
        let y = devectorize(probe, self.probe_rows, self.probe_cols)?;
        Ok(conv2d_full(self.source, &y).into_vec())
    }

    /// `Aᵀ w`: correlates `w` (full-convolution sized) with the source.
    pub fn apply_transpose(&self, w: &[T]) -> Result<Vec<T>> {
        let (o1, o2) = self.output_shape();
        let w = devectorize(w, o1, o2)?;
        let x = self.source;
        let mut out = vec![T::zero(); self.probe_rows * self.probe_cols];
        for u in 0..self.probe_rows {
            for v in 0..self.probe_cols {
                let mut acc = T::zero();
                for p in 0..x.rows() {
                    let xs = x.row(p);
                    let ws = &w.row(p + u)[v..v + x.cols()];
                    for (&a, &b) in xs.iter().zip(ws) {
                        acc += a * b;
                    }
                }
                out[u * self.probe_cols + v] = acc;
            }
        }
        Ok(out)
    }

    /// `AᵀA`, computed from the lagged products of the source.
    pub fn gram(&self) -> DMatrix<T> {
        let lags = autocorrelation(self.source, self.probe_rows - 1, self.probe_cols - 1);
        gram_from_lags(&lags, self.probe_rows, self.probe_cols)
    }

    pub fn to_dense(&self) -> ToeplitzOperator<T> {
        let (o1, o2) = self.output_shape();
        let (k1, k2) = (self.probe_rows, self.probe_cols);
        let x = self.source;
        let mut matrix = DMatrix::zeros(o1 * o2, k1 * k2);
        for i in 0..o1 {
            for j in 0..o2 {
                let row = i * o2 + j;
                for u in 0..k1.min(i + 1) {
                    let p = i - u;
                    if p >= x.rows() {
                        continue;
                    }
                    for v in 0..k2.min(j + 1) {
                        let q = j - v;
                        if q < x.cols() {
                            matrix[(row, u * k2 + v)] = x.get(p, q);
                        }
                    }
                }
            }
        }
        ToeplitzOperator {
            source_shape: x.shape(),
            probe_shape: (k1, k2),
            matrix,
        }
    }
}

/// Dense Toeplitz matrix `A_{k₁,k₂}(X)` with `ν(X ⊗ Y) = A ν(Y)`.
#[derive(Clone, Debug)]
pub struct ToeplitzOperator<T: Real> {
    source_shape: (usize, usize),
    probe_shape: (usize, usize),
    matrix: DMatrix<T>,
}

impl<T: Real> ToeplitzOperator<T> {
    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    pub fn probe_shape(&self) -> (usize, usize) {
        self.probe_shape
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.matrix
    }

    pub fn apply(&self, probe: &[T]) -> Result<Vec<T>> {
        if probe.len() != self.matrix.ncols() {
            return Err(Error::SizeMismatch(format!(
                "probe of length {} for operator with {} columns",
                probe.len(),
                self.matrix.ncols()
            )));
        }
        let v = nalgebra::DVector::from_column_slice(probe);
        Ok((&self.matrix * v).as_slice().to_vec())
    }
}

/// Builds the dense Toeplitz matrix of `x` for `k₁ × k₂` probes.
pub fn toeplitz<T: Real>(x: &Image<T>, k1: usize, k2: usize) -> Result<ToeplitzOperator<T>> {
    Ok(ConvOperator::new(x, k1, k2)?.to_dense())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Image<f64> {
        Image::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Direct evaluation of the convolution sum, bounds-checked per term.
    fn conv_oracle(x: &Image<f64>, y: &Image<f64>) -> Image<f64> {
        let (l1, l2) = x.shape();
        let (k1, k2) = y.shape();
        Image::from_fn(l1 + k1 - 1, l2 + k2 - 1, |i, j| {
            let mut acc = 0.0;
            for u in 0..k1 {
                for v in 0..k2 {
                    let (p, q) = (i as isize - u as isize, j as isize - v as isize);
                    if p >= 0 && q >= 0 && (p as usize) < l1 && (q as usize) < l2 {
                        acc += x.get(p as usize, q as usize) * y.get(u, v);
                    }
                }
            }
            acc
        })
    }

    fn max_diff(a: &Image<f64>, b: &Image<f64>) -> f64 {
        a.sub(b).max_abs()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Image::<f64>::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Image::<f64>::new(0, 2, vec![]).is_err());
        assert!(Image::<f64>::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Image::<f64>::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn full_convolution_small_example() {
        let x = Image::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let y = Image::<f64>::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let expected =
            Image::from_rows(&[[1.0, 3.0, 2.0], [4.0, 10.0, 6.0], [3.0, 7.0, 4.0]]).unwrap();
        assert_eq!(conv_oracle(&x, &y), expected);
        assert_eq!(conv2d_full(&x, &y), expected);
    }

    #[test]
    fn impulse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 5, 7);
        assert_eq!(conv2d_full(&x, &Image::impulse()), x);
        assert_eq!(conv2d_valid(&x, &Image::impulse()).unwrap(), x);
    }

    #[test]
    fn full_convolution_matches_oracle_and_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (l1, l2) = (rng.random_range(1..12), rng.random_range(1..12));
            let (k1, k2) = (rng.random_range(1..6), rng.random_range(1..6));
            let x = random_image(&mut rng, l1, l2);
            let y = random_image(&mut rng, k1, k2);
            let xy = conv2d_full(&x, &y);
            assert!(max_diff(&xy, &conv_oracle(&x, &y)) < 1e-12);
            assert!(max_diff(&xy, &conv2d_full(&y, &x)) < 1e-12);
        }
    }

    #[test]
    fn valid_convolution_of_equal_sizes_is_flipped_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 3, 3);
        let y = random_image(&mut rng, 3, 3);
        let out = conv2d_valid(&x, &y).unwrap();
        assert_eq!(out.shape(), (1, 1));
        assert!((out.get(0, 0) - x.dot(&y.flipped())).abs() < 1e-14);
    }

    #[test]
    fn valid_convolution_is_central_crop_of_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 9, 11);
        let y = random_image(&mut rng, 3, 4);
        let full = conv2d_full(&x, &y);
        let crop = full.crop(2, 3, 7, 8).unwrap();
        assert!(max_diff(&conv2d_valid(&x, &y).unwrap(), &crop) < 1e-12);
    }

    #[test]
    fn valid_convolution_rejects_oversized_kernel() {
        let x = Image::<f64>::zeros(3, 3);
        let y = Image::<f64>::zeros(4, 2);
        assert!(matches!(
            conv2d_valid(&x, &y),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn vectorization_is_row_major() {
        let x = Image::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(vectorize(&x), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(devectorize(&vectorize(&x), 2, 2).unwrap(), x);
        assert!(matches!(
            devectorize(&[1.0f64; 3], 2, 2),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn toeplitz_shape_and_faithfulness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng, 3, 3);
        let a = toeplitz(&x, 2, 2).unwrap();
        assert_eq!(a.matrix().shape(), (16, 4));
        for _ in 0..20 {
            let (l1, l2) = (rng.random_range(1..10), rng.random_range(1..10));
            let (k1, k2) = (rng.random_range(1..5), rng.random_range(1..5));
            let x = random_image(&mut rng, l1, l2);
            let y = random_image(&mut rng, k1, k2);
            let a = toeplitz(&x, k1, k2).unwrap();
            let lhs = a.apply(&vectorize(&y)).unwrap();
            let rhs = vectorize(&conv2d_full(&x, &y));
            let err: f64 = lhs
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-10 * norm);
        }
    }

    #[test]
    fn toeplitz_of_impulse_is_identity() {
        let a = toeplitz(&Image::<f64>::impulse(), 2, 2).unwrap();
        assert_eq!(a.matrix(), &DMatrix::<f64>::identity(4, 4));
    }

    #[test]
    fn matrix_free_operator_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng, 6, 5);
        let op = ConvOperator::new(&x, 3, 4).unwrap();
        let dense = op.to_dense();
        let gram = dense.matrix().transpose() * dense.matrix();
        assert!((op.gram() - gram).amax() < 1e-12);

        let w: Vec<f64> = (0..dense.matrix().nrows())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let at_w = dense.matrix().transpose() * nalgebra::DVector::from_column_slice(&w);
        let mf = op.apply_transpose(&w).unwrap();
        for (a, b) in mf.iter().zip(at_w.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn roll_and_embed() {
        let x = Image::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let rolled = x.roll(1, 0);
        assert_eq!(rolled, Image::from_rows(&[[3.0, 4.0], [1.0, 2.0]]).unwrap());
        let e = x.embed(3, 3, 1, 1).unwrap();
        assert_eq!(e.get(2, 2), 4.0);
        assert_eq!(e.sum(), 10.0);
        assert!(x.embed(2, 2, 1, 0).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let x = Image::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let y = Image::<f32>::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(conv2d_full(&x, &y).get(1, 1), 10.0f32);
    }
}

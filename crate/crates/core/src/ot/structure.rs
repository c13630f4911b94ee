use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric Toeplitz cost with two levels: `inner` for index pairs at
/// distance `1..=width`, `outer` everywhere else (including the diagonal).
///
/// When `padded`, an extra trailing index is appended whose row and column
/// are zero. Products with a transport plan cost `O(size * cols)` through
/// prefix sums, independent of `width`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandPrior {
    len: usize,
    width: usize,
    inner: f64,
    outer: f64,
    padded: bool,
}

impl BandPrior {
    pub fn new(len: usize, width: usize, inner: f64, outer: f64) -> Self {
        Self {
            len,
            width,
            inner,
            outer,
            padded: false,
        }
    }

    /// Appends a zero row and column for a virtual index.
    pub fn padded(mut self) -> Self {
        self.padded = true;
        self
    }

    /// Drops the virtual index again.
    pub fn unpadded(mut self) -> Self {
        self.padded = false;
        self
    }

    pub fn is_padded(&self) -> bool {
        self.padded
    }

    /// Number of real (non-virtual) indices.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn inner(&self) -> f64 {
        self.inner
    }

    pub fn outer(&self) -> f64 {
        self.outer
    }

    pub fn size(&self) -> usize {
        self.len + usize::from(self.padded)
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        if i >= self.len || k >= self.len {
            return 0.0;
        }
        let d = i.abs_diff(k);
        if d >= 1 && d <= self.width {
            self.inner
        } else {
            self.outer
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.size();
        Array2::from_shape_fn((n, n), |(i, k)| self.get(i, k))
    }

    /// `S x` for a vector `x` of length `size()`.
    fn apply_slice(&self, x: &[f64], out: &mut [f64], prefix: &mut Vec<f64>) {
        let n = self.len;
        prefix.clear();
        prefix.push(0.0);
        let mut acc = 0.0;
        for &v in &x[..n] {
            acc += v;
            prefix.push(acc);
        }
        let total = prefix[n];
        let delta = self.inner - self.outer;
        for i in 0..n {
            let lo = i.saturating_sub(self.width);
            let hi = (i + self.width).min(n - 1);
            let window = prefix[hi + 1] - prefix[lo] - x[i];
            out[i] = self.outer * total + delta * window;
        }
        if self.padded {
            out[n] = 0.0;
        }
    }

    /// `S T` where `T` has `size()` rows.
    pub fn mul_left(&self, t: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.len;
        let m = t.ncols();
        let mut prefix = Array2::<f64>::zeros((n + 1, m));
        for i in 0..n {
            let next = &prefix.row(i) + &t.row(i);
            prefix.row_mut(i + 1).assign(&next);
        }
        let total = prefix.row(n).to_owned();
        let delta = self.inner - self.outer;
        let mut out = Array2::<f64>::zeros((self.size(), m));
        for i in 0..n {
            let lo = i.saturating_sub(self.width);
            let hi = (i + self.width).min(n - 1);
            Zip::from(out.row_mut(i))
                .and(prefix.row(hi + 1))
                .and(prefix.row(lo))
                .and(t.row(i))
                .and(&total)
                .for_each(|o, &ph, &pl, &ti, &tot| {
                    *o = self.outer * tot + delta * (ph - pl - ti);
                });
        }
        out
    }

    /// `T S` where `T` has `size()` columns.
    pub fn mul_right(&self, t: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((t.nrows(), self.size()));
        let mut prefix = Vec::with_capacity(self.len + 1);
        let mut row_buf = vec![0.0; self.size()];
        for (src, mut dst) in t.rows().into_iter().zip(out.rows_mut()) {
            for (b, v) in row_buf.iter_mut().zip(src.iter()) {
                *b = *v;
            }
            let dst = dst.as_slice_mut().expect("fresh array is contiguous");
            self.apply_slice(&row_buf, dst, &mut prefix);
        }
        out
    }
}

/// Structural (intra-sequence) cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum StructCost {
    Dense(Array2<f64>),
    Band(BandPrior),
}

impl StructCost {
    pub fn zeros(n: usize) -> Self {
        StructCost::Band(BandPrior::new(n, 0, 0.0, 0.0))
    }

    pub fn size(&self) -> usize {
        match self {
            StructCost::Dense(a) => a.nrows(),
            StructCost::Band(b) => b.size(),
        }
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        match self {
            StructCost::Dense(a) => a[[i, k]],
            StructCost::Band(b) => b.get(i, k),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            StructCost::Dense(a) => a.clone(),
            StructCost::Band(b) => b.to_dense(),
        }
    }

    /// True when every entry is zero.
    pub fn is_zero(&self) -> bool {
        match self {
            StructCost::Dense(a) => a.iter().all(|v| *v == 0.0),
            StructCost::Band(b) => b.outer == 0.0 && (b.inner == 0.0 || b.width == 0 || b.len < 2),
        }
    }

    /// `S T`.
    pub fn mul_left(&self, t: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            StructCost::Dense(a) => a.dot(&t),
            StructCost::Band(b) => b.mul_left(t),
        }
    }

    /// `T S`.
    pub fn mul_right(&self, t: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            StructCost::Dense(a) => t.dot(a),
            StructCost::Band(b) => b.mul_right(t),
        }
    }

    /// `S x`.
    pub fn mul_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let col = x.view().insert_axis(Axis(1));
        self.mul_left(col).remove_axis(Axis(1))
    }

    pub(crate) fn validate(&self, name: &str) -> Result<()> {
        match self {
            StructCost::Dense(a) => {
                if !a.is_square() {
                    return Err(Error::dim(format!("{name} must be square, got {:?}", a.dim())));
                }
                let n = a.nrows();
                for i in 0..n {
                    for k in 0..n {
                        let v = a[[i, k]];
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::domain(format!("{name}[{i}, {k}] = {v} must be finite and >= 0")));
                        }
                        if (v - a[[k, i]]).abs() > SYMMETRY_TOL {
                            return Err(Error::domain(format!("{name} is not symmetric at ({i}, {k})")));
                        }
                    }
                }
            }
            StructCost::Band(b) => {
                for v in [b.inner, b.outer] {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::domain(format!("{name} level {v} must be finite and >= 0")));
                    }
                }
            }
        }
        Ok(())
    }
}

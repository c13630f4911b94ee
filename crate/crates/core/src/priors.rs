//! Cost matrices for sequence alignment: visual cost, structural and
//! temporal priors, and the virtual-frame augmentation.
//!
//! Formulas use one-based frame positions (`i / N` with `i` in `1..=N`);
//! all Rust indices are zero-based.

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{argmax, BandPrior, CostBundle, Histogram, StructCost};

/// An ordered list of `N` frame vectors of dimension `D`, stored row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::dim(format!("sequence must be non-empty, got {:?}", frames.dim())));
        }
        if let Some(((i, d), v)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::domain(format!("frame {i} coordinate {d} is {v}")));
        }
        Ok(Self { frames })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::dim(format!("frame {i} has dimension {} instead of {dim}", rows[i].len())));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let frames = Array2::from_shape_vec((rows.len(), dim), flat).map_err(|e| Error::dim(e.to_string()))?;
        Self::new(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> ArrayView1<'_, f64> {
        self.frames.row(i)
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    /// Sequence made of the given frames, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::dim(format!("frame index {bad} out of range for length {}", self.len())));
        }
        Self::new(self.frames.select(ndarray::Axis(0), indices))
    }
}

/// Parameters of the priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Structural-prior radius, relative to sequence length.
    pub radius: f64,
    /// Weight of the temporal prior added to the visual cost.
    pub rho: f64,
    /// Virtual-frame threshold on the row-normalized assignment probability.
    pub zeta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            radius: 0.02,
            rho: 0.35,
            zeta: 0.5,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        check_radius(self.radius)?;
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::config(format!("zeta must lie in [0, 1], got {}", self.zeta)));
        }
        Ok(())
    }
}

fn check_radius(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("radius must lie in (0, 1], got {r}")));
    }
    Ok(())
}

/// `1 - cos(x_i, y_j)` for every frame pair.
pub fn visual_cost(x: &FeatureSequence, y: &FeatureSequence) -> Result<Array2<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::dim(format!("frame dimensions differ: {} vs {}", x.dim(), y.dim())));
    }
    let xn = unit_rows(x.frames(), "X")?;
    let yn = unit_rows(y.frames(), "Y")?;
    Ok(xn.dot(&yn.t()).mapv(|c| (1.0 - c).clamp(0.0, 2.0)))
}

pub(crate) fn unit_rows(a: &Array2<f64>, name: &str) -> Result<Array2<f64>> {
    let mut out = a.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) {
            return Err(Error::domain(format!("{name} frame {i} has zero norm")));
        }
        row /= norm;
    }
    Ok(out)
}

/// Number of off-diagonals inside the structural band: `floor(len * r)`.
pub fn band_width(len: usize, radius: f64) -> usize {
    ((len as f64) * radius + 1e-9).floor() as usize
}

/// Structural priors over the two sequences.
///
/// `C^x` is `1/r` for `1 <= |i - k| <= N r` and `0` elsewhere; `C^y` is `0`
/// for `1 <= |j - l| <= M r` and `1` elsewhere, so its diagonal is `1`.
pub fn structural_priors(n: usize, m: usize, radius: f64) -> Result<(BandPrior, BandPrior)> {
    check_radius(radius)?;
    if n == 0 || m == 0 {
        return Err(Error::dim("structural priors need non-empty sequences"));
    }
    let cx = BandPrior::new(n, band_width(n, radius).min(n - 1), 1.0 / radius, 0.0);
    let cy = BandPrior::new(m, band_width(m, radius).min(m - 1), 0.0, 1.0);
    Ok((cx, cy))
}

/// Structural prior over `k` action indices: `0` for `|k - l| <= K r`
/// (diagonal included) and `1` otherwise.
pub fn action_prior(k: usize, radius: f64) -> Result<StructCost> {
    check_radius(radius)?;
    let w = band_width(k, radius);
    Ok(StructCost::Dense(Array2::from_shape_fn((k, k), |(a, b)| {
        if a.abs_diff(b) <= w {
            0.0
        } else {
            1.0
        }
    })))
}

/// `R_ij = |i / N - j / M|` with one-based positions.
pub fn temporal_prior(n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |(i, j)| ((i + 1) as f64 / n as f64 - (j + 1) as f64 / m as f64).abs())
}

/// A problem whose last row and column belong to virtual frames.
#[derive(Clone, Debug)]
pub struct VirtualAugmented {
    pub bundle: CostBundle,
    pub p: Histogram,
    pub q: Histogram,
    pub virtual_cost: f64,
}

/// Appends a virtual frame to both sequences.
///
/// The virtual row, column and corner of the linear cost are set to
/// `virtual_cost` (the mean of `cost` when `None`); the structural priors get
/// a zero row and column for the virtual index; marginals are uniform over
/// `N + 1` and `M + 1` entries. Any temporal prior should already be folded
/// into `cost`; virtual entries carry none.
pub fn augment_virtual(
    cost: &Array2<f64>,
    struct_x: BandPrior,
    struct_y: BandPrior,
    virtual_cost: Option<f64>,
) -> Result<VirtualAugmented> {
    let (n, m) = cost.dim();
    if struct_x.is_padded() || struct_y.is_padded() || struct_x.len() != n || struct_y.len() != m {
        return Err(Error::dim(format!(
            "priors of sizes {} and {} do not fit a {n}x{m} cost",
            struct_x.size(),
            struct_y.size()
        )));
    }
    let v = virtual_cost.unwrap_or_else(|| cost.mean().unwrap_or(0.0));
    let mut aug = Array2::from_elem((n + 1, m + 1), v);
    aug.slice_mut(s![..n, ..m]).assign(cost);
    let bundle = CostBundle::new(aug, StructCost::Band(struct_x.padded()), StructCost::Band(struct_y.padded()))?;
    Ok(VirtualAugmented {
        bundle,
        p: Histogram::uniform(n + 1),
        q: Histogram::uniform(m + 1),
        virtual_cost: v,
    })
}

/// Drops the trailing virtual row and column.
pub fn strip_virtual(a: &Array2<f64>) -> Array2<f64> {
    let (n, m) = a.dim();
    a.slice(s![..n.saturating_sub(1), ..m.saturating_sub(1)]).to_owned()
}

/// Where a real frame is matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Match {
    Frame(usize),
    Virtual,
}

impl Match {
    pub fn frame(self) -> Option<usize> {
        match self {
            Match::Frame(j) => Some(j),
            Match::Virtual => None,
        }
    }
}

/// Matches in both directions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondences {
    pub x_to_y: Vec<Match>,
    pub y_to_x: Vec<Match>,
}

impl Correspondences {
    /// `(i, j)` pairs for the X frames not sent to the virtual frame.
    pub fn matched_pairs(&self) -> Vec<(usize, usize)> {
        self.x_to_y
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.frame().map(|j| (i, j)))
            .collect()
    }
}

fn assign_line(values: ArrayView1<'_, f64>, zeta: f64, with_virtual: bool) -> Match {
    let real = if with_virtual { values.len() - 1 } else { values.len() };
    let total: f64 = values.sum();
    let best = argmax(values.iter().take(real).copied());
    if with_virtual {
        let prob = if total > 0.0 { values[best] / total } else { 0.0 };
        if prob < zeta {
            return Match::Virtual;
        }
    }
    Match::Frame(best)
}

/// Reads correspondences off an augmented `(N+1) x (M+1)` plan.
///
/// A real frame goes to the virtual frame when its largest row-normalized
/// (resp. column-normalized) probability over real frames is below `zeta`;
/// otherwise it goes to the argmax, ties to the smallest index.
pub fn assign_with_virtual(t: &Array2<f64>, zeta: f64) -> Correspondences {
    let (n1, m1) = t.dim();
    let x_to_y = (0..n1.saturating_sub(1)).map(|i| assign_line(t.row(i), zeta, true)).collect();
    let y_to_x = (0..m1.saturating_sub(1)).map(|j| assign_line(t.column(j), zeta, true)).collect();
    Correspondences { x_to_y, y_to_x }
}

/// Plain argmax correspondences for a plan without virtual frames.
pub fn assign_argmax(t: &Array2<f64>) -> Correspondences {
    let (n, m) = t.dim();
    Correspondences {
        x_to_y: (0..n).map(|i| assign_line(t.row(i), 0.0, false)).collect(),
        y_to_x: (0..m).map(|j| assign_line(t.column(j), 0.0, false)).collect(),
    }
}

/// Boolean mask of frames that were matched to a real frame.
pub fn real_mask(matches: &[Match]) -> Array1<bool> {
    matches.iter().map(|m| matches!(m, Match::Frame(_))).collect()
}

//! Entropic optimal transport: objectives, KL projections and the fused
//! Gromov-Wasserstein mirror-descent solver.
//!
//! All structural costs use the product loss `L(a, b) = a * b`, which lets the
//! quadratic term be evaluated as `<C^x T C^y, T>` instead of a quadruple sum.

mod objective;
mod sinkhorn;
mod solver;
mod structure;

pub use objective::{entropic_objective, entropy, fgw_objective, gw_gradient, gw_objective, kot_objective};
pub use sinkhorn::{scale_log, sinkhorn_project, unbalanced_scale, Potentials, Relaxation, ScalingResult};
pub use solver::{solve_fgw, SolveReport};
pub use structure::{BandPrior, StructCost};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HISTOGRAM_TOL: f64 = 1e-9;

/// Nonnegative mass vector over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram(Array1<f64>);

impl Histogram {
    /// Builds a probability histogram; entries must be nonnegative and sum to one.
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        let h = Self::unnormalized(weights)?;
        let total = h.total();
        if (total - 1.0).abs() > HISTOGRAM_TOL {
            return Err(Error::domain(format!("histogram sums to {total}, expected 1")));
        }
        Ok(h)
    }

    /// Builds a nonnegative mass vector without the unit-sum requirement.
    pub fn unnormalized(weights: Array1<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::dim("histogram must have at least one entry"));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(Error::domain(format!("histogram entry {i} is {w}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform histogram over an empty support");
        Self(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }
}

/// Nonnegative transport plan between two supports.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling(Array2<f64>);

impl Coupling {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::domain(format!("coupling entry ({i}, {j}) is {v}")));
        }
        Ok(Self(values))
    }

    /// Independence coupling `p q^T`.
    pub fn product(p: &Histogram, q: &Histogram) -> Self {
        let (p, q) = (p.weights(), q.weights());
        Self(Array2::from_shape_fn((p.len(), q.len()), |(i, j)| p[i] * q[j]))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(0))
    }

    pub fn total_mass(&self) -> f64 {
        self.0.sum()
    }

    /// `|T 1 - p|_1 + |T^T 1 - q|_1`.
    pub fn marginal_error(&self, p: &Histogram, q: &Histogram) -> f64 {
        let rows: f64 = (&self.row_sums() - p.weights()).mapv(f64::abs).sum();
        let cols: f64 = (&self.col_sums() - q.weights()).mapv(f64::abs).sum();
        rows + cols
    }

    /// Index of the largest entry in each row, ties resolved toward the smallest column.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.0.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

/// First index of the maximum; NaNs never win.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Linear cost plus the two structural costs of a fused problem.
#[derive(Clone, Debug)]
pub struct CostBundle {
    pub kot_cost: Array2<f64>,
    pub struct_x: StructCost,
    pub struct_y: StructCost,
}

impl CostBundle {
    pub fn new(kot_cost: Array2<f64>, struct_x: StructCost, struct_y: StructCost) -> Result<Self> {
        let (n, m) = kot_cost.dim();
        if struct_x.size() != n || struct_y.size() != m {
            return Err(Error::dim(format!(
                "cost is {n}x{m} but structural priors are {}x{0} and {}x{1}",
                struct_x.size(),
                struct_y.size()
            )));
        }
        if let Some(((i, j), v)) = kot_cost.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::domain(format!("cost entry ({i}, {j}) is {v}")));
        }
        struct_x.validate("struct_x")?;
        struct_y.validate("struct_y")?;
        Ok(Self {
            kot_cost,
            struct_x,
            struct_y,
        })
    }

    /// Bundle with zero structural costs (pure linear transport).
    pub fn linear(kot_cost: Array2<f64>) -> Result<Self> {
        let (n, m) = kot_cost.dim();
        Self::new(kot_cost, StructCost::zeros(n), StructCost::zeros(m))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kot_cost.dim()
    }
}

/// How the marginal constraints of the transport polytope are enforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginalMode {
    /// Both marginals are hard constraints.
    Balanced,
    /// Both marginals are replaced by KL penalties weighted by `lambda_p`, `lambda_q`.
    FullUnbalanced,
    /// Row marginal is hard; the column marginal is a KL penalty weighted by `lambda_q`.
    PartialUnbalanced,
}

impl std::str::FromStr for MarginalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "full-unbalanced" => Ok(Self::FullUnbalanced),
            "partial-unbalanced" => Ok(Self::PartialUnbalanced),
            other => Err(Error::config(format!("unknown marginal mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for MarginalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Balanced => "balanced",
            Self::FullUnbalanced => "full-unbalanced",
            Self::PartialUnbalanced => "partial-unbalanced",
        })
    }
}

/// Parameters of the entropic mirror-descent solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Weight of the structural term, in `[0, 1]`.
    pub alpha: f64,
    /// Entropy weight.
    pub epsilon: f64,
    /// Mirror-descent step; `1.0` re-linearizes fully at each outer iteration.
    pub step_size: f64,
    pub outer_iters: usize,
    pub inner_sinkhorn_iters: usize,
    /// Outer stopping tolerance on the L1 change of the coupling.
    pub tol: f64,
    /// Marginal (or potential) tolerance of each inner scaling run.
    pub inner_tol: f64,
    pub marginal_mode: MarginalMode,
    pub lambda_p: f64,
    pub lambda_q: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            epsilon: 0.07,
            step_size: 1.0,
            outer_iters: 25,
            inner_sinkhorn_iters: 50,
            tol: 1e-6,
            inner_tol: 1e-9,
            marginal_mode: MarginalMode::Balanced,
            lambda_p: 0.05,
            lambda_q: 0.05,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::config(format!("step_size must lie in (0, 1], got {}", self.step_size)));
        }
        if self.outer_iters == 0 || self.inner_sinkhorn_iters == 0 {
            return Err(Error::config("iteration counts must be at least 1"));
        }
        if !(self.tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        if !(self.lambda_p >= 0.0) || !(self.lambda_q >= 0.0) {
            return Err(Error::config("KL penalty weights must be nonnegative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn histogram_rejects_negative_and_unnormalized() {
        assert!(Histogram::new(array![0.5, 0.5]).is_ok());
        assert!(Histogram::new(array![0.6, 0.5]).is_err());
        assert!(Histogram::new(array![1.5, -0.5]).is_err());
        assert!(Histogram::unnormalized(array![2.0, 0.0]).is_ok());
    }

    #[test]
    fn product_coupling_is_feasible() {
        let p = Histogram::new(array![0.2, 0.8]).unwrap();
        let q = Histogram::uniform(3);
        let t = Coupling::product(&p, &q);
        assert!(t.marginal_error(&p, &q) < 1e-15);
    }

    #[test]
    fn row_argmax_breaks_ties_low() {
        let t = Coupling::new(array![[0.25, 0.25], [0.1, 0.4]]).unwrap();
        assert_eq!(t.row_argmax(), vec![0, 1]);
    }

    #[test]
    fn config_ranges() {
        let mut cfg = SolverConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = 1.2;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.5;
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bundle_rejects_asymmetric_prior() {
        let c = Array2::zeros((2, 2));
        let bad = StructCost::Dense(array![[0.0, 1.0], [0.0, 0.0]]);
        assert!(CostBundle::new(c, bad, StructCost::zeros(2)).is_err());
    }
}

//! Frame-to-frame alignment: pseudo-labels from the fused transport problem,
//! temperature-scaled similarities and the cross-entropy alignment loss.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{solve_fgw, CostBundle, Coupling, Histogram, SolveReport, SolverConfig, StructCost};
use crate::priors::{
    assign_argmax, assign_with_virtual, augment_virtual, real_mask, structural_priors, temporal_prior, visual_cost,
    Correspondences, FeatureSequence, PriorConfig,
};

/// Lower bound applied to probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub prior: PriorConfig,
    pub solver: SolverConfig,
    /// Softmax temperature of the similarities.
    pub tau: f64,
    /// Append virtual frames that absorb background and redundant frames.
    pub use_virtual: bool,
    /// Row-normalize pseudo-labels before the cross-entropy (off by default).
    pub normalize_targets: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            prior: PriorConfig::default(),
            solver: SolverConfig::default(),
            tau: 0.1,
            use_virtual: true,
            normalize_targets: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.solver.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Two sequences together with every parameter needed to align them.
#[derive(Clone, Debug)]
pub struct AlignProblem {
    pub x: FeatureSequence,
    pub y: FeatureSequence,
    pub config: AlignConfig,
}

/// Stop-gradient targets produced by the transport solver.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// Full plan, including the virtual row and column when enabled.
    pub coupling: Coupling,
    /// Real-frame block of the plan (`N x M`).
    pub targets: Array2<f64>,
    pub correspondences: Correspondences,
    pub report: SolveReport,
    pub has_virtual: bool,
}

#[derive(Clone, Debug)]
pub struct AlignResult {
    pub pseudo_labels: PseudoLabels,
    /// Row-stochastic `N x M` similarities.
    pub similarities: Array2<f64>,
    pub loss: f64,
    pub grad_x: Array2<f64>,
    pub grad_y: Array2<f64>,
}

/// `C + rho R`.
pub fn augmented_kot_cost(x: &FeatureSequence, y: &FeatureSequence, rho: f64) -> Result<Array2<f64>> {
    if !(rho >= 0.0) {
        return Err(Error::config(format!("rho must be >= 0, got {rho}")));
    }
    let mut c = visual_cost(x, y)?;
    if rho > 0.0 {
        c.scaled_add(rho, &temporal_prior(x.len(), y.len()));
    }
    Ok(c)
}

/// Transport problem (costs and marginals) solved for the pseudo-labels.
pub fn build_problem(x: &FeatureSequence, y: &FeatureSequence, cfg: &AlignConfig) -> Result<(CostBundle, Histogram, Histogram)> {
    cfg.validate()?;
    let cost = augmented_kot_cost(x, y, cfg.prior.rho)?;
    let (cx, cy) = structural_priors(x.len(), y.len(), cfg.prior.radius)?;
    if cfg.use_virtual {
        let aug = augment_virtual(&cost, cx, cy, None)?;
        Ok((aug.bundle, aug.p, aug.q))
    } else {
        let bundle = CostBundle::new(cost, StructCost::Band(cx), StructCost::Band(cy))?;
        Ok((bundle, Histogram::uniform(x.len()), Histogram::uniform(y.len())))
    }
}

/// Solves the fused problem on the (virtual-augmented) costs.
///
/// The result is a constant target: nothing downstream differentiates through it.
pub fn compute_pseudo_labels(x: &FeatureSequence, y: &FeatureSequence, cfg: &AlignConfig) -> Result<PseudoLabels> {
    let (bundle, p, q) = build_problem(x, y, cfg)?;
    let (coupling, report) = solve_fgw(&bundle, &p, &q, &cfg.solver)?;
    let (n, m) = (x.len(), y.len());
    let targets = coupling.values().slice(s![..n, ..m]).to_owned();
    let correspondences = if cfg.use_virtual {
        assign_with_virtual(coupling.values(), cfg.prior.zeta)
    } else {
        assign_argmax(coupling.values())
    };
    Ok(PseudoLabels {
        coupling,
        targets,
        correspondences,
        report,
        has_virtual: cfg.use_virtual,
    })
}

/// Row-wise log-softmax of `X Y^T / tau`.
pub fn log_similarities(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::dim(format!("embedding dimensions differ: {} vs {}", x.ncols(), y.ncols())));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    let mut logits = x.dot(&y.t()) / tau;
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    Ok(logits)
}

/// Row-wise softmax of `X Y^T / tau`.
pub fn normalized_similarities(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    Ok(log_similarities(x, y, tau)?.mapv(f64::exp))
}

/// `-sum_ij T_ij log P_ij` from log-probabilities. Agrees with
/// [`alignment_loss`] wherever `P >= PROB_FLOOR` and is smooth everywhere,
/// so it is the value the analytic gradient belongs to.
pub fn log_loss(log_p: &Array2<f64>, t: &Array2<f64>) -> Result<f64> {
    check_pair(log_p, t)?;
    Ok(-log_p
        .iter()
        .zip(t.iter())
        .filter(|(_, &w)| w != 0.0)
        .map(|(&lp, &w)| w * lp)
        .sum::<f64>())
}

fn check_pair(p: &Array2<f64>, t: &Array2<f64>) -> Result<()> {
    if p.dim() != t.dim() {
        return Err(Error::dim(format!("similarities {:?} vs targets {:?}", p.dim(), t.dim())));
    }
    Ok(())
}

/// Cross-entropy `-sum_ij T_ij log P_ij` over all entries.
pub fn alignment_loss(p: &Array2<f64>, t: &Array2<f64>) -> Result<f64> {
    check_pair(p, t)?;
    Ok(-p
        .iter()
        .zip(t.iter())
        .filter(|(_, &w)| w != 0.0)
        .map(|(&pv, &w)| w * pv.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Zeroes target rows and columns that are excluded from the loss.
pub fn mask_targets(t: &Array2<f64>, rows: &Array1<bool>, cols: &Array1<bool>) -> Result<Array2<f64>> {
    if rows.len() != t.nrows() || cols.len() != t.ncols() {
        return Err(Error::dim("mask lengths do not match targets"));
    }
    let mut out = t.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if !rows[i] || !cols[j] {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Gradient of the loss with respect to the logits `S = X Y^T / tau`:
/// `dL/dS_ij = P_ij sum_l T_il - T_ij`.
pub fn loss_logit_grad(p: &Array2<f64>, t: &Array2<f64>) -> Result<Array2<f64>> {
    check_pair(p, t)?;
    let row_mass = t.sum_axis(Axis(1));
    let mut g = p * &row_mass.insert_axis(Axis(1));
    g -= t;
    Ok(g)
}

/// Exact gradient of [`alignment_loss`] with respect to both embedding sets,
/// with `T` held constant.
pub fn alignment_loss_grad(
    p: &Array2<f64>,
    t: &Array2<f64>,
    x: &Array2<f64>,
    y: &Array2<f64>,
    tau: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let g = loss_logit_grad(p, t)?;
    if x.nrows() != g.nrows() || y.nrows() != g.ncols() {
        return Err(Error::dim("embeddings do not match the similarity matrix"));
    }
    let grad_x = g.dot(y) / tau;
    let grad_y = g.t().dot(x) / tau;
    Ok((grad_x, grad_y))
}

/// Loss targets from pseudo-labels: virtual-assigned frames are dropped and
/// rows are optionally normalized.
pub fn loss_targets(labels: &PseudoLabels, normalize: bool) -> Result<Array2<f64>> {
    let mut t = if labels.has_virtual {
        mask_targets(
            &labels.targets,
            &real_mask(&labels.correspondences.x_to_y),
            &real_mask(&labels.correspondences.y_to_x),
        )?
    } else {
        labels.targets.clone()
    };
    if normalize {
        for mut row in t.rows_mut() {
            let total = row.sum();
            if total > 0.0 {
                row /= total;
            }
        }
    }
    Ok(t)
}

/// Pseudo-labels, similarities, loss and embedding gradients for one pair of
/// embedded sequences.
pub fn align_pair(x: &FeatureSequence, y: &FeatureSequence, cfg: &AlignConfig) -> Result<AlignResult> {
    let pseudo_labels = compute_pseudo_labels(x, y, cfg)?;
    let targets = loss_targets(&pseudo_labels, cfg.normalize_targets)?;
    let log_p = log_similarities(x.frames(), y.frames(), cfg.tau)?;
    let loss = log_loss(&log_p, &targets)?;
    let similarities = log_p.mapv(f64::exp);
    let (grad_x, grad_y) = alignment_loss_grad(&similarities, &targets, x.frames(), y.frames(), cfg.tau)?;
    Ok(AlignResult {
        pseudo_labels,
        similarities,
        loss,
        grad_x,
        grad_y,
    })
}

impl AlignProblem {
    pub fn solve(&self) -> Result<AlignResult> {
        align_pair(&self.x, &self.y, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::Match;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Frames are Gaussian bumps sliding along the coordinate axis, so
    /// neighbouring frames are similar but distinguishable.
    fn monotone_sequence(n: usize) -> FeatureSequence {
        let frames = Array2::from_shape_fn((n, n + 2), |(i, d)| {
            let centre = i as f64 + 1.0;
            (-(d as f64 - centre).powi(2) / 2.0).exp()
        });
        FeatureSequence::new(frames).unwrap()
    }

    fn loss_of(x: &Array2<f64>, y: &Array2<f64>, t: &Array2<f64>, tau: f64) -> f64 {
        alignment_loss(&normalized_similarities(x, y, tau).unwrap(), t).unwrap()
    }

    #[test]
    fn log_loss_matches_floored_loss_above_the_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Array2::from_shape_fn((5, 3), |_| rng.gen::<f64>() - 0.5);
        let y = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>() - 0.5);
        let t = Array2::from_shape_fn((5, 4), |_| rng.gen::<f64>() / 20.0);
        let log_p = log_similarities(&x, &y, 0.5).unwrap();
        let p = normalized_similarities(&x, &y, 0.5).unwrap();
        assert!(p.iter().all(|&v| v >= PROB_FLOOR));
        assert_abs_diff_eq!(log_loss(&log_p, &t).unwrap(), alignment_loss(&p, &t).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn zero_rho_is_visual_cost() {
        let x = monotone_sequence(5);
        let y = x.select(&[4, 1, 2, 2, 0, 3]).unwrap();
        assert_eq!(augmented_kot_cost(&x, &y, 0.0).unwrap(), visual_cost(&x, &y).unwrap());
    }

    #[test]
    fn large_rho_makes_diagonal_cheapest() {
        let x = monotone_sequence(6);
        let c = augmented_kot_cost(&x, &x, 50.0).unwrap();
        for i in 0..6 {
            let row = c.row(i);
            let best = crate::ot::argmax(row.iter().map(|v| -v));
            assert_eq!(best, i);
        }
    }

    #[test]
    fn similarities_two_way_softmax() {
        let p = normalized_similarities(&Array2::eye(2), &Array2::eye(2), 1.0).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 0.7310585786300049, epsilon = 1e-12);
        assert_abs_diff_eq!(p[[0, 1]], 0.2689414213699951, epsilon = 1e-12);
        for row in p.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn similarities_temperature_limits() {
        let x = array![[1.0, 0.2], [0.3, -0.5]];
        let y = array![[0.4, 0.1], [-0.2, 0.9], [1.0, 1.0]];
        let flat = normalized_similarities(&x, &y, 1e6).unwrap();
        assert!(flat.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
        let sharp = normalized_similarities(&x, &y, 1e-4).unwrap();
        assert_abs_diff_eq!(sharp[[0, 2]], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sharp[[1, 0]], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn loss_examples() {
        let p = normalized_similarities(&Array2::eye(2), &Array2::eye(2), 1.0).unwrap();
        let t = Array2::eye(2);
        assert_abs_diff_eq!(alignment_loss(&p, &t).unwrap(), 0.6265233750364456, epsilon = 1e-12);
        assert_abs_diff_eq!(alignment_loss(&t, &t).unwrap(), 0.0, epsilon = 1e-15);
        let (n, m) = (3, 4);
        let t = Array2::from_elem((n, m), 1.0 / (n * m) as f64);
        let p = Array2::from_elem((n, m), 1.0 / m as f64);
        assert_abs_diff_eq!(alignment_loss(&p, &t).unwrap(), (m as f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_floor_keeps_zero_probabilities_finite() {
        let p = array![[1.0, 0.0]];
        let t = array![[0.5, 0.5]];
        let l = alignment_loss(&p, &t).unwrap();
        assert!(l.is_finite());
        assert_abs_diff_eq!(l, -0.5 * PROB_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (seed, tau) in [(1u64, 0.1), (2, 0.5), (3, 2.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, m, d) = (5, 6, 4);
            let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-0.5..0.5));
            let y = Array2::from_shape_fn((m, d), |_| rng.gen_range(-0.5..0.5));
            let t = Array2::from_shape_fn((n, m), |_| rng.gen::<f64>() / (n * m) as f64);
            let p = normalized_similarities(&x, &y, tau).unwrap();
            let (gx, gy) = alignment_loss_grad(&p, &t, &x, &y, tau).unwrap();
            let h = 1e-5;
            for _ in 0..10 {
                let (i, k) = (rng.gen_range(0..n), rng.gen_range(0..d));
                let mut xp = x.clone();
                xp[[i, k]] += h;
                let mut xm = x.clone();
                xm[[i, k]] -= h;
                let fd = (loss_of(&xp, &y, &t, tau) - loss_of(&xm, &y, &t, tau)) / (2.0 * h);
                assert!((fd - gx[[i, k]]).abs() <= 1e-4 * fd.abs().max(1e-6), "x {fd} vs {}", gx[[i, k]]);
                let (j, k) = (rng.gen_range(0..m), rng.gen_range(0..d));
                let mut yp = y.clone();
                yp[[j, k]] += h;
                let mut ym = y.clone();
                ym[[j, k]] -= h;
                let fd = (loss_of(&x, &yp, &t, tau) - loss_of(&x, &ym, &t, tau)) / (2.0 * h);
                assert!((fd - gy[[j, k]]).abs() <= 1e-4 * fd.abs().max(1e-6), "y {fd} vs {}", gy[[j, k]]);
            }
        }
    }

    #[test]
    fn gradient_vanishes_when_similarities_match_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let p = normalized_similarities(&x, &y, 0.3).unwrap();
        let t = &p / 3.0;
        let g = loss_logit_grad(&p, &t).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let (gx, gy) = alignment_loss_grad(&p, &t, &x, &y, 0.3).unwrap();
        assert!(gx.iter().chain(gy.iter()).all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn identical_monotone_sequences_align_on_diagonal() {
        let x = monotone_sequence(20);
        let labels = compute_pseudo_labels(&x, &x, &AlignConfig::default()).unwrap();
        for (i, m) in labels.correspondences.x_to_y.iter().enumerate() {
            assert_eq!(*m, Match::Frame(i));
        }
    }

    #[test]
    fn reversed_copy_aligns_on_anti_diagonal() {
        let x = monotone_sequence(12);
        let mut rev = x.frames().clone();
        rev.invert_axis(Axis(0));
        let y = FeatureSequence::new(rev).unwrap();
        let mut cfg = AlignConfig::default();
        cfg.solver.alpha = 0.0;
        cfg.prior.rho = 0.0;
        cfg.use_virtual = false;
        let labels = compute_pseudo_labels(&x, &y, &cfg).unwrap();
        for (i, m) in labels.correspondences.x_to_y.iter().enumerate() {
            assert_eq!(*m, Match::Frame(11 - i));
        }
    }

    #[test]
    fn excluded_frames_drop_exactly_their_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.05..1.0));
        let t = Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.0..0.1));
        let rows = array![true, false, true, true];
        let cols = array![true, true, false];
        let masked = mask_targets(&t, &rows, &cols).unwrap();
        let full = alignment_loss(&p, &t).unwrap();
        let mut excluded = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                if !rows[i] || !cols[j] {
                    excluded -= t[[i, j]] * p[[i, j]].ln();
                }
            }
        }
        assert_abs_diff_eq!(full - alignment_loss(&p, &masked).unwrap(), excluded, epsilon = 1e-12);
    }
}

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::objective::{entropy, fgw_objective, gw_gradient};
use super::sinkhorn::{scale_log, Potentials, Relaxation};
use super::{CostBundle, Coupling, Histogram, MarginalMode, SolverConfig};
use crate::error::{Error, Result};

const POLISH_FACTOR: usize = 20;

/// Diagnostics of one [`solve_fgw`] run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Outer (mirror-descent) iterations performed.
    pub iterations: usize,
    pub converged: bool,
    /// Entropic objective after each outer iteration.
    pub objectives: Vec<f64>,
    /// L1 change of the coupling at each outer iteration.
    pub changes: Vec<f64>,
    /// Total inner scaling sweeps.
    pub inner_iterations: usize,
    /// Whether the last inner projection met its tolerance.
    pub projection_converged: bool,
}

impl SolveReport {
    pub fn final_objective(&self) -> Option<f64> {
        self.objectives.last().copied()
    }
}

fn kl_divergence(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() - x + y } else { y })
        .sum()
}

fn relaxations(cfg: &SolverConfig) -> (Relaxation, Relaxation) {
    match cfg.marginal_mode {
        MarginalMode::Balanced => (Relaxation::Hard, Relaxation::Hard),
        MarginalMode::FullUnbalanced => (Relaxation::Kl(cfg.lambda_p), Relaxation::Kl(cfg.lambda_q)),
        MarginalMode::PartialUnbalanced => (Relaxation::Hard, Relaxation::Kl(cfg.lambda_q)),
    }
}

/// Moves a nearly feasible plan onto `U(p, q)`: scale down rows and columns
/// that carry too much mass, then spread the missing mass as a rank-one
/// correction. The L1 change is at most twice the marginal error.
fn round_to_marginals(t: &Array2<f64>, p: &Histogram, q: &Histogram) -> Array2<f64> {
    let mut out = t.clone();
    let rows = out.sum_axis(Axis(1));
    for (mut row, (&r, &target)) in out.rows_mut().into_iter().zip(rows.iter().zip(p.weights())) {
        if r > target {
            row *= target / r;
        }
    }
    let cols = out.sum_axis(Axis(0));
    for (mut col, (&c, &target)) in out.columns_mut().into_iter().zip(cols.iter().zip(q.weights())) {
        if c > target {
            col *= target / c;
        }
    }
    let err_r = (p.weights() - &out.sum_axis(Axis(1))).mapv(|v| v.max(0.0));
    let err_c = (q.weights() - &out.sum_axis(Axis(0))).mapv(|v| v.max(0.0));
    let mass = err_r.sum();
    if mass > 0.0 {
        out += &(err_r.insert_axis(Axis(1)).dot(&err_c.insert_axis(Axis(0))) / mass);
    }
    out
}

/// Entropic objective plus the KL penalties of any relaxed marginal.
fn penalized_objective(bundle: &CostBundle, t: &Coupling, p: &Histogram, q: &Histogram, cfg: &SolverConfig) -> Result<f64> {
    let mut value = fgw_objective(bundle, t.view(), cfg.alpha)? - cfg.epsilon * entropy(t.view())?;
    let (rows, cols) = relaxations(cfg);
    if let Relaxation::Kl(l) = rows {
        value += l * kl_divergence(&t.row_sums(), p.weights());
    }
    if let Relaxation::Kl(l) = cols {
        value += l * kl_divergence(&t.col_sums(), q.weights());
    }
    Ok(value)
}

/// Entropic fused Gromov-Wasserstein transport by KL mirror descent.
///
/// Starting from `p q^T`, each outer iteration linearizes the objective at
/// the current plan, forms the kernel `T^(1-s) * exp(-s G / epsilon)` with
/// `G` the FGW gradient and `s = step_size`, and projects it back onto the
/// feasible set with log-domain scaling. Scaling potentials are carried over
/// between outer iterations. The run stops once the coupling moves by less
/// than `tol` in L1 or after `outer_iters` iterations.
pub fn solve_fgw(bundle: &CostBundle, p: &Histogram, q: &Histogram, cfg: &SolverConfig) -> Result<(Coupling, SolveReport)> {
    cfg.validate()?;
    let (n, m) = bundle.shape();
    if p.len() != n || q.len() != m {
        return Err(Error::dim(format!(
            "cost is {n}x{m} but marginals have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.weights().iter().chain(q.weights().iter()).any(|w| !(*w > 0.0)) {
        return Err(Error::domain("solver marginals must be strictly positive"));
    }
    let (rows, cols) = relaxations(cfg);
    let step = cfg.step_size;
    let mut t = Coupling::product(p, q);
    let mut log_t = t.values().mapv(f64::ln);
    let mut potentials = Potentials::zeros(n, m);
    let mut report = SolveReport::default();
    let mut last_kernel = None;

    for iteration in 1..=cfg.outer_iters {
        let grad = gw_gradient(bundle, t.view(), cfg.alpha)?;
        let mut log_kernel: Array2<f64> = grad * (-step / cfg.epsilon);
        if step < 1.0 {
            log_kernel.scaled_add(1.0 - step, &log_t);
        }
        if log_kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration,
                message: "non-finite mirror-descent kernel".into(),
            });
        }
        let scaled = scale_log(
            log_kernel.view(),
            p,
            q,
            rows,
            cols,
            cfg.epsilon,
            cfg.inner_sinkhorn_iters,
            cfg.inner_tol,
            &mut potentials,
        )
        .map_err(|e| match e {
            Error::Numerical { message, .. } => Error::Numerical { iteration, message },
            other => other,
        })?;
        if scaled.coupling.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration,
                message: "coupling contains NaN".into(),
            });
        }
        let change: f64 = (scaled.coupling.values() - t.values()).mapv(f64::abs).sum();
        report.inner_iterations += scaled.iterations;
        report.projection_converged = scaled.converged;
        t = scaled.coupling;
        log_t = scaled.log_coupling;
        report.iterations = iteration;
        report.changes.push(change);
        report.objectives.push(penalized_objective(bundle, &t, p, q, cfg)?);
        last_kernel = Some(log_kernel);
        if change < cfg.tol {
            report.converged = true;
            break;
        }
    }
    // The inner budget is per outer iteration; make sure the returned plan
    // itself satisfies the constraints even when the last projection was cut short.
    if !report.projection_converged {
        if let Some(kernel) = last_kernel {
            let polished = scale_log(
                kernel.view(),
                p,
                q,
                rows,
                cols,
                cfg.epsilon,
                POLISH_FACTOR * cfg.inner_sinkhorn_iters,
                cfg.inner_tol,
                &mut potentials,
            )?;
            report.inner_iterations += polished.iterations;
            report.projection_converged = polished.converged;
            t = polished.coupling;
        }
    }
    // Scaling converges slowly once the plan is close to a permutation.
    if cfg.marginal_mode == MarginalMode::Balanced {
        t = Coupling::new(round_to_marginals(t.values(), p, q))?;
    }
    Ok((t, report))
}

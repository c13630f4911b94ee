//! Log-domain matrix scaling (Sinkhorn) with hard or KL-relaxed marginals.

use ndarray::{Array1, Array2, ArrayView2};

use super::{Coupling, Histogram};
use crate::error::{Error, Result};

/// Treatment of one marginal during scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Relaxation {
    /// Exact equality constraint.
    Hard,
    /// KL penalty with the given weight; each update is damped by `lambda / (lambda + epsilon)`.
    Kl(f64),
}

impl Relaxation {
    fn exponent(self, epsilon: f64) -> f64 {
        match self {
            Relaxation::Hard => 1.0,
            Relaxation::Kl(lambda) if lambda.is_infinite() => 1.0,
            Relaxation::Kl(lambda) => lambda / (lambda + epsilon),
        }
    }
}

/// Log scaling vectors `log u`, `log v`; reused across calls as a warm start.
#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    pub log_u: Array1<f64>,
    pub log_v: Array1<f64>,
}

impl Potentials {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            log_u: Array1::zeros(n),
            log_v: Array1::zeros(m),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScalingResult {
    pub coupling: Coupling,
    /// Entrywise log of `coupling`, finite even where the coupling underflows.
    pub log_coupling: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final marginal L1 error (balanced) or last potential change (relaxed).
    pub error: f64,
}

const ABSORB_THRESHOLD: f64 = 30.0;

fn log_sum_exp(values: impl Iterator<Item = f64>, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    buf.extend(values);
    let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + buf.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `lse_j(a_ij + g_j)` for every row.
fn row_lse(a: ArrayView2<'_, f64>, g: &Array1<f64>, out: &mut Array1<f64>, buf: &mut Vec<f64>) {
    for (o, row) in out.iter_mut().zip(a.rows()) {
        *o = log_sum_exp(row.iter().zip(g.iter()).map(|(x, y)| x + y), buf);
    }
}

/// `lse_i(a_ij + f_i)` for every column.
fn col_lse(a: ArrayView2<'_, f64>, f: &Array1<f64>, out: &mut Array1<f64>, acc: &mut Array1<f64>) {
    out.fill(f64::NEG_INFINITY);
    for (row, &fi) in a.rows().into_iter().zip(f.iter()) {
        for (o, &x) in out.iter_mut().zip(row.iter()) {
            let v = x + fi;
            if v > *o {
                *o = v;
            }
        }
    }
    acc.fill(0.0);
    for (row, &fi) in a.rows().into_iter().zip(f.iter()) {
        for ((s, &x), &mx) in acc.iter_mut().zip(row.iter()).zip(out.iter()) {
            if mx > f64::NEG_INFINITY {
                *s += (x + fi - mx).exp();
            }
        }
    }
    for (o, s) in out.iter_mut().zip(acc.iter()) {
        if *o > f64::NEG_INFINITY {
            *o += s.ln();
        }
    }
}

/// Scales `exp(log_kernel)` towards the marginals `p` (rows) and `q` (columns).
///
/// With two hard marginals iteration stops once the column marginal error
/// (rows are exact after each sweep) drops to `tol`; otherwise once the
/// largest potential update drops to `tol`. Running out of iterations is
/// reported through `converged`, not as an error.
#[allow(clippy::too_many_arguments)]
pub fn scale_log(
    log_kernel: ArrayView2<'_, f64>,
    p: &Histogram,
    q: &Histogram,
    rows: Relaxation,
    cols: Relaxation,
    epsilon: f64,
    iters: usize,
    tol: f64,
    warm: &mut Potentials,
) -> Result<ScalingResult> {
    let (n, m) = log_kernel.dim();
    if p.len() != n || q.len() != m {
        return Err(Error::dim(format!(
            "kernel is {n}x{m} but marginals have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    if warm.log_u.len() != n || warm.log_v.len() != m {
        *warm = Potentials::zeros(n, m);
    }
    if let Some(((i, j), v)) = log_kernel.indexed_iter().find(|(_, v)| v.is_nan() || **v == f64::INFINITY) {
        return Err(Error::domain(format!("log-kernel entry ({i}, {j}) is {v}")));
    }
    let phi_p = rows.exponent(epsilon);
    let phi_q = cols.exponent(epsilon);
    let balanced = phi_p == 1.0 && phi_q == 1.0;
    let log_p = p.weights().mapv(f64::ln);
    let log_q = q.weights().mapv(f64::ln);

    // Scalings a, b act on the stabilized kernel exp(log_kernel + f + g);
    // they are folded back into f, g whenever they leave a safe range.
    let absorb = |k: &mut Array2<f64>, f: &Array1<f64>, g: &Array1<f64>| {
        for ((mut row, lk), fi) in k.rows_mut().into_iter().zip(log_kernel.rows()).zip(f.iter()) {
            for ((x, l), gj) in row.iter_mut().zip(lk.iter()).zip(g.iter()) {
                *x = (l + fi + gj).exp();
            }
        }
    };
    let mut buf = Vec::with_capacity(m);
    let mut clse = Array1::zeros(m);
    let mut cacc = Array1::zeros(m);
    let mut rlse = Array1::zeros(n);
    let mut kernel = Array2::zeros((n, m));
    absorb(&mut kernel, &warm.log_u, &warm.log_v);
    let mut log_a = Array1::<f64>::zeros(n);
    let mut log_b = Array1::<f64>::zeros(m);
    let mut a = Array1::<f64>::ones(n);
    let mut kta = Array1::<f64>::zeros(m);
    let mut kb = Array1::<f64>::zeros(n);
    let mut converged = false;
    let mut error = f64::INFINITY;
    let mut iterations = 0;

    let col_sums = |kernel: &Array2<f64>, a: &Array1<f64>, out: &mut Array1<f64>| {
        out.fill(0.0);
        for (row, &ai) in kernel.rows().into_iter().zip(a.iter()) {
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o += x * ai;
            }
        }
    };

    loop {
        col_sums(&kernel, &a, &mut kta);
        let mut log_kta = kta.mapv(f64::ln);
        if log_kta.iter().any(|v| !v.is_finite()) {
            let f = &warm.log_u + &log_a;
            col_lse(log_kernel, &f, &mut clse, &mut cacc);
            for ((l, c), g0) in log_kta.iter_mut().zip(clse.iter()).zip(warm.log_v.iter()) {
                if !l.is_finite() {
                    *l = c + g0;
                }
            }
        }
        if balanced {
            error = log_kta
                .iter()
                .zip(log_b.iter())
                .zip(q.weights().iter())
                .map(|((c, lb), qj)| ((c + lb).exp() - qj).abs())
                .sum();
            if error <= tol {
                converged = true;
                break;
            }
        }
        if iterations >= iters {
            break;
        }
        iterations += 1;
        let mut delta: f64 = 0.0;
        for (((lb, c), lq), g0) in log_b.iter_mut().zip(log_kta.iter()).zip(log_q.iter()).zip(warm.log_v.iter()) {
            let new = phi_q * (lq - c + g0) - g0;
            delta = delta.max((new - *lb).abs());
            *lb = new;
        }
        let b = log_b.mapv(f64::exp);
        for (o, row) in kb.iter_mut().zip(kernel.rows()) {
            *o = row.dot(&b).ln();
        }
        if kb.iter().any(|v| !v.is_finite()) {
            let g = &warm.log_v + &log_b;
            row_lse(log_kernel, &g, &mut rlse, &mut buf);
            for ((l, r), f0) in kb.iter_mut().zip(rlse.iter()).zip(warm.log_u.iter()) {
                if !l.is_finite() {
                    *l = r + f0;
                }
            }
        }
        for (((la, r), lp), f0) in log_a.iter_mut().zip(kb.iter()).zip(log_p.iter()).zip(warm.log_u.iter()) {
            let new = phi_p * (lp - r + f0) - f0;
            delta = delta.max((new - *la).abs());
            *la = new;
        }
        if log_a.iter().chain(log_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: iterations,
                message: "scaling vector is not finite".into(),
            });
        }
        a = log_a.mapv(f64::exp);
        if !balanced {
            error = delta;
            if delta <= tol {
                converged = true;
                break;
            }
        }
        if log_a.iter().chain(log_b.iter()).any(|v| v.abs() > ABSORB_THRESHOLD) {
            warm.log_u += &log_a;
            warm.log_v += &log_b;
            log_a.fill(0.0);
            log_b.fill(0.0);
            a.fill(1.0);
            absorb(&mut kernel, &warm.log_u, &warm.log_v);
        }
    }
    warm.log_u += &log_a;
    warm.log_v += &log_b;

    let mut log_t = log_kernel.to_owned();
    for ((mut row, f), _) in log_t.rows_mut().into_iter().zip(warm.log_u.iter()).zip(0..n) {
        for (x, g) in row.iter_mut().zip(warm.log_v.iter()) {
            *x += f + g;
        }
    }
    let t = log_t.mapv(f64::exp);
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            iteration: iterations,
            message: "scaled coupling is not finite".into(),
        });
    }
    Ok(ScalingResult {
        coupling: Coupling(t),
        log_coupling: log_t,
        iterations,
        converged,
        error,
    })
}

fn log_of_positive(kernel: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(((i, j), v)) = kernel.indexed_iter().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("kernel entry ({i}, {j}) = {v} is not strictly positive")));
    }
    Ok(kernel.mapv(f64::ln))
}

/// Balanced KL projection of a positive kernel onto the transport polytope.
pub fn sinkhorn_project(kernel: &Array2<f64>, p: &Histogram, q: &Histogram, iters: usize, tol: f64) -> Result<ScalingResult> {
    let log_k = log_of_positive(kernel)?;
    let (n, m) = kernel.dim();
    let mut pot = Potentials::zeros(n, m);
    // epsilon is irrelevant for hard marginals.
    scale_log(log_k.view(), p, q, Relaxation::Hard, Relaxation::Hard, 1.0, iters, tol, &mut pot)
}

/// Unbalanced scaling with KL marginal penalties `lambda_p`, `lambda_q`.
pub fn unbalanced_scale(
    kernel: &Array2<f64>,
    p: &Histogram,
    q: &Histogram,
    lambda_p: f64,
    lambda_q: f64,
    epsilon: f64,
    iters: usize,
) -> Result<ScalingResult> {
    if !(lambda_p >= 0.0 && lambda_q >= 0.0) {
        return Err(Error::config("KL penalty weights must be nonnegative"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    let log_k = log_of_positive(kernel)?;
    let (n, m) = kernel.dim();
    let mut pot = Potentials::zeros(n, m);
    scale_log(
        log_k.view(),
        p,
        q,
        Relaxation::Kl(lambda_p),
        Relaxation::Kl(lambda_q),
        epsilon,
        iters,
        1e-12,
        &mut pot,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn l1(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).mapv(f64::abs).sum()
    }

    /// Textbook Sinkhorn-Knopp in the primal domain, used only as a check.
    fn plain_sinkhorn(k: &Array2<f64>, p: &Array1<f64>, q: &Array1<f64>, iters: usize) -> Array2<f64> {
        let (n, m) = k.dim();
        let mut u = Array1::<f64>::ones(n);
        let mut v = Array1::<f64>::ones(m);
        for _ in 0..iters {
            let kv = k.dot(&v);
            u = p / &kv;
            let ktu = k.t().dot(&u);
            v = q / &ktu;
        }
        Array2::from_shape_fn((n, m), |(i, j)| u[i] * k[[i, j]] * v[j])
    }

    #[test]
    fn uniform_kernel_gives_independence_coupling() {
        let p = Histogram::uniform(2);
        let r = sinkhorn_project(&Array2::ones((2, 2)), &p, &p, 50, 1e-12).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(l1(r.coupling.values(), &Array2::from_elem((2, 2), 0.25)), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn feasible_kernel_is_a_fixed_point() {
        let k = array![[0.3, 0.2], [0.1, 0.4]];
        let p = Histogram::new(array![0.5, 0.5]).unwrap();
        let q = Histogram::new(array![0.4, 0.6]).unwrap();
        let r = sinkhorn_project(&k, &p, &q, 100, 1e-13).unwrap();
        assert!(l1(r.coupling.values(), &k) < 1e-9);
    }

    #[test]
    fn matches_primal_sinkhorn() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let k = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.1..1.0));
        let p = Histogram::uniform(3);
        let r = sinkhorn_project(&k, &p, &p, 1000, 1e-14).unwrap();
        let reference = plain_sinkhorn(&k, p.weights(), p.weights(), 1000);
        assert!(l1(r.coupling.values(), &reference) < 1e-8);
    }

    #[test]
    fn rejects_non_positive_kernel() {
        let p = Histogram::uniform(2);
        let k = array![[1.0, 0.0], [1.0, 1.0]];
        assert!(matches!(sinkhorn_project(&k, &p, &p, 10, 1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Array2::from_shape_fn((5, 5), |_| rng.gen_range(1e-3..1.0));
        let p = Histogram::uniform(5);
        let r = sinkhorn_project(&k, &p, &p, 1, 1e-15).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn survives_tiny_kernels_in_log_domain() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let log_k = c.mapv(|v| -v / 1e-4);
        let p = Histogram::uniform(2);
        let mut pot = Potentials::zeros(2, 2);
        let r = scale_log(log_k.view(), &p, &p, Relaxation::Hard, Relaxation::Hard, 1e-4, 100, 1e-12, &mut pot).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(r.coupling.values()[[0, 0]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn large_penalty_approaches_balanced() {
        let k = array![[0.8, 0.1], [0.3, 0.6]];
        let p = Histogram::uniform(2);
        let balanced = sinkhorn_project(&k, &p, &p, 5000, 1e-14).unwrap();
        let relaxed = unbalanced_scale(&k, &p, &p, 1e6, 1e6, 0.07, 5000).unwrap();
        assert!(l1(balanced.coupling.values(), relaxed.coupling.values()) < 1e-4);
    }

    #[test]
    fn zero_penalty_returns_kernel() {
        let k = array![[0.8, 0.1], [0.3, 0.6]];
        let p = Histogram::uniform(2);
        let r = unbalanced_scale(&k, &p, &p, 0.0, 0.0, 0.07, 100).unwrap();
        assert!(l1(r.coupling.values(), &k) < 1e-15);
    }

    #[test]
    fn mass_is_monotone_between_the_two_limits() {
        for k in [array![[0.8, 0.1], [0.3, 0.6]], array![[0.05, 0.01], [0.02, 0.1]]] {
            let p = Histogram::uniform(2);
            let free = k.sum();
            let mut masses = vec![free];
            for lambda in [0.01, 0.05, 0.2, 1.0, 10.0] {
                let r = unbalanced_scale(&k, &p, &p, lambda, lambda, 0.07, 5000).unwrap();
                masses.push(r.coupling.total_mass());
            }
            masses.push(1.0);
            let lo = free.min(1.0);
            let hi = free.max(1.0);
            for w in &masses {
                assert!(*w >= lo - 1e-12 && *w <= hi + 1e-12, "{masses:?}");
            }
            let increasing = free < 1.0;
            for pair in masses.windows(2) {
                if increasing {
                    assert!(pair[1] >= pair[0] - 1e-9, "{masses:?}");
                } else {
                    assert!(pair[1] <= pair[0] + 1e-9, "{masses:?}");
                }
            }
        }
    }

    #[test]
    fn partial_relaxation_keeps_rows_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let log_k = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-3.0..0.0));
        let p = Histogram::uniform(6);
        let q = Histogram::uniform(3);
        let mut pot = Potentials::zeros(6, 3);
        let r = scale_log(log_k.view(), &p, &q, Relaxation::Hard, Relaxation::Kl(0.05), 0.07, 200, 1e-12, &mut pot).unwrap();
        let rows = r.coupling.row_sums();
        for v in rows.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 6.0, epsilon = 1e-12);
        }
    }
}

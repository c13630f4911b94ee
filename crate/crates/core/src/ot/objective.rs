use ndarray::{Array2, ArrayView2, Zip};

use super::{CostBundle, StructCost};
use crate::error::{Error, Result};

fn check_shape(what: &str, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::dim(format!("{what}: expected {expected:?}, got {got:?}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn frobenius(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(a).and(b).for_each(|x, y| acc += x * y);
    acc
}

/// Linear transport cost `<C, T>`.
pub fn kot_objective(cost: &Array2<f64>, t: ArrayView2<'_, f64>) -> Result<f64> {
    check_shape("coupling vs. cost", cost.dim(), t.dim())?;
    Ok(frobenius(cost.view(), t))
}

/// Quadratic structural cost `<C^x T C^y, T>` for the product loss.
pub fn gw_objective(cx: &StructCost, cy: &StructCost, t: ArrayView2<'_, f64>) -> Result<f64> {
    check_shape("coupling vs. structural priors", (cx.size(), cy.size()), t.dim())?;
    let cxt = cx.mul_left(t);
    let cxtcy = cy.mul_right(cxt.view());
    Ok(frobenius(cxtcy.view(), t))
}

/// `(1 - alpha) <C, T> + alpha <C^x T C^y, T>`.
pub fn fgw_objective(bundle: &CostBundle, t: ArrayView2<'_, f64>, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let kot = kot_objective(&bundle.kot_cost, t)?;
    if alpha == 0.0 {
        return Ok(kot);
    }
    let gw = gw_objective(&bundle.struct_x, &bundle.struct_y, t)?;
    if alpha == 1.0 {
        return Ok(gw);
    }
    Ok((1.0 - alpha) * kot + alpha * gw)
}

/// Shannon entropy `-sum T log T` with `0 log 0 = 0`.
pub fn entropy(t: ArrayView2<'_, f64>) -> Result<f64> {
    let mut h = 0.0;
    for ((i, j), &v) in t.indexed_iter() {
        if !(v >= 0.0) {
            return Err(Error::domain(format!("entropy of negative or NaN entry ({i}, {j}) = {v}")));
        }
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h)
}

/// FGW objective minus `epsilon * H(T)`.
pub fn entropic_objective(bundle: &CostBundle, t: ArrayView2<'_, f64>, alpha: f64, epsilon: f64) -> Result<f64> {
    Ok(fgw_objective(bundle, t, alpha)? - epsilon * entropy(t)?)
}

/// Gradient of the FGW objective: `(1 - alpha) C + 2 alpha C^x T C^y`.
///
/// The factor 2 relies on both structural costs being symmetric, which
/// [`CostBundle::new`] enforces.
pub fn gw_gradient(bundle: &CostBundle, t: ArrayView2<'_, f64>, alpha: f64) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    check_shape("coupling vs. cost", bundle.shape(), t.dim())?;
    let mut grad = &bundle.kot_cost * (1.0 - alpha);
    if alpha > 0.0 && !(bundle.struct_x.is_zero() || bundle.struct_y.is_zero()) {
        let cxt = bundle.struct_x.mul_left(t);
        let cxtcy = bundle.struct_y.mul_right(cxt.view());
        grad.scaled_add(2.0 * alpha, &cxtcy);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::BandPrior;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.gen::<f64>())
    }

    fn rand_sym(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let a = rand_mat(rng, n, n);
        (&a + &a.t()) * 0.5
    }

    /// Direct quadruple sum over `(i, k, j, l)`.
    fn gw_quadruple(cx: &Array2<f64>, cy: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let (n, m) = t.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for k in 0..n {
                for j in 0..m {
                    for l in 0..m {
                        acc += cx[[i, k]] * cy[[j, l]] * t[[i, j]] * t[[k, l]];
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn kot_examples() {
        let t = array![[0.5, 0.0], [0.0, 0.5]];
        assert_eq!(kot_objective(&Array2::zeros((2, 2)), t.view()).unwrap(), 0.0);
        assert_eq!(kot_objective(&array![[1.0, 0.0], [0.0, 1.0]], t.view()).unwrap(), 1.0);
        assert!(kot_objective(&Array2::zeros((2, 3)), t.view()).is_err());
    }

    #[test]
    fn kot_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = rand_mat(&mut rng, 3, 4);
        let t = rand_mat(&mut rng, 3, 4);
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                expected += c[[i, j]] * t[[i, j]];
            }
        }
        assert_abs_diff_eq!(kot_objective(&c, t.view()).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn gw_examples() {
        let t = array![[0.5, 0.0], [0.0, 0.5]];
        let swap = StructCost::Dense(array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(gw_objective(&StructCost::zeros(2), &swap, t.view()).unwrap(), 0.0);
        assert_abs_diff_eq!(gw_objective(&swap, &swap, t.view()).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gw_factorized_matches_quadruple_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cx = rand_sym(&mut rng, 3);
        let cy = rand_sym(&mut rng, 4);
        let t = rand_mat(&mut rng, 3, 4);
        let fast = gw_objective(&StructCost::Dense(cx.clone()), &StructCost::Dense(cy.clone()), t.view()).unwrap();
        assert_abs_diff_eq!(fast, gw_quadruple(&cx, &cy, &t), epsilon = 1e-10);
    }

    #[test]
    fn gw_band_matches_quadruple_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bx = BandPrior::new(5, 1, 2.0, 0.0).padded();
        let by = BandPrior::new(4, 1, 0.0, 1.0).padded();
        let t = rand_mat(&mut rng, 6, 5);
        let fast = gw_objective(&StructCost::Band(bx.clone()), &StructCost::Band(by.clone()), t.view()).unwrap();
        assert_abs_diff_eq!(fast, gw_quadruple(&bx.to_dense(), &by.to_dense(), &t), epsilon = 1e-10);
    }

    #[test]
    fn fgw_endpoints_and_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bundle = CostBundle::new(
            rand_mat(&mut rng, 3, 3),
            StructCost::Dense(rand_sym(&mut rng, 3)),
            StructCost::Dense(rand_sym(&mut rng, 3)),
        )
        .unwrap();
        let t = rand_mat(&mut rng, 3, 3);
        let kot = kot_objective(&bundle.kot_cost, t.view()).unwrap();
        let gw = gw_objective(&bundle.struct_x, &bundle.struct_y, t.view()).unwrap();
        assert_eq!(fgw_objective(&bundle, t.view(), 0.0).unwrap(), kot);
        assert_eq!(fgw_objective(&bundle, t.view(), 1.0).unwrap(), gw);
        assert_abs_diff_eq!(
            fgw_objective(&bundle, t.view(), 0.3).unwrap(),
            0.7 * kot + 0.3 * gw,
            epsilon = 1e-14
        );
        assert!(fgw_objective(&bundle, t.view(), -0.1).is_err());
    }

    #[test]
    fn fgw_convex_combination_of_fixed_parts() {
        // With <C,T> = 2 and <CxTCy,T> = 4 the mixture at 0.3 is 2.6.
        let bundle = CostBundle::new(
            array![[2.0]],
            StructCost::Dense(array![[2.0]]),
            StructCost::Dense(array![[2.0]]),
        )
        .unwrap();
        let t = array![[1.0]];
        assert_abs_diff_eq!(fgw_objective(&bundle, t.view(), 0.3).unwrap(), 2.6, epsilon = 1e-14);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(array![[1.0, 0.0], [0.0, 0.0]].view()).unwrap(), 0.0);
        assert_abs_diff_eq!(
            entropy(Array2::from_elem((2, 2), 0.25).view()).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        assert!(entropy(array![[0.5, 0.0], [0.5, 0.0]].view()).unwrap().is_finite());
        assert!(entropy(array![[-0.1]].view()).is_err());
    }

    #[test]
    fn gradient_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = rand_mat(&mut rng, 3, 4);
        let bundle = CostBundle::new(c.clone(), StructCost::Dense(rand_sym(&mut rng, 3)), StructCost::Dense(rand_sym(&mut rng, 4))).unwrap();
        let t = rand_mat(&mut rng, 3, 4);
        assert_eq!(gw_gradient(&bundle, t.view(), 0.0).unwrap(), c);
        let flat = CostBundle::new(c.clone(), StructCost::zeros(3), StructCost::Dense(rand_sym(&mut rng, 4))).unwrap();
        let g = gw_gradient(&flat, t.view(), 0.4).unwrap();
        assert_abs_diff_eq!((&g - &(&c * 0.6)).mapv(f64::abs).sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bundle = CostBundle::new(
            rand_mat(&mut rng, 4, 3),
            StructCost::Dense(rand_sym(&mut rng, 4)),
            StructCost::Dense(rand_sym(&mut rng, 3)),
        )
        .unwrap();
        let alpha = 0.35;
        let t = rand_mat(&mut rng, 4, 3);
        let g = gw_gradient(&bundle, t.view(), alpha).unwrap();
        let h = 1e-5;
        for _ in 0..10 {
            let dir = rand_mat(&mut rng, 4, 3) - 0.5;
            let plus = &t + &(&dir * h);
            let minus = &t - &(&dir * h);
            let fd = (fgw_objective(&bundle, plus.view(), alpha).unwrap()
                - fgw_objective(&bundle, minus.view(), alpha).unwrap())
                / (2.0 * h);
            let analytic = (&g * &dir).sum();
            assert!((fd - analytic).abs() / analytic.abs().max(1e-12) < 1e-5, "fd {fd} vs {analytic}");
        }
    }
}

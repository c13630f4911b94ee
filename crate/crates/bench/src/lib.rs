//! Problem builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqot_core::ndarray::Array2;
use seqot_core::priors::structural_priors;
use seqot_core::{CostBundle, Histogram, StructCost};

/// Random `n x m` cost with band structural priors and uniform marginals.
pub fn band_problem(n: usize, m: usize, seed: u64) -> (CostBundle, Histogram, Histogram) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cost = Array2::from_shape_fn((n, m), |_| rng.gen::<f64>());
    let (cx, cy) = structural_priors(n, m, 0.02).expect("valid radius");
    let bundle = CostBundle::new(cost, StructCost::Band(cx), StructCost::Band(cy)).expect("consistent shapes");
    (bundle, Histogram::uniform(n), Histogram::uniform(m))
}

//! Frame-to-action transport with learnable action centroids, and the joint
//! alignment + segmentation loss.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{alignment_loss, alignment_loss_grad, log_loss, log_similarities};
use crate::error::{Error, Result};
use crate::ot::{argmax, solve_fgw, CostBundle, Coupling, Histogram, MarginalMode, SolveReport, SolverConfig, StructCost};
use crate::priors::{action_prior, structural_priors, unit_rows, FeatureSequence};

const KMEANS_ITERS: usize = 100;

/// `K` action embeddings, stored one per row (`K x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct ActionCentroids {
    vectors: Array2<f64>,
}

impl ActionCentroids {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(Error::config(format!("need at least 2 action centroids, got {}", vectors.nrows())));
        }
        for (k, row) in vectors.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("centroid {k} is not finite")));
            }
            if !(row.dot(&row) > 0.0) {
                return Err(Error::domain(format!("centroid {k} has zero norm")));
            }
        }
        Ok(Self { vectors })
    }

    pub fn k(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.vectors
    }

    pub fn as_sequence(&self) -> Result<FeatureSequence> {
        FeatureSequence::new(self.vectors.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointWeights {
    pub w_align: f64,
    pub w_seg: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self { w_align: 1.0, w_seg: 1.0 }
    }
}

impl JointWeights {
    pub fn new(w_align: f64, w_seg: f64) -> Result<Self> {
        let w = Self { w_align, w_seg };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_align >= 0.0 && self.w_seg >= 0.0) || !self.w_align.is_finite() || !self.w_seg.is_finite() {
            return Err(Error::config("joint weights must be finite and nonnegative"));
        }
        if self.w_align == 0.0 && self.w_seg == 0.0 {
            return Err(Error::config("w_align and w_seg cannot both be zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub radius: f64,
    /// KL weight on the action marginal.
    pub lambda_act: f64,
    /// `PartialUnbalanced` by default; `Balanced` forces equal action mass.
    pub marginal_mode: MarginalMode,
    pub solver: SolverConfig,
    pub tau: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            radius: 0.02,
            lambda_act: 0.05,
            marginal_mode: MarginalMode::PartialUnbalanced,
            solver: SolverConfig::default(),
            tau: 0.1,
        }
    }
}

impl SegConfig {
    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            marginal_mode: self.marginal_mode,
            lambda_q: self.lambda_act,
            ..self.solver.clone()
        }
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means over all frames: one seeded random first centre, farthest-point
/// seeding for the rest, then Lloyd iterations.
pub fn init_centroids_kmeans(features: &[FeatureSequence], k: usize, seed: u64) -> Result<ActionCentroids> {
    if k < 2 {
        return Err(Error::config(format!("K must be at least 2, got {k}")));
    }
    let dim = features.first().ok_or_else(|| Error::config("k-means needs at least one sequence"))?.dim();
    if features.iter().any(|f| f.dim() != dim) {
        return Err(Error::dim("sequences have different frame dimensions"));
    }
    let total: usize = features.iter().map(FeatureSequence::len).sum();
    if k > total {
        return Err(Error::config(format!("K = {k} exceeds the {total} available frames")));
    }
    let mut data = Array2::zeros((total, dim));
    let mut r = 0;
    for f in features {
        for row in f.frames().rows() {
            data.row_mut(r).assign(&row);
            r += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = Array2::zeros((k, dim));
    centres.row_mut(0).assign(&data.row(rng.gen_range(0..total)));
    let mut nearest: Array1<f64> = data.rows().into_iter().map(|x| sq_dist(x, centres.row(0))).collect();
    for c in 1..k {
        let pick = argmax(nearest.iter().copied());
        centres.row_mut(c).assign(&data.row(pick));
        for (i, x) in data.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, centres.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; total];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, x) in data.rows().into_iter().enumerate() {
            let best = argmax(centres.rows().into_iter().map(|c| -sq_dist(x, c)));
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, x) in data.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &x);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    ActionCentroids::new(centres)
}

/// Frame-to-action plan: cost `1 - cos(x_i, a_k)`, band prior over frames,
/// band prior over action indices, exact frame marginal.
pub fn seg_pseudo_labels(x: &FeatureSequence, a: &ActionCentroids, cfg: &SegConfig) -> Result<(Coupling, SolveReport)> {
    if x.dim() != a.dim() {
        return Err(Error::dim(format!("frames have dimension {} but centroids {}", x.dim(), a.dim())));
    }
    let xn = unit_rows(x.frames(), "X")?;
    let an = unit_rows(a.vectors(), "A")?;
    let cost = xn.dot(&an.t()).mapv(|c| (1.0 - c).clamp(0.0, 2.0));
    let (cx, _) = structural_priors(x.len(), a.k(), cfg.radius)?;
    let ca = action_prior(a.k(), cfg.radius)?;
    let bundle = CostBundle::new(cost, StructCost::Band(cx), ca)?;
    solve_fgw(&bundle, &Histogram::uniform(x.len()), &Histogram::uniform(a.k()), &cfg.solver_config())
}

/// Cross-entropy between frame-to-action similarities and targets.
pub fn seg_loss(p_xa: &Array2<f64>, t_xa: &Array2<f64>) -> Result<f64> {
    alignment_loss(p_xa, t_xa)
}

pub fn joint_loss(l_xy: f64, l_xa: f64, l_ya: f64, w: &JointWeights) -> f64 {
    w.w_align * l_xy + w.w_seg * (l_xa + l_ya)
}

/// Segmentation loss of one embedded sequence with gradients for the frames
/// and the centroids.
pub struct SegStep {
    pub coupling: Coupling,
    pub report: SolveReport,
    pub loss: f64,
    pub grad_x: Array2<f64>,
    pub grad_a: Array2<f64>,
}

pub fn seg_step(x: &FeatureSequence, a: &ActionCentroids, cfg: &SegConfig) -> Result<SegStep> {
    let (coupling, report) = seg_pseudo_labels(x, a, cfg)?;
    let log_p = log_similarities(x.frames(), a.vectors(), cfg.tau)?;
    let loss = log_loss(&log_p, coupling.values())?;
    let p = log_p.mapv(f64::exp);
    let (grad_x, grad_a) = alignment_loss_grad(&p, coupling.values(), x.frames(), a.vectors(), cfg.tau)?;
    Ok(SegStep {
        coupling,
        report,
        loss,
        grad_x,
        grad_a,
    })
}

/// Row argmax of a frame-to-action plan; ties go to the smallest action index.
pub fn decode_segmentation(t_xa: &Array2<f64>) -> Vec<usize> {
    t_xa.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthParams};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn mof(pred: &[usize], gt: &[usize]) -> f64 {
        pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64
    }

    #[test]
    fn kmeans_recovers_clean_prototypes() {
        let params = SynthParams {
            noise: 0.0,
            drift: 0.0,
            n_videos: 4,
            ..SynthParams::default()
        };
        let ds = generate(&params).unwrap();
        let seqs: Vec<_> = ds.videos.iter().map(|v| v.features.clone()).collect();
        let a = init_centroids_kmeans(&seqs, params.n_actions, 3).unwrap();
        // every prototype has exactly one centroid within 1e-6
        for p in ds.prototypes.actions.rows() {
            let hits = a.vectors().rows().into_iter().filter(|c| sq_dist(*c, p).sqrt() < 1e-6).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let x = FeatureSequence::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(init_centroids_kmeans(std::slice::from_ref(&x), 1, 0), Err(Error::Config(_))));
        assert!(matches!(init_centroids_kmeans(&[x], 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn kmeans_on_duplicates_gives_that_frame() {
        let x = FeatureSequence::from_rows(&vec![vec![0.5, -1.0, 2.0]; 6]).unwrap();
        let a = init_centroids_kmeans(&[x], 3, 9).unwrap();
        for row in a.vectors().rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let ds = generate(&SynthParams::default()).unwrap();
        let seqs: Vec<_> = ds.videos.iter().map(|v| v.features.clone()).collect();
        assert_eq!(init_centroids_kmeans(&seqs, 5, 7).unwrap(), init_centroids_kmeans(&seqs, 5, 7).unwrap());
    }

    #[test]
    fn frames_equal_to_centroids_pick_their_action() {
        let a = ActionCentroids::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let x = FeatureSequence::new(a.vectors().clone()).unwrap();
        let cfg = SegConfig {
            solver: SolverConfig {
                alpha: 0.0,
                ..SolverConfig::default()
            },
            ..SegConfig::default()
        };
        let (t, _) = seg_pseudo_labels(&x, &a, &cfg).unwrap();
        assert_eq!(decode_segmentation(t.values()), vec![0, 1, 2]);
    }

    #[test]
    fn frame_marginal_is_exact() {
        let ds = generate(&SynthParams::default()).unwrap();
        let x = &ds.videos[0].features;
        let a = init_centroids_kmeans(std::slice::from_ref(x), 5, 0).unwrap();
        let (t, _) = seg_pseudo_labels(x, &a, &SegConfig::default()).unwrap();
        let n = x.len() as f64;
        for s in t.row_sums().iter() {
            assert_abs_diff_eq!(*s, 1.0 / n, epsilon = 1e-5);
        }
    }

    #[test]
    fn two_ordered_halves_give_two_blocks() {
        let x = FeatureSequence::from_rows(&[vec![1.0, 0.1], vec![0.9, 0.2], vec![0.2, 0.9], vec![0.1, 1.0]]).unwrap();
        let a = ActionCentroids::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (t, _) = seg_pseudo_labels(&x, &a, &SegConfig::default()).unwrap();
        assert_eq!(decode_segmentation(t.values()), vec![0, 0, 1, 1]);
    }

    #[test]
    fn partial_unbalanced_beats_balanced_on_uneven_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let protos = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let gt: Vec<usize> = (0..40).map(|i| usize::from(i >= 32)).collect();
        let frames = Array2::from_shape_fn((40, 4), |(i, d)| protos[[gt[i], d]] + 0.15 * (rng.gen::<f64>() - 0.5));
        let x = FeatureSequence::new(frames).unwrap();
        let a = ActionCentroids::new(protos).unwrap();
        let partial = SegConfig::default();
        let balanced = SegConfig {
            marginal_mode: MarginalMode::Balanced,
            ..SegConfig::default()
        };
        let (tp, _) = seg_pseudo_labels(&x, &a, &partial).unwrap();
        let (tb, _) = seg_pseudo_labels(&x, &a, &balanced).unwrap();
        let mp = mof(&decode_segmentation(tp.values()), &gt);
        let mb = mof(&decode_segmentation(tb.values()), &gt);
        assert!(mp >= mb, "partial {mp} < balanced {mb}");
        assert!(mp > 0.95);
    }

    #[test]
    fn seg_loss_limits() {
        let t = array![[0.5, 0.0], [0.0, 0.5]];
        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        assert_abs_diff_eq!(seg_loss(&perfect, &t).unwrap(), 0.0, epsilon = 1e-12);
        let k = 4;
        let u = Array2::from_elem((3, k), 1.0 / k as f64);
        let tu = Array2::from_elem((3, k), 1.0 / 12.0);
        assert_abs_diff_eq!(seg_loss(&u, &tu).unwrap(), (k as f64).ln(), epsilon = 1e-12);
        assert_eq!(seg_loss(&u, &tu).unwrap(), alignment_loss(&u, &tu).unwrap());
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(1.0, 2.0, 3.0, &JointWeights::new(1.0, 0.0).unwrap()), 1.0);
        assert_eq!(joint_loss(1.0, 2.0, 3.0, &JointWeights::new(0.0, 1.0).unwrap()), 5.0);
        assert_eq!(joint_loss(1.0, 2.0, 3.0, &JointWeights::default()), 6.0);
        assert!(JointWeights::new(0.0, 0.0).is_err());
        assert!(JointWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_segmentation(&array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]), vec![1, 0]);
        assert_eq!(decode_segmentation(&array![[0.25, 0.25, 0.25, 0.25]]), vec![0]);
    }

    #[test]
    fn seg_step_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = FeatureSequence::new(Array2::from_shape_fn((6, 3), |_| rng.gen::<f64>() - 0.5)).unwrap();
        let a = ActionCentroids::new(Array2::from_shape_fn((3, 3), |_| rng.gen::<f64>() - 0.5)).unwrap();
        let cfg = SegConfig {
            tau: 0.5,
            ..SegConfig::default()
        };
        let step = seg_step(&x, &a, &cfg).unwrap();
        let t = step.coupling.values().clone();
        let loss_at = |xf: &Array2<f64>, af: &Array2<f64>| {
            log_loss(&log_similarities(xf, af, cfg.tau).unwrap(), &t).unwrap()
        };
        let h = 1e-6;
        for (i, j) in [(0, 0), (3, 2), (5, 1)] {
            let mut xp = x.frames().clone();
            let mut xm = x.frames().clone();
            xp[[i, j]] += h;
            xm[[i, j]] -= h;
            let fd = (loss_at(&xp, a.vectors()) - loss_at(&xm, a.vectors())) / (2.0 * h);
            assert_abs_diff_eq!(fd, step.grad_x[[i, j]], epsilon = 1e-6);
        }
        for (k, j) in [(0, 1), (2, 2)] {
            let mut ap = a.vectors().clone();
            let mut am = a.vectors().clone();
            ap[[k, j]] += h;
            am[[k, j]] -= h;
            let fd = (loss_at(x.frames(), &ap) - loss_at(x.frames(), &am)) / (2.0 * h);
            assert_abs_diff_eq!(fd, step.grad_a[[k, j]], epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn decode_is_permutation_covariant(vals in proptest::collection::vec(0.0f64..1.0, 12), shift in 1usize..4) {
            let t = Array2::from_shape_vec((3, 4), vals).unwrap();
            let perm: Vec<usize> = (0..4).map(|k| (k + shift) % 4).collect();
            // column k of the permuted matrix is column perm[k] of t
            let tp = Array2::from_shape_fn((3, 4), |(i, k)| t[[i, perm[k]]]);
            let base = decode_segmentation(&t);
            let permuted = decode_segmentation(&tp);
            for (b, p) in base.iter().zip(&permuted) {
                prop_assert_eq!(perm[*p], *b);
            }
        }

        #[test]
        fn joint_loss_is_linear(l in 0.0f64..5.0, m in 0.0f64..5.0, n in 0.0f64..5.0, s in 0.1f64..4.0) {
            let w = JointWeights::default();
            prop_assert!((joint_loss(s * l, m, n, &w) - joint_loss(l, m, n, &w) - (s - 1.0) * l).abs() < 1e-9);
            prop_assert!((joint_loss(l, s * m, n, &w) - joint_loss(l, m, n, &w) - (s - 1.0) * m).abs() < 1e-9);
        }
    }
}

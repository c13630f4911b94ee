//! Synthetic "videos" with known action labels and frame correspondences.
//!
//! Each video renders a latent program (an ordered list of action segments,
//! optionally permuted, repeated and interleaved with background) on a
//! continuous time axis. A frame shows its action prototype plus a phase
//! code (smooth bumps over a few action-specific directions, so frames at
//! different phases of a segment are distinguishable) and isotropic
//! Gaussian noise. Segment durations and the phase curve are
//! perturbed by the warp level.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::FeatureSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub n_videos: usize,
    /// Number of real actions; background gets the extra label `n_actions`.
    pub n_actions: usize,
    /// Raw feature dimension.
    pub dim: usize,
    /// Frames per video before length jitter.
    pub frames_per_video: usize,
    /// Relative spread of video lengths (0 = all videos equally long).
    pub length_jitter: f64,
    /// Norm of the per-frame Gaussian noise.
    pub noise: f64,
    /// Strength of the temporal warp (segment durations and phase curves).
    pub warp: f64,
    /// Amplitude of the phase code added to the action prototype.
    pub drift: f64,
    /// Directions per action used by the phase code.
    pub phase_dims: usize,
    /// Norm of a per-video offset shared by all its frames.
    pub style: f64,
    /// Probability of a background segment before each action segment.
    pub background_rate: f64,
    /// Swap one random pair of adjacent action segments.
    pub permute: bool,
    /// Repeat one action in a second, disjoint segment.
    pub repeat: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_videos: 16,
            n_actions: 5,
            dim: 32,
            frames_per_video: 100,
            length_jitter: 0.0,
            noise: 0.3,
            warp: 0.3,
            drift: 2.0,
            phase_dims: 4,
            style: 0.0,
            background_rate: 0.0,
            permute: false,
            repeat: false,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 {
            return Err(Error::config("n_videos must be at least 1"));
        }
        if self.n_actions < 2 {
            return Err(Error::config("n_actions must be at least 2"));
        }
        if self.phase_dims == 0 {
            return Err(Error::config("phase_dims must be at least 1"));
        }
        let need = self.n_actions * (self.phase_dims + 1) + 2;
        if self.dim < need {
            return Err(Error::config(format!(
                "dim {} too small for {} actions with {} phase directions (need at least {need})",
                self.dim, self.n_actions, self.phase_dims
            )));
        }
        if self.frames_per_video < 2 * (self.n_actions + 1) {
            return Err(Error::config("frames_per_video too small for the program length"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("warp", self.warp),
            ("drift", self.drift),
            ("style", self.style),
            ("length_jitter", self.length_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.background_rate) {
            return Err(Error::config(format!(
                "background_rate must lie in [0, 1], got {}",
                self.background_rate
            )));
        }
        Ok(())
    }

    /// Label count including background when it can occur.
    pub fn n_classes(&self) -> usize {
        self.n_actions + usize::from(self.background_rate > 0.0)
    }

    pub fn background_label(&self) -> usize {
        self.n_actions
    }
}

/// Latent geometry shared by all videos of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// One unit vector per action (rows).
    pub actions: Array2<f64>,
    /// Phase-code directions; rows `a * phase_dims .. (a + 1) * phase_dims`
    /// belong to action `a`.
    pub drifts: Array2<f64>,
    pub background: Array1<f64>,
}

impl Prototypes {
    /// Orthonormal prototypes, phase directions and background drawn from the seed.
    pub fn sample(n_actions: usize, phase_dims: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let total = n_actions * (phase_dims + 1) + 1;
        let mut basis: Vec<Array1<f64>> = Vec::with_capacity(total);
        while basis.len() < total {
            let mut v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for b in &basis {
                let proj = v.dot(b);
                v.scaled_add(-proj, b);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                basis.push(v / norm);
            }
        }
        let stack = |rows: &[Array1<f64>]| {
            let mut a = Array2::zeros((rows.len(), dim));
            for (mut dst, src) in a.rows_mut().into_iter().zip(rows) {
                dst.assign(src);
            }
            a
        };
        Self {
            actions: stack(&basis[..n_actions]),
            drifts: stack(&basis[n_actions..total - 1]),
            background: basis[total - 1].clone(),
        }
    }

    /// Unit vector orthogonal to every prototype, drift and the background.
    pub fn orthogonal_noise(&self, rng: &mut impl Rng) -> Array1<f64> {
        let dim = self.background.len();
        loop {
            let mut v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for b in self.actions.rows().into_iter().chain(self.drifts.rows()).chain(std::iter::once(self.background.view())) {
                let proj = v.dot(&b);
                v.scaled_add(-proj, &b);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                return v / norm;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub features: FeatureSequence,
    pub labels: Vec<usize>,
    /// Phase of each frame inside its segment, in `[0, 1]`.
    pub progress: Vec<f64>,
    /// Index of the program segment each frame belongs to.
    pub segment: Vec<usize>,
    /// Action id of each program segment.
    pub program: Vec<usize>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Occurrence number of each segment among segments with the same action.
    fn occurrences(&self) -> Vec<usize> {
        let mut seen = std::collections::HashMap::new();
        self.program
            .iter()
            .map(|a| {
                let c = seen.entry(*a).or_insert(0usize);
                *c += 1;
                *c - 1
            })
            .collect()
    }
}

/// Ground-truth correspondence from video `a` to video `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairAlignment {
    pub a: usize,
    pub b: usize,
    /// For each frame of `a`, the matching frame of `b` if one exists.
    pub map: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub params: SynthParams,
    pub prototypes: Prototypes,
    pub videos: Vec<Video>,
    pub pairs: Vec<PairAlignment>,
}

impl SynthDataset {
    pub fn n_classes(&self) -> usize {
        self.params.n_classes()
    }

    /// Videos `[0, split)` are used for training and fitting probes, the
    /// rest are held out. The split is even so pairs never straddle it.
    pub fn train_split(&self) -> usize {
        let n = self.videos.len();
        if n < 4 {
            return n;
        }
        (n / 2) & !1
    }

    /// Ground-truth pairs whose videos both lie in the held-out part.
    pub fn test_pairs(&self) -> impl Iterator<Item = &PairAlignment> {
        let split = self.train_split();
        self.pairs.iter().filter(move |p| p.a >= split && p.b >= split)
    }
}

fn program(params: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut actions: Vec<usize> = (0..params.n_actions).collect();
    if params.permute {
        let i = rng.gen_range(0..params.n_actions - 1);
        actions.swap(i, i + 1);
    }
    if params.repeat {
        // Any action but the last one, so the copy never touches its original.
        let pick = actions[rng.gen_range(0..actions.len() - 1)];
        actions.push(pick);
    }
    let bg = params.background_label();
    let mut out = Vec::with_capacity(actions.len() * 2 + 1);
    for a in actions {
        if params.background_rate > 0.0 && rng.gen::<f64>() < params.background_rate {
            out.push(bg);
        }
        out.push(a);
    }
    out
}

/// Width of each phase bump, in units of the bump spacing.
const PHASE_WIDTH: f64 = 0.6;

fn render(params: &SynthParams, protos: &Prototypes, rng: &mut ChaCha8Rng) -> Result<Video> {
    let program = program(params, rng);
    let bg = params.background_label();
    let durations: Vec<f64> = program
        .iter()
        .map(|&a| {
            let base = if a == bg { 0.5 } else { 1.0 };
            base * (params.warp * 0.5 * rng.sample::<f64, _>(StandardNormal)).exp()
        })
        .collect();
    let gammas: Vec<f64> = program
        .iter()
        .map(|_| (params.warp * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let length = if params.length_jitter > 0.0 {
        let f = (params.length_jitter * rng.sample::<f64, _>(StandardNormal)).exp();
        ((params.frames_per_video as f64 * f).round() as usize).max(program.len() * 2)
    } else {
        params.frames_per_video
    };
    let total: f64 = durations.iter().sum();
    let mut starts = Vec::with_capacity(durations.len());
    let mut acc = 0.0;
    for d in &durations {
        starts.push(acc);
        acc += d;
    }

    let dim = params.dim;
    let mut frames = Array2::zeros((length, dim));
    let mut labels = Vec::with_capacity(length);
    let mut progress = Vec::with_capacity(length);
    let mut segment = Vec::with_capacity(length);
    let noise_scale = params.noise / (dim as f64).sqrt();
    let style: Array1<f64> = (0..dim)
        .map(|_| params.style / (dim as f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for t in 0..length {
        let time = (t as f64 + 0.5) / length as f64 * total;
        let s = starts.partition_point(|&st| st <= time).saturating_sub(1);
        let local = ((time - starts[s]) / durations[s]).clamp(0.0, 1.0);
        let phase = local.powf(gammas[s]);
        let action = program[s];
        let mut row = frames.row_mut(t);
        if action == bg {
            row.assign(&protos.background);
        } else {
            row.assign(&protos.actions.row(action));
            let m = params.phase_dims;
            for k in 0..m {
                let z = (phase - (k as f64 + 0.5) / m as f64) * m as f64 / PHASE_WIDTH;
                row.scaled_add(params.drift * (-0.5 * z * z).exp(), &protos.drifts.row(action * m + k));
            }
        }
        row += &style;
        for v in row.iter_mut() {
            *v += noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        labels.push(action);
        progress.push(phase);
        segment.push(s);
    }
    Ok(Video {
        features: FeatureSequence::new(frames)?,
        labels,
        progress,
        segment,
        program,
    })
}

/// Ground truth between two videos: the same occurrence of the same action,
/// at the closest phase. Background frames have no partner.
pub fn ground_truth_alignment(a: &Video, b: &Video, background: usize) -> Vec<Option<usize>> {
    let occ_a = a.occurrences();
    let occ_b = b.occurrences();
    (0..a.len())
        .map(|i| {
            let seg = a.segment[i];
            let action = a.program[seg];
            if action == background {
                return None;
            }
            let target = b
                .program
                .iter()
                .zip(&occ_b)
                .position(|(&act, &o)| act == action && o == occ_a[seg])?;
            let mut best: Option<(usize, f64)> = None;
            for j in (0..b.len()).filter(|&j| b.segment[j] == target) {
                let d = (b.progress[j] - a.progress[i]).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

/// Generates a dataset; pairs are consecutive videos `(0, 1), (2, 3), ...`.
pub fn generate(params: &SynthParams) -> Result<SynthDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let prototypes = Prototypes::sample(params.n_actions, params.phase_dims, params.dim, &mut rng);
    let videos = (0..params.n_videos)
        .map(|_| render(params, &prototypes, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let pairs = (0..params.n_videos / 2)
        .map(|k| {
            let (a, b) = (2 * k, 2 * k + 1);
            PairAlignment {
                a,
                b,
                map: ground_truth_alignment(&videos[a], &videos[b], params.background_label()),
            }
        })
        .collect();
    Ok(SynthDataset {
        params: params.clone(),
        prototypes,
        videos,
        pairs,
    })
}

/// Replaces `count` distinct random frames by prototype-orthogonal noise of
/// the same norm; returns the replaced indices in increasing order.
pub fn inject_outliers(video: &mut Video, protos: &Prototypes, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if count > video.len() {
        return Err(Error::config(format!("cannot replace {count} of {} frames", video.len())));
    }
    let mut idx: Vec<usize> = (0..video.len()).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<usize> = idx.into_iter().take(count).collect();
    chosen.sort_unstable();
    let mut frames = video.features.frames().clone();
    for &i in &chosen {
        let norm = frames.row(i).dot(&frames.row(i)).sqrt();
        let noise = protos.orthogonal_noise(rng) * norm;
        frames.row_mut(i).assign(&noise);
    }
    video.features = FeatureSequence::new(frames)?;
    Ok(chosen)
}

/// Evenly spaced positions, jittered inside their bins when `rng` is given.
pub fn uniform_indices(len: usize, count: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let width = len as f64 / count as f64;
    match rng {
        Some(rng) => (0..count)
            .map(|k| {
                let lo = (k as f64 * width).floor() as usize;
                let hi = (((k + 1) as f64 * width).floor() as usize).clamp(lo + 1, len);
                rng.gen_range(lo..hi)
            })
            .collect(),
        None => (0..count).map(|k| ((k as f64 + 0.5) * width).floor() as usize).collect(),
    }
}

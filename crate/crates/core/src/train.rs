//! Self-supervised training: pseudo-labels from the transport solvers,
//! cross-entropy losses, hand-written backward pass and AdamW updates.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{align_pair, AlignConfig};
use crate::encoder::{Activation, EncoderModel, Gradients};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::priors::FeatureSequence;
use crate::seg::{init_centroids_kmeans, joint_loss, seg_step, JointWeights, SegConfig};
use crate::synth::{uniform_indices, SynthDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    AlignOnly,
    SegOnly,
    Joint,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "align-only" => Ok(Self::AlignOnly),
            "seg-only" => Ok(Self::SegOnly),
            "joint" => Ok(Self::Joint),
            other => Err(Error::config(format!("unknown mode '{other}' (expected align-only, seg-only or joint)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AlignOnly => "align-only",
            Self::SegOnly => "seg-only",
            Self::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    /// Video pairs per update.
    pub batch_pairs: usize,
    pub epochs: usize,
    pub frames_per_clip: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub weights: JointWeights,
    pub hidden: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Number of action centroids; `None` uses the dataset's class count.
    pub n_actions: Option<usize>,
    pub align: AlignConfig,
    pub seg: SegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_pairs: 1,
            epochs: 30,
            frames_per_clip: 40,
            seed: 0,
            mode: TrainMode::AlignOnly,
            weights: JointWeights::default(),
            hidden: 128,
            embed_dim: 16,
            activation: Activation::Tanh,
            n_actions: None,
            align: AlignConfig::default(),
            seg: SegConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.optimizer.learning_rate > 0.0) {
            log::warn!("learning rate is zero; parameters will not change");
        }
        if self.batch_pairs == 0 || self.frames_per_clip < 2 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::config("batch_pairs, hidden and embed_dim must be positive and frames_per_clip at least 2"));
        }
        self.weights.validate()?;
        self.align.validate()
    }

    /// Loss weights actually applied in this mode.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.mode {
            TrainMode::AlignOnly => (1.0, 0.0),
            TrainMode::SegOnly => (0.0, 1.0),
            TrainMode::Joint => (self.weights.w_align, self.weights.w_seg),
        }
    }
}

/// One optimizer update. `align` and `seg` are the weighted components, so
/// `loss = align + seg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub align: f64,
    pub seg: f64,
}

pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,loss,align,seg\n");
    for r in log {
        out.push_str(&format!("{},{},{:e},{:e},{:e}\n", r.step, r.epoch, r.loss, r.align, r.seg));
    }
    out
}

/// Loss terms and parameter gradients for one pair of raw clips.
pub struct PairStep {
    pub loss: f64,
    pub align: f64,
    pub seg: f64,
    pub grads: Gradients,
}

fn embed(model: &EncoderModel, raw: &Array2<f64>) -> Result<(crate::encoder::Forward, FeatureSequence)> {
    let fwd = model.forward(raw)?;
    let seq = FeatureSequence::new(fwd.output.clone())?;
    Ok((fwd, seq))
}

/// Pseudo-labels are recomputed from the current embeddings and treated as
/// constants; only the similarity side is differentiated.
pub fn pair_step(model: &EncoderModel, x: &FeatureSequence, y: &FeatureSequence, cfg: &TrainConfig) -> Result<PairStep> {
    let (wa, ws) = cfg.effective_weights();
    let (fx, ex) = embed(model, x.frames())?;
    let (fy, ey) = embed(model, y.frames())?;
    let mut gx = Array2::zeros(fx.output.dim());
    let mut gy = Array2::zeros(fy.output.dim());
    let mut ga = None;
    let mut l_xy = 0.0;
    let (mut l_xa, mut l_ya) = (0.0, 0.0);
    if wa > 0.0 {
        let r = align_pair(&ex, &ey, &cfg.align)?;
        l_xy = r.loss;
        gx.scaled_add(wa, &r.grad_x);
        gy.scaled_add(wa, &r.grad_y);
    }
    if ws > 0.0 {
        let centroids = model
            .centroids
            .as_ref()
            .ok_or_else(|| Error::config("segmentation loss needs action centroids"))?;
        let sx = seg_step(&ex, centroids, &cfg.seg)?;
        let sy = seg_step(&ey, centroids, &cfg.seg)?;
        l_xa = sx.loss;
        l_ya = sy.loss;
        gx.scaled_add(ws, &sx.grad_x);
        gy.scaled_add(ws, &sy.grad_x);
        let mut a = sx.grad_a;
        a += &sy.grad_a;
        a *= ws;
        ga = Some(a);
    }
    let mut grads = model.backward_from(x.frames(), &fx, &gx)?;
    grads.add_scaled(1.0, &model.backward_from(y.frames(), &fy, &gy)?);
    if let (Some(dst), Some(src)) = (grads.centroids.as_mut(), ga) {
        *dst = src;
    }
    let w = JointWeights { w_align: wa, w_seg: ws };
    Ok(PairStep {
        loss: joint_loss(l_xy, l_xa, l_ya, &w),
        align: wa * l_xy,
        seg: ws * (l_xa + l_ya),
        grads,
    })
}

/// Initial model for a run: encoder from `seed`, centroids (segmentation
/// modes only) from k-means on the initial embeddings with `seed + 1`.
pub fn init_model(videos: &[&FeatureSequence], n_actions: usize, cfg: &TrainConfig) -> Result<EncoderModel> {
    let d_in = videos.first().ok_or_else(|| Error::config("no training videos"))?.dim();
    let mut model = EncoderModel::init(d_in, cfg.hidden, cfg.embed_dim, cfg.activation, cfg.seed)?;
    if cfg.mode != TrainMode::AlignOnly {
        let emb = videos.iter().map(|v| model.encode(v)).collect::<Result<Vec<_>>>()?;
        model.centroids = Some(init_centroids_kmeans(&emb, n_actions, cfg.seed.wrapping_add(1))?);
    }
    Ok(model)
}

/// Trains on `videos`; each epoch shuffles them, pairs neighbours and
/// updates once per `batch_pairs` pairs.
pub fn train_on(videos: &[&FeatureSequence], n_actions: usize, cfg: &TrainConfig) -> Result<(EncoderModel, Vec<StepLog>)> {
    cfg.validate()?;
    if videos.len() < 2 {
        return Err(Error::config(format!("training needs at least 2 videos, got {}", videos.len())));
    }
    let mut model = init_model(videos, n_actions, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut state = AdamState::new();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut rng);
        let pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        for batch in pairs.chunks(cfg.batch_pairs) {
            step += 1;
            let mut total = Gradients::zeros_like(&model);
            let (mut loss, mut align, mut seg) = (0.0, 0.0, 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &(a, b) in batch {
                let ia = uniform_indices(videos[a].len(), cfg.frames_per_clip, Some(&mut rng));
                let ib = uniform_indices(videos[b].len(), cfg.frames_per_clip, Some(&mut rng));
                let r = pair_step(&model, &videos[a].select(&ia)?, &videos[b].select(&ib)?, cfg).map_err(|e| match e {
                    Error::Numerical { message, .. } | Error::Domain(message) => Error::Training { step, message },
                    other => other,
                })?;
                total.add_scaled(scale, &r.grads);
                loss += scale * r.loss;
                align += scale * r.align;
                seg += scale * r.seg;
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("loss is {loss}"),
                });
            }
            let grads = total.blocks();
            let mut params = model.blocks_mut();
            state.step(&mut params, &grads, &cfg.optimizer).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { step, message },
                other => other,
            })?;
            if !model.is_finite() {
                return Err(Error::Training {
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
            log.push(StepLog {
                step,
                epoch,
                loss,
                align,
                seg,
            });
        }
    }
    Ok((model, log))
}

/// Trains on the training split of a synthetic dataset.
pub fn train(dataset: &SynthDataset, cfg: &TrainConfig) -> Result<(EncoderModel, Vec<StepLog>)> {
    let split = dataset.train_split();
    let videos: Vec<&FeatureSequence> = dataset.videos[..split].iter().map(|v| &v.features).collect();
    train_on(&videos, cfg.n_actions.unwrap_or(dataset.n_classes()), cfg)
}

//! Run configuration read from `key = value` files with dotted keys.
//!
//! Every key has a default; unknown keys are rejected by name. Solver keys
//! apply to both the alignment and the segmentation problems.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::io::{read_key_values, KeyValue};
use crate::seg::SegConfig;
use crate::synth::SynthParams;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/encoder.ckpt"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthParams,
    pub align: AlignConfig,
    pub seg: SegConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            synth: SynthParams::default(),
            align: AlignConfig::default(),
            seg: SegConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        };
        cfg.sync();
        cfg
    }
}

/// Every recognised key, in the order written by [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "seed",
    "synth.n_videos",
    "synth.n_actions",
    "synth.dim",
    "synth.frames_per_video",
    "synth.length_jitter",
    "synth.noise",
    "synth.warp",
    "synth.drift",
    "synth.phase_dims",
    "synth.style",
    "synth.background_rate",
    "synth.permute",
    "synth.repeat",
    "prior.radius",
    "prior.rho",
    "prior.zeta",
    "solver.alpha",
    "solver.epsilon",
    "solver.step_size",
    "solver.outer_iters",
    "solver.inner_iters",
    "solver.tol",
    "solver.inner_tol",
    "solver.marginal_mode",
    "solver.lambda_p",
    "solver.lambda_q",
    "align.tau",
    "align.use_virtual",
    "align.normalize_targets",
    "seg.radius",
    "seg.lambda_act",
    "seg.marginal_mode",
    "seg.tau",
    "train.mode",
    "train.learning_rate",
    "train.weight_decay",
    "train.epochs",
    "train.batch_pairs",
    "train.frames_per_clip",
    "train.hidden",
    "train.embed_dim",
    "train.activation",
    "train.n_actions",
    "joint.w_align",
    "joint.w_seg",
    "eval.matching",
    "eval.fractions",
    "eval.ap_k",
    "paths.dataset",
    "paths.output",
    "paths.checkpoint",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Copies the shared pieces (seed, solver, priors) into the nested configs.
    fn sync(&mut self) {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.seg.solver = self.align.solver.clone();
        self.train.align = self.align.clone();
        self.train.seg = self.seg.clone();
        self.eval.seg = self.seg.clone();
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "synth.n_videos" => self.synth.n_videos = parse(key, v)?,
            "synth.n_actions" => self.synth.n_actions = parse(key, v)?,
            "synth.dim" => self.synth.dim = parse(key, v)?,
            "synth.frames_per_video" => self.synth.frames_per_video = parse(key, v)?,
            "synth.length_jitter" => self.synth.length_jitter = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.warp" => self.synth.warp = parse(key, v)?,
            "synth.drift" => self.synth.drift = parse(key, v)?,
            "synth.phase_dims" => self.synth.phase_dims = parse(key, v)?,
            "synth.style" => self.synth.style = parse(key, v)?,
            "synth.background_rate" => self.synth.background_rate = parse(key, v)?,
            "synth.permute" => self.synth.permute = parse(key, v)?,
            "synth.repeat" => self.synth.repeat = parse(key, v)?,
            "prior.radius" => self.align.prior.radius = parse(key, v)?,
            "prior.rho" => self.align.prior.rho = parse(key, v)?,
            "prior.zeta" => self.align.prior.zeta = parse(key, v)?,
            "solver.alpha" => self.align.solver.alpha = parse(key, v)?,
            "solver.epsilon" => self.align.solver.epsilon = parse(key, v)?,
            "solver.step_size" => self.align.solver.step_size = parse(key, v)?,
            "solver.outer_iters" => self.align.solver.outer_iters = parse(key, v)?,
            "solver.inner_iters" => self.align.solver.inner_sinkhorn_iters = parse(key, v)?,
            "solver.tol" => self.align.solver.tol = parse(key, v)?,
            "solver.inner_tol" => self.align.solver.inner_tol = parse(key, v)?,
            "solver.marginal_mode" => self.align.solver.marginal_mode = parse(key, v)?,
            "solver.lambda_p" => self.align.solver.lambda_p = parse(key, v)?,
            "solver.lambda_q" => self.align.solver.lambda_q = parse(key, v)?,
            "align.tau" => self.align.tau = parse(key, v)?,
            "align.use_virtual" => self.align.use_virtual = parse(key, v)?,
            "align.normalize_targets" => self.align.normalize_targets = parse(key, v)?,
            "seg.radius" => self.seg.radius = parse(key, v)?,
            "seg.lambda_act" => self.seg.lambda_act = parse(key, v)?,
            "seg.marginal_mode" => self.seg.marginal_mode = parse(key, v)?,
            "seg.tau" => self.seg.tau = parse(key, v)?,
            "train.mode" => self.train.mode = parse(key, v)?,
            "train.learning_rate" => self.train.optimizer.learning_rate = parse(key, v)?,
            "train.weight_decay" => self.train.optimizer.weight_decay = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_pairs" => self.train.batch_pairs = parse(key, v)?,
            "train.frames_per_clip" => self.train.frames_per_clip = parse(key, v)?,
            "train.hidden" => self.train.hidden = parse(key, v)?,
            "train.embed_dim" => self.train.embed_dim = parse(key, v)?,
            "train.activation" => self.train.activation = parse(key, v)?,
            "train.n_actions" => {
                self.train.n_actions = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "joint.w_align" => self.train.weights.w_align = parse(key, v)?,
            "joint.w_seg" => self.train.weights.w_seg = parse(key, v)?,
            "eval.matching" => self.eval.scope = parse(key, v)?,
            "eval.fractions" => self.eval.fractions = parse_list(key, v)?,
            "eval.ap_k" => self.eval.ap_ks = parse_list(key, v)?,
            "paths.dataset" => self.paths.dataset = PathBuf::from(v),
            "paths.output" => self.paths.output = PathBuf::from(v),
            "paths.checkpoint" => self.paths.checkpoint = PathBuf::from(v),
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        self.sync();
        Ok(())
    }

    /// Applies entries on top of the current values.
    pub fn apply(&mut self, entries: &[KeyValue], path: &Path) -> Result<()> {
        for kv in entries {
            self.set(&kv.key, &kv.value).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: kv.line,
                message: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by the entries of `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&read_key_values(path)?, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.align.validate()?;
        self.train.validate()?;
        if self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::config("eval.fractions must lie in (0, 1]"));
        }
        if self.eval.ap_ks.contains(&0) {
            return Err(Error::config("eval.ap_k entries must be positive"));
        }
        Ok(())
    }

    /// Current value of `key`, formatted as it would be parsed.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.align.solver;
        Some(match key {
            "seed" => self.seed.to_string(),
            "synth.n_videos" => self.synth.n_videos.to_string(),
            "synth.n_actions" => self.synth.n_actions.to_string(),
            "synth.dim" => self.synth.dim.to_string(),
            "synth.frames_per_video" => self.synth.frames_per_video.to_string(),
            "synth.length_jitter" => self.synth.length_jitter.to_string(),
            "synth.noise" => self.synth.noise.to_string(),
            "synth.warp" => self.synth.warp.to_string(),
            "synth.drift" => self.synth.drift.to_string(),
            "synth.phase_dims" => self.synth.phase_dims.to_string(),
            "synth.style" => self.synth.style.to_string(),
            "synth.background_rate" => self.synth.background_rate.to_string(),
            "synth.permute" => self.synth.permute.to_string(),
            "synth.repeat" => self.synth.repeat.to_string(),
            "prior.radius" => self.align.prior.radius.to_string(),
            "prior.rho" => self.align.prior.rho.to_string(),
            "prior.zeta" => self.align.prior.zeta.to_string(),
            "solver.alpha" => s.alpha.to_string(),
            "solver.epsilon" => s.epsilon.to_string(),
            "solver.step_size" => s.step_size.to_string(),
            "solver.outer_iters" => s.outer_iters.to_string(),
            "solver.inner_iters" => s.inner_sinkhorn_iters.to_string(),
            "solver.tol" => s.tol.to_string(),
            "solver.inner_tol" => s.inner_tol.to_string(),
            "solver.marginal_mode" => s.marginal_mode.to_string(),
            "solver.lambda_p" => s.lambda_p.to_string(),
            "solver.lambda_q" => s.lambda_q.to_string(),
            "align.tau" => self.align.tau.to_string(),
            "align.use_virtual" => self.align.use_virtual.to_string(),
            "align.normalize_targets" => self.align.normalize_targets.to_string(),
            "seg.radius" => self.seg.radius.to_string(),
            "seg.lambda_act" => self.seg.lambda_act.to_string(),
            "seg.marginal_mode" => self.seg.marginal_mode.to_string(),
            "seg.tau" => self.seg.tau.to_string(),
            "train.mode" => self.train.mode.to_string(),
            "train.learning_rate" => self.train.optimizer.learning_rate.to_string(),
            "train.weight_decay" => self.train.optimizer.weight_decay.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_pairs" => self.train.batch_pairs.to_string(),
            "train.frames_per_clip" => self.train.frames_per_clip.to_string(),
            "train.hidden" => self.train.hidden.to_string(),
            "train.embed_dim" => self.train.embed_dim.to_string(),
            "train.activation" => self.train.activation.to_string(),
            "train.n_actions" => self.train.n_actions.map_or_else(|| "auto".into(), |k| k.to_string()),
            "joint.w_align" => self.train.weights.w_align.to_string(),
            "joint.w_seg" => self.train.weights.w_seg.to_string(),
            "eval.matching" => self.eval.scope.to_string(),
            "eval.fractions" => join(&self.eval.fractions),
            "eval.ap_k" => join(&self.eval.ap_ks),
            "paths.dataset" => self.paths.dataset.display().to_string(),
            "paths.output" => self.paths.output.display().to_string(),
            "paths.checkpoint" => self.paths.checkpoint.display().to_string(),
            _ => return None,
        })
    }

    /// The full configuration as a loadable `key = value` file.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }
}

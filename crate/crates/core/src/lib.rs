// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod ot;
pub mod priors;
pub mod seg;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use ndarray;
pub use align::{align_pair, AlignConfig};
pub use config::RunConfig;
pub use encoder::EncoderModel;
pub use eval::{evaluate, EvalOptions};
pub use metrics::{MatchingScope, MetricReport};
pub use ot::{solve_fgw, CostBundle, Coupling, Histogram, MarginalMode, SolveReport, SolverConfig, StructCost};
pub use priors::{FeatureSequence, Match, PriorConfig};
pub use seg::{JointWeights, SegConfig};
pub use synth::{generate, SynthDataset, SynthParams};
pub use train::{train, TrainConfig, TrainMode};

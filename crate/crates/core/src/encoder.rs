//! Two-layer MLP encoder with hand-written gradients and a text checkpoint.
//!
//! Checkpoint layout (UTF-8, whitespace separated):
//!
//! ```text
//! SEQOT-ENCODER 1
//! activation tanh
//! w1 <rows> <cols>
//! <row-major values, one matrix row per line>
//! b1 1 <H>
//! ...
//! w2 <H> <D>
//! b2 1 <D>
//! centroids <K> <D>      # only when the model carries centroids
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::FeatureSequence;
use crate::seg::ActionCentroids;

const MAGIC: &str = "SEQOT-ENCODER";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Tanh => v.tanh(),
            Self::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Self::Identity => v,
        }
    }

    /// Derivative expressed through the activation output `h`.
    fn derivative(self, h: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - h * h,
            Self::Sigmoid => h * (1.0 - h),
            Self::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "identity" => Ok(Self::Identity),
            other => Err(Error::config(format!("unknown activation '{other}' (expected tanh, sigmoid or identity)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Identity => "identity",
        })
    }
}

/// `f(x) = act(x W1 + b1) W2 + b2`, applied to every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
    pub centroids: Option<ActionCentroids>,
}

/// Gradients with the same layout as [`EncoderModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub centroids: Option<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Self {
            w1: Array2::zeros(model.w1.dim()),
            b1: Array1::zeros(model.b1.len()),
            w2: Array2::zeros(model.w2.dim()),
            b2: Array1::zeros(model.b2.len()),
            centroids: model.centroids.as_ref().map(|c| Array2::zeros(c.vectors().dim())),
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &Gradients) {
        self.w1.scaled_add(s, &other.w1);
        self.b1.scaled_add(s, &other.b1);
        self.w2.scaled_add(s, &other.w2);
        self.b2.scaled_add(s, &other.b2);
        if let (Some(a), Some(b)) = (self.centroids.as_mut(), other.centroids.as_ref()) {
            a.scaled_add(s, b);
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ];
        if let Some(c) = &self.centroids {
            out.push(c.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Hidden activations kept for the backward pass.
pub struct Forward {
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

impl EncoderModel {
    /// Glorot-uniform weights, zero biases, no centroids.
    pub fn init(d_in: usize, hidden: usize, d_out: usize, activation: Activation, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == 0 || d_out == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
        };
        let w1 = glorot(d_in, hidden);
        let w2 = glorot(hidden, d_out);
        Ok(Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(d_out),
            activation,
            centroids: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn forward(&self, raw: &Array2<f64>) -> Result<Forward> {
        if raw.ncols() != self.input_dim() {
            return Err(Error::dim(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                raw.ncols()
            )));
        }
        let mut hidden = raw.dot(&self.w1) + &self.b1;
        let act = self.activation;
        hidden.mapv_inplace(|v| act.apply(v));
        let output = hidden.dot(&self.w2) + &self.b2;
        Ok(Forward { hidden, output })
    }

    pub fn encode(&self, raw: &FeatureSequence) -> Result<FeatureSequence> {
        FeatureSequence::new(self.forward(raw.frames())?.output)
    }

    /// Parameter gradients of a scalar loss given its gradient with respect
    /// to the embeddings. Centroid gradients are zero here; callers add them.
    pub fn backward(&self, raw: &Array2<f64>, grad_out: &Array2<f64>) -> Result<Gradients> {
        let fwd = self.forward(raw)?;
        self.backward_from(raw, &fwd, grad_out)
    }

    pub fn backward_from(&self, raw: &Array2<f64>, fwd: &Forward, grad_out: &Array2<f64>) -> Result<Gradients> {
        if grad_out.dim() != fwd.output.dim() {
            return Err(Error::dim(format!(
                "embedding gradient is {:?} but embeddings are {:?}",
                grad_out.dim(),
                fwd.output.dim()
            )));
        }
        let w2 = fwd.hidden.t().dot(grad_out);
        let b2 = grad_out.sum_axis(Axis(0));
        let mut dh = grad_out.dot(&self.w2.t());
        let act = self.activation;
        dh.zip_mut_with(&fwd.hidden, |g, &h| *g *= act.derivative(h));
        let w1 = raw.t().dot(&dh);
        let b1 = dh.sum_axis(Axis(0));
        Ok(Gradients {
            w1,
            b1,
            w2,
            b2,
            centroids: self.centroids.as_ref().map(|c| Array2::zeros(c.vectors().dim())),
        })
    }

    /// Mutable parameter blocks in the order of [`Gradients::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ];
        if let Some(c) = &mut self.centroids {
            out.push(c.vectors_mut().as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut all = [&self.w1, &self.w2].iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.b1.iter().chain(self.b2.iter()).all(|v| v.is_finite());
        if let Some(c) = &self.centroids {
            all &= c.vectors().iter().all(|v| v.is_finite());
        }
        all
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\nactivation {}\n", self.activation);
        let mut block = |name: &str, m: ndarray::ArrayView2<f64>| {
            let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        block("w1", self.w1.view());
        block("b1", self.b1.view().insert_axis(Axis(0)));
        block("w2", self.w2.view());
        block("b2", self.b2.view().insert_axis(Axis(0)));
        if let Some(c) = &self.centroids {
            block("centroids", c.vectors().view());
        }
        out
    }

    pub fn from_checkpoint(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty checkpoint".into()))?;
        match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            [MAGIC, v] if *v == VERSION.to_string() => {}
            [MAGIC, v] => return Err(parse_err(1, format!("unsupported checkpoint version {v}"))),
            _ => return Err(parse_err(1, "missing checkpoint header".into())),
        }
        let (ln, act_line) = lines.next().ok_or_else(|| parse_err(2, "missing activation".into()))?;
        let activation = match act_line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["activation", name] => name.parse().map_err(|e: Error| parse_err(ln, e.to_string()))?,
            _ => return Err(parse_err(ln, "expected 'activation <name>'".into())),
        };

        let mut blocks: Vec<(String, Array2<f64>)> = Vec::new();
        while let Some((ln, head)) = lines.next() {
            if head.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = head.split_whitespace().collect();
            let (name, rows, cols) = match parts.as_slice() {
                [name, r, c] => (
                    name.to_string(),
                    r.parse::<usize>().map_err(|_| parse_err(ln, format!("bad row count '{r}'")))?,
                    c.parse::<usize>().map_err(|_| parse_err(ln, format!("bad column count '{c}'")))?,
                ),
                _ => return Err(parse_err(ln, format!("expected '<name> <rows> <cols>', got '{head}'"))),
            };
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| parse_err(ln, format!("block {name} is truncated")))?;
                let before = values.len();
                for tok in row.split_whitespace() {
                    values.push(tok.parse::<f64>().map_err(|_| parse_err(ln, format!("bad number '{tok}'")))?);
                }
                if values.len() - before != cols {
                    return Err(parse_err(ln, format!("block {name} row has {} values, expected {cols}", values.len() - before)));
                }
            }
            let m = Array2::from_shape_vec((rows, cols), values).map_err(|e| parse_err(ln, e.to_string()))?;
            blocks.push((name, m));
        }
        let mut take = |name: &str| -> Result<Array2<f64>> {
            let pos = blocks
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| parse_err(0, format!("checkpoint has no block '{name}'")))?;
            Ok(blocks.remove(pos).1)
        };
        let w1 = take("w1")?;
        let b1 = take("b1")?;
        let w2 = take("w2")?;
        let b2 = take("b2")?;
        let centroids = take("centroids").ok();
        if let Some((name, _)) = blocks.first() {
            return Err(parse_err(0, format!("unexpected block '{name}'")));
        }
        let (d_in, h) = w1.dim();
        let d_out = w2.ncols();
        if b1.dim() != (1, h) || w2.nrows() != h || b2.dim() != (1, d_out) {
            return Err(parse_err(0, "inconsistent block shapes".into()));
        }
        if d_in == 0 {
            return Err(parse_err(0, "empty input dimension".into()));
        }
        let centroids = match centroids {
            Some(c) if c.ncols() != d_out => return Err(parse_err(0, "centroid dimension does not match the output".into())),
            Some(c) => Some(ActionCentroids::new(c)?),
            None => None,
        };
        Ok(Self {
            w1,
            b1: b1.row(0).to_owned(),
            w2,
            b2: b2.row(0).to_owned(),
            activation,
            centroids,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_model(seed: u64, act: Activation) -> EncoderModel {
        let mut m = EncoderModel::init(4, 6, 3, act, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        m.b1.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        m.b2.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        m
    }

    #[test]
    fn zero_model_gives_zero_embeddings() {
        let mut m = EncoderModel::init(3, 5, 2, Activation::Tanh, 0).unwrap();
        m.w1.fill(0.0);
        m.w2.fill(0.0);
        let out = m.forward(&Array2::from_elem((4, 3), 1.5)).unwrap().output;
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_construction_reproduces_input() {
        let m = EncoderModel {
            w1: Array2::eye(3),
            b1: Array1::zeros(3),
            w2: Array2::eye(3),
            b2: Array1::zeros(3),
            activation: Activation::Identity,
            centroids: None,
        };
        let x = ndarray::array![[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]];
        assert_eq!(m.forward(&x).unwrap().output, x);
    }

    #[test]
    fn output_is_finite_for_large_inputs() {
        let m = EncoderModel::init(5, 128, 8, Activation::Tanh, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((30, 5), |_| rng.gen_range(-10.0..10.0));
        assert!(m.forward(&x).unwrap().output.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = EncoderModel::init(5, 4, 3, Activation::Tanh, 1).unwrap();
        assert!(matches!(m.forward(&Array2::zeros((2, 4))), Err(Error::Dimension(_))));
    }

    /// Loss `sum(G .* f(X))` has embedding gradient `G`.
    fn check_backward(act: Activation, seed: u64) {
        let m = random_model(seed, act);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let g = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let grads = m.backward(&x, &g).unwrap();
        let loss = |mm: &EncoderModel| (mm.forward(&x).unwrap().output * &g).sum();
        let h = 1e-5;
        let analytic = grads.blocks().iter().map(|b| b.to_vec()).collect::<Vec<_>>();
        for (block, values) in analytic.iter().enumerate() {
            for idx in 0..values.len() {
                let mut plus = m.clone();
                plus.blocks_mut()[block][idx] += h;
                let mut minus = m.clone();
                minus.blocks_mut()[block][idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = values[idx];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - a).abs() < 1e-9, "{act:?} block {block}[{idx}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            check_backward(Activation::Tanh, seed);
            check_backward(Activation::Sigmoid, seed);
            check_backward(Activation::Identity, seed);
        }
    }

    #[test]
    fn zero_and_doubled_embedding_gradients() {
        let m = random_model(3, Activation::Tanh);
        let x = Array2::from_elem((3, 4), 0.3);
        let zero = m.backward(&x, &Array2::zeros((3, 3))).unwrap();
        assert!(zero.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let g = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let once = m.backward(&x, &g).unwrap();
        let twice = m.backward(&x, &(&g * 2.0)).unwrap();
        for (a, b) in once.blocks().iter().zip(twice.blocks()) {
            for (u, v) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(2.0 * u, *v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = random_model(4, Activation::Sigmoid);
        m.centroids = Some(ActionCentroids::new(ndarray::array![[1.0, 0.1, 1.0 / 3.0], [0.0, -2.0, 1e-300]]).unwrap());
        let text = m.to_checkpoint();
        let back = EncoderModel::from_checkpoint(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_errors_are_reported() {
        let p = Path::new("ckpt");
        assert!(matches!(EncoderModel::from_checkpoint("NOPE 1\n", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            EncoderModel::from_checkpoint("SEQOT-ENCODER 9\nactivation tanh\n", p),
            Err(Error::Parse { line: 1, .. })
        ));
        let m = random_model(1, Activation::Tanh);
        let text = m.to_checkpoint().replacen("w2 6 3", "w2 5 3", 1);
        assert!(EncoderModel::from_checkpoint(&text, p).is_err());
        let text = m.to_checkpoint().replacen("activation tanh", "activation relu", 1);
        assert!(matches!(EncoderModel::from_checkpoint(&text, p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        let m = random_model(5, Activation::Tanh);
        m.save(&path).unwrap();
        assert_eq!(EncoderModel::load(&path).unwrap(), m);
        assert!(matches!(EncoderModel::load(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}

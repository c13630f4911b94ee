//! Metric report for an encoder on a synthetic dataset.
//!
//! The first `train_split()` videos fit the probes (nearest-centroid
//! classifier, progress regressor); every metric is measured on the rest.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::metrics::{
    frame_retrieval_ap, kendall_tau, phase_classification, phase_progress, segmentation_metrics, MatchingScope, MetricReport,
};
use crate::priors::FeatureSequence;
use crate::seg::{decode_segmentation, init_centroids_kmeans, seg_pseudo_labels, SegConfig};
use crate::synth::SynthDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub scope: MatchingScope,
    pub fractions: Vec<f64>,
    pub ap_ks: Vec<usize>,
    pub seed: u64,
    pub seg: SegConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scope: MatchingScope::FullDataset,
            fractions: vec![0.1, 0.5, 1.0],
            ap_ks: vec![5, 10, 15],
            seed: 0,
            seg: SegConfig::default(),
        }
    }
}

/// Report plus the per-item data behind it.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// `(a, b, tau)` for each held-out pair.
    pub pair_taus: Vec<(usize, usize, f64)>,
    /// Nearest-neighbour match in `b` for each frame of `a`, per held-out pair.
    pub matches: Vec<Vec<usize>>,
    /// Predicted action per frame for each held-out video.
    pub segmentation: Vec<Vec<usize>>,
    pub test_videos: Vec<usize>,
}

/// Embeddings of every video (raw features when `model` is `None`).
pub fn embed_all(model: Option<&EncoderModel>, ds: &SynthDataset) -> Result<Vec<FeatureSequence>> {
    ds.videos
        .iter()
        .map(|v| match model {
            Some(m) => m.encode(&v.features),
            None => Ok(v.features.clone()),
        })
        .collect()
}

fn stack(seqs: &[&FeatureSequence]) -> Array2<f64> {
    let views: Vec<_> = seqs.iter().map(|s| s.frames().view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal embedding widths")
}

/// For each row of `a`, the index of the Euclidean-nearest row of `b`.
pub fn nearest_neighbours(a: &Array2<f64>, b: &Array2<f64>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (j, y) in b.rows().into_iter().enumerate() {
                let d: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

/// Kendall's tau of nearest-neighbour matches; a constant match sequence
/// counts as 0.
pub fn nn_tau(a: &Array2<f64>, b: &Array2<f64>) -> (f64, Vec<usize>) {
    let nn = nearest_neighbours(a, b);
    let pairs: Vec<(usize, usize)> = nn.iter().copied().enumerate().collect();
    (kendall_tau(&pairs).unwrap_or(0.0), nn)
}

pub fn evaluate(model: Option<&EncoderModel>, ds: &SynthDataset, opts: &EvalOptions) -> Result<Evaluation> {
    let emb = embed_all(model, ds)?;
    evaluate_embeddings(&emb, model.and_then(|m| m.centroids.as_ref()), ds, opts)
}

pub fn evaluate_embeddings(
    emb: &[FeatureSequence],
    centroids: Option<&crate::seg::ActionCentroids>,
    ds: &SynthDataset,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if emb.len() != ds.videos.len() || emb.is_empty() {
        return Err(Error::dim("one embedding sequence per video is required"));
    }
    let split = ds.train_split();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = if split < ds.videos.len() {
        ((0..split).collect(), (split..ds.videos.len()).collect())
    } else {
        ((0..split).collect(), (0..split).collect())
    };

    let mut pair_taus = Vec::new();
    let mut matches = Vec::new();
    let test_pairs: Vec<_> = if split < ds.videos.len() {
        ds.test_pairs().collect()
    } else {
        ds.pairs.iter().collect()
    };
    for p in test_pairs {
        let (tau, nn) = nn_tau(emb[p.a].frames(), emb[p.b].frames());
        pair_taus.push((p.a, p.b, tau));
        matches.push(nn);
    }
    let kendall = if pair_taus.is_empty() {
        0.0
    } else {
        pair_taus.iter().map(|t| t.2).sum::<f64>() / pair_taus.len() as f64
    };

    let train_seqs: Vec<&FeatureSequence> = train_idx.iter().map(|&i| &emb[i]).collect();
    let test_seqs: Vec<&FeatureSequence> = test_idx.iter().map(|&i| &emb[i]).collect();
    let train_x = stack(&train_seqs);
    let test_x = stack(&test_seqs);
    let train_labels: Vec<usize> = train_idx.iter().flat_map(|&i| ds.videos[i].labels.iter().copied()).collect();
    let test_labels: Vec<usize> = test_idx.iter().flat_map(|&i| ds.videos[i].labels.iter().copied()).collect();

    let mut acc_at = BTreeMap::new();
    for &f in &opts.fractions {
        let acc = phase_classification(train_x.view(), &train_labels, test_x.view(), &test_labels, f, opts.seed)?;
        acc_at.insert(format!("{f}"), acc);
    }

    let train_progress: Vec<f64> = train_idx.iter().flat_map(|&i| ds.videos[i].progress.iter().copied()).collect();
    let held_out: Vec<_> = test_idx
        .iter()
        .map(|&i| (emb[i].frames().view(), ds.videos[i].progress.as_slice()))
        .collect();
    let progress_r2 = phase_progress(train_x.view(), &train_progress, &held_out)?;

    let mut ap_at = BTreeMap::new();
    for &k in &opts.ap_ks {
        let mut total = 0.0;
        let mut count = 0;
        for (qi, &v) in test_idx.iter().enumerate() {
            let others: Vec<&FeatureSequence> = test_idx.iter().enumerate().filter(|(j, _)| *j != qi).map(|(_, &i)| &emb[i]).collect();
            if others.is_empty() {
                continue;
            }
            let gallery = stack(&others);
            let gallery_labels: Vec<usize> = test_idx
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != qi)
                .flat_map(|(_, &i)| ds.videos[i].labels.iter().copied())
                .collect();
            if gallery.nrows() < k {
                continue;
            }
            total += frame_retrieval_ap(emb[v].frames().view(), &ds.videos[v].labels, gallery.view(), &gallery_labels, k)?;
            count += 1;
        }
        ap_at.insert(k.to_string(), if count > 0 { total / count as f64 } else { 0.0 });
    }

    let n_classes = ds.n_classes();
    let fitted;
    let centroids = match centroids {
        Some(c) if c.k() == n_classes => c,
        _ => {
            fitted = init_centroids_kmeans(&test_seqs.iter().map(|s| (*s).clone()).collect::<Vec<_>>(), n_classes, opts.seed)?;
            &fitted
        }
    };
    let segmentation = test_seqs
        .iter()
        .map(|s| Ok(decode_segmentation(seg_pseudo_labels(s, centroids, &opts.seg)?.0.values())))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<Vec<usize>> = test_idx.iter().map(|&i| ds.videos[i].labels.clone()).collect();
    let seg = segmentation_metrics(&segmentation, &gt, n_classes, opts.scope)?;

    let report = MetricReport {
        acc_at,
        progress_r2,
        kendall_tau: kendall,
        ap_at,
        mof: seg.mof,
        f1: seg.f1,
        miou: seg.miou,
    };
    report.validate()?;
    Ok(Evaluation {
        report,
        pair_taus,
        matches,
        segmentation,
        test_videos: test_idx,
    })
}

//! Alignment, representation and segmentation metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RIDGE: f64 = 1e-6;

/// Kendall's tau-b of the `j` sequence ordered by `i`.
pub fn kendall_tau(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Undefined(format!("kendall tau needs at least 2 pairs, got {}", pairs.len())));
    }
    let (mut concordant, mut discordant, mut ties_i, mut ties_j) = (0i64, 0i64, 0i64, 0i64);
    for a in 0..pairs.len() {
        for b in a + 1..pairs.len() {
            let di = (pairs[a].0 as i64 - pairs[b].0 as i64).signum();
            let dj = (pairs[a].1 as i64 - pairs[b].1 as i64).signum();
            match (di, dj) {
                (0, 0) => {
                    ties_i += 1;
                    ties_j += 1;
                }
                (0, _) => ties_i += 1,
                (_, 0) => ties_j += 1,
                _ if di == dj => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (pairs.len() * (pairs.len() - 1) / 2) as i64;
    let denom = (((n0 - ties_i) * (n0 - ties_j)) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Undefined("kendall tau is undefined when one side is constant".into()));
    }
    Ok((concordant - discordant) as f64 / denom)
}

fn centroids_by_class(emb: ArrayView2<f64>, labels: &[usize], rows: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for &r in rows {
        let entry = sums.entry(labels[r]).or_insert_with(|| (vec![0.0; emb.ncols()], 0));
        for (s, v) in entry.0.iter_mut().zip(emb.row(r)) {
            *s += v;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Nearest-class-centroid accuracy on `test` after fitting on the first
/// `ceil(fraction * n_train)` training frames of a seeded shuffle.
///
/// Classes without any selected training frame cannot be predicted.
pub fn phase_classification(
    train: ArrayView2<f64>,
    train_labels: &[usize],
    test: ArrayView2<f64>,
    test_labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() {
        return Err(Error::dim("embeddings and labels differ in length"));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::dim("train and test embeddings differ in dimension"));
    }
    if train.nrows() == 0 || test.nrows() == 0 {
        return Err(Error::Undefined("phase classification needs train and test frames".into()));
    }
    let mut order: Vec<usize> = (0..train.nrows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = ((fraction * train.nrows() as f64).ceil() as usize).clamp(1, train.nrows());
    let centroids = centroids_by_class(train, train_labels, &order[..take]);
    let missing: BTreeSet<usize> = test_labels.iter().filter(|l| !centroids.contains_key(l)).copied().collect();
    if !missing.is_empty() {
        log::warn!("classes {missing:?} have no training frames at fraction {fraction}; skipped");
    }
    let correct = test
        .rows()
        .into_iter()
        .zip(test_labels)
        .filter(|(row, &label)| {
            let best = centroids
                .iter()
                .map(|(c, mu)| (c, row.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .fold(None, |acc: Option<(usize, f64)>, (c, d)| match acc {
                    Some((_, bd)) if bd <= d => acc,
                    _ => Some((*c, d)),
                });
            best.map(|(c, _)| c) == Some(label)
        })
        .count();
    Ok(correct as f64 / test.nrows() as f64)
}

/// Linear regressor with intercept fitted by least squares.
#[derive(Clone, Debug)]
pub struct LinearRegressor {
    weights: DVector<f64>,
}

impl LinearRegressor {
    pub fn fit(x: ArrayView2<f64>, y: &[f64]) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::dim("regression inputs and targets differ in length"));
        }
        let d = x.ncols() + 1;
        let design = DMatrix::from_fn(x.nrows(), d, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
        let gram = design.transpose() * &design;
        let rhs = design.transpose() * DVector::from_column_slice(y);
        let weights = match gram.clone().cholesky() {
            Some(ch) if ch.l().diagonal().iter().all(|v| *v > 1e-10 * gram.diagonal().max().max(1.0).sqrt()) => ch.solve(&rhs),
            _ => {
                log::warn!("rank-deficient progress design; using ridge {RIDGE}");
                let ridge = gram + DMatrix::identity(d, d) * RIDGE;
                ridge
                    .cholesky()
                    .ok_or_else(|| Error::Numerical {
                        iteration: 0,
                        message: "ridge system is not positive definite".into(),
                    })?
                    .solve(&rhs)
            }
        };
        Ok(Self { weights })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| self.weights[0] + r.iter().zip(self.weights.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

/// Coefficient of determination; constant targets give 0.
pub fn r_squared(pred: &[f64], target: &[f64]) -> f64 {
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot <= 1e-15 {
        return 0.0;
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    1.0 - ss_res / ss_tot
}

/// Fits on the training frames and averages R^2 over the held-out videos.
pub fn phase_progress(
    train: ArrayView2<f64>,
    train_targets: &[f64],
    test_videos: &[(ArrayView2<f64>, &[f64])],
) -> Result<f64> {
    if train_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::domain("progress targets must lie in [0, 1]"));
    }
    if test_videos.is_empty() {
        return Err(Error::Undefined("no held-out videos".into()));
    }
    let reg = LinearRegressor::fit(train, train_targets)?;
    let total: f64 = test_videos
        .iter()
        .map(|(x, y)| r_squared(&reg.predict(*x), y))
        .sum();
    Ok(total / test_videos.len() as f64)
}

fn unit(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Mean over queries of the fraction of the `k` cosine-nearest gallery
/// frames that share the query label. Ties keep gallery order.
pub fn frame_retrieval_ap(
    query: ArrayView2<f64>,
    query_labels: &[usize],
    gallery: ArrayView2<f64>,
    gallery_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if gallery.nrows() < k || k == 0 {
        return Err(Error::config(format!("gallery of {} frames cannot serve top-{k}", gallery.nrows())));
    }
    if query.nrows() != query_labels.len() || gallery.nrows() != gallery_labels.len() {
        return Err(Error::dim("embeddings and labels differ in length"));
    }
    if query.nrows() == 0 {
        return Err(Error::Undefined("no query frames".into()));
    }
    let sims = unit(query).dot(&unit(gallery).t());
    let mut total = 0.0;
    let mut idx: Vec<usize> = (0..gallery.nrows()).collect();
    for (q, row) in sims.rows().into_iter().enumerate() {
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let hits = idx[..k].iter().filter(|&&g| gallery_labels[g] == query_labels[q]).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / query.nrows() as f64)
}

/// Minimum-cost assignment value via the O(n^3) shortest augmenting path
/// method; returns `(row -> column, cost)`.
fn hungarian_core(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (assign, total)
}

/// Minimum-cost perfect matching of a square cost matrix, as `row -> column`.
/// Among optimal matchings the lexicographically smallest is returned.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::dim(format!("hungarian_match needs a square cost, got {:?}", cost.dim())));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("cost entries must be finite"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (_, best) = hungarian_core(cost);
    let scale = cost.iter().fold(1.0f64, |a, v| a.max(v.abs())) * n as f64;
    let tol = 1e-9 * scale;
    // Fix rows one at a time to the smallest column that keeps the optimum.
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    let mut fixed_cost = 0.0;
    let mut out = vec![0; n];
    while let Some(&row) = rows.first() {
        let rest_rows = &rows[1..];
        let mut chosen = None;
        for (ci, &col) in cols.iter().enumerate() {
            let rest_cols: Vec<usize> = cols.iter().enumerate().filter(|(k, _)| *k != ci).map(|(_, &c)| c).collect();
            let sub_cost = if rest_rows.is_empty() {
                0.0
            } else {
                let sub = Array2::from_shape_fn((rest_rows.len(), rest_cols.len()), |(a, b)| cost[[rest_rows[a], rest_cols[b]]]);
                hungarian_core(&sub).1
            };
            if fixed_cost + cost[[row, col]] + sub_cost <= best + tol {
                chosen = Some(ci);
                break;
            }
        }
        let ci = chosen.expect("some column keeps the optimum");
        out[row] = cols[ci];
        fixed_cost += cost[[row, cols[ci]]];
        cols.remove(ci);
        rows.remove(0);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchingScope {
    FullDataset,
    PerVideo,
}

impl FromStr for MatchingScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-dataset" => Ok(Self::FullDataset),
            "per-video" => Ok(Self::PerVideo),
            other => Err(Error::config(format!("unknown matching scope '{other}' (expected per-video or full-dataset)"))),
        }
    }
}

impl std::fmt::Display for MatchingScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FullDataset => "full-dataset",
            Self::PerVideo => "per-video",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub mof: f64,
    pub f1: f64,
    pub miou: f64,
}

/// Renumbers cluster ids by first appearance so that tie-breaking between
/// equally good matchings does not depend on the original ids.
fn canonical(pred: &[&[usize]], k: usize) -> Vec<Vec<usize>> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &c in pred.iter().flat_map(|p| p.iter()) {
        if map[c] == usize::MAX {
            map[c] = next;
            next += 1;
        }
    }
    pred.iter().map(|p| p.iter().map(|&c| map[c]).collect()).collect()
}

/// Maps predicted cluster ids onto ground-truth classes by maximum overlap.
fn match_clusters(pred: &[&[usize]], gt: &[&[usize]], k: usize) -> Result<Vec<usize>> {
    let mut overlap = Array2::<f64>::zeros((k, k));
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.iter().zip(g.iter()) {
            overlap[[a, b]] += 1.0;
        }
    }
    hungarian_match(&overlap.mapv(|v| -v))
}

fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            out.push((labels[start], start, i));
            start = i;
        }
    }
    out
}

/// Per-class segment counts `(true positives, predicted, ground truth)` at IoU >= 0.5.
fn segment_counts(pred: &[usize], gt: &[usize], counts: &mut BTreeMap<usize, (usize, usize, usize)>) {
    let pred_runs = runs(pred);
    let gt_runs = runs(gt);
    for &(c, _, _) in &gt_runs {
        counts.entry(c).or_default().2 += 1;
    }
    let mut used = vec![false; gt_runs.len()];
    for &(c, s, e) in &pred_runs {
        let entry = counts.entry(c).or_default();
        entry.1 += 1;
        let best = gt_runs
            .iter()
            .enumerate()
            .filter(|(g, run)| run.0 == c && !used[*g])
            .map(|(g, &(_, gs, ge))| {
                let inter = e.min(ge).saturating_sub(s.max(gs));
                let union = e.max(ge) - s.min(gs);
                (g, inter as f64 / union as f64)
            })
            .fold(None, |acc: Option<(usize, f64)>, (g, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((g, iou)),
            });
        if let Some((g, iou)) = best {
            if iou >= 0.5 {
                used[g] = true;
                entry.0 += 1;
            }
        }
    }
}

/// MoF, mean segment F1 and mIoU over classes seen in either labelling.
fn scores(pred: &[&[usize]], gt: &[&[usize]], mapping: &[usize], k: usize) -> (usize, usize, f64, f64) {
    let mut correct = 0;
    let mut frames = 0;
    let mut inter = vec![0usize; k];
    let mut union = vec![0usize; k];
    let mut counts = BTreeMap::new();
    for (p, g) in pred.iter().zip(gt) {
        let mapped: Vec<usize> = p.iter().map(|&c| mapping[c]).collect();
        for (&a, &b) in mapped.iter().zip(g.iter()) {
            frames += 1;
            if a == b {
                correct += 1;
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
        segment_counts(&mapped, g, &mut counts);
    }
    let present: Vec<usize> = (0..k).filter(|&c| union[c] > 0).collect();
    let miou = present.iter().map(|&c| inter[c] as f64 / union[c] as f64).sum::<f64>() / present.len() as f64;
    let f1 = present
        .iter()
        .map(|c| {
            let (tp, np, ng) = counts.get(c).copied().unwrap_or_default();
            let precision = if np > 0 { tp as f64 / np as f64 } else { 0.0 };
            let recall = if ng > 0 { tp as f64 / ng as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / present.len() as f64;
    (correct, frames, f1, miou)
}

/// Segmentation scores after Hungarian matching of cluster ids to classes.
///
/// `PerVideo` matches each video separately; its MoF is frame-weighted and
/// its F1 and mIoU are averaged over videos.
pub fn segmentation_metrics(
    pred: &[Vec<usize>],
    gt: &[Vec<usize>],
    n_classes: usize,
    scope: MatchingScope,
) -> Result<SegmentationScores> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::dim("prediction and ground-truth video counts differ or are zero"));
    }
    for (v, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::dim(format!("video {v}: {} predicted vs {} ground-truth frames", p.len(), g.len())));
        }
        if let Some(l) = p.iter().chain(g.iter()).find(|&&l| l >= n_classes) {
            return Err(Error::domain(format!("video {v}: label {l} outside [0, {n_classes})")));
        }
    }
    if pred.iter().all(Vec::is_empty) {
        return Err(Error::Undefined("no frames to score".into()));
    }
    let raw: Vec<&[usize]> = pred.iter().map(Vec::as_slice).collect();
    let g: Vec<&[usize]> = gt.iter().map(Vec::as_slice).collect();
    match scope {
        MatchingScope::FullDataset => {
            let renamed = canonical(&raw, n_classes);
            let p: Vec<&[usize]> = renamed.iter().map(Vec::as_slice).collect();
            let mapping = match_clusters(&p, &g, n_classes)?;
            let (correct, frames, f1, miou) = scores(&p, &g, &mapping, n_classes);
            Ok(SegmentationScores {
                mof: correct as f64 / frames as f64,
                f1,
                miou,
            })
        }
        MatchingScope::PerVideo => {
            let (mut correct, mut frames, mut f1, mut miou, mut videos) = (0, 0, 0.0, 0.0, 0);
            for (pv, gv) in raw.iter().zip(&g).filter(|(pv, _)| !pv.is_empty()) {
                let renamed = canonical(&[pv], n_classes);
                let pv = renamed[0].as_slice();
                let mapping = match_clusters(&[pv], &[gv], n_classes)?;
                let (c, n, f, m) = scores(&[pv], &[gv], &mapping, n_classes);
                correct += c;
                frames += n;
                f1 += f;
                miou += m;
                videos += 1;
            }
            Ok(SegmentationScores {
                mof: correct as f64 / frames as f64,
                f1: f1 / videos as f64,
                miou: miou / videos as f64,
            })
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_at: BTreeMap<String, f64>,
    pub progress_r2: f64,
    pub kendall_tau: f64,
    pub ap_at: BTreeMap<String, f64>,
    pub mof: f64,
    pub f1: f64,
    pub miou: f64,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::domain(format!("{name} = {v} outside [0, 1]")))
            }
        };
        for (k, v) in self.acc_at.iter().chain(self.ap_at.iter()) {
            unit(k, *v)?;
        }
        unit("mof", self.mof)?;
        unit("f1", self.f1)?;
        unit("miou", self.miou)?;
        if !(-1.0..=1.0).contains(&self.kendall_tau) {
            return Err(Error::domain(format!("kendall_tau = {} outside [-1, 1]", self.kendall_tau)));
        }
        if !self.progress_r2.is_finite() || self.progress_r2 > 1.0 {
            return Err(Error::domain(format!("progress_r2 = {} is invalid", self.progress_r2)));
        }
        Ok(())
    }
}

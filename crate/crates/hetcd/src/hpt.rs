//! Homogeneous pixel transformation: K-nearest-neighbour kernel regression
//! with exponential distance weighting.
//!
//! A lazy learner: fitting just stores the training set. For each query the
//! K nearest training inputs are found by exact exhaustive scan, their
//! distances are normalised (per query, or against the batch-wide maximum)
//! and weighted by e^{−γd}; the prediction is the weighted sum of the
//! neighbour targets, optionally normalised to a convex combination.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::TrainingSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNorm {
    /// Divide each query's neighbour distances by that query's maximum.
    Relative,
    /// Divide by the maximum over all query–neighbour distances in the
    /// prediction batch (two-phase prediction).
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HptHyper {
    pub neighbours: usize,
    pub kernel_width: f64,
    pub distance_norm: DistanceNorm,
    /// Divide the weights by their sum, making the prediction a convex
    /// combination of neighbour targets.
    pub weight_norm: bool,
}

impl Default for HptHyper {
    fn default() -> Self {
        HptHyper {
            neighbours: 300,
            kernel_width: 100.0,
            distance_norm: DistanceNorm::Absolute,
            weight_norm: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HptModel {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub rows: usize,
    pub hyper: HptHyper,
}

pub fn hpt_fit(t: &TrainingSet, h: &HptHyper) -> Result<HptModel> {
    if h.neighbours == 0 {
        return Err(Error::Parameter("neighbours must be >= 1".into()));
    }
    if h.neighbours > t.len() {
        return Err(Error::Parameter(format!(
            "K = {} exceeds the {} training rows",
            h.neighbours,
            t.len()
        )));
    }
    if h.kernel_width < 0.0 {
        return Err(Error::Parameter("kernel_width must be >= 0".into()));
    }
    Ok(HptModel {
        inputs: t.inputs().to_vec(),
        targets: t.targets().to_vec(),
        input_dim: t.input_dim(),
        output_dim: t.output_dim(),
        rows: t.len(),
        hyper: h.clone(),
    })
}

impl HptModel {
    fn input_row(&self, m: usize) -> &[f64] {
        &self.inputs[m * self.input_dim..(m + 1) * self.input_dim]
    }

    fn target_row(&self, m: usize) -> &[f64] {
        &self.targets[m * self.output_dim..(m + 1) * self.output_dim]
    }
}

/// The K smallest Euclidean distances to the training rows, ascending; ties
/// broken by lower training-row index.
pub fn knn(x: &[f64], model: &HptModel) -> Result<Vec<(usize, f64)>> {
    if x.len() != model.input_dim {
        return Err(Error::Dimension(format!(
            "query has {} channels, model expects {}",
            x.len(),
            model.input_dim
        )));
    }
    let mut all: Vec<(usize, f64)> = (0..model.rows)
        .map(|m| {
            let mut d2 = 0.0;
            for (a, b) in x.iter().zip(model.input_row(m)) {
                let d = a - b;
                d2 += d * d;
            }
            (m, d2.sqrt())
        })
        .collect();
    let k = model.hyper.neighbours;
    all.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

/// Distance normalisation of Eq.-(12) style: relative divides by this
/// query's max, absolute by the supplied batch-wide max. All-zero inputs
/// (duplicate data) normalise to all zeros.
pub fn normalize_distances(d: &[f64], mode: DistanceNorm, global_max: f64) -> Vec<f64> {
    let denom = match mode {
        DistanceNorm::Relative => d.iter().cloned().fold(0.0f64, f64::max),
        DistanceNorm::Absolute => global_max,
    };
    if denom > 0.0 {
        d.iter().map(|v| v / denom).collect()
    } else {
        vec![0.0; d.len()]
    }
}

fn weighted_sum(model: &HptModel, neigh: &[(usize, f64)], d_norm: &[f64]) -> Vec<f64> {
    let gamma = model.hyper.kernel_width;
    // when weights are normalised anyway, shifting by the minimum distance
    // cancels in the ratio and avoids underflow at large γ
    let shift = if model.hyper.weight_norm {
        d_norm.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    let mut out = vec![0.0; model.output_dim];
    let mut wsum = 0.0;
    for ((&(idx, _), &d), _) in neigh.iter().zip(d_norm).zip(0..) {
        let w = (-gamma * (d - shift)).exp();
        wsum += w;
        for (o, &y) in out.iter_mut().zip(model.target_row(idx)) {
            *o += w * y;
        }
    }
    if model.hyper.weight_norm && wsum > 0.0 {
        for o in &mut out {
            *o /= wsum;
        }
    }
    out
}

/// Predicts a single query. Under absolute normalisation the batch is just
/// this query, so the normalisation coincides with the relative one.
pub fn hpt_predict(x: &[f64], model: &HptModel) -> Result<Vec<f64>> {
    let neigh = knn(x, model)?;
    let d: Vec<f64> = neigh.iter().map(|&(_, d)| d).collect();
    let global_max = d.iter().cloned().fold(0.0f64, f64::max);
    let d_norm = normalize_distances(&d, model.hyper.distance_norm, global_max);
    Ok(weighted_sum(model, &neigh, &d_norm))
}

/// Predicts a batch of queries (row-major, `input_dim` per row). Absolute
/// normalisation first scans the whole batch for the maximum
/// query–neighbour distance, then weights every query against it.
pub fn hpt_predict_batch(xs: &[f64], model: &HptModel) -> Result<Vec<f64>> {
    if xs.len() % model.input_dim != 0 {
        return Err(Error::Dimension("ragged query batch".into()));
    }
    let n = xs.len() / model.input_dim;
    let neighbours: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| knn(&xs[i * model.input_dim..(i + 1) * model.input_dim], model))
        .collect::<Result<_>>()?;
    let global_max = neighbours
        .iter()
        .flat_map(|nb| nb.iter().map(|&(_, d)| d))
        .fold(0.0f64, f64::max);
    let mut out = vec![0.0; n * model.output_dim];
    out.par_chunks_mut(model.output_dim)
        .zip(neighbours.par_iter())
        .for_each(|(chunk, neigh)| {
            let d: Vec<f64> = neigh.iter().map(|&(_, d)| d).collect();
            let d_norm = normalize_distances(&d, model.hyper.distance_norm, global_max);
            chunk.copy_from_slice(&weighted_sum(model, neigh, &d_norm));
        });
    Ok(out)
}

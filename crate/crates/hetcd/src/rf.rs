//! Random-forest multi-output regression.
//!
//! Each tree is grown on a size-M bootstrap of the training set with a
//! random feature subset drawn at every node. A node is split only when
//! both children would keep at least `min_leaf` rows; leaves store the mean
//! target vector of their rows plus the row ids themselves, so payloads can
//! be recomputed and out-of-bag predictions validated. Per-tree RNG streams
//! are derived from the master seed by tree index, which makes construction
//! independent of thread count and scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::TrainingSet;
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Among the sampled features, pick the feature/threshold pair that
    /// minimizes the children's summed per-channel target variance,
    /// scanning midpoints of sorted distinct values.
    VarianceBest,
    /// One uniform random threshold per sampled feature; the best-scoring
    /// valid pair wins.
    RandomThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfHyper {
    pub trees: usize,
    pub features_per_node: usize,
    pub min_leaf: usize,
    pub split_strategy: SplitStrategy,
}

impl Default for RfHyper {
    fn default() -> Self {
        RfHyper {
            trees: 128,
            features_per_node: 0, // 0 means ⌊P/3⌋, resolved at fit time
            min_leaf: 5,
            split_strategy: SplitStrategy::VarianceBest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRule {
    Log2,
    Third,
}

/// ⌊log₂P⌋ or ⌊P/3⌋, clamped to at least 1.
pub fn default_m(p: usize, rule: FeatureRule) -> usize {
    let m = match rule {
        FeatureRule::Log2 => (p as f64).log2().floor() as usize,
        FeatureRule::Third => p / 3,
    };
    m.max(1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        /// Mean target vector of the rows that reached this leaf.
        payload: Vec<f64>,
        /// Training-row ids (with bootstrap multiplicity) in this leaf.
        rows: Vec<u32>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    /// in_bag[m] = training row m appeared in this tree's bootstrap.
    pub in_bag: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RfModel {
    pub trees: Vec<RegressionTree>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hyper: RfHyper,
}

struct TreeBuilder<'a> {
    t: &'a TrainingSet,
    m_features: usize,
    min_leaf: usize,
    strategy: SplitStrategy,
    nodes: Vec<Node>,
}

impl<'a> TreeBuilder<'a> {
    fn leaf(&mut self, rows: &[u32]) -> u32 {
        let q = self.t.output_dim();
        let mut payload = vec![0.0; q];
        for &r in rows {
            for (s, &v) in payload.iter_mut().zip(self.t.target_row(r as usize)) {
                *s += v;
            }
        }
        for s in &mut payload {
            *s /= rows.len() as f64;
        }
        self.nodes.push(Node::Leaf {
            payload,
            rows: rows.to_vec(),
        });
        (self.nodes.len() - 1) as u32
    }

    /// Children's summed squared deviation from their mean, over all output
    /// channels; computed as Σ‖y‖² − ‖Σy‖²/n per side.
    fn split_score(&self, rows: &[u32], feature: usize, threshold: f64) -> Option<f64> {
        let q = self.t.output_dim();
        let mut n_left = 0usize;
        let mut sum_left = vec![0.0; q];
        let mut sum_right = vec![0.0; q];
        let mut sq = 0.0; // total Σ‖y‖², split-independent but kept for a valid SSE
        for &r in rows {
            let x = self.t.input_row(r as usize)[feature];
            let y = self.t.target_row(r as usize);
            for (qi, &v) in y.iter().enumerate() {
                sq += v * v;
                if x <= threshold {
                    sum_left[qi] += v;
                } else {
                    sum_right[qi] += v;
                }
            }
            if x <= threshold {
                n_left += 1;
            }
        }
        let n_right = rows.len() - n_left;
        if n_left < self.min_leaf || n_right < self.min_leaf {
            return None;
        }
        let mut score = sq;
        for qi in 0..q {
            score -= sum_left[qi] * sum_left[qi] / n_left as f64;
            score -= sum_right[qi] * sum_right[qi] / n_right as f64;
        }
        Some(score)
    }

    fn build(&mut self, rows: Vec<u32>, rng: &mut impl Rng) -> u32 {
        if rows.len() < 2 * self.min_leaf {
            return self.leaf(&rows);
        }
        let p = self.t.input_dim();
        let features = rand::seq::index::sample(rng, p, self.m_features.min(p));

        // candidate (score, feature, threshold); ties resolved by lowest
        // feature index then lowest threshold
        let mut best: Option<(f64, usize, f64)> = None;
        let consider = |score: f64, f: usize, thr: f64, best: &mut Option<(f64, usize, f64)>| {
            let better = match best {
                None => true,
                Some((bs, bf, bt)) => {
                    score < *bs || (score == *bs && (f < *bf || (f == *bf && thr < *bt)))
                }
            };
            if better {
                *best = Some((score, f, thr));
            }
        };

        match self.strategy {
            SplitStrategy::VarianceBest => {
                let q = self.t.output_dim();
                let mut total_sum = vec![0.0; q];
                let mut total_sq = 0.0;
                for &r in &rows {
                    for (qi, &v) in self.t.target_row(r as usize).iter().enumerate() {
                        total_sum[qi] += v;
                        total_sq += v * v;
                    }
                }
                let mut feats: Vec<usize> = features.iter().collect();
                feats.sort_unstable();
                // one sorted prefix sweep per feature scores every midpoint
                // of consecutive distinct values in O(n log n)
                let mut order = rows.clone();
                let mut sum_left = vec![0.0; q];
                for f in feats {
                    order.sort_unstable_by(|&a, &b| {
                        self.t.input_row(a as usize)[f]
                            .total_cmp(&self.t.input_row(b as usize)[f])
                    });
                    sum_left.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..order.len() - 1 {
                        for (qi, &v) in self.t.target_row(order[i] as usize).iter().enumerate() {
                            sum_left[qi] += v;
                        }
                        let v = self.t.input_row(order[i] as usize)[f];
                        let v_next = self.t.input_row(order[i + 1] as usize)[f];
                        if v == v_next {
                            continue;
                        }
                        let n_left = i + 1;
                        let n_right = order.len() - n_left;
                        if n_left < self.min_leaf || n_right < self.min_leaf {
                            continue;
                        }
                        let mut score = total_sq;
                        for qi in 0..q {
                            let right = total_sum[qi] - sum_left[qi];
                            score -= sum_left[qi] * sum_left[qi] / n_left as f64;
                            score -= right * right / n_right as f64;
                        }
                        consider(score, f, 0.5 * (v + v_next), &mut best);
                    }
                }
            }
            SplitStrategy::RandomThreshold => {
                // thresholds must be drawn in feature-sample order for
                // determinism, independent of score evaluation order
                for f in features.iter() {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for &r in &rows {
                        let v = self.t.input_row(r as usize)[f];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    if !(hi > lo) {
                        continue;
                    }
                    let thr = rng.random_range(lo..hi);
                    if let Some(score) = self.split_score(&rows, f, thr) {
                        consider(score, f, thr, &mut best);
                    }
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(&rows);
        };
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
            .iter()
            .partition(|&&r| self.t.input_row(r as usize)[feature] <= threshold);

        let idx = self.nodes.len() as u32;
        self.nodes.push(Node::Internal {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.build(left_rows, rng);
        let right = self.build(right_rows, rng);
        if let Node::Internal {
            left: l, right: r, ..
        } = &mut self.nodes[idx as usize]
        {
            *l = left;
            *r = right;
        }
        idx
    }
}

fn build_tree(t: &TrainingSet, h: &RfHyper, m_features: usize, seed: u64, tree_idx: u64) -> RegressionTree {
    let mut rng = rng_for(seed, tree_idx);
    let m = t.len();
    let mut in_bag = vec![false; m];
    let mut rows = Vec::with_capacity(m);
    for _ in 0..m {
        let r = rng.random_range(0..m);
        in_bag[r] = true;
        rows.push(r as u32);
    }
    let mut builder = TreeBuilder {
        t,
        m_features,
        min_leaf: h.min_leaf,
        strategy: h.split_strategy,
        nodes: Vec::new(),
    };
    builder.build(rows, &mut rng);
    RegressionTree {
        nodes: builder.nodes,
        in_bag,
    }
}

pub fn rf_fit(t: &TrainingSet, h: &RfHyper, seed: u64) -> Result<RfModel> {
    if h.trees == 0 {
        return Err(Error::Parameter("forest needs at least one tree".into()));
    }
    if h.min_leaf == 0 {
        return Err(Error::Parameter("min_leaf must be >= 1".into()));
    }
    let m_features = if h.features_per_node == 0 {
        default_m(t.input_dim(), FeatureRule::Third)
    } else {
        h.features_per_node
    };
    if m_features > t.input_dim() {
        return Err(Error::Parameter(format!(
            "features_per_node {} exceeds input dimension {}",
            m_features,
            t.input_dim()
        )));
    }
    let trees: Vec<RegressionTree> = (0..h.trees)
        .into_par_iter()
        .map(|i| build_tree(t, h, m_features, seed, i as u64))
        .collect();
    Ok(RfModel {
        trees,
        input_dim: t.input_dim(),
        output_dim: t.output_dim(),
        hyper: h.clone(),
    })
}

fn tree_leaf<'a>(tree: &'a RegressionTree, x: &[f64]) -> &'a Node {
    let mut idx = 0usize;
    loop {
        match &tree.nodes[idx] {
            Node::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                idx = if x[*feature] <= *threshold {
                    *left as usize
                } else {
                    *right as usize
                };
            }
            leaf => return leaf,
        }
    }
}

pub fn tree_predict<'a>(tree: &'a RegressionTree, x: &[f64]) -> &'a [f64] {
    match tree_leaf(tree, x) {
        Node::Leaf { payload, .. } => payload,
        _ => unreachable!(),
    }
}

/// Mean of the T per-tree leaf payloads, summed in tree order.
pub fn rf_predict(model: &RfModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim {
        return Err(Error::Dimension(format!(
            "RF input has {} channels, model expects {}",
            x.len(),
            model.input_dim
        )));
    }
    let mut out = vec![0.0; model.output_dim];
    for tree in &model.trees {
        for (o, &v) in out.iter_mut().zip(tree_predict(tree, x)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= model.trees.len() as f64;
    }
    Ok(out)
}

/// Mean squared Euclidean error of each row predicted only by trees whose
/// bootstrap excluded it. `None` when every row is in every bootstrap.
pub fn oob_error(model: &RfModel, t: &TrainingSet) -> Result<Option<f64>> {
    if t.input_dim() != model.input_dim || t.output_dim() != model.output_dim {
        return Err(Error::Dimension("RF model dims do not match data".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for m in 0..t.len() {
        let x = t.input_row(m);
        let mut pred = vec![0.0; model.output_dim];
        let mut n_trees = 0usize;
        for tree in &model.trees {
            if tree.in_bag[m] {
                continue;
            }
            for (p, &v) in pred.iter_mut().zip(tree_predict(tree, x)) {
                *p += v;
            }
            n_trees += 1;
        }
        if n_trees == 0 {
            continue;
        }
        let y = t.target_row(m);
        let mut err = 0.0;
        for (p, &yv) in pred.iter().zip(y) {
            let e = p / n_trees as f64 - yv;
            err += e * e;
        }
        total += err;
        counted += 1;
    }
    if counted == 0 {
        Ok(None)
    } else {
        Ok(Some(total / counted as f64))
    }
}

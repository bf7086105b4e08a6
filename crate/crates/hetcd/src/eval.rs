//! ROC/AUC scoring, repeated-run statistics, grid search and the
//! time-vs-AUC benchmark export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, DistanceImage, PipelineOptions};
use crate::raster::{extract_pairs, Mask, Raster, TrainingSet};
use crate::regress::{self, MethodSpec, RegressorSpec};
use crate::util::derive_seed;

/// ROC curve with its trapezoidal area. Points run from (0,0) to (1,1)
/// with monotone non-decreasing coordinates; tied scores collapse into a
/// single step, matching the pairwise ½-tie convention.
#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// (false positive rate, true positive rate), threshold descending.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Trapezoidal AUC of `scores` against a binary truth mask. Fails when the
/// truth contains a single class, where the ROC is undefined.
pub fn roc_auc(scores: &DistanceImage, truth: &Mask) -> Result<RocResult> {
    if scores.height() != truth.height() || scores.width() != truth.width() {
        return Err(Error::Dimension("scores and truth differ in shape".into()));
    }
    let n_pos = truth.count_true();
    let n_neg = truth.values().len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty(
            "ROC undefined: truth mask holds a single class".into(),
        ));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .values()
        .iter()
        .cloned()
        .zip(truth.values().iter().cloned())
        .collect();
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < pairs.len() {
        // advance through the whole tie block at this score
        let score = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push((fpr, tpr));
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(RocResult { points, auc })
}

/// AUC or `None` when undefined (single-class truth).
pub fn try_auc(scores: &DistanceImage, truth: &Mask) -> Option<f64> {
    roc_auc(scores, truth).ok().map(|r| r.auc)
}

/// Aggregate of a repeated-run benchmark. Standard deviations are
/// population (divide by n) statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub method: String,
    pub hyperparams: String,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub time_mean_s: f64,
    pub time_std_s: f64,
    pub runs: usize,
}

/// One pipeline execution inside a benchmark or grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub hyperparams: String,
    pub run: usize,
    pub auc: f64,
    pub elapsed_s: f64,
}

fn hyperparams_json(method: &MethodSpec) -> String {
    match method {
        MethodSpec::Gp(h) => serde_json::to_string(h),
        MethodSpec::Svr(h) => serde_json::to_string(h),
        MethodSpec::Rf(h) => serde_json::to_string(h),
        MethodSpec::Hpt(h) => serde_json::to_string(h),
    }
    .unwrap_or_default()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the full pipeline `n_runs` times, each with a fresh training mask
/// drawn by `mask_sampler` from the run's derived seed, and aggregates AUC
/// and regression wall-clock statistics.
pub fn repeated_runs(
    x: &Raster,
    y: &Raster,
    truth: &Mask,
    spec: &RegressorSpec,
    n_runs: usize,
    opts: &PipelineOptions,
    mut mask_sampler: impl FnMut(u64) -> Result<Mask>,
) -> Result<(BenchmarkRecord, Vec<RunRecord>)> {
    if n_runs == 0 {
        return Err(Error::Parameter("n_runs must be >= 1".into()));
    }
    let mut aucs = Vec::with_capacity(n_runs);
    let mut times = Vec::with_capacity(n_runs);
    let mut runs = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let run_seed = derive_seed(spec.seed, run as u64);
        let mask = mask_sampler(run_seed)?;
        let run_spec = RegressorSpec {
            method: spec.method.clone(),
            seed: run_seed,
        };
        let result = run_pipeline(x, y, &mask, &run_spec, opts)?;
        let auc = roc_auc(&result.score, truth)?.auc;
        aucs.push(auc);
        times.push(result.timings.total());
        runs.push(RunRecord {
            method: spec.method.name().to_string(),
            hyperparams: hyperparams_json(&spec.method),
            run,
            auc,
            elapsed_s: result.timings.total(),
        });
    }
    let (auc_mean, auc_std) = mean_std(&aucs);
    let (time_mean_s, time_std_s) = mean_std(&times);
    Ok((
        BenchmarkRecord {
            method: spec.method.name().to_string(),
            hyperparams: hyperparams_json(&spec.method),
            auc_mean,
            auc_std,
            time_mean_s,
            time_std_s,
            runs: n_runs,
        },
        runs,
    ))
}

/// How grid points are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// k-fold cross-validation MSE on the training pairs (k = 5).
    CrossValidation,
    /// Out-of-bag MSE; random-forest specs only.
    Oob,
    /// Pipeline AUC against a supplied validation ground truth (maximised).
    AucOnValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub method: String,
    pub hyperparams: String,
    /// Value of the selection criterion; lower is better.
    pub criterion: f64,
    pub elapsed_s: f64,
}

fn subset(t: &TrainingSet, rows: &[usize]) -> Result<TrainingSet> {
    let mut inputs = Vec::with_capacity(rows.len() * t.input_dim());
    let mut targets = Vec::with_capacity(rows.len() * t.output_dim());
    let mut idx = Vec::with_capacity(rows.len());
    for &r in rows {
        inputs.extend_from_slice(t.input_row(r));
        targets.extend_from_slice(t.target_row(r));
        idx.push(t.pixel_indices()[r]);
    }
    TrainingSet::new(inputs, targets, t.input_dim(), t.output_dim(), idx)
}

fn cross_validation_mse(spec: &RegressorSpec, t: &TrainingSet, folds: usize) -> Result<f64> {
    let m = t.len();
    let folds = folds.min(m);
    let mut order: Vec<usize> = (0..m).collect();
    // deterministic shuffle from the spec seed
    let mut rng = crate::util::rng_for(spec.seed, 0x5eed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..folds {
        let val: Vec<usize> = order
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (i % folds == f).then_some(r))
            .collect();
        let train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (i % folds != f).then_some(r))
            .collect();
        if val.is_empty() || train.is_empty() {
            continue;
        }
        let train_set = subset(t, &train)?;
        // HPT neighbour counts above the fold size cannot fit; skip such folds
        let model = match regress::fit(spec, &train_set) {
            Ok(m) => m,
            Err(Error::Parameter(_)) => continue,
            Err(e) => return Err(e),
        };
        for &r in &val {
            let pred = model.predict(t.input_row(r))?;
            let err: f64 = pred
                .iter()
                .zip(t.target_row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += err;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Numerical("cross-validation had no usable folds".into()));
    }
    Ok(total / count as f64)
}

/// Evaluates every grid point with the selection criterion and returns the
/// index of the argmin plus all records. Ties break toward the earliest
/// grid entry.
pub fn grid_search(
    x: &Raster,
    y: &Raster,
    train_mask: &Mask,
    validation_truth: Option<&Mask>,
    grid: &[RegressorSpec],
    selection: Selection,
    opts: &PipelineOptions,
) -> Result<(usize, Vec<GridRecord>)> {
    if grid.is_empty() {
        return Err(Error::Empty("grid search over an empty grid".into()));
    }
    let pairs = extract_pairs(x, y, train_mask)?;
    let mut records = Vec::with_capacity(grid.len());
    for spec in grid {
        let start = std::time::Instant::now();
        let criterion = match selection {
            Selection::CrossValidation => cross_validation_mse(spec, &pairs, 5)?,
            Selection::Oob => match &spec.method {
                MethodSpec::Rf(h) => {
                    let model = crate::rf::rf_fit(&pairs, h, spec.seed)?;
                    crate::rf::oob_error(&model, &pairs)?.ok_or_else(|| {
                        Error::Numerical("OOB error undefined: every row in every bootstrap".into())
                    })?
                }
                _ => {
                    return Err(Error::Parameter(
                        "OOB selection applies to random-forest specs only".into(),
                    ))
                }
            },
            Selection::AucOnValidation => {
                let truth = validation_truth.ok_or_else(|| {
                    Error::Parameter("AUC selection needs a validation ground truth".into())
                })?;
                let result = run_pipeline(x, y, train_mask, spec, opts)?;
                // negated so the argmin convention still applies
                -roc_auc(&result.score, truth)?.auc
            }
        };
        records.push(GridRecord {
            method: spec.method.name().to_string(),
            hyperparams: hyperparams_json(&spec.method),
            criterion,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
    }
    let mut best = 0;
    for (i, rec) in records.iter().enumerate() {
        if rec.criterion < records[best].criterion {
            best = i;
        }
    }
    Ok((best, records))
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Writes run records as CSV (method, hyperparams, elapsed_s, auc), sorted
/// by method then elapsed time; the raw material of a time-vs-AUC scatter.
pub fn scatter_export<W: Write>(records: &[RunRecord], mut w: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("no records to export".into()));
    }
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.elapsed_s.total_cmp(&b.elapsed_s))
    });
    writeln!(w, "method,hyperparams,elapsed_s,auc")?;
    for r in sorted {
        writeln!(
            w,
            "{},{},{},{}",
            r.method,
            csv_quote(&r.hyperparams),
            r.elapsed_s,
            r.auc
        )?;
    }
    Ok(())
}

/// Parses `scatter_export` output back into (method, hyperparams,
/// elapsed_s, auc) rows.
pub fn parse_scatter_csv(text: &str) -> Result<Vec<(String, String, f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let (method, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::Format("bad scatter row".into()))?;
        let rest = rest.trim_start();
        let (hyper, tail) = if let Some(stripped) = rest.strip_prefix('"') {
            let end = stripped
                .find("\",")
                .ok_or_else(|| Error::Format("unterminated quoted field".into()))?;
            (
                stripped[..end].replace("\"\"", "\""),
                &stripped[end + 2..],
            )
        } else {
            let (h, t) = rest
                .split_once(',')
                .ok_or_else(|| Error::Format("bad scatter row".into()))?;
            (h.to_string(), t)
        };
        let (elapsed, auc) = tail
            .split_once(',')
            .ok_or_else(|| Error::Format("bad scatter row".into()))?;
        out.push((
            method.to_string(),
            hyper,
            elapsed
                .parse()
                .map_err(|_| Error::Format("bad elapsed value".into()))?,
            auc.parse().map_err(|_| Error::Format("bad auc value".into()))?,
        ));
    }
    Ok(out)
}

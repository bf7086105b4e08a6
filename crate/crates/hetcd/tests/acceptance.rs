//! Acceptance suite: one test per release criterion, each printing a
//! single `acceptance N <name>: pass|fail` line.
//!
//! Every numerical criterion is checked against an oracle that does not
//! share code with the production path: dense matrix inverses, generic
//! gradient descent, exhaustive scans, O(N²) pairwise counting, or planted
//! synthetic ground truth.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hetcd::eval::roc_auc;
use hetcd::gp::{gp_fit_fixed, log_marginal_likelihood, GpHyper, Lengthscale};
use hetcd::hpt::{hpt_fit, hpt_predict, knn, DistanceNorm, HptHyper};
use hetcd::pipeline::{
    clip_outliers, distance_image, fuse, median_filter3, normalize01, run_pipeline,
    two_way_regress, DistanceImage, PipelineOptions,
};
use hetcd::raster::subsample_mask;
use hetcd::rf::{oob_error, rf_fit, rf_predict, tree_predict, Node, RfHyper};
use hetcd::svr::{quadratic_eps_loss, svr_fit, SvrHyper};
use hetcd::synth::{generate, SensorBStyle, SynthConfig};
use hetcd::{Mask, MethodSpec, RegressorSpec, TrainingSet};

fn verdict(number: usize, name: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("acceptance {number} {name}: pass");
    } else {
        println!("acceptance {number} {name}: fail");
        panic!("criterion {number} ({name}) failed:\n{}", failures.join("\n"));
    }
}

fn random_training(
    rng: &mut ChaCha8Rng,
    m: usize,
    p: usize,
    q: usize,
    scale: f64,
) -> TrainingSet {
    let inputs: Vec<f64> = (0..m * p).map(|_| rng.random_range(-scale..scale)).collect();
    let targets: Vec<f64> = (0..m * q).map(|_| rng.random_range(-scale..scale)).collect();
    let idx = (0..m).map(|i| (0u32, i as u32)).collect();
    TrainingSet::new(inputs, targets, p, q, idx).unwrap()
}

fn dist(values: Vec<f64>) -> DistanceImage {
    let n = values.len();
    DistanceImage::new(1, n, values).unwrap()
}

// --- criterion 1 -----------------------------------------------------------

/// RBF kernel recomputed from the formula, independent of the library path.
fn oracle_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, sf2: f64, ell: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for c in 0..a.ncols() {
            let d = a[(i, c)] - b[(j, c)];
            s += d * d;
        }
        sf2 * (-0.5 * s / (ell * ell)).exp()
    })
}

#[test]
fn criterion_1_gp_posterior_and_gradient() {
    let start = std::time::Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    for case in 0..50 {
        let m = rng.random_range(2..=20);
        let p = rng.random_range(1..=4);
        let q = rng.random_range(1..=4);
        let t = random_training(&mut rng, m, p, q, 2.0);

        let ell = rng.random_range(0.5..2.0);
        let sf2 = rng.random_range(0.5..2.0);
        let hyper = GpHyper {
            signal_variance: sf2,
            lengthscale: Lengthscale::Isotropic(ell),
            noise_variance: 1e-2,
            ..GpHyper::default()
        };

        // posterior mean oracle: K_* (K + sigma_n^2 I)^-1 Y by dense inverse
        let x = DMatrix::from_row_slice(m, p, t.inputs());
        let y = DMatrix::from_row_slice(m, q, t.targets());
        let n_test = 5;
        let xs = DMatrix::from_fn(n_test, p, |_, _| rng.random_range(-2.0..2.0));
        let mut k_train = oracle_kernel(&x, &x, sf2, ell);
        for i in 0..m {
            k_train[(i, i)] += hyper.noise_variance;
        }
        let k_inv = k_train.try_inverse().expect("oracle kernel invertible");
        let oracle = oracle_kernel(&xs, &x, sf2, ell) * (&k_inv * &y);

        let model = gp_fit_fixed(&t, &hyper).unwrap();
        let produced = model.predict_mean(&xs).unwrap();
        let max_diff = (&produced - &oracle).abs().max();
        if max_diff > 1e-8 {
            failures.push(format!("case {case}: posterior mean diff {max_diff:.3e}"));
        }

        // analytic gradient vs central finite differences in log-space
        let (_, grad) = log_marginal_likelihood(&hyper, &t).unwrap();
        let step = 1e-5;
        let perturbed = |d_sf: f64, d_ell: f64, d_noise: f64| -> f64 {
            let h = GpHyper {
                signal_variance: sf2 * d_sf.exp(),
                lengthscale: Lengthscale::Isotropic(ell * (0.5 * d_ell).exp()),
                noise_variance: hyper.noise_variance * d_noise.exp(),
                ..GpHyper::default()
            };
            log_marginal_likelihood(&h, &t).unwrap().0
        };
        // gradient order: d/dlog sigma_f^2, d/dlog l, d/dlog sigma_n^2;
        // the lengthscale entry is in log l, so log l^2 moves by 2*step
        let fd = [
            (perturbed(step, 0.0, 0.0) - perturbed(-step, 0.0, 0.0)) / (2.0 * step),
            (perturbed(0.0, 2.0 * step, 0.0) - perturbed(0.0, -2.0 * step, 0.0)) / (2.0 * step),
            (perturbed(0.0, 0.0, step) - perturbed(0.0, 0.0, -step)) / (2.0 * step),
        ];
        let norm_fd = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let rel = diff / norm_fd.max(1e-12);
        if grad.len() != 3 || rel > 1e-4 {
            failures.push(format!("case {case}: gradient rel err {rel:.3e}"));
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 5.0 {
        failures.push(format!("runtime {elapsed:.1}s exceeds 5s"));
    }
    verdict(1, "gp posterior mean and likelihood gradient", &failures);
}

// --- criterion 2 -----------------------------------------------------------

/// Primal cost recomputed from scratch: ½·tr(BᵀKB) + C·Σ L(‖y−KB−b‖).
struct SvrOracle {
    k: DMatrix<f64>,
    y: DMatrix<f64>,
    c: f64,
    eps: f64,
}

impl SvrOracle {
    fn new(t: &TrainingSet, h: &SvrHyper) -> SvrOracle {
        let m = t.len();
        let x = DMatrix::from_row_slice(m, t.input_dim(), t.inputs());
        let k = DMatrix::from_fn(m, m, |i, j| {
            let mut d2 = 0.0;
            for c in 0..x.ncols() {
                let d = x[(i, c)] - x[(j, c)];
                d2 += d * d;
            }
            (-d2 / (2.0 * h.kernel_width * h.kernel_width)).exp()
        });
        SvrOracle {
            k,
            y: DMatrix::from_row_slice(m, t.output_dim(), t.targets()),
            c: h.penalty,
            eps: h.insensitivity,
        }
    }

    fn cost(&self, beta: &DMatrix<f64>, bias: &[f64]) -> f64 {
        let pred = &self.k * beta;
        let mut loss = 0.0;
        for mi in 0..self.y.nrows() {
            let mut mu2 = 0.0;
            for qi in 0..self.y.ncols() {
                let r = self.y[(mi, qi)] - pred[(mi, qi)] - bias[qi];
                mu2 += r * r;
            }
            loss += quadratic_eps_loss(mu2.sqrt(), self.eps);
        }
        0.5 * (beta.transpose() * &self.k * beta).trace() + self.c * loss
    }

    /// Gradient of the cost; the loss term is differentiable wherever
    /// mu != eps and zero inside the tube.
    fn gradient(&self, beta: &DMatrix<f64>, bias: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let m = self.y.nrows();
        let q = self.y.ncols();
        let pred = &self.k * beta;
        // dcost/dpred
        let mut dpred = DMatrix::zeros(m, q);
        for mi in 0..m {
            let mut mu2 = 0.0;
            for qi in 0..q {
                let r = self.y[(mi, qi)] - pred[(mi, qi)] - bias[qi];
                mu2 += r * r;
            }
            let mu = mu2.sqrt();
            if mu > self.eps {
                let w = 2.0 * self.c * (mu - self.eps) / mu;
                for qi in 0..q {
                    let r = self.y[(mi, qi)] - pred[(mi, qi)] - bias[qi];
                    dpred[(mi, qi)] = -w * r;
                }
            }
        }
        let grad_beta = &self.k * beta + &self.k * &dpred;
        let grad_bias = (0..q).map(|qi| dpred.column(qi).sum()).collect();
        (grad_beta, grad_bias)
    }

    /// Backtracking gradient descent from the given start.
    fn minimize(&self, mut beta: DMatrix<f64>, mut bias: Vec<f64>) -> f64 {
        let mut cost = self.cost(&beta, &bias);
        let mut step = 0.1;
        for _ in 0..4000 {
            let (gb, gbias) = self.gradient(&beta, &bias);
            let gnorm2 = gb.norm_squared() + gbias.iter().map(|v| v * v).sum::<f64>();
            if gnorm2 < 1e-18 {
                break;
            }
            let mut accepted = false;
            for _ in 0..60 {
                let nb = &beta - &gb * step;
                let nbias: Vec<f64> = bias.iter().zip(&gbias).map(|(b, g)| b - g * step).collect();
                let nc = self.cost(&nb, &nbias);
                if nc < cost {
                    beta = nb;
                    bias = nbias;
                    cost = nc;
                    step *= 1.5;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        cost
    }
}

#[test]
fn criterion_2_svr_cost_vs_generic_minimizer() {
    let start = std::time::Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    for case in 0..20 {
        let m = rng.random_range(5..=30);
        let p = rng.random_range(1..=3);
        let q = rng.random_range(1..=3);
        let t = random_training(&mut rng, m, p, q, 1.5);
        let hyper = SvrHyper {
            max_iterations: 300,
            ..SvrHyper::default()
        };

        // svr_fit hard-asserts a non-increasing IRWLS cost sequence
        let model = svr_fit(&t, &hyper).unwrap();

        let oracle = SvrOracle::new(&t, &hyper);
        let mut best = f64::INFINITY;
        for _ in 0..10 {
            let beta = DMatrix::from_fn(m, q, |_, _| rng.random_range(-0.5..0.5));
            let bias: Vec<f64> = (0..q).map(|_| rng.random_range(-0.5..0.5)).collect();
            best = best.min(oracle.minimize(beta, bias));
        }
        if model.final_cost > best * 1.01 + 1e-9 {
            failures.push(format!(
                "case {case}: IRWLS cost {:.6e} vs oracle {best:.6e}",
                model.final_cost
            ));
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 60.0 {
        failures.push(format!("runtime {elapsed:.1}s exceeds 60s"));
    }
    verdict(2, "svr monotone cost and near-optimal objective", &failures);
}

// --- criterion 3 -----------------------------------------------------------

#[test]
fn criterion_3_rf_structure_determinism_oob() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let t = random_training(&mut rng, 60, 5, 2, 1.0);
    let hyper = RfHyper {
        trees: 25,
        min_leaf: 3,
        ..RfHyper::default()
    };
    let model = rf_fit(&t, &hyper, 9).unwrap();

    // forest prediction equals the mean of per-tree predictions
    for _ in 0..20 {
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let forest = rf_predict(&model, &x).unwrap();
        let mut mean = vec![0.0; 2];
        for tree in &model.trees {
            for (acc, v) in mean.iter_mut().zip(tree_predict(tree, &x)) {
                *acc += v;
            }
        }
        for v in mean.iter_mut() {
            *v /= model.trees.len() as f64;
        }
        let diff = forest
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff > 1e-12 {
            failures.push(format!("forest vs tree-mean diff {diff:.3e}"));
        }
    }

    // leaf payloads recomputable from the stored row ids
    for tree in &model.trees {
        for node in &tree.nodes {
            if let Node::Leaf { payload, rows } = node {
                let mut mean = vec![0.0; 2];
                for &r in rows {
                    for (acc, v) in mean.iter_mut().zip(t.target_row(r as usize)) {
                        *acc += v;
                    }
                }
                for v in mean.iter_mut() {
                    *v /= rows.len() as f64;
                }
                let diff = payload
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if diff > 1e-12 {
                    failures.push(format!("leaf payload diff {diff:.3e}"));
                }
            }
        }
    }

    // bit-exact reproducibility across 1, 2 and 8 workers
    let queries: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut per_pool = Vec::new();
    for workers in [1usize, 2, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap();
        let m = pool.install(|| rf_fit(&t, &hyper, 9)).unwrap();
        let preds: Vec<Vec<f64>> = queries.iter().map(|x| rf_predict(&m, x).unwrap()).collect();
        let bags: Vec<Vec<bool>> = m.trees.iter().map(|tr| tr.in_bag.clone()).collect();
        per_pool.push((preds, bags));
    }
    for (preds, bags) in &per_pool[1..] {
        if preds != &per_pool[0].0 || bags != &per_pool[0].1 {
            failures.push("fits differ across worker counts".into());
        }
    }

    // single-tree out-of-bag fraction vs the bootstrap expectation
    let m_rows = 50;
    let t_oob = random_training(&mut rng, m_rows, 3, 1, 1.0);
    let one_tree = RfHyper {
        trees: 1,
        min_leaf: 2,
        ..RfHyper::default()
    };
    let n_seeds = 200;
    let mut total_oob = 0usize;
    for seed in 0..n_seeds {
        let m = rf_fit(&t_oob, &one_tree, seed as u64).unwrap();
        total_oob += m.trees[0].in_bag.iter().filter(|&&b| !b).count();
        // while here: OOB error is defined whenever any row is out of bag
        if oob_error(&m, &t_oob).unwrap().is_none() {
            failures.push(format!("seed {seed}: OOB undefined for a single tree"));
        }
    }
    let p_out = (1.0 - 1.0 / m_rows as f64).powi(m_rows as i32);
    let observed = total_oob as f64 / (n_seeds * m_rows) as f64;
    let sigma = (p_out * (1.0 - p_out) / (n_seeds * m_rows) as f64).sqrt();
    if (observed - p_out).abs() > 3.0 * sigma {
        failures.push(format!(
            "OOB fraction {observed:.4} vs expected {p_out:.4} (3 sigma {:.4})",
            3.0 * sigma
        ));
    }

    verdict(3, "rf aggregation, reproducibility and oob", &failures);
}

// --- criterion 4 -----------------------------------------------------------

#[test]
fn criterion_4_hpt_neighbours_and_limits() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // knn vs an exhaustive selection-scan oracle
    for case in 0..100 {
        let m = rng.random_range(3..=40);
        let p = rng.random_range(1..=4);
        let k = rng.random_range(1..=m);
        let t = random_training(&mut rng, m, p, 1, 1.0);
        let model = hpt_fit(
            &t,
            &HptHyper {
                neighbours: k,
                ..HptHyper::default()
            },
        )
        .unwrap();
        let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = knn(&x, &model).unwrap();

        let mut all: Vec<(usize, f64)> = (0..m)
            .map(|mi| {
                let d2: f64 = t
                    .input_row(mi)
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (mi, d2.sqrt())
            })
            .collect();
        // repeated selection of the minimum, ties to the lower index
        let mut expect = Vec::with_capacity(k);
        for _ in 0..k {
            let (pos, _) = all
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            expect.push(all.remove(pos));
        }
        if got != expect {
            failures.push(format!("case {case}: knn mismatch"));
        }
    }

    // gamma = 0 with weight normalization is the K-neighbour mean
    let t = random_training(&mut rng, 20, 3, 2, 1.0);
    let model = hpt_fit(
        &t,
        &HptHyper {
            neighbours: 7,
            kernel_width: 0.0,
            distance_norm: DistanceNorm::Relative,
            weight_norm: true,
        },
    )
    .unwrap();
    let x: Vec<f64> = vec![0.1, -0.2, 0.3];
    let pred = hpt_predict(&x, &model).unwrap();
    let neigh = knn(&x, &model).unwrap();
    let mut mean = vec![0.0; 2];
    for (mi, _) in &neigh {
        for (acc, v) in mean.iter_mut().zip(t.target_row(*mi)) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= neigh.len() as f64;
    }
    let diff = pred
        .iter()
        .zip(&mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if diff > 1e-12 {
        failures.push(format!("gamma=0 mean diff {diff:.3e}"));
    }

    // gamma = 1e6 converges to the nearest neighbour's target
    let model = hpt_fit(
        &t,
        &HptHyper {
            neighbours: 7,
            kernel_width: 1e6,
            distance_norm: DistanceNorm::Relative,
            weight_norm: true,
        },
    )
    .unwrap();
    let pred = hpt_predict(&x, &model).unwrap();
    let nearest = t.target_row(knn(&x, &model).unwrap()[0].0);
    let diff = pred
        .iter()
        .zip(nearest)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if diff > 1e-6 {
        failures.push(format!("gamma=1e6 nearest diff {diff:.3e}"));
    }

    // hand-worked K=2 example: normalized distances (0.5, 1.0), gamma 1
    let y1 = [2.0, -1.0];
    let y2 = [0.5, 3.0];
    let t2 = TrainingSet::new(
        vec![1.0, 2.0],
        vec![y1[0], y1[1], y2[0], y2[1]],
        1,
        2,
        vec![(0, 0), (0, 1)],
    )
    .unwrap();
    let model = hpt_fit(
        &t2,
        &HptHyper {
            neighbours: 2,
            kernel_width: 1.0,
            distance_norm: DistanceNorm::Absolute,
            weight_norm: true,
        },
    )
    .unwrap();
    let pred = hpt_predict(&[0.0], &model).unwrap();
    let (wa, wb) = ((-0.5f64).exp(), (-1.0f64).exp());
    for qi in 0..2 {
        let expect = (wa * [y1[qi], y2[qi]][0] + wb * [y1[qi], y2[qi]][1]) / (wa + wb);
        if (pred[qi] - expect).abs() > 1e-12 {
            failures.push(format!(
                "hand example channel {qi}: {} vs {expect}",
                pred[qi]
            ));
        }
    }

    verdict(4, "hpt knn oracle and kernel limits", &failures);
}

// --- criterion 5 -----------------------------------------------------------

fn pairwise_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in truth.iter().enumerate() {
            if tj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

#[test]
fn criterion_5_auc_pairwise_oracle() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(10..=120);
        // half the instances quantize scores to force heavy ties
        let quantize = checked % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..1.0);
                if quantize {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) < 0.35).collect();
        if truth.iter().all(|&b| b) || truth.iter().all(|&b| !b) {
            continue;
        }
        checked += 1;
        let mask = Mask::new(1, n, truth.clone()).unwrap();
        let auc = roc_auc(&dist(scores.clone()), &mask).unwrap().auc;
        let oracle = pairwise_auc(&scores, &truth);
        if (auc - oracle).abs() > 1e-12 {
            failures.push(format!("instance {checked}: {auc} vs {oracle}"));
        }
        let cubed: Vec<f64> = scores.iter().map(|v| v * v * v).collect();
        let auc_cubed = roc_auc(&dist(cubed), &mask).unwrap().auc;
        if auc_cubed != auc {
            failures.push(format!("instance {checked}: cubing changed AUC"));
        }
    }
    verdict(5, "auc equals the pairwise oracle", &failures);
}

// --- criterion 6 -----------------------------------------------------------

#[test]
fn criterion_6_pipeline_invariants() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(606);

    // clip: never increases, caps at the pre-clip mean + k sigma
    for _ in 0..20 {
        let d = dist((0..200).map(|_| rng.random_range(0.0..5.0)).collect());
        let k = rng.random_range(0.5..4.0);
        let cap = d.mean() + k * d.std();
        let clipped = clip_outliers(&d, k);
        for (a, b) in clipped.values().iter().zip(d.values()) {
            if a > b {
                failures.push("clip increased a value".into());
            }
            if *a != b.min(cap) {
                failures.push("clip does not cap at mean + k sigma".into());
            }
        }
    }

    // normalize01 is monotone, so AUC on a synthetic run is unchanged
    let cfg = SynthConfig {
        height: 32,
        width: 32,
        seed: 5,
        ..SynthConfig::default()
    };
    let (x, y, change, unchanged) = generate(&cfg).unwrap();
    let train = subsample_mask(&unchanged, 0.1, 3).unwrap();
    let spec = RegressorSpec {
        method: MethodSpec::Rf(RfHyper {
            trees: 16,
            ..RfHyper::default()
        }),
        seed: 2,
    };
    let (pred_y, _, _) = two_way_regress(&x, &y, &train, &spec).unwrap();
    let d = distance_image(&y, &pred_y).unwrap();
    let before = roc_auc(&d, &change).unwrap().auc;
    let after = roc_auc(&normalize01(&d), &change).unwrap().auc;
    if before != after {
        failures.push(format!("normalize01 changed AUC: {before} vs {after}"));
    }

    // a single planted outlier disappears under the 3x3 median
    let mut values = vec![0.25; 15 * 15];
    values[7 * 15 + 6] = 9.0;
    let filtered = median_filter3(&DistanceImage::new(15, 15, values).unwrap());
    if filtered.values().iter().any(|&v| v != 0.25) {
        failures.push("median filter kept the planted outlier".into());
    }

    // fuse commutes bitwise
    let a = dist((0..64).map(|_| rng.random_range(0.0..1.0)).collect());
    let b = dist((0..64).map(|_| rng.random_range(0.0..1.0)).collect());
    if fuse(&a, &b).unwrap().values() != fuse(&b, &a).unwrap().values() {
        failures.push("fuse(a,b) != fuse(b,a)".into());
    }

    verdict(6, "pipeline stage invariants", &failures);
}

// --- criterion 7 -----------------------------------------------------------

fn e2e_backends() -> Vec<(&'static str, MethodSpec)> {
    vec![
        ("gp", MethodSpec::Gp(GpHyper::default())),
        (
            "svr",
            MethodSpec::Svr(SvrHyper {
                kernel_width: 0.5,
                ..SvrHyper::default()
            }),
        ),
        (
            "rf",
            MethodSpec::Rf(RfHyper {
                trees: 128,
                min_leaf: 2,
                ..RfHyper::default()
            }),
        ),
        (
            "hpt",
            MethodSpec::Hpt(HptHyper {
                neighbours: 32,
                kernel_width: 100.0,
                distance_norm: DistanceNorm::Relative,
                weight_norm: true,
            }),
        ),
    ]
}

#[test]
fn criterion_7_end_to_end_synthetic() {
    let start = std::time::Instant::now();
    let mut failures = Vec::new();
    for style in [SensorBStyle::Optical, SensorBStyle::SarLike] {
        let cfg = SynthConfig {
            sensor_b_style: style,
            seed: 1,
            ..SynthConfig::default()
        };
        let (x, y, change, unchanged) = generate(&cfg).unwrap();
        // 2% of the scene's pixels, drawn from the unchanged area
        let fraction =
            0.02 * (cfg.height * cfg.width) as f64 / unchanged.count_true() as f64;
        let train = subsample_mask(&unchanged, fraction, 7).unwrap();
        for (name, method) in e2e_backends() {
            let spec = RegressorSpec { method, seed: 7 };
            let result = run_pipeline(&x, &y, &train, &spec, &PipelineOptions::default()).unwrap();
            let auc = roc_auc(&result.score, &change).unwrap().auc;
            if auc < 0.90 {
                failures.push(format!("{style:?}/{name}: auc {auc:.4} < 0.90"));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 120.0 {
        failures.push(format!("runtime {elapsed:.1}s exceeds 120s"));
    }
    verdict(7, "end-to-end synthetic auc", &failures);
}

// --- criterion 8 -----------------------------------------------------------

/// Real-dataset reproduction, gated on HCD_DATA_DIR. The layout is
/// documented in the README: <dir>/california/{image_x,image_y,train_mask,
/// ground_truth}.hcdr and <dir>/texas/... in HCDR form.
#[test]
fn criterion_8_real_data_reproduction() {
    let Ok(data_dir) = std::env::var("HCD_DATA_DIR") else {
        println!("acceptance 8 real-data table reproduction: pass (skipped, HCD_DATA_DIR unset)");
        return;
    };
    let mut failures = Vec::new();
    let dir = std::path::Path::new(&data_dir);

    let load = |scene: &str| -> hetcd::Result<(hetcd::Raster, hetcd::Raster, Mask, Mask)> {
        let d = dir.join(scene);
        Ok((
            hetcd::raster::read_raster_file(d.join("image_x.hcdr"))?,
            hetcd::raster::read_raster_file(d.join("image_y.hcdr"))?,
            Mask::from_raster(&hetcd::raster::read_raster_file(d.join("train_mask.hcdr"))?)?,
            Mask::from_raster(&hetcd::raster::read_raster_file(d.join("ground_truth.hcdr"))?)?,
        ))
    };

    // California: optical/SAR pair, published mean AUC per back-end
    match load("california") {
        Err(e) => failures.push(format!("california data: {e}")),
        Ok((x, y, train, truth)) => {
            let published = [
                ("gp", MethodSpec::Gp(GpHyper::default()), 0.74692),
                ("svr", MethodSpec::Svr(SvrHyper::default()), 0.81299),
                (
                    "rf",
                    MethodSpec::Rf(RfHyper {
                        trees: 128,
                        min_leaf: 5,
                        ..RfHyper::default()
                    }),
                    0.81680,
                ),
                (
                    "hpt",
                    MethodSpec::Hpt(HptHyper {
                        neighbours: 300,
                        kernel_width: 100.0,
                        ..HptHyper::default()
                    }),
                    0.84001,
                ),
            ];
            let mut measured = Vec::new();
            for (name, method, expected) in published {
                let spec = RegressorSpec { method, seed: 7 };
                let r = hetcd::eval::repeated_runs(
                    &x,
                    &y,
                    &truth,
                    &spec,
                    3,
                    &PipelineOptions::default(),
                    |seed| subsample_mask(&train, 0.02, seed),
                );
                match r {
                    Err(e) => failures.push(format!("california/{name}: {e}")),
                    Ok((record, _)) => {
                        if (record.auc_mean - expected).abs() > 0.05 {
                            failures.push(format!(
                                "california/{name}: auc {:.5} vs published {expected:.5}",
                                record.auc_mean
                            ));
                        }
                        measured.push((name, record.auc_mean, record.time_mean_s));
                    }
                }
            }
            if measured.len() == 4 {
                let get = |n: &str| measured.iter().find(|(m, ..)| *m == n).unwrap();
                let (gp, svr, rf, hpt) = (get("gp"), get("svr"), get("rf"), get("hpt"));
                // qualitative ordering: HPT > RF ~ SVR > GP, RF fastest
                if !(hpt.1 > rf.1 && rf.1 > gp.1 && svr.1 > gp.1 && (rf.1 - svr.1).abs() < 0.05) {
                    failures.push("california AUC ordering violated".into());
                }
                if !(rf.2 < gp.2 && rf.2 < svr.2 && rf.2 < hpt.2) {
                    failures.push("rf is not the fastest back-end".into());
                }
            }
        }
    }

    // Texas: optical/optical pair, every back-end above 0.98
    match load("texas") {
        Err(e) => failures.push(format!("texas data: {e}")),
        Ok((x, y, train, truth)) => {
            for (name, method) in e2e_backends() {
                let spec = RegressorSpec { method, seed: 7 };
                let train2 = match subsample_mask(&train, 0.02, 11) {
                    Ok(m) => m,
                    Err(e) => {
                        failures.push(format!("texas/{name}: {e}"));
                        continue;
                    }
                };
                match run_pipeline(&x, &y, &train2, &spec, &PipelineOptions::default()) {
                    Err(e) => failures.push(format!("texas/{name}: {e}")),
                    Ok(result) => match roc_auc(&result.score, &truth) {
                        Err(e) => failures.push(format!("texas/{name}: {e}")),
                        Ok(r) => {
                            if r.auc <= 0.98 {
                                failures.push(format!("texas/{name}: auc {:.4} <= 0.98", r.auc));
                            }
                        }
                    },
                }
            }
        }
    }

    verdict(8, "real-data table reproduction", &failures);
}

// --- criterion 9 -----------------------------------------------------------

#[test]
fn criterion_9_determinism() {
    let mut failures = Vec::new();

    // same inputs, same config: bit-identical score maps
    let cfg = SynthConfig {
        seed: 4,
        ..SynthConfig::default()
    };
    let (x, y, _, unchanged) = generate(&cfg).unwrap();
    let train = subsample_mask(&unchanged, 0.05, 2).unwrap();
    let spec = RegressorSpec {
        method: MethodSpec::Rf(RfHyper {
            trees: 64,
            ..RfHyper::default()
        }),
        seed: 3,
    };
    let opts = PipelineOptions::default();
    let a = run_pipeline(&x, &y, &train, &spec, &opts).unwrap();
    let b = run_pipeline(&x, &y, &train, &spec, &opts).unwrap();
    if a.score.values() != b.score.values() {
        failures.push("score maps differ between identical runs".into());
    }

    // worker count must not leak into results
    let mut scores = Vec::new();
    for workers in [1usize, 8] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .unwrap();
        let r = pool
            .install(|| run_pipeline(&x, &y, &train, &spec, &opts))
            .unwrap();
        scores.push(r.score.values().to_vec());
    }
    if scores[0] != scores[1] {
        failures.push("score maps differ between 1 and 8 workers".into());
    }

    // the binary path (result.json + score.hcdr) is covered per-byte in
    // tests/cli.rs; here the in-process pipeline is the oracle
    verdict(9, "determinism across reruns and worker counts", &failures);
}

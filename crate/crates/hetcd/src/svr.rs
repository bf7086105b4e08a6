//! Multi-input multi-output support vector regression.
//!
//! A single kernel machine fits all Q output channels jointly: the loss is
//! a quadratic ε-insensitive penalty on the Euclidean norm of the Q-dim
//! residual, so the support-vector structure is shared across outputs.
//! Training runs iterative re-weighted least squares (IRWLS) in the kernel
//! dual: each iteration solves a weighted regularized linear system for the
//! dual coefficients and bias, then backtracks toward the solution until
//! the true cost decreases. The cost sequence is non-increasing by
//! construction and this is asserted at every step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{inputs_matrix, targets_matrix};
use crate::raster::TrainingSet;

const SOLVE_JITTER: f64 = 1e-10;
const SUPPORT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrHyper {
    /// Penalty factor C trading regularization against residual loss.
    pub penalty: f64,
    /// Half-width ε of the insensitivity zone.
    pub insensitivity: f64,
    /// Width σ of the RBF kernel.
    pub kernel_width: f64,
    pub max_iterations: usize,
    /// Stop once the relative cost decrease falls below this.
    pub cost_tolerance: f64,
}

impl Default for SvrHyper {
    fn default() -> Self {
        // C=1, ε=0.1, σ=1
        SvrHyper {
            penalty: 1.0,
            insensitivity: 0.1,
            kernel_width: 1.0,
            max_iterations: 100,
            cost_tolerance: 1e-8,
        }
    }
}

impl SvrHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty > 0.0) {
            return Err(Error::Parameter("SVR penalty C must be > 0".into()));
        }
        if self.insensitivity < 0.0 {
            return Err(Error::Parameter("SVR insensitivity must be >= 0".into()));
        }
        if !(self.kernel_width > 0.0) {
            return Err(Error::Parameter("SVR kernel width must be > 0".into()));
        }
        Ok(())
    }
}

/// Quadratic ε-insensitive loss on a residual norm: zero inside the tube,
/// (μ−ε)² outside.
pub fn quadratic_eps_loss(mu: f64, eps: f64) -> f64 {
    if mu < eps {
        0.0
    } else {
        let d = mu - eps;
        d * d
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvrModel {
    /// Dual coefficients, M×Q.
    pub beta: DMatrix<f64>,
    /// Per-output bias.
    pub bias: DVector<f64>,
    pub train_inputs: DMatrix<f64>,
    pub kernel_width: f64,
    /// Rows with a nonzero dual coefficient in any output.
    pub support: Vec<bool>,
    pub final_cost: f64,
}

fn rbf_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let denom = 2.0 * sigma * sigma;
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut d2 = 0.0;
        for p in 0..a.ncols() {
            let d = a[(i, p)] - b[(j, p)];
            d2 += d * d;
        }
        (-d2 / denom).exp()
    })
}

/// Per-row Euclidean residual norms μ_m = ‖y_m − (Kβ)_m − b‖.
pub fn residual_norms(model: &SvrModel, t: &TrainingSet) -> Result<Vec<f64>> {
    if t.input_dim() != model.train_inputs.ncols() || t.output_dim() != model.beta.ncols() {
        return Err(Error::Dimension("SVR model dims do not match data".into()));
    }
    let x = inputs_matrix(t);
    let y = targets_matrix(t);
    let k = rbf_kernel(&x, &model.train_inputs, model.kernel_width);
    Ok(residual_norms_raw(&k, &y, &model.beta, &model.bias))
}

fn residual_norms_raw(
    k: &DMatrix<f64>,
    y: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> Vec<f64> {
    let pred = k * beta;
    (0..y.nrows())
        .map(|m| {
            let mut s = 0.0;
            for q in 0..y.ncols() {
                let e = y[(m, q)] - pred[(m, q)] - bias[q];
                s += e * e;
            }
            s.sqrt()
        })
        .collect()
}

/// Eq.-(6)-style objective: ½ tr(βᵀKβ) + C Σ L(μ_m), with the primal
/// regularization term expressed in dual form.
pub fn svr_cost(model: &SvrModel, t: &TrainingSet, h: &SvrHyper) -> Result<f64> {
    let x = inputs_matrix(t);
    let y = targets_matrix(t);
    let k = rbf_kernel(&x, &model.train_inputs, model.kernel_width);
    Ok(cost_raw(&k, &y, &model.beta, &model.bias, h))
}

fn cost_raw(
    k: &DMatrix<f64>,
    y: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    bias: &DVector<f64>,
    h: &SvrHyper,
) -> f64 {
    let reg = 0.5 * (beta.transpose() * k * beta).trace();
    let loss: f64 = residual_norms_raw(k, y, beta, bias)
        .iter()
        .map(|&mu| quadratic_eps_loss(mu, h.insensitivity))
        .sum();
    reg + h.penalty * loss
}

/// IRWLS fit. Initialization is β=0 with b set to the per-output target
/// mean; if every residual already sits inside the ε-tube the zero model is
/// optimal and training stops immediately.
pub fn svr_fit(t: &TrainingSet, h: &SvrHyper) -> Result<SvrModel> {
    h.validate()?;
    let m = t.len();
    let q = t.output_dim();
    let x = inputs_matrix(t);
    let y = targets_matrix(t);
    let k = rbf_kernel(&x, &x, h.kernel_width);

    let mut beta = DMatrix::zeros(m, q);
    // start from the better of the zero model and the mean-bias model, so
    // the fitted cost can never exceed the trivial one
    let mut bias = DVector::from_fn(q, |qi, _| y.column(qi).mean());
    let mut cost = cost_raw(&k, &y, &beta, &bias, h);
    let zero_bias = DVector::zeros(q);
    let zero_cost = cost_raw(&k, &y, &beta, &zero_bias, h);
    if zero_cost < cost {
        bias = zero_bias;
        cost = zero_cost;
    }

    for _ in 0..h.max_iterations {
        let mu = residual_norms_raw(&k, &y, &beta, &bias);
        // IRWLS weights: a_m = 2C(μ_m−ε)/μ_m outside the tube, 0 inside
        let a: Vec<f64> = mu
            .iter()
            .map(|&mu_m| {
                if mu_m < h.insensitivity || mu_m == 0.0 {
                    0.0
                } else {
                    2.0 * h.penalty * (mu_m - h.insensitivity) / mu_m
                }
            })
            .collect();
        let sv: Vec<usize> = (0..m).filter(|&i| a[i] > 0.0).collect();
        if sv.is_empty() {
            // every point inside the tube: current model is stationary
            break;
        }

        // weighted regularized system over the active set:
        // [ K_SS + diag(1/a_S)   1 ] [β_S]   [ Y_S ]
        // [ 1ᵀ                   0 ] [ b ] = [  0  ]
        let n = sv.len();
        let mut sys = DMatrix::zeros(n + 1, n + 1);
        let mut rhs = DMatrix::zeros(n + 1, q);
        for (ii, &i) in sv.iter().enumerate() {
            for (jj, &j) in sv.iter().enumerate() {
                sys[(ii, jj)] = k[(i, j)];
            }
            sys[(ii, ii)] += 1.0 / a[i] + SOLVE_JITTER;
            sys[(ii, n)] = 1.0;
            sys[(n, ii)] = 1.0;
            for qi in 0..q {
                rhs[(ii, qi)] = y[(i, qi)];
            }
        }
        let lu = sys.lu();
        let sol = lu.solve(&rhs).ok_or_else(|| {
            Error::Numerical(
                "IRWLS system is singular; ε may be too large for this data".into(),
            )
        })?;
        let mut beta_star = DMatrix::zeros(m, q);
        for (ii, &i) in sv.iter().enumerate() {
            for qi in 0..q {
                beta_star[(i, qi)] = sol[(ii, qi)];
            }
        }
        let bias_star = DVector::from_fn(q, |qi, _| sol[(n, qi)]);

        // backtrack from (β,b) toward (β*,b*) until the true cost decreases
        let mut eta = 1.0;
        let mut advanced = false;
        while eta > 1e-10 {
            let beta_c = &beta + (&beta_star - &beta) * eta;
            let bias_c = &bias + (&bias_star - &bias) * eta;
            let cost_c = cost_raw(&k, &y, &beta_c, &bias_c, h);
            if cost_c <= cost {
                assert!(cost_c <= cost * (1.0 + 1e-12) + 1e-12, "IRWLS cost increased");
                let rel_drop = if cost > 0.0 { (cost - cost_c) / cost } else { 0.0 };
                beta = beta_c;
                bias = bias_c;
                let converged = rel_drop < h.cost_tolerance;
                cost = cost_c;
                advanced = !converged;
                break;
            }
            eta *= 0.5;
        }
        if !advanced {
            break;
        }
    }

    let support: Vec<bool> = (0..m)
        .map(|i| (0..q).any(|qi| beta[(i, qi)].abs() > SUPPORT_EPS))
        .collect();
    // prune sub-threshold coefficients so prediction skips non-support rows
    for i in 0..m {
        if !support[i] {
            for qi in 0..q {
                beta[(i, qi)] = 0.0;
            }
        }
    }
    Ok(SvrModel {
        beta,
        bias,
        train_inputs: x,
        kernel_width: h.kernel_width,
        support,
        final_cost: cost,
    })
}

/// Σ_m β_{m,·}·exp(−‖x−x_m‖²/(2σ²)) + b, over support rows only.
pub fn svr_predict(model: &SvrModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.train_inputs.ncols() {
        return Err(Error::Dimension(format!(
            "SVR input has {} channels, model expects {}",
            x.len(),
            model.train_inputs.ncols()
        )));
    }
    let q = model.beta.ncols();
    let denom = 2.0 * model.kernel_width * model.kernel_width;
    let mut out = vec![0.0; q];
    for (m, &is_sv) in model.support.iter().enumerate() {
        if !is_sv {
            continue;
        }
        let mut d2 = 0.0;
        for p in 0..x.len() {
            let d = x[p] - model.train_inputs[(m, p)];
            d2 += d * d;
        }
        let kx = (-d2 / denom).exp();
        for qi in 0..q {
            out[qi] += model.beta[(m, qi)] * kx;
        }
    }
    for qi in 0..q {
        out[qi] += model.bias[qi];
    }
    Ok(out)
}

impl SvrModel {
    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.beta.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::TrainingSet;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn training_set(inputs: Vec<f64>, targets: Vec<f64>, p: usize, q: usize) -> TrainingSet {
        let m = inputs.len() / p;
        TrainingSet::new(inputs, targets, p, q, vec![(0, 0); m]).unwrap()
    }

    fn random_set(rng: &mut impl Rng, m: usize, p: usize, q: usize) -> TrainingSet {
        let inputs: Vec<f64> = (0..m * p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<f64> = (0..m * q).map(|_| rng.random_range(-1.0..1.0)).collect();
        training_set(inputs, targets, p, q)
    }

    #[test]
    fn loss_inside_tube_is_zero() {
        assert_eq!(quadratic_eps_loss(0.05, 0.1), 0.0);
    }

    #[test]
    fn loss_is_continuous_at_boundary() {
        assert_eq!(quadratic_eps_loss(0.5, 0.5), 0.0);
    }

    #[test]
    fn loss_outside_tube() {
        assert_relative_eq!(quadratic_eps_loss(2.0, 0.5), 2.25);
    }

    #[test]
    fn residual_norm_examples() {
        // Q=1 residual −3 → 3; Q=2 residual (3,4) → 5
        let t1 = training_set(vec![0.0], vec![-3.0], 1, 1);
        let zero1 = SvrModel {
            beta: DMatrix::zeros(1, 1),
            bias: DVector::zeros(1),
            train_inputs: DMatrix::from_row_slice(1, 1, &[0.0]),
            kernel_width: 1.0,
            support: vec![false],
            final_cost: 0.0,
        };
        assert_relative_eq!(residual_norms(&zero1, &t1).unwrap()[0], 3.0);

        let t2 = training_set(vec![0.0], vec![3.0, 4.0], 1, 2);
        let zero2 = SvrModel {
            beta: DMatrix::zeros(1, 2),
            bias: DVector::zeros(2),
            train_inputs: DMatrix::from_row_slice(1, 1, &[0.0]),
            kernel_width: 1.0,
            support: vec![false],
            final_cost: 0.0,
        };
        assert_relative_eq!(residual_norms(&zero2, &t2).unwrap()[0], 5.0);
    }

    #[test]
    fn perfect_fit_has_zero_residuals() {
        let t = training_set(vec![0.0, 1.0], vec![0.5, 0.5], 1, 1);
        let model = SvrModel {
            beta: DMatrix::zeros(2, 1),
            bias: DVector::from_element(1, 0.5),
            train_inputs: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            kernel_width: 1.0,
            support: vec![false, false],
            final_cost: 0.0,
        };
        let mu = residual_norms(&model, &t).unwrap();
        assert!(mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_model_small_targets_costs_zero() {
        let t = training_set(vec![0.0, 1.0], vec![0.05, -0.02], 1, 1);
        let model = SvrModel {
            beta: DMatrix::zeros(2, 1),
            bias: DVector::zeros(1),
            train_inputs: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            kernel_width: 1.0,
            support: vec![false, false],
            final_cost: 0.0,
        };
        assert_eq!(svr_cost(&model, &t, &SvrHyper::default()).unwrap(), 0.0);
    }

    #[test]
    fn cost_is_nonnegative() {
        let mut rng = crate::util::rng_for(1, 0);
        for _ in 0..5 {
            let t = random_set(&mut rng, 10, 2, 2);
            let model = svr_fit(&t, &SvrHyper::default()).unwrap();
            assert!(svr_cost(&model, &t, &SvrHyper::default()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn fit_large_eps_terminates_with_zero_cost() {
        let t = training_set(vec![0.0, 1.0, 2.0], vec![0.1, 0.2, 0.15], 1, 1);
        let h = SvrHyper {
            insensitivity: 10.0,
            ..SvrHyper::default()
        };
        let model = svr_fit(&t, &h).unwrap();
        assert_eq!(model.final_cost, 0.0);
        assert!(model.support.iter().all(|s| !s));
    }

    #[test]
    fn fit_reduces_cost_below_zero_model() {
        let mut rng = crate::util::rng_for(2, 0);
        let h = SvrHyper::default();
        for _ in 0..5 {
            let t = random_set(&mut rng, 20, 2, 2);
            let model = svr_fit(&t, &h).unwrap();
            let zero = SvrModel {
                beta: DMatrix::zeros(20, 2),
                bias: DVector::zeros(2),
                train_inputs: model.train_inputs.clone(),
                kernel_width: h.kernel_width,
                support: vec![false; 20],
                final_cost: 0.0,
            };
            let zero_cost = svr_cost(&zero, &t, &h).unwrap();
            assert!(model.final_cost <= zero_cost + 1e-12);
        }
    }

    #[test]
    fn inside_tube_rows_are_not_support_vectors() {
        let mut rng = crate::util::rng_for(3, 0);
        let t = random_set(&mut rng, 25, 2, 1);
        let h = SvrHyper {
            insensitivity: 0.3,
            ..SvrHyper::default()
        };
        let model = svr_fit(&t, &h).unwrap();
        let mu = residual_norms(&model, &t).unwrap();
        for (m, &mu_m) in mu.iter().enumerate() {
            if mu_m < h.insensitivity {
                assert_eq!(
                    quadratic_eps_loss(mu_m, h.insensitivity),
                    0.0,
                    "row {m} inside the tube must not contribute"
                );
            }
        }
    }

    #[test]
    fn predict_zero_beta_returns_bias() {
        let model = SvrModel {
            beta: DMatrix::zeros(3, 2),
            bias: DVector::from_column_slice(&[1.5, -0.5]),
            train_inputs: DMatrix::zeros(3, 2),
            kernel_width: 1.0,
            support: vec![false; 3],
            final_cost: 0.0,
        };
        assert_eq!(svr_predict(&model, &[7.0, 8.0]).unwrap(), vec![1.5, -0.5]);
    }

    #[test]
    fn predict_far_away_approaches_bias() {
        let mut rng = crate::util::rng_for(4, 0);
        let t = random_set(&mut rng, 10, 2, 1);
        let model = svr_fit(&t, &SvrHyper::default()).unwrap();
        let far = svr_predict(&model, &[1e4, -1e4]).unwrap();
        assert_relative_eq!(far[0], model.bias[0], epsilon = 1e-12);
    }

    #[test]
    fn single_point_closed_form_solve() {
        // M=1, outside the tube: system [k11 + 1/a, 1; 1, 0][β; b] = [y; 0]
        // forces β=0, b=y, giving an exact fit with zero cost.
        let t = training_set(vec![0.5], vec![3.0], 1, 1);
        let h = SvrHyper::default();
        let model = svr_fit(&t, &h).unwrap();
        let pred = svr_predict(&model, &[0.5]).unwrap();
        assert_relative_eq!(pred[0], 3.0, epsilon = 1e-9);
        assert!(model.final_cost <= 1e-12);
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = crate::util::rng_for(5, 0);
        let t = random_set(&mut rng, 15, 2, 2);
        let m1 = svr_fit(&t, &SvrHyper::default()).unwrap();
        let m2 = svr_fit(&t, &SvrHyper::default()).unwrap();
        assert_eq!(
            m1.beta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            m2.beta.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(m1.bias, m2.bias);
    }
}

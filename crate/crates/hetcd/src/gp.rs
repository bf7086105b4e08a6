//! Gaussian-process regression with an RBF kernel.
//!
//! The Q output channels are modelled as independent zero-mean GPs sharing
//! one kernel. Hyperparameters (signal variance and lengthscales) are tuned
//! by gradient ascent on the log marginal likelihood, restarted from several
//! random points in log-parameter space; the best restart wins. A noise
//! term σ_n² on the training diagonal keeps the kernel matrix positive
//! definite in the presence of near-duplicate pixels; σ_n² → 0 recovers the
//! exact interpolating posterior.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::TrainingSet;
use crate::util::rng_for;

/// Lengthscale of the RBF kernel: one shared scale or one per input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Lengthscale {
    Isotropic(f64),
    Anisotropic(Vec<f64>),
}

impl Lengthscale {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Lengthscale::Isotropic(l) => *l > 0.0 && l.is_finite(),
            Lengthscale::Anisotropic(ls) => {
                !ls.is_empty() && ls.iter().all(|l| *l > 0.0 && l.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter("lengthscales must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpHyper {
    pub signal_variance: f64,
    pub lengthscale: Lengthscale,
    /// Noise/jitter σ_n² added to the training-kernel diagonal. Held fixed
    /// during the ascent.
    pub noise_variance: f64,
    /// Number of random-restart gradient ascents.
    pub restarts: usize,
    pub max_ascent_steps: usize,
    /// Ascent stops once the accepted step moves the log-parameters by less
    /// than this.
    pub step_tolerance: f64,
    /// Exact GP training is O(M³); sets larger than this are rejected with
    /// a hint to subsample.
    pub max_training_rows: usize,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            signal_variance: 1.0,
            lengthscale: Lengthscale::Isotropic(1.0),
            noise_variance: 1e-6,
            restarts: 1,
            max_ascent_steps: 100,
            step_tolerance: 1e-6,
            max_training_rows: 4000,
        }
    }
}

impl GpHyper {
    /// Default hyperparameters with an anisotropic unit lengthscale per
    /// input channel.
    pub fn default_anisotropic(input_dim: usize) -> Self {
        GpHyper {
            lengthscale: Lengthscale::Anisotropic(vec![1.0; input_dim]),
            ..GpHyper::default()
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.signal_variance > 0.0) {
            return Err(Error::Parameter("signal_variance must be > 0".into()));
        }
        if self.noise_variance < 0.0 {
            return Err(Error::Parameter("noise_variance must be >= 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Parameter("restarts must be >= 1".into()));
        }
        self.lengthscale.validate()?;
        if let Lengthscale::Anisotropic(ls) = &self.lengthscale {
            if ls.len() != input_dim {
                return Err(Error::Dimension(format!(
                    "anisotropic lengthscale has {} entries for {} input channels",
                    ls.len(),
                    input_dim
                )));
            }
        }
        Ok(())
    }

    fn inv_sq_lengthscales(&self, dim: usize) -> Vec<f64> {
        match &self.lengthscale {
            Lengthscale::Isotropic(l) => vec![1.0 / (l * l); dim],
            Lengthscale::Anisotropic(ls) => ls.iter().map(|l| 1.0 / (l * l)).collect(),
        }
    }
}

/// σ_f²·exp(−½ (x_i−x_j)ᵀ L (x_i−x_j)) with L = l⁻²I or diag(l⁻²).
pub fn rbf(xi: &[f64], xj: &[f64], h: &GpHyper) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::Dimension(format!(
            "rbf input dims {} vs {}",
            xi.len(),
            xj.len()
        )));
    }
    let inv_sq = h.inv_sq_lengthscales(xi.len());
    let mut s = 0.0;
    for ((a, b), w) in xi.iter().zip(xj).zip(&inv_sq) {
        let d = a - b;
        s += d * d * w;
    }
    Ok(h.signal_variance * (-0.5 * s).exp())
}

fn rbf_from_inv_sq(xi: &[f64], xj: &[f64], sigma_f2: f64, inv_sq: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((a, b), w) in xi.iter().zip(xj).zip(inv_sq) {
        let d = a - b;
        s += d * d * w;
    }
    sigma_f2 * (-0.5 * s).exp()
}

/// Cross-kernel matrix: entry (i,j) = rbf(row i of A, row j of B). No noise
/// term; see [`kernel_matrix_train`] for K_{X,X}.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, h: &GpHyper) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "kernel matrix column counts {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let inv_sq = h.inv_sq_lengthscales(a.ncols());
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        let ri: Vec<f64> = a.row(i).iter().cloned().collect();
        for j in 0..b.nrows() {
            let rj: Vec<f64> = b.row(j).iter().cloned().collect();
            k[(i, j)] = rbf_from_inv_sq(&ri, &rj, h.signal_variance, &inv_sq);
        }
    }
    Ok(k)
}

/// Training kernel K_{X,X} + σ_n²·I.
pub fn kernel_matrix_train(x: &DMatrix<f64>, h: &GpHyper) -> Result<DMatrix<f64>> {
    let mut k = kernel_matrix(x, x, h)?;
    for i in 0..k.nrows() {
        k[(i, i)] += h.noise_variance;
    }
    Ok(k)
}

/// Log marginal likelihood of the training targets and its gradient.
///
/// The value sums the standard Gaussian evidence over the Q output columns.
/// The gradient is taken with respect to the log-domain parameters, in the
/// order: log σ_f², log l (one entry, or one per channel when anisotropic),
/// log σ_n².
pub fn log_marginal_likelihood(h: &GpHyper, t: &TrainingSet) -> Result<(f64, Vec<f64>)> {
    h.validate(t.input_dim())?;
    let x = inputs_matrix(t);
    let y = targets_matrix(t);
    let m = t.len();
    let q = t.output_dim();

    let k_noiseless = kernel_matrix(&x, &x, h)?;
    let k_train = {
        let mut k = k_noiseless.clone();
        for i in 0..m {
            k[(i, i)] += h.noise_variance;
        }
        k
    };
    let chol = nalgebra::Cholesky::new(k_train).ok_or_else(|| {
        Error::Numerical(
            "training kernel matrix is not positive definite; increase noise_variance".into(),
        )
    })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    // alpha = K⁻¹ Y, one column per output
    let alpha = chol.solve(&y);
    let mut value = 0.0;
    for qi in 0..q {
        value += -0.5 * y.column(qi).dot(&alpha.column(qi));
    }
    value += -0.5 * q as f64 * log_det;
    value += -0.5 * (m * q) as f64 * (2.0 * std::f64::consts::PI).ln();

    // S = Σ_q α_q α_qᵀ − Q·K⁻¹;  ∂L/∂θ = ½ tr(S · ∂K/∂θ)
    let k_inv = chol.inverse();
    let mut s = &alpha * alpha.transpose();
    s -= k_inv * q as f64;

    let inv_sq = h.inv_sq_lengthscales(t.input_dim());
    let n_len = match &h.lengthscale {
        Lengthscale::Isotropic(_) => 1,
        Lengthscale::Anisotropic(ls) => ls.len(),
    };
    let mut grad = vec![0.0; 1 + n_len + 1];
    for i in 0..m {
        for j in 0..m {
            let sij = s[(i, j)];
            let kij = k_noiseless[(i, j)];
            // ∂K/∂log σ_f² = K (noiseless)
            grad[0] += 0.5 * sij * kij;
            match &h.lengthscale {
                Lengthscale::Isotropic(_) => {
                    let mut r2 = 0.0;
                    for p in 0..t.input_dim() {
                        let d = x[(i, p)] - x[(j, p)];
                        r2 += d * d * inv_sq[p];
                    }
                    // ∂K/∂log l = K · r²/l²  (scaled distance form)
                    grad[1] += 0.5 * sij * kij * r2;
                }
                Lengthscale::Anisotropic(_) => {
                    for p in 0..t.input_dim() {
                        let d = x[(i, p)] - x[(j, p)];
                        grad[1 + p] += 0.5 * sij * kij * d * d * inv_sq[p];
                    }
                }
            }
        }
        // ∂K/∂log σ_n² = σ_n² I
        grad[1 + n_len] += 0.5 * s[(i, i)] * h.noise_variance;
    }
    Ok((value, grad))
}

/// Fitted GP: optimized hyperparameters, retained inputs, Cholesky factor
/// of K_{X,X}+σ_n²I and the solved weights K⁻¹Y.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub train_inputs: DMatrix<f64>,
    pub chol_l: DMatrix<f64>,
    pub weights: DMatrix<f64>,
    pub log_marginal: f64,
}

/// Runs `h.restarts` gradient ascents from random log-uniform starting
/// points over [1e-2, 1e2] and keeps the hyperparameters with the highest
/// marginal likelihood.
pub fn gp_fit(t: &TrainingSet, h: &GpHyper, seed: u64) -> Result<GpModel> {
    h.validate(t.input_dim())?;
    if t.len() > h.max_training_rows {
        return Err(Error::Parameter(format!(
            "GP training set has {} rows, above the cap of {}; exact GP is O(M^3), subsample first",
            t.len(),
            h.max_training_rows
        )));
    }

    let n_len = match &h.lengthscale {
        Lengthscale::Isotropic(_) => 1,
        Lengthscale::Anisotropic(_) => t.input_dim(),
    };
    let lo = (1e-2f64).ln();
    let hi = (1e2f64).ln();

    let mut best: Option<(f64, GpHyper)> = None;
    let mut last_err = None;
    for r in 0..h.restarts {
        let mut rng = rng_for(seed, r as u64);
        let mut log_params: Vec<f64> =
            (0..1 + n_len).map(|_| rng.random_range(lo..hi)).collect();
        match ascend(&mut log_params, h, t) {
            Ok(value) => {
                let cand = hyper_from_log(&log_params, h);
                let better = match &best {
                    None => true,
                    Some((bv, _)) => value > *bv,
                };
                if better {
                    best = Some((value, cand));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (log_marginal, tuned) = best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Numerical("all GP restarts failed".into()))
    })?;

    let x = inputs_matrix(t);
    let y = targets_matrix(t);
    let k = kernel_matrix_train(&x, &tuned)?;
    let chol = nalgebra::Cholesky::new(k).ok_or_else(|| {
        Error::Numerical("optimized kernel matrix lost positive definiteness".into())
    })?;
    let weights = chol.solve(&y);
    Ok(GpModel {
        hyper: tuned,
        train_inputs: x,
        chol_l: chol.l(),
        weights,
        log_marginal,
    })
}

/// Fits with the hyperparameters exactly as given, skipping the ascent.
pub fn gp_fit_fixed(t: &TrainingSet, h: &GpHyper) -> Result<GpModel> {
    h.validate(t.input_dim())?;
    let x = inputs_matrix(t);
    let y = targets_matrix(t);
    let k = kernel_matrix_train(&x, h)?;
    let chol = nalgebra::Cholesky::new(k).ok_or_else(|| {
        Error::Numerical(
            "training kernel matrix is not positive definite; increase noise_variance".into(),
        )
    })?;
    let weights = chol.solve(&y);
    let (log_marginal, _) = log_marginal_likelihood(h, t)?;
    Ok(GpModel {
        hyper: h.clone(),
        train_inputs: x,
        chol_l: chol.l(),
        weights,
        log_marginal,
    })
}

fn hyper_from_log(log_params: &[f64], base: &GpHyper) -> GpHyper {
    let lengthscale = match &base.lengthscale {
        Lengthscale::Isotropic(_) => Lengthscale::Isotropic(log_params[1].exp()),
        Lengthscale::Anisotropic(_) => {
            Lengthscale::Anisotropic(log_params[1..].iter().map(|v| v.exp()).collect())
        }
    };
    GpHyper {
        signal_variance: log_params[0].exp(),
        lengthscale,
        ..base.clone()
    }
}

/// Backtracking-line-search gradient ascent over [log σ_f², log l...].
/// Returns the final likelihood value; `log_params` is updated in place.
fn ascend(log_params: &mut [f64], base: &GpHyper, t: &TrainingSet) -> Result<f64> {
    let eval = |lp: &[f64]| -> Result<(f64, Vec<f64>)> {
        let h = hyper_from_log(lp, base);
        let (v, g) = log_marginal_likelihood(&h, t)?;
        // drop the σ_n² component: noise is held fixed
        Ok((v, g[..lp.len()].to_vec()))
    };

    let (mut value, mut grad) = eval(log_params)?;
    let mut step = 0.1;
    for _ in 0..base.max_ascent_steps {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm * step < base.step_tolerance {
            break;
        }
        let mut accepted = false;
        while step > 1e-12 {
            let cand: Vec<f64> = log_params
                .iter()
                .zip(&grad)
                .map(|(p, g)| (p + step * g).clamp(-16.0, 16.0))
                .collect();
            match eval(&cand) {
                Ok((v, g)) if v > value => {
                    log_params.copy_from_slice(&cand);
                    value = v;
                    grad = g;
                    step = (step * 1.5).min(1.0);
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok(value)
}

impl GpModel {
    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Posterior mean K_{X*,X}·(K_{X,X}+σ_n²I)⁻¹·Y for a batch of inputs.
    pub fn predict_mean(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k_star = kernel_matrix(xs, &self.train_inputs, &self.hyper)?;
        Ok(&k_star * &self.weights)
    }

    /// Posterior covariance K_{X*,X*} − K_{X*,X}·K⁻¹·K_{X,X*}; the diagonal
    /// is clamped to be non-negative.
    pub fn predict_cov(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k_ss = kernel_matrix(xs, xs, &self.hyper)?;
        let k_star = kernel_matrix(xs, &self.train_inputs, &self.hyper)?;
        // solve via the cached Cholesky factor: K⁻¹ K_{X,X*} = L⁻ᵀ L⁻¹ K_{X,X*}
        let mut rhs = k_star.transpose();
        self.chol_l
            .clone()
            .solve_lower_triangular_mut(&mut rhs);
        self.chol_l
            .transpose()
            .solve_upper_triangular_mut(&mut rhs);
        let mut cov = k_ss - &k_star * rhs;
        for i in 0..cov.nrows() {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok(cov)
    }
}

pub(crate) fn inputs_matrix(t: &TrainingSet) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.len(), t.input_dim(), t.inputs())
}

pub(crate) fn targets_matrix(t: &TrainingSet) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.len(), t.output_dim(), t.targets())
}

//! Independent reference computations that certify the analytic ingredients.
//!
//! Every closed form elsewhere in the crate (drift iterates, noise vectors,
//! covariance expansions, contrast gradients, the partial-observation filter)
//! is cross-checked against a slower but structurally unrelated computation
//! from this module:
//!
//! * [`fd_operator_apply`] applies the generator `ℒφ = μ·∇φ + ½ tr(C ∇²φ)`
//!   (with `C = Σ_j A_j A_jᵀ`) or a directional derivative `ℒ_jφ = A_j·∇φ`
//!   by central finite differences, certifying the hand-derived iterates.
//! * [`fd_gradient`] differentiates any scalar objective numerically,
//!   certifying dual-number gradients.
//! * [`LinearSdeForm`] recovers the `(F, c, B)` form of a model whose drift
//!   is affine and whose noise is additive, and computes the *exact* one-step
//!   conditional mean and covariance via matrix exponentials.
//! * [`mc_conditional_moments`] estimates `E[m | x]` and `E[m mᵀ | x]` of the
//!   standardized one-step residual by simulation on a fine inner grid,
//!   certifying the truncation orders of the mean and covariance expansions.
//! * [`affine_gaussian_chain_loglik`] marginalizes the hidden coordinate of
//!   an affine-Gaussian chain by assembling the full joint normal — the
//!   brute-force counterpart of the sequential filter.
//!
//! The Monte-Carlo estimator needs care: the deviations it must resolve are
//! orders of magnitude below the raw sampling noise at realistic draw counts.
//! It therefore couples three variance-reduction devices (antithetic paths, a
//! control variate with exactly known second moment, and an inner scheme of
//! the same expansion order as the object under test); see
//! [`mc_conditional_moments`] for details.

use crate::kalman::{AffineGaussianStep, FilterState};
use crate::linalg::SMat;
use crate::model::{Model, ModelError};
use crate::moments::{block_scales, Expansion, MomentsError};
use crate::scalar::{Dual4, KahanSum, Scalar};
use crate::simulate::{derive_seed, EXPLOSION_GUARD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt;

/// Errors from the reference computations.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// The model drift is not affine in the state (probe deviation shown).
    NotAffine { coordinate: usize, deviation: f64 },
    /// The model noise is not additive (state-independent).
    NotConstantNoise { deviation: f64 },
    /// A covariance that must be positive definite failed to factor.
    Factorization { context: &'static str },
    /// A simulated path left the admissible region.
    Exploded { substep: usize, value: f64 },
    /// Failure in the moment expansion this oracle drives.
    Moments(MomentsError),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::NotAffine { coordinate, deviation } => write!(
                f,
                "drift coordinate {coordinate} is not affine in the state (probe deviation {deviation:.3e})"
            ),
            OracleError::NotConstantNoise { deviation } => {
                write!(f, "noise is state-dependent (probe deviation {deviation:.3e})")
            }
            OracleError::Factorization { context } => {
                write!(f, "positive-definite factorization failed: {context}")
            }
            OracleError::Exploded { substep, value } => {
                write!(f, "fine path exploded at substep {substep} (|x| = {value:.3e})")
            }
            OracleError::Moments(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for OracleError {}

impl From<MomentsError> for OracleError {
    fn from(e: MomentsError) -> Self {
        OracleError::Moments(e)
    }
}

impl From<ModelError> for OracleError {
    fn from(e: ModelError) -> Self {
        OracleError::Moments(MomentsError::Model(e))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference operator application
// ---------------------------------------------------------------------------

/// Which first-order operator to apply by finite differences.
#[derive(Clone, Copy, Debug)]
pub enum OperatorKind {
    /// The full generator `ℒφ = μ·∇φ + ½ Σ C_{l₁l₂} ∂²φ`, `C = Σ_j A_jA_jᵀ`.
    Generator,
    /// Transport along diffusion column j: `ℒ_jφ = A_j·∇φ`.
    Directional(usize),
}

/// Apply `kind` to the vector field `f : ℝᴺ → ℝᵐ` at `x` by second-order
/// central differences with step `h_rel · (1 + ‖x‖)`. Slow and allocation
/// happy by design — this is a certification tool, not a production path.
pub fn fd_operator_apply<M, F>(
    model: &M,
    theta: &[f64],
    kind: OperatorKind,
    f: F,
    m: usize,
    x: &[f64],
    h_rel: f64,
) -> Vec<f64>
where
    M: Model,
    F: Fn(&[f64], &mut [f64]),
{
    let n = x.len();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = h_rel * (1.0 + norm);
    let mut out = vec![0.0; m];
    let mut fp = vec![0.0; m];
    let mut fm = vec![0.0; m];
    let mut xp = x.to_vec();

    // First-order transport coefficients: μ for the generator, A_j for a
    // directional derivative.
    let mut coeff = vec![0.0; n];
    match kind {
        OperatorKind::Generator => model.drift(x, theta, &mut coeff),
        OperatorKind::Directional(j) => model.diffusion_col(j, x, theta, &mut coeff),
    }
    for l in 0..n {
        if coeff[l] == 0.0 {
            continue;
        }
        xp[l] = x[l] + h;
        f(&xp, &mut fp);
        xp[l] = x[l] - h;
        f(&xp, &mut fm);
        xp[l] = x[l];
        for i in 0..m {
            out[i] += coeff[l] * (fp[i] - fm[i]) / (2.0 * h);
        }
    }

    if let OperatorKind::Generator = kind {
        // Second-order term ½ Σ C_{l₁l₂} ∂²_{l₁l₂} f.
        let d = model.class().d;
        let mut cmat: SMat<f64> = SMat::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..d {
            model.diffusion_col(j, x, theta, &mut col);
            for i1 in 0..n {
                for i2 in 0..n {
                    cmat[(i1, i2)] += col[i1] * col[i2];
                }
            }
        }
        let mut f0 = vec![0.0; m];
        f(x, &mut f0);
        let mut fpp = vec![0.0; m];
        let mut fpm = vec![0.0; m];
        let mut fmp = vec![0.0; m];
        let mut fmm = vec![0.0; m];
        for l1 in 0..n {
            for l2 in l1..n {
                let c = cmat[(l1, l2)];
                if c == 0.0 {
                    continue;
                }
                if l1 == l2 {
                    xp[l1] = x[l1] + h;
                    f(&xp, &mut fp);
                    xp[l1] = x[l1] - h;
                    f(&xp, &mut fm);
                    xp[l1] = x[l1];
                    for i in 0..m {
                        out[i] += 0.5 * c * (fp[i] - 2.0 * f0[i] + fm[i]) / (h * h);
                    }
                } else {
                    // Off-diagonal pairs appear twice in the symmetric sum,
                    // cancelling the ½ prefactor.
                    xp[l1] = x[l1] + h;
                    xp[l2] = x[l2] + h;
                    f(&xp, &mut fpp);
                    xp[l2] = x[l2] - h;
                    f(&xp, &mut fpm);
                    xp[l1] = x[l1] - h;
                    f(&xp, &mut fmm);
                    xp[l2] = x[l2] + h;
                    f(&xp, &mut fmp);
                    xp[l1] = x[l1];
                    xp[l2] = x[l2];
                    for i in 0..m {
                        out[i] += c * (fpp[i] - fpm[i] - fmp[i] + fmm[i]) / (4.0 * h * h);
                    }
                }
            }
        }
    }
    out
}

/// Central finite-difference gradient of a scalar objective, with per
/// coordinate step `rel_step · (1 + |θ_i|)`.
pub fn fd_gradient<F>(mut f: F, theta: &[f64], rel_step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    let mut th = theta.to_vec();
    for i in 0..theta.len() {
        let step = rel_step * (1.0 + theta[i].abs());
        th[i] = theta[i] + step;
        let up = f(&th);
        th[i] = theta[i] - step;
        let down = f(&th);
        th[i] = theta[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

// ---------------------------------------------------------------------------
// Exact moments for affine models
// ---------------------------------------------------------------------------

/// The `(F, c, B)` form of a model with affine drift `μ(x) = Fx + c` and
/// additive noise columns `B`, for which one-step conditional moments are
/// available in closed form through matrix exponentials.
#[derive(Clone, Debug)]
pub struct LinearSdeForm {
    pub drift_matrix: SMat<f64>,
    pub drift_offset: Vec<f64>,
    /// N×d noise matrix (columns are the diffusion columns).
    pub noise: SMat<f64>,
}

impl LinearSdeForm {
    /// Recover `(F, c, B)` by probing the drift at the origin and at unit
    /// vectors, then verify affinity of the drift and additivity of the
    /// noise at every supplied check point.
    pub fn from_model<M: Model>(
        model: &M,
        theta: &[f64],
        check_points: &[Vec<f64>],
    ) -> Result<Self, OracleError> {
        let class = model.class();
        let n = class.dim();
        let d = class.d;
        let origin = vec![0.0; n];
        let mut c = vec![0.0; n];
        model.drift(&origin, theta, &mut c);

        let mut fmat = SMat::zeros(n, n);
        let mut probe = vec![0.0; n];
        let mut mu = vec![0.0; n];
        for l in 0..n {
            probe[l] = 1.0;
            model.drift(&probe, theta, &mut mu);
            probe[l] = 0.0;
            for i in 0..n {
                fmat[(i, l)] = mu[i] - c[i];
            }
        }

        let mut bmat = SMat::zeros(n, d);
        let mut col = vec![0.0; n];
        for j in 0..d {
            model.diffusion_col(j, &origin, theta, &mut col);
            for i in 0..n {
                bmat[(i, j)] = col[i];
            }
        }

        for x in check_points {
            model.drift(x, theta, &mut mu);
            for i in 0..n {
                let mut affine = c[i];
                for l in 0..n {
                    affine += fmat[(i, l)] * x[l];
                }
                let dev = (mu[i] - affine).abs();
                if dev > 1e-9 * (1.0 + mu[i].abs()) {
                    return Err(OracleError::NotAffine { coordinate: i, deviation: dev });
                }
            }
            for j in 0..d {
                model.diffusion_col(j, x, theta, &mut col);
                for i in 0..n {
                    let dev = (col[i] - bmat[(i, j)]).abs();
                    if dev > 1e-9 * (1.0 + col[i].abs()) {
                        return Err(OracleError::NotConstantNoise { deviation: dev });
                    }
                }
            }
        }

        Ok(LinearSdeForm { drift_matrix: fmat, drift_offset: c, noise: bmat })
    }

    /// Exact conditional mean of `X_Δ` given `X_0 = x`: the top block of
    /// `exp(Δ·[[F, c], [0, 0]]) · (x, 1)`.
    pub fn exact_mean(&self, x: &[f64], dt: f64) -> Vec<f64> {
        let n = x.len();
        let mut aug = SMat::zeros(n + 1, n + 1);
        for i in 0..n {
            for l in 0..n {
                aug[(i, l)] = self.drift_matrix[(i, l)] * dt;
            }
            aug[(i, n)] = self.drift_offset[i] * dt;
        }
        let e = aug.expm();
        (0..n)
            .map(|i| (0..n).map(|l| e[(i, l)] * x[l]).sum::<f64>() + e[(i, n)])
            .collect()
    }

    /// Exact conditional covariance `∫_0^Δ e^{Fs} BBᵀ e^{Fᵀs} ds`, computed
    /// from the exponential of the block matrix `[[−F, BBᵀ], [0, Fᵀ]]`.
    pub fn exact_cov(&self, dt: f64) -> SMat<f64> {
        let n = self.drift_offset.len();
        let mut q = SMat::zeros(n, n);
        for i in 0..n {
            for l in 0..n {
                let mut acc = 0.0;
                for j in 0..self.noise.cols() {
                    acc += self.noise[(i, j)] * self.noise[(l, j)];
                }
                q[(i, l)] = acc;
            }
        }
        let mut h = SMat::zeros(2 * n, 2 * n);
        for i in 0..n {
            for l in 0..n {
                h[(i, l)] = -self.drift_matrix[(i, l)] * dt;
                h[(i, n + l)] = q[(i, l)] * dt;
                h[(n + i, n + l)] = self.drift_matrix[(l, i)] * dt;
            }
        }
        let e = h.expm();
        let mut cov = SMat::zeros(n, n);
        for i in 0..n {
            for l in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    // (E₂₂ᵀ E₁₂)_{il}
                    acc += e[(n + k, n + i)] * e[(k, n + l)];
                }
                cov[(i, l)] = acc;
            }
        }
        cov.symmetrize();
        cov
    }

    /// Exact one-step conditional mean and covariance.
    pub fn exact_moments(&self, x: &[f64], dt: f64) -> (Vec<f64>, SMat<f64>) {
        (self.exact_mean(x, dt), self.exact_cov(dt))
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo conditional moments
// ---------------------------------------------------------------------------

/// Inner-grid stepper at the same expansion order as the object under test:
/// one substep draws from `N(r_p(h, x), D_h Ξ_{K_p}(h, x) D_h)`. Matching the
/// order keeps the inner discretization bias far below the truncation signal
/// the Monte-Carlo check must resolve.
struct FineStepper<'a, M: Model> {
    exp: &'a Expansion<'a, M>,
    theta: &'a [f64],
    h: f64,
    n: usize,
    /// Row-scaled Cholesky factor `D_h · chol(Ξ(h,x))`; recomputed per step
    /// unless the covariance is state-independent.
    factor: SMat<f64>,
    hoisted: bool,
    scales: Vec<f64>,
    mean: Vec<f64>,
    work: Vec<f64>,
    cov: SMat<f64>,
    scratch: SMat<f64>,
    cwork: Vec<f64>,
}

impl<'a, M: Model> FineStepper<'a, M> {
    fn new(exp: &'a Expansion<'a, M>, theta: &'a [f64], h: f64) -> Result<Self, OracleError> {
        let n = exp.class().dim();
        let model = exp.model();
        let hoisted = !model.sigma0_state_dependent() && !model.corrections_state_dependent();
        let mut stepper = FineStepper {
            exp,
            theta,
            h,
            n,
            factor: SMat::zeros(n, n),
            hoisted: false,
            scales: block_scales(exp.class(), h),
            mean: vec![0.0; n],
            work: vec![0.0; n],
            cov: SMat::zeros(n, n),
            scratch: SMat::zeros(n, n),
            cwork: vec![0.0; 2 * n],
        };
        if hoisted {
            let origin = vec![0.0; n];
            stepper.refresh_factor(&origin)?;
            stepper.hoisted = true;
        }
        Ok(stepper)
    }

    fn refresh_factor(&mut self, x: &[f64]) -> Result<(), OracleError> {
        self.exp
            .covariance_into(x, self.theta, self.h, &mut self.cov, &mut self.scratch, &mut self.cwork)?;
        let chol = self
            .cov
            .cholesky()
            .ok_or(OracleError::Factorization { context: "inner-step covariance" })?;
        self.factor = chol.into_lower();
        for i in 0..self.n {
            for j in 0..=i {
                self.factor[(i, j)] *= self.scales[i];
            }
        }
        Ok(())
    }

    /// Advance `x` one substep driven by `sign · xi`.
    fn step(&mut self, x: &mut [f64], xi: &[f64], sign: f64) -> Result<(), OracleError> {
        if !self.hoisted {
            self.refresh_factor(x)?;
        }
        self.exp.mean_into(x, self.theta, self.h, &mut self.mean, &mut self.work)?;
        for i in 0..self.n {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += self.factor[(i, j)] * sign * xi[j];
            }
            x[i] = acc;
        }
        Ok(())
    }
}

/// Monte-Carlo estimates of the conditional moments of the standardized
/// one-step residual `m = D_Δ^{-1}(X_Δ − r_p(Δ, x))`.
#[derive(Clone, Debug)]
pub struct McMoments {
    /// Estimate of `E[m | x]` (antithetic pair average).
    pub mean: Vec<f64>,
    /// Estimate of `E[m mᵀ | x]` (control-variate adjusted).
    pub second: SMat<f64>,
    /// The expansion's truncated covariance `Ξ_{K_p}(Δ, x)` the second
    /// moment is meant to match.
    pub xi: SMat<f64>,
    /// Number of simulated paths (twice the antithetic pair count).
    pub n_draws: usize,
}

impl McMoments {
    /// Frobenius norm of `E[m mᵀ] − Ξ_{K_p}`.
    pub fn second_deviation_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.second.as_slice().iter().zip(self.xi.as_slice()) {
            acc += (a - b) * (a - b);
        }
        acc.sqrt()
    }

    /// Euclidean norm of the estimated conditional mean.
    pub fn mean_norm(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-chunk accumulator; merged in chunk order so results do not depend on
/// the number of worker threads.
struct ChunkAcc {
    mean: Vec<f64>,
    dev: Vec<f64>,
    pairs: usize,
}

/// Estimate the conditional mean `E[m | x]` and second moment `E[m mᵀ | x]`
/// of the standardized one-step residual over `dt`, by simulating
/// `fine_substeps` inner steps per path.
///
/// The deviations under test sit far below the raw per-draw noise, so three
/// variance-reduction devices are combined:
///
/// * **Antithetic pairs** — each pair runs the inner grid with `+ξ` and
///   `−ξ`. The pair-averaged residual removes the entire Gaussian part of
///   `m`; for models with affine drift and additive noise the mean estimate
///   becomes exact (zero sampling variance).
/// * **Exact-moment control variate** — alongside each `+ξ` path a linear
///   functional `v = Σ_t (Π_{s>t} J_s) B_t ξ_t` is accumulated with matrices
///   frozen on the deterministic inner flow (Jacobians by forward-mode
///   differentiation). `v` is exactly Gaussian with covariance computable in
///   closed form, so `g = chol(Ξ_K) · chol(Cov v)^{-1} · v` has second moment
///   *exactly* `Ξ_K` while staying pathwise close to `m`. The estimator
///   `Ξ_K + avg(m mᵀ − g gᵀ)` is unbiased for `E[m mᵀ]` with per-draw noise
///   proportional to the small deviation instead of `O(1)`.
/// * **Order-matched inner scheme** — substeps draw from the same order-p
///   expansion, so the inner bias is quadratically (not linearly) suppressed
///   in the substep count.
///
/// Work is sharded into fixed chunks of antithetic pairs with per-chunk
/// seeds derived from `seed`; results are bitwise independent of the number
/// of worker threads.
pub fn mc_conditional_moments<M: Model + Sync>(
    model: &M,
    p: usize,
    x: &[f64],
    theta: &[f64],
    dt: f64,
    n_draws: usize,
    fine_substeps: usize,
    seed: u64,
) -> Result<McMoments, OracleError> {
    assert!(fine_substeps >= 1, "need at least one inner substep");
    assert!(n_draws >= 2, "need at least one antithetic pair");
    let exp = Expansion::new(model, p)?;
    let n = exp.class().dim();
    let steps = fine_substeps;
    let h = dt / steps as f64;

    // Coarse-step ingredients at the conditioning point.
    let r_coarse = exp.mean(x, theta, dt)?;
    let xi = exp.covariance(x, theta, dt)?;
    let l_xi = xi
        .cholesky()
        .ok_or(OracleError::Factorization { context: "coarse truncated covariance" })?
        .into_lower();
    let d_coarse = block_scales(exp.class(), dt);

    // Deterministic inner flow: per-substep Jacobians J_t (forward-mode) and
    // scaled noise factors B_t, plus the exact covariance P of the linear
    // noise functional v.
    let scales_h = block_scales(exp.class(), h);
    let theta_d: Vec<Dual4> = theta.iter().map(|&v| Dual4::c(v)).collect();
    let mut xbar = x.to_vec();
    let mut xd = vec![Dual4::c(0.0); n];
    let mut mean_d = vec![Dual4::c(0.0); n];
    let mut work_d = vec![Dual4::c(0.0); n];
    let mut cov_f = SMat::zeros(n, n);
    let mut scratch_f = SMat::zeros(n, n);
    let mut cwork_f = vec![0.0; 2 * n];
    let mut jmats: Vec<SMat<f64>> = Vec::with_capacity(steps);
    let mut bmats: Vec<SMat<f64>> = Vec::with_capacity(steps);
    let mut pmat = SMat::zeros(n, n);
    for _t in 0..steps {
        for i in 0..n {
            xd[i] = Dual4::var(xbar[i], i);
        }
        exp.mean_into(&xd, &theta_d, h, &mut mean_d, &mut work_d)?;
        let mut jt = SMat::zeros(n, n);
        for i in 0..n {
            for l in 0..n {
                jt[(i, l)] = mean_d[i].dx[l];
            }
        }
        exp.covariance_into(&xbar, theta, h, &mut cov_f, &mut scratch_f, &mut cwork_f)?;
        let mut bt = cov_f
            .cholesky()
            .ok_or(OracleError::Factorization { context: "inner-step covariance" })?
            .into_lower();
        for i in 0..n {
            for j in 0..=i {
                bt[(i, j)] *= scales_h[i];
            }
        }
        // P ← J P Jᵀ + B Bᵀ
        let jp = jt.mul(&pmat);
        pmat = jp.mul(&jt.transpose());
        for i in 0..n {
            for l in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += bt[(i, k)] * bt[(l, k)];
                }
                pmat[(i, l)] += acc;
            }
        }
        for i in 0..n {
            xbar[i] = mean_d[i].re;
        }
        jmats.push(jt);
        bmats.push(bt);
    }
    pmat.symmetrize();
    let mut p_std = pmat;
    for i in 0..n {
        for l in 0..n {
            p_std[(i, l)] /= d_coarse[i] * d_coarse[l];
        }
    }
    let l_p = p_std
        .cholesky()
        .ok_or(OracleError::Factorization { context: "linearized noise covariance" })?
        .into_lower();
    let r_map = l_xi.mul(&lower_triangular_inverse(&l_p));

    // Antithetic pairs, sharded into fixed deterministic chunks.
    let pairs = n_draws.div_ceil(2);
    const CHUNK: usize = 8192;
    let n_chunks = pairs.div_ceil(CHUNK);
    let chunks: Result<Vec<ChunkAcc>, OracleError> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * CHUNK;
            let hi = pairs.min(lo + CHUNK);
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, ci as u64));
            let mut stepper = FineStepper::new(&exp, theta, h)?;
            let mut mean_acc = vec![KahanSum::<f64>::new(); n];
            let mut dev_acc = vec![KahanSum::<f64>::new(); n * n];
            let mut noise = vec![0.0; steps * n];
            let mut x_plus = vec![0.0; n];
            let mut x_minus = vec![0.0; n];
            let mut v = vec![0.0; n];
            let mut v_next = vec![0.0; n];
            let mut m_plus = vec![0.0; n];
            let mut m_minus = vec![0.0; n];
            let mut g = vec![0.0; n];
            for _ in lo..hi {
                for z in noise.iter_mut() {
                    *z = rng.sample(StandardNormal);
                }
                x_plus.copy_from_slice(x);
                x_minus.copy_from_slice(x);
                v.iter_mut().for_each(|e| *e = 0.0);
                for t in 0..steps {
                    let xi_t = &noise[t * n..(t + 1) * n];
                    // v ← J_t v + B_t ξ_t (frozen matrices, exactly Gaussian)
                    let jt = &jmats[t];
                    let bt = &bmats[t];
                    for i in 0..n {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += jt[(i, l)] * v[l];
                        }
                        for l in 0..=i {
                            acc += bt[(i, l)] * xi_t[l];
                        }
                        v_next[i] = acc;
                    }
                    std::mem::swap(&mut v, &mut v_next);
                    stepper.step(&mut x_plus, xi_t, 1.0)?;
                    stepper.step(&mut x_minus, xi_t, -1.0)?;
                    for (&a, &b) in x_plus.iter().zip(x_minus.iter()) {
                        if !a.is_finite() || !b.is_finite() || a.abs() > EXPLOSION_GUARD || b.abs() > EXPLOSION_GUARD {
                            return Err(OracleError::Exploded {
                                substep: t,
                                value: if a.is_finite() { b } else { a },
                            });
                        }
                    }
                }
                for i in 0..n {
                    m_plus[i] = (x_plus[i] - r_coarse[i]) / d_coarse[i];
                    m_minus[i] = (x_minus[i] - r_coarse[i]) / d_coarse[i];
                }
                for i in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += r_map[(i, l)] * (v[l] / d_coarse[l]);
                    }
                    g[i] = acc;
                }
                for i in 0..n {
                    mean_acc[i].add(0.5 * (m_plus[i] + m_minus[i]));
                    for j in 0..n {
                        dev_acc[i * n + j].add(
                            0.5 * (m_plus[i] * m_plus[j] + m_minus[i] * m_minus[j]) - g[i] * g[j],
                        );
                    }
                }
            }
            Ok(ChunkAcc {
                mean: mean_acc.iter().map(|k| k.total()).collect(),
                dev: dev_acc.iter().map(|k| k.total()).collect(),
                pairs: hi - lo,
            })
        })
        .collect();
    let chunks = chunks?;

    let mut mean_total = vec![KahanSum::<f64>::new(); n];
    let mut dev_total = vec![KahanSum::<f64>::new(); n * n];
    let mut pair_total = 0usize;
    for c in &chunks {
        for i in 0..n {
            mean_total[i].add(c.mean[i]);
        }
        for e in 0..n * n {
            dev_total[e].add(c.dev[e]);
        }
        pair_total += c.pairs;
    }
    let inv = 1.0 / pair_total as f64;
    let mean: Vec<f64> = mean_total.iter().map(|k| k.total() * inv).collect();
    let mut second = xi.clone();
    for i in 0..n {
        for j in 0..n {
            second[(i, j)] += dev_total[i * n + j].total() * inv;
        }
    }
    Ok(McMoments { mean, second, xi, n_draws: 2 * pair_total })
}

/// Forward-substitution inverse of a lower-triangular matrix.
fn lower_triangular_inverse(l: &SMat<f64>) -> SMat<f64> {
    let n = l.rows();
    let mut inv = SMat::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[(i, k)] * inv[(k, col)];
            }
            inv[(i, col)] = s / l[(i, i)];
        }
    }
    inv
}

// ---------------------------------------------------------------------------
// Joint-Gaussian marginalization
// ---------------------------------------------------------------------------

/// Log-likelihood of an observed record `obs = [x_1, …, x_n]` under the
/// affine-Gaussian chain `z_k = shift_k + slope_k · Y_{k−1} + η_k`,
/// `η_k ~ N(0, Q_k)`, `z_k = (X_k, Y_k)`, with a Gaussian prior on `Y_0` —
/// computed by assembling the full `2n`-dimensional joint normal and
/// marginalizing to the X coordinates. Brute-force counterpart of the
/// sequential filter, practical only for short records.
pub fn affine_gaussian_chain_loglik(
    prior: &FilterState,
    steps: &[AffineGaussianStep],
    obs: &[f64],
) -> Result<f64, OracleError> {
    let n = steps.len();
    assert_eq!(obs.len(), n, "one observation per chain step");
    assert!(n >= 1, "need at least one step");
    let dim = 2 * n;
    let mut mu = vec![0.0; dim];
    let mut cmat = SMat::zeros(dim, dim);
    for (k, s) in steps.iter().enumerate() {
        let xk = 2 * k;
        let yk = xk + 1;
        let (prev_mean, prev_var) = if k == 0 {
            (prior.mean, prior.var)
        } else {
            (mu[xk - 1], cmat[(xk - 1, xk - 1)])
        };
        mu[xk] = s.shift[0] + s.slope[0] * prev_mean;
        mu[yk] = s.shift[1] + s.slope[1] * prev_mean;
        if k > 0 {
            let yprev = xk - 1;
            for col in 0..xk {
                let cy = cmat[(yprev, col)];
                cmat[(xk, col)] = s.slope[0] * cy;
                cmat[(col, xk)] = s.slope[0] * cy;
                cmat[(yk, col)] = s.slope[1] * cy;
                cmat[(col, yk)] = s.slope[1] * cy;
            }
        }
        cmat[(xk, xk)] = s.cov_xx + s.slope[0] * s.slope[0] * prev_var;
        cmat[(xk, yk)] = s.cov_xy + s.slope[0] * s.slope[1] * prev_var;
        cmat[(yk, xk)] = cmat[(xk, yk)];
        cmat[(yk, yk)] = s.cov_yy + s.slope[1] * s.slope[1] * prev_var;
    }

    // Marginal of the X coordinates (even indices).
    let mut cx = SMat::zeros(n, n);
    let mut resid = vec![0.0; n];
    for i in 0..n {
        resid[i] = obs[i] - mu[2 * i];
        for j in 0..n {
            cx[(i, j)] = cmat[(2 * i, 2 * j)];
        }
    }
    let chol = cx
        .cholesky()
        .ok_or(OracleError::Factorization { context: "joint X-marginal covariance" })?;
    let log_det = chol.log_det();
    let mut solved = resid.clone();
    chol.solve_in_place(&mut solved);
    let quad: f64 = resid.iter().zip(&solved).map(|(a, b)| a * b).sum();
    Ok(-0.5 * (n as f64 * (std::f64::consts::TAU).ln() + log_det + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::{Builtin, BUILTIN_IDS};

    /// Fixed generic probe points, truncated to the model dimension.
    fn probe_points(n: usize) -> Vec<Vec<f64>> {
        let table: [[f64; 3]; 3] =
            [[0.7, -0.4, 0.5], [1.3, 0.9, -0.8], [-0.6, 1.1, 0.3]];
        table.iter().map(|row| row[..n].to_vec()).collect()
    }

    fn assert_close(got: &[f64], want: &[f64], tol_rel: f64, what: &str) {
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            let tol = tol_rel * (1.0 + w.abs());
            assert!(
                (g - w).abs() <= tol,
                "{what}[{i}]: got {g:.12e}, want {w:.12e} (tol {tol:.3e})"
            );
        }
    }

    /// The closed-form drift iterates of every built-in agree with a fresh
    /// finite-difference application of the generator.
    #[test]
    fn generator_iterates_match_finite_differences() {
        for id in BUILTIN_IDS {
            let model = Builtin::from_id(id).unwrap();
            let theta = model.reference_theta();
            let class = model.class();
            let k_top = model.max_p() / 2;
            for x in probe_points(class.dim()) {
                for b in 0..class.n_blocks() {
                    let nb = class.block_range(b).len();
                    let q_b = k_top + class.smoothness(b);
                    let mut drift = vec![0.0; class.dim()];
                    model.drift(&x, &theta, &mut drift);
                    let mut first = vec![0.0; nb];
                    model.gen_mu(1, b, &x, &theta, &mut first).unwrap();
                    assert_close(
                        &first,
                        &drift[class.block_range(b)],
                        1e-14,
                        &format!("{id} block {b} first iterate"),
                    );
                    for k in 1..q_b {
                        let mut want = vec![0.0; nb];
                        model.gen_mu(k + 1, b, &x, &theta, &mut want).unwrap();
                        let got = fd_operator_apply(
                            &model,
                            &theta,
                            OperatorKind::Generator,
                            |y, out| model.gen_mu(k, b, y, &theta, out).unwrap(),
                            nb,
                            &x,
                            1e-4,
                        );
                        assert_close(
                            &got,
                            &want,
                            5e-4,
                            &format!("{id} block {b} iterate {}", k + 1),
                        );
                    }
                }
            }
        }
    }

    /// The closed-form leading noise vectors of every smooth block agree
    /// with a directional finite difference of the previous iterate.
    #[test]
    fn leading_noise_vectors_match_finite_differences() {
        for id in BUILTIN_IDS {
            let model = Builtin::from_id(id).unwrap();
            let theta = model.reference_theta();
            let class = model.class();
            for x in probe_points(class.dim()) {
                for b in 0..class.n_blocks() {
                    let a_b = class.smoothness(b);
                    if a_b == 0 {
                        continue; // rough block: the diffusion column itself
                    }
                    let nb = class.block_range(b).len();
                    for j in 0..class.d {
                        let mut want = vec![0.0; nb];
                        model.dir_mu(j, b, &x, &theta, &mut want);
                        let got = fd_operator_apply(
                            &model,
                            &theta,
                            OperatorKind::Directional(j),
                            |y, out| model.gen_mu(a_b, b, y, &theta, out).unwrap(),
                            nb,
                            &x,
                            1e-4,
                        );
                        assert_close(
                            &got,
                            &want,
                            5e-4,
                            &format!("{id} block {b} noise vector {j}"),
                        );
                    }
                }
            }
        }
    }

    /// Scalar mean-reverting diffusion `dX = −X dt + dW`, `X₀ = 1`, `Δ = 1`:
    /// `E[X_Δ] = e^{−1}` and `Var[X_Δ] = (1 − e^{−2})/2`.
    #[test]
    fn mean_reverting_exact_moments_frozen() {
        let form = LinearSdeForm {
            drift_matrix: SMat::from_rows(&[&[-1.0]]),
            drift_offset: vec![0.0],
            noise: SMat::from_rows(&[&[1.0]]),
        };
        let (mean, cov) = form.exact_moments(&[1.0], 1.0);
        assert!((mean[0] - 0.36787944117144233).abs() < 1e-14, "mean {:.17}", mean[0]);
        assert!((cov[(0, 0)] - 0.43233235838169365).abs() < 1e-14, "var {:.17}", cov[(0, 0)]);
    }

    /// Probing recovers the affine form of the kinetic model with quadratic
    /// potential, and rejects the double-well variant.
    #[test]
    fn affine_form_recovery_and_rejection() {
        let model = Builtin::from_id("langevin-quad").unwrap();
        let theta = [-1.5, 2.0];
        let form = LinearSdeForm::from_model(&model, &theta, &probe_points(2)).unwrap();
        let f = &form.drift_matrix;
        assert!((f[(0, 0)]).abs() < 1e-12 && (f[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((f[(1, 0)] + 2.0).abs() < 1e-12 && (f[(1, 1)] + 1.5).abs() < 1e-12);
        assert!(form.drift_offset.iter().all(|c| c.abs() < 1e-12));
        assert!((form.noise[(0, 0)]).abs() < 1e-12);
        assert!((form.noise[(1, 0)] - 2.0).abs() < 1e-12);

        let dw = Builtin::from_id("langevin-dw").unwrap();
        match LinearSdeForm::from_model(&dw, &theta, &probe_points(2)) {
            Err(OracleError::NotAffine { .. }) => {}
            other => panic!("expected non-affine rejection, got {other:?}"),
        }
    }

    /// At a small step the order-p mean and covariance expansions of the
    /// affine kinetic model agree with the exact matrix-exponential moments.
    #[test]
    fn expansions_track_exact_moments_at_small_steps() {
        let model = Builtin::from_id("langevin-quad").unwrap();
        let theta = [-1.5, 2.0];
        let exp = Expansion::new(&model, 4).unwrap();
        let form = LinearSdeForm::from_model(&model, &theta, &probe_points(2)).unwrap();
        let x = [0.8, -0.5];
        let dt = 0.005;
        let (exact_mean, exact_cov) = form.exact_moments(&x, dt);
        let mean = exp.mean(&x, &theta, dt).unwrap();
        assert_close(&mean, &exact_mean, 1e-7, "expanded mean");
        let xi = exp.covariance(&x, &theta, dt).unwrap();
        let scales = block_scales(exp.class(), dt);
        for i in 0..2 {
            for j in 0..2 {
                let natural = xi[(i, j)] * scales[i] * scales[j];
                let want = exact_cov[(i, j)];
                assert!(
                    (natural - want).abs() <= 1e-7 * (1.0 + want.abs()),
                    "cov[{i}{j}]: got {natural:.12e}, want {want:.12e}"
                );
            }
        }
    }

    #[test]
    fn lower_triangular_inverse_round_trips() {
        let l = SMat::from_rows(&[&[2.0, 0.0, 0.0], &[0.5, 1.5, 0.0], &[-0.3, 0.7, 0.9]]);
        let inv = lower_triangular_inverse(&l);
        let prod = l.mul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    /// The Monte-Carlo moment estimator is bitwise reproducible for a fixed
    /// seed and, thanks to the variance reduction, already tight at a few
    /// thousand draws.
    #[test]
    fn mc_moments_reproducible_and_tight() {
        let model = Builtin::from_id("langevin-quad").unwrap();
        let theta = [-1.5, 2.0];
        let x = [0.6, -0.4];
        let run = || {
            mc_conditional_moments(&model, 2, &x, &theta, 0.02, 2000, 30, 7).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.mean, b.mean, "mean estimates must be bitwise reproducible");
        assert_eq!(
            a.second.as_slice(),
            b.second.as_slice(),
            "second-moment estimates must be bitwise reproducible"
        );
        assert_eq!(a.n_draws, 2000);
        // Affine drift + additive noise: the pair average kills the sampling
        // noise in the mean entirely, leaving the genuine truncation signal
        // E[m] = O(Δ^{3/2}) at order 2 — halving Δ must shrink it ≈ 2^{3/2}.
        assert!(a.mean_norm() < 5e-3, "mean norm {:.3e}", a.mean_norm());
        let half = mc_conditional_moments(&model, 2, &x, &theta, 0.01, 2000, 30, 7).unwrap();
        let ratio = a.mean_norm() / half.mean_norm();
        assert!(
            (2.5..3.2).contains(&ratio),
            "mean norms {:.3e} → {:.3e}, ratio {ratio:.3} not ≈ 2^1.5",
            a.mean_norm(),
            half.mean_norm()
        );
        assert!(
            a.second_deviation_norm() < 5e-3,
            "second-moment deviation {:.3e}",
            a.second_deviation_norm()
        );

        // Nonlinear oscillator: sampling noise no longer cancels exactly,
        // but the Δ^{3/2} truncation signal (large here: the second drift
        // iterate of the fast coordinate carries 1/ε³) still dominates and
        // must show the right decay when Δ halves.
        let fhn = Builtin::from_id("fhn").unwrap();
        let th = [0.1, 1.5, 0.3, 0.6];
        let m1 =
            mc_conditional_moments(&fhn, 2, &[0.9, 0.5], &th, 0.01, 4000, 30, 11).unwrap();
        let m2 =
            mc_conditional_moments(&fhn, 2, &[0.9, 0.5], &th, 0.005, 4000, 30, 11).unwrap();
        assert!(m1.mean_norm() < 0.5, "fhn mean norm {:.3e}", m1.mean_norm());
        let fr = m1.mean_norm() / m2.mean_norm();
        assert!(
            (2.2..3.5).contains(&fr),
            "fhn mean norms {:.3e} → {:.3e}, ratio {fr:.3} not ≈ 2^1.5",
            m1.mean_norm(),
            m2.mean_norm()
        );
        // Second-moment deviation ‖E[mmᵀ] − Ξ₁‖ is dominated by the first
        // omitted covariance correction, so it must decay ≈ Δ².
        let sr = m1.second_deviation_norm() / m2.second_deviation_norm();
        assert!(
            (3.0..5.3).contains(&sr),
            "fhn second-moment deviations {:.3e} → {:.3e}, ratio {sr:.3} not ≈ 4",
            m1.second_deviation_norm(),
            m2.second_deviation_norm()
        );
    }

    /// One-step chain: the joint-normal marginal must equal the scalar
    /// normal density of `X₁` directly.
    #[test]
    fn chain_loglik_matches_scalar_normal() {
        let prior = FilterState { mean: 0.3, var: 0.8 };
        let step = AffineGaussianStep {
            shift: [0.2, -0.1],
            slope: [0.6, 0.9],
            cov_xx: 0.05,
            cov_xy: 0.01,
            cov_yy: 0.04,
        };
        let obs = [0.55];
        let got = affine_gaussian_chain_loglik(&prior, &[step], &obs).unwrap();
        let mu = step.shift[0] + step.slope[0] * prior.mean;
        let var = step.cov_xx + step.slope[0] * step.slope[0] * prior.var;
        let want = -0.5 * ((std::f64::consts::TAU * var).ln() + (obs[0] - mu).powi(2) / var);
        assert!((got - want).abs() < 1e-12, "got {got:.15}, want {want:.15}");
    }
}

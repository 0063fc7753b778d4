//! Optimizers and the asymptotic-precision computation.
//!
//! Two optimizers cover the two inference surfaces:
//!
//! * [`adam_minimize`] — first-order minimization of the quasi-likelihood
//!   with bias-corrected adaptive moments. Coordinates are clipped to the
//!   parameter box after each update. When a step lands on a point where
//!   the objective returns its non-finite sentinel, the step is bisected
//!   back toward the last good iterate (at most 30 halvings) instead of
//!   aborting, so exploration near the box boundary stays safe.
//! * [`nelder_mead_maximize`] — derivative-free maximization (reflection,
//!   expansion, contraction, shrink = 1, 2, 0.5, 0.5) for the marginal
//!   likelihood of partially observed records, where gradients are not
//!   available. Points outside the box are rejected with a −10¹² penalty.
//!
//! [`asymptotic_precision`] evaluates the central-limit precision matrix
//! Γ(θ): block-diagonal across parameter roles, with drift blocks
//!
//! ```text
//! Γ_b = c_a · E_ν[ ∂_θ μ_bᵀ a_b(x)^{-1} ∂_θ μ_b ],   c_a = 1, 12, 720 for a = 0, 1, 2,
//! ```
//!
//! where `a_b = Σ_j ψ_{b,j} ψ_{b,j}ᵀ` is the squared leading noise of the
//! block, and the diffusion block
//!
//! ```text
//! Γ_σ = ½ · E_ν[ Tr(∂_σ Σ Λ ∂_σ Σ Λ) ].
//! ```
//!
//! The stationary expectation is replaced by the empirical average over a
//! supplied sample of states; parameter derivatives come from forward-mode
//! dual numbers. The inverse of Γ, scaled by the per-role rates
//! `√(n·Δ^{1−2a})` (drift) and `√n` (diffusion), predicts estimator
//! standard deviations at a given record size.

use crate::linalg::SMat;
use crate::model::{Model, ModelError, ParamRole};
use crate::moments::{Expansion, MomentsError};
use crate::scalar::{Dual4, KahanSum, Scalar};
use crate::simulate::ObservationSet;
use std::fmt;
use std::time::Instant;

/// Adaptive-moments configuration (defaults follow the simulation-study
/// settings: step 0.1, β₁ 0.9, β₂ 0.999, ε 1e−8, 8000 iterations).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iters: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { step: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, iters: 8000 }
    }
}

impl AdamConfig {
    fn validate(&self) {
        assert!(self.step > 0.0, "step must be positive");
        assert!((0.0..1.0).contains(&self.beta1), "beta1 in [0,1)");
        assert!((0.0..1.0).contains(&self.beta2), "beta2 in [0,1)");
        assert!(self.iters >= 1, "need at least one iteration");
    }
}

/// One value-and-gradient evaluation of an objective. `finite` is false
/// when the objective hit its sentinel (e.g. a non-PD covariance).
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub finite: bool,
}

/// Result of an optimization run.
#[derive(Clone, Debug)]
pub struct EstimationResult {
    /// Final iterate; always inside the box.
    pub theta_hat: Vec<f64>,
    /// Objective at `theta_hat` (the minimized or maximized value).
    pub value: f64,
    /// Heuristic convergence flag: small final gradient (first-order) or
    /// small simplex diameter (derivative-free).
    pub converged: bool,
    /// Number of objective evaluations consumed.
    pub evals: usize,
    /// Wall-clock seconds.
    pub runtime_s: f64,
    /// Thinned (value, θ) log along the run, oldest first.
    pub trace: Vec<(f64, Vec<f64>)>,
}

/// Errors from the optimizers and the precision computation.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimateError {
    /// The objective is non-finite at the starting point.
    BadStart { value: f64 },
    /// A block noise square `a_b(x)` failed to factor at a sample state.
    SingularNoiseSquare { block: usize, state: usize },
    /// The leading covariance failed to factor at a sample state.
    NonPdCovariance { state: usize },
    /// Shape mismatch between model, box, and starting point.
    Shape { what: &'static str },
    Moments(MomentsError),
}

impl fmt::Display for EstimateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimateError::BadStart { value } => {
                write!(f, "objective is not finite at the starting point (value {value})")
            }
            EstimateError::SingularNoiseSquare { block, state } => {
                write!(f, "noise square of block {block} is singular at sample state {state}")
            }
            EstimateError::NonPdCovariance { state } => {
                write!(f, "leading covariance not positive definite at sample state {state}")
            }
            EstimateError::Shape { what } => write!(f, "shape mismatch: {what}"),
            EstimateError::Moments(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EstimateError {}

impl From<MomentsError> for EstimateError {
    fn from(e: MomentsError) -> Self {
        EstimateError::Moments(e)
    }
}

impl From<ModelError> for EstimateError {
    fn from(e: ModelError) -> Self {
        EstimateError::Moments(MomentsError::Model(e))
    }
}

fn clip(theta: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((t, l), h) in theta.iter_mut().zip(lo).zip(hi) {
        *t = t.clamp(*l, *h);
    }
}

fn inside(theta: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    theta.iter().zip(lo).zip(hi).all(|((t, l), h)| *l <= *t && *t <= *h)
}

/// Trace thinning: keep ≈ 200 points regardless of the iteration budget.
fn trace_stride(iters: usize) -> usize {
    (iters / 200).max(1)
}

/// Minimize `objective` over the box `[lo, hi]` by Adam with bias-corrected
/// moments, starting from `theta0`. Deterministic: the same inputs produce
/// the identical iterate sequence. Returns the best point visited (a
/// constant-step run ends in a small orbit around the minimum, so the last
/// iterate is noisier than the best one), with the convergence flag
/// evaluated at that returned point.
pub fn adam_minimize<F>(
    mut objective: F,
    theta0: &[f64],
    cfg: &AdamConfig,
    lo: &[f64],
    hi: &[f64],
) -> Result<EstimationResult, EstimateError>
where
    F: FnMut(&[f64]) -> ObjectiveEval,
{
    cfg.validate();
    let n = theta0.len();
    if lo.len() != n || hi.len() != n {
        return Err(EstimateError::Shape { what: "box and starting point lengths differ" });
    }
    if !inside(theta0, lo, hi) {
        return Err(EstimateError::Shape { what: "starting point outside the box" });
    }
    let start = Instant::now();
    let mut theta = theta0.to_vec();
    let mut eval = objective(&theta);
    let mut evals = 1usize;
    if !eval.finite || !eval.value.is_finite() {
        return Err(EstimateError::BadStart { value: eval.value });
    }

    let stride = trace_stride(cfg.iters);
    let mut trace = vec![(eval.value, theta.clone())];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut b1_pow = 1.0;
    let mut b2_pow = 1.0;
    // With a constant step, the iterate orbits the minimum once the
    // second-moment state has decayed (the update is scale-free in the
    // gradient), so the final iterate samples that orbit. The reported
    // estimate is the best point visited instead.
    let mut best = theta.clone();
    let mut best_eval = eval.clone();

    for t in 1..=cfg.iters {
        b1_pow *= cfg.beta1;
        b2_pow *= cfg.beta2;
        let mut cand = theta.clone();
        for k in 0..n {
            let g = eval.gradient[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / (1.0 - b1_pow);
            let v_hat = v[k] / (1.0 - b2_pow);
            cand[k] -= cfg.step * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        clip(&mut cand, lo, hi);

        // Retreat by bisection toward the last good iterate if the step
        // landed on a sentinel point.
        let mut next = objective(&cand);
        evals += 1;
        let mut halvings = 0;
        while !(next.finite && next.value.is_finite()) && halvings < 30 {
            for k in 0..n {
                cand[k] = 0.5 * (cand[k] + theta[k]);
            }
            next = objective(&cand);
            evals += 1;
            halvings += 1;
        }
        if next.finite && next.value.is_finite() {
            theta = cand;
            eval = next;
            if eval.value < best_eval.value {
                best.copy_from_slice(&theta);
                best_eval = eval.clone();
            }
        }
        // else: stay at the current iterate, momentum keeps evolving.

        if t % stride == 0 {
            trace.push((eval.value, theta.clone()));
        }
    }

    let gnorm = best_eval.gradient.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let converged = gnorm < 1e-4 * (1.0 + best_eval.value.abs());
    Ok(EstimationResult {
        theta_hat: best,
        value: best_eval.value,
        converged,
        evals,
        runtime_s: start.elapsed().as_secs_f64(),
        trace,
    })
}

/// Penalty magnitude for out-of-box (or non-finite) proposals during
/// derivative-free maximization.
const NM_PENALTY: f64 = 1e12;

/// Maximize `objective` over the box by the Nelder–Mead simplex method
/// with coefficients (reflect, expand, contract, shrink) = (1, 2, ½, ½).
/// The initial simplex spans 5% of the box width per coordinate. Points
/// outside the box, and non-finite objective values, count as −10¹².
pub fn nelder_mead_maximize<F>(
    mut objective: F,
    theta0: &[f64],
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    max_evals: usize,
) -> EstimationResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = theta0.len();
    assert!(n >= 1, "need at least one coordinate");
    assert_eq!(lo.len(), n);
    assert_eq!(hi.len(), n);
    assert!(inside(theta0, lo, hi), "starting point outside the box");
    let start = Instant::now();

    let mut evals = 0usize;
    // Internal minimization of the negated objective.
    let mut f = |x: &[f64], evals: &mut usize| -> f64 {
        if !inside(x, lo, hi) {
            return NM_PENALTY;
        }
        *evals += 1;
        let v = objective(x);
        if v.is_finite() {
            -v
        } else {
            NM_PENALTY
        }
    };

    // Initial simplex: θ0 plus one vertex per coordinate, displaced by 5%
    // of the box width (flipped when that would leave the box).
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(theta0.to_vec());
    for k in 0..n {
        let mut v = theta0.to_vec();
        let edge = 0.05 * (hi[k] - lo[k]);
        v[k] = if v[k] + edge <= hi[k] { v[k] + edge } else { v[k] - edge };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v, &mut evals)).collect();
    let mut trace = Vec::new();

    let diameter = |simplex: &[Vec<f64>]| -> f64 {
        let best = &simplex[0];
        simplex[1..]
            .iter()
            .map(|v| {
                v.iter().zip(best).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max)
    };

    let mut converged = false;
    while evals < max_evals {
        // Order ascending in the internal (negated) value.
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let reorder: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let revalues: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = reorder;
        values = revalues;
        trace.push((-values[0], simplex[0].clone()));

        if diameter(&simplex) < tol {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for k in 0..n {
                centroid[k] += v[k] / n as f64;
            }
        }
        let worst = values[n];
        let second_worst = values[n - 1];
        let point = |coef: f64| -> Vec<f64> {
            (0..n).map(|k| centroid[k] + coef * (simplex[n][k] - centroid[k])).collect()
        };

        let refl = point(-1.0);
        let f_refl = f(&refl, &mut evals);
        if f_refl < values[0] {
            let expa = point(-2.0);
            let f_expa = f(&expa, &mut evals);
            if f_expa < f_refl {
                simplex[n] = expa;
                values[n] = f_expa;
            } else {
                simplex[n] = refl;
                values[n] = f_refl;
            }
        } else if f_refl < second_worst {
            simplex[n] = refl;
            values[n] = f_refl;
        } else {
            let contr = if f_refl < worst { point(-0.5) } else { point(0.5) };
            let f_contr = f(&contr, &mut evals);
            if f_contr < worst.min(f_refl) {
                simplex[n] = contr;
                values[n] = f_contr;
            } else {
                // Shrink toward the best vertex.
                for i in 1..=n {
                    for k in 0..n {
                        simplex[i][k] = 0.5 * (simplex[i][k] + simplex[0][k]);
                    }
                    values[i] = f(&simplex[i].clone(), &mut evals);
                }
            }
        }
    }

    // Final ordering to surface the best vertex.
    let mut idx: Vec<usize> = (0..=n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let best = idx[0];
    EstimationResult {
        theta_hat: simplex[best].clone(),
        value: -values[best],
        converged,
        evals,
        runtime_s: start.elapsed().as_secs_f64(),
        trace,
    }
}

/// Central-limit precision matrix Γ(θ) with its rate normalizers.
#[derive(Clone, Debug)]
pub struct PrecisionMatrix {
    /// N_θ×N_θ, block-diagonal across parameter roles.
    pub gamma: SMat<f64>,
    /// Per-parameter rate `√(n·Δ^{1−2a})` (drift of smoothness a) or `√n`
    /// (diffusion), for the record that supplied the stationary sample.
    pub rates: Vec<f64>,
    /// Role of each parameter, fixing its block.
    pub roles: Vec<ParamRole>,
}

impl PrecisionMatrix {
    /// Predicted sampling SD of the k-th estimator coordinate:
    /// `√((Γ^{-1})_{kk}) / rate_k`.
    pub fn predicted_sd(&self, k: usize) -> Option<f64> {
        let inv = self.gamma.cholesky()?.inverse();
        Some(inv[(k, k)].sqrt() / self.rates[k])
    }
}

/// Drift-block coefficient `c_a` for smoothness a (the diagonal entry of
/// the inverted residual-weight matrix).
fn drift_coefficient(a: usize) -> f64 {
    match a {
        0 => 1.0,
        1 => 12.0,
        2 => 720.0,
        _ => unreachable!("smoothness beyond two is not supported"),
    }
}

/// Evaluate Γ(θ) by averaging the block integrands over the states of
/// `sample` (an ergodic proxy for the stationary law). The rates are taken
/// from the sample's size and spacing.
pub fn asymptotic_precision<M: Model>(
    model: &M,
    sample: &ObservationSet,
    theta: &[f64],
) -> Result<PrecisionMatrix, EstimateError> {
    let class = model.class();
    let n = class.dim();
    if sample.dim != n {
        return Err(EstimateError::Shape { what: "sample dimension differs from model" });
    }
    if theta.len() != model.n_params() {
        return Err(EstimateError::Shape { what: "parameter length differs from model" });
    }
    let roles = model.param_roles();
    let np = roles.len();
    let theta_d = Dual4::seed(theta);
    let exp = Expansion::new(model, 2)?;

    // Parameter indices per block, and the diffusion indices.
    let mut drift_params: Vec<Vec<usize>> = vec![Vec::new(); class.n_blocks()];
    let mut sigma_params: Vec<usize> = Vec::new();
    for (k, role) in roles.iter().enumerate() {
        match role {
            ParamRole::Drift(b) => drift_params[*b].push(k),
            ParamRole::Diffusion => sigma_params.push(k),
        }
    }

    let n_states = sample.n_states();
    let mut acc: Vec<KahanSum<f64>> = vec![KahanSum::new(); np * np];
    let mut mu_d = vec![Dual4::c(0.0); n];
    let mut xd = vec![Dual4::c(0.0); n];
    let mut psi = vec![0.0; n];
    let mut sigma_d: SMat<Dual4> = SMat::zeros(n, n);
    let mut dwork = vec![Dual4::c(0.0); 2 * n];

    for s in 0..n_states {
        let x = sample.state(s);
        for (slot, v) in xd.iter_mut().zip(x) {
            *slot = Dual4::c(*v);
        }
        model.drift(&xd, &theta_d, &mut mu_d);

        for b in 0..class.n_blocks() {
            if drift_params[b].is_empty() {
                continue;
            }
            let range = class.block_range(b);
            let nb = range.len();
            let a = class.smoothness(b);
            // a_b = Σ_j ψ ψᵀ from the block's leading noise vectors.
            let mut ab: SMat<f64> = SMat::zeros(nb, nb);
            for j in 0..class.d {
                if a == 0 {
                    model.diffusion_col(j, x, theta, &mut psi);
                    for i1 in 0..nb {
                        for i2 in 0..nb {
                            ab[(i1, i2)] += psi[range.start + i1] * psi[range.start + i2];
                        }
                    }
                } else {
                    model.dir_mu(j, b, x, theta, &mut psi[..nb]);
                    for i1 in 0..nb {
                        for i2 in 0..nb {
                            ab[(i1, i2)] += psi[i1] * psi[i2];
                        }
                    }
                }
            }
            let chol = match ab.cholesky() {
                Some(c) => c,
                None => return Err(EstimateError::SingularNoiseSquare { block: b, state: s }),
            };
            let coef = drift_coefficient(a);
            for &u in &drift_params[b] {
                let mut du: Vec<f64> =
                    range.clone().map(|i| mu_d[i].dx[u]).collect();
                chol.solve_in_place(&mut du);
                for &w in &drift_params[b] {
                    let mut dot = 0.0;
                    for (i, row) in range.clone().enumerate() {
                        dot += mu_d[row].dx[w] * du[i];
                    }
                    acc[u * np + w].add(coef * dot);
                }
            }
        }

        if !sigma_params.is_empty() {
            exp.leading_cov_into(&xd, &theta_d, &mut sigma_d, &mut dwork);
            let mut sigma_f: SMat<f64> = SMat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    sigma_f[(i, j)] = sigma_d[(i, j)].re;
                }
            }
            let lam = match sigma_f.cholesky() {
                Some(c) => c.inverse(),
                None => return Err(EstimateError::NonPdCovariance { state: s }),
            };
            // D_u = (∂_u Σ)·Λ per diffusion parameter, then ½ Tr[D_u D_w].
            let mut dmats: Vec<SMat<f64>> = Vec::with_capacity(sigma_params.len());
            for &u in &sigma_params {
                let mut du: SMat<f64> = SMat::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        du[(i, j)] = sigma_d[(i, j)].dx[u];
                    }
                }
                dmats.push(du.mul(&lam));
            }
            for (iu, &u) in sigma_params.iter().enumerate() {
                for (iw, &w) in sigma_params.iter().enumerate() {
                    let mut tr = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            tr += dmats[iu][(i, j)] * dmats[iw][(j, i)];
                        }
                    }
                    acc[u * np + w].add(0.5 * tr);
                }
            }
        }
    }

    let inv = 1.0 / n_states as f64;
    let mut gamma = SMat::zeros(np, np);
    for u in 0..np {
        for w in 0..np {
            gamma[(u, w)] = acc[u * np + w].total() * inv;
        }
    }
    gamma.symmetrize();

    let n_eff = sample.n_steps() as f64;
    let dt = sample.dt;
    let rates = roles
        .iter()
        .map(|role| match role {
            ParamRole::Drift(b) => {
                let a = class.smoothness(*b) as i32;
                (n_eff * dt.powi(1 - 2 * a)).sqrt()
            }
            ParamRole::Diffusion => n_eff.sqrt(),
        })
        .collect();

    Ok(PrecisionMatrix { gamma, rates, roles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::Builtin;
    use crate::simulate::{simulate_fine_path, ObservationDesign};

    fn quadratic_1d(theta: &[f64]) -> ObjectiveEval {
        let d = theta[0] - 3.0;
        ObjectiveEval { value: d * d, gradient: vec![2.0 * d], finite: true }
    }

    #[test]
    fn zero_gradient_leaves_theta_unchanged() {
        let obj = |_: &[f64]| ObjectiveEval {
            value: 5.0,
            gradient: vec![0.0, 0.0],
            finite: true,
        };
        let cfg = AdamConfig { iters: 50, ..AdamConfig::default() };
        let got = adam_minimize(obj, &[0.4, -0.7], &cfg, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(got.theta_hat, vec![0.4, -0.7]);
        assert!(got.converged);
    }

    #[test]
    fn quadratic_reaches_the_minimum() {
        let got = adam_minimize(
            quadratic_1d,
            &[0.0],
            &AdamConfig::default(),
            &[-10.0],
            &[10.0],
        )
        .unwrap();
        assert!((got.theta_hat[0] - 3.0).abs() < 1e-3, "theta {}", got.theta_hat[0]);
        assert!(got.converged);
        assert!(!got.trace.is_empty());
    }

    #[test]
    fn box_clipping_pins_the_boundary() {
        let got = adam_minimize(
            quadratic_1d,
            &[0.0],
            &AdamConfig { iters: 2000, ..AdamConfig::default() },
            &[-1.0],
            &[1.0],
        )
        .unwrap();
        assert_eq!(got.theta_hat[0], 1.0, "must clip exactly to the box face");
    }

    #[test]
    fn sentinel_at_start_is_an_error() {
        let obj = |_: &[f64]| ObjectiveEval {
            value: f64::INFINITY,
            gradient: vec![0.0],
            finite: false,
        };
        let got = adam_minimize(obj, &[0.0], &AdamConfig::default(), &[-1.0], &[1.0]);
        assert!(matches!(got, Err(EstimateError::BadStart { .. })));
    }

    #[test]
    fn sentinel_mid_run_triggers_retreat_not_escape() {
        // Objective blows up past 2.0; the minimizer is pulled toward 3.0
        // but must stay in the finite region.
        let obj = |theta: &[f64]| {
            if theta[0] > 2.0 {
                ObjectiveEval { value: f64::INFINITY, gradient: vec![0.0], finite: false }
            } else {
                quadratic_1d(theta)
            }
        };
        let got = adam_minimize(
            obj,
            &[0.0],
            &AdamConfig { iters: 3000, ..AdamConfig::default() },
            &[-10.0],
            &[10.0],
        )
        .unwrap();
        assert!(got.theta_hat[0] <= 2.0, "escaped the finite region: {}", got.theta_hat[0]);
        assert!(got.theta_hat[0] > 1.9, "retreats too conservative: {}", got.theta_hat[0]);
        assert!(got.value.is_finite());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            adam_minimize(
                quadratic_1d,
                &[0.0],
                &AdamConfig { iters: 500, ..AdamConfig::default() },
                &[-10.0],
                &[10.0],
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.theta_hat[0].to_bits(), b.theta_hat[0].to_bits());
        assert_eq!(a.evals, b.evals);
    }

    #[test]
    fn simplex_finds_the_smooth_maximum() {
        let obj = |theta: &[f64]| -theta.iter().map(|t| (t - 1.0) * (t - 1.0)).sum::<f64>();
        let got = nelder_mead_maximize(obj, &[0.0, 0.0], &[-5.0, -5.0], &[5.0, 5.0], 1e-8, 10_000);
        assert!(got.converged);
        for t in &got.theta_hat {
            assert!((t - 1.0).abs() < 1e-4, "vertex {t}");
        }
        assert!(got.value > -1e-8);
    }

    #[test]
    fn simplex_respects_the_box() {
        // Unconstrained maximum at 2, box caps at 1.
        let obj = |theta: &[f64]| -(theta[0] - 2.0) * (theta[0] - 2.0);
        let got = nelder_mead_maximize(obj, &[0.5], &[0.0], &[1.0], 1e-9, 10_000);
        assert!(got.theta_hat[0] <= 1.0 && got.theta_hat[0] >= 0.98, "{}", got.theta_hat[0]);
    }

    #[test]
    fn exhausted_budget_flags_not_converged() {
        let obj = |theta: &[f64]| -theta.iter().map(|t| (t - 1.0) * (t - 1.0)).sum::<f64>();
        let got = nelder_mead_maximize(obj, &[0.0, 0.0], &[-5.0, -5.0], &[5.0, 5.0], 0.0, 40);
        assert!(!got.converged);
        assert!(got.evals >= 40);
    }

    #[test]
    fn langevin_precision_matches_hand_values() {
        let model = Builtin::from_id("langevin-quad").unwrap();
        let theta = [-1.5, 2.0];
        let design = ObservationDesign::new(400, 0.01).with_burn_in(2.0);
        let sample = simulate_fine_path(&model, &theta, &design, 21).unwrap();
        let prec = asymptotic_precision(&model, &sample, &theta).unwrap();
        // Diffusion entry is state-independent: ½Tr[(∂_σΣ Λ)²] = 4/σ² = 1.
        assert!(
            (prec.gamma[(1, 1)] - 1.0).abs() < 1e-12,
            "Γ_σ = {:.15}",
            prec.gamma[(1, 1)]
        );
        // Cross-role entries vanish identically.
        assert_eq!(prec.gamma[(0, 1)], 0.0);
        assert_eq!(prec.gamma[(1, 0)], 0.0);
        // Drift entry: Γ_γ = E[z²]/σ² > 0 (friction acts on the rough row).
        assert!(prec.gamma[(0, 0)] > 0.0);
        // Rates: γ sits in the rough block (a=0) → √(nΔ); σ → √n.
        let n = sample.n_steps() as f64;
        assert!((prec.rates[0] - (n * 0.01).sqrt()).abs() < 1e-12);
        assert!((prec.rates[1] - n.sqrt()).abs() < 1e-12);
        // Predicted σ̂ SD: √(Γ_σ^{-1}/n) = σ/(2√n).
        let sd = prec.predicted_sd(1).unwrap();
        assert!((sd - 2.0 / (2.0 * n.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn gle_chain_precision_is_block_diagonal_and_positive() {
        let model = Builtin::from_id("qgle-quad").unwrap();
        let theta = [2.0, 4.0, 4.0];
        let design = ObservationDesign::new(400, 0.01).with_burn_in(2.0);
        let sample = simulate_fine_path(&model, &theta, &design, 22).unwrap();
        let prec = asymptotic_precision(&model, &sample, &theta).unwrap();
        // λ (level-1 block), α (rough block), σ (diffusion) all live in
        // different blocks, so every off-diagonal entry vanishes as stored.
        for u in 0..3 {
            for w in 0..3 {
                if u != w {
                    assert_eq!(prec.gamma[(u, w)], 0.0, "entry ({u},{w})");
                }
            }
        }
        // Every entry of Σ scales as σ², so (∂_σΣ)Λ = (2/σ)I₃ and
        // Γ_σ = ½·Tr[(2/σ)²I₃] = 6/σ².
        assert!((prec.gamma[(2, 2)] - 6.0 / 16.0).abs() < 1e-12);
        assert!(prec.gamma[(0, 0)] > 0.0 && prec.gamma[(1, 1)] > 0.0);
        assert!(prec.gamma.cholesky().is_some(), "Γ must be PD");
        // Rates by smoothness: λ at level 1 → √(n/Δ); α rough → √(nΔ).
        let n = sample.n_steps() as f64;
        assert!((prec.rates[0] - (n / 0.01).sqrt()).abs() < 1e-9);
        assert!((prec.rates[1] - (n * 0.01).sqrt()).abs() < 1e-12);
    }
}

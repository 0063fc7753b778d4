//! Exact filtering for partially observed two-block models.
//!
//! When only the smooth coordinate X of a two-dimensional two-block model is
//! recorded, the rough coordinate Y must be integrated out of the likelihood.
//! For the model families handled here the one-step transition density of the
//! pair (X_k, Y_k) given (X_{k−1}, Y_{k−1}) is Gaussian with a mean that is
//! *affine* in the hidden coordinate,
//!
//! ```text
//! (X_k, Y_k) | (x_{k−1}, y_{k−1})  ~  N( shift(x_{k−1}) + slope(x_{k−1}) · y_{k−1},  Q(x_{k−1}) ),
//! ```
//!
//! so conditional on the observed record the hidden chain stays Gaussian and
//! the marginal likelihood of the X-record is computed exactly by a scalar
//! Kalman recursion: predict the pair, condition on the new observation,
//! accumulate the predictive log density of X_k.
//!
//! The coefficients are not hard-coded per model: [`transition_coeffs`]
//! extracts `shift`/`slope` from the truncated conditional mean by evaluating
//! it at probe values of the hidden coordinate (exactness of the affine form
//! is checked), and `Q` from the expanded covariance, which must not depend on
//! the hidden coordinate (also checked). The covariance correction of order 2
//! generally *does* depend on the hidden coordinate, which is why partial
//! observation supports expansion orders p ∈ {2, 3} only.

use crate::model::{ClassTag, Model, ModelError};
use crate::moments::{Expansion, MomentsError};
use crate::scalar::KahanSum;
use std::fmt;

/// Errors from coefficient extraction or filtering.
#[derive(Debug, Clone, PartialEq)]
pub enum KalmanError {
    /// The model is not a two-block model with scalar blocks.
    UnsupportedShape { dim: usize },
    /// Partial observation supports expansion orders 2 and 3 only.
    UnsupportedOrder { p: usize },
    /// The truncated mean is not affine in the hidden coordinate.
    NotAffineInHidden { max_dev: f64 },
    /// The expanded covariance depends on the hidden coordinate.
    HiddenDependentCovariance { max_dev: f64 },
    /// Predictive variance of the observed coordinate is not positive.
    DegeneratePrediction { variance: f64 },
    /// A non-finite log-likelihood increment at transition `step`.
    NonFinite { step: usize },
    /// Failure constructing or evaluating the moment expansion.
    Moments(MomentsError),
}

impl fmt::Display for KalmanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KalmanError::UnsupportedShape { dim } => {
                write!(f, "partial observation needs a two-block model with scalar blocks, got dimension {dim}")
            }
            KalmanError::UnsupportedOrder { p } => {
                write!(f, "partial observation supports expansion orders 2 and 3, got {p}")
            }
            KalmanError::NotAffineInHidden { max_dev } => {
                write!(f, "truncated mean is not affine in the hidden coordinate (probe deviation {max_dev:.3e})")
            }
            KalmanError::HiddenDependentCovariance { max_dev } => {
                write!(f, "expanded covariance depends on the hidden coordinate (probe deviation {max_dev:.3e})")
            }
            KalmanError::DegeneratePrediction { variance } => {
                write!(f, "predictive variance of the observed coordinate is {variance:.3e}, not positive")
            }
            KalmanError::NonFinite { step } => {
                write!(f, "non-finite log-likelihood increment at transition {step}")
            }
            KalmanError::Moments(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for KalmanError {}

impl From<MomentsError> for KalmanError {
    fn from(e: MomentsError) -> Self {
        KalmanError::Moments(e)
    }
}

impl From<ModelError> for KalmanError {
    fn from(e: ModelError) -> Self {
        KalmanError::Moments(MomentsError::Model(e))
    }
}

/// One-step affine-Gaussian transition of the pair (observed X, hidden Y):
/// mean = `shift + slope · y_prev`, noise covariance `[[cov_xx, cov_xy],
/// [cov_xy, cov_yy]]` (natural units, not standardized).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineGaussianStep {
    pub shift: [f64; 2],
    pub slope: [f64; 2],
    pub cov_xx: f64,
    pub cov_xy: f64,
    pub cov_yy: f64,
}

/// Gaussian belief about the hidden coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub mean: f64,
    pub var: f64,
}

impl Default for FilterState {
    /// Diffuse-ish reference prior: mean 0, variance 1.
    fn default() -> Self {
        FilterState { mean: 0.0, var: 1.0 }
    }
}

fn check_shape<M: Model>(exp: &Expansion<'_, M>) -> Result<(), KalmanError> {
    let class = exp.class();
    if class.tag != ClassTag::TwoBlock || class.dim() != 2 {
        return Err(KalmanError::UnsupportedShape { dim: class.dim() });
    }
    if exp.p() > 3 {
        return Err(KalmanError::UnsupportedOrder { p: exp.p() });
    }
    Ok(())
}

/// Filter covariance truncation: the order-p scheme keeps corrections
/// Σ_1..Σ_{p−2} (none at p=2, one at p=3), matching the contrast's
/// order-by-order structure rather than the moment module's full Ξ_{K_p}.
fn filter_cov_into<M: Model>(
    exp: &Expansion<'_, M>,
    state: &[f64],
    theta: &[f64],
    dt: f64,
    out: &mut crate::linalg::SMat<f64>,
    scratch: &mut crate::linalg::SMat<f64>,
    work: &mut [f64],
) -> Result<(), KalmanError> {
    exp.leading_cov_into(state, theta, out, work);
    let mut dpow = 1.0;
    for j in 1..=exp.p().saturating_sub(2) {
        dpow *= dt;
        exp.correction_into(j, state, theta, scratch)?;
        out.add_scaled(scratch, dpow);
    }
    Ok(())
}

/// Scratch buffers reused across [`transition_coeffs_into`] calls.
struct CoeffBuffers {
    state: [f64; 2],
    mean0: [f64; 2],
    mean1: [f64; 2],
    work: [f64; 2],
    cov: crate::linalg::SMat<f64>,
    scratch: crate::linalg::SMat<f64>,
    cwork: [f64; 4],
}

impl CoeffBuffers {
    fn new() -> Self {
        CoeffBuffers {
            state: [0.0; 2],
            mean0: [0.0; 2],
            mean1: [0.0; 2],
            work: [0.0; 2],
            cov: crate::linalg::SMat::zeros(2, 2),
            scratch: crate::linalg::SMat::zeros(2, 2),
            cwork: [0.0; 4],
        }
    }
}

/// Core coefficient extraction; `probe` additionally verifies affinity of the
/// mean and hidden-independence of the covariance (done once per record, not
/// per transition, in [`marginal_loglik`]).
fn transition_coeffs_into<M: Model>(
    exp: &Expansion<'_, M>,
    buf: &mut CoeffBuffers,
    x_obs: f64,
    theta: &[f64],
    dt: f64,
    probe: bool,
) -> Result<AffineGaussianStep, KalmanError> {
    buf.state[0] = x_obs;
    buf.state[1] = 0.0;
    exp.mean_into(&buf.state, theta, dt, &mut buf.mean0, &mut buf.work)?;
    buf.state[1] = 1.0;
    exp.mean_into(&buf.state, theta, dt, &mut buf.mean1, &mut buf.work)?;
    let shift = buf.mean0;
    let slope = [buf.mean1[0] - buf.mean0[0], buf.mean1[1] - buf.mean0[1]];

    buf.state[1] = 0.0;
    filter_cov_into(exp, &buf.state, theta, dt, &mut buf.cov, &mut buf.scratch, &mut buf.cwork)?;
    // Unstandardize: X carries Δ^{3/2}, Y carries Δ^{1/2}.
    let cov_xx = dt * dt * dt * buf.cov[(0, 0)];
    let cov_xy = dt * dt * buf.cov[(0, 1)];
    let cov_yy = dt * buf.cov[(1, 1)];

    if probe {
        buf.state[1] = 2.0;
        let mut mean2 = [0.0; 2];
        exp.mean_into(&buf.state, theta, dt, &mut mean2, &mut buf.work)?;
        let mut max_dev = 0.0f64;
        for i in 0..2 {
            let extrapolated = buf.mean0[i] + 2.0 * slope[i];
            let scale = 1.0 + buf.mean0[i].abs().max(mean2[i].abs());
            max_dev = max_dev.max((mean2[i] - extrapolated).abs() / scale);
        }
        if max_dev > 1e-9 {
            return Err(KalmanError::NotAffineInHidden { max_dev });
        }
        let mut cov2 = crate::linalg::SMat::zeros(2, 2);
        filter_cov_into(exp, &buf.state, theta, dt, &mut cov2, &mut buf.scratch, &mut buf.cwork)?;
        let mut cdev = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let scale = 1.0 + buf.cov[(i, j)].abs();
                cdev = cdev.max((cov2[(i, j)] - buf.cov[(i, j)]).abs() / scale);
            }
        }
        if cdev > 1e-9 {
            return Err(KalmanError::HiddenDependentCovariance { max_dev: cdev });
        }
    }

    Ok(AffineGaussianStep { shift, slope, cov_xx, cov_xy, cov_yy })
}

/// One-step transition coefficients for a partially observed two-block model:
/// the Gaussian law of (X_k, Y_k) given X_{k−1} = `x_obs` and Y_{k−1} = y is
/// `N(shift + slope·y, Q)`. Verifies that the truncated mean is affine in the
/// hidden coordinate and that the covariance does not depend on it.
pub fn transition_coeffs<M: Model>(
    exp: &Expansion<'_, M>,
    x_obs: f64,
    theta: &[f64],
    dt: f64,
) -> Result<AffineGaussianStep, KalmanError> {
    check_shape(exp)?;
    let mut buf = CoeffBuffers::new();
    transition_coeffs_into(exp, &mut buf, x_obs, theta, dt, true)
}

/// Predict with `step`, condition on the observed `x_obs`, and return the
/// updated hidden belief together with the predictive log density of `x_obs`.
pub fn kf_update(
    state: &FilterState,
    step: &AffineGaussianStep,
    x_obs: f64,
) -> Result<(FilterState, f64), KalmanError> {
    let mu_x = step.shift[0] + step.slope[0] * state.mean;
    let mu_y = step.shift[1] + step.slope[1] * state.mean;
    let lxx = step.cov_xx + step.slope[0] * step.slope[0] * state.var;
    let lxy = step.cov_xy + step.slope[0] * step.slope[1] * state.var;
    let lyy = step.cov_yy + step.slope[1] * step.slope[1] * state.var;
    if !(lxx > 0.0) {
        return Err(KalmanError::DegeneratePrediction { variance: lxx });
    }
    let resid = x_obs - mu_x;
    let ll = -0.5 * ((std::f64::consts::TAU * lxx).ln() + resid * resid / lxx);
    let gain = lxy / lxx;
    Ok((
        FilterState { mean: mu_y + gain * resid, var: (lyy - lxy * gain).max(0.0) },
        ll,
    ))
}

/// Marginal log-likelihood of an observed record of the smooth coordinate
/// `obs = [x_0, x_1, …, x_n]` under expansion order `p`, integrating out the
/// hidden rough coordinate with prior `prior` on Y_0. The density of x_0
/// itself is not modelled (the recursion conditions on it).
pub fn marginal_loglik<M: Model>(
    model: &M,
    p: usize,
    obs: &[f64],
    dt: f64,
    theta: &[f64],
    prior: FilterState,
) -> Result<f64, KalmanError> {
    let exp = Expansion::new(model, p)?;
    check_shape(&exp)?;
    let mut buf = CoeffBuffers::new();
    let mut state = prior;
    let mut sum = KahanSum::new();
    for k in 1..obs.len() {
        let step = transition_coeffs_into(&exp, &mut buf, obs[k - 1], theta, dt, k == 1)?;
        let (next, ll) = kf_update(&state, &step, obs[k])?;
        if !ll.is_finite() {
            return Err(KalmanError::NonFinite { step: k });
        }
        state = next;
        sum.add(ll);
    }
    Ok(sum.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::Builtin;
    use crate::linalg::SMat;
    use crate::model::{ModelClass, ParamRole};
    use crate::scalar::Scalar;

    fn fhn() -> Builtin {
        Builtin::from_id("fhn").unwrap()
    }

    const TH: [f64; 4] = [0.1, 1.5, 0.3, 0.6];

    #[test]
    fn frozen_coefficients_at_order_two() {
        let m = fhn();
        let exp = Expansion::new(&m, 2).unwrap();
        let dt = 0.01;
        let s = transition_coeffs(&exp, 1.0, &TH, dt).unwrap();
        // Hand-computed from the closed forms at x = 1, y = 0:
        // μ_S = −0.1, ℒμ_S = −16, μ_R = 1.8, ∂μ_S/∂y = −10,
        // ∂ℒμ_S/∂y = (ε − (1−3x²))/ε² = 210.
        assert!((s.shift[0] - 0.9982).abs() < 1e-12);
        assert!((s.shift[1] - 0.018).abs() < 1e-12);
        assert!((s.slope[0] - (-0.0895)).abs() < 1e-12);
        assert!((s.slope[1] - 0.99).abs() < 1e-12);
        // Σ scheme covariance: Δ³σ²/(3ε²), −Δ²σ²/(2ε), Δσ².
        assert!((s.cov_xx - 1.2e-5).abs() < 1e-18);
        assert!((s.cov_xy - (-1.8e-4)).abs() < 1e-17);
        assert!((s.cov_yy - 3.6e-3).abs() < 1e-16);
    }

    #[test]
    fn order_three_adds_first_covariance_correction_only() {
        let m = fhn();
        let e2 = Expansion::new(&m, 2).unwrap();
        let e3 = Expansion::new(&m, 3).unwrap();
        let dt = 0.01;
        let s2 = transition_coeffs(&e2, 1.0, &TH, dt).unwrap();
        let s3 = transition_coeffs(&e3, 1.0, &TH, dt).unwrap();
        // Means agree exactly between the two orders.
        assert_eq!(s2.shift, s3.shift);
        assert_eq!(s2.slope, s3.slope);
        // Covariance gains Δ^{j+power} Σ₁ terms: Σ₁ at x=1 is
        // [[−189, 13.8], [13.8, −0.36]] (σ²=0.36, ε=0.1, 1−3x² = −2).
        assert!((s3.cov_xx - s2.cov_xx - dt.powi(4) * (-189.0)).abs() < 1e-16);
        assert!((s3.cov_xy - s2.cov_xy - dt.powi(3) * 13.8).abs() < 1e-15);
        assert!((s3.cov_yy - s2.cov_yy - dt.powi(2) * (-0.36)).abs() < 1e-14);
    }

    #[test]
    fn zero_step_limit_is_identity_and_degenerate() {
        let m = fhn();
        let exp = Expansion::new(&m, 2).unwrap();
        let s = transition_coeffs(&exp, 0.7, &TH, 0.0).unwrap();
        assert_eq!(s.shift, [0.7, 0.0]);
        assert_eq!(s.slope, [0.0, 1.0]);
        assert_eq!((s.cov_xx, s.cov_xy, s.cov_yy), (0.0, 0.0, 0.0));
        let err = kf_update(&FilterState::default(), &s, 0.7).unwrap_err();
        assert!(matches!(err, KalmanError::DegeneratePrediction { .. }));
    }

    #[test]
    fn update_invariants() {
        let step = AffineGaussianStep {
            shift: [1.0, 0.5],
            slope: [-0.1, 0.9],
            cov_xx: 0.01,
            cov_xy: 0.002,
            cov_yy: 0.04,
        };
        let state = FilterState { mean: 0.3, var: 0.25 };
        let mu_x = 1.0 - 0.1 * 0.3;
        let mu_y = 0.5 + 0.9 * 0.3;
        // Zero innovation leaves the hidden mean at its prediction.
        let (post, _) = kf_update(&state, &step, mu_x).unwrap();
        assert!((post.mean - mu_y).abs() < 1e-15);
        // Conditioning never inflates the hidden variance.
        let lyy = step.cov_yy + 0.9 * 0.9 * state.var;
        assert!(post.var <= lyy && post.var >= 0.0);
        // Uncorrelated prediction: posterior equals prediction.
        let mut uncorr = step;
        uncorr.cov_xy = 0.1 * 0.9 * state.var; // cancels the slope cross term
        let (post_u, _) = kf_update(&state, &uncorr, 1.3).unwrap();
        assert!((post_u.mean - mu_y).abs() < 1e-15);
        assert!((post_u.var - lyy).abs() < 1e-15);
        // Predictive log density matches the scalar normal formula.
        let (_, ll) = kf_update(&state, &step, 1.05).unwrap();
        let lxx = step.cov_xx + 0.01 * state.var;
        let want = -0.5 * ((std::f64::consts::TAU * lxx).ln() + (1.05 - mu_x).powi(2) / lxx);
        assert!((ll - want).abs() < 1e-14);
    }

    #[test]
    fn near_deterministic_filter_tracks_hidden_recursion() {
        let m = fhn();
        let theta = [0.1, 1.5, 0.3, 1e-6];
        let exp = Expansion::new(&m, 2).unwrap();
        let dt = 0.005;
        // Generate a record from the noise-free scheme recursion itself.
        let (mut x, mut y) = (1.0f64, 0.4f64);
        let mut obs = vec![x];
        let mut hidden = vec![y];
        for _ in 0..50 {
            let s = transition_coeffs(&exp, x, &theta, dt).unwrap();
            x = s.shift[0] + s.slope[0] * y;
            y = s.shift[1] + s.slope[1] * y;
            obs.push(x);
            hidden.push(y);
        }
        // Filter with the hidden start known exactly.
        let mut state = FilterState { mean: 0.4, var: 0.0 };
        for k in 1..obs.len() {
            let s = transition_coeffs(&exp, obs[k - 1], &theta, dt).unwrap();
            let (next, _) = kf_update(&state, &s, obs[k]).unwrap();
            state = next;
            assert!((state.mean - hidden[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_unsupported_shape_and_order() {
        let qgle = Builtin::from_id("qgle-quad").unwrap();
        let exp = Expansion::new(&qgle, 2).unwrap();
        let err = transition_coeffs(&exp, 0.5, &[2.0, 4.0, 4.0], 0.01).unwrap_err();
        assert!(matches!(err, KalmanError::UnsupportedShape { dim: 3 }));

        let m = fhn();
        let exp4 = Expansion::new(&m, 4).unwrap();
        let err = transition_coeffs(&exp4, 0.5, &TH, 0.01).unwrap_err();
        assert!(matches!(err, KalmanError::UnsupportedOrder { p: 4 }));
    }

    /// Two-block toy whose smooth drift is *not* affine in the rough
    /// coordinate — the probe must reject it.
    struct Curved;

    impl Model for Curved {
        fn id(&self) -> &'static str {
            "test-curved"
        }
        fn class(&self) -> ModelClass {
            ModelClass::two_block(1, 1, 1)
        }
        fn n_params(&self) -> usize {
            1
        }
        fn param_names(&self) -> &'static [&'static str] {
            &["sigma"]
        }
        fn param_roles(&self) -> Vec<ParamRole> {
            vec![ParamRole::Diffusion]
        }
        fn default_box(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![0.1], vec![5.0])
        }
        fn max_p(&self) -> usize {
            2
        }
        fn sigma0_state_dependent(&self) -> bool {
            true
        }
        fn corrections_state_dependent(&self) -> bool {
            true
        }
        fn drift<S: Scalar>(&self, x: &[S], _theta: &[S], out: &mut [S]) {
            out[0] = x[1].scale(0.5).exp() - S::c(1.0); // curved in the rough coordinate
            out[1] = -x[1];
        }
        fn gen_mu<S: Scalar>(
            &self,
            k: usize,
            block: usize,
            x: &[S],
            theta: &[S],
            out: &mut [S],
        ) -> Result<(), ModelError> {
            let mut full = [S::zero(), S::zero()];
            self.drift(x, theta, &mut full);
            match (block, k) {
                (0, 1) => out[0] = full[0],
                (0, 2) => out[0] = S::zero(),
                (1, 1) => out[0] = full[1],
                _ => {
                    return Err(ModelError::UnsupportedOrder {
                        what: "test-curved drift iterate",
                        block,
                        k,
                        max: 2,
                    })
                }
            }
            Ok(())
        }
        fn dir_mu<S: Scalar>(&self, _j: usize, _block: usize, x: &[S], theta: &[S], out: &mut [S]) {
            out[0] = x[1].scale(0.5).exp().scale(0.5) * theta[0];
        }
        fn diffusion_col<S: Scalar>(&self, _j: usize, _x: &[S], theta: &[S], out: &mut [S]) {
            out[0] = S::zero();
            out[1] = theta[0];
        }
        fn cov_correction<S: Scalar>(
            &self,
            j: usize,
            _x: &[S],
            _theta: &[S],
            out: &mut SMat<S>,
        ) -> Result<(), ModelError> {
            let _ = j;
            out.fill(S::zero());
            Ok(())
        }
    }

    #[test]
    fn probe_rejects_non_affine_hidden_mean() {
        let exp = Expansion::new(&Curved, 2).unwrap();
        let err = transition_coeffs(&exp, 0.3, &[1.0], 0.01).unwrap_err();
        assert!(matches!(err, KalmanError::NotAffineInHidden { .. }));
    }

    #[test]
    fn marginal_loglik_sums_update_increments() {
        let m = fhn();
        let obs = [1.0, 0.98, 0.93, 0.9, 0.85];
        let dt = 0.01;
        let total = marginal_loglik(&m, 2, &obs, dt, &TH, FilterState::default()).unwrap();
        let exp = Expansion::new(&m, 2).unwrap();
        let mut state = FilterState::default();
        let mut by_hand = 0.0;
        for k in 1..obs.len() {
            let s = transition_coeffs(&exp, obs[k - 1], &TH, dt).unwrap();
            let (next, ll) = kf_update(&state, &s, obs[k]).unwrap();
            state = next;
            by_hand += ll;
        }
        assert!((total - by_hand).abs() < 1e-12);
    }

    #[test]
    fn marginal_loglik_matches_joint_gaussian_marginalization() {
        let m = fhn();
        let obs = [1.0, 0.98, 0.93, 0.9, 0.85];
        let dt = 0.01;
        for theta in [[0.1, 1.5, 0.3, 0.6], [0.4, 1.0, 0.5, 1.2], [0.8, 2.5, 1.0, 2.0]] {
            for p in [2usize, 3] {
                let exp = Expansion::new(&m, p).unwrap();
                let steps: Vec<AffineGaussianStep> = (1..obs.len())
                    .map(|k| transition_coeffs(&exp, obs[k - 1], &theta, dt).unwrap())
                    .collect();
                let direct = crate::oracle::affine_gaussian_chain_loglik(
                    &FilterState::default(),
                    &steps,
                    &obs[1..],
                )
                .unwrap();
                let filtered =
                    marginal_loglik(&m, p, &obs, dt, &theta, FilterState::default()).unwrap();
                assert!(
                    (direct - filtered).abs() < 1e-8,
                    "p={p}: joint {direct} vs filtered {filtered}"
                );
            }
        }
    }
}

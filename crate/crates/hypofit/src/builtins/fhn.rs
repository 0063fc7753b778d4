//! FitzHugh–Nagumo oscillator with noise only on the recovery variable,
//!
//! ```text
//! dv = (v − v³ − w − s)/ε dt
//! dw = (γ v − w + α) dt + σ dW
//! ```
//!
//! so the fast voltage v is the smooth coordinate and the recovery w is
//! rough. Estimated parameters θ = (ε, γ, α, σ); the input current s is
//! structural. Unusually among the built-ins, the smooth block's own drift
//! carries a parameter (ε), and the cubic nonlinearity makes every
//! covariance correction state-dependent.

use crate::linalg::SMat;
use crate::model::{Model, ModelClass, ModelError, ParamRole};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct FitzHughNagumo {
    /// Input current s.
    pub input: f64,
}

impl FitzHughNagumo {
    pub fn new(input: f64) -> Self {
        FitzHughNagumo { input }
    }

    /// μ_S = (v − v³ − w − s)/ε
    fn mu_s<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        (x[0] - x[0] * x[0] * x[0] - x[1] - S::c(self.input)) / theta[0]
    }

    /// μ_R = γ v − w + α
    fn mu_r<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        theta[1] * x[0] - x[1] + theta[2]
    }

    /// ℒμ_S = (f'(v) μ_S − μ_R)/ε with f'(v) = 1 − 3v²
    fn gen_mu_s<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        let fp = S::c(1.0) - (x[0] * x[0]).scale(3.0);
        (fp * self.mu_s(x, theta) - self.mu_r(x, theta)) / theta[0]
    }

    /// ℒ²μ_S = μ_S (−6v μ_S + f'²/ε − γ)/ε + μ_R (1 − f'/ε)/ε
    /// (ℒμ_S is affine in w, so the second-order generator term vanishes)
    fn gen2_mu_s<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        let eps = theta[0];
        let fp = S::c(1.0) - (x[0] * x[0]).scale(3.0);
        let mu_s = self.mu_s(x, theta);
        let mu_r = self.mu_r(x, theta);
        let dx = (fp * fp / eps - x[0].scale(6.0) * mu_s - theta[1]) / eps;
        let dy = (S::c(1.0) - fp / eps) / eps;
        mu_s * dx + mu_r * dy
    }
}

impl Model for FitzHughNagumo {
    fn id(&self) -> &'static str {
        "fhn"
    }

    fn class(&self) -> ModelClass {
        ModelClass::two_block(1, 1, 1)
    }

    fn n_params(&self) -> usize {
        4
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["eps", "gamma", "alpha", "sigma"]
    }

    fn param_roles(&self) -> Vec<ParamRole> {
        vec![ParamRole::Drift(0), ParamRole::Drift(1), ParamRole::Drift(1), ParamRole::Diffusion]
    }

    fn default_box(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.02, 0.2, 0.02, 0.1], vec![1.0, 4.0, 2.0, 3.0])
    }

    fn max_p(&self) -> usize {
        4
    }

    fn sigma0_state_dependent(&self) -> bool {
        false
    }

    fn corrections_state_dependent(&self) -> bool {
        true
    }

    fn drift<S: Scalar>(&self, x: &[S], theta: &[S], out: &mut [S]) {
        out[0] = self.mu_s(x, theta);
        out[1] = self.mu_r(x, theta);
    }

    fn gen_mu<S: Scalar>(
        &self,
        k: usize,
        block: usize,
        x: &[S],
        theta: &[S],
        out: &mut [S],
    ) -> Result<(), ModelError> {
        out[0] = match (block, k) {
            (0, 1) => self.mu_s(x, theta),
            (0, 2) => self.gen_mu_s(x, theta),
            (0, 3) => self.gen2_mu_s(x, theta),
            (1, 1) => self.mu_r(x, theta),
            // ℒμ_R = γ μ_S − μ_R
            (1, 2) => theta[1] * self.mu_s(x, theta) - self.mu_r(x, theta),
            _ => {
                let max = if block == 0 { 3 } else { 2 };
                return Err(ModelError::UnsupportedOrder {
                    what: "fitzhugh-nagumo generator iterate",
                    block,
                    k,
                    max,
                });
            }
        };
        Ok(())
    }

    fn dir_mu<S: Scalar>(&self, _j: usize, block: usize, _x: &[S], theta: &[S], out: &mut [S]) {
        debug_assert_eq!(block, 0, "only the smooth block has a directional term");
        // ℒ_1 μ_S = σ ∂μ_S/∂w = −σ/ε
        out[0] = S::c(0.0) - theta[3] / theta[0];
    }

    fn diffusion_col<S: Scalar>(&self, _j: usize, _x: &[S], theta: &[S], out: &mut [S]) {
        out[0] = S::c(0.0);
        out[1] = theta[3];
    }

    fn cov_correction<S: Scalar>(
        &self,
        j: usize,
        x: &[S],
        theta: &[S],
        out: &mut SMat<S>,
    ) -> Result<(), ModelError> {
        let (eps, gamma, sigma) = (theta[0], theta[1], theta[3]);
        let s2 = sigma * sigma;
        let v = x[0];
        let v2 = v * v;
        match j {
            1 => {
                // Σ₁ = [[σ²(1−3v²−ε)/(4ε³), σ²(3v²−1+3ε)/(6ε²)], [·, −σ²]]
                let fp = S::c(1.0) - v2.scale(3.0);
                out[(0, 0)] = s2 * (fp - eps) / (eps * eps * eps).scale(4.0);
                out[(0, 1)] = s2 * (eps.scale(3.0) - fp) / (eps * eps).scale(6.0);
                out[(1, 0)] = out[(0, 1)];
                out[(1, 1)] = S::c(0.0) - s2;
            }
            2 => {
                let e2 = eps * eps;
                let v4 = v2 * v2;
                let sv = v.scale(self.input);
                let vw = v * x[1];
                // polynomial prefactors of σ²/(60ε⁴) and −σ²/(24ε³)
                let top = e2.scale(7.0) - (eps * gamma).scale(4.0) + (eps * v2).scale(30.0)
                    - eps.scale(10.0)
                    + sv.scale(66.0)
                    + v4.scale(129.0)
                    - v2.scale(108.0)
                    + vw.scale(66.0)
                    + S::c(7.0);
                let mid = e2.scale(7.0) - (eps * gamma).scale(4.0) + (eps * v2).scale(12.0)
                    - eps.scale(4.0)
                    + sv.scale(18.0)
                    + v4.scale(27.0)
                    - v2.scale(24.0)
                    + vw.scale(18.0)
                    + S::c(1.0);
                out[(0, 0)] = s2 * top / (e2 * e2).scale(60.0);
                out[(0, 1)] = S::c(0.0) - s2 * mid / (e2 * eps).scale(24.0);
                out[(1, 0)] = out[(0, 1)];
                out[(1, 1)] = s2 * (eps.scale(2.0) - gamma) / eps.scale(3.0);
            }
            _ => {
                return Err(ModelError::UnsupportedOrder {
                    what: "fitzhugh-nagumo covariance correction",
                    block: 0,
                    k: j,
                    max: 2,
                })
            }
        }
        Ok(())
    }
}

//! Quasi-Markovian generalized Langevin chain: position q, momentum p, and
//! one auxiliary memory coordinate s, with noise entering only through s,
//!
//! ```text
//! dq =  p dt
//! dp = (−U'(q) + λ s) dt
//! ds = (−λ p − α s) dt + σ dW
//! ```
//!
//! Estimated parameters θ = (λ, α, σ); the potential stiffness is fixed
//! structurally. Noise reaches p through s and q through p, making q the
//! smoothest coordinate (level 2). The coupling λ is treated as a level-1
//! drift parameter: it enters the observable dynamics through the dp
//! equation, whose residual carries the λ-sensitive signal.

use crate::linalg::SMat;
use crate::model::{Model, ModelClass, ModelError, ParamRole};
use crate::scalar::Scalar;

use super::Potential;

#[derive(Clone, Copy, Debug)]
pub struct QuasiGle {
    pub potential: Potential,
}

impl QuasiGle {
    pub fn new(potential: Potential) -> Self {
        QuasiGle { potential }
    }

    /// μ_S2 = −U'(q) + λ s
    fn mu_s2<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        theta[0] * x[2] - self.potential.grad(x[0])
    }

    /// μ_R = −λ p − α s
    fn mu_r<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        S::c(0.0) - theta[0] * x[1] - theta[1] * x[2]
    }

    /// ℒμ_S2 = −U''(q) p + λ μ_R  (linear in s ⇒ no second-order term)
    fn gen_mu_s2<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        theta[0] * self.mu_r(x, theta) - self.potential.hess(x[0]) * x[1]
    }
}

impl Model for QuasiGle {
    fn id(&self) -> &'static str {
        match self.potential {
            Potential::Quadratic { .. } => "qgle-quad",
            Potential::DoubleWell { .. } => "qgle-dw",
        }
    }

    fn class(&self) -> ModelClass {
        ModelClass::three_block(1, 1, 1, 1)
    }

    fn n_params(&self) -> usize {
        3
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["lambda", "alpha", "sigma"]
    }

    fn param_roles(&self) -> Vec<ParamRole> {
        vec![ParamRole::Drift(1), ParamRole::Drift(2), ParamRole::Diffusion]
    }

    fn default_box(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.5, 1.0, 1.0], vec![4.0, 8.0, 8.0])
    }

    fn max_p(&self) -> usize {
        3
    }

    fn sigma0_state_dependent(&self) -> bool {
        false
    }

    fn corrections_state_dependent(&self) -> bool {
        false
    }

    fn drift<S: Scalar>(&self, x: &[S], theta: &[S], out: &mut [S]) {
        out[0] = x[1];
        out[1] = self.mu_s2(x, theta);
        out[2] = self.mu_r(x, theta);
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
            (0, 1) => x[1],
            (0, 2) => self.mu_s2(x, theta),
            (0, 3) => self.gen_mu_s2(x, theta),
            (1, 1) => self.mu_s2(x, theta),
            (1, 2) => self.gen_mu_s2(x, theta),
            (2, 1) => self.mu_r(x, theta),
            // ℒμ_R = −λ μ_S2 − α μ_R
            (2, 2) => S::c(0.0) - theta[0] * self.mu_s2(x, theta) - theta[1] * self.mu_r(x, theta),
            _ => {
                let max = match block {
                    0 => 3,
                    _ => 2,
                };
                return Err(ModelError::UnsupportedOrder {
                    what: "quasi-gle generator iterate",
                    block,
                    k,
                    max,
                });
            }
        };
        Ok(())
    }

    fn dir_mu<S: Scalar>(&self, _j: usize, block: usize, _x: &[S], theta: &[S], out: &mut [S]) {
        debug_assert!(block < 2, "only smooth blocks have directional terms");
        // ℒ_1 ℒ μ_S1 = ℒ_1 μ_S2 = σ λ, and the same for ℒ_1 μ_S2
        out[0] = theta[2] * theta[0];
    }

    fn diffusion_col<S: Scalar>(&self, _j: usize, _x: &[S], theta: &[S], out: &mut [S]) {
        out[0] = S::c(0.0);
        out[1] = S::c(0.0);
        out[2] = theta[2];
    }

    fn cov_correction<S: Scalar>(
        &self,
        j: usize,
        _x: &[S],
        theta: &[S],
        out: &mut SMat<S>,
    ) -> Result<(), ModelError> {
        if j != 1 {
            return Err(ModelError::UnsupportedOrder {
                what: "quasi-gle covariance correction",
                block: 0,
                k: j,
                max: 1,
            });
        }
        let (lambda, alpha, sigma) = (theta[0], theta[1], theta[2]);
        let f = S::c(0.0) - alpha * sigma * sigma;
        let l2 = lambda * lambda;
        out[(0, 0)] = f * l2.scale(1.0 / 36.0);
        out[(0, 1)] = f * l2.scale(1.0 / 12.0);
        out[(0, 2)] = f * lambda.scale(1.0 / 6.0);
        out[(1, 1)] = f * l2.scale(0.25);
        out[(1, 2)] = f * lambda.scale(0.5);
        out[(2, 2)] = f;
        out[(1, 0)] = out[(0, 1)];
        out[(2, 0)] = out[(0, 2)];
        out[(2, 1)] = out[(1, 2)];
        Ok(())
    }
}

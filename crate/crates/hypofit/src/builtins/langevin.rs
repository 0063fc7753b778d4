//! Kinetic Langevin dynamics: position q integrates momentum p, and only p
//! is forced,
//!
//! ```text
//! dq =  p dt
//! dp = (−U'(q) + γ p) dt + σ dW
//! ```
//!
//! with estimated parameters θ = (γ, σ) and a structurally fixed confining
//! potential U. Ergodicity needs γ < 0, which the default box enforces.

use crate::linalg::SMat;
use crate::model::{Model, ModelClass, ModelError, ParamRole};
use crate::scalar::Scalar;

use super::Potential;

#[derive(Clone, Copy, Debug)]
pub struct Langevin {
    pub potential: Potential,
}

impl Langevin {
    pub fn new(potential: Potential) -> Self {
        Langevin { potential }
    }

    /// μ_R = −U'(q) + γ p
    fn mu_r<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        theta[0] * x[1] - self.potential.grad(x[0])
    }

    /// ℒμ_R = −U''(q) p + γ μ_R  (no second-order term: μ_R is linear in p)
    fn gen_mu_r<S: Scalar>(&self, x: &[S], theta: &[S]) -> S {
        theta[0] * self.mu_r(x, theta) - self.potential.hess(x[0]) * x[1]
    }
}

impl Model for Langevin {
    fn id(&self) -> &'static str {
        match self.potential {
            Potential::Quadratic { .. } => "langevin-quad",
            Potential::DoubleWell { .. } => "langevin-dw",
        }
    }

    fn class(&self) -> ModelClass {
        ModelClass::two_block(1, 1, 1)
    }

    fn n_params(&self) -> usize {
        2
    }

    fn param_names(&self) -> &'static [&'static str] {
        &["gamma", "sigma"]
    }

    fn param_roles(&self) -> Vec<ParamRole> {
        vec![ParamRole::Drift(1), ParamRole::Diffusion]
    }

    fn default_box(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-6.0, 0.5], vec![-0.25, 6.0])
    }

    fn max_p(&self) -> usize {
        4
    }

    fn sigma0_state_dependent(&self) -> bool {
        false
    }

    fn corrections_state_dependent(&self) -> bool {
        // Σ₂ involves U''(q), which varies with q only for the double well.
        self.potential.hess_state_dependent()
    }

    fn drift<S: Scalar>(&self, x: &[S], theta: &[S], out: &mut [S]) {
        out[0] = x[1];
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
            (0, 1) => x[1],
            (0, 2) => self.mu_r(x, theta),
            (0, 3) => self.gen_mu_r(x, theta),
            (1, 1) => self.mu_r(x, theta),
            (1, 2) => self.gen_mu_r(x, theta),
            _ => {
                let max = if block == 0 { 3 } else { 2 };
                return Err(ModelError::UnsupportedOrder {
                    what: "langevin generator iterate",
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
        // ℒ_1 μ_S = σ ∂p/∂p = σ
        out[0] = theta[1];
    }

    fn diffusion_col<S: Scalar>(&self, _j: usize, _x: &[S], theta: &[S], out: &mut [S]) {
        out[0] = S::c(0.0);
        out[1] = theta[1];
    }

    fn cov_correction<S: Scalar>(
        &self,
        j: usize,
        x: &[S],
        theta: &[S],
        out: &mut SMat<S>,
    ) -> Result<(), ModelError> {
        let gamma = theta[0];
        let s2 = theta[1] * theta[1];
        match j {
            1 => {
                let g = gamma * s2;
                out[(0, 0)] = g.scale(0.25);
                out[(0, 1)] = g.scale(0.5);
                out[(1, 0)] = g.scale(0.5);
                out[(1, 1)] = g;
            }
            2 => {
                let upp = self.potential.hess(x[0]);
                let g2 = gamma * gamma;
                let top = (g2.scale(7.0) - upp.scale(4.0)) * s2;
                out[(0, 0)] = top.scale(1.0 / 60.0);
                out[(0, 1)] = top.scale(1.0 / 24.0);
                out[(1, 0)] = top.scale(1.0 / 24.0);
                out[(1, 1)] = (g2.scale(2.0) - upp) * s2.scale(1.0 / 3.0);
            }
            _ => {
                return Err(ModelError::UnsupportedOrder {
                    what: "langevin covariance correction",
                    block: 0,
                    k: j,
                    max: 2,
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: [f64; 2] = [0.3, -0.4];
    const TH: [f64; 2] = [-1.5, 2.0];

    fn quad() -> Langevin {
        Langevin::new(Potential::Quadratic { d: 2.0 })
    }

    fn dw() -> Langevin {
        Langevin::new(Potential::DoubleWell { d: 2.0 })
    }

    #[test]
    fn drift_values() {
        let mut mu = [0.0; 2];
        quad().drift(&X, &TH, &mut mu);
        assert!((mu[0] + 0.4).abs() < 1e-15);
        assert!(mu[1].abs() < 1e-15); // −2·0.3 + (−1.5)(−0.4) = 0
        dw().drift(&X, &TH, &mut mu);
        assert!((mu[1] - (-(0.027 - 0.6) + 0.6)).abs() < 1e-15);
    }

    #[test]
    fn generator_iterates() {
        let mut v = [0.0; 1];
        // ℒ²μ_S = ℒμ_R = −U''(q)p + γμ_R = 0.8 at the test point (quad)
        quad().gen_mu(3, 0, &X, &TH, &mut v).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-15);
        quad().gen_mu(2, 1, &X, &TH, &mut v).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-15);
        assert!(quad().gen_mu(4, 0, &X, &TH, &mut v).is_err());
        assert!(quad().gen_mu(3, 1, &X, &TH, &mut v).is_err());
    }

    #[test]
    fn covariance_corrections_quadratic() {
        let mut s = SMat::zeros(2, 2);
        quad().cov_correction(1, &X, &TH, &mut s).unwrap();
        let want1 = [[-1.5, -3.0], [-3.0, -6.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((s[(i, j)] - want1[i][j]).abs() < 1e-14, "Σ₁[{i}{j}]");
            }
        }
        quad().cov_correction(2, &X, &TH, &mut s).unwrap();
        let want2 = [[31.0 / 60.0, 31.0 / 24.0], [31.0 / 24.0, 10.0 / 3.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((s[(i, j)] - want2[i][j]).abs() < 1e-14, "Σ₂[{i}{j}]");
            }
        }
        assert!(quad().cov_correction(3, &X, &TH, &mut s).is_err());
    }

    #[test]
    fn covariance_corrections_double_well() {
        let mut s = SMat::zeros(2, 2);
        dw().cov_correction(2, &X, &TH, &mut s).unwrap();
        assert!((s[(0, 0)] - 1.5113333333333333).abs() < 1e-14);
        assert!((s[(0, 1)] - 3.7783333333333333).abs() < 1e-14);
        assert!((s[(1, 1)] - 8.3066666666666667).abs() < 1e-13);
    }

    #[test]
    fn diffusion_and_directional() {
        let mut a = [0.0; 2];
        quad().diffusion_col(0, &X, &TH, &mut a);
        assert_eq!(a, [0.0, 2.0]);
        let mut d = [0.0; 1];
        quad().dir_mu(0, 0, &X, &TH, &mut d);
        assert_eq!(d[0], 2.0);
    }
}

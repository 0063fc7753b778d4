//! Built-in models: kinetic Langevin dynamics, a quasi-Markovian generalized
//! Langevin chain, and the partially noisy FitzHugh–Nagumo oscillator.
//!
//! Each built-in hard-codes its generator iterates `ℒ^k μ` and covariance
//! corrections `Σ_j` in closed form; the finite-difference operator oracle in
//! the `oracle` module certifies those forms in the test suite.

mod fhn;
mod langevin;
mod qgle;

pub use fhn::FitzHughNagumo;
pub use langevin::Langevin;
pub use qgle::QuasiGle;

use crate::linalg::SMat;
use crate::model::{Model, ModelClass, ModelError, ParamRole};
use crate::scalar::Scalar;

/// Confining potential for the Langevin-type built-ins, fixed structurally
/// (its stiffness is not estimated).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Potential {
    /// U(q) = d q²/2, so U'(q) = d q.
    Quadratic { d: f64 },
    /// U(q) = q⁴/4 − d q²/2, so U'(q) = q³ − d q.
    DoubleWell { d: f64 },
}

impl Potential {
    /// U'(q)
    pub fn grad<S: Scalar>(&self, q: S) -> S {
        match *self {
            Potential::Quadratic { d } => q.scale(d),
            Potential::DoubleWell { d } => q * q * q - q.scale(d),
        }
    }

    /// U''(q)
    pub fn hess<S: Scalar>(&self, q: S) -> S {
        match *self {
            Potential::Quadratic { d } => S::c(d),
            Potential::DoubleWell { d } => (q * q).scale(3.0) - S::c(d),
        }
    }

    /// Does U'' vary with q?
    pub fn hess_state_dependent(&self) -> bool {
        matches!(self, Potential::DoubleWell { .. })
    }
}

/// Stable ids of the built-in model configurations.
pub const BUILTIN_IDS: &[&str] =
    &["langevin-quad", "langevin-dw", "qgle-quad", "qgle-dw", "fhn"];

/// A built-in model selected by id, with the structural constants fixed at
/// their documented defaults (potential stiffness 2, oscillator input 0.01).
#[derive(Clone, Copy, Debug)]
pub enum Builtin {
    Langevin(Langevin),
    QuasiGle(QuasiGle),
    FitzHughNagumo(FitzHughNagumo),
}

impl Builtin {
    pub fn from_id(id: &str) -> Result<Builtin, ModelError> {
        match id {
            "langevin-quad" => {
                Ok(Builtin::Langevin(Langevin::new(Potential::Quadratic { d: 2.0 })))
            }
            "langevin-dw" => {
                Ok(Builtin::Langevin(Langevin::new(Potential::DoubleWell { d: 2.0 })))
            }
            "qgle-quad" => {
                Ok(Builtin::QuasiGle(QuasiGle::new(Potential::Quadratic { d: 2.0 })))
            }
            "qgle-dw" => {
                Ok(Builtin::QuasiGle(QuasiGle::new(Potential::DoubleWell { d: 2.0 })))
            }
            "fhn" => Ok(Builtin::FitzHughNagumo(FitzHughNagumo::new(0.01))),
            _ => Err(ModelError::UnknownModel { id: id.to_string(), known: BUILTIN_IDS }),
        }
    }

    /// Reference parameter values used by the documentation examples and the
    /// simulation study defaults.
    pub fn reference_theta(&self) -> Vec<f64> {
        match self {
            Builtin::Langevin(_) => vec![-1.5, 2.0],
            Builtin::QuasiGle(_) => vec![2.0, 4.0, 4.0],
            Builtin::FitzHughNagumo(_) => vec![0.1, 1.5, 0.3, 0.6],
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Builtin::Langevin($m) => $body,
            Builtin::QuasiGle($m) => $body,
            Builtin::FitzHughNagumo($m) => $body,
        }
    };
}

impl Model for Builtin {
    fn id(&self) -> &'static str {
        dispatch!(self, m => m.id())
    }

    fn class(&self) -> ModelClass {
        dispatch!(self, m => m.class())
    }

    fn n_params(&self) -> usize {
        dispatch!(self, m => m.n_params())
    }

    fn param_names(&self) -> &'static [&'static str] {
        dispatch!(self, m => m.param_names())
    }

    fn param_roles(&self) -> Vec<ParamRole> {
        dispatch!(self, m => m.param_roles())
    }

    fn default_box(&self) -> (Vec<f64>, Vec<f64>) {
        dispatch!(self, m => m.default_box())
    }

    fn max_p(&self) -> usize {
        dispatch!(self, m => m.max_p())
    }

    fn sigma0_state_dependent(&self) -> bool {
        dispatch!(self, m => m.sigma0_state_dependent())
    }

    fn corrections_state_dependent(&self) -> bool {
        dispatch!(self, m => m.corrections_state_dependent())
    }

    fn drift<S: Scalar>(&self, x: &[S], theta: &[S], out: &mut [S]) {
        dispatch!(self, m => m.drift(x, theta, out))
    }

    fn gen_mu<S: Scalar>(
        &self,
        k: usize,
        block: usize,
        x: &[S],
        theta: &[S],
        out: &mut [S],
    ) -> Result<(), ModelError> {
        dispatch!(self, m => m.gen_mu(k, block, x, theta, out))
    }

    fn dir_mu<S: Scalar>(&self, j: usize, block: usize, x: &[S], theta: &[S], out: &mut [S]) {
        dispatch!(self, m => m.dir_mu(j, block, x, theta, out))
    }

    fn diffusion_col<S: Scalar>(&self, j: usize, x: &[S], theta: &[S], out: &mut [S]) {
        dispatch!(self, m => m.diffusion_col(j, x, theta, out))
    }

    fn cov_correction<S: Scalar>(
        &self,
        j: usize,
        x: &[S],
        theta: &[S],
        out: &mut SMat<S>,
    ) -> Result<(), ModelError> {
        dispatch!(self, m => m.cov_correction(j, x, theta, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in BUILTIN_IDS {
            let m = Builtin::from_id(id).unwrap();
            assert_eq!(m.id(), *id);
            assert_eq!(m.param_names().len(), m.n_params());
            assert_eq!(m.param_roles().len(), m.n_params());
            let (lo, hi) = m.default_box();
            assert_eq!(lo.len(), m.n_params());
            assert!(lo.iter().zip(&hi).all(|(l, h)| l < h));
            let th = m.reference_theta();
            assert!(th.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| l <= v && v <= h));
        }
        assert!(Builtin::from_id("nope").is_err());
    }

    #[test]
    fn potential_derivatives() {
        let quad = Potential::Quadratic { d: 2.0 };
        let dw = Potential::DoubleWell { d: 2.0 };
        assert_eq!(quad.grad(0.3f64), 0.6);
        assert_eq!(quad.hess(0.3f64), 2.0);
        assert!((dw.grad(0.3f64) - (0.027 - 0.6)).abs() < 1e-15);
        assert!((dw.hess(0.3f64) - (0.27 - 2.0)).abs() < 1e-15);
        assert!(!quad.hess_state_dependent());
        assert!(dw.hess_state_dependent());
    }
}

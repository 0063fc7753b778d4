//! Truncated conditional moments of the one-step transition.
//!
//! Over a step of length Δ from state x, block b (smoothness level `a`)
//! moves by `O(Δ)` in mean and fluctuates at scale `Δ^{a+1/2}`. This module
//! computes the three ingredients every estimator downstream consumes:
//!
//! * **truncated mean** — per block, `r_b = x_b + Σ_{k=1..q_b} Δ^k/k! ·
//!   (ℒ^{k−1}μ)_b` with `q_b = K_p + a_b`, `K_p = ⌊p/2⌋`, so that the
//!   residual mean is `O(Δ^{K_p + a_b + 1})` before standardization;
//! * **standardized residual** — `m_b = (y_b − r_b) / Δ^{a_b + 1/2}`, an
//!   `O(1)` quantity whose conditional covariance admits a Δ-expansion;
//! * **covariance expansion** — `Ξ_K(Δ) = Σ + Σ_{j=1..K} Δ^j Σ_j`, where the
//!   leading term couples blocks b, b′ through their noise-lead vectors
//!   `ψ_b = ℒ_j ℒ^{a_b−1} μ_b` (the diffusion column itself for the rough
//!   block):
//!
//!   ```text
//!   Σ_{b,b′} = Σ_j ψ_{b,j} ψ_{b′,j}ᵀ / (a_b! · a_b′! · (a_b + a_b′ + 1))
//!   ```
//!
//!   reproducing the familiar kinetic weights (1, 1/2, 1/3 for two blocks;
//!   1, 1/2, 1/6, 1/3, 1/8, 1/20 for three).
//!
//! Everything is generic over [`Scalar`], so residuals and covariances can
//! carry parameter derivatives.

use crate::linalg::SMat;
use crate::model::{ClassTag, Model, ModelClass, ModelError};
use crate::scalar::Scalar;

/// Errors from moment computations.
#[derive(Clone, Debug, PartialEq)]
pub enum MomentsError {
    /// Requested expansion order p outside 2..=max_p for the model.
    UnsupportedExpansionOrder { p: usize, max_p: usize },
    /// The leading covariance failed its Cholesky factorization.
    NotPositiveDefinite { min_eigenvalue: f64 },
    Model(ModelError),
}

impl std::fmt::Display for MomentsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MomentsError::UnsupportedExpansionOrder { p, max_p } => {
                write!(f, "expansion order p={p} unsupported (this model allows 2..={max_p})")
            }
            MomentsError::NotPositiveDefinite { min_eigenvalue } => write!(
                f,
                "leading covariance is not positive definite (min eigenvalue {min_eigenvalue:e})"
            ),
            MomentsError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MomentsError {}

impl From<ModelError> for MomentsError {
    fn from(e: ModelError) -> Self {
        MomentsError::Model(e)
    }
}

/// Per-coordinate residual standardization factors `Δ^{a_b + 1/2}`.
pub fn block_scales(class: &ModelClass, dt: f64) -> Vec<f64> {
    let sd = dt.sqrt();
    let mut out = Vec::with_capacity(class.dim());
    for b in 0..class.n_blocks() {
        let s = sd * dt.powi(class.smoothness(b) as i32);
        out.extend(std::iter::repeat(s).take(class.block_dims[b]));
    }
    out
}

/// Moment expansion of one model at a fixed order p.
pub struct Expansion<'a, M: Model> {
    model: &'a M,
    class: ModelClass,
    p: usize,
    k_p: usize,
    /// coeff[i1·N + i2] = 1 / (a₁! a₂! (a₁+a₂+1)) for the blocks of i1, i2
    lead_coeff: Vec<f64>,
}

impl<'a, M: Model> Expansion<'a, M> {
    pub fn new(model: &'a M, p: usize) -> Result<Self, MomentsError> {
        if p < 2 || p > model.max_p() {
            return Err(MomentsError::UnsupportedExpansionOrder { p, max_p: model.max_p() });
        }
        let class = model.class();
        let n = class.dim();
        let mut smooth = Vec::with_capacity(n);
        for b in 0..class.n_blocks() {
            smooth.extend(std::iter::repeat(class.smoothness(b)).take(class.block_dims[b]));
        }
        let fact = |a: usize| -> f64 { (1..=a).map(|v| v as f64).product::<f64>().max(1.0) };
        let mut lead_coeff = vec![0.0; n * n];
        for i1 in 0..n {
            for i2 in 0..n {
                let (a1, a2) = (smooth[i1], smooth[i2]);
                lead_coeff[i1 * n + i2] = 1.0 / (fact(a1) * fact(a2) * (a1 + a2 + 1) as f64);
            }
        }
        Ok(Expansion { model, class, p, k_p: p / 2, lead_coeff })
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn class(&self) -> &ModelClass {
        &self.class
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of covariance correction terms kept, `K_p = ⌊p/2⌋`.
    pub fn k_p(&self) -> usize {
        self.k_p
    }

    /// Truncated conditional mean into `out` (length N); `work` needs length
    /// ≥ the largest block dimension.
    pub fn mean_into<S: Scalar>(
        &self,
        x: &[S],
        theta: &[S],
        dt: f64,
        out: &mut [S],
        work: &mut [S],
    ) -> Result<(), ModelError> {
        out.copy_from_slice(x);
        for b in 0..self.class.n_blocks() {
            let range = self.class.block_range(b);
            let q = self.class.mean_order(b, self.k_p);
            let mut coeff = 1.0;
            for k in 1..=q {
                coeff *= dt / k as f64;
                let w = &mut work[..range.len()];
                self.model.gen_mu(k, b, x, theta, w)?;
                for (o, wv) in out[range.clone()].iter_mut().zip(w.iter()) {
                    *o += wv.scale(coeff);
                }
            }
        }
        Ok(())
    }

    /// Allocating convenience wrapper around [`Expansion::mean_into`].
    pub fn mean<S: Scalar>(&self, x: &[S], theta: &[S], dt: f64) -> Result<Vec<S>, ModelError> {
        let n = self.class.dim();
        let mut out = vec![S::c(0.0); n];
        let mut work = vec![S::c(0.0); n];
        self.mean_into(x, theta, dt, &mut out, &mut work)?;
        Ok(out)
    }

    /// Standardize an already-computed mean against the observed next state:
    /// `out_i = (y_i − mean_i) / Δ^{a_b + 1/2}`.
    pub fn standardize_into<S: Scalar>(&self, mean: &[S], y: &[f64], dt: f64, out: &mut [S]) {
        let sd = dt.sqrt();
        for b in 0..self.class.n_blocks() {
            let inv = 1.0 / (sd * dt.powi(self.class.smoothness(b) as i32));
            for i in self.class.block_range(b) {
                out[i] = (S::c(y[i]) - mean[i]).scale(inv);
            }
        }
    }

    /// Standardized one-step residual for a data pair (allocating).
    pub fn residual<S: Scalar>(
        &self,
        x_from: &[f64],
        x_to: &[f64],
        theta: &[S],
        dt: f64,
    ) -> Result<Vec<S>, ModelError> {
        let xs: Vec<S> = x_from.iter().map(|v| S::c(*v)).collect();
        let mean = self.mean(&xs, theta, dt)?;
        let mut out = vec![S::c(0.0); mean.len()];
        self.standardize_into(&mean, x_to, dt, &mut out);
        Ok(out)
    }

    /// Leading covariance Σ(x,θ) of the standardized residual into `out`
    /// (N×N); `work` needs length ≥ 2N.
    pub fn leading_cov_into<S: Scalar>(
        &self,
        x: &[S],
        theta: &[S],
        out: &mut SMat<S>,
        work: &mut [S],
    ) {
        let n = self.class.dim();
        let rough = self.class.rough_block();
        out.fill(S::c(0.0));
        let (psi, col) = work.split_at_mut(n);
        for j in 0..self.class.d {
            for b in 0..self.class.n_blocks() {
                let range = self.class.block_range(b);
                if b == rough {
                    self.model.diffusion_col(j, x, theta, col);
                    psi[range.clone()].copy_from_slice(&col[range]);
                } else {
                    let w = &mut col[..range.len()];
                    self.model.dir_mu(j, b, x, theta, w);
                    psi[range.clone()].copy_from_slice(w);
                }
            }
            for i1 in 0..n {
                for i2 in 0..n {
                    let c = self.lead_coeff[i1 * n + i2];
                    out[(i1, i2)] += (psi[i1] * psi[i2]).scale(c);
                }
            }
        }
    }

    /// Allocating convenience wrapper around [`Expansion::leading_cov_into`].
    pub fn leading_cov<S: Scalar>(&self, x: &[S], theta: &[S]) -> SMat<S> {
        let n = self.class.dim();
        let mut out = SMat::zeros(n, n);
        let mut work = vec![S::c(0.0); 2 * n];
        self.leading_cov_into(x, theta, &mut out, &mut work);
        out
    }

    /// Correction matrix Σ_j(x,θ) (delegates to the model).
    pub fn correction_into<S: Scalar>(
        &self,
        j: usize,
        x: &[S],
        theta: &[S],
        out: &mut SMat<S>,
    ) -> Result<(), ModelError> {
        self.model.cov_correction(j, x, theta, out)
    }

    /// Expanded covariance `Ξ_{K_p}(Δ) = Σ + Σ_{j=1..K_p} Δ^j Σ_j` into
    /// `out`; `scratch` is an N×N buffer and `work` needs length ≥ 2N.
    pub fn covariance_into<S: Scalar>(
        &self,
        x: &[S],
        theta: &[S],
        dt: f64,
        out: &mut SMat<S>,
        scratch: &mut SMat<S>,
        work: &mut [S],
    ) -> Result<(), ModelError> {
        self.leading_cov_into(x, theta, out, work);
        let mut dpow = 1.0;
        for j in 1..=self.k_p {
            dpow *= dt;
            self.model.cov_correction(j, x, theta, scratch)?;
            out.add_scaled(scratch, dpow);
        }
        Ok(())
    }

    /// Allocating convenience wrapper around [`Expansion::covariance_into`].
    pub fn covariance<S: Scalar>(
        &self,
        x: &[S],
        theta: &[S],
        dt: f64,
    ) -> Result<SMat<S>, ModelError> {
        let n = self.class.dim();
        let mut out = SMat::zeros(n, n);
        let mut scratch = SMat::zeros(n, n);
        let mut work = vec![S::c(0.0); 2 * n];
        self.covariance_into(x, theta, dt, &mut out, &mut scratch, &mut work)?;
        Ok(out)
    }
}

/// Central finite-difference Jacobian block ∂(drift rows `rows`)/∂x_cols.
fn drift_jacobian_block<M: Model>(
    model: &M,
    x: &[f64],
    theta: &[f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> SMat<f64> {
    let n = x.len();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-5 * (1.0 + norm);
    let mut out = SMat::zeros(rows.len(), cols.len());
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for (jc, c) in cols.enumerate() {
        xp[c] = x[c] + h;
        model.drift(&xp, theta, &mut fp);
        xp[c] = x[c] - h;
        model.drift(&xp, theta, &mut fm);
        xp[c] = x[c];
        for (ir, r) in rows.clone().enumerate() {
            out[(ir, jc)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    out
}

/// Structural identities tying the precision matrix Λ = Σ⁻¹ of a
/// three-block model to the drift Jacobian blocks J₁ = ∂μ_{S1}/∂x_{S2} and
/// J₂ = ∂μ_{S2}/∂x_R and the rough-block squared diffusion a_R:
///
/// ```text
/// (1)  Λ_{11} J₁ + 2 Λ_{12} = 0
/// (2)  Λ_{22} − 12 (J₂ a_R J₂ᵀ)⁻¹ + ½ Λ_{21} J₁ = 0
/// (3)  Λ · [⅙ J₁J₂; ½ J₂; I] = [0; 0; a_R⁻¹]
/// (4)  Λ_{11} = 720 (J₁J₂ a_R (J₁J₂)ᵀ)⁻¹
/// ```
///
/// Returns the max-abs residual of each identity, normalized by the largest
/// term entering it (so the values stay meaningful where Λ itself is large,
/// e.g. near parameter-box corners), for use as a correctness probe of the
/// leading-covariance assembly.
pub fn three_block_identity_residuals<M: Model>(
    model: &M,
    x: &[f64],
    theta: &[f64],
) -> Result<[f64; 4], MomentsError> {
    let class = model.class();
    assert_eq!(class.tag, ClassTag::ThreeBlock, "identities apply to three-block models");
    let n = class.dim();
    let (r1, r2, rr) =
        (class.block_range(0), class.block_range(1), class.block_range(2));
    let nr = rr.len();

    let exp = Expansion::new(model, 2)?;
    let sigma = exp.leading_cov(x, theta);
    let lam = match sigma.cholesky() {
        Some(ch) => {
            // One Newton–Schulz refinement of the explicit inverse keeps the
            // residuals near machine precision even where the covariance is
            // badly conditioned (parameter-box corners).
            let lam0 = ch.inverse();
            let mut corr = sigma.mul(&lam0);
            for e in corr.as_mut_slice() {
                *e = -*e;
            }
            for i in 0..n {
                corr[(i, i)] += 2.0;
            }
            let mut refined = lam0.mul(&corr);
            refined.symmetrize();
            refined
        }
        None => {
            let eigs = sigma.eigenvalues_symmetric();
            return Err(MomentsError::NotPositiveDefinite { min_eigenvalue: eigs[0] });
        }
    };

    let j1 = drift_jacobian_block(model, x, theta, r1.clone(), r2.clone());
    let j2 = drift_jacobian_block(model, x, theta, r2.clone(), rr.clone());

    // a_R = (A Aᵀ) restricted to the rough block
    let mut a_r = SMat::zeros(nr, nr);
    let mut col = vec![0.0; n];
    for j in 0..class.d {
        model.diffusion_col(j, x, theta, &mut col);
        for i1 in 0..nr {
            for i2 in 0..nr {
                a_r[(i1, i2)] += col[rr.start + i1] * col[rr.start + i2];
            }
        }
    }
    let a_r_inv = a_r.cholesky().expect("rough diffusion square").inverse();

    let block = |m: &SMat<f64>, rows: &std::ops::Range<usize>, cols: &std::ops::Range<usize>| {
        let mut out = SMat::zeros(rows.len(), cols.len());
        for (ir, r) in rows.clone().enumerate() {
            for (ic, c) in cols.clone().enumerate() {
                out[(ir, ic)] = m[(r, c)];
            }
        }
        out
    };

    // (1) Λ₁₁ J₁ + 2 Λ₁₂
    let t1 = block(&lam, &r1, &r1).mul(&j1);
    let scale1 = t1.max_abs_value().max(2.0 * block(&lam, &r1, &r2).max_abs_value());
    let mut id1 = t1;
    id1.add_scaled(&block(&lam, &r1, &r2), 2.0);

    // (2) Λ₂₂ − 12 (J₂ a_R J₂ᵀ)⁻¹ + ½ Λ₂₁ J₁
    let a_s2 = j2.mul(&a_r).mul(&j2.transpose());
    let a_s2_inv = a_s2.cholesky().expect("smooth-2 noise square").inverse();
    let t2 = block(&lam, &r2, &r1).mul(&j1);
    let scale2 = block(&lam, &r2, &r2)
        .max_abs_value()
        .max(12.0 * a_s2_inv.max_abs_value())
        .max(0.5 * t2.max_abs_value());
    let mut id2 = block(&lam, &r2, &r2);
    id2.add_scaled(&a_s2_inv, -12.0);
    id2.add_scaled(&t2, 0.5);

    // (3) Λ [⅙J₁J₂; ½J₂; I] − [0;0;a_R⁻¹]
    let mut v = SMat::zeros(n, nr);
    let j1j2 = j1.mul(&j2);
    for (ir, _) in r1.clone().enumerate() {
        for c in 0..nr {
            v[(r1.start + ir, c)] = j1j2[(ir, c)] / 6.0;
        }
    }
    for (ir, _) in r2.clone().enumerate() {
        for c in 0..nr {
            v[(r2.start + ir, c)] = j2[(ir, c)] / 2.0;
        }
    }
    for i in 0..nr {
        v[(rr.start + i, i)] = 1.0;
    }
    // The product Λ·v cancels to the small right-hand side, so the residual
    // is scaled by the pre-cancellation term size ‖Λ‖·‖v‖.
    let scale3 = (lam.max_abs_value() * v.max_abs_value()).max(a_r_inv.max_abs_value());
    let mut id3 = lam.mul(&v);
    for i1 in 0..nr {
        for i2 in 0..nr {
            id3[(rr.start + i1, i2)] -= a_r_inv[(i1, i2)];
        }
    }

    // (4) Λ₁₁ − 720 (J₁J₂ a_R (J₁J₂)ᵀ)⁻¹
    let a_s1 = j1j2.mul(&a_r).mul(&j1j2.transpose());
    let a_s1_inv = a_s1.cholesky().expect("smooth-1 noise square").inverse();
    let scale4 =
        block(&lam, &r1, &r1).max_abs_value().max(720.0 * a_s1_inv.max_abs_value());
    let mut id4 = block(&lam, &r1, &r1);
    id4.add_scaled(&a_s1_inv, -720.0);

    Ok([
        id1.max_abs_value() / (1.0 + scale1),
        id2.max_abs_value() / (1.0 + scale2),
        id3.max_abs_value() / (1.0 + scale3),
        id4.max_abs_value() / (1.0 + scale4),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::{Builtin, Langevin, Potential, QuasiGle};
    use crate::scalar::Dual4;

    const X: [f64; 2] = [0.3, -0.4];
    const TH: [f64; 2] = [-1.5, 2.0];

    fn langevin() -> Langevin {
        Langevin::new(Potential::Quadratic { d: 2.0 })
    }

    #[test]
    fn leading_cov_langevin_frozen() {
        let m = langevin();
        let exp = Expansion::new(&m, 2).unwrap();
        let s = exp.leading_cov(&X, &TH);
        let want = [[4.0 / 3.0, 2.0], [2.0, 4.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((s[(i, j)] - want[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn leading_cov_three_block_weights() {
        let m = QuasiGle::new(Potential::Quadratic { d: 2.0 });
        let exp = Expansion::new(&m, 2).unwrap();
        let th = [2.0, 4.0, 4.0];
        let s = exp.leading_cov(&[0.5, -0.2, 0.1], &th);
        let (l, s2) = (2.0, 16.0);
        let want = [
            [s2 * l * l / 20.0, s2 * l * l / 8.0, s2 * l / 6.0],
            [s2 * l * l / 8.0, s2 * l * l / 3.0, s2 * l / 2.0],
            [s2 * l / 6.0, s2 * l / 2.0, s2],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[(i, j)] - want[i][j]).abs() < 1e-12, "Σ[{i}{j}]");
            }
        }
    }

    #[test]
    fn mean_orders_low_and_high() {
        let m = langevin();
        let dt = 0.1;
        // p=2: smooth keeps two drift terms, rough one
        let exp2 = Expansion::new(&m, 2).unwrap();
        let r2 = exp2.mean(&X, &TH, dt).unwrap();
        assert!((r2[0] - (0.3 - 0.04)).abs() < 1e-15); // μ_R = 0 at this point
        assert!((r2[1] - -0.4).abs() < 1e-15);
        // p=3 keeps the same mean truncation
        let exp3 = Expansion::new(&m, 3).unwrap();
        let r3 = exp3.mean(&X, &TH, dt).unwrap();
        assert_eq!(r2, r3);
        // p=4 adds Δ³/6·ℒ²μ_S and Δ²/2·ℒμ_R (both 0.8 at this point)
        let exp4 = Expansion::new(&m, 4).unwrap();
        let r4 = exp4.mean(&X, &TH, dt).unwrap();
        assert!((r4[0] - (r2[0] + 0.8 * dt.powi(3) / 6.0)).abs() < 1e-15);
        assert!((r4[1] - (r2[1] + 0.8 * dt.powi(2) / 2.0)).abs() < 1e-15);
        assert!(Expansion::new(&m, 5).is_err());
        assert!(Expansion::new(&m, 1).is_err());
    }

    #[test]
    fn residual_standardization() {
        let model = langevin();
        let exp = Expansion::new(&model, 2).unwrap();
        let dt = 0.01;
        let y = [0.31, -0.38];
        let m = exp.residual::<f64>(&X, &y, &TH, dt).unwrap();
        let r = exp.mean(&X, &TH, dt).unwrap();
        assert!((m[0] - (y[0] - r[0]) / dt.powf(1.5)).abs() < 1e-10);
        assert!((m[1] - (y[1] - r[1]) / dt.sqrt()).abs() < 1e-10);
        let scales = block_scales(&langevin().class(), dt);
        assert!((scales[0] - dt.powf(1.5)).abs() < 1e-18);
        assert!((scales[1] - dt.sqrt()).abs() < 1e-18);
    }

    #[test]
    fn covariance_expansion_adds_corrections() {
        let m = langevin();
        let exp = Expansion::new(&m, 4).unwrap();
        let dt = 0.05;
        let xi = exp.covariance(&X, &TH, dt).unwrap();
        let s0 = exp.leading_cov(&X, &TH);
        let mut s1 = SMat::zeros(2, 2);
        langevin().cov_correction(1, &X, &TH, &mut s1).unwrap();
        let mut s2 = SMat::zeros(2, 2);
        langevin().cov_correction(2, &X, &TH, &mut s2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = s0[(i, j)] + dt * s1[(i, j)] + dt * dt * s2[(i, j)];
                assert!((xi[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dual_mean_matches_f64_and_carries_gradient() {
        let m = langevin();
        let exp = Expansion::new(&m, 4).unwrap();
        let dt = 0.1;
        let xd: Vec<Dual4> = X.iter().map(|v| Dual4::c(*v)).collect();
        let thd = [Dual4::var(TH[0], 0), Dual4::var(TH[1], 1)];
        let md = exp.mean(&xd, &thd, dt).unwrap();
        let mf = exp.mean(&X, &TH, dt).unwrap();
        for i in 0..2 {
            assert!((md[i].re - mf[i]).abs() < 1e-15);
        }
        // ∂r_R/∂γ by finite differences
        let h = 1e-6;
        let mut thp = TH;
        thp[0] += h;
        let rp = exp.mean(&X, &thp, dt).unwrap();
        thp[0] = TH[0] - h;
        let rm = exp.mean(&X, &thp, dt).unwrap();
        let fd = (rp[1] - rm[1]) / (2.0 * h);
        assert!((md[1].dx[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn three_block_identities_hold_for_gle_chain() {
        for id in ["qgle-quad", "qgle-dw"] {
            let m = Builtin::from_id(id).unwrap();
            let res =
                three_block_identity_residuals(&m, &[0.7, -1.1, 0.4], &[2.0, 4.0, 4.0]).unwrap();
            for (k, r) in res.iter().enumerate() {
                assert!(*r < 1e-10, "{id} identity {k} residual {r:e}");
            }
        }
    }

    #[test]
    fn degenerate_diffusion_reported_not_positive_definite() {
        let m = QuasiGle::new(Potential::Quadratic { d: 2.0 });
        // σ = 0 collapses the covariance to zero
        let err = three_block_identity_residuals(&m, &[0.5, -0.2, 0.1], &[2.0, 4.0, 0.0]);
        assert!(matches!(err, Err(MomentsError::NotPositiveDefinite { .. })));
    }
}

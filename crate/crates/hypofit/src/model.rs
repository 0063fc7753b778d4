//! The SDE model abstraction shared by every other module.
//!
//! A model describes a degenerate diffusion whose coordinates split into a
//! chain of blocks by how directly they receive noise:
//!
//! ```text
//! two-block ("kinetic") form          three-block ("highly degenerate") form
//!   dX_S = μ_S(X) dt                    dX_S1 = μ_S1(X_S) dt
//!   dX_R = μ_R(X) dt + A_R dW           dX_S2 = μ_S2(X) dt
//!                                       dX_R  = μ_R(X) dt + A_R dW
//! ```
//!
//! Only the rough block `R` is driven by Brownian motion; smoother blocks
//! inherit randomness through the drift, one integration per level. The
//! *smoothness level* `a` of a block counts those integrations (0 for R,
//! 1 for S/S2, 2 for S1) and controls everything downstream: the one-step
//! increment of a level-`a` coordinate has scale `Δ^{a+1/2}`, its truncated
//! conditional mean keeps `K_p + a` drift terms, and its leading noise
//! vector is the iterated directional derivative `ℒ_j ℒ^{a−1} μ`.
//!
//! Models supply closed-form evaluators for the drift, its generator
//! iterates `ℒ^k μ`, the directional terms, and the covariance-correction
//! matrices `Σ_j`. Everything is generic over [`Scalar`], so the same code
//! yields plain values or parameter derivatives. A finite-difference oracle
//! (see the `oracle` module) certifies the closed forms against the operator
//! definitions
//!
//! ```text
//! ℒφ  = Σ_i μ^i ∂φ/∂x_i + ½ Σ_{i1,i2} (Σ_k A_k^{i1} A_k^{i2}) ∂²φ/∂x_{i1}∂x_{i2}
//! ℒ_jφ = Σ_i A_j^i ∂φ/∂x_i
//! ```

use crate::linalg::SMat;
use crate::scalar::Scalar;

/// Degeneracy class: two blocks (smooth, rough) or three (extra-smooth,
/// smooth, rough).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassTag {
    TwoBlock,
    ThreeBlock,
}

/// Block/dimension layout of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelClass {
    pub tag: ClassTag,
    /// Per-block coordinate counts, smoothest first; the last block is rough.
    pub block_dims: Vec<usize>,
    /// Driving Brownian dimension.
    pub d: usize,
}

impl ModelClass {
    pub fn two_block(n_s: usize, n_r: usize, d: usize) -> Self {
        assert!(n_s >= 1 && n_r >= 1 && d >= 1);
        ModelClass { tag: ClassTag::TwoBlock, block_dims: vec![n_s, n_r], d }
    }

    pub fn three_block(n_s1: usize, n_s2: usize, n_r: usize, d: usize) -> Self {
        assert!(n_s1 >= 1 && n_s2 >= 1 && n_r >= 1 && d >= 1);
        ModelClass { tag: ClassTag::ThreeBlock, block_dims: vec![n_s1, n_s2, n_r], d }
    }

    /// Total state dimension N.
    pub fn dim(&self) -> usize {
        self.block_dims.iter().sum()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_dims.len()
    }

    /// Index range of block `b` within the stacked state vector.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let start: usize = self.block_dims[..b].iter().sum();
        start..start + self.block_dims[b]
    }

    /// Smoothness level `a` of block `b`: drift integrations separating the
    /// block from the Brownian forcing (rough block: 0).
    pub fn smoothness(&self, b: usize) -> usize {
        self.n_blocks() - 1 - b
    }

    /// Index of the rough (directly driven) block.
    pub fn rough_block(&self) -> usize {
        self.n_blocks() - 1
    }

    /// Residual standardization exponent for block `b`: the one-step
    /// increment is divided by `Δ^{a + 1/2}`.
    pub fn weight(&self, b: usize) -> f64 {
        self.smoothness(b) as f64 + 0.5
    }

    /// Truncation order of the conditional-mean expansion for block `b` at
    /// level `K_p = ⌊p/2⌋`: the block keeps `K_p + a` drift terms.
    pub fn mean_order(&self, b: usize, k_p: usize) -> usize {
        k_p + self.smoothness(b)
    }
}

/// Role of a parameter coordinate, which fixes its CLT rate block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Parameterizes the drift of the given block; estimated at rate
    /// `√(n · Δ^{1−2a})` where `a` is the block's smoothness level.
    Drift(usize),
    /// Parameterizes the diffusion coefficient; estimated at rate `√n`.
    Diffusion,
}

/// Parameter vector with its compact box.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(values.len(), lo.len());
        assert_eq!(values.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| l < h), "empty box");
        ParamVector { values, lo, hi }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn inside_box(&self) -> bool {
        self.values
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// Clamp every coordinate into the box.
    pub fn project(&mut self) {
        for ((v, l), h) in self.values.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn box_midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

/// Errors from model evaluators.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    UnsupportedOrder { what: &'static str, block: usize, k: usize, max: usize },
    NonFinite { context: String },
    UnknownModel { id: String, known: &'static [&'static str] },
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            ModelError::UnsupportedOrder { what, block, k, max } => write!(
                f,
                "{what}: order k={k} for block {block} exceeds the declared maximum {max}"
            ),
            ModelError::NonFinite { context } => {
                write!(f, "non-finite field evaluation: {context}")
            }
            ModelError::UnknownModel { id, known } => {
                write!(f, "unknown model id {id:?}; known ids: {}", known.join(", "))
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// A degenerate-diffusion model with closed-form analytic ingredients.
///
/// All evaluators are pure functions of `(x, θ)` with no interior
/// mutability, hence safe to call from many threads at once.
pub trait Model: Sync {
    /// Stable string id (e.g. for reports and CLI lookup).
    fn id(&self) -> &'static str;

    fn class(&self) -> ModelClass;

    fn n_params(&self) -> usize;

    fn param_names(&self) -> &'static [&'static str];

    fn param_roles(&self) -> Vec<ParamRole>;

    /// Default compact parameter box.
    fn default_box(&self) -> (Vec<f64>, Vec<f64>);

    /// Largest supported expansion order p.
    fn max_p(&self) -> usize;

    /// Does the leading covariance Σ(x,θ) actually vary with x?
    fn sigma0_state_dependent(&self) -> bool;

    /// Do the corrections Σ_j(x,θ) vary with x?
    fn corrections_state_dependent(&self) -> bool;

    /// Stacked drift μ(x,θ) into `out` (length N, blocks in order).
    fn drift<S: Scalar>(&self, x: &[S], theta: &[S], out: &mut [S]);

    /// `ℒ^{k−1} μ_block` into `out` (length of the block), `k ≥ 1`.
    fn gen_mu<S: Scalar>(
        &self,
        k: usize,
        block: usize,
        x: &[S],
        theta: &[S],
        out: &mut [S],
    ) -> Result<(), ModelError>;

    /// Leading noise vector of a smooth block: `ℒ_j ℒ^{a−1} μ_block` where
    /// `a ≥ 1` is the block's smoothness level and `j` indexes the Brownian
    /// coordinate. (For the rough block the leading noise vector is the
    /// diffusion column itself; see [`Model::diffusion_col`].)
    fn dir_mu<S: Scalar>(&self, j: usize, block: usize, x: &[S], theta: &[S], out: &mut [S]);

    /// Column `j` of the diffusion matrix A (full length N; smooth rows 0).
    fn diffusion_col<S: Scalar>(&self, j: usize, x: &[S], theta: &[S], out: &mut [S]);

    /// Covariance correction Σ_j(x,θ), `1 ≤ j ≤ ⌊max_p/2⌋`, written into the
    /// N×N matrix `out`.
    fn cov_correction<S: Scalar>(
        &self,
        j: usize,
        x: &[S],
        theta: &[S],
        out: &mut SMat<S>,
    ) -> Result<(), ModelError>;
}

/// Finite-difference step used for the rank check's Lie brackets.
pub fn bracket_fd_step(x: &[f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    1e-5 * (1.0 + norm)
}

fn field_a0<M: Model>(model: &M, theta: &[f64], x: &[f64]) -> Vec<f64> {
    // A_0 = μ − ½ Σ_k (J A_k) A_k  (the Stratonovich-corrected drift).
    let n = x.len();
    let d = model.class().d;
    let h = bracket_fd_step(x);
    let mut out = vec![0.0; n];
    model.drift(x, theta, &mut out);
    let mut col = vec![0.0; n];
    let mut col_p = vec![0.0; n];
    let mut col_m = vec![0.0; n];
    let mut xp = x.to_vec();
    for j in 0..d {
        model.diffusion_col(j, x, theta, &mut col);
        // (J A_j) A_j via one directional central difference along A_j
        let na = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 {
            continue;
        }
        for i in 0..n {
            xp[i] = x[i] + h * col[i] / na;
        }
        model.diffusion_col(j, &xp, theta, &mut col_p);
        for i in 0..n {
            xp[i] = x[i] - h * col[i] / na;
        }
        model.diffusion_col(j, &xp, theta, &mut col_m);
        for i in 0..n {
            out[i] -= 0.5 * na * (col_p[i] - col_m[i]) / (2.0 * h);
        }
        xp.copy_from_slice(x);
    }
    out
}

/// Lie bracket `[f, g](x) = (Jg)(x) f(x) − (Jf)(x) g(x)` by central finite
/// differences of the two vector fields.
fn bracket(
    f: &dyn Fn(&[f64]) -> Vec<f64>,
    g: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
) -> Vec<f64> {
    let n = x.len();
    let h = bracket_fd_step(x);
    let fx = f(x);
    let gx = g(x);
    let mut out = vec![0.0; n];
    let mut xp = x.to_vec();
    for l in 0..n {
        xp[l] = x[l] + h;
        let gp = g(&xp);
        let fp = f(&xp);
        xp[l] = x[l] - h;
        let gm = g(&xp);
        let fm = f(&xp);
        xp[l] = x[l];
        for i in 0..n {
            out[i] += (gp[i] - gm[i]) / (2.0 * h) * fx[l];
            out[i] -= (fp[i] - fm[i]) / (2.0 * h) * gx[l];
        }
    }
    out
}

/// Rank report of the noise-propagation (Hörmander-type) condition.
#[derive(Clone, Debug)]
pub struct RankReport {
    pub pass: bool,
    pub per_point: Vec<PointRank>,
}

/// Smallest singular values of the span matrices checked at one point, in
/// condition order (rough span, then the full/projected bracket spans).
#[derive(Clone, Debug)]
pub struct PointRank {
    pub point: Vec<f64>,
    pub min_singular_values: Vec<f64>,
}

/// Check, at each given point, that noise reaches every coordinate:
///
/// * the diffusion columns span the rough block;
/// * together with their brackets against the corrected drift
///   (`[A_0, A_k]`, and `[A_0, [A_0, A_k]]` for three-block models) they
///   span the full space — with the three-block class also requiring the
///   projection onto the two rougher blocks to be spanned one bracket
///   earlier.
///
/// Brackets are evaluated by central finite differences; the report carries
/// the smallest singular value of every span matrix, and `pass` requires all
/// of them to exceed `tol`.
pub fn hormander_rank_check<M: Model>(
    model: &M,
    theta: &[f64],
    points: &[Vec<f64>],
    tol: f64,
) -> Result<RankReport, ModelError> {
    assert!(!points.is_empty(), "rank check needs at least one point");
    let class = model.class();
    let n = class.dim();
    let d = class.d;
    let mut per_point = Vec::with_capacity(points.len());
    let mut pass = true;

    for x in points {
        if x.len() != n {
            return Err(ModelError::DimensionMismatch {
                what: "rank-check point",
                expected: n,
                got: x.len(),
            });
        }
        let a0 = |y: &[f64]| field_a0(model, theta, y);
        let a_col = |j: usize| {
            move |y: &[f64]| {
                let mut c = vec![0.0; n];
                model.diffusion_col(j, y, theta, &mut c);
                c
            }
        };

        // columns: A_k, [A_0, A_k], (three-block) [A_0, [A_0, A_k]]
        let mut cols0: Vec<Vec<f64>> = Vec::new();
        let mut cols1: Vec<Vec<f64>> = Vec::new();
        let mut cols2: Vec<Vec<f64>> = Vec::new();
        for j in 0..d {
            let aj = a_col(j);
            let ajx = aj(x);
            let b1 = bracket(&a0, &aj, x);
            cols0.push(ajx);
            if class.tag == ClassTag::ThreeBlock {
                let b2 = bracket(&a0, &|y: &[f64]| bracket(&a0, &a_col(j), y), x);
                cols2.push(b2);
            }
            cols1.push(b1);
        }
        for c in cols0.iter().chain(&cols1).chain(&cols2) {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    context: format!("vector field at point {x:?}"),
                });
            }
        }

        let rough = class.block_range(class.rough_block());
        let mut svs = Vec::new();

        // (a) rough span: rows of A columns restricted to the rough block
        let rough_rows: Vec<Vec<f64>> = rough
            .clone()
            .map(|i| cols0.iter().map(|c| c[i]).collect())
            .collect();
        let m = SMat::from_rows(&rough_rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        svs.push(m.min_singular_value());

        match class.tag {
            ClassTag::TwoBlock => {
                // (b) {A_k, [A_0, A_k]} spans the full space
                let all: Vec<&Vec<f64>> = cols0.iter().chain(&cols1).collect();
                let rows: Vec<Vec<f64>> =
                    (0..n).map(|i| all.iter().map(|c| c[i]).collect()).collect();
                let m =
                    SMat::from_rows(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
                svs.push(m.min_singular_value());
            }
            ClassTag::ThreeBlock => {
                // (b) projection of {A_k, [A_0, A_k]} onto the two rougher
                // blocks spans them
                let proj_start = class.block_range(0).end;
                let all01: Vec<&Vec<f64>> = cols0.iter().chain(&cols1).collect();
                let rows: Vec<Vec<f64>> = (proj_start..n)
                    .map(|i| all01.iter().map(|c| c[i]).collect())
                    .collect();
                let m =
                    SMat::from_rows(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
                svs.push(m.min_singular_value());
                // (c) adding the double brackets spans the full space
                let all: Vec<&Vec<f64>> = cols0.iter().chain(&cols1).chain(&cols2).collect();
                let rows: Vec<Vec<f64>> =
                    (0..n).map(|i| all.iter().map(|c| c[i]).collect()).collect();
                let m =
                    SMat::from_rows(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
                svs.push(m.min_singular_value());
            }
        }

        pass &= svs.iter().all(|sv| *sv > tol);
        per_point.push(PointRank { point: x.clone(), min_singular_values: svs });
    }

    Ok(RankReport { pass, per_point })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_layout_two_block() {
        let c = ModelClass::two_block(1, 1, 1);
        assert_eq!(c.dim(), 2);
        assert_eq!(c.smoothness(0), 1);
        assert_eq!(c.smoothness(1), 0);
        assert_eq!(c.weight(0), 1.5);
        assert_eq!(c.weight(1), 0.5);
        // mean orders at K_p = 1: smooth 2, rough 1
        assert_eq!(c.mean_order(0, 1), 2);
        assert_eq!(c.mean_order(1, 1), 1);
        assert_eq!(c.block_range(1), 1..2);
    }

    #[test]
    fn block_layout_three_block() {
        let c = ModelClass::three_block(1, 1, 1, 1);
        assert_eq!(c.dim(), 3);
        assert_eq!(c.weight(0), 2.5);
        assert_eq!(c.weight(1), 1.5);
        assert_eq!(c.weight(2), 0.5);
        assert_eq!(c.mean_order(0, 1), 3);
        assert_eq!(c.rough_block(), 2);
    }

    #[test]
    fn param_vector_projection() {
        let mut p = ParamVector::new(vec![5.0, -3.0], vec![0.0, -1.0], vec![1.0, 1.0]);
        assert!(!p.inside_box());
        p.project();
        assert_eq!(p.values, vec![1.0, -1.0]);
        assert!(p.inside_box());
        assert_eq!(p.box_midpoint(), vec![0.5, 0.0]);
    }
}

//! Path simulation under the locally-Gaussian one-step scheme.
//!
//! One step of size h from state x draws
//!
//! ```text
//! x' = r(h, x) + D_h · L(x) · ξ,   ξ ~ N(0, I_N)
//! ```
//!
//! where `r` is the lowest-order truncated mean (each block keeps
//! `1 + a_b` drift terms), `D_h = diag(h^{a_b + 1/2})` restores the
//! per-block fluctuation scales, and `L` is the Cholesky factor of the
//! leading covariance Σ(x,θ). This matches the transition law used by the
//! p = 2 estimator to first order and is the reference data generator for
//! the whole crate: synthetic records are produced on a fine grid (many
//! substeps per observation interval) and then subsampled, so that the
//! discretization error lives well below the observation spacing.
//!
//! Reproducibility: every path is driven by a counter-based generator
//! seeded through [`derive_seed`], so replicate k of a study depends only
//! on (base seed, k) — never on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::linalg::SMat;
use crate::model::{Model, ModelError};
use crate::moments::{block_scales, Expansion, MomentsError};

/// Any coordinate beyond this magnitude aborts the simulation.
pub const EXPLOSION_GUARD: f64 = 1e8;

/// Default burn-in span (time units) discarded before recording.
pub const DEFAULT_BURN_IN: f64 = 10.0;

/// Errors from path simulation.
#[derive(Clone, Debug, PartialEq)]
pub enum SimulateError {
    /// A coordinate left the guard box; the dynamics are numerically
    /// unstable at this step size or parameter value.
    Exploded { step: usize, coordinate: usize, value: f64 },
    /// The leading covariance could not be factorized at some state.
    Moments(MomentsError),
    Model(ModelError),
}

impl std::fmt::Display for SimulateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimulateError::Exploded { step, coordinate, value } => write!(
                f,
                "path exploded at fine step {step}: coordinate {coordinate} reached {value:e} \
                 (guard {EXPLOSION_GUARD:e})"
            ),
            SimulateError::Moments(e) => write!(f, "{e}"),
            SimulateError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SimulateError {}

impl From<MomentsError> for SimulateError {
    fn from(e: MomentsError) -> Self {
        SimulateError::Moments(e)
    }
}

impl From<ModelError> for SimulateError {
    fn from(e: ModelError) -> Self {
        SimulateError::Model(e)
    }
}

/// Derive an independent stream seed from a base seed and a stream index
/// (splitmix64 of a golden-ratio stride, so neighboring indices decorrelate).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampling plan for one synthetic record.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationDesign {
    /// Number of observed transitions (the record holds n+1 states).
    pub n: usize,
    /// Observation spacing Δ.
    pub dt: f64,
    /// Fine simulation substeps per observation interval.
    pub fine_substeps: usize,
    /// Time span discarded before the first recorded state.
    pub burn_in: f64,
    /// Starting state (defaults to the origin).
    pub x0: Option<Vec<f64>>,
}

impl ObservationDesign {
    /// Plan with the default fine resolution: substeps chosen so the fine
    /// step is at most 1e-4, and at least 50 per interval.
    pub fn new(n: usize, dt: f64) -> Self {
        assert!(n >= 1 && dt > 0.0);
        let fine_substeps = ((dt / 1e-4).ceil() as usize).max(50);
        ObservationDesign { n, dt, fine_substeps, burn_in: DEFAULT_BURN_IN, x0: None }
    }

    pub fn with_substeps(mut self, fine_substeps: usize) -> Self {
        assert!(fine_substeps >= 1);
        self.fine_substeps = fine_substeps;
        self
    }

    pub fn with_burn_in(mut self, burn_in: f64) -> Self {
        assert!(burn_in >= 0.0);
        self.burn_in = burn_in;
        self
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }
}

/// An equally spaced record of states.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub dt: f64,
    pub dim: usize,
    /// Row-major (n_states × dim).
    pub data: Vec<f64>,
}

impl ObservationSet {
    pub fn new(dt: f64, dim: usize, data: Vec<f64>) -> Self {
        assert!(dt > 0.0 && dim > 0);
        assert_eq!(data.len() % dim, 0);
        assert!(data.len() / dim >= 1);
        ObservationSet { dt, dim, data }
    }

    pub fn n_states(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Number of transitions (one less than the number of states).
    pub fn n_steps(&self) -> usize {
        self.n_states() - 1
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Time stamp of state i relative to the first recorded state.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Keep every `stride`-th state; the spacing grows accordingly.
    pub fn subsample(&self, stride: usize) -> ObservationSet {
        assert!(stride >= 1);
        let mut data = Vec::with_capacity((self.n_states() / stride + 1) * self.dim);
        let mut i = 0;
        while i < self.n_states() {
            data.extend_from_slice(self.state(i));
            i += stride;
        }
        ObservationSet::new(self.dt * stride as f64, self.dim, data)
    }
}

/// Reusable stepper: hoists the mean expansion and (for models whose leading
/// covariance does not vary with the state) the scaled Cholesky factor.
pub struct LgStepper<'a, M: Model> {
    exp: Expansion<'a, M>,
    theta: Vec<f64>,
    h: f64,
    dim: usize,
    /// D_h · L, precomputed when Σ is state-independent.
    hoisted: Option<SMat<f64>>,
    scales: Vec<f64>,
    mean: Vec<f64>,
    work: Vec<f64>,
    cov: SMat<f64>,
    noise: Vec<f64>,
}

impl<'a, M: Model> LgStepper<'a, M> {
    pub fn new(model: &'a M, theta: &[f64], h: f64) -> Result<Self, SimulateError> {
        assert!(h > 0.0, "step size must be positive");
        let exp = Expansion::new(model, 2)?;
        let dim = exp.class().dim();
        let scales = block_scales(exp.class(), h);
        let mut cov = SMat::zeros(dim, dim);
        let mut work = vec![0.0; 2 * dim];
        let hoisted = if model.sigma0_state_dependent() {
            None
        } else {
            let origin = vec![0.0; dim];
            exp.leading_cov_into(&origin, theta, &mut cov, &mut work);
            Some(scaled_factor(&cov, &scales)?)
        };
        Ok(LgStepper {
            exp,
            theta: theta.to_vec(),
            h,
            dim,
            hoisted,
            scales,
            mean: vec![0.0; dim],
            work,
            cov: SMat::zeros(dim, dim),
            noise: vec![0.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Advance `x` by one step driven by the given standard-normal vector.
    pub fn step_with_noise(&mut self, x: &mut [f64], xi: &[f64]) -> Result<(), SimulateError> {
        self.exp.mean_into(x, &self.theta, self.h, &mut self.mean, &mut self.work)?;
        let dl = match &self.hoisted {
            Some(m) => m,
            None => {
                self.exp.leading_cov_into(x, &self.theta, &mut self.cov, &mut self.work);
                self.cov = scaled_factor(&self.cov, &self.scales)?;
                &self.cov
            }
        };
        for i in 0..self.dim {
            let mut v = self.mean[i];
            for j in 0..=i {
                v += dl[(i, j)] * xi[j];
            }
            x[i] = v;
        }
        Ok(())
    }

    /// Advance `x` by one step, drawing the noise from `rng`.
    pub fn step<R: Rng>(&mut self, x: &mut [f64], rng: &mut R) -> Result<(), SimulateError> {
        for v in self.noise.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let noise = std::mem::take(&mut self.noise);
        let r = self.step_with_noise(x, &noise);
        self.noise = noise;
        r
    }
}

/// D_h · chol(Σ): the lower-triangular map from standard normals to the
/// unstandardized one-step noise.
fn scaled_factor(cov: &SMat<f64>, scales: &[f64]) -> Result<SMat<f64>, SimulateError> {
    let ch = cov.cholesky().ok_or_else(|| {
        let eigs = cov.eigenvalues_symmetric();
        SimulateError::Moments(MomentsError::NotPositiveDefinite { min_eigenvalue: eigs[0] })
    })?;
    let mut l = ch.into_lower();
    for i in 0..l.rows() {
        for j in 0..=i {
            l[(i, j)] *= scales[i];
        }
    }
    Ok(l)
}

/// One step of the locally-Gaussian scheme (allocating convenience form).
pub fn lg_step<M: Model>(
    model: &M,
    x: &[f64],
    theta: &[f64],
    h: f64,
    noise: &[f64],
) -> Result<Vec<f64>, SimulateError> {
    let mut stepper = LgStepper::new(model, theta, h)?;
    let mut out = x.to_vec();
    stepper.step_with_noise(&mut out, noise)?;
    Ok(out)
}

/// Simulate one record: burn in from the starting state on the fine grid,
/// then record n+1 states spaced `design.dt` apart (each observation
/// interval is resolved by `design.fine_substeps` fine steps).
pub fn simulate_fine_path<M: Model>(
    model: &M,
    theta: &[f64],
    design: &ObservationDesign,
    seed: u64,
) -> Result<ObservationSet, SimulateError> {
    let h = design.dt / design.fine_substeps as f64;
    let mut stepper = LgStepper::new(model, theta, h)?;
    let dim = stepper.dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = match &design.x0 {
        Some(x0) => {
            assert_eq!(x0.len(), dim, "starting state has wrong dimension");
            x0.clone()
        }
        None => vec![0.0; dim],
    };

    let mut step_no = 0usize;
    let burn_steps = (design.burn_in / h).round() as usize;
    let mut advance = |x: &mut Vec<f64>,
                       rng: &mut ChaCha12Rng,
                       step_no: &mut usize|
     -> Result<(), SimulateError> {
        stepper.step(x, rng)?;
        *step_no += 1;
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() || v.abs() > EXPLOSION_GUARD {
                return Err(SimulateError::Exploded {
                    step: *step_no,
                    coordinate: i,
                    value: *v,
                });
            }
        }
        Ok(())
    };

    for _ in 0..burn_steps {
        advance(&mut x, &mut rng, &mut step_no)?;
    }

    let mut data = Vec::with_capacity((design.n + 1) * dim);
    data.extend_from_slice(&x);
    for _ in 0..design.n {
        for _ in 0..design.fine_substeps {
            advance(&mut x, &mut rng, &mut step_no)?;
        }
        data.extend_from_slice(&x);
    }
    Ok(ObservationSet::new(design.dt, dim, data))
}

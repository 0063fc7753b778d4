//! Small dense linear algebra, sized for this crate's needs.
//!
//! The state dimension of a model is tiny (2 or 3 for the built-ins) and the
//! largest matrix anywhere is the joint-Gaussian oracle's 2n×2n composition
//! with n ≤ 8, so everything here is straightforward dense code. Two design
//! constraints rule out an off-the-shelf crate:
//!
//! * the estimation hot path differentiates *through* the linear algebra, so
//!   factorizations must be generic over the AD scalar ([`Scalar`]) — which
//!   is why positive-definite inversion goes through Cholesky (smooth in the
//!   matrix entries) rather than an iterative eigensolver;
//! * verification oracles need a handful of f64-only extras (Jacobi
//!   eigenvalues for PD diagnostics, an LU solve and a Padé-13 matrix
//!   exponential for exact linear-SDE moments).

use crate::scalar::Scalar;

/// Dense row-major matrix over a generic scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct SMat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> SMat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SMat { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[S]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        SMat { rows: r, cols: c, data }
    }

    /// Lift an f64 matrix into any scalar type (used to mix observed data
    /// into dual-number computations).
    pub fn lift(src: &SMat<f64>) -> Self {
        SMat {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&v| S::c(v)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out = self * rhs`, reusing `out`'s storage (hot-path friendly).
    pub fn mul_into(&self, rhs: &SMat<S>, out: &mut SMat<S>) {
        assert_eq!(self.cols, rhs.rows);
        assert_eq!(out.rows, self.rows);
        assert_eq!(out.cols, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = S::zero();
                for k in 0..self.cols {
                    acc += self[(i, k)] * rhs[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
    }

    pub fn mul(&self, rhs: &SMat<S>) -> SMat<S> {
        let mut out = SMat::zeros(self.rows, rhs.cols);
        self.mul_into(rhs, &mut out);
        out
    }

    pub fn transpose(&self) -> SMat<S> {
        let mut out = SMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &SMat<S>, k: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b.scale(k);
        }
    }

    /// `self = -self`.
    pub fn negate(&mut self) {
        for a in self.data.iter_mut() {
            *a = -*a;
        }
    }

    /// Σ_i A_ii.
    pub fn trace(&self) -> S {
        (0..self.rows.min(self.cols)).fold(S::zero(), |acc, i| acc + self[(i, i)])
    }

    /// Tr[self · rhs] without forming the product.
    pub fn trace_of_product(&self, rhs: &SMat<S>) -> S {
        assert_eq!(self.cols, rhs.rows);
        assert_eq!(self.rows, rhs.cols);
        let mut acc = S::zero();
        for i in 0..self.rows {
            for k in 0..self.cols {
                acc += self[(i, k)] * rhs[(k, i)];
            }
        }
        acc
    }

    /// vᵀ · self · v for a square matrix.
    pub fn quad_form(&self, v: &[S]) -> S {
        assert_eq!(self.rows, self.cols);
        assert_eq!(v.len(), self.rows);
        let mut acc = S::zero();
        for i in 0..self.rows {
            let mut row = S::zero();
            for j in 0..self.cols {
                row += self[(i, j)] * v[j];
            }
            acc += v[i] * row;
        }
        acc
    }

    /// Average out round-off asymmetry: `self = (self + selfᵀ)/2`.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = (self[(i, j)] + self[(j, i)]).scale(0.5);
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }

    /// Largest |entry| of the value parts.
    pub fn max_abs_value(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.value().abs()))
    }

    /// Lower-triangular Cholesky factor of a symmetric positive-definite
    /// matrix; `None` when a pivot is non-positive (⇔ not PD, up to
    /// round-off). Works on any [`Scalar`], so derivatives propagate through
    /// the factorization.
    pub fn cholesky(&self) -> Option<Cholesky<S>> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut l = SMat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = self[(i, j)];
                for k in 0..j {
                    acc -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if acc.value() <= 0.0 || !acc.is_finite_value() {
                        return None;
                    }
                    l[(i, j)] = acc.sqrt();
                } else {
                    l[(i, j)] = acc / l[(j, j)];
                }
            }
        }
        Some(Cholesky { l })
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for SMat<S> {
    type Output = S;
    #[inline(always)]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for SMat<S> {
    #[inline(always)]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// Cholesky factorization `A = L Lᵀ` of a positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<S> {
    l: SMat<S>,
}

impl<S: Scalar> Cholesky<S> {
    pub fn factor(&self) -> &SMat<S> {
        &self.l
    }

    /// Consume the factorization, returning the lower factor L.
    pub fn into_lower(self) -> SMat<S> {
        self.l
    }

    /// log det A = 2 Σ log L_ii.
    pub fn log_det(&self) -> S {
        let n = self.l.rows;
        let mut acc = S::zero();
        for i in 0..n {
            acc += self.l[(i, i)].ln();
        }
        acc.scale(2.0)
    }

    /// Solve A x = b in place.
    pub fn solve_in_place(&self, b: &mut [S]) {
        let n = self.l.rows;
        assert_eq!(b.len(), n);
        // forward: L y = b
        for i in 0..n {
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l[(i, k)] * b[k];
            }
            b[i] = acc / self.l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut acc = b[i];
            for k in (i + 1)..n {
                acc -= self.l[(k, i)] * b[k];
            }
            b[i] = acc / self.l[(i, i)];
        }
    }

    /// A⁻¹, assembled column by column.
    pub fn inverse(&self) -> SMat<S> {
        let n = self.l.rows;
        let mut inv = SMat::zeros(n, n);
        let mut col = vec![S::zero(); n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = S::zero());
            col[j] = S::one();
            self.solve_in_place(&mut col);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        // exact symmetry is relied upon downstream
        inv.symmetrize();
        inv
    }
}

// ---------------------------------------------------------------------------
// f64-only extras for oracles and diagnostics
// ---------------------------------------------------------------------------

impl SMat<f64> {
    /// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
    /// ascending. Used for positive-definiteness diagnostics and smallest
    /// singular values of span matrices (via the Gram matrix); never on the
    /// AD path.
    pub fn eigenvalues_symmetric(&self) -> Vec<f64> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off.sqrt() <= 1e-14 * (1.0 + a.max_abs_value()) {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() <= 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        ev
    }

    /// Smallest singular value of a (possibly rectangular) matrix whose rows
    /// span a space: σ_min = sqrt(λ_min(M Mᵀ)).
    pub fn min_singular_value(&self) -> f64 {
        let gram = self.mul(&self.transpose());
        gram.eigenvalues_symmetric()[0].max(0.0).sqrt()
    }

    /// Solve A X = B by LU with partial pivoting (general square A).
    pub fn lu_solve(&self, b: &SMat<f64>) -> SMat<f64> {
        assert_eq!(self.rows, self.cols);
        assert_eq!(b.rows, self.rows);
        let n = self.rows;
        let mut lu = self.clone();
        let mut x = b.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (mut pivot, mut pmax) = (k, lu[(k, k)].abs());
            for i in (k + 1)..n {
                if lu[(i, k)].abs() > pmax {
                    pivot = i;
                    pmax = lu[(i, k)].abs();
                }
            }
            assert!(pmax > 0.0, "singular matrix in lu_solve");
            if pivot != k {
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(pivot, j)];
                    lu[(pivot, j)] = t;
                }
                perm.swap(k, pivot);
                for j in 0..x.cols {
                    let t = x[(k, j)];
                    x[(k, j)] = x[(pivot, j)];
                    x[(pivot, j)] = t;
                }
            }
            for i in (k + 1)..n {
                let f = lu[(i, k)] / lu[(k, k)];
                lu[(i, k)] = f;
                for j in (k + 1)..n {
                    let t = f * lu[(k, j)];
                    lu[(i, j)] -= t;
                }
                for j in 0..x.cols {
                    let t = f * x[(k, j)];
                    x[(i, j)] -= t;
                }
            }
        }
        for j in 0..x.cols {
            for i in (0..n).rev() {
                let mut acc = x[(i, j)];
                for k in (i + 1)..n {
                    acc -= lu[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = acc / lu[(i, i)];
            }
        }
        x
    }

    /// Matrix exponential by scaling-and-squaring with a fixed order-13 Padé
    /// approximant. Inputs here are small (≤ 6×6 augmented systems), so the
    /// fixed order is accurate to machine precision after scaling.
    pub fn expm(&self) -> SMat<f64> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        const THETA_13: f64 = 5.371920351148152;
        #[rustfmt::skip]
        const B: [f64; 14] = [
            64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
            1187353796428800.0, 129060195264000.0, 10559470521600.0,
            670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
            960960.0, 16380.0, 182.0, 1.0,
        ];
        // ∞-norm (max row sum)
        let norm = (0..n)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let s = if norm > THETA_13 { (norm / THETA_13).log2().ceil() as i32 } else { 0 };
        let mut a = self.clone();
        if s > 0 {
            let f = 0.5f64.powi(s);
            for v in a.data.iter_mut() {
                *v *= f;
            }
        }
        let id = SMat::<f64>::identity(n);
        let a2 = a.mul(&a);
        let a4 = a2.mul(&a2);
        let a6 = a2.mul(&a4);
        // U = A·(A6·(b13·A6 + b11·A4 + b9·A2) + b7·A6 + b5·A4 + b3·A2 + b1·I)
        let mut w1 = SMat::zeros(n, n);
        w1.add_scaled(&a6, B[13]);
        w1.add_scaled(&a4, B[11]);
        w1.add_scaled(&a2, B[9]);
        let mut w2 = a6.mul(&w1);
        w2.add_scaled(&a6, B[7]);
        w2.add_scaled(&a4, B[5]);
        w2.add_scaled(&a2, B[3]);
        w2.add_scaled(&id, B[1]);
        let u = a.mul(&w2);
        // V = A6·(b12·A6 + b10·A4 + b8·A2) + b6·A6 + b4·A4 + b2·A2 + b0·I
        let mut w3 = SMat::zeros(n, n);
        w3.add_scaled(&a6, B[12]);
        w3.add_scaled(&a4, B[10]);
        w3.add_scaled(&a2, B[8]);
        let mut v = a6.mul(&w3);
        v.add_scaled(&a6, B[6]);
        v.add_scaled(&a4, B[4]);
        v.add_scaled(&a2, B[2]);
        v.add_scaled(&id, B[0]);
        // (V − U) X = (V + U)
        let mut vm = v.clone();
        vm.add_scaled(&u, -1.0);
        let mut vp = v;
        vp.add_scaled(&u, 1.0);
        let mut x = vm.lu_solve(&vp);
        for _ in 0..s {
            x = x.mul(&x);
        }
        x
    }
}

/// Dot product of two slices.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

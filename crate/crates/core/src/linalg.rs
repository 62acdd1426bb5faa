//! Dense complex linear algebra and Liouville-space primitives.
//!
//! Operators are vectorized by stacking columns, so `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Shared numerical tolerances.
pub mod tol {
    pub const HERMITIAN: f64 = 1e-12;
    pub const UNITARY: f64 = 1e-10;
    pub const TRACE: f64 = 1e-10;
    pub const PSD: f64 = 1e-10;
    pub const CHANNEL_TP: f64 = 1e-9;
    pub const CHANNEL_CP: f64 = 1e-8;
    pub const STATE_NORM: f64 = 1e-12;
    pub const FIXED_POINT: f64 = 1e-9;
    pub const GAP_FLOOR: f64 = 1e-6;
    pub const NORM_FLOOR: f64 = 1e-6;
    pub const LIE_RESIDUAL: f64 = 1e-9;
}

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(d: usize) -> CMat {
    CMat::identity(d, d)
}

pub fn zeros(r: usize, c: usize) -> CMat {
    CMat::zeros(r, c)
}

pub fn dag(a: &CMat) -> CMat {
    a.adjoint()
}

pub fn ket_bra(ket: &CVec, bra: &CVec) -> CMat {
    ket * bra.adjoint()
}

pub fn basis_ket(d: usize, k: usize) -> CVec {
    let mut v = CVec::zeros(d);
    v[k] = ONE;
    v
}

/// `|i⟩⟨j|` in dimension `d`.
pub fn unit(d: usize, i: usize, j: usize) -> CMat {
    let mut m = CMat::zeros(d, d);
    m[(i, j)] = ONE;
    m
}

pub fn trace(a: &CMat) -> C64 {
    a.diagonal().iter().sum()
}

/// `Tr(A B)` without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    let n = a.nrows();
    let mut s = ZERO;
    for i in 0..n {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn hermitian_residual(a: &CMat) -> f64 {
    max_abs(&(a - a.adjoint()))
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    a.is_square() && hermitian_residual(a) <= tol
}

pub fn unitary_residual(u: &CMat) -> f64 {
    let d = u.nrows();
    max_abs(&(u.adjoint() * u - identity(d)))
}

pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

fn check_square(a: &CMat, what: &str) -> Result<()> {
    if a.is_square() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: expected square matrix, got {}x{}", a.nrows(), a.ncols())))
    }
}

fn check_finite(a: &CMat, what: &str) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn vectorize(a: &CMat) -> Result<CVec> {
    check_square(a, "vectorize")?;
    Ok(CVec::from_column_slice(a.as_slice()))
}

pub fn devectorize(v: &CVec, d: usize) -> Result<CMat> {
    if v.len() != d * d {
        return Err(Error::Shape(format!("devectorize: length {} is not {d}²", v.len())));
    }
    Ok(CMat::from_column_slice(d, d, v.as_slice()))
}

pub(crate) fn vec_of(a: &CMat) -> CVec {
    CVec::from_column_slice(a.as_slice())
}

pub(crate) fn mat_of(v: &CVec, d: usize) -> CMat {
    CMat::from_column_slice(d, d, v.as_slice())
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// Superoperator of `X ↦ A X B`.
pub fn sandwich(a: &CMat, b: &CMat) -> CMat {
    b.transpose().kronecker(a)
}

/// Superoperator of `X ↦ A X`.
pub fn left_mul(a: &CMat) -> CMat {
    identity(a.nrows()).kronecker(a)
}

/// Superoperator of `X ↦ X B`.
pub fn right_mul(b: &CMat) -> CMat {
    b.transpose().kronecker(&identity(b.nrows()))
}

/// Applies a superoperator matrix to an operator.
pub fn apply_super(s: &CMat, x: &CMat) -> CMat {
    let d = x.nrows();
    mat_of(&(s * vec_of(x)), d)
}

/// Applies the Hilbert–Schmidt adjoint of a superoperator.
pub fn apply_super_adjoint(s: &CMat, x: &CMat) -> CMat {
    let d = x.nrows();
    mat_of(&(s.adjoint() * vec_of(x)), d)
}

/// Matrix exponential by scaling and squaring with Padé approximants.
pub fn expm(a: &CMat) -> Result<CMat> {
    check_square(a, "expm")?;
    check_finite(a, "expm input")?;
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    Ok(a.exp())
}

/// Largest singular value.
pub fn op_norm(a: &CMat) -> f64 {
    a.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

/// Sum of singular values.
pub fn trace_norm(a: &CMat) -> Result<f64> {
    check_square(a, "trace_norm")?;
    check_finite(a, "trace_norm input")?;
    Ok(a.singular_values().iter().sum())
}

/// Trace norm of a Hermitian matrix via its spectrum.
pub fn trace_norm_hermitian(a: &CMat) -> f64 {
    SymmetricEigen::new(hermitize(a)).eigenvalues.iter().map(|x| x.abs()).sum()
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(a: &CMat) -> (DVector<f64>, CMat) {
    let se = SymmetricEigen::new(hermitize(a));
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| se.eigenvalues[i]));
    let mut vecs = CMat::zeros(n, n);
    for (col, &i) in idx.iter().enumerate() {
        vecs.set_column(col, &se.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Applies a real function to the spectrum of a Hermitian matrix.
pub fn herm_fn(a: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = eigh(a);
    let fv = CMat::from_diagonal(&vals.map(|x| c(f(x), 0.0)));
    &vecs * fv * vecs.adjoint()
}

/// Square root of a Hermitian matrix with negative eigenvalues clamped to zero.
pub fn psd_sqrt(a: &CMat) -> CMat {
    herm_fn(a, |x| x.max(0.0).sqrt())
}

pub fn min_eigenvalue_hermitian(a: &CMat) -> f64 {
    eigh(a).0.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a general complex matrix from its Schur form.
pub fn eigenvalues(a: &CMat) -> Result<Vec<C64>> {
    check_square(a, "eigenvalues")?;
    check_finite(a, "eigenvalues input")?;
    let schur = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    let (_, t) = schur.unpack();
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Orthonormal (Hilbert–Schmidt) Hermitian basis of `d×d` matrices.
///
/// Ordering: diagonal units `|k⟩⟨k|`, then for each `i < j` the symmetric and
/// antisymmetric off-diagonal elements.
pub fn hermitian_basis(d: usize) -> Vec<CMat> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(d * d);
    for k in 0..d {
        out.push(unit(d, k, k));
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let mut x = CMat::zeros(d, d);
            x[(i, j)] = c(s, 0.0);
            x[(j, i)] = c(s, 0.0);
            out.push(x);
            let mut y = CMat::zeros(d, d);
            y[(i, j)] = c(0.0, -s);
            y[(j, i)] = c(0.0, s);
            out.push(y);
        }
    }
    out
}

/// Orthonormal traceless Hermitian basis (generalized Gell-Mann, `Tr(BᵢBⱼ) = δᵢⱼ`).
pub fn traceless_hermitian_basis(d: usize) -> Vec<CMat> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::with_capacity(d * d - 1);
    for i in 0..d {
        for j in (i + 1)..d {
            let mut x = CMat::zeros(d, d);
            x[(i, j)] = c(s, 0.0);
            x[(j, i)] = c(s, 0.0);
            out.push(x);
            let mut y = CMat::zeros(d, d);
            y[(i, j)] = c(0.0, -s);
            y[(j, i)] = c(0.0, s);
            out.push(y);
        }
    }
    for l in 1..d {
        let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
        let mut z = CMat::zeros(d, d);
        for k in 0..l {
            z[(k, k)] = c(norm, 0.0);
        }
        z[(l, l)] = c(-(l as f64) * norm, 0.0);
        out.push(z);
    }
    out
}

/// Real matrix of a Hermiticity-preserving superoperator in [`hermitian_basis`] coordinates.
///
/// Coordinates of an operator `X` are `xₖ = Tr(Gₖ X)`, complex in general.
#[derive(Clone, Debug)]
pub struct HermitianFrame {
    pub dim: usize,
    /// Columns are `vec(Gₖ)`; unitary.
    pub frame: CMat,
}

impl HermitianFrame {
    pub fn new(dim: usize) -> Self {
        let basis = hermitian_basis(dim);
        let mut frame = CMat::zeros(dim * dim, dim * dim);
        for (k, g) in basis.iter().enumerate() {
            frame.set_column(k, &vec_of(g));
        }
        Self { dim, frame }
    }

    pub fn real_super(&self, s: &CMat) -> RMat {
        let r = self.frame.adjoint() * s * &self.frame;
        r.map(|z| z.re)
    }

    pub fn coords(&self, x: &CMat) -> CVec {
        self.frame.adjoint() * vec_of(x)
    }

    /// Covector `w` with `Tr(A X) = w · coords(X)`.
    pub fn functional(&self, a: &CMat) -> CVec {
        self.frame.transpose() * vec_of(&a.transpose())
    }

    pub fn operator(&self, coords: &CVec) -> CMat {
        mat_of(&(&self.frame * coords), self.dim)
    }
}

/// Choi matrix `Σᵢⱼ |i⟩⟨j| ⊗ S(|i⟩⟨j|)`.
pub fn choi(s: &CMat, d: usize) -> CMat {
    let mut out = CMat::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let img = apply_super(s, &unit(d, i, j));
            for a in 0..d {
                for b in 0..d {
                    out[(i * d + a, j * d + b)] = img[(a, b)];
                }
            }
        }
    }
    out
}

/// Deviation of `vec(I)† S` from `vec(I)†`.
pub fn trace_preservation_residual(s: &CMat, d: usize) -> f64 {
    let id = vec_of(&identity(d));
    let row = s.adjoint() * &id;
    (row - id).iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn choi_min_eigenvalue(s: &CMat, d: usize) -> f64 {
    min_eigenvalue_hermitian(&choi(s, d))
}

/// Normalizes a vector, failing on a zero vector.
pub fn normalized(v: &CVec) -> Result<CVec> {
    let n = v.norm();
    if n <= tol::STATE_NORM || !n.is_finite() {
        return Err(Error::Validation("state vector has zero norm".into()));
    }
    Ok(v.unscale(n))
}

/// Random complex Ginibre matrix.
pub fn random_matrix<R: rand::Rng>(rng: &mut R, r: usize, cols: usize) -> CMat {
    CMat::from_fn(r, cols, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)))
}

pub fn random_hermitian<R: rand::Rng>(rng: &mut R, d: usize) -> CMat {
    hermitize(&random_matrix(rng, d, d))
}

pub fn random_state<R: rand::Rng>(rng: &mut R, d: usize) -> CVec {
    let v = random_matrix(rng, d, 1).column(0).into_owned();
    let n = v.norm();
    v.unscale(n)
}

pub fn random_density<R: rand::Rng>(rng: &mut R, d: usize) -> CMat {
    let g = random_matrix(rng, d, d);
    let p = &g * g.adjoint();
    let t = trace(&p).re;
    p.unscale(t)
}

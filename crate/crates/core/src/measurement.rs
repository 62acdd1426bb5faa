//! Optimality of photon-counting measurements at the interferometer output.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, commutator, trace, CMat, CVec, C64, I, ZERO};
use crate::oracle::{oracle_qfi, BinnedStateVector};

/// Allowed photon counts in one port.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Residue {
    Any,
    Exactly(usize),
    /// `offset + m·step` for `m ≥ 0`.
    Stride { step: usize, offset: usize },
}

impl Residue {
    pub fn contains(&self, n: usize) -> bool {
        match *self {
            Residue::Any => true,
            Residue::Exactly(k) => n == k,
            Residue::Stride { step, offset } => n >= offset && (n - offset) % step == 0,
        }
    }

    fn first(&self) -> usize {
        match *self {
            Residue::Any => 0,
            Residue::Exactly(k) => k,
            Residue::Stride { offset, .. } => offset,
        }
    }

    /// Whether `n ± 1` can stay in the set for some member `n`.
    fn closed_under_unit_shift(&self) -> bool {
        match *self {
            Residue::Any => true,
            Residue::Exactly(_) => false,
            Residue::Stride { step, .. } => step == 1,
        }
    }
}

/// A set `𝓘` of photon-number pairs `(n_A, n_B)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhotonNumberSupport {
    Finite(BTreeSet<(usize, usize)>),
    Rule { a: Residue, b: Residue },
}

impl PhotonNumberSupport {
    pub fn finite(pairs: &[(usize, usize)]) -> Self {
        Self::Finite(pairs.iter().copied().collect())
    }

    pub fn contains(&self, na: usize, nb: usize) -> bool {
        match self {
            Self::Finite(s) => s.contains(&(na, nb)),
            Self::Rule { a, b } => a.contains(na) && b.contains(nb),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NumberCheck {
    pub valid: bool,
    /// A member and a diagonal neighbour that is also a member.
    pub witness: Option<((usize, usize), (usize, usize))>,
}

fn neighbours((na, nb): (usize, usize)) -> impl Iterator<Item = (usize, usize)> {
    [(1i64, 1i64), (1, -1), (-1, 1), (-1, -1)].into_iter().filter_map(move |(da, db)| {
        let a = na as i64 + da;
        let b = nb as i64 + db;
        (a >= 0 && b >= 0).then_some((a as usize, b as usize))
    })
}

/// Checks that no member of `𝓘` has a neighbour `(n_A ± 1, n_B ± 1)` in `𝓘`.
pub fn check_number_optimality(support: &PhotonNumberSupport) -> NumberCheck {
    match support {
        PhotonNumberSupport::Finite(set) => {
            for &p in set {
                if let Some(q) = neighbours(p).find(|q| set.contains(q)) {
                    return NumberCheck { valid: false, witness: Some((p, q)) };
                }
            }
            NumberCheck { valid: true, witness: None }
        }
        PhotonNumberSupport::Rule { a, b } => {
            if a.closed_under_unit_shift() && b.closed_under_unit_shift() {
                let p = (a.first(), b.first());
                NumberCheck { valid: false, witness: Some((p, (p.0 + 1, p.1 + 1))) }
            } else {
                NumberCheck { valid: true, witness: None }
            }
        }
    }
}

/// Probability, its `φ`-derivative and `‖Π H_d ψ‖²` of one outcome at `φ = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct OutcomeMoments {
    pub p: f64,
    pub dp: f64,
    pub curvature: f64,
}

impl std::ops::AddAssign for OutcomeMoments {
    fn add_assign(&mut self, o: Self) {
        self.p += o.p;
        self.dp += o.dp;
        self.curvature += o.curvature;
    }
}

const NULL_PROBABILITY: f64 = 1e-12;
const NULL_SLOPE: f64 = 1e-6;

/// `Σ p′²/p` over outcomes with `p > 0` plus `2p″ = 4‖Π H_d ψ‖²` for the null outcomes.
///
/// Returns `(∞, true)` when a null outcome has a nonzero slope.
pub fn cfi_from_outcomes(outcomes: &[OutcomeMoments]) -> (f64, bool) {
    let mut total = 0.0;
    for o in outcomes {
        if o.p > NULL_PROBABILITY {
            total += o.dp * o.dp / o.p;
        } else if o.dp.abs() > NULL_SLOPE {
            return (f64::INFINITY, true);
        } else {
            total += 4.0 * o.curvature;
        }
    }
    (total, false)
}

fn diag_re(m: &CMat) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, i)].re).collect()
}

/// Outcome moments of the photon-number measurement `Π_{n_A,n_B}` on an oracle state.
///
/// `H_d` acts with bosonic bin modes, so the doubly occupied components of `H_d|ψ⟩` are
/// assigned to the sectors `(n_A ± 1, n_B ∓ 1)` they land in.
pub fn number_outcomes(state: &BinnedStateVector) -> Result<BTreeMap<(usize, usize), OutcomeMoments>> {
    let (Some(a), Some(b)) = (&state.port_a, &state.port_b) else {
        return Err(Error::InvalidArgument("number measurement needs a two-port state".into()));
    };
    let na = diag_re(&(a.adjoint() * a));
    let nb = diag_re(&(b.adjoint() * b));
    let hpsi = state.generator_applied()?;
    let local = state.local_dim;
    let mut out: BTreeMap<(usize, usize), OutcomeMoments> = BTreeMap::new();
    for (idx, (&psi, &h)) in state.amplitudes.iter().zip(hpsi.iter()).enumerate() {
        let (mut ca, mut cb, mut pairs, mut rest) = (0.0, 0.0, 0usize, idx);
        for _ in 0..state.bins {
            let d = rest % local;
            rest /= local;
            ca += na[d];
            cb += nb[d];
            if na[d] > 0.5 && nb[d] > 0.5 {
                pairs += 1;
            }
        }
        let s = (ca.round() as usize, cb.round() as usize);
        *out.entry(s).or_default() += OutcomeMoments {
            p: psi.norm_sqr(),
            dp: 2.0 * (psi.conj() * h).im,
            curvature: h.norm_sqr(),
        };
        if pairs > 0 {
            let w = 2.0 * pairs as f64 * psi.norm_sqr();
            *out.entry((s.0 + 1, s.1 - 1)).or_default() += OutcomeMoments { curvature: w, ..Default::default() };
            *out.entry((s.0 - 1, s.1 + 1)).or_default() += OutcomeMoments { curvature: w, ..Default::default() };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Measurement {
    /// The single outcome `{I}`.
    Trivial,
    PhotonNumber,
    /// `Π_𝓘` against its complement.
    Support(PhotonNumberSupport),
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CfiReport {
    pub cfi: f64,
    pub infinite: bool,
    pub qfi: f64,
    pub outcomes: usize,
}

pub fn cfi_projective(state: &BinnedStateVector, measurement: &Measurement) -> Result<CfiReport> {
    let qfi = oracle_qfi(state)?.qfi;
    let sectors = number_outcomes(state)?;
    let outcomes: Vec<OutcomeMoments> = match measurement {
        Measurement::Trivial => {
            let mut all = OutcomeMoments::default();
            for o in sectors.values() {
                all += *o;
            }
            // ‖H_d ψ‖² enters only through null outcomes; the identity has none.
            vec![OutcomeMoments { curvature: 0.0, ..all }]
        }
        Measurement::PhotonNumber => sectors.values().copied().collect(),
        Measurement::Support(support) => {
            let (mut inside, mut outside) = (OutcomeMoments::default(), OutcomeMoments::default());
            for (&(na, nb), o) in &sectors {
                if support.contains(na, nb) {
                    inside += *o;
                } else {
                    outside += *o;
                }
            }
            vec![inside, outside]
        }
    };
    let (cfi, infinite) = cfi_from_outcomes(&outcomes);
    Ok(CfiReport { cfi, infinite, qfi, outcomes: outcomes.len() })
}

/// Amplitudes of one port truncated at two photons, `Ψ(∅)`, `Ψ(τ)` and the symmetric `Ψ(τ₁, τ₂)`.
#[derive(Clone, Debug)]
pub struct SinglePortAmplitudes {
    pub vacuum: C64,
    pub one: CVec,
    pub two: CMat,
}

/// Two-port wavefunction with at most two photons on a uniform time grid.
///
/// `ab[(i, j)] = Ψ(τ_i; τ_j)` has the port-A photon at `τ_i`; `aa` and `bb` are symmetric.
#[derive(Clone, Debug)]
pub struct TwoPhotonWavefunction {
    pub grid: Vec<f64>,
    pub dt: f64,
    pub vacuum: C64,
    pub one_a: CVec,
    pub one_b: CVec,
    pub aa: CMat,
    pub ab: CMat,
    pub bb: CMat,
}

impl TwoPhotonWavefunction {
    fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn norm_sq(&self) -> f64 {
        let dt = self.dt;
        self.vacuum.norm_sqr()
            + (self.one_a.norm_squared() + self.one_b.norm_squared()) * dt
            + (0.5 * self.aa.norm_squared() + self.ab.norm_squared() + 0.5 * self.bb.norm_squared()) * dt * dt
    }

    /// Product `|ψ_A⟩ ⊗ |ψ_B⟩` truncated at two photons in total.
    pub fn product(grid: Vec<f64>, dt: f64, a: &SinglePortAmplitudes, b: &SinglePortAmplitudes) -> Result<Self> {
        let n = grid.len();
        for (name, s) in [("A", a), ("B", b)] {
            if s.one.len() != n || s.two.shape() != (n, n) {
                return Err(Error::Shape(format!("port {name} amplitudes do not match the grid of {n} points")));
            }
        }
        Ok(Self {
            vacuum: a.vacuum * b.vacuum,
            one_a: &a.one * b.vacuum,
            one_b: &b.one * a.vacuum,
            aa: &a.two * b.vacuum,
            ab: &a.one * b.one.transpose(),
            bb: &b.two * a.vacuum,
            grid,
            dt,
        })
    }

    /// Coefficients `(c₀, v, C)` of `c₀|0⟩ + Σ v_μ c_μ†|0⟩ + ½ Σ C_μν c_μ†c_ν†|0⟩` over modes
    /// `(a_1 … a_n, b_1 … b_n)`.
    fn mode_coefficients(&self) -> (C64, CVec, CMat) {
        let n = self.len();
        let s = self.dt.sqrt();
        let mut v = CVec::zeros(2 * n);
        v.rows_mut(0, n).copy_from(&(&self.one_a * c(s, 0.0)));
        v.rows_mut(n, n).copy_from(&(&self.one_b * c(s, 0.0)));
        let w = c(self.dt, 0.0);
        let mut cm = CMat::zeros(2 * n, 2 * n);
        cm.view_mut((0, 0), (n, n)).copy_from(&(&self.aa * w));
        cm.view_mut((n, n), (n, n)).copy_from(&(&self.bb * w));
        cm.view_mut((0, n), (n, n)).copy_from(&(&self.ab * w));
        cm.view_mut((n, 0), (n, n)).copy_from(&(self.ab.transpose() * w));
        (self.vacuum, v, cm)
    }

    /// `⟨ψ|H_d|ψ⟩` with `H_d = i Σ_τ (a_τ†b_τ − b_τ†a_τ)`.
    pub fn generator_mean(&self) -> f64 {
        let n = self.len();
        let (_, v, cm) = self.mode_coefficients();
        let mut h = CMat::zeros(2 * n, 2 * n);
        for i in 0..n {
            h[(i, n + i)] = I;
            h[(n + i, i)] = -I;
        }
        let one = v.dotc(&(&h * &v));
        let two = trace(&(cm.adjoint() * (&h * &cm + &cm * h.transpose()))) * 0.5;
        (one + two).re
    }
}

/// Symmetric Gaussian kernel `exp(−((τ₁ − t₀)² + (τ₂ − t₀)²) / 2w²)`.
pub fn gaussian_kernel(grid: &[f64], center: f64, width: f64) -> CMat {
    let g = |t: f64| (-(t - center).powi(2) / (2.0 * width * width)).exp();
    CMat::from_fn(grid.len(), grid.len(), |i, j| c(g(grid[i]) * g(grid[j]), 0.0))
}

/// Cell midpoints of `[0, t]` and the cell width.
pub fn midpoint_grid(points: usize, t: f64) -> (Vec<f64>, f64) {
    let dt = t / points as f64;
    ((0..points).map(|i| (i as f64 + 0.5) * dt).collect(), dt)
}

/// Two-photon state with `Ψ(τ₁,τ₂;∅) = f`, `Ψ(τ₁;τ₂) = −f`, `Ψ(∅;τ₁,τ₂) = (1+i)f` and
/// `Ψ(τ₂;τ₁) = (1+i)f` for `τ₁ < τ₂`, scaled to unit norm. Coincident times carry no amplitude.
pub fn entangled_counterexample(f: &CMat, grid: Vec<f64>, dt: f64) -> Result<TwoPhotonWavefunction> {
    let n = grid.len();
    if f.shape() != (n, n) {
        return Err(Error::Shape(format!("kernel is {:?}, grid has {n} points", f.shape())));
    }
    let scale = crate::linalg::max_abs(f).max(f64::MIN_POSITIVE);
    if (f - f.transpose()).iter().any(|z| z.norm() > 1e-12 * scale) {
        return Err(Error::InvalidArgument("kernel f must be symmetric".into()));
    }
    let w = c(1.0, 1.0);
    let mut psi = TwoPhotonWavefunction {
        grid,
        dt,
        vacuum: ZERO,
        one_a: CVec::zeros(n),
        one_b: CVec::zeros(n),
        aa: CMat::zeros(n, n),
        ab: CMat::zeros(n, n),
        bb: CMat::zeros(n, n),
    };
    for i in 0..n {
        for j in i + 1..n {
            let v = f[(i, j)];
            psi.aa[(i, j)] = v;
            psi.aa[(j, i)] = v;
            psi.bb[(i, j)] = v * w;
            psi.bb[(j, i)] = v * w;
            psi.ab[(i, j)] = -v;
            psi.ab[(j, i)] = v * w;
        }
    }
    let norm = psi.norm_sq();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidArgument("kernel vanishes off the diagonal; cannot normalize".into()));
    }
    let s = c(1.0 / norm.sqrt(), 0.0);
    psi.aa *= s;
    psi.ab *= s;
    psi.bb *= s;
    Ok(psi)
}

/// Diagonal entries of `Λ⁽²⁾_σ(τ₁, τ₂)` for one ordered pair `τ₁ < τ₂`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairLambda {
    pub i: usize,
    pub j: usize,
    pub a: [f64; 2],
    pub b: [f64; 2],
}

#[derive(Clone, Debug, Serialize)]
pub struct LambdaReport {
    /// `[Λ⁽¹⁾(τ)]₁₁ = [Λ⁽¹⁾(τ)]₂₂` per grid point.
    pub single: Vec<f64>,
    pub pairs: Vec<PairLambda>,
    pub max_abs_trace: f64,
    pub max_abs_diagonal: f64,
}

pub enum LambdaInput<'a> {
    Product { grid: Vec<f64>, dt: f64, a: &'a SinglePortAmplitudes, b: &'a SinglePortAmplitudes },
    Joint(&'a TwoPhotonWavefunction),
}

fn require_nonzero(s: &SinglePortAmplitudes, port: &str) -> Result<()> {
    let scale = s.vacuum.norm().max(crate::linalg::max_abs(&s.two)).max(s.one.iter().fold(0.0f64, |m, z| m.max(z.norm())));
    let tiny = 1e-300f64.max(1e-14 * scale);
    let bad = |what: String| Err(Error::AssumptionViolated { location: format!("port {port}, {what}"), what: "zero amplitude".into() });
    if s.vacuum.norm() <= tiny {
        return bad("Ψ(∅)".into());
    }
    if let Some(i) = s.one.iter().position(|z| z.norm() <= tiny) {
        return bad(format!("Ψ(τ_{i})"));
    }
    for j in 0..s.two.ncols() {
        for i in 0..j {
            if s.two[(i, j)].norm() <= tiny {
                return bad(format!("Ψ(τ_{i}, τ_{j})"));
            }
        }
    }
    Ok(())
}

/// `Λ⁽¹⁾` and the diagonals of `Λ⁽²⁾_a`, `Λ⁽²⁾_b` on every ordered grid pair.
///
/// With `strict`, product inputs must have nonvanishing amplitudes everywhere.
pub fn lambda_analysis(input: LambdaInput<'_>, strict: bool) -> Result<LambdaReport> {
    let owned;
    let psi = match input {
        LambdaInput::Joint(p) => p,
        LambdaInput::Product { grid, dt, a, b } => {
            if strict {
                require_nonzero(a, "A")?;
                require_nonzero(b, "B")?;
            }
            owned = TwoPhotonWavefunction::product(grid, dt, a, b)?;
            &owned
        }
    };
    let n = psi.len();
    let single: Vec<f64> = (0..n).map(|t| (psi.one_a[t] * psi.one_b[t].conj()).im).collect();
    let pairs: Vec<PairLambda> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n).map(move |j| {
                let aa = psi.aa[(i, j)];
                let bb = psi.bb[(i, j)];
                let first_a = psi.ab[(i, j)];
                let first_b = psi.ab[(j, i)];
                let swap = first_a + first_b;
                let diff = bb - aa;
                PairLambda {
                    i,
                    j,
                    a: [(swap * aa.conj()).im, (diff * first_a.conj()).im],
                    b: [(diff * first_b.conj()).im, -(swap * bb.conj()).im],
                }
            })
        })
        .collect();
    let max_abs_trace = pairs
        .iter()
        .flat_map(|p| [p.a[0] + p.a[1], p.b[0] + p.b[1]])
        .chain(single.iter().map(|s| 2.0 * s))
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let max_abs_diagonal = pairs
        .iter()
        .flat_map(|p| p.a.into_iter().chain(p.b))
        .chain(single.iter().copied())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(LambdaReport { single, pairs, max_abs_trace, max_abs_diagonal })
}

/// Irrational weights of the diagonal generator built from the blockaded controls.
pub const BLOCKADE_XI: [f64; 3] = [1.259_921_049_894_873_2, 1.442_249_570_307_408_3, 1.709_975_946_676_697];

/// Controls `H_k^(±)` and drift `H₀` on the space of three modes with at most `D` photons.
#[derive(Clone, Debug)]
pub struct BlockadeGenerators {
    pub max_photons: usize,
    /// Occupations `(n_0, n_A, n_B)` in basis order.
    pub basis: Vec<[usize; 3]>,
    /// `H_0^(+), H_0^(−), H_A^(+), H_A^(−), H_B^(+), H_B^(−)`.
    pub controls: Vec<CMat>,
    pub drift: CMat,
}

impl BlockadeGenerators {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn all(&self) -> Vec<CMat> {
        let mut v = self.controls.clone();
        v.push(self.drift.clone());
        v
    }

    /// Closed-form diagonal of the drift, `2 Σ_k ξ_k (n_k(2|n| − 2D − 1) + (|n| − D)²)`.
    pub fn mu(&self, n: [usize; 3]) -> f64 {
        let d = self.max_photons as f64;
        let tot = (n[0] + n[1] + n[2]) as f64;
        (0..3).map(|k| 2.0 * BLOCKADE_XI[k] * (n[k] as f64 * (2.0 * tot - 2.0 * d - 1.0) + (tot - d).powi(2))).sum()
    }

    /// Squared drift level spacings `(μ(n + e_k) − μ(n))²` grouped by mode.
    pub fn spacings(&self) -> Vec<Vec<f64>> {
        let pos = |n: [usize; 3]| self.basis.iter().position(|&m| m == n);
        (0..3)
            .map(|k| {
                self.basis
                    .iter()
                    .filter_map(|&n| {
                        let mut up = n;
                        up[k] += 1;
                        let (i, j) = (pos(n)?, pos(up)?);
                        Some((self.drift[(j, j)].re - self.drift[(i, i)].re).powi(2))
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn blockade_generators(max_photons: usize) -> Result<BlockadeGenerators> {
    if max_photons == 0 {
        return Err(Error::InvalidArgument("photon bound D must be at least 1".into()));
    }
    if (2 * max_photons - 1) % 5 == 0 {
        return Err(Error::InvalidArgument(format!(
            "2D − 1 = {} is divisible by 5; the drift spacings can be degenerate",
            2 * max_photons - 1
        )));
    }
    let d = max_photons;
    let mut basis = Vec::new();
    for tot in 0..=d {
        for n0 in (0..=tot).rev() {
            for na in (0..=tot - n0).rev() {
                basis.push([n0, na, tot - n0 - na]);
            }
        }
    }
    let dim = basis.len();
    let pos = |n: [usize; 3]| basis.iter().position(|&m| m == n).expect("in basis");
    let mut controls = Vec::with_capacity(6);
    for k in 0..3 {
        let mut plus = CMat::zeros(dim, dim);
        let mut minus = CMat::zeros(dim, dim);
        for &n in basis.iter().filter(|n| n.iter().sum::<usize>() < d) {
            let mut up = n;
            up[k] += 1;
            let (i, j) = (pos(n), pos(up));
            let amp = (n.iter().sum::<usize>() as f64 - d as f64) * ((n[k] + 1) as f64).sqrt();
            plus[(i, j)] = c(amp, 0.0);
            plus[(j, i)] = c(amp, 0.0);
            minus[(i, j)] = c(0.0, amp);
            minus[(j, i)] = c(0.0, -amp);
        }
        controls.push(plus);
        controls.push(minus);
    }
    let mut drift = CMat::zeros(dim, dim);
    for k in 0..3 {
        drift += commutator(&controls[2 * k], &controls[2 * k + 1]) * c(0.0, BLOCKADE_XI[k]);
    }
    Ok(BlockadeGenerators { max_photons, basis, controls, drift })
}

#[derive(Clone, Debug, Serialize)]
pub struct LieClosureReport {
    pub generators: usize,
    pub ambient_dim: usize,
    pub closure_dim: usize,
    /// Residual norm of each direction when it was accepted.
    pub residuals: Vec<f64>,
}

pub const CLOSURE_TOL: f64 = crate::linalg::tol::LIE_RESIDUAL;

/// Orthonormal real coordinates of a Hermitian matrix under `⟨A, B⟩ = Re Tr(AB)`.
fn herm_coords(a: &CMat) -> DVector<f64> {
    let n = a.nrows();
    let s = std::f64::consts::SQRT_2;
    let mut v = DVector::zeros(n * n);
    let mut k = 0;
    for i in 0..n {
        v[k] = a[(i, i)].re;
        k += 1;
        for j in i + 1..n {
            v[k] = s * a[(i, j)].re;
            v[k + 1] = s * a[(i, j)].im;
            k += 2;
        }
    }
    v
}

fn herm_from_coords(v: &DVector<f64>, n: usize) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut a = CMat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        a[(i, i)] = c(v[k], 0.0);
        k += 1;
        for j in i + 1..n {
            let z = c(s * v[k], s * v[k + 1]);
            a[(i, j)] = z;
            a[(j, i)] = z.conj();
            k += 2;
        }
    }
    a
}

fn traceless(a: &CMat) -> CMat {
    let n = a.nrows();
    let t = trace(a) / c(n as f64, 0.0);
    let mut out = crate::linalg::hermitize(a);
    for i in 0..n {
        out[(i, i)] -= c(t.re, 0.0);
    }
    out
}

/// Residual of `v` after two Gram–Schmidt passes against `basis`.
fn orthogonalize(v: &DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut r = v.clone();
    for _ in 0..2 {
        for q in basis {
            let d = q.dot(&r);
            r.axpy(-d, q, 1.0);
        }
    }
    r
}

/// Dimension of the real Lie algebra generated by `i[·,·]` from traceless Hermitian parts.
pub fn lie_closure(generators: &[CMat]) -> Result<LieClosureReport> {
    let Some(first) = generators.first() else {
        return Err(Error::InvalidArgument("no generators".into()));
    };
    let n = first.nrows();
    if generators.iter().any(|g| g.shape() != (n, n)) {
        return Err(Error::Shape("generators differ in shape".into()));
    }
    let cap = n * n - 1;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut residuals = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    // Commutators of orthonormal directions are O(1), so their norm floor is absolute.
    let mut accept = |v: DVector<f64>, floor: f64, basis: &mut Vec<DVector<f64>>, pending: &mut Vec<usize>| {
        let scale = v.norm();
        if scale <= floor || basis.len() >= cap {
            return;
        }
        let r = orthogonalize(&(v / scale), basis);
        let rn = r.norm();
        if rn > CLOSURE_TOL {
            residuals.push(rn);
            pending.push(basis.len());
            basis.push(r / rn);
        }
    };
    for g in generators {
        accept(herm_coords(&traceless(g)), 0.0, &mut basis, &mut pending);
    }
    let mut head = 0;
    while head < pending.len() && basis.len() < cap {
        let x = herm_from_coords(&basis[pending[head]], n);
        head += 1;
        let snapshot: Vec<CMat> = basis.iter().map(|b| herm_from_coords(b, n)).collect();
        let candidates: Vec<DVector<f64>> =
            snapshot.par_iter().map(|y| herm_coords(&(commutator(&x, y) * I))).collect();
        for v in candidates {
            accept(v, CLOSURE_TOL, &mut basis, &mut pending);
        }
    }
    Ok(LieClosureReport { generators: generators.len(), ambient_dim: n, closure_dim: basis.len(), residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets::params;
    use crate::model::{preset, Mode};
    use crate::oracle::simulate;

    #[test]
    fn number_support_examples() {
        let single = PhotonNumberSupport::finite(&[(3, 2)]);
        assert!(check_number_optimality(&single).valid);
        let fixed_a = PhotonNumberSupport::Rule { a: Residue::Exactly(1), b: Residue::Any };
        assert!(check_number_optimality(&fixed_a).valid);
        let parity = PhotonNumberSupport::Rule { a: Residue::Stride { step: 2, offset: 1 }, b: Residue::Any };
        assert!(check_number_optimality(&parity).valid);
        let bad = PhotonNumberSupport::finite(&[(1, 0), (2, 1)]);
        assert_eq!(check_number_optimality(&bad), NumberCheck { valid: false, witness: Some(((1, 0), (2, 1))) });
        let open = PhotonNumberSupport::Rule { a: Residue::Any, b: Residue::Stride { step: 1, offset: 2 } };
        assert_eq!(check_number_optimality(&open).witness, Some(((0, 2), (1, 3))));
    }

    fn twin_decay(bins: usize) -> BinnedStateVector {
        let m = preset(
            "two_level",
            &params(&[("omega", "0"), ("init", "e"), ("final", "g"), ("T", "4"), ("M", &bins.to_string())]),
        )
        .unwrap();
        simulate(&m, bins).unwrap()
    }

    #[test]
    fn twin_photons_number_measurement_is_optimal() {
        let s = twin_decay(6);
        let r = cfi_projective(&s, &Measurement::PhotonNumber).unwrap();
        assert!(!r.infinite);
        assert!((r.cfi - r.qfi).abs() < 1e-6, "{r:?}");
        let support = PhotonNumberSupport::finite(&[(1, 1)]);
        let b = cfi_projective(&s, &Measurement::Support(support)).unwrap();
        assert!((b.cfi - b.qfi).abs() < 1e-6);
        let t = cfi_projective(&s, &Measurement::Trivial).unwrap();
        assert_eq!(t.cfi, 0.0);
    }

    #[test]
    fn shift_violation_loses_information() {
        let m = preset("two_level", &params(&[("omega", "1.3"), ("T", "3"), ("M", "6")])).unwrap();
        let s = simulate(&m, 6).unwrap();
        let sectors = number_outcomes(&s).unwrap();
        let support: Vec<(usize, usize)> = sectors.iter().filter(|(_, o)| o.p > 1e-12).map(|(k, _)| *k).collect();
        assert!(!check_number_optimality(&PhotonNumberSupport::finite(&support)).valid);
        let r = cfi_projective(&s, &Measurement::PhotonNumber).unwrap();
        assert!(r.cfi < r.qfi - 1e-3, "{r:?}");
        let mut joint = m.clone();
        joint.mode = Mode::SingleSourceBothPorts;
        assert!(cfi_projective(&simulate(&joint, 6).unwrap(), &Measurement::PhotonNumber).is_err());
    }

    #[test]
    fn null_outcome_with_slope_is_flagged() {
        let (cfi, inf) = cfi_from_outcomes(&[
            OutcomeMoments { p: 1.0, dp: 0.0, curvature: 0.0 },
            OutcomeMoments { p: 0.0, dp: 0.1, curvature: 1.0 },
        ]);
        assert!(inf && cfi.is_infinite());
    }

    #[test]
    fn counterexample_lambda() {
        let (grid, dt) = midpoint_grid(32, 10.0);
        let f = gaussian_kernel(&grid, 5.0, 2.0);
        let psi = entangled_counterexample(&f, grid, dt).unwrap();
        assert!((psi.norm_sq() - 1.0).abs() < 1e-12);
        assert!(psi.generator_mean().abs() < 1e-12);
        let r = lambda_analysis(LambdaInput::Joint(&psi), true).unwrap();
        assert!(r.max_abs_trace < 1e-10);
        for p in &r.pairs {
            let f2 = psi.aa[(p.i, p.j)].norm_sqr();
            assert!((p.a[0] - f2).abs() < 1e-10 && (p.a[1] + f2).abs() < 1e-10);
            assert!((p.b[0] - f2).abs() < 1e-10 && (p.b[1] + f2).abs() < 1e-10);
        }
        assert!(r.max_abs_diagonal > 1e-4);
        let mut asym = gaussian_kernel(&psi.grid, 5.0, 2.0);
        asym[(0, 1)] += c(0.1, 0.0);
        assert!(entangled_counterexample(&asym, psi.grid.clone(), dt).is_err());
    }

    fn wavepacket(n: usize, dt: f64, phase: impl Fn(usize) -> f64) -> SinglePortAmplitudes {
        let env = |i: usize| (-((i as f64 + 0.5) * dt - 2.0).powi(2)).exp();
        let one = CVec::from_fn(n, |i, _| C64::from_polar(env(i), phase(i)));
        SinglePortAmplitudes { vacuum: ZERO, one, two: CMat::zeros(n, n) }
    }

    #[test]
    fn product_lambda_cases() {
        let (grid, dt) = midpoint_grid(16, 4.0);
        let a = wavepacket(16, dt, |i| 0.3 * i as f64);
        let r = lambda_analysis(LambdaInput::Product { grid: grid.clone(), dt, a: &a, b: &a }, false).unwrap();
        assert_eq!(r.max_abs_diagonal, 0.0);
        let strict = lambda_analysis(LambdaInput::Product { grid: grid.clone(), dt, a: &a, b: &a }, true);
        assert!(matches!(strict, Err(Error::AssumptionViolated { .. })));
        let real = SinglePortAmplitudes {
            vacuum: c(0.8, 0.0),
            one: CVec::from_element(16, c(0.1, 0.0)),
            two: CMat::from_element(16, 16, c(0.02, 0.0)),
        };
        let r = lambda_analysis(LambdaInput::Product { grid, dt, a: &real, b: &real }, true).unwrap();
        assert!(r.single.iter().all(|&x| x == 0.0));
        assert_eq!(r.max_abs_diagonal, 0.0);
    }

    #[test]
    fn blockade_dimensions_and_spacings() {
        assert_eq!(blockade_generators(1).unwrap().dim(), 4);
        let g = blockade_generators(2).unwrap();
        assert_eq!(g.dim(), 10);
        assert!(blockade_generators(3).is_err());
        for (i, &n) in g.basis.iter().enumerate() {
            assert!((g.drift[(i, i)].re - g.mu(n)).abs() < 1e-12);
        }
        assert!(crate::linalg::hermitian_residual(&(&g.drift - CMat::from_diagonal(&g.drift.diagonal()))) < 1e-12);
        for s in g.spacings() {
            for x in 0..s.len() {
                for y in x + 1..s.len() {
                    assert!((s[x] - s[y]).abs() > 1e-9);
                }
            }
        }
    }

    #[test]
    fn closure_dimensions() {
        assert_eq!(lie_closure(&blockade_generators(1).unwrap().all()).unwrap().closure_dim, 15);
        assert_eq!(lie_closure(&blockade_generators(2).unwrap().all()).unwrap().closure_dim, 99);
        let g = blockade_generators(2).unwrap();
        assert_eq!(lie_closure(&g.controls[..1]).unwrap().closure_dim, 1);
    }
}

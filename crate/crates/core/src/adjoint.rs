//! Adjoint-variable gradients of bin-correlator objectives with respect to per-step controls.
//!
//! Step `p` acts as `T_p = 𝒰_p ∘ 𝒦` with `𝒰_p(X) = U_p X U_p†`, `U_p = exp(−iε Σ_j θ[p,j] B_j)`.
//! A gate `(Q, P)` maps `X ↦ Q X P†` and replaces `𝒦` in the step where it is inserted.
//! Functionals are stored as matrices `F` with value `Tr(F X)`.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::correlators::check_norm;
use crate::error::{Error, Result};
use crate::linalg::{self, c, dag, trace_prod, CMat, C64, ZERO};
use crate::model::{Mode, Schedule, SourceModel};

/// Per-step controls `θ` (M × B) over Hermitian generators.
#[derive(Clone, Debug)]
pub struct ParamSchedule {
    pub generators: Vec<CMat>,
    pub theta: DMatrix<f64>,
    pub eps: f64,
}

impl ParamSchedule {
    pub fn new(generators: Vec<CMat>, theta: DMatrix<f64>, eps: f64) -> Result<Self> {
        if generators.len() != theta.ncols() {
            return Err(Error::Shape(format!("theta has {} columns for {} generators", theta.ncols(), generators.len())));
        }
        if let Some((j, _)) = generators.iter().enumerate().find(|(_, g)| !linalg::is_hermitian(g, 1e-12)) {
            return Err(Error::Validation(format!("generator {j} is not Hermitian")));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {eps}")));
        }
        Ok(Self { generators, theta, eps })
    }

    pub fn from_model(model: &SourceModel) -> Result<Self> {
        let p = model
            .schedule
            .params
            .as_ref()
            .ok_or_else(|| Error::Validation("model schedule is not parametrized".into()))?;
        Self::new(p.generators.clone(), p.theta.clone(), model.eps())
    }

    pub fn num_steps(&self) -> usize {
        self.theta.nrows()
    }

    pub fn num_generators(&self) -> usize {
        self.theta.ncols()
    }

    pub fn with_theta(&self, theta: DMatrix<f64>) -> Self {
        Self { theta, ..self.clone() }
    }

    /// The model driven by this schedule.
    pub fn apply_to(&self, model: &SourceModel) -> Result<SourceModel> {
        let horizon = self.eps * self.num_steps() as f64;
        model.with_schedule(Schedule::parametrized(self.generators.clone(), self.theta.clone(), horizon)?)
    }

    fn row(&self, p: usize) -> Vec<f64> {
        self.theta.row(p - 1).iter().cloned().collect()
    }
}

/// `U = exp(−iε Σ_j θ_j B_j)` and `∂U/∂θ_j` from the spectral (Daleckii–Krein) formula.
pub fn unitary_derivative(generators: &[CMat], theta_p: &[f64], eps: f64) -> (CMat, Vec<CMat>) {
    let d = generators.first().map(|g| g.nrows()).unwrap_or(0);
    let mut h = CMat::zeros(d, d);
    for (g, &t) in generators.iter().zip(theta_p) {
        h += g.scale(eps * t);
    }
    let (lam, v) = linalg::eigh(&h);
    let phase: Vec<C64> = lam.iter().map(|&l| c(l.cos(), -l.sin())).collect();
    let mut u = CMat::zeros(d, d);
    for a in 0..d {
        u += v.column(a) * v.column(a).adjoint() * phase[a];
    }
    let mut kernel = CMat::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let gap = lam[a] - lam[b];
            kernel[(a, b)] = if gap.abs() < 1e-8 {
                let mid = 0.5 * (lam[a] + lam[b]);
                c(0.0, -1.0) * c(mid.cos(), -mid.sin())
            } else {
                (phase[a] - phase[b]) / gap
            };
        }
    }
    let vd = v.adjoint();
    let du = generators
        .iter()
        .map(|g| {
            let e = &vd * g.scale(eps) * &v;
            &v * e.component_mul(&kernel) * &vd
        })
        .collect();
    (u, du)
}

/// `∂𝒰/∂θ_j` as a superoperator on column-stacked matrices.
pub fn unitary_super_derivative(u: &CMat, du: &CMat) -> CMat {
    linalg::sandwich(du, &dag(u)) + linalg::sandwich(u, &dag(du))
}

/// Real cost `f(γ)` with Wirtinger derivative `∂f/∂z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Cost {
    Real,
    AbsSquared,
    Constant(f64),
}

impl Cost {
    pub fn value(self, z: C64) -> f64 {
        match self {
            Cost::Real => z.re,
            Cost::AbsSquared => z.norm_sqr(),
            Cost::Constant(v) => v,
        }
    }

    pub fn wirtinger(self, z: C64) -> C64 {
        match self {
            Cost::Real => c(0.5, 0.0),
            Cost::AbsSquared => z.conj(),
            Cost::Constant(_) => ZERO,
        }
    }
}

/// Bin insertion `X ↦ Q X P†`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub q: CMat,
    pub p: CMat,
}

impl Gate {
    pub fn new(q: CMat, p: CMat) -> Self {
        Self { q, p }
    }

    fn apply(&self, x: &CMat) -> CMat {
        &self.q * x * dag(&self.p)
    }

    fn pull(&self, f: &CMat) -> CMat {
        dag(&self.p) * f * &self.q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GradMethod {
    Adjoint,
    FiniteDifference,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub gradient: DMatrix<f64>,
    pub objective: f64,
    pub wall_time: f64,
    pub method: GradMethod,
}

struct Engine {
    us: Vec<CMat>,
    dus: Vec<Vec<CMat>>,
    kraus: Vec<CMat>,
    rho: Vec<CMat>,
    proj: Vec<CMat>,
    norm_sq: f64,
    m: usize,
    b: usize,
}

impl Engine {
    fn new(model: &SourceModel, params: &ParamSchedule) -> Result<Self> {
        let m = params.num_steps();
        let eps = params.eps;
        let d = model.dim;
        if params.generators.iter().any(|g| g.nrows() != d) {
            return Err(Error::Shape(format!("generators must be {d}x{d}")));
        }
        let q = model.q_operator();
        let k0 = linalg::psd_sqrt(&(linalg::identity(d) - q * c(eps, 0.0)));
        let mut kraus = vec![k0];
        kraus.extend(model.jumps.iter().map(|j| &j.matrix * c(0.0, -eps.sqrt())));
        let (us, dus): (Vec<CMat>, Vec<Vec<CMat>>) =
            (1..=m).map(|p| unitary_derivative(&params.generators, &params.row(p), eps)).unzip();
        let mut e = Self { us, dus, kraus, rho: Vec::new(), proj: Vec::new(), norm_sq: 0.0, m, b: params.num_generators() };
        let mut rho = vec![linalg::ket_bra(&model.initial_state, &model.initial_state)];
        for p in 1..=m {
            let next = e.step(p, &rho[p - 1]);
            rho.push(next);
        }
        let mut proj = vec![CMat::zeros(d, d); m + 1];
        proj[m] = linalg::ket_bra(&model.final_state, &model.final_state);
        for p in (1..=m).rev() {
            proj[p - 1] = e.pull_step(p, &proj[p]);
        }
        e.norm_sq = trace_prod(&proj[m], &rho[m]).re;
        e.rho = rho;
        e.proj = proj;
        Ok(e)
    }

    fn dissipate(&self, x: &CMat) -> CMat {
        let mut y = CMat::zeros(x.nrows(), x.ncols());
        for k in &self.kraus {
            y += k * x * dag(k);
        }
        y
    }

    fn rotate(&self, p: usize, x: &CMat) -> CMat {
        let u = &self.us[p - 1];
        u * x * dag(u)
    }

    fn step(&self, p: usize, x: &CMat) -> CMat {
        self.rotate(p, &self.dissipate(x))
    }

    /// `F ∘ 𝒰_p`.
    fn pull_rotate(&self, p: usize, f: &CMat) -> CMat {
        let u = &self.us[p - 1];
        dag(u) * f * u
    }

    /// `F ∘ T_p`.
    fn pull_step(&self, p: usize, f: &CMat) -> CMat {
        let g = self.pull_rotate(p, f);
        let mut y = CMat::zeros(g.nrows(), g.ncols());
        for k in &self.kraus {
            y += dag(k) * &g * k;
        }
        y
    }

    /// Collects `Tr(F ∂𝒰_p(Y)) = Tr(dU·Y U†F) + Tr(dU†·F U Y)` into `(g1, g2)`.
    fn collect(&self, p: usize, f: &CMat, y: &CMat, acc: &mut (CMat, CMat)) {
        let u = &self.us[p - 1];
        acc.0 += y * dag(u) * f;
        acc.1 += f * u * y;
    }

    fn assemble(&self, p: usize, acc: &(CMat, CMat)) -> Vec<C64> {
        self.dus[p - 1].iter().map(|du| trace_prod(du, &acc.0) + trace_prod(&dag(du), &acc.1)).collect()
    }

    fn zero_acc(&self) -> (CMat, CMat) {
        let d = self.rho[0].nrows();
        (CMat::zeros(d, d), CMat::zeros(d, d))
    }

    /// `∂𝒩²/∂θ_p = Tr(P_p ∂𝒰_p 𝒦ρ_{p−1})`.
    fn norm_gradient(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.m, self.b);
        for p in 1..=self.m {
            let mut acc = self.zero_acc();
            self.collect(p, &self.proj[p], &self.dissipate(&self.rho[p - 1]), &mut acc);
            for (j, v) in self.assemble(p, &acc).into_iter().enumerate() {
                g[(p - 1, j)] = v.re;
            }
        }
        g
    }

    fn single_sum(&self, gate: &Gate, cost: Cost) -> (f64, DMatrix<f64>) {
        let m = self.m;
        let gammas: Vec<C64> = (1..=m).map(|k| trace_prod(&self.proj[k], &self.rotate(k, &gate.apply(&self.rho[k - 1])))).collect();
        let value = gammas.iter().map(|&z| cost.value(z)).sum();
        let w: Vec<C64> = gammas.iter().map(|&z| cost.wirtinger(z)).collect();
        let d = self.rho[0].nrows();
        let mut r = vec![CMat::zeros(d, d); m + 1];
        for k in 1..=m {
            r[k] = self.step(k, &r[k - 1]) + self.rotate(k, &gate.apply(&self.rho[k - 1])) * w[k - 1];
        }
        let mut grad = DMatrix::zeros(m, self.b);
        let mut l = CMat::zeros(d, d);
        for p in (1..=m).rev() {
            let mut acc = self.zero_acc();
            self.collect(p, &l, &self.dissipate(&self.rho[p - 1]), &mut acc);
            self.collect(p, &(&self.proj[p] * w[p - 1]), &gate.apply(&self.rho[p - 1]), &mut acc);
            self.collect(p, &self.proj[p], &self.dissipate(&r[p - 1]), &mut acc);
            for (j, v) in self.assemble(p, &acc).into_iter().enumerate() {
                grad[(p - 1, j)] = 2.0 * v.re;
            }
            l = self.pull_step(p, &l) + gate.pull(&self.pull_rotate(p, &self.proj[p])) * w[p - 1];
        }
        (value, grad)
    }

    /// `Σ_{n>m} f(γ_{n,m})` with `early` at bin `m` and `late` at bin `n`.
    fn double_sum(&self, late: &Gate, early: &Gate, cost: Cost) -> (f64, DMatrix<f64>) {
        let m = self.m;
        let d = self.rho[0].nrows();
        // σ[m][k − m] = T_k ⋯ T_{m+1} 𝒰_m 𝒢_early ρ_{m−1}.
        let mut sigma: Vec<Vec<CMat>> = Vec::with_capacity(m);
        for mm in 1..=m {
            let mut row = Vec::with_capacity(m - mm + 1);
            row.push(self.rotate(mm, &early.apply(&self.rho[mm - 1])));
            for k in mm + 1..m {
                let next = self.step(k, row.last().expect("nonempty"));
                row.push(next);
            }
            sigma.push(row);
        }
        let sig = |mm: usize, k: usize| &sigma[mm - 1][k - mm];
        // Readout functionals A_n = (P_n ∘ 𝒰_n ∘ 𝒢_late).
        let readout: Vec<CMat> = (1..=m).map(|n| late.pull(&self.pull_rotate(n, &self.proj[n]))).collect();
        let mut w: Vec<Vec<C64>> = vec![Vec::new(); m + 1];
        let mut value = 0.0;
        for n in 2..=m {
            w[n] = (1..n)
                .map(|mm| {
                    let z = trace_prod(&readout[n - 1], sig(mm, n - 1));
                    value += cost.value(z);
                    cost.wirtinger(z)
                })
                .collect();
        }
        // S_p = Σ_{m<p} w_pm σ_{m,p−1};  Z_p = T_p Z_{p−1} + 𝒰_p 𝒢_late S_p.
        let mut s = vec![CMat::zeros(d, d); m + 1];
        let mut z = vec![CMat::zeros(d, d); m + 1];
        for p in 1..=m {
            for mm in 1..p {
                s[p] += sig(mm, p - 1) * w[p][mm - 1];
            }
            z[p] = self.step(p, &z[p - 1]) + self.rotate(p, &late.apply(&s[p]));
        }
        let mut grad = DMatrix::zeros(m, self.b);
        let mut l = CMat::zeros(d, d);
        // cs[m − 1] = c_{p,m} for the current p and all m ≤ p.
        let mut cs: Vec<CMat> = vec![CMat::zeros(d, d); m];
        for p in (1..=m).rev() {
            let mut acc = self.zero_acc();
            let u = &self.us[p - 1];
            self.collect(p, &l, &self.dissipate(&self.rho[p - 1]), &mut acc);
            self.collect(p, &cs[p - 1], &early.apply(&self.rho[p - 1]), &mut acc);
            for mm in 1..p {
                let y = self.dissipate(sig(mm, p - 1));
                acc.0 += &y * dag(u) * &cs[mm - 1];
                acc.1 += &cs[mm - 1] * u * y;
            }
            self.collect(p, &self.proj[p], &late.apply(&s[p]), &mut acc);
            self.collect(p, &self.proj[p], &self.dissipate(&z[p - 1]), &mut acc);
            for (j, v) in self.assemble(p, &acc).into_iter().enumerate() {
                grad[(p - 1, j)] = 2.0 * v.re;
            }
            l = self.pull_step(p, &l) + early.pull(&self.pull_rotate(p, &cs[p - 1]));
            for mm in 1..p {
                cs[mm - 1] = self.pull_step(p, &cs[mm - 1]) + &readout[p - 1] * w[p][mm - 1];
            }
        }
        (value, grad)
    }
}

fn report(objective: f64, gradient: DMatrix<f64>, start: Instant) -> GradientReport {
    GradientReport { gradient, objective, wall_time: start.elapsed().as_secs_f64(), method: GradMethod::Adjoint }
}

/// Gradient of `Γ = Σ_m f(γ_m)`, `γ_m = Tr(P_f E_m^M 𝒢 E_0^{m−1} ρ_0)`.
pub fn grad_single_sum(model: &SourceModel, params: &ParamSchedule, gate: &Gate, cost: Cost) -> Result<GradientReport> {
    let start = Instant::now();
    let e = Engine::new(model, params)?;
    let (v, g) = e.single_sum(gate, cost);
    Ok(report(v, g, start))
}

/// Gradient of `Γ = Σ_{n>m} f(γ_{n,m})` with `early` at bin `m` and `late` at bin `n`.
pub fn grad_double_sum(
    model: &SourceModel,
    params: &ParamSchedule,
    late: &Gate,
    early: &Gate,
    cost: Cost,
) -> Result<GradientReport> {
    let start = Instant::now();
    let e = Engine::new(model, params)?;
    let (v, g) = e.double_sum(late, early, cost);
    Ok(report(v, g, start))
}

/// Gradient of the post-selection probability `𝒩²`.
pub fn grad_norm_sq(model: &SourceModel, params: &ParamSchedule) -> Result<GradientReport> {
    let start = Instant::now();
    let e = Engine::new(model, params)?;
    let g = e.norm_gradient();
    Ok(report(e.norm_sq, g, start))
}

/// Gates `(late, early)` of `C⁽ᵍ⁾` and `C⁽ᵡ⁾` for the port-A jump.
fn q2_gates(model: &SourceModel, eps: f64) -> ((Gate, Gate), (Gate, Gate)) {
    let d = model.dim;
    let k0 = linalg::psd_sqrt(&(linalg::identity(d) - model.q_operator() * c(eps, 0.0)));
    let ka = model.port_a() * c(0.0, -eps.sqrt());
    let g = (Gate::new(k0.clone(), ka.clone()), Gate::new(ka.clone(), k0.clone()));
    let x = (Gate::new(ka.clone(), k0.clone()), Gate::new(ka, k0));
    (g, x)
}

/// Gradient of `Q⁽²⁾ = (2/𝒩⁴) Σ_{n>m} (|C⁽ᵍ⁾_{n,m}|² − |C⁽ᵡ⁾_{n,m}|²)` by the quotient rule.
pub fn grad_q2(model: &SourceModel, params: &ParamSchedule) -> Result<GradientReport> {
    let start = Instant::now();
    if model.mode != Mode::IdenticalIndependentSources {
        return Err(Error::Validation("Q2 gradients take a single-port source".into()));
    }
    let e = Engine::new(model, params)?;
    let n2 = check_norm(e.norm_sq, model.norm_floor)?;
    let ((gl, ge), (xl, xe)) = q2_gates(model, params.eps);
    let (vg, dg) = e.double_sum(&gl, &ge, Cost::AbsSquared);
    let (vx, dx) = e.double_sum(&xl, &xe, Cost::AbsSquared);
    let dn = e.norm_gradient();
    let num = vg - vx;
    let q2 = 2.0 * num / (n2 * n2);
    let grad = (dg - dx) * (2.0 / (n2 * n2)) - dn * (4.0 * num / (n2 * n2 * n2));
    Ok(report(q2, grad, start))
}

/// Direct evaluation of `Σ_m f(γ_m)`, independent of the adjoint sweeps.
pub fn single_sum_value(model: &SourceModel, params: &ParamSchedule, gate: &Gate, cost: Cost) -> Result<f64> {
    let m = params.num_steps();
    let driven = params.apply_to(model)?;
    let props = crate::dynamics::StepPropagators::kraus(&driven)?;
    let ks = crate::dynamics::KrausSteps::new(&driven)?;
    let rho0 = driven.rho_initial();
    let pf = driven.projector_final();
    let mut total = 0.0;
    for k in 1..=m {
        let before = crate::dynamics::propagate(&rho0, 0, k - 1, &props)?;
        let u = ks.unitary(k);
        let x = u * gate.apply(&before) * dag(u);
        let after = crate::dynamics::propagate(&x, k, m, &props)?;
        total += cost.value(trace_prod(&pf, &after));
    }
    Ok(total)
}

/// Direct evaluation of `Σ_{n>m} f(γ_{n,m})`.
pub fn double_sum_value(model: &SourceModel, params: &ParamSchedule, late: &Gate, early: &Gate, cost: Cost) -> Result<f64> {
    let m = params.num_steps();
    let driven = params.apply_to(model)?;
    let props = crate::dynamics::StepPropagators::kraus(&driven)?;
    let ks = crate::dynamics::KrausSteps::new(&driven)?;
    let rho = crate::dynamics::forward_sweep(&driven.rho_initial(), &props);
    let proj = crate::dynamics::backward_sweep(&driven.projector_final(), &props);
    let mut total = 0.0;
    for mm in 1..=m {
        let u = ks.unitary(mm);
        let mut x = u * early.apply(&rho[mm - 1]) * dag(u);
        for n in mm + 1..=m {
            let un = ks.unitary(n);
            total += cost.value(trace_prod(&proj[n], &(un * late.apply(&x) * dag(un))));
            x = crate::dynamics::propagate(&x, n - 1, n, &props)?;
        }
    }
    Ok(total)
}

/// Central differences of `eval` over every entry of `θ`.
pub fn finite_difference(
    params: &ParamSchedule,
    h: f64,
    eval: impl Fn(&ParamSchedule) -> Result<f64> + Sync,
) -> Result<GradientReport> {
    use rayon::prelude::*;
    let start = Instant::now();
    let (m, b) = (params.num_steps(), params.num_generators());
    let objective = eval(params)?;
    let entries: Vec<f64> = (0..m * b)
        .into_par_iter()
        .map(|idx| {
            let (p, j) = (idx / b, idx % b);
            let mut plus = params.theta.clone();
            plus[(p, j)] += h;
            let mut minus = params.theta.clone();
            minus[(p, j)] -= h;
            Ok((eval(&params.with_theta(plus))? - eval(&params.with_theta(minus))?) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    let gradient = DMatrix::from_fn(m, b, |p, j| entries[p * b + j]);
    Ok(GradientReport { gradient, objective, wall_time: start.elapsed().as_secs_f64(), method: GradMethod::FiniteDifference })
}

/// `max|a − b| / max|b|`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax();
    let diff = (a - b).amax();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_hermitian, traceless_hermitian_basis};
    use crate::model::presets::params;
    use crate::model::{preset, random_model};
    use crate::mps;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, d: usize, m: usize, eps: f64, scale: f64) -> ParamSchedule {
        let gens = traceless_hermitian_basis(d);
        let theta = DMatrix::from_fn(m, gens.len(), |_, _| rng.random_range(-scale..scale));
        ParamSchedule::new(gens, theta, eps).unwrap()
    }

    #[test]
    fn derivative_at_identity_and_commuting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gens: Vec<CMat> = (0..3).map(|_| random_hermitian(&mut rng, 3)).collect();
        let (u, du) = unitary_derivative(&gens, &[0.0; 3], 0.3);
        assert!(linalg::max_abs(&(u - linalg::identity(3))) < 1e-15);
        for (g, d) in gens.iter().zip(&du) {
            assert!(linalg::max_abs(&(d - g * c(0.0, -0.3))) < 1e-14);
        }
        let diag: Vec<CMat> = (0..2)
            .map(|k| CMat::from_diagonal(&nalgebra::DVector::from_fn(3, |i, _| c((i + k) as f64, 0.0))))
            .collect();
        let (u, du) = unitary_derivative(&diag, &[0.7, -0.4], 0.5);
        for (g, d) in diag.iter().zip(&du) {
            assert!(linalg::max_abs(&(d - g * &u * c(0.0, -0.5))) < 1e-13);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gens: Vec<CMat> = (0..4).map(|_| random_hermitian(&mut rng, 4)).collect();
        let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (u, du) = unitary_derivative(&gens, &theta, 0.7);
        assert!(linalg::unitary_residual(&u) < 1e-10);
        let h = 1e-5;
        for j in 0..4 {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let fd = (unitary_derivative(&gens, &tp, 0.7).0 - unitary_derivative(&gens, &tm, 0.7).0) / c(2.0 * h, 0.0);
            assert!(linalg::max_abs(&(fd - &du[j])) < 1e-7);
        }
        // Degenerate spectrum takes the analytic limit.
        let (_, du) = unitary_derivative(&[linalg::identity(2), gens[0].view((0, 0), (2, 2)).into_owned()], &[1.0, 0.0], 1.0);
        assert!(du.iter().all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite())));
    }

    #[test]
    fn single_sum_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = preset("two_level", &params(&[("T", "2"), ("M", "12")])).unwrap();
        let ps = random_params(&mut rng, 2, 12, model.eps(), 1.0);
        let eps = ps.eps;
        let l = model.port_a() * c(0.0, -eps.sqrt());
        let gate = Gate::new(l.clone(), l);
        for cost in [Cost::Real, Cost::AbsSquared] {
            let adj = grad_single_sum(&model, &ps, &gate, cost).unwrap();
            let fd = finite_difference(&ps, 1e-5, |q| single_sum_value(&model, q, &gate, cost)).unwrap();
            assert!((adj.objective - fd.objective).abs() < 1e-12);
            assert!(relative_error(&adj.gradient, &fd.gradient) < 1e-6);
        }
        let flat = grad_single_sum(&model, &ps, &gate, Cost::Constant(3.0)).unwrap();
        assert_eq!(flat.gradient.amax(), 0.0);
    }

    #[test]
    fn double_sum_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 3, 1, 10, 2.0, Mode::SingleSourceBothPorts, 0.7).unwrap();
        let ps = random_params(&mut rng, 3, 10, model.eps(), 1.0);
        let g1 = Gate::new(linalg::random_matrix(&mut rng, 3, 3), linalg::random_matrix(&mut rng, 3, 3));
        let g2 = Gate::new(linalg::random_matrix(&mut rng, 3, 3), linalg::random_matrix(&mut rng, 3, 3));
        for cost in [Cost::Real, Cost::AbsSquared] {
            let adj = grad_double_sum(&model, &ps, &g1, &g2, cost).unwrap();
            let fd = finite_difference(&ps, 1e-5, |q| double_sum_value(&model, q, &g1, &g2, cost)).unwrap();
            assert!((adj.objective - fd.objective).abs() < 1e-10 * fd.objective.abs().max(1.0));
            assert!(relative_error(&adj.gradient, &fd.gradient) < 1e-6, "{}", relative_error(&adj.gradient, &fd.gradient));
        }
    }

    #[test]
    fn norm_gradient_matches_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, 2, 1, 8, 1.5, Mode::IdenticalIndependentSources, 0.8).unwrap();
        let ps = random_params(&mut rng, 2, 8, model.eps(), 1.0);
        let adj = grad_norm_sq(&model, &ps).unwrap();
        let fd = finite_difference(&ps, 1e-5, |q| {
            let m = q.apply_to(&model)?;
            crate::correlators::normalization(&m, &crate::dynamics::StepPropagators::kraus(&m)?)
        })
        .unwrap();
        assert!((adj.objective - fd.objective).abs() < 1e-12);
        assert!((adj.gradient - fd.gradient).amax() < 1e-8);
    }

    #[test]
    fn q2_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = preset("pi_level", &params(&[("T", "6"), ("M", "48")])).unwrap();
        let ps = random_params(&mut rng, 4, 48, model.eps(), 0.5);
        let adj = grad_q2(&model, &ps).unwrap();
        let fd = finite_difference(&ps, 1e-5, |q| {
            let m = q.apply_to(&model)?;
            Ok(mps::mps_qfi(&mps::build_mps(&m, m.eps())?)?.q2)
        })
        .unwrap();
        assert!((adj.objective - fd.objective).abs() < 1e-10);
        assert!(relative_error(&adj.gradient, &fd.gradient) < 1e-5);
    }

    #[test]
    fn vanishing_gradients() {
        // Undriven ground start: every γ is O(θ²) and the objective O(θ⁴).
        let model = preset("two_level", &params(&[("T", "2"), ("M", "10")])).unwrap();
        let ps = ParamSchedule::new(traceless_hermitian_basis(2), DMatrix::zeros(10, 3), model.eps()).unwrap();
        let l = model.port_a() * c(0.0, -model.eps().sqrt());
        let k0 = linalg::psd_sqrt(&(linalg::identity(2) - model.q_operator() * c(model.eps(), 0.0)));
        let g = grad_single_sum(&model, &ps, &Gate::new(l.clone(), k0.clone()), Cost::AbsSquared).unwrap();
        assert!(g.gradient.amax() < 1e-15);
        let g = grad_double_sum(&model, &ps, &Gate::new(k0.clone(), l.clone()), &Gate::new(l, k0), Cost::AbsSquared).unwrap();
        assert!(g.gradient.amax() < 1e-15);
        let q = grad_q2(&model, &ps).unwrap();
        assert_eq!(q.objective, 0.0);
        assert!(q.gradient.amax() < 1e-15);
    }

    #[test]
    fn global_drive_phase_is_flat() {
        // Drives of both transitions share one phase; rotating it is a symmetry of Q⁽²⁾.
        let model = preset("pi_level", &params(&[("T", "4"), ("M", "32")])).unwrap();
        let s1 = linalg::unit(4, 0, 1);
        let s2 = linalg::unit(4, 2, 3);
        let x = &s1 + dag(&s1) + &s2 + dag(&s2);
        let y = (&s1 - dag(&s1) + &s2 - dag(&s2)) * c(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = DMatrix::from_fn(32, 2, |_, _| rng.random_range(-1.0..1.0));
        let ps = ParamSchedule::new(vec![x, y], theta.clone(), model.eps()).unwrap();
        let g = grad_q2(&model, &ps).unwrap();
        assert!(g.gradient.amax() > 1e-3);
        let along: f64 = (0..32).map(|p| -theta[(p, 1)] * g.gradient[(p, 0)] + theta[(p, 0)] * g.gradient[(p, 1)]).sum();
        assert!(along.abs() < 1e-8, "{along}");
    }
}

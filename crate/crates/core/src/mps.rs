//! Time-bin matrix product states of the emitted field.
//!
//! Bin `k` applies `K_α` (the source emits `α ∈ {vac, jump_1, …}` into the bin) followed by the
//! step unitary `U_k`. Transfer maps follow the same order: `T_k = 𝒰_k ∘ 𝒦`.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::correlators::{self, check_norm, sweep_triangle, RealPropagator, Triangle};
use crate::dynamics::{self, KrausSteps, StepPropagators};
use crate::error::{Error, Result};
use crate::linalg::{self, c, dag, identity, sandwich, trace_prod, vec_of, CMat, CVec, C64, ZERO};
use crate::model::{Channel, Mode, SourceModel};
use crate::oracle::MAX_AMPLITUDES;
use crate::qfi::QfiReport;

/// Largest `ε‖Q‖` accepted by [`build_mps`].
pub const MAX_EPS_Q: f64 = 0.5;
const RANK_TOL: f64 = 1e-13;

#[derive(Clone, Debug)]
pub struct TimeBinMps {
    pub num_bins: usize,
    pub dim: usize,
    pub eps: f64,
    pub kraus: KrausSteps,
    pub initial_state: CVec,
    pub final_state: CVec,
    pub mode: Mode,
    pub norm_floor: f64,
    pub upper_bound: bool,
    maps: Vec<CMat>,
}

pub fn build_mps(model: &SourceModel, eps: f64) -> Result<TimeBinMps> {
    let t = model.horizon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("bin width must be positive, got {eps}")));
    }
    let m = (t / eps).round().max(1.0) as usize;
    if (m as f64 * eps - t).abs() > 1e-9 * t {
        return Err(Error::InvalidArgument(format!("bin width {eps} does not divide the horizon {t}")));
    }
    let model = if m == model.num_steps() { model.clone() } else { model.with_steps(m)? };
    let qmax = linalg::eigh(&model.q_operator()).0.iter().cloned().fold(0.0, f64::max);
    if eps * qmax >= MAX_EPS_Q {
        return Err(Error::InvalidArgument(format!(
            "bin width too large: ε‖Q‖ = {:.3} must stay below {MAX_EPS_Q}",
            eps * qmax
        )));
    }
    let kraus = KrausSteps::new(&model)?;
    let maps = kraus.unitaries.iter().map(|u| kraus.step_super(u)).collect();
    Ok(TimeBinMps {
        num_bins: m,
        dim: model.dim,
        eps: model.eps(),
        kraus,
        initial_state: model.initial_state.clone(),
        final_state: model.final_state.clone(),
        mode: model.mode,
        norm_floor: model.norm_floor,
        upper_bound: model.has_loss(),
        maps,
    })
}

impl TimeBinMps {
    /// `1 + (number of jump channels)`.
    pub fn local_dim(&self) -> usize {
        1 + self.kraus.kj.len()
    }

    pub fn kraus_op(&self, alpha: usize) -> &CMat {
        if alpha == 0 {
            &self.kraus.k0
        } else {
            &self.kraus.kj[alpha - 1]
        }
    }

    /// Site matrix `U_k K_α` for bin `k` (1-based).
    pub fn site(&self, k: usize, alpha: usize) -> CMat {
        self.kraus.unitary(k) * self.kraus_op(alpha)
    }

    /// `‖Σ_α K_α†K_α − I‖_max`.
    pub fn isometry_residual(&self) -> f64 {
        let mut s = -identity(self.dim);
        for a in 0..self.local_dim() {
            let k = self.kraus_op(a);
            s += k.adjoint() * k;
        }
        linalg::max_abs(&s)
    }

    pub fn propagators(&self) -> StepPropagators {
        StepPropagators { dim: self.dim, eps: self.eps, maps: self.maps.clone(), index: self.kraus.index.clone() }
    }

    /// `𝒰_k`, with `𝒰_0 = id`.
    pub fn unitary_super(&self, k: usize) -> CMat {
        if k == 0 {
            identity(self.dim * self.dim)
        } else {
            let u = self.kraus.unitary(k);
            sandwich(u, &dag(u))
        }
    }

    /// Bin contraction with local operator `o`: `X ↦ Σ_{αβ} o_{βα} K_α X K_β†`.
    pub fn gate(&self, o: &CMat) -> CMat {
        let n = self.local_dim();
        let mut s = CMat::zeros(self.dim * self.dim, self.dim * self.dim);
        for a in 0..n {
            for b in 0..n {
                let w = o[(b, a)];
                if w != ZERO {
                    s += sandwich(self.kraus_op(a), &dag(self.kraus_op(b))) * w;
                }
            }
        }
        s
    }

    /// `𝒰_k(Σ_{αβ} o_{βα} K_α X K_β†)`.
    pub fn insert(&self, k: usize, o: &CMat, x: &CMat) -> CMat {
        let n = self.local_dim();
        let mut y = CMat::zeros(self.dim, self.dim);
        for a in 0..n {
            let kx = self.kraus_op(a) * x;
            for b in 0..n {
                let w = o[(b, a)];
                if w != ZERO {
                    y += &kx * dag(self.kraus_op(b)) * w;
                }
            }
        }
        let u = self.kraus.unitary(k);
        u * y * dag(u)
    }

    pub fn channel_index(&self, ch: Channel) -> Option<usize> {
        self.kraus.channels.iter().position(|&c| c == ch)
    }

    /// Local `|vac⟩⟨ch|`.
    pub fn lowering(&self, ch: Channel) -> Result<CMat> {
        let j = self.channel_index(ch).ok_or_else(|| Error::Validation(format!("no {ch:?} channel")))?;
        let mut a = CMat::zeros(self.local_dim(), self.local_dim());
        a[(0, j + 1)] = c(1.0, 0.0);
        Ok(a)
    }

    fn states(&self) -> Vec<CMat> {
        let rho = linalg::ket_bra(&self.initial_state, &self.initial_state);
        dynamics::forward_sweep(&rho, &self.propagators())
    }

    fn projectors(&self) -> Vec<CMat> {
        let p = linalg::ket_bra(&self.final_state, &self.final_state);
        dynamics::backward_sweep(&p, &self.propagators())
    }

    /// Squared norm of the full (unprojected) source ⊗ field state.
    pub fn unprojected_norm_sq(&self) -> f64 {
        linalg::trace(&self.states()[self.num_bins]).re
    }

    /// Post-selection probability `𝒩²` of one source.
    pub fn norm_sq(&self) -> f64 {
        let rho = linalg::ket_bra(&self.initial_state, &self.initial_state);
        trace_prod(&self.projectors()[0], &rho).re
    }

    /// Expected photon number in channel `ch` without post-selection.
    pub fn photon_number(&self, ch: Channel) -> Result<f64> {
        let j = self.channel_index(ch).ok_or_else(|| Error::Validation(format!("no {ch:?} channel")))?;
        let k = &self.kraus.kj[j];
        Ok(self.states()[..self.num_bins].iter().map(|r| linalg::trace(&(k * r * dag(k))).re).sum())
    }
}

/// Bin correlators of one port, normalized by `𝒩²`: `g(n,m) = ⟨A_n†A_m⟩`, `χ(n,m) = ⟨A_nA_m⟩`
/// for `n > m`, and the unnormalized bin populations.
#[derive(Clone, Debug)]
pub struct BinnedCorrelators {
    pub bins: usize,
    g: Triangle,
    chi: Triangle,
    pub flux: Vec<f64>,
    pub norm_sq: f64,
}

impl BinnedCorrelators {
    fn empty(bins: usize, norm_sq: f64) -> Self {
        let n = bins.saturating_sub(1);
        Self { bins, g: Triangle::zeros(n), chi: Triangle::zeros(n), flux: vec![0.0; bins], norm_sq }
    }

    /// Bins are 1-based with `n > m`.
    pub fn g(&self, n: usize, m: usize) -> C64 {
        self.g.get(n - 2, m - 1)
    }

    pub fn chi(&self, n: usize, m: usize) -> C64 {
        self.chi.get(n - 2, m - 1)
    }

    /// `Σ_{n>m}(|g|² − |χ|²)`.
    pub fn contrast(&self) -> f64 {
        self.g.data.iter().zip(&self.chi.data).map(|(g, x)| g.norm_sqr() - x.norm_sqr()).sum()
    }
}

/// Streams all bin pairs through one propagation sweep.
pub fn binned_correlators(mps: &TimeBinMps, ch: Channel) -> Result<BinnedCorrelators> {
    let m = mps.num_bins;
    let a = mps.channel_index(ch).ok_or_else(|| Error::Validation(format!("no {ch:?} channel")))?;
    let ka = &mps.kraus.kj[a];
    let k0 = &mps.kraus.k0;
    let rho = mps.states();
    let proj = mps.projectors();
    let norm_sq = check_norm(trace_prod(&proj[0], &rho[0]).re, mps.norm_floor)?;
    let mut out = BinnedCorrelators::empty(m, norm_sq);
    for bin in 1..=m {
        let u = mps.kraus.unitary(bin);
        out.flux[bin - 1] = trace_prod(&proj[bin], &(u * ka * &rho[bin - 1] * dag(ka) * dag(u))).re;
    }
    if m < 2 {
        return Ok(out);
    }
    let inserts: Vec<CMat> = (1..m)
        .map(|bin| {
            let u = mps.kraus.unitary(bin);
            u * ka * &rho[bin - 1] * dag(k0) * dag(u)
        })
        .collect();
    let dressed = |bin: usize| {
        let u = mps.kraus.unitary(bin);
        dag(u) * &proj[bin] * u
    };
    let g_read: Vec<CMat> = (2..=m).map(|n| dag(ka) * dressed(n) * k0).collect();
    let x_read: Vec<CMat> = (2..=m).map(|n| dag(k0) * dressed(n) * ka).collect();
    let shifted = StepPropagators {
        dim: mps.dim,
        eps: mps.eps,
        maps: mps.maps.clone(),
        index: mps.kraus.index[1..m - 1].to_vec(),
    };
    let rp = RealPropagator::new(&shifted);
    let inv = 1.0 / norm_sq;
    sweep_triangle(&rp, &inserts, &[g_read, x_read], |k, rows| {
        for (dst, src) in out.g.row_mut(k).iter_mut().zip(&rows[0]) {
            *dst = src * inv;
        }
        for (dst, src) in out.chi.row_mut(k).iter_mut().zip(&rows[1]) {
            *dst = src * inv;
        }
    });
    Ok(out)
}

/// Discrete identical-source QFI `(16/𝒩⁴)Σ_{n>m}(|g|² − |χ|²) + (8/𝒩²)Σ n_m`.
pub fn mps_qfi(mps: &TimeBinMps) -> Result<QfiReport> {
    if mps.mode != Mode::IdenticalIndependentSources {
        return Err(Error::Validation("mps_qfi takes a single-port source".into()));
    }
    let corr = binned_correlators(mps, Channel::PortA)?;
    let q2 = 2.0 * corr.contrast();
    let flux_integral: f64 = corr.flux.iter().sum();
    Ok(QfiReport {
        qfi: 8.0 * (q2 + flux_integral / corr.norm_sq),
        q2,
        flux_integral,
        coherence_term: 0.0,
        norm_sq: corr.norm_sq,
        grid: mps.num_bins,
        mode: mps.mode,
        upper_bound: mps.upper_bound,
    })
}

/// Exact QFI `4(⟨H_d²⟩ − ⟨H_d⟩²)` of the binned field with bosonic bin modes.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BinnedQfi {
    pub qfi: f64,
    pub mean: f64,
    pub second_moment: f64,
    /// Post-selection probability of the whole emitted state.
    pub norm_sq: f64,
    /// The [`mps_qfi`] value, which drops the same-bin term `8Σ(n_m/𝒩²)²`.
    pub approximation: Option<f64>,
    /// Same sums with `|χ|² − |g|²` in place of `|g|² − |χ|²`.
    pub flipped_sign: Option<f64>,
}

pub fn binned_qfi(mps: &TimeBinMps) -> Result<BinnedQfi> {
    match mps.mode {
        Mode::IdenticalIndependentSources => {
            let corr = binned_correlators(mps, Channel::PortA)?;
            let q2 = 2.0 * corr.contrast();
            let n: f64 = corr.flux.iter().sum::<f64>() / corr.norm_sq;
            let n2: f64 = corr.flux.iter().map(|f| (f / corr.norm_sq).powi(2)).sum();
            let qfi = 8.0 * (q2 + n) + 8.0 * n2;
            Ok(BinnedQfi {
                qfi,
                mean: 0.0,
                second_moment: qfi / 4.0,
                norm_sq: corr.norm_sq * corr.norm_sq,
                approximation: Some(8.0 * (q2 + n)),
                flipped_sign: Some(8.0 * (n - q2) + 8.0 * n2),
            })
        }
        Mode::SingleSourceBothPorts => joint_binned_qfi(mps),
    }
}

/// Two-layer recursion `v_k = T_k v_{k−1} + ℋ_k ρ_{k−1}` collecting `Σ_{n>m}⟨h_n h_m⟩`.
fn joint_binned_qfi(mps: &TimeBinMps) -> Result<BinnedQfi> {
    let a = mps.lowering(Channel::PortA)?;
    let b = mps.lowering(Channel::PortB)?;
    let h = (a.adjoint() * &b - b.adjoint() * &a) * c(0.0, 1.0);
    let h2 = &h * &h;
    let rho = mps.states();
    let proj = mps.projectors();
    let props = mps.propagators();
    let norm_sq = check_norm(trace_prod(&proj[0], &rho[0]).re, mps.norm_floor)?;
    let d = mps.dim;
    let mut v = CMat::zeros(d, d);
    let (mut mean, mut diag, mut cross) = (0.0, 0.0, ZERO);
    for k in 1..=mps.num_bins {
        let hr = mps.insert(k, &h, &rho[k - 1]);
        mean += trace_prod(&proj[k], &hr).re;
        diag += trace_prod(&proj[k], &mps.insert(k, &h2, &rho[k - 1])).re;
        cross += trace_prod(&proj[k], &mps.insert(k, &h, &v));
        v = linalg::apply_super(props.step(k), &v) + hr;
    }
    let mean = mean / norm_sq;
    let second_moment = (diag + 2.0 * cross.re) / norm_sq;
    Ok(BinnedQfi {
        qfi: 4.0 * (second_moment - mean * mean),
        mean,
        second_moment,
        norm_sq,
        approximation: None,
        flipped_sign: None,
    })
}

/// Transfer maps `E_m^n = T_n ⋯ T_{m+1} 𝒰_m` for all `0 ≤ m ≤ n ≤ M`.
///
/// `R_m^n = 𝒦E_m^n` and `L_m^n = E_m^n𝒦 = T_n ⋯ T_m`; all three are the identity for `n < m`.
pub struct EnvironmentCache {
    pub num_bins: usize,
    dim2: usize,
    e: Vec<Vec<CMat>>,
    dissipative: CMat,
    unitaries: Vec<CMat>,
}

impl EnvironmentCache {
    pub const MAX_BYTES: f64 = 1.0e9;

    pub fn new(mps: &TimeBinMps) -> Result<Self> {
        let m = mps.num_bins;
        let dim2 = mps.dim * mps.dim;
        let bytes = ((m + 1) * (m + 2) / 2) as f64 * (dim2 * dim2) as f64 * 16.0;
        if bytes > Self::MAX_BYTES {
            return Err(Error::MemoryGuard(format!("environment cache needs {bytes:.3e} bytes")));
        }
        let props = mps.propagators();
        let unitaries: Vec<CMat> = (0..=m).map(|k| mps.unitary_super(k)).collect();
        let e = (0..=m)
            .map(|start| {
                let mut row = Vec::with_capacity(m + 1 - start);
                row.push(unitaries[start].clone());
                for n in start + 1..=m {
                    let next = props.step(n) * row.last().expect("nonempty");
                    row.push(next);
                }
                row
            })
            .collect();
        Ok(Self { num_bins: m, dim2, e, dissipative: mps.kraus.dissipative_super(), unitaries })
    }

    pub fn e(&self, m: usize, n: usize) -> CMat {
        if n < m {
            identity(self.dim2)
        } else {
            self.e[m][n - m].clone()
        }
    }

    pub fn r(&self, m: usize, n: usize) -> CMat {
        if n < m {
            identity(self.dim2)
        } else {
            &self.dissipative * &self.e[m][n - m]
        }
    }

    pub fn l(&self, m: usize, n: usize) -> CMat {
        if n < m {
            identity(self.dim2)
        } else {
            &self.e[m][n - m] * &self.dissipative
        }
    }

    /// `‖E_m^n − L_{p+1}^n 𝒰_p R_m^{p−1}‖_max` for `m ≤ p ≤ n`.
    pub fn split_residual(&self, m: usize, p: usize, n: usize) -> f64 {
        assert!(m <= p && p <= n && n <= self.num_bins);
        let r = if p == 0 { identity(self.dim2) } else { self.r(m, p - 1) };
        linalg::max_abs(&(self.e(m, n) - self.l(p + 1, n) * &self.unitaries[p] * r))
    }
}

/// Bin correlators from explicit transfer maps, parallel over the later bin.
pub fn cached_correlators(mps: &TimeBinMps, cache: &EnvironmentCache, ch: Channel) -> Result<BinnedCorrelators> {
    let m = mps.num_bins;
    let a = mps.channel_index(ch).ok_or_else(|| Error::Validation(format!("no {ch:?} channel")))?;
    let ka = &mps.kraus.kj[a];
    let k0 = &mps.kraus.k0;
    let early = sandwich(ka, &dag(k0));
    let late_g = sandwich(k0, &dag(ka));
    let count = sandwich(ka, &dag(ka));
    let rho0 = vec_of(&linalg::ket_bra(&mps.initial_state, &mps.initial_state));
    let pf = vec_of(&linalg::ket_bra(&mps.final_state, &mps.final_state));
    let before: Vec<CVec> = (1..=m).map(|k| cache.e(0, k - 1) * &rho0).collect();
    let after: Vec<CVec> = (1..=m).map(|k| cache.e(k, m).adjoint() * &pf).collect();
    let norm_sq = check_norm(pf.dotc(&(cache.e(0, m) * &rho0)).re, mps.norm_floor)?;
    let mut out = BinnedCorrelators::empty(m, norm_sq);
    for k in 1..=m {
        out.flux[k - 1] = after[k - 1].dotc(&(&count * &before[k - 1])).re;
    }
    let inserted: Vec<CVec> = before.iter().map(|r| &early * r).collect();
    let rows: Vec<(Vec<C64>, Vec<C64>)> = (2..=m)
        .into_par_iter()
        .map(|n| {
            let fg = late_g.adjoint() * &after[n - 1];
            let fx = early.adjoint() * &after[n - 1];
            (1..n)
                .map(|mm| {
                    let y = cache.e(mm, n - 1) * &inserted[mm - 1];
                    (fg.dotc(&y) / norm_sq, fx.dotc(&y) / norm_sq)
                })
                .unzip()
        })
        .collect();
    for (k, (g, x)) in rows.into_iter().enumerate() {
        out.g.row_mut(k).copy_from_slice(&g);
        out.chi.row_mut(k).copy_from_slice(&x);
    }
    Ok(out)
}

/// `(1 + 1/(𝒩² − η₀Tε))·η₀Tε/𝒩²`, infinite once `ε ≥ 𝒩²/(η₀T)`.
pub fn error_bound(norm_sq: f64, eta0: f64, horizon: f64, eps: f64) -> f64 {
    let x = eta0 * horizon * eps;
    if x >= norm_sq {
        return f64::INFINITY;
    }
    (1.0 + 1.0 / (norm_sq - x)) * x / norm_sq
}

/// `η₀ = 2ℓ(J + 2ℓ)` with `J = max‖H_k‖` and `ℓ = Σ‖L_j‖²`.
pub fn eta0(model: &SourceModel) -> f64 {
    let j = model.schedule.max_norm();
    let l: f64 = model.jumps.iter().map(|jp| linalg::op_norm(&jp.matrix).powi(2)).sum();
    2.0 * l * (j + 2.0 * l)
}

/// Bound on the trace distance between the binned and exact post-selected field states.
pub fn error_estimate(model: &SourceModel, eps: f64) -> f64 {
    let norm_sq = StepPropagators::from_model(model).and_then(|p| correlators::normalization(model, &p));
    match norm_sq {
        Ok(n) => error_bound(n, eta0(model), model.horizon, eps),
        Err(_) => f64::INFINITY,
    }
}

/// Ancilla–bin unitaries `W_1, …, W_M` generating the normalized post-selected field from
/// `|0⟩_anc ⊗ |vac⟩`; the reversed adjoints absorb it back.
///
/// `W_k` acts on `(ancilla a, bin α)` with index `a·(d+1) + α`.
#[derive(Clone, Debug, Serialize)]
pub struct ReabsorptionCircuit {
    pub ancilla_dim: usize,
    pub local_dim: usize,
    #[serde(skip)]
    pub unitaries: Vec<CMat>,
    /// Bond dimension entering each bin.
    pub bond_dims: Vec<usize>,
    /// Columns of each `W_k` filled by the orthonormal completion.
    pub completed_columns: Vec<usize>,
    pub norm_sq: f64,
}

/// Orthonormal completion: the missing columns take, one at a time, the standard basis
/// vector with the largest residual (lowest index on ties).
fn complete_unitary(n: usize, fixed: &[(usize, CVec)]) -> CMat {
    let mut w = CMat::zeros(n, n);
    let mut basis: Vec<CVec> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for (col, v) in fixed {
        w.set_column(*col, v);
        used[*col] = true;
        basis.push(v.clone());
    }
    let residual = |basis: &[CVec], j: usize| {
        let mut r = CVec::zeros(n);
        r[j] = c(1.0, 0.0);
        for b in basis {
            let p = b[j].conj();
            r -= b * p;
        }
        r
    };
    for col in 0..n {
        if used[col] {
            continue;
        }
        let mut best: Option<(f64, CVec)> = None;
        for j in 0..n {
            let r = residual(&basis, j);
            let norm = r.norm();
            if best.as_ref().is_none_or(|(b, _)| norm > b + 1e-12) {
                best = Some((norm, r));
            }
        }
        let (norm, mut r) = best.expect("n > 0");
        // One re-orthogonalization pass keeps the completion unitary to round-off.
        for b in &basis {
            let p = b.dotc(&r);
            r -= b * p;
        }
        let norm = r.norm().max(norm * 1e-300);
        let v = r.unscale(norm);
        w.set_column(col, &v);
        basis.push(v);
    }
    w
}

fn rank(s: &nalgebra::DVector<f64>) -> usize {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    s.iter().filter(|&&x| x > RANK_TOL * smax && x > 0.0).count()
}

pub fn reabsorption_circuit(mps: &TimeBinMps) -> Result<ReabsorptionCircuit> {
    let m = mps.num_bins;
    let nl = mps.local_dim();
    let d = mps.dim;
    let phi_i = CMat::from_column_slice(d, 1, mps.initial_state.as_slice());
    let phi_f = CMat::from_column_slice(d, 1, mps.final_state.as_slice()).adjoint();
    // Site tensors c[k][α] (bond out × bond in), boundaries folded in.
    let mut sites: Vec<Vec<CMat>> = (1..=m)
        .map(|k| {
            (0..nl)
                .map(|a| {
                    let mut s = mps.site(k, a);
                    if k == 1 {
                        s = s * &phi_i;
                    }
                    if k == m {
                        s = &phi_f * s;
                    }
                    s
                })
                .collect()
        })
        .collect();
    // Restrict bonds to the subspace reachable from φ_i.
    for k in 0..m.saturating_sub(1) {
        let (out, inn) = (sites[k][0].nrows(), sites[k][0].ncols());
        let mut z = CMat::zeros(out, nl * inn);
        for a in 0..nl {
            z.columns_mut(a * inn, inn).copy_from(&sites[k][a]);
        }
        let svd = z.svd(true, false);
        let r = rank(&svd.singular_values).max(1);
        let u = svd.u.expect("requested").columns(0, r).into_owned();
        let ud = u.adjoint();
        for a in 0..nl {
            sites[k][a] = &ud * &sites[k][a];
            sites[k + 1][a] = &sites[k + 1][a] * &u;
        }
    }
    let mut isometries: Vec<CMat> = vec![CMat::zeros(0, 0); m];
    let mut bond_dims = vec![0; m];
    let mut norm_sq = 0.0;
    for k in (0..m).rev() {
        let (out, inn) = (sites[k][0].nrows(), sites[k][0].ncols());
        let mut y = CMat::zeros(out * nl, inn);
        for a in 0..nl {
            for b in 0..out {
                for i in 0..inn {
                    y[(b * nl + a, i)] = sites[k][a][(b, i)];
                }
            }
        }
        let svd = y.svd(true, true);
        let r = rank(&svd.singular_values).max(1);
        let mut q = svd.u.expect("requested").columns(0, r).into_owned();
        let vt = svd.v_t.expect("requested").rows(0, r).into_owned();
        let s = CMat::from_diagonal(&svd.singular_values.rows(0, r).map(|x| c(x, 0.0)));
        let rm = s * vt;
        if k > 0 {
            for a in 0..nl {
                sites[k - 1][a] = &rm * &sites[k - 1][a];
            }
        } else {
            let z = rm[(0, 0)];
            norm_sq = z.norm_sqr();
            if norm_sq < mps.norm_floor {
                return Err(Error::PostselectionTooUnlikely { norm_sq, floor: mps.norm_floor });
            }
            q *= z / z.norm();
        }
        bond_dims[k] = r;
        isometries[k] = q;
    }
    let n = d * nl;
    let mut unitaries = Vec::with_capacity(m);
    let mut completed = Vec::with_capacity(m);
    for q in &isometries {
        let fixed: Vec<(usize, CVec)> = (0..q.ncols())
            .map(|a| {
                let mut v = CVec::zeros(n);
                for row in 0..q.nrows() {
                    v[row] = q[(row, a)];
                }
                (a * nl, v)
            })
            .collect();
        completed.push(n - fixed.len());
        unitaries.push(complete_unitary(n, &fixed));
    }
    Ok(ReabsorptionCircuit { ancilla_dim: d, local_dim: nl, unitaries, bond_dims, completed_columns: completed, norm_sq })
}

impl ReabsorptionCircuit {
    pub fn num_bins(&self) -> usize {
        self.unitaries.len()
    }

    fn check_size(&self) -> Result<usize> {
        let total = (self.local_dim as f64).powi(self.num_bins() as i32) * self.ancilla_dim as f64;
        if total > MAX_AMPLITUDES as f64 {
            return Err(Error::MemoryGuard(format!("{total:.3e} amplitudes exceed the state-vector limit")));
        }
        Ok(self.local_dim.pow(self.num_bins() as u32))
    }

    /// Applies `w` on (ancilla, bin `bin`) of a vector indexed `field·D + a`.
    fn apply(&self, w: &CMat, bin: usize, state: &mut CVec) {
        let (nl, da) = (self.local_dim, self.ancilla_dim);
        let stride = nl.pow(bin as u32);
        let fields = state.len() / da;
        let mut x = CVec::zeros(da * nl);
        for f in 0..fields {
            if (f / stride) % nl != 0 {
                continue;
            }
            for a in 0..da {
                for l in 0..nl {
                    x[a * nl + l] = state[(f + l * stride) * da + a];
                }
            }
            let y = w * &x;
            for a in 0..da {
                for l in 0..nl {
                    state[(f + l * stride) * da + a] = y[a * nl + l];
                }
            }
        }
    }

    /// Field amplitudes produced from `|0⟩_anc ⊗ |vac⟩`, with the ancilla projected on `|0⟩`.
    pub fn generate(&self) -> Result<CVec> {
        let fields = self.check_size()?;
        let mut state = CVec::zeros(fields * self.ancilla_dim);
        state[0] = c(1.0, 0.0);
        for (k, w) in self.unitaries.iter().enumerate() {
            self.apply(w, k, &mut state);
        }
        Ok(CVec::from_fn(fields, |f, _| state[f * self.ancilla_dim]))
    }

    /// Fidelity of `W_1† ⋯ W_M† (|0⟩_anc ⊗ field)` with `|0⟩_anc ⊗ |vac⟩`.
    pub fn reabsorb(&self, field: &CVec) -> Result<f64> {
        let fields = self.check_size()?;
        if field.len() != fields {
            return Err(Error::Shape(format!("field has {} amplitudes, expected {fields}", field.len())));
        }
        let mut state = CVec::zeros(fields * self.ancilla_dim);
        for f in 0..fields {
            state[f * self.ancilla_dim] = field[f];
        }
        for (k, w) in self.unitaries.iter().enumerate().rev() {
            self.apply(&w.adjoint(), k, &mut state);
        }
        Ok(state[0].norm_sqr() / field.norm_squared())
    }

    /// Largest `‖W_k†W_k − I‖_max`.
    pub fn unitarity_residual(&self) -> f64 {
        self.unitaries.iter().map(linalg::unitary_residual).fold(0.0, f64::max)
    }

    /// Circuit as JSON with row-major `[re, im]` matrices tagged by bin.
    pub fn to_json(&self) -> serde_json::Value {
        let gates: Vec<_> = self
            .unitaries
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let rows: Vec<Vec<[f64; 2]>> =
                    (0..w.nrows()).map(|i| (0..w.ncols()).map(|j| [w[(i, j)].re, w[(i, j)].im]).collect()).collect();
                json!({ "bin": k + 1, "unitary": rows })
            })
            .collect();
        json!({
            "ancilla_dim": self.ancilla_dim,
            "local_dim": self.local_dim,
            "bond_dims": self.bond_dims,
            "completed_columns": self.completed_columns,
            "norm_sq": self.norm_sq,
            "gates": gates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets::params;
    use crate::model::{preset, random_model};
    use crate::oracle::{self, oracle_qfi};
    use crate::qfi;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_level(kv: &[(&str, &str)]) -> SourceModel {
        preset("two_level", &params(kv)).unwrap()
    }

    #[test]
    fn construction_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 2..=4 {
            let m = random_model(&mut rng, d, 2, 5, 1.0, Mode::SingleSourceBothPorts, 0.7).unwrap();
            let mps = build_mps(&m, 0.1).unwrap();
            assert!(mps.isometry_residual() < 1e-10);
            assert!((mps.unprojected_norm_sq() - 1.0).abs() < 1e-9);
        }
        let m = two_level(&[("gamma", "10"), ("T", "1")]);
        assert!(build_mps(&m, 0.05).is_err());
        assert!(build_mps(&m, 0.03).is_err());
        assert!(build_mps(&m, 0.01).is_ok());
    }

    #[test]
    fn decay_photon_number() {
        let m = two_level(&[("omega", "0"), ("init", "e"), ("T", "10")]);
        let mps = build_mps(&m, 0.01).unwrap();
        let n = mps.photon_number(Channel::PortA).unwrap();
        assert!((n - (1.0 - (-10.0f64).exp())).abs() < 1e-3);
        assert!((n - (1.0 - 0.99f64.powi(1000))).abs() < 1e-12);
    }

    #[test]
    fn vacuum() {
        let m = two_level(&[("omega", "0"), ("T", "2")]);
        let mps = build_mps(&m, 0.1).unwrap();
        assert_eq!(mps_qfi(&mps).unwrap().qfi, 0.0);
        let circ = reabsorption_circuit(&mps).unwrap();
        for w in &circ.unitaries {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    let x = w[(i, j)].norm();
                    assert!(if i == j { (x - 1.0).abs() < 1e-12 } else { x < 1e-12 });
                }
            }
        }
    }

    #[test]
    fn correlators_match_oracle_and_cache() {
        let m = two_level(&[("T", "1.5"), ("M", "6"), ("omega", "1.3")]);
        let mps = build_mps(&m, 0.25).unwrap();
        let corr = binned_correlators(&mps, Channel::PortA).unwrap();
        let cache = EnvironmentCache::new(&mps).unwrap();
        let slow = cached_correlators(&mps, &cache, Channel::PortA).unwrap();
        let state = oracle::simulate(&m, 6).unwrap();
        for n in 2..=6 {
            for k in 1..n {
                let g = state.correlator(&[(Channel::PortA, n - 1)], &[(Channel::PortA, k - 1)]).unwrap();
                let x = state.correlator(&[], &[(Channel::PortA, n - 1), (Channel::PortA, k - 1)]).unwrap();
                assert!((corr.g(n, k) - g).norm() < 1e-12, "g({n},{k})");
                assert!((corr.chi(n, k) - x).norm() < 1e-12, "chi({n},{k})");
                assert!((slow.g(n, k) - g).norm() < 1e-12);
                assert!((slow.chi(n, k) - x).norm() < 1e-12);
            }
        }
        for b in 1..=6 {
            let n = state.correlator(&[(Channel::PortA, b - 1)], &[(Channel::PortA, b - 1)]).unwrap().re;
            assert!((corr.flux[b - 1] / corr.norm_sq - n).abs() < 1e-12);
            assert!((slow.flux[b - 1] - corr.flux[b - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn split_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = random_model(&mut rng, 3, 4, 5, 2.0, Mode::SingleSourceBothPorts, 0.5).unwrap();
        let mps = build_mps(&model, 0.1).unwrap();
        let cache = EnvironmentCache::new(&mps).unwrap();
        use rand::Rng;
        for _ in 0..40 {
            let mut v = [rng.random_range(0..=20), rng.random_range(0..=20), rng.random_range(0..=20)];
            v.sort();
            assert!(cache.split_residual(v[0], v[1], v[2]) < 1e-10);
        }
    }

    #[test]
    fn binned_qfi_matches_oracle() {
        let m = two_level(&[("T", "3"), ("M", "8"), ("omega", "1")]);
        let mps = build_mps(&m, 0.375).unwrap();
        let exact = binned_qfi(&mps).unwrap();
        let brute = oracle_qfi(&oracle::simulate(&m, 8).unwrap()).unwrap();
        assert!((exact.qfi - brute.qfi).abs() < 1e-8, "{} vs {}", exact.qfi, brute.qfi);
        assert!((exact.flipped_sign.unwrap() - brute.qfi).abs() > 1e-3);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let joint = random_model(&mut rng, 3, 2, 4, 2.0, Mode::SingleSourceBothPorts, 0.8).unwrap();
        let mps = build_mps(&joint, 0.25).unwrap();
        let exact = binned_qfi(&mps).unwrap();
        let brute = oracle_qfi(&oracle::simulate(&joint, 8).unwrap()).unwrap();
        assert!((exact.qfi - brute.qfi).abs() < 1e-8, "{} vs {}", exact.qfi, brute.qfi);
        assert!((exact.mean - brute.mean).abs() < 1e-10);
    }

    #[test]
    fn joint_binned_converges_to_general_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_model(&mut rng, 3, 2, 1, 2.0, Mode::SingleSourceBothPorts, 0.6).unwrap();
        let fine = m.with_steps(512).unwrap();
        let cont = qfi::qfi(&fine, &StepPropagators::from_model(&fine).unwrap(), 512).unwrap();
        assert!(cont.coherence_term > 5e-4);
        let diffs: Vec<f64> =
            [0.05, 0.025, 0.0125].iter().map(|&e| (binned_qfi(&build_mps(&m, e).unwrap()).unwrap().qfi - cont.qfi).abs()).collect();
        for w in diffs.windows(2) {
            let r = w[0] / w[1];
            assert!((1.6..=2.4).contains(&r), "{diffs:?}");
        }
        // A flipped coherence sign would shift the limit by 32(∫Im C)².
        assert!(diffs[2] < 0.2 * 32.0 * cont.coherence_term);
    }

    #[test]
    fn fock_one_cavity() {
        let m = preset("cavity", &params(&[("state", "fock"), ("N", "1"), ("T", "20")])).unwrap();
        let mps = build_mps(&m, 0.02).unwrap();
        let r = mps_qfi(&mps).unwrap();
        assert!((r.qfi - 16.0).abs() < 0.32, "{}", r.qfi);
    }

    #[test]
    fn first_order_convergence() {
        let m = two_level(&[("T", "4"), ("M", "400")]);
        let exact = qfi::qfi(&m, &StepPropagators::from_model(&m).unwrap(), 400).unwrap().qfi;
        let diffs: Vec<f64> =
            [0.04, 0.02, 0.01].iter().map(|&e| (mps_qfi(&build_mps(&m, e).unwrap()).unwrap().qfi - exact).abs()).collect();
        for w in diffs.windows(2) {
            let r = w[0] / w[1];
            assert!((1.6..=2.4).contains(&r), "{diffs:?}");
        }
    }

    #[test]
    fn bound_values() {
        let v = error_bound(0.5, 6.0, 10.0, 1e-4);
        assert!((v - 0.036_291_497_975_708_5).abs() < 1e-12);
        assert!((v - 0.0364).abs() < 2e-4);
        assert!(error_bound(0.5, 6.0, 10.0, 1e-12) < 1e-9);
        assert_eq!(error_bound(0.5, 6.0, 10.0, 0.01), f64::INFINITY);
        let m = two_level(&[]);
        assert!((eta0(&m) - 6.0).abs() < 1e-12);
        assert!(error_estimate(&m, 1e-6) < error_estimate(&m, 1e-5));
    }

    #[test]
    fn reabsorption() {
        let cases = [
            (two_level(&[("omega", "0"), ("init", "e"), ("T", "2"), ("M", "6")]), 1e-8),
            (two_level(&[("T", "3"), ("M", "8")]), 1e-6),
        ];
        for (m, tol) in cases {
            let bins = m.num_steps();
            let mps = build_mps(&m, m.eps()).unwrap();
            let circ = reabsorption_circuit(&mps).unwrap();
            assert!(circ.unitarity_residual() < 1e-12);
            let (field, norm_sq, _) = oracle::source_field(&m, bins).unwrap();
            assert!((circ.norm_sq - norm_sq).abs() < 1e-12);
            assert!(1.0 - circ.reabsorb(&field).unwrap() <= tol);
            assert!((circ.generate().unwrap() - &field).norm() < 1e-10);
        }
    }
}

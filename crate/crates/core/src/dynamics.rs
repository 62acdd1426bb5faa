//! Liouvillian, step channels, propagation sweeps, spectral classification and contractivity.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, c, dag, identity, sandwich, tol, CMat, C64};
use crate::model::{Channel, SourceModel};

/// `-i[H, ·] + Σ_j 𝒟[L_j]` as a `D²×D²` matrix.
pub fn liouvillian_matrix(h: &CMat, jumps: &[&CMat]) -> CMat {
    let d = h.nrows();
    let id = identity(d);
    let mut out = (sandwich(h, &id) - sandwich(&id, h)) * c(0.0, -1.0);
    for l in jumps {
        let ldl = dag(l) * *l;
        out += sandwich(l, &dag(l));
        out -= (sandwich(&ldl, &id) + sandwich(&id, &ldl)) * c(0.5, 0.0);
    }
    out
}

/// Per-step generators, stored once per distinct Hamiltonian.
#[derive(Clone, Debug)]
pub struct Liouvillian {
    pub dim: usize,
    pub eps: f64,
    pub generators: Vec<CMat>,
    pub index: Vec<usize>,
    /// Loss channels are present, so any QFI computed from port insertions is an upper bound.
    pub upper_bound: bool,
}

impl Liouvillian {
    pub fn num_steps(&self) -> usize {
        self.index.len()
    }

    /// Generator of step `k` (1-based).
    pub fn step(&self, k: usize) -> &CMat {
        &self.generators[self.index[k - 1]]
    }

    pub fn is_constant(&self) -> bool {
        self.generators.len() == 1
    }

    /// Time average of the step generators.
    pub fn averaged(&self) -> CMat {
        let n = self.num_steps() as f64;
        let mut counts = vec![0usize; self.generators.len()];
        for &i in &self.index {
            counts[i] += 1;
        }
        let d2 = self.dim * self.dim;
        let mut out = CMat::zeros(d2, d2);
        for (g, &k) in self.generators.iter().zip(&counts) {
            out += g * c(k as f64 / n, 0.0);
        }
        out
    }
}

pub fn build_liouvillian(model: &SourceModel) -> Liouvillian {
    let jumps: Vec<&CMat> = model.jumps.iter().map(|j| &j.matrix).collect();
    Liouvillian {
        dim: model.dim,
        eps: model.eps(),
        generators: model.schedule.hamiltonians.iter().map(|h| liouvillian_matrix(h, &jumps)).collect(),
        index: model.schedule.index.clone(),
        upper_bound: model.has_loss(),
    }
}

/// Step channels `E_k`, one matrix per distinct step.
#[derive(Clone, Debug)]
pub struct StepPropagators {
    pub dim: usize,
    /// Time covered by one step.
    pub eps: f64,
    pub maps: Vec<CMat>,
    pub index: Vec<usize>,
}

impl StepPropagators {
    /// Exact piecewise-constant channels `exp(εℒ_k)`.
    pub fn exact(l: &Liouvillian) -> Result<Self> {
        let maps = l.generators.iter().map(|g| linalg::expm(&(g * c(l.eps, 0.0)))).collect::<Result<Vec<_>>>()?;
        Ok(Self { dim: l.dim, eps: l.eps, maps, index: l.index.clone() })
    }

    pub fn from_model(model: &SourceModel) -> Result<Self> {
        Self::exact(&build_liouvillian(model))
    }

    /// First-order Kraus discretization `X ↦ U_k (Σ_α K_α X K_α†) U_k†`.
    pub fn kraus(model: &SourceModel) -> Result<Self> {
        let ops = KrausSteps::new(model)?;
        let maps = ops.unitaries.iter().map(|u| ops.step_super(u)).collect();
        Ok(Self { dim: model.dim, eps: model.eps(), maps, index: model.schedule.index.clone() })
    }

    pub fn num_steps(&self) -> usize {
        self.index.len()
    }

    /// Channel of step `k` (1-based).
    pub fn step(&self, k: usize) -> &CMat {
        &self.maps[self.index[k - 1]]
    }

    pub fn horizon(&self) -> f64 {
        self.eps * self.num_steps() as f64
    }

    /// Composes `stride` consecutive steps into one; identical products are shared.
    pub fn coarsen(&self, stride: usize) -> Result<Self> {
        let m = self.num_steps();
        if stride == 0 || m % stride != 0 {
            return Err(Error::InvalidArgument(format!("stride {stride} does not divide {m} steps")));
        }
        if stride == 1 {
            return Ok(self.clone());
        }
        let mut cache: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut maps = Vec::new();
        let mut index = Vec::with_capacity(m / stride);
        for block in self.index.chunks(stride) {
            let key = block.to_vec();
            let id = match cache.get(&key) {
                Some(&i) => i,
                None => {
                    let mut prod = self.maps[block[0]].clone();
                    for &i in &block[1..] {
                        prod = &self.maps[i] * prod;
                    }
                    maps.push(prod);
                    cache.insert(key, maps.len() - 1);
                    maps.len() - 1
                }
            };
            index.push(id);
        }
        Ok(Self { dim: self.dim, eps: self.eps * stride as f64, maps, index })
    }

    /// Composite channel `E_{k_to} ⋯ E_{k_from+1}`.
    pub fn span(&self, k_from: usize, k_to: usize) -> Result<CMat> {
        check_range(k_from, k_to, self.num_steps())?;
        let d2 = self.dim * self.dim;
        let mut out = CMat::identity(d2, d2);
        for k in (k_from + 1)..=k_to {
            out = self.step(k) * out;
        }
        Ok(out)
    }

    pub fn max_channel_residuals(&self) -> (f64, f64) {
        let tp = self.maps.iter().map(|e| linalg::trace_preservation_residual(e, self.dim)).fold(0.0, f64::max);
        let cp = self.maps.iter().map(|e| linalg::choi_min_eigenvalue(e, self.dim)).fold(f64::INFINITY, f64::min);
        (tp, cp)
    }
}

/// Kraus data of the discretized step channel.
#[derive(Clone, Debug)]
pub struct KrausSteps {
    pub dim: usize,
    pub eps: f64,
    /// `K_0 = (I − εQ)^{1/2}`.
    pub k0: CMat,
    /// `K_j = −i√ε L_j` in jump order.
    pub kj: Vec<CMat>,
    pub channels: Vec<Channel>,
    /// `U_k = exp(−iεH_k)` per distinct Hamiltonian.
    pub unitaries: Vec<CMat>,
    pub index: Vec<usize>,
}

impl KrausSteps {
    pub fn new(model: &SourceModel) -> Result<Self> {
        let eps = model.eps();
        let q = model.q_operator();
        let qmax = linalg::eigh(&q).0.iter().cloned().fold(0.0, f64::max);
        if eps * qmax > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "step {eps} too coarse for the Kraus discretization (ε‖Q‖ = {:.3})",
                eps * qmax
            )));
        }
        let d = model.dim;
        let k0 = linalg::psd_sqrt(&(identity(d) - q * c(eps, 0.0)));
        let kj = model.jumps.iter().map(|j| &j.matrix * c(0.0, -eps.sqrt())).collect();
        let channels = model.jumps.iter().map(|j| j.channel).collect();
        let unitaries = model
            .schedule
            .hamiltonians
            .iter()
            .map(|h| linalg::expm(&(h * c(0.0, -eps))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim: d, eps, k0, kj, channels, unitaries, index: model.schedule.index.clone() })
    }

    pub fn unitary(&self, k: usize) -> &CMat {
        &self.unitaries[self.index[k - 1]]
    }

    /// `Σ_α K_α X K_α†` as a superoperator.
    pub fn dissipative_super(&self) -> CMat {
        let mut s = sandwich(&self.k0, &dag(&self.k0));
        for k in &self.kj {
            s += sandwich(k, &dag(k));
        }
        s
    }

    pub fn step_super(&self, u: &CMat) -> CMat {
        sandwich(u, &dag(u)) * self.dissipative_super()
    }
}

fn check_range(k_from: usize, k_to: usize, m: usize) -> Result<()> {
    if k_from > k_to || k_to > m {
        return Err(Error::InvalidArgument(format!("step range {k_from}..{k_to} invalid for {m} steps")));
    }
    Ok(())
}

/// Schrödinger-picture propagation from step boundary `k_from` to `k_to`.
pub fn propagate(state: &CMat, k_from: usize, k_to: usize, props: &StepPropagators) -> Result<CMat> {
    check_range(k_from, k_to, props.num_steps())?;
    if state.nrows() != props.dim || state.ncols() != props.dim {
        return Err(Error::Shape(format!("state is {}x{}, expected {}", state.nrows(), state.ncols(), props.dim)));
    }
    let mut v = linalg::vec_of(state);
    for k in (k_from + 1)..=k_to {
        v = props.step(k) * v;
    }
    Ok(linalg::mat_of(&v, props.dim))
}

/// Heisenberg-picture propagation of an observable from boundary `k_from` back to `k_to ≤ k_from`.
pub fn adjoint_propagate(observable: &CMat, k_from: usize, k_to: usize, props: &StepPropagators) -> Result<CMat> {
    check_range(k_to, k_from, props.num_steps())?;
    if observable.nrows() != props.dim || observable.ncols() != props.dim {
        return Err(Error::Shape("observable dimension mismatch".into()));
    }
    let mut v = linalg::vec_of(observable);
    for k in ((k_to + 1)..=k_from).rev() {
        v = props.step(k).adjoint() * v;
    }
    Ok(linalg::mat_of(&v, props.dim))
}

/// `ρ_i(t_k)` for every boundary `k = 0..=M`.
pub fn forward_sweep(rho: &CMat, props: &StepPropagators) -> Vec<CMat> {
    let mut out = Vec::with_capacity(props.num_steps() + 1);
    let mut v = linalg::vec_of(rho);
    out.push(rho.clone());
    for k in 1..=props.num_steps() {
        v = props.step(k) * v;
        out.push(linalg::mat_of(&v, props.dim));
    }
    out
}

/// `𝒫(t_k) = ℰ†(T, t_k)(P)` for every boundary `k = 0..=M`.
pub fn backward_sweep(p: &CMat, props: &StepPropagators) -> Vec<CMat> {
    let m = props.num_steps();
    let mut out = vec![CMat::zeros(props.dim, props.dim); m + 1];
    let mut v = linalg::vec_of(p);
    out[m] = p.clone();
    for k in (1..=m).rev() {
        v = props.step(k).adjoint() * v;
        out[k - 1] = linalg::mat_of(&v, props.dim);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Classification {
    SqlBound,
    HlPossible,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumReport {
    #[serde(serialize_with = "ser_complex_list")]
    pub eigenvalues: Vec<C64>,
    pub num_fixed_points: usize,
    #[serde(skip)]
    pub fixed_points: Vec<CMat>,
    pub gap: f64,
    pub classification: Classification,
    /// The generator was time-dependent and its time average was analysed.
    pub time_averaged: bool,
}

fn ser_complex_list<S: serde::Serializer>(v: &[C64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for z in v {
        seq.serialize_element(&[z.re, z.im])?;
    }
    seq.end()
}

pub fn spectrum(l: &Liouvillian, tol: f64) -> Result<SpectrumReport> {
    spectrum_with_floor(l, tol, tol::GAP_FLOOR)
}

pub fn spectrum_with_floor(l: &Liouvillian, tol: f64, gap_floor: f64) -> Result<SpectrumReport> {
    let gen = if l.is_constant() { l.generators[0].clone() } else { l.averaged() };
    let mut eigenvalues = linalg::eigenvalues(&gen)?;
    eigenvalues.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
    let num_fixed = eigenvalues.iter().filter(|z| z.norm() < tol).count();
    let gap = eigenvalues.iter().filter(|z| z.norm() >= tol).map(|z| -z.re).fold(f64::INFINITY, f64::min);
    let gap = if gap.is_finite() { gap.max(0.0) } else { 0.0 };
    let classification =
        if num_fixed == 1 && gap > gap_floor { Classification::SqlBound } else { Classification::HlPossible };
    let fixed_points = fixed_points(&gen, l.dim, num_fixed);
    Ok(SpectrumReport {
        eigenvalues,
        num_fixed_points: num_fixed,
        fixed_points,
        gap,
        classification,
        time_averaged: !l.is_constant(),
    })
}

/// Density matrices spanning the kernel of `gen` as far as positivity allows.
fn fixed_points(gen: &CMat, d: usize, count: usize) -> Vec<CMat> {
    if count == 0 {
        return Vec::new();
    }
    let svd = gen.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let mut candidates = Vec::new();
    for &i in order.iter().take(count) {
        let x = linalg::mat_of(&v_t.row(i).adjoint(), d);
        for h in [linalg::hermitize(&x), linalg::hermitize(&(&x * c(0.0, 1.0)))] {
            for sign in [1.0, -1.0] {
                let part = linalg::herm_fn(&h, |e| (sign * e).max(0.0));
                let tr = linalg::trace(&part).re;
                if tr > 1e-8 {
                    candidates.push(part.unscale(tr));
                }
            }
            let tr = linalg::trace(&h).re;
            if tr.abs() > 1e-8 && linalg::min_eigenvalue_hermitian(&h) / tr > -1e-8 {
                candidates.push(h.unscale(tr));
            }
        }
    }
    let mut basis: Vec<linalg::CVec> = Vec::new();
    let mut out = Vec::new();
    for cand in candidates {
        let v = linalg::vec_of(&cand);
        if (gen * &v).norm() > 1e-8 {
            continue;
        }
        let mut r = v.clone();
        for b in &basis {
            let proj = b.dotc(&r);
            r -= b * proj;
        }
        if r.norm() > 1e-6 * v.norm() {
            basis.push(r.unscale(r.norm()));
            out.push(cand);
        }
        if out.len() == count {
            break;
        }
    }
    out
}

/// Search settings for [`contraction_coefficient`].
#[derive(Clone, Copy, Debug)]
pub struct ContractionSearch {
    /// Polar × azimuthal grid resolution on the Bloch sphere (qubits).
    pub grid: usize,
    /// Random orthogonal pure pairs (D > 2).
    pub samples: usize,
    pub seed: u64,
}

impl Default for ContractionSearch {
    fn default() -> Self {
        Self { grid: 180, samples: 10_000, seed: 0 }
    }
}

/// Estimate of `sup ‖ℰ(Δ)‖₁ / ‖Δ‖₁` over differences of orthogonal pure states.
pub fn contraction_coefficient(props: &StepPropagators, k_from: usize, k_span: usize) -> Result<f64> {
    contraction_of_map(&props.span(k_from, k_from + k_span)?, props.dim, ContractionSearch::default())
}

pub fn contraction_of_map(e: &CMat, d: usize, search: ContractionSearch) -> Result<f64> {
    let ratio = |psi: &linalg::CVec, phi: &linalg::CVec| -> f64 {
        let delta = psi * psi.adjoint() - phi * phi.adjoint();
        let out = linalg::apply_super(e, &delta);
        linalg::trace_norm_hermitian(&linalg::hermitize(&out)) / 2.0
    };
    let mut best: f64 = 0.0;
    if d == 1 {
        return Ok(0.0);
    }
    if d == 2 {
        let n = search.grid.max(2);
        for i in 0..=n {
            let theta = std::f64::consts::PI * i as f64 / n as f64;
            for j in 0..(2 * n) {
                let phi = std::f64::consts::PI * j as f64 / n as f64;
                let psi = linalg::CVec::from_vec(vec![
                    c((theta / 2.0).cos(), 0.0),
                    C64::from_polar((theta / 2.0).sin(), phi),
                ]);
                let perp = linalg::CVec::from_vec(vec![-psi[1].conj(), psi[0].conj()]);
                best = best.max(ratio(&psi, &perp));
            }
        }
        return Ok(best);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    for _ in 0..search.samples {
        let psi = linalg::random_state(&mut rng, d);
        let mut phi = linalg::random_state(&mut rng, d);
        let ov = psi.dotc(&phi);
        phi -= &psi * ov;
        let phi = linalg::normalized(&phi)?;
        best = best.max(ratio(&psi, &phi));
    }
    for k in 0..d {
        for l in (k + 1)..d {
            best = best.max(ratio(&linalg::basis_ket(d, k), &linalg::basis_ket(d, l)));
        }
    }
    Ok(best)
}

/// Smallest eigenvalue of `Σ_α vec(A_α) vec(A_α)†` over `A ∈ {I, L_1, …}`.
pub fn kraus_rank_constant(jumps: &[&CMat]) -> f64 {
    let d = jumps.first().map(|l| l.nrows()).unwrap_or(1);
    let mut g = CMat::zeros(d * d, d * d);
    let id = linalg::vec_of(&identity(d));
    g += &id * id.adjoint();
    for l in jumps {
        let v = linalg::vec_of(l);
        g += &v * v.adjoint();
    }
    linalg::min_eigenvalue_hermitian(&g)
}

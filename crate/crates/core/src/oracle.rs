//! Brute-force state vectors of the time-binned field.

use serde::Serialize;

use crate::dynamics::KrausSteps;
use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec, C64, ZERO};
use crate::model::{Channel, Mode, SourceModel};

pub const MAX_BINS: usize = 14;
pub const MAX_AMPLITUDES: usize = 1 << 25;

/// Field state over `M` bins, each with local dimension `local_dim`, bin 1 least significant.
#[derive(Clone, Debug)]
pub struct BinnedStateVector {
    pub bins: usize,
    pub local_dim: usize,
    pub eps: f64,
    /// Normalized amplitudes after post-selecting the source on `φ_f`.
    pub amplitudes: CVec,
    /// Post-selection probability `𝒩²` of the discretized dynamics.
    pub norm_sq: f64,
    /// Local annihilation operators of ports A and B, when present.
    pub port_a: Option<CMat>,
    pub port_b: Option<CMat>,
}

fn guard(bins: usize, local: usize, dim: usize) -> Result<()> {
    if bins > MAX_BINS {
        return Err(Error::MemoryGuard(format!("{bins} bins exceeds the oracle limit of {MAX_BINS}")));
    }
    let total = (local as f64).powi(bins as i32) * dim as f64;
    if total > MAX_AMPLITUDES as f64 {
        return Err(Error::MemoryGuard(format!("{total:.3e} amplitudes exceed the oracle limit")));
    }
    Ok(())
}

/// `|vac⟩⟨ch|` on the local basis `{vac, jump_1, jump_2, …}`.
fn lowering(local: usize, ch: usize) -> CMat {
    let mut m = CMat::zeros(local, local);
    m[(0, ch + 1)] = c(1.0, 0.0);
    m
}

/// Source ⊗ field amplitudes as a `D × local^M` matrix, one column per field configuration.
fn joint_amplitudes(model: &SourceModel, bins: usize) -> Result<(CMat, f64)> {
    let model = if model.num_steps() == bins { model.clone() } else { model.with_steps(bins)? };
    let ks = KrausSteps::new(&model)?;
    let d = model.dim;
    let local = 1 + ks.kj.len();
    guard(bins, local, d)?;
    let mut v = CMat::from_column_slice(d, 1, model.initial_state.as_slice());
    for k in 1..=bins {
        let u = ks.unitary(k);
        let f = v.ncols();
        let mut next = CMat::zeros(d, f * local);
        for alpha in 0..local {
            let op = u * if alpha == 0 { &ks.k0 } else { &ks.kj[alpha - 1] };
            next.columns_mut(alpha * f, f).copy_from(&(op * &v));
        }
        v = next;
    }
    Ok((v, model.eps()))
}

/// Normalized field emitted by one source, post-selected on `φ_f`, with `𝒩²` and `ε`.
pub fn source_field(model: &SourceModel, bins: usize) -> Result<(CVec, f64, f64)> {
    let (v, eps) = joint_amplitudes(model, bins)?;
    let mut psi: CVec = (v.adjoint() * &model.final_state).map(|z| z.conj());
    let norm_sq = psi.norm_squared();
    if norm_sq < model.norm_floor {
        return Err(Error::PostselectionTooUnlikely { norm_sq, floor: model.norm_floor });
    }
    psi.unscale_mut(norm_sq.sqrt());
    Ok((psi, norm_sq, eps))
}

/// Simulates the source emitting into `bins` time bins and post-selects it on `φ_f`.
///
/// Identical-source models yield the product of two copies, with local basis
/// `(α_A, α_B) ↦ α_A·n + α_B`.
pub fn simulate(model: &SourceModel, bins: usize) -> Result<BinnedStateVector> {
    let (psi, norm_sq, eps) = source_field(model, bins)?;
    let local = 1 + model.jumps.len();
    let chan = |ch: Channel| model.jumps.iter().position(|j| j.channel == ch);
    match model.mode {
        Mode::SingleSourceBothPorts => Ok(BinnedStateVector {
            bins,
            local_dim: local,
            eps,
            amplitudes: psi,
            norm_sq,
            port_a: chan(Channel::PortA).map(|i| lowering(local, i)),
            port_b: chan(Channel::PortB).map(|i| lowering(local, i)),
        }),
        Mode::IdenticalIndependentSources => {
            let joint_local = local * local;
            guard(bins, joint_local, 1)?;
            let total = joint_local.pow(bins as u32);
            let mut amps = CVec::zeros(total);
            for (idx, slot) in amps.iter_mut().enumerate() {
                let (mut ia, mut ib, mut rest, mut w) = (0usize, 0usize, idx, 1usize);
                for _ in 0..bins {
                    let digit = rest % joint_local;
                    rest /= joint_local;
                    ia += (digit / local) * w;
                    ib += (digit % local) * w;
                    w *= local;
                }
                *slot = psi[ia] * psi[ib];
            }
            let a = chan(Channel::PortA).expect("validated single port");
            let id = CMat::identity(local, local);
            Ok(BinnedStateVector {
                bins,
                local_dim: joint_local,
                eps,
                amplitudes: amps,
                norm_sq: norm_sq * norm_sq,
                port_a: Some(lowering(local, a).kronecker(&id)),
                port_b: Some(id.kronecker(&lowering(local, a))),
            })
        }
    }
}

impl BinnedStateVector {
    /// Applies a local operator to bin `bin` (0-based).
    pub fn apply_local(&self, op: &CMat, bin: usize, v: &CVec) -> CVec {
        let l = self.local_dim;
        let stride = l.pow(bin as u32);
        let mut out = CVec::zeros(v.len());
        let blocks = v.len() / (stride * l);
        for hi in 0..blocks {
            for lo in 0..stride {
                let base = hi * stride * l + lo;
                for a in 0..l {
                    let x = v[base + a * stride];
                    if x == ZERO {
                        continue;
                    }
                    for b in 0..l {
                        let m = op[(b, a)];
                        if m != ZERO {
                            out[base + b * stride] += m * x;
                        }
                    }
                }
            }
        }
        out
    }

    fn port(&self, port: Channel) -> Result<&CMat> {
        match port {
            Channel::PortA => self.port_a.as_ref(),
            Channel::PortB => self.port_b.as_ref(),
            Channel::Loss => None,
        }
        .ok_or_else(|| Error::InvalidArgument(format!("state has no {port:?} mode")))
    }

    /// Expectation `⟨ψ| x₁† x₂† ⋯ y₁ y₂ ⋯ |ψ⟩` of bin annihilators `(port, bin)`.
    pub fn correlator(&self, creators: &[(Channel, usize)], annihilators: &[(Channel, usize)]) -> Result<C64> {
        let mut ket = self.amplitudes.clone();
        for &(p, b) in annihilators.iter().rev() {
            self.check_bin(b)?;
            ket = self.apply_local(self.port(p)?, b, &ket);
        }
        let mut bra = self.amplitudes.clone();
        for &(p, b) in creators {
            self.check_bin(b)?;
            bra = self.apply_local(self.port(p)?, b, &bra);
        }
        Ok(bra.dotc(&ket))
    }

    fn check_bin(&self, b: usize) -> Result<()> {
        if b >= self.bins {
            return Err(Error::InvalidArgument(format!("bin {b} out of range for {} bins", self.bins)));
        }
        Ok(())
    }

    /// `H_d|ψ⟩` with `H_d = Σ_m i(A_m†B_m − B_m†A_m)`.
    pub fn generator_applied(&self) -> Result<CVec> {
        let a = self.port(Channel::PortA)?;
        let b = self.port(Channel::PortB)?;
        let h = (a.adjoint() * b - b.adjoint() * a) * c(0.0, 1.0);
        let mut out = CVec::zeros(self.amplitudes.len());
        for m in 0..self.bins {
            out += self.apply_local(&h, m, &self.amplitudes);
        }
        Ok(out)
    }

    /// Total photon number in a port.
    pub fn photon_number(&self, port: Channel) -> Result<f64> {
        let a = self.port(port)?;
        let n = a.adjoint() * a;
        let mut total = 0.0;
        for m in 0..self.bins {
            total += self.amplitudes.dotc(&self.apply_local(&n, m, &self.amplitudes)).re;
        }
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct OracleQfi {
    pub qfi: f64,
    pub mean: f64,
    pub second_moment: f64,
}

/// `4(⟨H_d²⟩ − ⟨H_d⟩²)` on a two-port state with bosonic bin modes.
///
/// The local space holds at most one photon per port, so `H_d|ψ⟩` is evaluated on it and the
/// doubly occupied components `A†B|1_A 1_B⟩ = √2|2_A 0_B⟩` are added as `4⟨n_A n_B⟩` per bin.
pub fn oracle_qfi(state: &BinnedStateVector) -> Result<OracleQfi> {
    let (Some(a), Some(b)) = (&state.port_a, &state.port_b) else {
        return Err(Error::InvalidArgument("oracle QFI needs a two-port state".into()));
    };
    let hpsi = state.generator_applied()?;
    let mean = state.amplitudes.dotc(&hpsi).re;
    let pair = (a.adjoint() * a) * (b.adjoint() * b);
    let doubles: f64 = (0..state.bins)
        .map(|m| state.amplitudes.dotc(&state.apply_local(&pair, m, &state.amplitudes)).re)
        .sum();
    let second_moment = hpsi.norm_squared() + 4.0 * doubles;
    Ok(OracleQfi { qfi: 4.0 * (second_moment - mean * mean), mean, second_moment })
}

/// One comparison of the agreement suite.
#[derive(Clone, Debug, Serialize)]
pub struct AgreementCase {
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
    /// The comparison passes when the deviation is at most the tolerance, or, for a
    /// separation check, at least it.
    pub separation: bool,
    pub pass: bool,
}

impl AgreementCase {
    fn within(name: &str, deviation: f64, tolerance: f64) -> Self {
        Self { name: name.into(), deviation, tolerance, separation: false, pass: deviation <= tolerance }
    }

    fn apart(name: &str, deviation: f64, tolerance: f64) -> Self {
        Self { name: name.into(), deviation, tolerance, separation: true, pass: deviation >= tolerance }
    }
}

pub const AGREEMENT_TOL: f64 = 1e-8;
pub const SIGN_SEPARATION: f64 = 1e-3;

/// Regression-side binned QFI and correlators against the state vector on shared bins.
pub fn agreement_suite(seed: u64) -> Result<Vec<AgreementCase>> {
    use crate::model::presets::params;
    use crate::model::{preset, random_model};
    use crate::mps::{binned_correlators, binned_qfi, build_mps};
    use rand::SeedableRng;

    let bins = 8;
    let mut cases = Vec::new();
    let identical = [
        ("two_level", preset("two_level", &params(&[("omega", "1"), ("T", "3"), ("M", "8")]))?),
        ("pi_level", preset("pi_level", &params(&[("omega0", "0.6"), ("T", "3"), ("M", "8")]))?),
        ("dark_2", preset("dark_2", &params(&[("T", "3"), ("M", "8")]))?),
    ];
    for (name, m) in &identical {
        let mps = build_mps(m, m.eps())?;
        let binned = binned_qfi(&mps)?;
        let brute = oracle_qfi(&simulate(m, bins)?)?;
        cases.push(AgreementCase::within(&format!("{name} D={} qfi", m.dim), (binned.qfi - brute.qfi).abs(), AGREEMENT_TOL));
        if let Some(flip) = binned.flipped_sign {
            cases.push(AgreementCase::apart(&format!("{name} flipped q2 sign"), (flip - brute.qfi).abs(), SIGN_SEPARATION));
        }
    }

    let (name, m) = &identical[0];
    let mps = build_mps(m, m.eps())?;
    let corr = binned_correlators(&mps, Channel::PortA)?;
    let state = simulate(m, bins)?;
    let mut dev = 0.0f64;
    for n in 2..=bins {
        for k in 1..n {
            let g = state.correlator(&[(Channel::PortA, n - 1)], &[(Channel::PortA, k - 1)])?;
            let x = state.correlator(&[], &[(Channel::PortA, n - 1), (Channel::PortA, k - 1)])?;
            dev = dev.max((corr.g(n, k) - g).norm()).max((corr.chi(n, k) - x).norm());
        }
        let flux = state.correlator(&[(Channel::PortA, n - 1)], &[(Channel::PortA, n - 1)])?.re;
        dev = dev.max((corr.flux[n - 1] / corr.norm_sq - flux).abs());
    }
    cases.push(AgreementCase::within(&format!("{name} correlators"), dev, AGREEMENT_TOL));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for d in [2, 4] {
        let joint = random_model(&mut rng, d, 2, 4, 2.0, Mode::SingleSourceBothPorts, 0.6)?;
        let mps = build_mps(&joint, joint.eps())?;
        let binned = binned_qfi(&mps)?;
        let brute = oracle_qfi(&simulate(&joint, bins)?)?;
        cases.push(AgreementCase::within(&format!("random joint D={d} qfi"), (binned.qfi - brute.qfi).abs(), AGREEMENT_TOL));
    }
    Ok(cases)
}

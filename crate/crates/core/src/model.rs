//! Source descriptions: levels, control schedule, tagged jump operators, boundary states.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, tol, CMat, CVec};

pub mod config;
pub mod presets;

pub use config::load_model;
pub use presets::{preset, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    PortA,
    PortB,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    SingleSourceBothPorts,
    IdenticalIndependentSources,
}

#[derive(Clone, Debug)]
pub struct JumpOperator {
    pub matrix: CMat,
    pub channel: Channel,
}

impl JumpOperator {
    pub fn new(matrix: CMat, channel: Channel) -> Self {
        Self { matrix, channel }
    }
}

/// Control parameters `θ[p, j]` multiplying Hermitian generators `B_j` at step `p`.
#[derive(Clone, Debug)]
pub struct ThetaSchedule {
    pub generators: Vec<CMat>,
    pub theta: DMatrix<f64>,
}

/// Piecewise-constant Hamiltonian schedule over `num_steps` steps of width `eps`.
///
/// Distinct Hamiltonians are stored once; `index[k]` selects the one used in step `k + 1`.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub num_steps: usize,
    pub eps: f64,
    pub hamiltonians: Vec<CMat>,
    pub index: Vec<usize>,
    pub params: Option<ThetaSchedule>,
}

impl Schedule {
    pub fn constant(h: CMat, num_steps: usize, horizon: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        Ok(Self {
            num_steps,
            eps: horizon / num_steps as f64,
            hamiltonians: vec![h],
            index: vec![0; num_steps],
            params: None,
        })
    }

    /// One Hamiltonian per step; exact duplicates are shared.
    pub fn explicit(hs: Vec<CMat>, horizon: f64) -> Result<Self> {
        if hs.is_empty() {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        let num_steps = hs.len();
        let mut distinct: Vec<CMat> = Vec::new();
        let mut index = Vec::with_capacity(num_steps);
        for h in hs {
            match distinct.iter().position(|d| *d == h) {
                Some(i) => index.push(i),
                None => {
                    index.push(distinct.len());
                    distinct.push(h);
                }
            }
        }
        Ok(Self { num_steps, eps: horizon / num_steps as f64, hamiltonians: distinct, index, params: None })
    }

    /// `H_p = Σ_j θ[p, j] B_j`.
    pub fn parametrized(generators: Vec<CMat>, theta: DMatrix<f64>, horizon: f64) -> Result<Self> {
        if generators.len() != theta.ncols() {
            return Err(Error::Shape(format!(
                "theta has {} columns for {} generators",
                theta.ncols(),
                generators.len()
            )));
        }
        let d = generators.first().map(|g| g.nrows()).unwrap_or(0);
        let hs: Vec<CMat> = (0..theta.nrows())
            .map(|p| {
                let mut h = CMat::zeros(d, d);
                for (j, g) in generators.iter().enumerate() {
                    h += g.scale(theta[(p, j)]);
                }
                h
            })
            .collect();
        let mut s = Self::explicit(hs, horizon)?;
        s.params = Some(ThetaSchedule { generators, theta });
        Ok(s)
    }

    pub fn horizon(&self) -> f64 {
        self.eps * self.num_steps as f64
    }

    /// Hamiltonian of step `k` (0-based).
    pub fn hamiltonian(&self, k: usize) -> &CMat {
        &self.hamiltonians[self.index[k]]
    }

    pub fn is_constant(&self) -> bool {
        self.hamiltonians.len() == 1
    }

    /// Largest operator norm over the schedule.
    pub fn max_norm(&self) -> f64 {
        self.hamiltonians
            .iter()
            .map(|h| linalg::eigh(h).0.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .fold(0.0, f64::max)
    }

    /// Same piecewise-constant function on `new_steps` steps.
    ///
    /// Constant schedules accept any step count; otherwise `new_steps` must be a multiple of
    /// the current count.
    pub fn resampled(&self, new_steps: usize) -> Result<Self> {
        let horizon = self.horizon();
        if self.is_constant() {
            return Self::constant(self.hamiltonians[0].clone(), new_steps, horizon);
        }
        if new_steps == 0 || new_steps % self.num_steps != 0 {
            return Err(Error::Validation(format!(
                "cannot resample a {}-step schedule onto {new_steps} steps",
                self.num_steps
            )));
        }
        let r = new_steps / self.num_steps;
        let index = self.index.iter().flat_map(|&i| std::iter::repeat(i).take(r)).collect();
        Ok(Self {
            num_steps: new_steps,
            eps: horizon / new_steps as f64,
            hamiltonians: self.hamiltonians.clone(),
            index,
            params: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SourceModel {
    pub dim: usize,
    pub schedule: Schedule,
    pub jumps: Vec<JumpOperator>,
    pub initial_state: CVec,
    pub final_state: CVec,
    pub horizon: f64,
    pub mode: Mode,
    /// Lower bound on the post-selection probability `N²`.
    pub norm_floor: f64,
}

impl SourceModel {
    pub fn new(
        schedule: Schedule,
        jumps: Vec<JumpOperator>,
        initial_state: CVec,
        final_state: CVec,
        mode: Mode,
    ) -> Result<Self> {
        let dim = initial_state.len();
        let horizon = schedule.horizon();
        let m = Self { dim, schedule, jumps, initial_state, final_state, horizon, mode, norm_floor: tol::NORM_FLOOR };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::Schema("dimension must be positive".into()));
        }
        for (k, h) in self.schedule.hamiltonians.iter().enumerate() {
            if h.nrows() != d || h.ncols() != d {
                return Err(Error::Schema(format!("Hamiltonian {k} is {}x{}, expected {d}x{d}", h.nrows(), h.ncols())));
            }
            if !linalg::is_hermitian(h, tol::HERMITIAN) {
                return Err(Error::Validation(format!("Hamiltonian {k} is not Hermitian")));
            }
        }
        if let Some(p) = &self.schedule.params {
            for (j, g) in p.generators.iter().enumerate() {
                if g.nrows() != d || !linalg::is_hermitian(g, tol::HERMITIAN) {
                    return Err(Error::Validation(format!("generator {j} is not a Hermitian {d}x{d} matrix")));
                }
            }
        }
        if self.schedule.index.len() != self.schedule.num_steps {
            return Err(Error::Schema("schedule index length differs from step count".into()));
        }
        if (self.schedule.eps * self.schedule.num_steps as f64 - self.horizon).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::Validation("step width times step count differs from horizon".into()));
        }
        for (k, j) in self.jumps.iter().enumerate() {
            if j.matrix.nrows() != d || j.matrix.ncols() != d {
                return Err(Error::Schema(format!("jump {k} has wrong shape")));
            }
            if !j.matrix.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::NonFinite(format!("jump {k}")));
            }
        }
        for (name, v) in [("initial_state", &self.initial_state), ("final_state", &self.final_state)] {
            if v.len() != d {
                return Err(Error::Schema(format!("{name} has length {}, expected {d}", v.len())));
            }
            if (v.norm() - 1.0).abs() > tol::STATE_NORM {
                return Err(Error::Validation(format!("{name} is not normalized (norm {})", v.norm())));
            }
        }
        let count = |ch: Channel| self.jumps.iter().filter(|j| j.channel == ch).count();
        let (na, nb) = (count(Channel::PortA), count(Channel::PortB));
        if na != 1 {
            return Err(Error::Validation(format!("expected exactly one PortA jump, found {na}")));
        }
        match self.mode {
            Mode::IdenticalIndependentSources if nb != 0 => {
                return Err(Error::Validation("identical-sources mode takes a single-port source".into()))
            }
            Mode::SingleSourceBothPorts if nb > 1 => {
                return Err(Error::Validation(format!("expected at most one PortB jump, found {nb}")))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.schedule.eps
    }

    pub fn num_steps(&self) -> usize {
        self.schedule.num_steps
    }

    pub fn jump_index(&self, ch: Channel) -> Option<usize> {
        self.jumps.iter().position(|j| j.channel == ch)
    }

    pub fn port_a(&self) -> &CMat {
        &self.jumps[self.jump_index(Channel::PortA).expect("validated model has a PortA jump")].matrix
    }

    pub fn port_b(&self) -> Option<&CMat> {
        self.jump_index(Channel::PortB).map(|i| &self.jumps[i].matrix)
    }

    pub fn has_loss(&self) -> bool {
        self.jumps.iter().any(|j| j.channel == Channel::Loss)
    }

    /// `Q = Σ_j L_j† L_j` over all jumps.
    pub fn q_operator(&self) -> CMat {
        self.jumps.iter().fold(CMat::zeros(self.dim, self.dim), |acc, j| acc + j.matrix.adjoint() * &j.matrix)
    }

    /// `ℓ = Σ_j ‖L_j‖²` with the operator norm.
    pub fn jump_norm_sq(&self) -> f64 {
        self.jumps
            .iter()
            .map(|j| {
                let q = j.matrix.adjoint() * &j.matrix;
                linalg::eigh(&q).0.iter().fold(0.0f64, |m, x| m.max(*x))
            })
            .sum()
    }

    pub fn rho_initial(&self) -> CMat {
        linalg::ket_bra(&self.initial_state, &self.initial_state)
    }

    pub fn projector_final(&self) -> CMat {
        linalg::ket_bra(&self.final_state, &self.final_state)
    }

    /// Same model on a different number of steps.
    pub fn with_steps(&self, num_steps: usize) -> Result<Self> {
        let mut m = self.clone();
        m.schedule = self.schedule.resampled(num_steps)?;
        Ok(m)
    }

    pub fn with_schedule(&self, schedule: Schedule) -> Result<Self> {
        let mut m = self.clone();
        m.horizon = schedule.horizon();
        m.schedule = schedule;
        m.validate()?;
        Ok(m)
    }

    /// Two copies of a single-port source feeding ports A and B, as one joint source of
    /// dimension `D²` with `L_A = L ⊗ I` and `L_B = I ⊗ L`.
    pub fn product_two_port(&self) -> Result<Self> {
        let d = self.dim;
        let id = linalg::identity(d);
        let hs: Vec<CMat> = (0..self.num_steps())
            .map(|k| {
                let h = self.schedule.hamiltonian(k);
                linalg::kron(h, &id) + linalg::kron(&id, h)
            })
            .collect();
        let schedule = if self.schedule.is_constant() {
            Schedule::constant(hs[0].clone(), self.num_steps(), self.horizon)?
        } else {
            Schedule::explicit(hs, self.horizon)?
        };
        let mut jumps = Vec::new();
        for j in &self.jumps {
            match j.channel {
                Channel::PortA => {
                    jumps.push(JumpOperator::new(linalg::kron(&j.matrix, &id), Channel::PortA));
                    jumps.push(JumpOperator::new(linalg::kron(&id, &j.matrix), Channel::PortB));
                }
                Channel::Loss => {
                    jumps.push(JumpOperator::new(linalg::kron(&j.matrix, &id), Channel::Loss));
                    jumps.push(JumpOperator::new(linalg::kron(&id, &j.matrix), Channel::Loss));
                }
                Channel::PortB => return Err(Error::Validation("product construction takes a single-port source".into())),
            }
        }
        let kv = |v: &CVec| {
            let m = v.kronecker(v);
            CVec::from_column_slice(m.as_slice())
        };
        let mut out = Self::new(schedule, jumps, kv(&self.initial_state), kv(&self.final_state), Mode::SingleSourceBothPorts)?;
        out.norm_floor = self.norm_floor;
        Ok(out)
    }
}

/// Random model with `segments` piecewise-constant Hamiltonians of norm ≈ 1 and jumps of
/// norm ≈ `rate^{1/2}`: one port for identical sources, two ports plus loss otherwise.
pub fn random_model<R: rand::Rng>(
    rng: &mut R,
    dim: usize,
    segments: usize,
    steps_per_segment: usize,
    horizon: f64,
    mode: Mode,
    rate: f64,
) -> Result<SourceModel> {
    let mut hs = Vec::with_capacity(segments * steps_per_segment);
    for _ in 0..segments {
        let h = linalg::random_hermitian(rng, dim);
        let h = &h / c(linalg::op_norm(&h).max(1e-12), 0.0);
        hs.extend(std::iter::repeat_n(h, steps_per_segment));
    }
    let schedule = Schedule::explicit(hs, horizon)?;
    let mut jump = |ch| {
        let l = linalg::random_matrix(rng, dim, dim);
        let scale = rate.sqrt() / linalg::op_norm(&l).max(1e-12);
        JumpOperator::new(l * c(scale, 0.0), ch)
    };
    let jumps = match mode {
        Mode::IdenticalIndependentSources => vec![jump(Channel::PortA)],
        Mode::SingleSourceBothPorts => vec![jump(Channel::PortA), jump(Channel::PortB), jump(Channel::Loss)],
    };
    let phi_i = linalg::random_state(rng, dim);
    let phi_f = linalg::random_state(rng, dim);
    SourceModel::new(schedule, jumps, phi_i, phi_f, mode)
}

/// Normalized superposition of basis states with given weights.
pub(crate) fn superposition(d: usize, terms: &[(usize, f64)]) -> CVec {
    let mut v = CVec::zeros(d);
    for &(k, w) in terms {
        v[k] += c(w, 0.0);
    }
    let n = v.norm();
    v.unscale(n)
}

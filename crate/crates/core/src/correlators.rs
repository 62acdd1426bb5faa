//! Field correlators from source dynamics via the quantum regression theorem.

use std::ops::Range;

use nalgebra::DVector;
use serde::Serialize;

use crate::dynamics::{self, StepPropagators};
use crate::error::{Error, Result};
use crate::linalg::{self, c, dag, CMat, CVec, HermitianFrame, RMat, C64, ZERO};
use crate::model::{Channel, SourceModel};

/// `𝒩² = ⟨φ_f| ℰ(T,0)(ρ_i) |φ_f⟩`.
pub fn normalization(model: &SourceModel, props: &StepPropagators) -> Result<f64> {
    let rho = dynamics::propagate(&model.rho_initial(), 0, props.num_steps(), props)?;
    let n = model.final_state.dotc(&(&rho * &model.final_state));
    check_norm(n.re, model.norm_floor)
}

pub(crate) fn check_norm(norm_sq: f64, floor: f64) -> Result<f64> {
    if !norm_sq.is_finite() || norm_sq < floor {
        return Err(Error::PostselectionTooUnlikely { norm_sq, floor });
    }
    Ok(norm_sq)
}

/// Grid-step channels in a real Hermitian frame, split into invariant coordinate blocks.
///
/// Coordinates of an operator `X` are `frameᴴ vec(X)`; a Hermiticity-preserving map acts on
/// them by a real matrix, so complex coordinates propagate as two real columns.
pub(crate) struct RealPropagator {
    pub frame: HermitianFrame,
    pub blocks: Vec<Range<usize>>,
    /// `maps[i][b]` is block `b` of distinct step map `i`.
    pub maps: Vec<Vec<RMat>>,
    pub index: Vec<usize>,
}

impl RealPropagator {
    pub fn new(props: &StepPropagators) -> Self {
        let d = props.dim;
        let d2 = d * d;
        let base = HermitianFrame::new(d);
        let reals: Vec<RMat> = props.maps.iter().map(|s| base.real_super(s)).collect();
        let mut parent: Vec<usize> = (0..d2).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for r in &reals {
            for j in 0..d2 {
                for i in 0..d2 {
                    if r[(i, j)] != 0.0 {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut root_of = vec![usize::MAX; d2];
        for i in 0..d2 {
            let r = find(&mut parent, i);
            if root_of[r] == usize::MAX {
                root_of[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[root_of[r]].push(i);
        }
        let order: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut blocks = Vec::with_capacity(groups.len());
        let mut start = 0;
        for g in &groups {
            blocks.push(start..start + g.len());
            start += g.len();
        }
        let mut frame = CMat::zeros(d2, d2);
        for (new, &old) in order.iter().enumerate() {
            frame.set_column(new, &base.frame.column(old));
        }
        let frame = HermitianFrame { dim: d, frame };
        let maps = reals
            .iter()
            .map(|r| {
                let p = RMat::from_fn(d2, d2, |i, j| r[(order[i], order[j])]);
                blocks.iter().map(|b| p.view((b.start, b.start), (b.len(), b.len())).into_owned()).collect()
            })
            .collect();
        Self { frame, blocks, maps, index: props.index.clone() }
    }

    pub fn dim2(&self) -> usize {
        self.frame.dim * self.frame.dim
    }

    /// `dst[:, ..ncols] = R_k src[:, ..ncols]` for grid step `k` (1-based).
    pub fn apply(&self, k: usize, src: &RMat, dst: &mut RMat, ncols: usize) {
        let blocks = &self.maps[self.index[k - 1]];
        for (b, m) in self.blocks.iter().zip(blocks) {
            let s = src.view((b.start, 0), (b.len(), ncols));
            let mut o = dst.view_mut((b.start, 0), (b.len(), ncols));
            o.gemm(1.0, m, &s, 0.0);
        }
    }

    pub fn coords(&self, x: &CMat) -> CVec {
        self.frame.coords(x)
    }

    pub fn functional(&self, a: &CMat) -> CVec {
        self.frame.functional(a)
    }
}

/// Values `Tr(A_r(t_k) ℰ(t_k, t_s)(X_s))` for all `s ≤ k`, streamed row by row.
///
/// `inserts[s] = X_s` and `readouts[r][k] = A_r(t_k)`; `visit(k, rows)` receives one
/// slice of length `k + 1` per readout.
pub(crate) fn sweep_triangle(
    rp: &RealPropagator,
    inserts: &[CMat],
    readouts: &[Vec<CMat>],
    mut visit: impl FnMut(usize, &[Vec<C64>]),
) {
    let n = inserts.len();
    let d2 = rp.dim2();
    let nr = readouts.len();
    let mut w = RMat::zeros(d2, 2 * n);
    let mut w_next = RMat::zeros(d2, 2 * n);
    let mut rows = vec![Vec::with_capacity(n); nr];
    let mut f = RMat::zeros(d2, 2 * nr);
    let mut g = RMat::zeros(2 * n, 2 * nr);
    let put = |w: &mut RMat, s: usize, x: &CMat| {
        let v = rp.coords(x);
        for i in 0..d2 {
            w[(i, 2 * s)] = v[i].re;
            w[(i, 2 * s + 1)] = v[i].im;
        }
    };
    put(&mut w, 0, &inserts[0]);
    for k in 0..n {
        let ncols = 2 * (k + 1);
        for (r, ro) in readouts.iter().enumerate() {
            let fv = rp.functional(&ro[k]);
            for i in 0..d2 {
                f[(i, 2 * r)] = fv[i].re;
                f[(i, 2 * r + 1)] = fv[i].im;
            }
        }
        let wv = w.columns(0, ncols);
        let mut gv = g.rows_mut(0, ncols);
        gv.gemm_tr(1.0, &wv, &f, 0.0);
        for (r, row) in rows.iter_mut().enumerate() {
            row.clear();
            for s in 0..=k {
                let (a, b) = (2 * s, 2 * s + 1);
                let re = gv[(a, 2 * r)] - gv[(b, 2 * r + 1)];
                let im = gv[(b, 2 * r)] + gv[(a, 2 * r + 1)];
                row.push(c(re, im));
            }
        }
        visit(k, &rows);
        if k + 1 < n {
            rp.apply(k + 1, &w, &mut w_next, ncols);
            std::mem::swap(&mut w, &mut w_next);
            put(&mut w, k + 1, &inserts[k + 1]);
        }
    }
}

/// Packed lower triangle `v[k(k+1)/2 + s]`, `s ≤ k`.
#[derive(Clone, Debug, Serialize)]
pub struct Triangle {
    pub n: usize,
    #[serde(skip)]
    pub data: Vec<C64>,
}

impl Triangle {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![ZERO; n * (n + 1) / 2] }
    }

    pub fn get(&self, k: usize, s: usize) -> C64 {
        assert!(s <= k && k < self.n);
        self.data[k * (k + 1) / 2 + s]
    }

    pub(crate) fn row_mut(&mut self, k: usize) -> &mut [C64] {
        let start = k * (k + 1) / 2;
        &mut self.data[start..start + k + 1]
    }
}

/// Two-time correlators on the quadrature grid `t_k = kΔ`, `k = 0..=M_g`.
#[derive(Clone, Debug)]
pub struct CorrelatorGrid {
    pub dt: f64,
    pub times: Vec<f64>,
    /// `C⁽ᵍ⁾(t_k, t_s) = Tr(L†𝒫(t)ℰ(t,s)(Lρ(s)))/𝒩²`.
    pub cg: Triangle,
    /// `C⁽ᵡ⁾(t_k, t_s) = Tr(𝒫(t)Lℰ(t,s)(Lρ(s)))/𝒩²`.
    pub cchi: Triangle,
    /// `n(t) = Tr(𝒫(t) L ρ(t) L†)`.
    pub flux: Vec<f64>,
    pub norm_sq: f64,
}

/// Boundary sweeps shared by the correlator and QFI routines.
pub(crate) struct Sweeps {
    pub props: StepPropagators,
    pub rho: Vec<CMat>,
    pub proj: Vec<CMat>,
    pub norm_sq: f64,
}

impl Sweeps {
    pub fn new(model: &SourceModel, props: &StepPropagators, grid: usize) -> Result<Self> {
        let m = props.num_steps();
        if grid == 0 || m % grid != 0 {
            return Err(Error::InvalidArgument(format!("grid {grid} is not aligned with {m} steps")));
        }
        let props = props.coarsen(m / grid)?;
        let rho = dynamics::forward_sweep(&model.rho_initial(), &props);
        let proj = dynamics::backward_sweep(&model.projector_final(), &props);
        let norm_sq = check_norm(linalg::trace_prod(&proj[grid], &rho[grid]).re, model.norm_floor)?;
        Ok(Self { props, rho, proj, norm_sq })
    }

    pub fn dt(&self) -> f64 {
        self.props.eps
    }
}

pub fn two_point_grid(model: &SourceModel, props: &StepPropagators, grid: usize) -> Result<CorrelatorGrid> {
    let sw = Sweeps::new(model, props, grid)?;
    let l = model.port_a();
    let ld = dag(l);
    let n = grid + 1;
    let inserts: Vec<CMat> = sw.rho.iter().map(|r| l * r).collect();
    let g_read: Vec<CMat> = sw.proj.iter().map(|p| &ld * p).collect();
    let x_read: Vec<CMat> = sw.proj.iter().map(|p| p * l).collect();
    let rp = RealPropagator::new(&sw.props);
    let mut cg = Triangle::zeros(n);
    let mut cchi = Triangle::zeros(n);
    let inv = 1.0 / sw.norm_sq;
    sweep_triangle(&rp, &inserts, &[g_read, x_read], |k, rows| {
        for (dst, src) in cg.row_mut(k).iter_mut().zip(&rows[0]) {
            *dst = src * inv;
        }
        for (dst, src) in cchi.row_mut(k).iter_mut().zip(&rows[1]) {
            *dst = src * inv;
        }
    });
    let flux = (0..n).map(|k| linalg::trace_prod(&sw.proj[k], &(l * &sw.rho[k] * &ld)).re).collect();
    let dt = sw.dt();
    for k in 0..n {
        let d = cg.get(k, k);
        if d.im.abs() > 1e-8 * d.norm().max(1.0) {
            return Err(Error::Numerical(format!("C(t,t) not real at grid point {k}: {d}")));
        }
    }
    Ok(CorrelatorGrid { dt, times: (0..n).map(|k| k as f64 * dt).collect(), cg, cchi, flux, norm_sq: sw.norm_sq })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// `X ↦ L X`.
    Left,
    /// `X ↦ X L†`.
    Right,
}

/// Jump-operator insertion at step boundary `step`.
#[derive(Clone, Copy, Debug)]
pub struct Insertion {
    pub step: usize,
    pub side: Side,
    pub jump: usize,
}

/// Normalized multi-time correlator with insertions sorted by descending time.
///
/// Insertions sharing a time are applied in list order, last first.
pub fn n_point(model: &SourceModel, props: &StepPropagators, insertions: &[Insertion]) -> Result<C64> {
    let m = props.num_steps();
    for w in insertions.windows(2) {
        if w[0].step < w[1].step {
            return Err(Error::InvalidArgument("insertion times must be sorted in descending order".into()));
        }
    }
    for ins in insertions {
        if ins.step > m || ins.jump >= model.jumps.len() {
            return Err(Error::InvalidArgument(format!("insertion {ins:?} out of range")));
        }
    }
    let mut x = model.rho_initial();
    let mut at = 0;
    for ins in insertions.iter().rev() {
        x = dynamics::propagate(&x, at, ins.step, props)?;
        at = ins.step;
        let l = &model.jumps[ins.jump].matrix;
        x = match ins.side {
            Side::Left => l * x,
            Side::Right => x * dag(l),
        };
    }
    x = dynamics::propagate(&x, at, m, props)?;
    let norm_sq = normalization(model, props)?;
    Ok(model.final_state.dotc(&(&x * &model.final_state)) / norm_sq)
}

/// Normal-ordered 4-point correlator `⟨x_t† y_s† z_t w_s⟩` for `t ≥ s` with port jump indices.
pub fn four_point(
    model: &SourceModel,
    props: &StepPropagators,
    (t, s): (usize, usize),
    [x, y, z, w]: [usize; 4],
) -> Result<C64> {
    n_point(
        model,
        props,
        &[
            Insertion { step: t, side: Side::Left, jump: z },
            Insertion { step: t, side: Side::Right, jump: x },
            Insertion { step: s, side: Side::Left, jump: w },
            Insertion { step: s, side: Side::Right, jump: y },
        ],
    )
}

/// Outcome of the two-port extraction of 4-point correlators from `G⁽²⁾_c` data.
#[derive(Clone, Debug, Serialize)]
pub struct MixingReport {
    pub samples: usize,
    pub unknowns: usize,
    pub condition_number: f64,
    pub singular: bool,
    /// Reconstructed vs direct `Re⟨a_t† b_s† b_t a_s⟩`.
    pub abba: (f64, f64),
    /// Reconstructed vs direct `Re⟨a_t† a_s† b_t b_s⟩`.
    pub aabb: (f64, f64),
    pub max_residual: f64,
}

/// `c_t = a_t e^{iθ₁(t)} cos θ₂ + b_t sin θ₂` with `θ₁(t) = θ₁*·t`.
fn mode_coefficient(is_a: bool, theta1_rate: f64, t: f64, theta2: f64) -> C64 {
    if is_a {
        C64::from_polar(theta2.cos(), theta1_rate * t)
    } else {
        c(theta2.sin(), 0.0)
    }
}

/// The 16 normal-ordered terms of `⟨c_t†c_s†c_t c_s⟩`, `true` meaning port A.
fn terms() -> Vec<[bool; 4]> {
    (0..16).map(|m| [m & 8 != 0, m & 4 != 0, m & 2 != 0, m & 1 != 0]).collect()
}

/// `G⁽²⁾_c(t, s)` assembled from the 16 constituent correlators `corr[j]` of [`terms`].
pub fn g2_mixing(corr: &[C64; 16], t: f64, s: f64, theta1_rate: f64, theta2: f64) -> f64 {
    terms()
        .iter()
        .zip(corr)
        .map(|(&[x, y, z, w], v)| {
            let k = mode_coefficient(x, theta1_rate, t, theta2).conj()
                * mode_coefficient(y, theta1_rate, s, theta2).conj()
                * mode_coefficient(z, theta1_rate, t, theta2)
                * mode_coefficient(w, theta1_rate, s, theta2);
            (k * v).re
        })
        .sum()
}

/// Class key: number of A operators and the multipliers of `θ₁(t)` and `θ₁(s)`.
fn class_of(&[x, y, z, w]: &[bool; 4]) -> (usize, i32, i32) {
    let na = [x, y, z, w].iter().filter(|&&b| b).count();
    (na, z as i32 - x as i32, w as i32 - y as i32)
}

/// All 16 constituents for a two-port model at grid pair `(t, s)`.
pub fn constituents(model: &SourceModel, props: &StepPropagators, t: usize, s: usize) -> Result<[C64; 16]> {
    let a = model.jump_index(Channel::PortA).ok_or_else(|| Error::Validation("missing PortA".into()))?;
    let b = model.jump_index(Channel::PortB).ok_or_else(|| Error::Validation("missing PortB".into()))?;
    let pick = |is_a: bool| if is_a { a } else { b };
    let mut out = [ZERO; 16];
    for (j, [x, y, z, w]) in terms().into_iter().enumerate() {
        out[j] = four_point(model, props, (t, s), [pick(x), pick(y), pick(z), pick(w)])?;
    }
    Ok(out)
}

/// Solves the extraction system over `(θ₁*, θ₂)` samples and compares against direct values.
pub fn extraction_check(
    corr: &[C64; 16],
    t: f64,
    s: f64,
    rates: &[f64],
    angles: &[f64],
) -> MixingReport {
    let all = terms();
    let mut keys: Vec<(usize, i32, i32)> = Vec::new();
    for term in &all {
        let k = class_of(term);
        let canon = if (k.1, k.2) < (0, 0) { k } else { (k.0, -k.1, -k.2) };
        let canon = if (canon.1, canon.2) == (0, 0) { k } else { canon };
        if !keys.contains(&canon) {
            keys.push(canon);
        }
    }
    // Unknowns: one real per self-conjugate class, two per conjugate pair.
    let mut cols: Vec<(usize, bool)> = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        cols.push((i, false));
        if (k.1, k.2) != (0, 0) {
            cols.push((i, true));
        }
    }
    let samples: Vec<(f64, f64)> = rates.iter().flat_map(|&r| angles.iter().map(move |&a| (r, a))).collect();
    let mut design = RMat::zeros(samples.len(), cols.len());
    let mut rhs = DVector::zeros(samples.len());
    for (row, &(rate, th2)) in samples.iter().enumerate() {
        let (ct, st) = (th2.cos(), th2.sin());
        for (ci, &(ki, imag)) in cols.iter().enumerate() {
            let (na, pt, ps) = keys[ki];
            let amp = ct.powi(na as i32) * st.powi(4 - na as i32);
            let phase = rate * (pt as f64 * t + ps as f64 * s);
            let scale = if (pt, ps) == (0, 0) { 1.0 } else { 2.0 };
            // Re(κ S) with κ = amp·e^{iφ}: Re S·cos φ − Im S·sin φ.
            design[(row, ci)] = scale * amp * if imag { -phase.sin() } else { phase.cos() };
        }
        rhs[row] = g2_mixing(corr, t, s, rate, th2);
    }
    let svd = design.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let singular = !(condition_number < 1e10);
    let sol = svd.solve(&rhs, 1e-12 * smax).unwrap_or_else(|_| DVector::zeros(cols.len()));
    let max_residual = (&design * &sol - &rhs).amax();
    let class_value = |k: (usize, i32, i32)| -> (f64, f64) {
        let conj = (k.0, -k.1, -k.2);
        let (ki, flip) = match keys.iter().position(|&x| x == k) {
            Some(i) => (i, false),
            None => (keys.iter().position(|&x| x == conj).expect("class present"), true),
        };
        let re = cols.iter().position(|&cc| cc == (ki, false)).map(|i| sol[i]).unwrap_or(0.0);
        let im = cols.iter().position(|&cc| cc == (ki, true)).map(|i| sol[i]).unwrap_or(0.0);
        (re, if flip { -im } else { im })
    };
    let idx = |term: [bool; 4]| all.iter().position(|&x| x == term).expect("term present");
    let abba_term = [true, false, false, true];
    let aabb_term = [true, true, false, false];
    MixingReport {
        samples: samples.len(),
        unknowns: cols.len(),
        condition_number,
        singular,
        abba: (class_value(class_of(&abba_term)).0, corr[idx(abba_term)].re),
        aabb: (class_value(class_of(&aabb_term)).0, corr[idx(aabb_term)].re),
        max_residual,
    }
}

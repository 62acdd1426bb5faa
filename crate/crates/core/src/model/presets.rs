//! Worked-example sources.

use std::collections::BTreeMap;

use super::{superposition, Channel, JumpOperator, Mode, Schedule, SourceModel};
use crate::error::{Error, Result};
use crate::linalg::{c, dag, unit, CMat, CVec};

pub type Params = BTreeMap<String, String>;

/// Builds `Params` from `key=value` pairs.
pub fn params(pairs: &[(&str, &str)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn lookup<'a>(p: &'a Params, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| p.get(*k).map(String::as_str))
}

fn real(p: &Params, keys: &[&str], default: f64) -> Result<f64> {
    match lookup(p, keys) {
        None => Ok(default),
        Some(s) => parse_real(s).ok_or_else(|| Error::InvalidArgument(format!("{}={s} is not a number", keys[0]))),
    }
}

fn parse_real(s: &str) -> Option<f64> {
    let s = s.trim();
    let sub = |t: &str| -> Option<f64> {
        match t {
            "pi" => Some(std::f64::consts::PI),
            "" => Some(1.0),
            _ => t.parse().ok(),
        }
    };
    if let Some((a, b)) = s.split_once('/') {
        let den: f64 = b.trim().parse().ok()?;
        let num = if let Some(r) = a.trim().strip_prefix("sqrt") {
            sub(r.trim_matches(|ch| ch == '(' || ch == ')'))?.sqrt()
        } else if let Some(r) = a.trim().strip_suffix("pi") {
            sub(r.trim().trim_end_matches('*'))? * std::f64::consts::PI
        } else {
            sub(a.trim())?
        };
        return Some(num / den);
    }
    if let Some(r) = s.strip_suffix("pi") {
        return Some(sub(r.trim().trim_end_matches('*'))? * std::f64::consts::PI);
    }
    s.parse().ok()
}

fn count(p: &Params, keys: &[&str], default: usize) -> Result<usize> {
    match lookup(p, keys) {
        None => Ok(default),
        Some(s) => s.trim().parse().map_err(|_| Error::InvalidArgument(format!("{}={s} is not a count", keys[0]))),
    }
}

fn horizon_and_steps(p: &Params, default_t: f64) -> Result<(f64, usize)> {
    let t = real(p, &["T", "horizon"], default_t)?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon {t} must be positive")));
    }
    let m = count(p, &["M", "steps"], ((50.0 * t).round() as usize).max(1))?;
    if m == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    Ok((t, m))
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidArgument(format!("{name}={v} must be positive")))
    }
}

fn single_port(h: CMat, l: CMat, phi_i: CVec, phi_f: CVec, t: f64, m: usize) -> Result<SourceModel> {
    SourceModel::new(
        Schedule::constant(h, m, t)?,
        vec![JumpOperator::new(l, Channel::PortA)],
        phi_i,
        phi_f,
        Mode::IdenticalIndependentSources,
    )
}

fn level(p: &Params, key: &str, default: &str) -> Result<usize> {
    match lookup(p, &[key]).unwrap_or(default) {
        "g" => Ok(0),
        "e" => Ok(1),
        other => Err(Error::InvalidArgument(format!("{key}={other}: expected g or e"))),
    }
}

/// Builds a named preset. Unknown parameters are ignored; missing ones take defaults.
pub fn preset(name: &str, p: &Params) -> Result<SourceModel> {
    match name {
        "two_level" => two_level(p),
        "pi_level" => pi_level(p),
        "dicke" => dicke(p),
        "tavis_cummings" => tavis_cummings(p),
        "cavity" => cavity(p),
        "dark_state_k" => dark_state(p, count(p, &["k"], 1)?),
        _ => {
            let k = name.strip_prefix("dark_state_").or_else(|| name.strip_prefix("dark_"));
            match k.and_then(|k| k.parse().ok()) {
                Some(k) => dark_state(p, k),
                None => Err(Error::InvalidArgument(format!("unknown preset {name}"))),
            }
        }
    }
}

/// Driven two-level emitter, basis `(g, e)`.
pub fn two_level(p: &Params) -> Result<SourceModel> {
    let omega = real(p, &["omega", "Omega"], 1.0)?;
    let gamma = positive("gamma", real(p, &["gamma"], 1.0)?)?;
    let (t, m) = horizon_and_steps(p, 10.0)?;
    let sigma = unit(2, 0, 1);
    let h = (&sigma + dag(&sigma)) * c(omega, 0.0);
    let l = sigma * c(gamma.sqrt(), 0.0);
    let phi_i = superposition(2, &[(level(p, "init", "g")?, 1.0)]);
    let phi_f = superposition(2, &[(level(p, "final", "g")?, 1.0)]);
    single_port(h, l, phi_i, phi_f, t, m)
}

/// Two two-level emitters sharing one decay channel, basis `(g1, e1, g2, e2)`.
pub fn pi_level(p: &Params) -> Result<SourceModel> {
    let omega0 = real(p, &["omega0", "Omega0", "omega"], 1.0 / 8f64.sqrt())?;
    let alpha = real(p, &["alpha"], std::f64::consts::FRAC_PI_2)?;
    let gamma = positive("gamma", real(p, &["gamma"], 1.0)?)?;
    let (t, m) = horizon_and_steps(p, 20.0)?;
    let s1 = unit(4, 0, 1);
    let s2 = unit(4, 2, 3);
    let phase = c(alpha.cos(), alpha.sin());
    let h = (&s1 + dag(&s1)) * c(omega0, 0.0) + (&s2 * phase + dag(&s2) * phase.conj()) * c(omega0, 0.0);
    let l = (s1 + s2) * c(gamma.sqrt(), 0.0);
    let phi = superposition(4, &[(0, 1.0), (2, 1.0)]);
    single_port(h, l, phi.clone(), phi, t, m)
}

/// Collective decay of `N` initially excited emitters in the symmetric subspace.
///
/// Index `k` holds `N - k` excitations.
pub fn dicke(p: &Params) -> Result<SourceModel> {
    let n = count(p, &["N", "n"], 3)?;
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let gamma = positive("gamma", real(p, &["gamma"], 1.0)?)?;
    let (t, m) = horizon_and_steps(p, 10.0)?;
    let d = n + 1;
    let mut l = CMat::zeros(d, d);
    for k in 0..n {
        let e = (n - k) as f64;
        l[(k + 1, k)] = c((gamma * e * (n as f64 - e + 1.0)).sqrt(), 0.0);
    }
    single_port(CMat::zeros(d, d), l, superposition(d, &[(0, 1.0)]), superposition(d, &[(n, 1.0)]), t, m)
}

/// Symmetric emitters coupled to a leaky cavity, states `(e, n)` with `e + n ≤ N`, `n ≤ cutoff`.
pub fn tavis_cummings(p: &Params) -> Result<SourceModel> {
    let n_at = count(p, &["N", "n"], 2)?;
    if n_at == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let g = real(p, &["g"], 1.0)?;
    let kappa = positive("kappa", real(p, &["kappa"], 1.0)?)?;
    let cutoff = count(p, &["cutoff"], n_at + 2)?;
    let (t, m) = horizon_and_steps(p, 10.0)?;
    let mut states = Vec::new();
    for e in (0..=n_at).rev() {
        for ph in 0..=cutoff.min(n_at - e) {
            states.push((e, ph));
        }
    }
    let d = states.len();
    let idx = |e: usize, ph: usize| states.iter().position(|&s| s == (e, ph));
    let mut h = CMat::zeros(d, d);
    let mut l = CMat::zeros(d, d);
    for (col, &(e, ph)) in states.iter().enumerate() {
        if e > 0 {
            if let Some(row) = idx(e - 1, ph + 1) {
                let ef = e as f64;
                let amp = g * (ef * (n_at as f64 - ef + 1.0)).sqrt() * ((ph + 1) as f64).sqrt();
                h[(row, col)] = c(amp, 0.0);
                h[(col, row)] = c(amp, 0.0);
            }
        }
        if ph > 0 {
            let row = idx(e, ph - 1).expect("lower photon state present");
            l[(row, col)] = c((kappa * ph as f64).sqrt(), 0.0);
        }
    }
    let phi_i = superposition(d, &[(idx(n_at, 0).unwrap(), 1.0)]);
    let phi_f = superposition(d, &[(idx(0, 0).unwrap(), 1.0)]);
    single_port(h, l, phi_i, phi_f, t, m)
}

/// Leaky cavity prepared in a Fock or coherent state, emptying into vacuum.
pub fn cavity(p: &Params) -> Result<SourceModel> {
    let kappa = positive("kappa", real(p, &["kappa"], 1.0)?)?;
    let (t, m) = horizon_and_steps(p, 20.0)?;
    let state = lookup(p, &["state"]).unwrap_or("fock");
    let (phi_i, d) = match state {
        "fock" => {
            let n = count(p, &["N", "n"], 1)?;
            let d = count(p, &["cutoff"], n + 2)?.max(n) + 1;
            (superposition(d, &[(n, 1.0)]), d)
        }
        "coherent" => {
            let re = real(p, &["alpha"], 1.0)?;
            let im = real(p, &["alpha_im"], 0.0)?;
            let alpha = c(re, im);
            let tail = real(p, &["tail"], 1e-7)?;
            let d = match lookup(p, &["cutoff"]) {
                Some(_) => count(p, &["cutoff"], 0)? + 1,
                None => coherent_cutoff(alpha.norm_sqr(), tail) + 1,
            };
            let mut v = CVec::zeros(d);
            let mut amp = c((-alpha.norm_sqr() / 2.0).exp(), 0.0);
            for k in 0..d {
                v[k] = amp;
                amp *= alpha / ((k + 1) as f64).sqrt();
            }
            let nv = v.norm();
            (v.unscale(nv), d)
        }
        other => return Err(Error::InvalidArgument(format!("state={other}: expected fock or coherent"))),
    };
    let mut a = CMat::zeros(d, d);
    for k in 1..d {
        a[(k - 1, k)] = c((kappa * k as f64).sqrt(), 0.0);
    }
    single_port(CMat::zeros(d, d), a, phi_i, superposition(d, &[(0, 1.0)]), t, m)
}

/// Smallest cutoff whose discarded Poisson weight is below `tail`.
fn coherent_cutoff(nbar: f64, tail: f64) -> usize {
    let mut term = (-nbar).exp();
    let mut kept = term;
    let mut k = 0;
    while 1.0 - kept > tail && k < 10_000 {
        k += 1;
        term *= nbar / k as f64;
        kept += term;
    }
    k
}

/// Driven two-level emitter plus `k` dark levels untouched by drive and decay.
///
/// Basis `(g, e, m_1, …, m_k)`.
pub fn dark_state(p: &Params, k: usize) -> Result<SourceModel> {
    let omega = real(p, &["omega", "Omega"], 1.0)?;
    let gamma = positive("gamma", real(p, &["gamma"], 1.0)?)?;
    let (t, m) = horizon_and_steps(p, 10.0)?;
    let d = 2 + k;
    let sigma = unit(d, 0, 1);
    let h = (&sigma + dag(&sigma)) * c(omega, 0.0);
    let l = sigma * c(gamma.sqrt(), 0.0);
    let terms: Vec<(usize, f64)> = std::iter::once(0).chain(2..d).map(|j| (j, 1.0)).collect();
    let phi = superposition(d, &terms);
    single_port(h, l, phi.clone(), phi, t, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_symbolic_reals() {
        assert!((parse_real("pi/2").unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((parse_real("sqrt(1)/8").unwrap() - 0.125).abs() < 1e-15);
        assert!((parse_real("0.25").unwrap() - 0.25).abs() < 1e-15);
        assert!((parse_real("2pi").unwrap() - 2.0 * std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn two_level_shape() {
        let m = preset("two_level", &params(&[("omega", "1"), ("T", "10"), ("M", "500")])).unwrap();
        assert_eq!(m.dim, 2);
        assert_eq!(m.num_steps(), 500);
        assert_eq!(m.port_a()[(0, 1)], c(1.0, 0.0));
        assert_eq!(m.schedule.hamiltonian(0)[(0, 1)], c(1.0, 0.0));
    }

    #[test]
    fn pi_level_shape() {
        let m = preset("pi_level", &params(&[("alpha", "pi/2")])).unwrap();
        assert_eq!(m.dim, 4);
        let h = m.schedule.hamiltonian(0);
        assert!((h[(2, 3)] - c(0.0, 1.0 / 8f64.sqrt())).norm() < 1e-15);
        assert!((m.initial_state[0].re - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((m.initial_state[2].re - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dicke_ladder() {
        let m = preset("dicke", &params(&[("N", "3")])).unwrap();
        assert_eq!(m.dim, 4);
        let l = m.port_a();
        assert!((l[(1, 0)].re - 3f64.sqrt()).abs() < 1e-14);
        assert!((l[(2, 1)].re - 2.0).abs() < 1e-14);
        assert!((l[(3, 2)].re - 3f64.sqrt()).abs() < 1e-14);
        assert_eq!(m.initial_state[0], c(1.0, 0.0));
        assert_eq!(m.final_state[3], c(1.0, 0.0));
    }

    #[test]
    fn tavis_cummings_conserves_excitations() {
        let m = preset("tavis_cummings", &params(&[("N", "2")])).unwrap();
        assert_eq!(m.dim, 6);
        assert!(crate::linalg::is_hermitian(m.schedule.hamiltonian(0), 1e-14));
    }

    #[test]
    fn coherent_cavity_is_normalized() {
        let m = preset("cavity", &params(&[("state", "coherent"), ("alpha", "1")])).unwrap();
        assert!((m.initial_state.norm() - 1.0).abs() < 1e-12);
        assert!(m.dim >= 10 && m.dim <= 13);
        let fock = preset("cavity", &params(&[("N", "2")])).unwrap();
        assert_eq!(fock.dim, 5);
    }

    #[test]
    fn dark_levels_are_invisible_to_decay() {
        for name in ["dark_1", "dark_2", "dark_state_3"] {
            let m = preset(name, &Params::new()).unwrap();
            let l = m.port_a();
            for j in 2..m.dim {
                let ket = crate::linalg::basis_ket(m.dim, j);
                assert_eq!((l * ket).norm(), 0.0);
            }
        }
    }

    #[test]
    fn unknown_preset_fails() {
        assert!(matches!(preset("three_level", &Params::new()), Err(Error::InvalidArgument(_))));
    }
}

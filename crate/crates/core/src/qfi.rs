//! QFI of the emitted field assembled from correlators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::correlators::{sweep_triangle, RealPropagator, Sweeps};
use crate::dynamics::StepPropagators;
use crate::error::{Error, Result};
use crate::linalg::{self, dag, CMat};
use crate::model::{self, Mode, Params, SourceModel};

#[derive(Clone, Debug, Serialize)]
pub struct QfiReport {
    pub qfi: f64,
    /// Two-time contribution: `Q⁽²⁾` for identical sources, `∫∫Re(𝒞_{ab;ba} − 𝒞_{bb;aa})` otherwise.
    pub q2: f64,
    /// `∫ n(t) dt`, summed over ports, before normalization.
    pub flux_integral: f64,
    /// `(∫ Im C_{a;b})²`; zero for identical sources.
    pub coherence_term: f64,
    pub norm_sq: f64,
    pub grid: usize,
    pub mode: Mode,
    /// Loss channels were discarded, so `qfi` bounds the true value from above.
    pub upper_bound: bool,
}

/// Trapezoid weights on `0..=k` with spacing `dt`.
fn trap(k: usize, s: usize, dt: f64) -> f64 {
    if k == 0 {
        0.0
    } else if s == 0 || s == k {
        dt / 2.0
    } else {
        dt
    }
}

fn integrate(values: &[f64], dt: f64) -> f64 {
    let n = values.len() - 1;
    values.iter().enumerate().map(|(k, v)| trap(n, k, dt) * v).sum()
}

pub fn qfi(model: &SourceModel, props: &StepPropagators, grid: usize) -> Result<QfiReport> {
    match model.mode {
        Mode::IdenticalIndependentSources => qfi_identical(model, props, grid),
        Mode::SingleSourceBothPorts => qfi_general(model, props, grid),
    }
}

/// `QFI = 8(Q⁽²⁾ + 𝒩⁻²∫n)` with `Q⁽²⁾ = 2∫∫_{s≤t}(|C⁽ᵍ⁾|² − |C⁽ᵡ⁾|²)`.
pub fn qfi_identical(model: &SourceModel, props: &StepPropagators, grid: usize) -> Result<QfiReport> {
    if model.mode != Mode::IdenticalIndependentSources {
        return Err(Error::Validation("qfi_identical takes a single-port source".into()));
    }
    let sw = Sweeps::new(model, props, grid)?;
    let l = model.port_a();
    let ld = dag(l);
    let inserts: Vec<CMat> = sw.rho.iter().map(|r| l * r).collect();
    let g_read: Vec<CMat> = sw.proj.iter().map(|p| &ld * p).collect();
    let x_read: Vec<CMat> = sw.proj.iter().map(|p| p * l).collect();
    let rp = RealPropagator::new(&sw.props);
    let dt = sw.dt();
    let mut acc = 0.0;
    let outer = |k: usize| if k == 0 || k == grid { dt / 2.0 } else { dt };
    sweep_triangle(&rp, &inserts, &[g_read, x_read], |k, rows| {
        let inner: f64 =
            rows[0].iter().zip(&rows[1]).enumerate().map(|(s, (g, x))| trap(k, s, dt) * (g.norm_sqr() - x.norm_sqr())).sum();
        acc += outer(k) * inner;
    });
    let n4 = sw.norm_sq * sw.norm_sq;
    let q2 = 2.0 * acc / n4;
    let flux: Vec<f64> = (0..=grid).map(|k| linalg::trace_prod(&sw.proj[k], &(l * &sw.rho[k] * &ld)).re).collect();
    let flux_integral = integrate(&flux, dt);
    Ok(QfiReport {
        qfi: 8.0 * (q2 + flux_integral / sw.norm_sq),
        q2,
        flux_integral,
        coherence_term: 0.0,
        norm_sq: sw.norm_sq,
        grid,
        mode: model.mode,
        upper_bound: model.has_loss(),
    })
}

/// Both-port QFI `8∫∫Re(𝒞_{ab;ba} − 𝒞_{bb;aa}) + 4∫(C_{a;a} + C_{b;b}) − 16(∫Im C_{a;b})²`.
pub fn qfi_general(model: &SourceModel, props: &StepPropagators, grid: usize) -> Result<QfiReport> {
    let la = model.port_a().clone();
    let lb = model.port_b().ok_or_else(|| Error::Validation("qfi_general needs a PortB jump".into()))?.clone();
    let sw = Sweeps::new(model, props, grid)?;
    let (lad, lbd) = (dag(&la), dag(&lb));
    let inserts: Vec<CMat> = sw.rho.iter().map(|r| &la * r * &lbd).collect();
    let abba: Vec<CMat> = sw.proj.iter().map(|p| &lad * p * &lb).collect();
    let bbaa: Vec<CMat> = sw.proj.iter().map(|p| &lbd * p * &la).collect();
    let rp = RealPropagator::new(&sw.props);
    let dt = sw.dt();
    let mut acc = 0.0;
    let outer = |k: usize| if k == 0 || k == grid { dt / 2.0 } else { dt };
    sweep_triangle(&rp, &inserts, &[abba, bbaa], |k, rows| {
        let inner: f64 = rows[0].iter().zip(&rows[1]).enumerate().map(|(s, (x, y))| trap(k, s, dt) * (x.re - y.re)).sum();
        acc += outer(k) * inner;
    });
    let n2 = sw.norm_sq;
    let q2 = 2.0 * acc / n2;
    let mut flux = Vec::with_capacity(grid + 1);
    let mut cross = Vec::with_capacity(grid + 1);
    for k in 0..=grid {
        let (p, r) = (&sw.proj[k], &sw.rho[k]);
        let naa = linalg::trace_prod(p, &(&la * r * &lad)).re;
        let nbb = linalg::trace_prod(p, &(&lb * r * &lbd)).re;
        flux.push(naa + nbb);
        cross.push(linalg::trace_prod(p, &(&lb * r * &lad)).im / n2);
    }
    let flux_integral = integrate(&flux, dt);
    let coherence_term = integrate(&cross, dt).powi(2);
    Ok(QfiReport {
        qfi: 8.0 * q2 + 4.0 * flux_integral / n2 - 16.0 * coherence_term,
        q2,
        flux_integral,
        coherence_term,
        norm_sq: n2,
        grid,
        mode: model.mode,
        upper_bound: model.has_loss(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanRow {
    pub value: f64,
    pub report: Option<QfiReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    pub parameter: String,
    pub rows: Vec<ScanRow>,
    pub slope: Option<f64>,
    pub slope_ci95: Option<(f64, f64)>,
}

/// Evaluates the QFI of `preset` while varying `parameter`; failures are recorded per row.
///
/// `grid_for` picks the quadrature grid from the model; `None` uses every step.
pub fn qfi_scan(
    preset: &str,
    base: &Params,
    parameter: &str,
    values: &[f64],
    grid_for: Option<&(dyn Fn(&SourceModel) -> usize + Sync)>,
    seed: u64,
) -> Result<ScanReport> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty parameter grid".into()));
    }
    let rows: Vec<ScanRow> = values
        .par_iter()
        .map(|&value| {
            let mut p = base.clone();
            let text = if parameter == "N" || parameter == "k" { format!("{}", value.round() as i64) } else { value.to_string() };
            p.insert(parameter.to_string(), text);
            let run = || -> Result<QfiReport> {
                let m = model::preset(preset, &p)?;
                let props = StepPropagators::from_model(&m)?;
                let grid = grid_for.map(|f| f(&m)).unwrap_or(m.num_steps());
                qfi(&m, &props, grid)
            };
            match run() {
                Ok(r) => ScanRow { value, report: Some(r), error: None },
                Err(e) => ScanRow { value, report: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    let pts: Vec<(f64, f64)> =
        rows.iter().filter_map(|r| r.report.as_ref().filter(|q| q.qfi > 0.0).map(|q| (r.value, q.qfi))).collect();
    let (slope, ci) = loglog_fit(&pts, seed);
    Ok(ScanReport { parameter: parameter.to_string(), rows, slope, slope_ci95: ci })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let v: Vec<(f64, f64)> = pts.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if v.len() < 2 {
        return None;
    }
    let n = v.len() as f64;
    let mx = v.iter().map(|p| p.0).sum::<f64>() / n;
    let my = v.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = v.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    Some(v.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Slope with a 95% percentile bootstrap interval over resampled points.
pub fn loglog_fit(pts: &[(f64, f64)], seed: u64) -> (Option<f64>, Option<(f64, f64)>) {
    let slope = loglog_slope(pts);
    if slope.is_none() || pts.len() < 3 {
        return (slope, None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boots = Vec::with_capacity(2000);
    for _ in 0..2000 {
        let sample: Vec<(f64, f64)> = (0..pts.len()).map(|_| pts[rng.random_range(0..pts.len())]).collect();
        if let Some(s) = loglog_slope(&sample) {
            boots.push(s);
        }
    }
    if boots.is_empty() {
        return (slope, None);
    }
    boots.sort_by(f64::total_cmp);
    let q = |f: f64| boots[((boots.len() - 1) as f64 * f).round() as usize];
    (slope, Some((q(0.025), q(0.975))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;
    use crate::model::presets::params;

    fn run(name: &str, p: &[(&str, &str)]) -> QfiReport {
        let m = preset(name, &params(p)).unwrap();
        let props = StepPropagators::from_model(&m).unwrap();
        qfi(&m, &props, m.num_steps()).unwrap()
    }

    #[test]
    fn vacuum_has_no_information() {
        let r = run("cavity", &[("N", "0"), ("T", "2"), ("M", "20")]);
        assert_eq!(r.qfi, 0.0);
        let r = run("two_level", &[("omega", "0"), ("T", "2"), ("M", "20")]);
        assert_eq!(r.qfi, 0.0);
    }

    #[test]
    fn fock_two_cavity() {
        let r = run("cavity", &[("N", "2"), ("T", "20"), ("M", "1000")]);
        assert!((r.qfi - 48.0).abs() < 0.48, "{}", r.qfi);
    }

    #[test]
    fn single_photon_q2_vanishes_analytically() {
        // One photon: C⁽ᵡ⁾ ≡ 0 and Q⁽²⁾ = (∫|ψ|²)² = 1, so QFI = 8(1 + 1) = 16.
        let mut p = params(&[("omega", "0"), ("init", "e"), ("T", "20"), ("M", "2000")]);
        p.insert("final".into(), "g".into());
        let m = preset("two_level", &p).unwrap();
        let props = StepPropagators::from_model(&m).unwrap();
        let r = qfi_identical(&m, &props, 2000).unwrap();
        assert!((r.q2 - 1.0).abs() < 1e-3, "{}", r.q2);
        assert!((r.qfi - 16.0).abs() < 0.02);
    }

    #[test]
    fn product_model_reproduces_identical_qfi() {
        for (name, p) in [("two_level", vec![("T", "3"), ("M", "60")]), ("pi_level", vec![("T", "3"), ("M", "60")])] {
            let m = preset(name, &params(&p)).unwrap();
            let props = StepPropagators::from_model(&m).unwrap();
            let ident = qfi_identical(&m, &props, 60).unwrap();
            let joint = m.product_two_port().unwrap();
            let jp = StepPropagators::from_model(&joint).unwrap();
            let gen = qfi_general(&joint, &jp, 60).unwrap();
            assert!((gen.qfi - ident.qfi).abs() < 1e-6 * ident.qfi.max(1.0), "{name}: {} vs {}", gen.qfi, ident.qfi);
            assert!(gen.coherence_term < 1e-20);
        }
    }

    #[test]
    fn grid_must_divide_steps() {
        let m = preset("two_level", &params(&[("T", "1"), ("M", "10")])).unwrap();
        let props = StepPropagators::from_model(&m).unwrap();
        assert!(qfi(&m, &props, 4).is_err());
        assert!(qfi(&m, &props, 5).is_ok());
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = (1..6).map(|x| (x as f64, 3.0 * (x as f64).powi(2))).collect();
        let (s, ci) = loglog_fit(&pts, 7);
        assert!((s.unwrap() - 2.0).abs() < 1e-12);
        let (lo, hi) = ci.unwrap();
        assert!(lo <= 2.0 + 1e-12 && hi >= 2.0 - 1e-12);
    }
}

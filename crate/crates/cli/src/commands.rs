use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use qfif_core::adjoint::{self, ParamSchedule};
use qfif_core::correlators;
use qfif_core::dynamics::{self, StepPropagators};
use qfif_core::error::Error;
use qfif_core::linalg::traceless_hermitian_basis;
use qfif_core::measurement::{self, LambdaInput, PhotonNumberSupport};
use qfif_core::model::{self, Channel, Mode, Params, SourceModel};
use qfif_core::optimizer::{self, LevelStructure, OptimizerConfig};
use qfif_core::{mps, oracle, qfi};

use crate::output::{self, csv_number, Header};
use crate::{Cli, Command, Format, ModeArg, ModelArgs, Objective};

/// Why a run stopped: bad input (exit 2) or a failed computation (exit 1).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Compute { kind: &'static str, message: String },
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Compute { .. } => 1,
        }
    }

    pub fn diagnostic(&self) -> Value {
        match self {
            Self::Usage(m) => json!({ "error": { "kind": "usage", "message": m } }),
            Self::Compute { kind, message } => json!({ "error": { "kind": kind, "message": message } }),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Shape(_) | Error::Schema(_) | Error::Validation(_) | Error::InvalidArgument(_) => {
                return Self::Usage(e.to_string())
            }
            Error::NonFinite(_) => "non_finite",
            Error::PostselectionTooUnlikely { .. } => "postselection",
            Error::Numerical(_) => "numerical",
            Error::MemoryGuard(_) => "memory_guard",
            Error::AssumptionViolated { .. } => "assumption_violated",
        };
        Self::Compute { kind, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Compute { kind: "io", message: format!("{}: {e}", path.display()) }
}

type Outcome = Result<(), Failure>;

/// Resolved model together with the description that enters the config hash.
struct Resolved {
    model: SourceModel,
    description: Value,
}

fn parse_params(raw: &[String]) -> Result<Params, Failure> {
    let mut p = Params::new();
    for kv in raw {
        let (k, v) = kv
            .split_once('=')
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| Failure::Usage(format!("--param expects KEY=VALUE, got {kv:?}")))?;
        p.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(p)
}

fn resolve(args: &ModelArgs) -> Result<Resolved, Failure> {
    match (&args.preset, &args.config) {
        (Some(name), None) => {
            let p = parse_params(&args.params)?;
            let model = model::preset(name, &p)?;
            Ok(Resolved { model, description: json!({ "preset": name, "params": p }) })
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            let model = model::load_model(&text)?;
            Ok(Resolved { model, description: json!({ "config_text": text }) })
        }
        _ => Err(Failure::Usage("exactly one of --preset or --config is required".into())),
    }
}

fn check_grid(model: &SourceModel, grid: Option<usize>) -> Result<usize, Failure> {
    let m = model.num_steps();
    let g = grid.unwrap_or(m);
    if g == 0 || m % g != 0 {
        return Err(Failure::Usage(format!("--grid {g} must divide the step count {m}")));
    }
    Ok(g)
}

fn emit(path: Option<&Path>, text: &str) -> Outcome {
    output::write(path, text).map_err(|e| io_failure(path.unwrap_or(Path::new("<stdout>")), e))
}

fn emit_json(path: Option<&Path>, header: &Header, body: Value) -> Outcome {
    emit(path, &output::pretty(&header.document(body)))
}

/// Secondary artifact: explicit path, else a sibling of `--out`, else stderr.
fn emit_side(explicit: Option<&Path>, out: Option<&Path>, suffix: &str, text: &str) -> Outcome {
    let path: Option<PathBuf> = explicit.map(Path::to_path_buf).or_else(|| out.map(|o| output::sibling(o, suffix)));
    match path {
        Some(p) => fs::write(&p, text).map_err(|e| io_failure(&p, e)),
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let out = cli.out.as_deref();
    let seed = cli.seed;
    match &cli.command {
        Command::Qfi { model, grid, mode } => run_qfi(cli, model, *grid, *mode),
        Command::Scan { model, grid, summary } => run_scan(cli, model, *grid, summary.as_deref()),
        Command::Correlators { model, grid } => run_correlators(cli, model, *grid),
        Command::Spectrum { model, tol, gap_floor } => {
            let r = resolve(model)?;
            let config = json!({ "model": r.description, "tol": tol, "gap_floor": gap_floor });
            let header = Header::new("spectrum", seed, &config);
            let l = dynamics::build_liouvillian(&r.model);
            let report = dynamics::spectrum_with_floor(&l, *tol, *gap_floor)?;
            if cli.format == Some(Format::Csv) {
                let mut s = header.csv_comment();
                s.push_str("re,im\n");
                for z in &report.eigenvalues {
                    let _ = writeln!(s, "{},{}", csv_number(z.re), csv_number(z.im));
                }
                emit(out, &s)
            } else {
                emit_json(out, &header, serde_json::to_value(&report).expect("report serializes"))
            }
        }
        Command::Mps { model, epsilon, emit_circuit } => run_mps(cli, model, *epsilon, emit_circuit.as_deref()),
        Command::Optimize { structure, horizon, steps, trials, iters, step_size, init_scale, histogram } => {
            let structure = LevelStructure::parse(structure)?;
            let mut cfg = OptimizerConfig::default();
            if let Some(v) = iters {
                cfg.iters = *v;
            }
            if let Some(v) = step_size {
                cfg.step_size = *v;
            }
            if let Some(v) = init_scale {
                cfg.init_scale = *v;
            }
            if !(*horizon > 0.0 && horizon.is_finite()) {
                return Err(Failure::Usage(format!("--T must be positive, got {horizon}")));
            }
            let config = json!({
                "structure": structure.name(), "T": horizon, "steps": steps, "trials": trials, "optimizer": cfg,
            });
            let header = Header::new("optimize", seed, &config);
            let run = optimizer::optimize_q2(structure, *horizon, *steps, *trials, &cfg, seed)?;
            let values = run.final_values();
            if values.is_empty() {
                return Err(Failure::Compute { kind: "numerical", message: "every trial failed".into() });
            }
            let best_theta = run.best.map(|i| {
                let t = &run.trials[i].theta_final;
                (0..t.nrows()).map(|p| t.row(p).iter().cloned().collect::<Vec<f64>>()).collect::<Vec<_>>()
            });
            let mut body = serde_json::to_value(&run).expect("run serializes");
            body["structure"] = json!(structure.name());
            body["best_q2"] = json!(run.best_q2());
            body["best_theta"] = json!(best_theta);
            emit_json(out, &header, json!({ "run": body }))?;
            let mut hist = header.csv_comment();
            hist.push_str("bin_lo,bin_hi,count\n");
            for (lo, hi, n) in histogram_bins(&values, 20) {
                let _ = writeln!(hist, "{},{},{n}", csv_number(lo), csv_number(hi));
            }
            emit_side(histogram.as_deref(), out, ".hist.csv", &hist)
        }
        Command::GradCheck { model, objective, h } => run_grad_check(cli, model, *objective, *h),
        Command::Measure { check, counterexample, lie_closure } => {
            run_measure(cli, check.as_deref(), *counterexample, *lie_closure)
        }
        Command::OracleCheck => {
            let header = Header::new("oracle-check", seed, &json!({}));
            let cases = oracle::agreement_suite(seed)?;
            let pass = cases.iter().all(|c| c.pass);
            let max_dev = cases.iter().filter(|c| !c.separation).map(|c| c.deviation).fold(0.0, f64::max);
            let min_sep = cases.iter().filter(|c| c.separation).map(|c| c.deviation).fold(f64::INFINITY, f64::min);
            emit_json(
                out,
                &header,
                json!({
                    "pass": pass,
                    "max_deviation": max_dev,
                    "min_separation": if min_sep.is_finite() { json!(min_sep) } else { Value::Null },
                    "cases": cases,
                }),
            )?;
            if pass {
                Ok(())
            } else {
                Err(Failure::Compute { kind: "disagreement", message: "agreement suite failed".into() })
            }
        }
    }
}

fn run_qfi(cli: &Cli, args: &ModelArgs, grid: Option<usize>, mode: Option<ModeArg>) -> Outcome {
    let mut r = resolve(args)?;
    if let Some(m) = mode {
        r.model.mode = match m {
            ModeArg::Identical => Mode::IdenticalIndependentSources,
            ModeArg::Joint => Mode::SingleSourceBothPorts,
        };
        r.model.validate()?;
    }
    let grid = check_grid(&r.model, grid)?;
    let config = json!({ "model": r.description, "grid": grid, "mode": r.model.mode });
    let header = Header::new("qfi", cli.seed, &config);
    let props = StepPropagators::from_model(&r.model)?;
    let report = qfi::qfi(&r.model, &props, grid)?;
    if cli.format == Some(Format::Csv) {
        let mut s = header.csv_comment();
        s.push_str("qfi,q2,flux_integral,coherence_term,norm_sq,grid,upper_bound\n");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            csv_number(report.qfi),
            csv_number(report.q2),
            csv_number(report.flux_integral),
            csv_number(report.coherence_term),
            csv_number(report.norm_sq),
            report.grid,
            report.upper_bound
        );
        emit(cli.out.as_deref(), &s)
    } else {
        emit_json(cli.out.as_deref(), &header, serde_json::to_value(&report).expect("report serializes"))
    }
}

/// Values of a scan parameter: `a..b` (integer steps), `a..b:n` (n points) or `x,y,...`.
pub fn parse_range(text: &str) -> Result<Vec<f64>, String> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("bad number {s:?} in {text:?}"));
    if let Some((a, rest)) = text.split_once("..") {
        let (b, n) = match rest.split_once(':') {
            Some((b, n)) => (b, Some(n.trim().parse::<usize>().map_err(|_| format!("bad point count in {text:?}"))?)),
            None => (rest, None),
        };
        let (a, b) = (num(a)?, num(b)?);
        if b < a {
            return Err(format!("empty range {text:?}"));
        }
        return match n {
            Some(0) => Err(format!("empty range {text:?}")),
            Some(1) => Ok(vec![a]),
            Some(n) => Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()),
            None => {
                let steps = (b - a).floor() as usize;
                Ok((0..=steps).map(|i| a + i as f64).collect())
            }
        };
    }
    text.split(',').map(num).collect()
}

fn run_scan(cli: &Cli, args: &ModelArgs, grid: Option<usize>, summary: Option<&Path>) -> Outcome {
    let Some(preset) = &args.preset else {
        return Err(Failure::Usage("scan needs --preset with one ranged --param".into()));
    };
    let all = parse_params(&args.params)?;
    let ranged: Vec<_> = all.iter().filter(|(_, v)| v.contains("..") || v.contains(',')).collect();
    let [(name, spec)] = ranged.as_slice() else {
        return Err(Failure::Usage(format!("scan needs exactly one ranged --param, found {}", ranged.len())));
    };
    let values = parse_range(spec).map_err(Failure::Usage)?;
    let mut base = all.clone();
    base.remove(*name);
    let config = json!({ "preset": preset, "params": all, "grid": grid });
    let header = Header::new("scan", cli.seed, &config);
    let grid_fn = grid.map(|g| move |_: &SourceModel| g);
    let report = qfi::qfi_scan(
        preset,
        &base,
        name,
        &values,
        grid_fn.as_ref().map(|f| f as &(dyn Fn(&SourceModel) -> usize + Sync)),
        cli.seed,
    )?;
    if report.rows.iter().all(|r| r.report.is_none()) {
        let first = report.rows.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Failure::Compute { kind: "scan", message: format!("every scan point failed: {first}") });
    }
    let out = cli.out.as_deref();
    if cli.format == Some(Format::Json) {
        return emit_json(out, &header, json!({ "scan": report }));
    }
    let mut s = header.csv_comment();
    s.push_str("param,qfi,q2,flux,norm_sq\n");
    for row in &report.rows {
        let f = |g: fn(&qfi::QfiReport) -> f64| csv_number(row.report.as_ref().map(g).unwrap_or(f64::NAN));
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_number(row.value),
            f(|r| r.qfi),
            f(|r| r.q2),
            f(|r| r.flux_integral),
            f(|r| r.norm_sq)
        );
    }
    emit(out, &s)?;
    let errors: Vec<Value> = report
        .rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| json!({ "value": r.value, "error": e })))
        .collect();
    let doc = header.document(json!({
        "parameter": report.parameter,
        "points": report.rows.len(),
        "slope": report.slope,
        "slope_ci95": report.slope_ci95,
        "errors": errors,
    }));
    emit_side(summary, out, ".summary.json", &output::pretty(&doc))
}

fn run_correlators(cli: &Cli, args: &ModelArgs, grid: Option<usize>) -> Outcome {
    let r = resolve(args)?;
    let grid = check_grid(&r.model, grid)?;
    let config = json!({ "model": r.description, "grid": grid });
    let header = Header::new("correlators", cli.seed, &config);
    let props = StepPropagators::from_model(&r.model)?;
    let g = correlators::two_point_grid(&r.model, &props, grid)?;
    let out = cli.out.as_deref();
    let n = g.times.len();
    if cli.format == Some(Format::Json) {
        let tri = |t: &correlators::Triangle| -> Vec<Vec<[f64; 2]>> {
            (0..n).map(|k| (0..=k).map(|s| [t.get(k, s).re, t.get(k, s).im]).collect()).collect()
        };
        return emit_json(
            out,
            &header,
            json!({
                "dt": g.dt, "times": g.times, "norm_sq": g.norm_sq,
                "cg": tri(&g.cg), "chi": tri(&g.cchi), "flux": g.flux,
            }),
        );
    }
    let tri_csv = |t: &correlators::Triangle| {
        let mut s = String::from("t,s,re,im\n");
        for k in 0..n {
            for j in 0..=k {
                let z = t.get(k, j);
                let _ =
                    writeln!(s, "{},{},{},{}", csv_number(g.times[k]), csv_number(g.times[j]), csv_number(z.re), csv_number(z.im));
            }
        }
        s
    };
    let mut flux = String::from("t,n\n");
    for (t, v) in g.times.iter().zip(&g.flux) {
        let _ = writeln!(flux, "{},{}", csv_number(*t), csv_number(*v));
    }
    let parts = [("cg", tri_csv(&g.cg)), ("chi", tri_csv(&g.cchi)), ("flux", flux)];
    match out {
        Some(prefix) => {
            for (name, body) in &parts {
                let path = output::sibling(prefix, &format!("_{name}.csv"));
                fs::write(&path, format!("{}{body}", header.csv_comment())).map_err(|e| io_failure(&path, e))?;
            }
            Ok(())
        }
        None => {
            let mut s = header.csv_comment();
            for (name, body) in &parts {
                let _ = write!(s, "# section {name}\n{body}");
            }
            emit(None, &s)
        }
    }
}

fn run_mps(cli: &Cli, args: &ModelArgs, epsilon: Option<f64>, circuit_path: Option<&Path>) -> Outcome {
    let r = resolve(args)?;
    let eps = epsilon.unwrap_or_else(|| r.model.eps());
    let config = json!({ "model": r.description, "epsilon": eps, "emit_circuit": circuit_path.is_some() });
    let header = Header::new("mps", cli.seed, &config);
    let state = mps::build_mps(&r.model, eps)?;
    let binned = mps::binned_qfi(&state)?;
    let mut photons = serde_json::Map::new();
    for (ch, key) in [(Channel::PortA, "port_a"), (Channel::PortB, "port_b")] {
        if state.channel_index(ch).is_some() {
            photons.insert(key.into(), json!(state.photon_number(ch)?));
        }
    }
    let body = json!({
        "num_bins": state.num_bins,
        "bond_dim": state.dim,
        "local_dim": state.local_dim(),
        "epsilon": state.eps,
        "isometry_residual": state.isometry_residual(),
        "norm_sq": state.norm_sq(),
        "photon_number": photons,
        "qfi": binned,
        "discretization_error_estimate": mps::error_estimate(&r.model, eps),
    });
    emit_json(cli.out.as_deref(), &header, body)?;
    if let Some(path) = circuit_path {
        let circuit = mps::reabsorption_circuit(&state)?;
        let doc = header.document(json!({ "circuit": circuit.to_json() }));
        fs::write(path, output::pretty(&doc)).map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

fn run_grad_check(cli: &Cli, args: &ModelArgs, objective: Objective, h: f64) -> Outcome {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Failure::Usage(format!("--h must be positive, got {h}")));
    }
    let r = resolve(args)?;
    let model = &r.model;
    let (params, theta_source) = match model.schedule.params {
        Some(_) => (ParamSchedule::from_model(model)?, "config"),
        None => {
            let gens = traceless_hermitian_basis(model.dim);
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let theta = DMatrix::from_fn(model.num_steps(), gens.len(), |_, _| rng.random_range(-1.0..=1.0));
            (ParamSchedule::new(gens, theta, model.eps())?, "random")
        }
    };
    let config = json!({ "model": r.description, "objective": objective, "h": h });
    let header = Header::new("grad-check", cli.seed, &config);
    let (adj, fd) = match objective {
        Objective::Q2 => (
            adjoint::grad_q2(model, &params)?,
            adjoint::finite_difference(&params, h, |q| {
                let m = q.apply_to(model)?;
                Ok(mps::mps_qfi(&mps::build_mps(&m, m.eps())?)?.q2)
            })?,
        ),
        Objective::Norm => (
            adjoint::grad_norm_sq(model, &params)?,
            adjoint::finite_difference(&params, h, |q| {
                let m = q.apply_to(model)?;
                correlators::normalization(&m, &StepPropagators::kraus(&m)?)
            })?,
        ),
    };
    let body = json!({
        "objective": adj.objective,
        "objective_finite_difference": fd.objective,
        "max_rel_err": adjoint::relative_error(&adj.gradient, &fd.gradient),
        "max_abs_err": (&adj.gradient - &fd.gradient).amax(),
        "theta": theta_source,
        "steps": params.num_steps(),
        "generators": params.num_generators(),
        "timings": { "adjoint_s": adj.wall_time, "finite_difference_s": fd.wall_time },
    });
    emit_json(cli.out.as_deref(), &header, body)
}

fn run_measure(cli: &Cli, check: Option<&Path>, counterexample: bool, lie: Option<usize>) -> Outcome {
    let out = cli.out.as_deref();
    if let Some(path) = check {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let support: PhotonNumberSupport =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let header = Header::new("measure", cli.seed, &json!({ "check": support }));
        let report = measurement::check_number_optimality(&support);
        return emit_json(out, &header, json!({ "support": support, "number_check": report }));
    }
    if counterexample {
        const POINTS: usize = 32;
        const T: f64 = 10.0;
        const CENTER: f64 = 5.0;
        const WIDTH: f64 = 2.0;
        let header = Header::new(
            "measure",
            cli.seed,
            &json!({ "counterexample": { "points": POINTS, "T": T, "center": CENTER, "width": WIDTH } }),
        );
        let (grid, dt) = measurement::midpoint_grid(POINTS, T);
        let f = measurement::gaussian_kernel(&grid, CENTER, WIDTH);
        let psi = measurement::entangled_counterexample(&f, grid, dt)?;
        let lambda = measurement::lambda_analysis(LambdaInput::Joint(&psi), true)?;
        return emit_json(
            out,
            &header,
            json!({
                "norm_sq": psi.norm_sq(),
                "generator_mean": psi.generator_mean(),
                "lambda": lambda,
            }),
        );
    }
    if let Some(d) = lie {
        let header = Header::new("measure", cli.seed, &json!({ "lie_closure": d }));
        let g = measurement::blockade_generators(d)?;
        let report = measurement::lie_closure(&g.all())?;
        let n = report.ambient_dim;
        let controllable = report.closure_dim == n * n - 1;
        return emit_json(
            out,
            &header,
            json!({
                "max_photons": d,
                "su_dim": n * n - 1,
                "closure": report,
                "controllable": controllable,
            }),
        );
    }
    Err(Failure::Usage("measure needs one of --check, --counterexample or --lie-closure".into()))
}

/// `bins` equal-width bins spanning the data.
pub fn histogram_bins(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts.into_iter().enumerate().map(|(i, n)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, n)).collect()
}

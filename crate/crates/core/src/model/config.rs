//! JSON model configuration.

use nalgebra::DMatrix;
use serde::Deserialize;

use super::{Channel, JumpOperator, Mode, Schedule, SourceModel};
use crate::error::{Error, Result};
use crate::linalg::{c, CMat, CVec};

type RawMatrix = Vec<Vec<[f64; 2]>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJump {
    matrix: RawMatrix,
    channel: Channel,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    dimension: usize,
    steps: usize,
    horizon: f64,
    #[serde(default)]
    epsilon: Option<f64>,
    #[serde(default)]
    generators: Option<Vec<RawMatrix>>,
    #[serde(default)]
    theta: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    hamiltonians: Option<Vec<RawMatrix>>,
    jumps: Vec<RawJump>,
    initial_state: Vec<[f64; 2]>,
    final_state: Vec<[f64; 2]>,
    #[serde(default = "default_mode")]
    mode: Mode,
    #[serde(default)]
    norm_floor: Option<f64>,
}

fn default_mode() -> Mode {
    Mode::IdenticalIndependentSources
}

fn matrix(raw: &RawMatrix, d: usize, what: &str) -> Result<CMat> {
    if raw.len() != d || raw.iter().any(|r| r.len() != d) {
        return Err(Error::Schema(format!("{what} must be {d}x{d}")));
    }
    Ok(CMat::from_fn(d, d, |i, j| c(raw[i][j][0], raw[i][j][1])))
}

fn vector(raw: &[[f64; 2]], d: usize, what: &str) -> Result<CVec> {
    if raw.len() != d {
        return Err(Error::Schema(format!("{what} must have length {d}")));
    }
    Ok(CVec::from_iterator(d, raw.iter().map(|z| c(z[0], z[1]))))
}

/// Parses and validates a JSON model description.
pub fn load_model(text: &str) -> Result<SourceModel> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let d = raw.dimension;
    if d == 0 || raw.steps == 0 {
        return Err(Error::Schema("dimension and steps must be positive".into()));
    }
    if !(raw.horizon > 0.0 && raw.horizon.is_finite()) {
        return Err(Error::Schema("horizon must be positive".into()));
    }
    if let Some(eps) = raw.epsilon {
        if (eps * raw.steps as f64 - raw.horizon).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "epsilon x steps = {} differs from horizon {}",
                eps * raw.steps as f64,
                raw.horizon
            )));
        }
    }
    let schedule = match (&raw.hamiltonians, &raw.generators, &raw.theta) {
        (Some(hs), None, None) => {
            let mats = hs.iter().enumerate().map(|(k, h)| matrix(h, d, &format!("hamiltonians[{k}]"))).collect::<Result<Vec<_>>>()?;
            match mats.len() {
                1 => Schedule::constant(mats[0].clone(), raw.steps, raw.horizon)?,
                n if n == raw.steps => Schedule::explicit(mats, raw.horizon)?,
                n => return Err(Error::Schema(format!("{n} hamiltonians for {} steps", raw.steps))),
            }
        }
        (None, Some(gs), Some(theta)) => {
            let gens = gs.iter().enumerate().map(|(k, g)| matrix(g, d, &format!("generators[{k}]"))).collect::<Result<Vec<_>>>()?;
            for (k, g) in gens.iter().enumerate() {
                if !crate::linalg::is_hermitian(g, crate::linalg::tol::HERMITIAN) {
                    return Err(Error::Validation(format!("generators[{k}] is not Hermitian")));
                }
            }
            if theta.len() != raw.steps || theta.iter().any(|r| r.len() != gens.len()) {
                return Err(Error::Schema(format!("theta must be {}x{}", raw.steps, gens.len())));
            }
            let th = DMatrix::from_fn(raw.steps, gens.len(), |p, j| theta[p][j]);
            Schedule::parametrized(gens, th, raw.horizon)?
        }
        (None, None, None) => Schedule::constant(CMat::zeros(d, d), raw.steps, raw.horizon)?,
        _ => return Err(Error::Schema("give either hamiltonians or generators with theta".into())),
    };
    let jumps = raw
        .jumps
        .iter()
        .enumerate()
        .map(|(k, j)| Ok(JumpOperator::new(matrix(&j.matrix, d, &format!("jumps[{k}]"))?, j.channel)))
        .collect::<Result<Vec<_>>>()?;
    let phi_i = vector(&raw.initial_state, d, "initial_state")?;
    let phi_f = vector(&raw.final_state, d, "final_state")?;
    let mut m = SourceModel::new(schedule, jumps, phi_i, phi_f, raw.mode)?;
    if let Some(f) = raw.norm_floor {
        m.norm_floor = f;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LEVEL: &str = r#"{
        "dimension": 2, "steps": 500, "horizon": 10.0,
        "hamiltonians": [[[[0,0],[1,0]],[[1,0],[0,0]]]],
        "jumps": [{"matrix": [[[0,0],[1,0]],[[0,0],[0,0]]], "channel": "PortA"}],
        "initial_state": [[1,0],[0,0]], "final_state": [[1,0],[0,0]]
    }"#;

    #[test]
    fn two_level_config_loads() {
        let m = load_model(TWO_LEVEL).unwrap();
        assert_eq!(m.dim, 2);
        assert_eq!(m.num_steps(), 500);
        assert!((m.eps() - 0.02).abs() < 1e-15);
        assert_eq!(m.port_a()[(0, 1)], c(1.0, 0.0));
    }

    #[test]
    fn zero_initial_state_is_rejected() {
        let bad = TWO_LEVEL.replace(r#""initial_state": [[1,0],[0,0]]"#, r#""initial_state": [[0,0],[0,0]]"#);
        assert!(matches!(load_model(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn inconsistent_epsilon_is_rejected() {
        let bad = TWO_LEVEL.replace(r#""horizon": 10.0,"#, r#""horizon": 10.0, "epsilon": 0.03,"#);
        assert!(matches!(load_model(&bad), Err(Error::Validation(_))));
        let good = TWO_LEVEL.replace(r#""horizon": 10.0,"#, r#""horizon": 10.0, "epsilon": 0.02,"#);
        assert!(load_model(&good).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let bad = TWO_LEVEL.replace(r#""dimension": 2"#, r#""dimension": 3"#);
        assert!(matches!(load_model(&bad), Err(Error::Schema(_))));
    }

    #[test]
    fn non_hermitian_generator_is_rejected() {
        let text = r#"{
            "dimension": 2, "steps": 2, "horizon": 1.0,
            "generators": [[[[0,0],[1,0]],[[0,0],[0,0]]]], "theta": [[1.0],[0.5]],
            "jumps": [{"matrix": [[[0,0],[1,0]],[[0,0],[0,0]]], "channel": "PortA"}],
            "initial_state": [[1,0],[0,0]], "final_state": [[1,0],[0,0]]
        }"#;
        assert!(matches!(load_model(text), Err(Error::Validation(_))));
    }
}

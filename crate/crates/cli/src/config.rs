//! Flat TOML run configuration.
//!
//! A file may set any subset of the keys below; everything else takes the
//! scenario default. Unknown keys are rejected.
//!
//! | key          | type            | meaning                                         |
//! |--------------|-----------------|-------------------------------------------------|
//! | `scenario`   | string          | `converge`, `longtime`, `q5spot` or `custom`    |
//! | `schemes`    | list of strings | `MP`, `BE`, `TL1`, `TL2` or `theta<value>`      |
//! | `scheme`     | string          | shorthand for a one-element `schemes`           |
//! | `theta`      | float in (0, 1] | with `scheme = "theta"`                         |
//! | `taus`       | list of floats  | time steps; ignored by `converge` (τ = h)       |
//! | `tau`        | float           | shorthand for a one-element `taus`              |
//! | `mesh`       | integer         | cells per side (finest level for `converge`)    |
//! | `degree`     | 1 or 2          | polynomial degree                               |
//! | `t_final`    | float           | final time                                      |
//! | `tol`        | float           | subiteration tolerance                          |
//! | `max_iters`  | integer         | subiteration cap                                |
//! | `problem`    | string          | `custom` only: `mms`, `q5spot` or `closed`      |
//! | `snapshots`  | list of floats  | saturation dump times (`q5spot`)               |
//! | `execution`  | string          | `parallel` or `serial`                          |
//! | `out`        | string          | output directory                                |

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use twophase_core::par::Execution;
use twophase_core::timestepping::{self, SchemeKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Converge,
    Longtime,
    Q5spot,
    Custom,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Converge => "converge",
            Scenario::Longtime => "longtime",
            Scenario::Q5spot => "q5spot",
            Scenario::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    /// Manufactured solution on the unit square, Log capillary model.
    Mms,
    /// Quarter-five-spot flood, Brooks–Corey model.
    Q5spot,
    /// Closed unit square without sources, Log capillary model.
    Closed,
}

/// The file as written: every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub scenario: Option<Scenario>,
    pub scheme: Option<String>,
    pub schemes: Option<Vec<String>>,
    pub theta: Option<f64>,
    pub tau: Option<f64>,
    pub taus: Option<Vec<f64>>,
    pub mesh: Option<usize>,
    pub degree: Option<usize>,
    pub t_final: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub problem: Option<ProblemKind>,
    pub snapshots: Option<Vec<f64>>,
    pub execution: Option<String>,
    pub out: Option<String>,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string().trim_end().to_string())
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<String>,
    pub scheme: Option<String>,
    pub tau: Option<f64>,
    pub mesh: Option<usize>,
    pub degree: Option<usize>,
}

/// Fully resolved configuration; this is what gets echoed next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub schemes: Vec<String>,
    pub taus: Vec<f64>,
    pub mesh: usize,
    pub degree: usize,
    pub t_final: f64,
    pub tol: f64,
    pub max_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemKind>,
    pub snapshots: Vec<f64>,
    pub execution: String,
    pub out: String,
}

impl RunConfig {
    /// Merges file and flags over the defaults of `scenario` (or of the
    /// file's own scenario when `scenario` is `None`).
    pub fn resolve(scenario: Option<Scenario>, raw: RawConfig, flags: Overrides) -> Result<Self, ConfigError> {
        let scenario = match (scenario, raw.scenario) {
            (Some(cmd), Some(file)) if cmd != file => {
                return Err(invalid("scenario", format!("file selects `{file}` but the command is `{cmd}`")));
            }
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => Scenario::Custom,
        };
        if scenario != Scenario::Custom && raw.problem.is_some() {
            return Err(invalid("problem", "only the custom scenario takes a problem"));
        }
        let problem = (scenario == Scenario::Custom).then(|| raw.problem.unwrap_or(ProblemKind::Mms));

        let schemes = resolve_schemes(scenario, &raw, flags.scheme.as_deref())?;

        let default_taus: Vec<f64> = match (scenario, problem) {
            (Scenario::Converge, _) => vec![],
            (Scenario::Longtime, _) => vec![0.05, 1.0],
            (Scenario::Q5spot, _) => vec![1.0, 0.5, 0.25],
            (_, Some(ProblemKind::Q5spot)) => vec![1.0],
            (_, Some(ProblemKind::Closed)) => vec![0.01],
            _ => vec![0.0625],
        };
        let taus = match (flags.tau, raw.tau, raw.taus) {
            (Some(t), _, _) => vec![t],
            (None, Some(_), Some(_)) => return Err(invalid("tau", "set either `tau` or `taus`, not both")),
            (None, Some(t), None) => vec![t],
            (None, None, Some(ts)) => ts,
            (None, None, None) => default_taus,
        };
        if scenario == Scenario::Converge && !taus.is_empty() {
            return Err(invalid("tau", "converge ties the step to the mesh size (τ = h)"));
        }
        if scenario != Scenario::Converge && taus.is_empty() {
            return Err(invalid("taus", "at least one time step is required"));
        }
        if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(invalid("taus", format!("time steps must be positive, got {t}")));
        }
        if scenario == Scenario::Custom && (schemes.len() != 1 || taus.len() != 1) {
            return Err(invalid("schemes", "a custom run takes exactly one scheme and one tau"));
        }

        if problem == Some(ProblemKind::Closed) && schemes != ["MP"] {
            return Err(invalid("schemes", "the closed-system energy run is defined for MP only"));
        }

        let q5 = scenario == Scenario::Q5spot || problem == Some(ProblemKind::Q5spot);
        let closed = problem == Some(ProblemKind::Closed);
        let mesh = flags.mesh.or(raw.mesh).unwrap_or(match scenario {
            Scenario::Converge => 128,
            Scenario::Longtime => 64,
            _ if q5 => 38,
            _ if closed => 8,
            _ => 16,
        });
        if mesh == 0 {
            return Err(invalid("mesh", "must be positive"));
        }
        if scenario == Scenario::Converge && (mesh < 2 || !mesh.is_power_of_two()) {
            return Err(invalid("mesh", "converge needs a power of two of at least 2"));
        }
        let degree = flags.degree.or(raw.degree).unwrap_or(if q5 { 2 } else { 1 });
        if !(1..=2).contains(&degree) {
            return Err(invalid("degree", format!("must be 1 or 2, got {degree}")));
        }
        let t_final = raw.t_final.unwrap_or(match scenario {
            Scenario::Longtime => 20.0,
            _ if q5 => 750.0,
            _ if closed => 0.04,
            _ => 1.0,
        });
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(invalid("t_final", "must be positive"));
        }
        let tol = raw.tol.unwrap_or(timestepping::DEFAULT_TOL);
        if !(tol.is_finite() && tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        let max_iters = raw.max_iters.unwrap_or(timestepping::DEFAULT_MAX_ITERS);
        if max_iters == 0 {
            return Err(invalid("max_iters", "must be positive"));
        }
        let snapshots = raw
            .snapshots
            .unwrap_or_else(|| if q5 { vec![250.0, 500.0, 750.0] } else { vec![] });
        let execution = raw.execution.unwrap_or_else(|| "parallel".into());
        parse_execution(&execution)?;
        let out = flags.out.or(raw.out).unwrap_or_else(|| format!("out/{scenario}"));

        Ok(RunConfig {
            scenario,
            schemes,
            taus,
            mesh,
            degree,
            t_final,
            tol,
            max_iters,
            problem,
            snapshots,
            execution,
            out,
        })
    }

    pub fn scheme_kinds(&self) -> Vec<SchemeKind> {
        self.schemes
            .iter()
            .map(|s| SchemeKind::parse(s).expect("validated in resolve"))
            .collect()
    }

    pub fn exec(&self) -> Execution {
        parse_execution(&self.execution).expect("validated in resolve")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn resolve_schemes(scenario: Scenario, raw: &RawConfig, flag: Option<&str>) -> Result<Vec<String>, ConfigError> {
    let names: Vec<String> = match (flag, &raw.scheme, &raw.schemes) {
        (Some(s), _, _) => vec![s.to_string()],
        (None, Some(_), Some(_)) => return Err(invalid("scheme", "set either `scheme` or `schemes`, not both")),
        (None, Some(s), None) => vec![s.clone()],
        (None, None, Some(v)) => v.clone(),
        (None, None, None) if scenario == Scenario::Custom => vec!["MP".into()],
        (None, None, None) => SchemeKind::STANDARD.iter().map(|k| k.name()).collect(),
    };
    if names.is_empty() {
        return Err(invalid("schemes", "list is empty"));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let name = if name.trim().eq_ignore_ascii_case("theta") {
            let t = raw.theta.ok_or_else(|| invalid("theta", "required when the scheme is `theta`"))?;
            format!("theta{t}")
        } else {
            name
        };
        let kind = SchemeKind::parse(&name).ok_or_else(|| invalid("schemes", format!("unknown scheme `{name}`")))?;
        if let Some(t) = kind.theta() {
            if !(t > 0.0 && t <= 1.0) {
                return Err(invalid("theta", format!("must lie in (0, 1], got {t}")));
            }
        }
        out.push(kind.name());
    }
    Ok(out)
}

fn parse_execution(s: &str) -> Result<Execution, ConfigError> {
    match s {
        "parallel" => Ok(Execution::Parallel),
        "serial" => Ok(Execution::Serial),
        other => Err(invalid("execution", format!("expected `parallel` or `serial`, got `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(scenario: Option<Scenario>, text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::resolve(scenario, RawConfig::parse(text).unwrap(), Overrides::default())
    }

    #[test]
    fn scenario_defaults() {
        let c = resolve(Some(Scenario::Converge), "").unwrap();
        assert_eq!(c.schemes, ["MP", "BE", "TL1", "TL2"]);
        assert_eq!((c.mesh, c.degree, c.t_final, c.tol), (128, 1, 1.0, 1e-5));
        assert!(c.taus.is_empty());

        let q = resolve(Some(Scenario::Q5spot), "").unwrap();
        assert_eq!((q.mesh, q.degree, q.t_final), (38, 2, 750.0));
        assert_eq!(q.taus, [1.0, 0.5, 0.25]);

        let r = resolve(None, "").unwrap();
        assert_eq!(r.scenario, Scenario::Custom);
        assert_eq!(r.problem, Some(ProblemKind::Mms));
        assert_eq!(r.schemes, ["MP"]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RawConfig::parse("tau = 0.1\nsteps = 3\n").unwrap_err();
        assert!(err.contains("steps"), "{err}");
    }

    #[test]
    fn theta_scheme_and_overrides() {
        let raw = RawConfig::parse("scheme = \"theta\"\ntheta = 0.7\ntau = 0.1").unwrap();
        let c = RunConfig::resolve(None, raw, Overrides::default()).unwrap();
        assert_eq!(c.schemes, ["theta0.7"]);
        let flags = Overrides {
            scheme: Some("tl2".into()),
            mesh: Some(4),
            ..Default::default()
        };
        let c = RunConfig::resolve(None, RawConfig::default(), flags).unwrap();
        assert_eq!((c.schemes[0].as_str(), c.mesh), ("TL2", 4));
    }

    #[test]
    fn invalid_values_name_their_key() {
        let cases = [
            ("degree = 3", "degree"),
            ("scheme = \"rk4\"", "schemes"),
            ("scheme = \"theta\"", "theta"),
            ("tau = -1.0", "taus"),
            ("scenario = \"q5spot\"\nproblem = \"mms\"", "problem"),
            ("execution = \"gpu\"", "execution"),
        ];
        for (text, key) in cases {
            match resolve(None, text) {
                Err(ConfigError::Invalid { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(resolve(Some(Scenario::Converge), "tau = 0.1").is_err());
        assert!(resolve(Some(Scenario::Converge), "mesh = 48").is_err());
        assert!(resolve(Some(Scenario::Longtime), "scenario = \"q5spot\"").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = resolve(Some(Scenario::Longtime), "mesh = 8").unwrap();
        let again = resolve(None, &c.to_toml()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn presets_resolve() {
        let presets = [
            (include_str!("../presets/converge.toml"), Scenario::Converge),
            (include_str!("../presets/longtime.toml"), Scenario::Longtime),
            (include_str!("../presets/q5spot.toml"), Scenario::Q5spot),
            (include_str!("../presets/q5spot_q1.toml"), Scenario::Q5spot),
            (include_str!("../presets/dissipation.toml"), Scenario::Custom),
            (include_str!("../presets/mms_single.toml"), Scenario::Custom),
        ];
        for (text, scenario) in presets {
            let c = resolve(None, text).unwrap_or_else(|e| panic!("{e}\n{text}"));
            assert_eq!(c.scenario, scenario);
        }
    }
}

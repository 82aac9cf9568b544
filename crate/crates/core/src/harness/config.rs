use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::policies::Policy;
use crate::protocols::{Experiment, ExperimentScript, BUILTIN_SCRIPTS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExperimentRef {
    /// `wigner`, `deutsch` or `fr`.
    Builtin(String),
    /// A script in TOML, relative paths resolved against the config file.
    Custom { custom: PathBuf },
}

impl ExperimentRef {
    /// Builtin names pass through; anything ending in `.toml` is a path.
    pub fn parse(s: &str) -> Self {
        if s.ends_with(".toml") {
            ExperimentRef::Custom { custom: PathBuf::from(s) }
        } else {
            ExperimentRef::Builtin(s.to_string())
        }
    }

    pub fn load(&self, base: Option<&Path>) -> Result<ExperimentScript, HarnessError> {
        match self {
            ExperimentRef::Builtin(name) => ExperimentScript::builtin(name).ok_or_else(|| {
                HarnessError::Config(format!("experiment: unknown `{name}` (expected one of {BUILTIN_SCRIPTS:?} or a .toml path)"))
            }),
            ExperimentRef::Custom { custom } => {
                let path = match base {
                    Some(b) if custom.is_relative() => b.join(custom),
                    _ => custom.clone(),
                };
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| HarnessError::Config(format!("experiment: cannot read {}: {e}", path.display())))?;
                ExperimentScript::from_toml(&text)
                    .map_err(|e| HarnessError::Config(format!("experiment {}: {e}", path.display())))
            }
        }
    }
}

impl fmt::Display for ExperimentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentRef::Builtin(n) => f.write_str(n),
            ExperimentRef::Custom { custom } => write!(f, "{}", custom.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyRef {
    Named(String),
    Inline(Policy),
}

impl PolicyRef {
    pub fn resolve(&self) -> Result<Policy, HarnessError> {
        match self {
            PolicyRef::Named(n) => Policy::builtin(n).ok_or_else(|| {
                HarnessError::Config(format!(
                    "policy: unknown `{n}` (expected one of {:?} or an inline table)",
                    crate::policies::BUILTIN_POLICIES
                ))
            }),
            PolicyRef::Inline(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sample,
    Exact,
    Matrix,
}

impl std::str::FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sample" => Ok(Mode::Sample),
            "exact" => Ok(Mode::Exact),
            "matrix" => Ok(Mode::Matrix),
            _ => Err(HarnessError::Config(format!("mode: unknown `{s}` (expected sample, exact or matrix)"))),
        }
    }
}

fn one() -> u64 {
    1
}

fn unitary() -> PolicyRef {
    PolicyRef::Named("unitary".into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentRef,
    #[serde(default = "unitary")]
    pub policy: PolicyRef,
    #[serde(default = "one")]
    pub runs: u64,
    #[serde(default)]
    pub seed: u64,
    /// Conjunction such as `u=ok,w=ok` (also accepts `∧` or `&&`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub postselect: Option<String>,
    #[serde(default)]
    pub mode: Mode,
}

impl RunConfig {
    pub fn new(experiment: &str, policy: &str) -> Self {
        Self {
            experiment: ExperimentRef::parse(experiment),
            policy: PolicyRef::Named(policy.into()),
            runs: 1,
            seed: 0,
            postselect: None,
            mode: Mode::Sample,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if config.runs == 0 {
            return Err(HarnessError::Config("runs: must be at least 1".into()));
        }
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<(Self, Option<PathBuf>), HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((config, path.parent().map(Path::to_path_buf)))
    }
}

/// Parses a post-selection predicate and checks it against the script.
pub fn parse_postselect(text: &str, experiment: &Experiment) -> Result<Vec<(String, String)>, HarnessError> {
    let normalized = text.replace('∧', ",").replace("&&", ",");
    let mut out = Vec::new();
    for part in normalized.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (var, value) = part
            .split_once('=')
            .map(|(a, b)| (a.trim(), b.trim()))
            .ok_or_else(|| HarnessError::Config(format!("postselect: `{part}` is not of the form variable=value")))?;
        let info = experiment
            .variable(var)
            .ok_or_else(|| HarnessError::Config(format!("postselect: `{var}` is not a measured variable of {}", experiment.name())))?;
        if !info.values.iter().any(|v| v == value) && value != crate::circuit::OTHER {
            return Err(HarnessError::Config(format!("postselect: `{var}` has no value `{value}` (values: {:?})", info.values)));
        }
        out.push((var.to_string(), value.to_string()));
    }
    if out.is_empty() {
        return Err(HarnessError::Config("postselect: empty predicate".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::from_toml("experiment = \"fr\"\n").unwrap();
        assert_eq!(c.experiment, ExperimentRef::Builtin("fr".into()));
        assert_eq!(c.policy, unitary());
        assert_eq!((c.runs, c.seed, c.mode), (1, 0, Mode::Sample));
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml("experiment = \"fr\"\nrunz = 3\n").unwrap_err().to_string();
        assert!(err.contains("runz") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn inline_policy_and_custom_experiment() {
        let c = RunConfig::from_toml(
            "experiment = { custom = \"my.toml\" }\nmode = \"exact\"\n[policy]\nname = \"mine\"\ncut = { kind = \"none\" }\ncollapse_on_friend_measure = true\n",
        )
        .unwrap();
        assert!(matches!(c.experiment, ExperimentRef::Custom { .. }));
        assert!(c.policy.resolve().unwrap().collapse_on_friend_measure);
    }

    #[test]
    fn zero_runs_rejected() {
        assert!(RunConfig::from_toml("experiment = \"fr\"\nruns = 0\n").is_err());
    }

    #[test]
    fn postselect_checks_variables() {
        let exp = ExperimentScript::builtin("fr").unwrap().compile().unwrap();
        assert_eq!(parse_postselect("u=ok ∧ w=ok", &exp).unwrap().len(), 2);
        assert!(parse_postselect("q=ok", &exp).is_err());
        assert!(parse_postselect("u=maybe", &exp).is_err());
        assert!(parse_postselect("u", &exp).is_err());
    }
}

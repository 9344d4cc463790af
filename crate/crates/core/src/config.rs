//! Experiment configuration: a TOML file describing the problem, the method
//! and the schedule. Unknown keys are rejected; validation errors carry the
//! offending key path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cutoff::CutoffKind;
use crate::loss::BcMode;
use crate::problem::{Domain, Potential};
use crate::train::{BetaRule, Problem, SolverSetup, TrainSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, message: message.into() }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemBlock,
    pub method: MethodBlock,
    #[serde(default)]
    pub schedule: ScheduleBlock,
    pub run: RunBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub domain: DomainBlock,
    pub potential: PotentialBlock,
    pub seed: u64,
}

/// Domain description; the fields required depend on `kind`
/// (`hypercube`: lo/hi/dim, `ball`: radius, `shell`: r_inner/r_outer).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_inner: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_outer: Option<f64>,
}

/// Potential description (`zero`, `constant` with `value`,
/// `separable_cosine`, `inverse_square` with `c`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PotentialBlock {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MethodBlock {
    /// Cut-off name: `phi_a` … `phi_d`, `sine`, `ball`, `shell`, or `none`
    /// for the boundary-penalty baseline.
    pub cutoff: String,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// `β = beta_factor · λ̂_{k-1}` unless `beta_fixed` is set.
    #[serde(default = "default_beta_factor")]
    pub beta_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_fixed: Option<f64>,
    #[serde(default)]
    pub gamma_norm: f64,
    #[serde(default)]
    pub gamma_bdry: f64,
    #[serde(default = "default_norm_floor")]
    pub norm_floor: f64,
    /// `approximate` deflates against the trained solutions (the default);
    /// `reference` uses the exact spectral eigenfunctions where available.
    #[serde(default = "default_deflation")]
    pub deflation: String,
}

fn default_deflation() -> String {
    "approximate".into()
}

fn default_mode() -> String {
    "exact_bc".into()
}
fn default_width() -> usize {
    40
}
fn default_depth() -> usize {
    3
}
fn default_beta_factor() -> f64 {
    4.0
}
fn default_norm_floor() -> f64 {
    crate::loss::DEFAULT_NORM_FLOOR
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub epochs: usize,
    pub lr0: f64,
    pub points0: usize,
    pub period: usize,
    pub lr_factor: f64,
    pub points_factor: usize,
    pub log_every: usize,
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        let s = TrainSchedule::default();
        ScheduleBlock {
            epochs: s.epochs_total,
            lr0: s.lr0,
            points0: s.points0,
            period: s.period,
            lr_factor: s.lr_factor,
            points_factor: s.points_factor,
            log_every: s.log_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    /// Number of eigenpairs K.
    pub eigencount: usize,
    pub output_dir: String,
    /// Sine modes per axis for the reference solve (0 disables the
    /// reference columns).
    #[serde(default = "default_reference_modes")]
    pub reference_modes: usize,
}

fn default_reference_modes() -> usize {
    32
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let domain = self.domain()?;
        let potential = self.potential()?;
        self.cutoff_kind()?;
        self.mode()?;
        if let (Potential::InverseSquare { .. }, Domain::Hypercube { lo, hi, .. }) =
            (&potential, &domain)
        {
            // the singular point must not be interior; ball/shell handle it
            // through the sampler's origin exclusion
            if *lo < 0.0 && *hi > 0.0 {
                return Err(invalid(
                    "problem.potential.kind",
                    "inverse_square on a hypercube containing the origin is not admissible",
                ));
            }
        }
        match self.method.deflation.as_str() {
            "approximate" => {}
            "reference" => {
                if !potential.is_separable() || !matches!(domain, Domain::Hypercube { .. }) {
                    return Err(invalid(
                        "method.deflation",
                        "reference deflation needs a separable potential on a hypercube",
                    ));
                }
            }
            other => {
                return Err(invalid(
                    "method.deflation",
                    format!("unknown deflation mode {other:?}, expected approximate|reference"),
                ));
            }
        }
        if self.run.eigencount == 0 {
            return Err(invalid("run.eigencount", "must be at least 1"));
        }
        if self.method.width == 0 || self.method.depth == 0 {
            return Err(invalid("method.width", "width and depth must be positive"));
        }
        if self.schedule.epochs == 0 || self.schedule.points0 == 0 || self.schedule.period == 0 {
            return Err(invalid("schedule.epochs", "epochs, points0 and period must be positive"));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain, ConfigError> {
        let d = &self.problem.domain;
        match d.kind.as_str() {
            "hypercube" => {
                let lo = d.lo.ok_or_else(|| invalid("problem.domain.lo", "required for hypercube"))?;
                let hi = d.hi.ok_or_else(|| invalid("problem.domain.hi", "required for hypercube"))?;
                let dim =
                    d.dim.ok_or_else(|| invalid("problem.domain.dim", "required for hypercube"))?;
                Domain::hypercube(lo, hi, dim)
                    .map_err(|e| invalid("problem.domain", e.to_string()))
            }
            "ball" => {
                let radius =
                    d.radius.ok_or_else(|| invalid("problem.domain.radius", "required for ball"))?;
                Domain::ball(radius).map_err(|e| invalid("problem.domain", e.to_string()))
            }
            "shell" => {
                let r_inner = d
                    .r_inner
                    .ok_or_else(|| invalid("problem.domain.r_inner", "required for shell"))?;
                let r_outer = d
                    .r_outer
                    .ok_or_else(|| invalid("problem.domain.r_outer", "required for shell"))?;
                Domain::shell(r_inner, r_outer)
                    .map_err(|e| invalid("problem.domain", e.to_string()))
            }
            other => Err(invalid(
                "problem.domain.kind",
                format!("unknown domain kind {other:?}, expected hypercube|ball|shell"),
            )),
        }
    }

    pub fn potential(&self) -> Result<Potential, ConfigError> {
        let p = &self.problem.potential;
        match p.kind.as_str() {
            "zero" => Ok(Potential::Zero),
            "constant" => Ok(Potential::Constant(p.value.ok_or_else(|| {
                invalid("problem.potential.value", "required for constant potential")
            })?)),
            "separable_cosine" => Ok(Potential::SeparableCosine),
            "inverse_square" => Ok(Potential::InverseSquare {
                c: p.c.ok_or_else(|| {
                    invalid("problem.potential.c", "required for inverse_square potential")
                })?,
            }),
            other => Err(invalid(
                "problem.potential.kind",
                format!(
                    "unknown potential kind {other:?}, expected \
                     zero|constant|separable_cosine|inverse_square"
                ),
            )),
        }
    }

    pub fn cutoff_kind(&self) -> Result<CutoffKind, ConfigError> {
        CutoffKind::from_config_name(&self.method.cutoff).ok_or_else(|| {
            invalid(
                "method.cutoff",
                format!(
                    "unknown cutoff name {:?}, expected one of \
                     phi_a|phi_b|phi_c|phi_d|sine|ball|shell|none",
                    self.method.cutoff
                ),
            )
        })
    }

    pub fn mode(&self) -> Result<BcMode, ConfigError> {
        match self.method.mode.as_str() {
            "exact_bc" => {
                if self.method.cutoff == "none" {
                    return Err(invalid(
                        "method.cutoff",
                        "exact_bc mode needs a real cutoff, not \"none\"",
                    ));
                }
                Ok(BcMode::ExactBc)
            }
            "boundary_penalty" => Ok(BcMode::BoundaryPenalty),
            other => Err(invalid(
                "method.mode",
                format!("unknown mode {other:?}, expected exact_bc|boundary_penalty"),
            )),
        }
    }

    pub fn to_problem(&self) -> Result<Problem, ConfigError> {
        Ok(Problem { domain: self.domain()?, potential: self.potential()? })
    }

    pub fn to_setup(&self) -> Result<SolverSetup, ConfigError> {
        let beta_rule = match self.method.beta_fixed {
            Some(b) => BetaRule::Fixed(b),
            None => BetaRule::MultipleOfPrevious(self.method.beta_factor),
        };
        let reference_deflation = if self.method.deflation == "reference" {
            let spectrum = crate::spectral::separable_reference(
                &self.domain()?,
                &self.potential()?,
                self.run.reference_modes.max(8),
                self.run.eigencount + 8,
            )
            .map_err(|e| invalid("method.deflation", e.to_string()))?;
            Some(std::sync::Arc::new(spectrum))
        } else {
            None
        };
        Ok(SolverSetup {
            problem: self.to_problem()?,
            cutoff: self.cutoff_kind()?,
            width: self.method.width,
            depth: self.method.depth,
            mode: self.mode()?,
            gamma_norm: self.method.gamma_norm,
            gamma_bdry: self.method.gamma_bdry,
            beta_rule,
            norm_floor: self.method.norm_floor,
            stationarity_tol: 50.0,
            reference_deflation,
        })
    }

    pub fn to_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs_total: self.schedule.epochs,
            lr0: self.schedule.lr0,
            points0: self.schedule.points0,
            period: self.schedule.period,
            lr_factor: self.schedule.lr_factor,
            points_factor: self.schedule.points_factor,
            seed: self.problem.seed,
            log_every: self.schedule.log_every,
            ..TrainSchedule::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[problem]
seed = 42

[problem.domain]
kind = "hypercube"
lo = -1.0
hi = 1.0
dim = 2

[problem.potential]
kind = "separable_cosine"

[method]
cutoff = "phi_c"

[schedule]
epochs = 20000
lr0 = 0.005
points0 = 1000
period = 20000
lr_factor = 0.25
points_factor = 2
log_every = 500

[run]
eigencount = 1
output_dir = "runs/test"
"#;

    #[test]
    fn parse_and_convert() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.domain().unwrap(), Domain::hypercube(-1.0, 1.0, 2).unwrap());
        assert!(matches!(cfg.potential().unwrap(), Potential::SeparableCosine));
        assert_eq!(cfg.cutoff_kind().unwrap(), CutoffKind::ProductCosine);
        let schedule = cfg.to_schedule();
        assert_eq!(schedule.epochs_total, 20_000);
        assert_eq!(schedule.seed, 42);
    }

    #[test]
    fn round_trips_through_serialization() {
        let cfg = ExperimentConfig::parse(SAMPLE).unwrap();
        let text = cfg.to_toml().unwrap();
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SAMPLE.replace("[run]", "[run]\nmystery_knob = 3\n");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mystery_knob"), "{msg}");
    }

    #[test]
    fn invalid_cutoff_name_carries_key_path() {
        let bad = SAMPLE.replace("cutoff = \"phi_c\"", "cutoff = \"phi_z\"");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("method.cutoff"), "{msg}");
        assert!(msg.contains("phi_z"), "{msg}");
    }

    #[test]
    fn exact_bc_requires_real_cutoff() {
        let bad = SAMPLE.replace("cutoff = \"phi_c\"", "cutoff = \"none\"");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn domain_kind_validation() {
        let bad = SAMPLE.replace("kind = \"hypercube\"", "kind = \"torus\"");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        assert!(err.to_string().contains("problem.domain.kind"));
    }
}

//! Run configuration: flat `key = value` text with `#` comments.
//!
//! ```text
//! d = 1
//! gamma = 1.5
//! g = tanh
//! xi = spectral:1=2.0
//! regime = paired
//! budgets = 64, 128, 256, 512
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{Arm, EstimatorConfig};
use crate::nemytskij::NonlinearityG;
use crate::reference::{QuadratureOptions, ReferenceConfig};
use crate::spectral::{CovarianceProfile, InitialValue, PointFn, SlowlyVarying};

/// Points per axis used to project a sampled initial value.
pub const SAMPLED_XI_GRID: usize = 256;

/// Which allocations a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmSelection {
    Nonuniform,
    Uniform,
    /// both, on shared paths
    Paired,
}

impl ArmSelection {
    pub fn arms(self) -> Vec<Arm> {
        match self {
            ArmSelection::Nonuniform => vec![Arm::Nonuniform],
            ArmSelection::Uniform => vec![Arm::Uniform],
            ArmSelection::Paired => vec![Arm::Nonuniform, Arm::Uniform],
        }
    }

    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nonuniform" => Ok(Self::Nonuniform),
            "uniform" => Ok(Self::Uniform),
            "paired" => Ok(Self::Paired),
            _ => Err(format!("expected nonuniform, uniform or paired, got {s:?}")),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ArmSelection::Nonuniform => "nonuniform",
            ArmSelection::Uniform => "uniform",
            ArmSelection::Paired => "paired",
        }
    }
}

/// Everything a subcommand needs. Spec strings are kept verbatim and
/// validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub d: usize,
    pub gamma: f64,
    /// `one` or `log:p`
    pub slowly_varying: String,
    /// `const:C`, `zero`, `one`, `identity`, `sin`, `tanh` or `table:PATH`
    pub g: String,
    /// `zero`, `spectral:1=2.0;3=0.5`, `sampled:const=c` or `sampled:parabola=a`
    pub xi: String,
    pub regime: ArmSelection,
    /// budget for `allocate` and `simulate`
    pub budget: u64,
    /// budgets for `converge`
    pub budgets: Vec<u64>,
    pub replications: u64,
    pub seed: u64,
    pub workers: usize,
    pub rho: u64,
    pub coupling_rho: Option<u64>,
    pub i_ref: Option<f64>,
    pub spatial_grid: Option<usize>,
    pub time_quad: usize,
    pub profile_points: usize,
    /// allowed `|slope + α|`
    pub tolerance: f64,
    /// snapshot times for `simulate`
    pub times: Vec<f64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 1,
            gamma: 3.0,
            slowly_varying: "one".into(),
            g: "one".into(),
            xi: "zero".into(),
            regime: ArmSelection::Nonuniform,
            budget: 100,
            budgets: vec![64, 128, 256, 512, 1024],
            replications: 100,
            seed: 0,
            workers: 1,
            rho: 16,
            coupling_rho: None,
            i_ref: None,
            spatial_grid: None,
            time_quad: 1,
            profile_points: 64,
            tolerance: 0.1,
            times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            out: PathBuf::from("."),
        }
    }
}

pub const KEYS: &[&str] = &[
    "d",
    "gamma",
    "slowly_varying",
    "g",
    "xi",
    "regime",
    "budget",
    "budgets",
    "replications",
    "seed",
    "workers",
    "rho",
    "coupling_rho",
    "i_ref",
    "spatial_grid",
    "time_quad",
    "profile_points",
    "tolerance",
    "times",
    "out",
];

fn num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(num)
        .collect()
}

fn optional<T: std::str::FromStr>(value: &str) -> std::result::Result<Option<T>, String> {
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        num(value).map(Some)
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "d" => self.d = num(value)?,
            "gamma" => self.gamma = num(value)?,
            "slowly_varying" => self.slowly_varying = value.to_string(),
            "g" => self.g = value.to_string(),
            "xi" => self.xi = value.to_string(),
            "regime" => self.regime = ArmSelection::parse(value)?,
            "budget" => self.budget = num(value)?,
            "budgets" => self.budgets = list(value)?,
            "replications" => self.replications = num(value)?,
            "seed" => self.seed = num(value)?,
            "workers" => self.workers = num(value)?,
            "rho" => self.rho = num(value)?,
            "coupling_rho" => self.coupling_rho = optional(value)?,
            "i_ref" => self.i_ref = optional(value)?,
            "spatial_grid" => self.spatial_grid = optional(value)?,
            "time_quad" => self.time_quad = num(value)?,
            "profile_points" => self.profile_points = num(value)?,
            "tolerance" => self.tolerance = num(value)?,
            "times" => self.times = list(value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(format!("unknown key (expected one of {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`, collecting every
    /// problem instead of stopping at the first.
    pub fn merge_text(&mut self, text: &str, origin: &str, problems: &mut Vec<String>) {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let key = k.trim();
                    if let Err(e) = self.apply(key, v.trim()) {
                        problems.push(format!("{origin}:{}: {key}: {e}", n + 1));
                    }
                }
                None => problems.push(format!("{origin}:{}: expected key = value, got {line:?}", n + 1)),
            }
        }
    }

    /// Applies one `key=value` override.
    pub fn merge_override(&mut self, assignment: &str, problems: &mut Vec<String>) {
        match assignment.split_once('=') {
            Some((k, v)) => {
                let key = k.trim();
                if let Err(e) = self.apply(key, v.trim()) {
                    problems.push(format!("--set {key}: {e}"));
                }
            }
            None => problems.push(format!("--set expects KEY=VALUE, got {assignment:?}")),
        }
    }

    /// Parses a complete configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        cfg.merge_text(text, "config", &mut problems);
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Every violated precondition.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.profile() {
            Ok(p) => {
                if let Err(e) = p.check_dimension(self.d) {
                    out.push(format!("gamma/d: {e}"));
                }
                if self.regime != ArmSelection::Nonuniform {
                    if !p.slowly_varying().is_one() {
                        out.push("regime: the uniform baseline needs slowly_varying = one".into());
                    }
                    if self.gamma <= self.d as f64 {
                        out.push("regime: the uniform baseline needs gamma > d".into());
                    }
                }
            }
            Err(e) => out.push(format!("gamma/slowly_varying: {e}")),
        }
        if self.d == 0 {
            out.push("d: must be at least 1".into());
        }
        if let Err(e) = self.nonlinearity() {
            out.push(format!("g: {e}"));
        }
        if let Err(e) = self.initial_value() {
            out.push(format!("xi: {e}"));
        }
        if self.budget == 0 {
            out.push("budget: must be positive".into());
        }
        if self.budgets.contains(&0) {
            out.push("budgets: must be positive".into());
        }
        if self.replications < 2 {
            out.push("replications: need at least 2".into());
        }
        if self.workers == 0 {
            out.push("workers: need at least 1".into());
        }
        if let Err(e) = self.reference().validate() {
            out.push(format!("rho/coupling_rho/i_ref: {e}"));
        }
        if matches!(self.spatial_grid, Some(m) if !m.is_power_of_two() || m < 2) {
            out.push("spatial_grid: must be a power of two".into());
        }
        if self.time_quad == 0 {
            out.push("time_quad: must be positive".into());
        }
        if self.profile_points == 0 {
            out.push("profile_points: must be positive".into());
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            out.push("tolerance: must be positive".into());
        }
        if let Some(t) = self.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            out.push(format!("times: {t} outside [0, 1]"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn profile(&self) -> Result<CovarianceProfile> {
        CovarianceProfile::new(self.gamma, SlowlyVarying::parse(&self.slowly_varying)?)
    }

    pub fn nonlinearity(&self) -> Result<NonlinearityG> {
        NonlinearityG::parse(&self.g)
    }

    pub fn initial_value(&self) -> Result<InitialValue> {
        parse_initial_value(&self.xi, self.d)
    }

    pub fn reference(&self) -> ReferenceConfig {
        ReferenceConfig {
            rho: self.rho,
            i_ref: self.i_ref,
            coupling_rho: self.coupling_rho.unwrap_or(self.rho),
        }
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            replications: self.replications,
            seed: self.seed,
            workers: self.workers,
            reference: self.reference(),
            quadrature: QuadratureOptions {
                time_quad: self.time_quad,
                profile_points: self.profile_points,
            },
            spatial_grid: self.spatial_grid,
        }
    }

    /// The configuration as `key = value` text that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        let join = |v: Vec<String>| v.join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "slowly_varying = {}", self.slowly_varying);
        let _ = writeln!(s, "g = {}", self.g);
        let _ = writeln!(s, "xi = {}", self.xi);
        let _ = writeln!(s, "regime = {}", self.regime.name());
        let _ = writeln!(s, "budget = {}", self.budget);
        let _ = writeln!(s, "budgets = {}", join(self.budgets.iter().map(u64::to_string).collect()));
        let _ = writeln!(s, "replications = {}", self.replications);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "workers = {}", self.workers);
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "coupling_rho = {}", opt(self.coupling_rho.map(|v| v.to_string())));
        let _ = writeln!(s, "i_ref = {}", opt(self.i_ref.map(|v| v.to_string())));
        let _ = writeln!(s, "spatial_grid = {}", opt(self.spatial_grid.map(|v| v.to_string())));
        let _ = writeln!(s, "time_quad = {}", self.time_quad);
        let _ = writeln!(s, "profile_points = {}", self.profile_points);
        let _ = writeln!(s, "tolerance = {}", self.tolerance);
        let _ = writeln!(s, "times = {}", join(self.times.iter().map(f64::to_string).collect()));
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }
}

/// Parses an initial-value spec for dimension `d`.
pub fn parse_initial_value(spec: &str, d: usize) -> Result<InitialValue> {
    let spec = spec.trim();
    if spec == "zero" {
        return Ok(InitialValue::Zero);
    }
    if let Some(body) = spec.strip_prefix("spectral:") {
        let mut coeffs = Vec::new();
        for item in body.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (coords, value) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected COORDS=VALUE in {item:?}")))?;
            let coords: Vec<u32> = coords
                .split('.')
                .map(|c| c.trim().parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("bad mode coordinates {coords:?}")))?;
            if coords.len() != d || coords.contains(&0) {
                return Err(Error::invalid(format!(
                    "mode {coords:?} must have {d} coordinates, each >= 1"
                )));
            }
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad coefficient {value:?}")))?;
            if !value.is_finite() {
                return Err(Error::invalid(format!("coefficient {value} is not finite")));
            }
            coeffs.push((coords, value));
        }
        return Ok(InitialValue::Spectral(coeffs));
    }
    if let Some(body) = spec.strip_prefix("sampled:") {
        let (kind, value) = body
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected sampled:KIND=VALUE, got {spec:?}")))?;
        let a: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad sampled parameter {value:?}")))?;
        if !a.is_finite() {
            return Err(Error::invalid("sampled parameter must be finite"));
        }
        let func: PointFn = match kind.trim() {
            "const" => Arc::new(move |_: &[f64]| a),
            "parabola" => Arc::new(move |u: &[f64]| a * u.iter().map(|x| x * (1.0 - x)).product::<f64>()),
            other => return Err(Error::invalid(format!("unknown sampled initial value {other:?}"))),
        };
        return Ok(InitialValue::Sampled {
            func,
            grid: SAMPLED_XI_GRID,
        });
    }
    Err(Error::invalid(format!(
        "unknown xi spec {spec:?} (expected zero, spectral:..., or sampled:const=c / sampled:parabola=a)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::MultiIndex;

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# study\nd = 1\ngamma = 1.5  # low regime\ng = tanh\nxi = spectral:1=2.0\nregime = paired\nbudgets = 64, 128,256 ,512\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.gamma, 1.5);
        assert_eq!(cfg.budgets, vec![64, 128, 256, 512]);
        assert_eq!(cfg.regime, ArmSelection::Paired);
        let mut problems = Vec::new();
        cfg.merge_override("seed=9", &mut problems);
        cfg.merge_override("i_ref = 12.5", &mut problems);
        assert!(problems.is_empty());
        assert_eq!((cfg.seed, cfg.i_ref), (9, Some(12.5)));
    }

    #[test]
    fn all_problems_are_reported_together() {
        let text = "d = 1\ngamma = 0.5\ng = wobble\nreplications = 1\nbogus = 3\nrho = x\n";
        let Err(Error::Config(problems)) = RunConfig::parse(text) else {
            panic!("expected a config error");
        };
        assert!(problems.len() >= 5, "{problems:?}");
        let joined = problems.join("\n");
        for needle in ["bogus", "rho", "g:", "replications", "gamma"] {
            assert!(joined.contains(needle), "{needle} missing from {joined}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            i_ref: Some(20.0),
            spatial_grid: Some(128),
            xi: "spectral:1=2;3=-0.5".into(),
            times: vec![0.0, 0.125, 1.0],
            ..RunConfig::default()
        };
        cfg.gamma = 2.75;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn initial_value_specs() {
        let p = CovarianceProfile::power(3.0).unwrap();
        let modes: Vec<_> = (1..=4).map(|k| MultiIndex::new(vec![k], &p).unwrap()).collect();
        let xi = parse_initial_value("spectral:1=2.0;3=0.5", 1).unwrap();
        assert_eq!(xi.coefficients(&modes).unwrap(), vec![2.0, 0.0, 0.5, 0.0]);
        // ⟨c, h_k⟩ = c·√2·2/(kπ) for odd k
        let c = parse_initial_value("sampled:const=1", 1).unwrap().coefficients(&modes).unwrap();
        let expected = 2.0 * 2f64.sqrt() / std::f64::consts::PI;
        assert!((c[0] - expected).abs() < 1e-4);
        assert!(c[1].abs() < 1e-12);
        let two_d = parse_initial_value("spectral:1.2=1", 2).unwrap();
        assert!(matches!(two_d, InitialValue::Spectral(ref v) if v[0].0 == vec![1, 2]));
        assert!(parse_initial_value("spectral:1=1", 2).is_err());
        assert!(parse_initial_value("sampled:wave=1", 1).is_err());
        assert!(parse_initial_value("nope", 1).is_err());
    }

    #[test]
    fn uniform_baseline_needs_pure_power() {
        let text = "gamma = 3\nslowly_varying = log:1\nregime = uniform\n";
        assert!(RunConfig::parse(text).is_err());
    }
}

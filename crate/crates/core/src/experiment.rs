//! Monte Carlo strong-error estimation, convergence studies and rate fits.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::allocation::{plan_nonuniform, plan_uniform, rate_exponents, AllocationPlan, Regime};
use crate::error::{Error, Result};
use crate::nemytskij::NonlinearityG;
use crate::noise::NoiseKey;
use crate::reference::{CoupledSystem, QuadratureOptions, Reference, ReferenceConfig, Replication};
use crate::spectral::{CovarianceProfile, InitialValue};

/// Residual cutoff for dropping the smallest budget from a fit.
pub const STUDENTIZED_DROP: f64 = 3.0;

/// How replications are drawn and integrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub replications: u64,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub workers: usize,
    pub reference: ReferenceConfig,
    pub quadrature: QuadratureOptions,
    pub spatial_grid: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            replications: 100,
            seed: 0,
            workers: 1,
            reference: ReferenceConfig::default(),
            quadrature: QuadratureOptions::default(),
            spatial_grid: None,
        }
    }
}

/// Estimate of `E∫₀¹‖X − X̂‖² dt` and its square root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub mean_square: f64,
    pub mean_square_stderr: f64,
    /// `ê = sqrt(mean_square)`
    pub error: f64,
    /// delta-method standard error of `ê`
    pub stderr: f64,
    pub replications: u64,
    /// replications aborted by a non-finite value
    pub excluded: u64,
    pub time_quad: usize,
}

impl ErrorEstimate {
    fn from_samples(samples: &[f64], excluded: u64, time_quad: usize) -> Self {
        let (mean, se) = mean_and_stderr(samples);
        let error = mean.max(0.0).sqrt();
        let stderr = if error > 0.0 { se / (2.0 * error) } else { 0.0 };
        Self {
            mean_square: mean,
            mean_square_stderr: se,
            error,
            stderr,
            replications: samples.len() as u64,
            excluded,
            time_quad,
        }
    }
}

/// A mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Result of one coupled estimation over several plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledEstimate {
    /// per plan
    pub errors: Vec<ErrorEstimate>,
    /// Replication mean of `‖X̂(t)‖²` at `profile_times`, per plan.
    pub moment_profile: Vec<Vec<f64>>,
    pub profile_times: Vec<f64>,
    /// `E∫₀¹ Y_j² dt` of the reference per reference state mode.
    pub reference_energy: Vec<MeanEstimate>,
    /// Coordinates of the reference state modes.
    pub reference_modes: Vec<Vec<u32>>,
    pub wall_ms: u64,
}

fn mean_and_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Runs `replications` of `system`, ordered by replication index. Non-finite
/// aborts yield `None`; other errors propagate.
fn run_replications(system: &CoupledSystem, cfg: &EstimatorConfig) -> Result<Vec<Option<Replication>>> {
    let work = |r: u64| match system.replicate(NoiseKey::new(cfg.seed, r)) {
        Ok(rep) => Ok(Some(rep)),
        Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    if cfg.workers <= 1 {
        return (0..cfg.replications).map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))?;
    pool.install(|| (0..cfg.replications).into_par_iter().map(work).collect())
}

/// Estimates the strong error of every plan against one shared reference.
pub fn estimate_errors(
    plans: &[&AllocationPlan],
    g: &NonlinearityG,
    xi: &InitialValue,
    reference: Reference<'_>,
    cfg: &EstimatorConfig,
) -> Result<CoupledEstimate> {
    if cfg.replications < 2 {
        return Err(Error::Domain(format!("need at least 2 replications, got {}", cfg.replications)));
    }
    let start = Instant::now();
    let system = CoupledSystem::new(plans, g, xi, reference, cfg.spatial_grid, cfg.quadrature)?;
    summarize(&system, cfg, start)
}

/// Runs only the fine reference sized by `plan` and reports its per-mode
/// energies; no scheme is compared.
pub fn reference_energies(
    plan: &AllocationPlan,
    g: &NonlinearityG,
    xi: &InitialValue,
    cfg: &EstimatorConfig,
) -> Result<CoupledEstimate> {
    if cfg.replications < 2 {
        return Err(Error::Domain(format!("need at least 2 replications, got {}", cfg.replications)));
    }
    let start = Instant::now();
    let system = CoupledSystem::new(&[plan], g, xi, Reference::Fine(cfg.reference), cfg.spatial_grid, cfg.quadrature)?
        .reference_only();
    summarize(&system, cfg, start)
}

fn summarize(system: &CoupledSystem, cfg: &EstimatorConfig, start: Instant) -> Result<CoupledEstimate> {
    let reps = run_replications(system, cfg)?;
    let kept: Vec<&Replication> = reps.iter().flatten().collect();
    let excluded = (reps.len() - kept.len()) as u64;

    let errors = (0..system.scheme_count())
        .map(|k| {
            let samples: Vec<f64> = kept.iter().map(|r| r.error_sq[k]).collect();
            ErrorEstimate::from_samples(&samples, excluded, cfg.quadrature.time_quad)
        })
        .collect();
    let profile_times = system.profile_times();
    let moment_profile = (0..system.scheme_count())
        .map(|k| {
            (0..profile_times.len())
                .map(|p| kept.iter().map(|r| r.profile[k][p]).sum::<f64>() / kept.len() as f64)
                .collect()
        })
        .collect();
    let reference_energy = (0..system.reference().state_modes().len())
        .map(|j| {
            let samples: Vec<f64> = kept.iter().map(|r| r.reference_energy[j]).collect();
            let (mean, stderr) = mean_and_stderr(&samples);
            MeanEstimate { mean, stderr }
        })
        .collect();
    let reference_modes = system.reference().state_modes().iter().map(|m| m.coords().to_vec()).collect();
    Ok(CoupledEstimate {
        errors,
        moment_profile,
        profile_times,
        reference_energy,
        reference_modes,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Strong error of a single plan.
pub fn estimate_error(
    plan: &AllocationPlan,
    g: &NonlinearityG,
    xi: &InitialValue,
    reference: Reference<'_>,
    cfg: &EstimatorConfig,
) -> Result<ErrorEstimate> {
    Ok(estimate_errors(&[plan], g, xi, reference, cfg)?.errors[0])
}

/// Which allocation a study arm uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Nonuniform,
    Uniform,
}

impl Arm {
    pub fn plan(self, profile: &CovarianceProfile, d: usize, budget: u64) -> Result<AllocationPlan> {
        match self {
            Arm::Nonuniform => plan_nonuniform(profile, d, budget),
            Arm::Uniform => plan_uniform(profile, d, budget),
        }
    }

    /// Theoretical rate exponent `α` with `e(N) ≍ N^{−α}`.
    pub fn exponent(self, profile: &CovarianceProfile, d: usize) -> f64 {
        let r = rate_exponents(profile, d);
        match self {
            Arm::Nonuniform => r.alpha_star,
            Arm::Uniform => r.alpha_uniform,
        }
    }
}

/// A convergence study; all arms share paths and the reference at every budget.
#[derive(Debug, Clone)]
pub struct StudySpec {
    pub d: usize,
    pub profile: CovarianceProfile,
    pub g: NonlinearityG,
    pub xi: InitialValue,
    pub budgets: Vec<u64>,
    pub arms: Vec<Arm>,
    pub estimator: EstimatorConfig,
}

fn regime_tag<S: Serializer>(regime: &Regime, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(regime.tag())
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    #[serde(rename = "N")]
    pub budget: u64,
    #[serde(serialize_with = "regime_tag", deserialize_with = "parse_regime_tag")]
    pub regime: Regime,
    pub gamma: f64,
    pub d: usize,
    pub error: f64,
    pub stderr: f64,
    pub total_evals: u64,
    pub wall_ms: u64,
}

fn parse_regime_tag<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Regime, D::Error> {
    let s = String::deserialize(d)?;
    Ok(match s.as_str() {
        "low" => Regime::NonuniformLow,
        "log" => Regime::NonuniformLog,
        "high" => Regime::NonuniformHigh,
        "uniform" => Regime::UniformBaseline,
        "custom" => Regime::Custom,
        other => return Err(serde::de::Error::custom(format!("unknown regime {other:?}"))),
    })
}

/// Least-squares fit of `ln ê` against `ln N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
    pub points: usize,
    /// budgets excluded as pre-asymptotic
    pub dropped: Vec<u64>,
}

/// Rows and fit of one study arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub arm: Arm,
    pub rows: Vec<ConvergenceRow>,
    pub fit: SlopeFit,
    /// `α` of the arm; the fitted slope should approach `−α`.
    pub theory_exponent: f64,
    /// Replication mean of `‖X̂(t)‖²` per row.
    pub moment_profiles: Vec<Vec<f64>>,
    pub excluded: u64,
}

impl ConvergenceRecord {
    pub fn slope_deviation(&self) -> f64 {
        (self.fit.slope + self.theory_exponent).abs()
    }
}

/// All arms of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub records: Vec<ConvergenceRecord>,
    pub profile_times: Vec<f64>,
}

impl ConvergenceStudy {
    pub fn rows(&self) -> impl Iterator<Item = &ConvergenceRow> {
        self.records.iter().flat_map(|r| r.rows.iter())
    }
}

/// Runs every arm at every budget and fits the slopes.
pub fn convergence_study(spec: &StudySpec) -> Result<ConvergenceStudy> {
    if spec.budgets.len() < 4 {
        return Err(Error::Domain(format!("need at least 4 budgets, got {}", spec.budgets.len())));
    }
    if spec.arms.is_empty() {
        return Err(Error::invalid("a study needs at least one arm"));
    }
    let mut budgets = spec.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();

    let mut rows: Vec<Vec<ConvergenceRow>> = vec![Vec::new(); spec.arms.len()];
    let mut profiles: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.arms.len()];
    let mut excluded = vec![0; spec.arms.len()];
    let mut profile_times = Vec::new();
    for &n in &budgets {
        let plans = spec
            .arms
            .iter()
            .map(|arm| arm.plan(&spec.profile, spec.d, n))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&AllocationPlan> = plans.iter().collect();
        let est = estimate_errors(&refs, &spec.g, &spec.xi, Reference::Fine(spec.estimator.reference), &spec.estimator)?;
        for (k, plan) in plans.iter().enumerate() {
            let e = &est.errors[k];
            rows[k].push(ConvergenceRow {
                budget: n,
                regime: plan.regime,
                gamma: spec.profile.gamma(),
                d: spec.d,
                error: e.error,
                stderr: e.stderr,
                total_evals: plan.total_evals,
                wall_ms: est.wall_ms,
            });
            profiles[k].push(est.moment_profile[k].clone());
            excluded[k] += e.excluded;
        }
        profile_times = est.profile_times;
    }

    let records = spec
        .arms
        .iter()
        .zip(rows)
        .zip(profiles)
        .zip(excluded)
        .map(|(((&arm, rows), moment_profiles), excluded)| {
            let points: Vec<(u64, f64)> = rows.iter().map(|r| (r.budget, r.error)).collect();
            Ok(ConvergenceRecord {
                arm,
                fit: fit_slope(&points, 0.95)?,
                theory_exponent: arm.exponent(&spec.profile, spec.d),
                rows,
                moment_profiles,
                excluded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceStudy { records, profile_times })
}

struct Ols {
    slope: f64,
    intercept: f64,
    residuals: Vec<f64>,
    leverage: Vec<f64>,
    /// residual variance
    s2: f64,
    sxx: f64,
}

fn ols(x: &[f64], y: &[f64]) -> Ols {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let leverage = x.iter().map(|a| 1.0 / n + (a - mx) * (a - mx) / sxx).collect();
    let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / (n - 2.0);
    Ols {
        slope,
        intercept,
        residuals,
        leverage,
        s2,
        sxx,
    }
}

/// Externally studentized residual of point `k`.
fn studentized(fit: &Ols, k: usize, n: usize) -> f64 {
    let e = fit.residuals[k];
    let h = fit.leverage[k];
    let dof = n as f64 - 2.0;
    let s2_without = ((dof * fit.s2 - e * e / (1.0 - h)) / (dof - 1.0)).max(0.0);
    let denom = (s2_without * (1.0 - h)).sqrt();
    if denom > 0.0 {
        e / denom
    } else if e.abs() > 1e-12 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// OLS fit of `(ln N, ln ê)` with a Student-t confidence interval. The
/// smallest budget is dropped once if its externally studentized residual
/// exceeds [`STUDENTIZED_DROP`] and at least four points remain.
pub fn fit_slope(points: &[(u64, f64)], confidence: f64) -> Result<SlopeFit> {
    if points.len() < 4 {
        return Err(Error::Domain(format!("slope fit needs at least 4 points, got {}", points.len())));
    }
    if let Some(&(n, e)) = points.iter().find(|(_, e)| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::Domain(format!("non-positive error {e} at N = {n}")));
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(Error::Domain(format!("confidence {confidence} outside (0, 1)")));
    }
    let mut pts = points.to_vec();
    pts.sort_by_key(|p| p.0);
    let xs = |p: &[(u64, f64)]| p.iter().map(|(n, _)| (*n as f64).ln()).collect::<Vec<_>>();
    let ys = |p: &[(u64, f64)]| p.iter().map(|(_, e)| e.ln()).collect::<Vec<_>>();

    let mut dropped = Vec::new();
    let mut fit = ols(&xs(&pts), &ys(&pts));
    if pts.len() > 4 && studentized(&fit, 0, pts.len()).abs() > STUDENTIZED_DROP {
        dropped.push(pts.remove(0).0);
        fit = ols(&xs(&pts), &ys(&pts));
    }
    let dof = (pts.len() - 2) as f64;
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Invalid(format!("t distribution: {e}")))?
        .inverse_cdf(0.5 + confidence / 2.0);
    let half = t * (fit.s2 / fit.sxx).sqrt();
    Ok(SlopeFit {
        slope: fit.slope,
        intercept: fit.intercept,
        ci_low: fit.slope - half,
        ci_high: fit.slope + half,
        confidence,
        points: pts.len(),
        dropped,
    })
}

/// Writes the rows of every arm, sorted by arm then `N`.
pub fn write_convergence_csv(path: &Path, study: &ConvergenceStudy) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in study.rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_convergence_csv(path: &Path) -> Result<Vec<ConvergenceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::additive_energy;
    use crate::spectral::MultiIndex;
    use crate::timegrid::GammaLedger;

    fn exact_fit(points: &[(u64, f64)]) -> SlopeFit {
        fit_slope(points, 0.95).unwrap()
    }

    #[test]
    fn exact_powers_give_exact_slope() {
        let pts: Vec<(u64, f64)> = (6..=12).map(|k| (1u64 << k, ((1u64 << k) as f64).powf(-0.5))).collect();
        let fit = exact_fit(&pts);
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!(fit.ci_high - fit.ci_low < 1e-10);
        assert!(fit.dropped.is_empty());
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_slope(&[(1, 1.0), (2, 0.5), (4, 0.25)], 0.95).is_err());
        assert!(fit_slope(&[(1, 1.0), (2, 0.5), (4, 0.0), (8, 0.1)], 0.95).is_err());
        assert!(fit_slope(&[(1, 1.0), (2, -0.5), (4, 0.2), (8, 0.1)], 0.95).is_err());
    }

    #[test]
    fn pre_asymptotic_point_is_dropped() {
        let mut pts: Vec<(u64, f64)> = (4..=10)
            .map(|k| {
                let n = 1u64 << k;
                let wiggle = if k % 2 == 0 { 1.01 } else { 0.99 };
                (n, wiggle * (n as f64).powf(-0.5))
            })
            .collect();
        pts[0].1 *= 3.0;
        let fit = exact_fit(&pts);
        assert_eq!(fit.dropped, vec![16]);
        assert!((fit.slope + 0.5).abs() < 0.02);
    }

    #[test]
    fn ci_covers_noisy_slope() {
        let pts: Vec<(u64, f64)> = (0..6)
            .map(|k| {
                let n = 64u64 << k;
                let noise = [1.03, 0.98, 1.01, 0.97, 1.02, 1.0][k];
                (n, noise * (n as f64).powf(-0.4))
            })
            .collect();
        let fit = exact_fit(&pts);
        assert!(fit.ci_low < -0.4 && -0.4 < fit.ci_high);
    }

    fn cfg(replications: u64) -> EstimatorConfig {
        EstimatorConfig {
            replications,
            seed: 11,
            reference: ReferenceConfig::new(4),
            ..Default::default()
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let profile = CovarianceProfile::power(3.0).unwrap();
        let plan = plan_nonuniform(&profile, 1, 32).unwrap();
        let xi = InitialValue::Spectral(vec![(vec![1], 1.0)]);
        let est = estimate_error(&plan, &NonlinearityG::Tanh, &xi, Reference::Plan(&plan), &cfg(4)).unwrap();
        assert_eq!(est.mean_square, 0.0);
        assert_eq!(est.error, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn noise_free_error_is_deterministic() {
        let profile = CovarianceProfile::power(3.0).unwrap();
        let plan = plan_nonuniform(&profile, 1, 16).unwrap();
        let xi = InitialValue::Spectral(vec![(vec![1], 1.0), (vec![2], 0.5)]);
        let g = NonlinearityG::Constant(0.0);
        let a = estimate_error(&plan, &g, &xi, Reference::Fine(ReferenceConfig::new(4)), &cfg(3)).unwrap();
        assert!(a.mean_square > 0.0);
        assert!(a.mean_square_stderr.abs() < 1e-15 * a.mean_square.max(1.0));

        // independent quadrature against the exact semigroup on a fine midpoint rule
        let b = estimate_error(
            &plan,
            &g,
            &xi,
            Reference::Fine(ReferenceConfig::new(64).with_coupling(4)),
            &cfg(2),
        )
        .unwrap();
        let grid = crate::timegrid::MergedTimeGrid::build(&plan.steps).unwrap();
        let mus: Vec<f64> = plan.state_modes.iter().map(MultiIndex::mu).collect();
        let ledger = GammaLedger::new(&grid, &mus);
        let coeff = [1.0, 0.5];
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut exact = 0.0;
        for k in 0..n {
            let t = (k as f64 + 0.5) * h;
            for (j, m) in plan.state_modes.iter().enumerate() {
                let c = coeff.get(j).copied().unwrap_or(0.0);
                let diff = (-m.mu() * t).exp() - ledger.gamma_at(j, t).unwrap().exp();
                exact += h * diff * diff * c * c;
            }
        }
        assert!((b.mean_square - exact).abs() < 0.05 * exact, "{} vs {exact}", b.mean_square);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let profile = CovarianceProfile::power(1.5).unwrap();
        let plans = [
            plan_nonuniform(&profile, 1, 32).unwrap(),
            plan_uniform(&profile, 1, 32).unwrap(),
        ];
        let refs: Vec<&AllocationPlan> = plans.iter().collect();
        let xi = InitialValue::Spectral(vec![(vec![1], 2.0)]);
        let run = |workers| {
            let c = EstimatorConfig { workers, ..cfg(6) };
            estimate_errors(&refs, &NonlinearityG::Tanh, &xi, Reference::Fine(c.reference), &c).unwrap()
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.errors, b.errors);
        assert_eq!(a.moment_profile, b.moment_profile);
    }

    #[test]
    fn stderr_scales_like_inverse_root() {
        let profile = CovarianceProfile::power(3.0).unwrap();
        let plan = plan_nonuniform(&profile, 1, 16).unwrap();
        let g = NonlinearityG::Constant(1.0);
        let small = estimate_error(&plan, &g, &InitialValue::Zero, Reference::Fine(ReferenceConfig::new(4)), &cfg(200)).unwrap();
        let large = estimate_error(&plan, &g, &InitialValue::Zero, Reference::Fine(ReferenceConfig::new(4)), &cfg(800)).unwrap();
        let ratio = large.mean_square_stderr / small.mean_square_stderr;
        assert!((0.35..0.7).contains(&ratio), "{ratio}");
    }

    #[test]
    fn reference_energy_matches_closed_form() {
        let profile = CovarianceProfile::power(3.0).unwrap();
        let plan = plan_nonuniform(&profile, 1, 16).unwrap();
        let c = EstimatorConfig {
            replications: 400,
            seed: 2,
            reference: ReferenceConfig::new(256).with_coupling(16).with_i_ref(5.0),
            ..Default::default()
        };
        let est = reference_energies(&plan, &NonlinearityG::Constant(1.0), &InitialValue::Zero, &c).unwrap();
        assert!(est.errors.is_empty());
        for (coords, e) in est.reference_modes.iter().zip(&est.reference_energy) {
            let exact = additive_energy(&MultiIndex::new(coords.clone(), &profile).unwrap());
            assert!((e.mean - exact).abs() < 4.0 * e.stderr + 0.05 * exact, "{coords:?}: {} vs {exact}", e.mean);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let row = ConvergenceRow {
            budget: 64,
            regime: Regime::NonuniformHigh,
            gamma: 3.0,
            d: 1,
            error: 0.125,
            stderr: 0.01,
            total_evals: 80,
            wall_ms: 3,
        };
        let study = ConvergenceStudy {
            records: vec![ConvergenceRecord {
                arm: Arm::Nonuniform,
                rows: vec![row.clone()],
                fit: exact_fit(&[(1, 1.0), (2, 0.5), (4, 0.25), (8, 0.125)]),
                theory_exponent: 0.5,
                moment_profiles: vec![],
                excluded: 0,
            }],
            profile_times: vec![],
        };
        write_convergence_csv(&path, &study).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("N,regime,gamma,d,error,stderr,total_evals,wall_ms\n64,high,"));
        assert_eq!(read_convergence_csv(&path).unwrap(), vec![row]);
    }

    #[test]
    fn study_needs_four_budgets() {
        let spec = StudySpec {
            d: 1,
            profile: CovarianceProfile::power(3.0).unwrap(),
            g: NonlinearityG::Constant(1.0),
            xi: InitialValue::Zero,
            budgets: vec![8, 16, 32],
            arms: vec![Arm::Nonuniform],
            estimator: cfg(2),
        };
        assert!(convergence_study(&spec).is_err());
    }
}

//! Evaluation-budget allocation: which scalar Brownian motions to use, how
//! finely to sample each, and how many state modes to keep.
//!
//! For a budget `N`, the non-uniform plan keeps the noise modes with
//! `|i|₂ <= N^{1/(d+2)}` and samples mode `i` with `n_i ∝ λ_i^{1/2}` steps.
//! The uniform baseline uses one common step count for all kept modes.
//! [`objective_d`] evaluates the error proxy
//! `D(I,n) = Σ_{|i|<=I} λ_i/n_i + Σ_{|i|>I} λ_i/μ_i`, and
//! [`brute_force_min_d`] minimizes it exactly for small one-dimensional budgets.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{enumerate_modes, CovarianceProfile, MultiIndex, SlowlyVarying};

/// Largest number of candidate points [`brute_force_min_d`] will visit.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Largest budget [`brute_force_min_d`] accepts.
pub const BRUTE_FORCE_MAX_BUDGET: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `γ ∈ [d, 2d)`
    NonuniformLow,
    /// `γ = 2d`
    NonuniformLog,
    /// `γ > 2d`
    NonuniformHigh,
    UniformBaseline,
    /// Hand-built plan (tests, reference runs, brute-force optima).
    Custom,
}

impl Regime {
    pub fn nonuniform_for(profile: &CovarianceProfile, d: usize) -> Regime {
        let two_d = 2.0 * d as f64;
        if profile.is_log_regime(d) {
            Regime::NonuniformLog
        } else if profile.gamma() < two_d {
            Regime::NonuniformLow
        } else {
            Regime::NonuniformHigh
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Regime::UniformBaseline)
    }

    /// Short tag used in tables and CSV output.
    pub fn tag(&self) -> &'static str {
        match self {
            Regime::NonuniformLow => "low",
            Regime::NonuniformLog => "log",
            Regime::NonuniformHigh => "high",
            Regime::UniformBaseline => "uniform",
            Regime::Custom => "custom",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A complete discretization choice: noise modes with their step counts and
/// the state modes of the Galerkin system.
#[derive(Debug, Clone)]
pub struct AllocationPlan {
    pub regime: Regime,
    pub d: usize,
    pub budget: u64,
    pub profile: CovarianceProfile,
    /// Radius `I` of the noise mode set.
    pub inner_radius: f64,
    /// Radius `J` of the state mode set.
    pub outer_radius: f64,
    pub noise_modes: Vec<MultiIndex>,
    /// `n_i`, aligned with `noise_modes`.
    pub steps: Vec<u64>,
    pub state_modes: Vec<MultiIndex>,
    pub total_evals: u64,
    pub predicted_error: f64,
}

impl AllocationPlan {
    /// Plan with explicit mode sets and step counts.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        profile: CovarianceProfile,
        d: usize,
        budget: u64,
        inner_radius: f64,
        outer_radius: f64,
        steps: Vec<u64>,
        predicted_error: f64,
    ) -> Result<Self> {
        let noise_modes = enumerate_modes(d, inner_radius, &profile)?;
        let state_modes = enumerate_modes(d, outer_radius, &profile)?;
        Self::assemble(
            Regime::Custom,
            profile,
            d,
            budget,
            inner_radius,
            outer_radius,
            noise_modes,
            steps,
            state_modes,
            predicted_error,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        regime: Regime,
        profile: CovarianceProfile,
        d: usize,
        budget: u64,
        inner_radius: f64,
        outer_radius: f64,
        noise_modes: Vec<MultiIndex>,
        steps: Vec<u64>,
        state_modes: Vec<MultiIndex>,
        predicted_error: f64,
    ) -> Result<Self> {
        if steps.len() != noise_modes.len() {
            return Err(Error::invalid(format!(
                "{} step counts for {} noise modes",
                steps.len(),
                noise_modes.len()
            )));
        }
        if steps.contains(&0) {
            return Err(Error::invalid("every step count must be at least 1"));
        }
        Ok(Self {
            regime,
            d,
            budget,
            profile,
            inner_radius,
            outer_radius,
            total_evals: steps.iter().sum(),
            noise_modes,
            steps,
            state_modes,
            predicted_error,
        })
    }

    pub fn max_steps(&self) -> u64 {
        self.steps.iter().copied().max().unwrap_or(1)
    }

    pub fn with_state_radius(&self, outer_radius: f64) -> Result<Self> {
        let mut plan = self.clone();
        plan.state_modes = enumerate_modes(self.d, outer_radius, &self.profile)?;
        plan.outer_radius = outer_radius;
        Ok(plan)
    }
}

/// Rate exponents of the non-uniform (`alpha_star`) and uniform schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateExponents {
    pub alpha_star: f64,
    pub alpha_uniform: f64,
}

/// `α*(γ,d) = 1/2 − (2d−γ)₊/(2(d+2))` and `α(γ,d) = 1/2 − d/(2(γ+2))`.
pub fn rate_exponents(profile: &CovarianceProfile, d: usize) -> RateExponents {
    let g = profile.gamma();
    let df = d as f64;
    RateExponents {
        alpha_star: 0.5 - (2.0 * df - g).max(0.0) / (2.0 * (df + 2.0)),
        alpha_uniform: 0.5 - df / (2.0 * (g + 2.0)),
    }
}

/// Ceiling that treats values within a relative `1e-9` of an integer as that
/// integer, so `⌈(2^{-4})^{1/2}·100⌉` is 25 and not 26 after rounding noise.
pub fn snap_ceil(x: f64) -> u64 {
    let r = x.round();
    let v = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    v.max(1.0) as u64
}

/// The error scale `e_*(N)` of the non-uniform plan.
pub fn predicted_error(profile: &CovarianceProfile, d: usize, budget: u64) -> Result<f64> {
    profile.check_dimension(d)?;
    let n = budget as f64;
    let df = d as f64;
    let g = profile.gamma();
    Ok(match Regime::nonuniform_for(profile, d) {
        Regime::NonuniformLow => {
            let inner = n.powf(1.0 / (df + 2.0));
            n.powf(-0.5 + (df - g / 2.0) / (df + 2.0)) * profile.slowly_varying().eval(inner).sqrt()
        }
        Regime::NonuniformLog => {
            if budget < 2 {
                return Err(Error::Domain("log regime needs N >= 2".into()));
            }
            n.powf(-0.5) * n.ln()
        }
        _ => n.powf(-0.5),
    })
}

/// Closed-form non-uniform allocation for budget `N`.
pub fn plan_nonuniform(profile: &CovarianceProfile, d: usize, budget: u64) -> Result<AllocationPlan> {
    profile.check_dimension(d)?;
    if budget == 0 {
        return Err(Error::BudgetTooSmall { budget, radius: 0.0 });
    }
    let regime = Regime::nonuniform_for(profile, d);
    let n = budget as f64;
    let df = d as f64;
    let g = profile.gamma();
    let inner_radius = n.powf(1.0 / (df + 2.0));
    let noise_modes = enumerate_modes(d, inner_radius, profile)?;
    if noise_modes.is_empty() {
        return Err(Error::BudgetTooSmall {
            budget,
            radius: inner_radius,
        });
    }
    let e_star = predicted_error(profile, d, budget)?;
    let (scale, outer_radius) = match regime {
        Regime::NonuniformLow => {
            let l = profile.slowly_varying().eval(inner_radius);
            (n.powf(1.0 - (df - g / 2.0) / (df + 2.0)) / l.sqrt(), 1.0 / e_star)
        }
        Regime::NonuniformLog => (n / n.ln(), n.sqrt() / n.ln()),
        _ => (n, 1.0 / e_star),
    };
    let steps = noise_modes
        .iter()
        .map(|m| snap_ceil(m.lambda().sqrt() * scale))
        .collect();
    let state_modes = enumerate_modes(d, outer_radius, profile)?;
    AllocationPlan::assemble(
        regime,
        *profile,
        d,
        budget,
        inner_radius,
        outer_radius,
        noise_modes,
        steps,
        state_modes,
        e_star,
    )
}

/// Uniform-time baseline: `I = N^{1/(γ+2)}`, common `n = ⌈N^{(γ+2−d)/(γ+2)}⌉`,
/// `J = N^{1/2 − d/(2(γ+2))}`. Requires `γ > d` and `L ≡ 1`.
pub fn plan_uniform(profile: &CovarianceProfile, d: usize, budget: u64) -> Result<AllocationPlan> {
    profile.check_dimension(d)?;
    let g = profile.gamma();
    let df = d as f64;
    if g <= df {
        return Err(Error::InvalidProfile(format!(
            "uniform baseline needs gamma > d, got gamma = {g}, d = {d}"
        )));
    }
    if !profile.slowly_varying().is_one() {
        return Err(Error::InvalidProfile(
            "uniform baseline is defined for L = 1 only".into(),
        ));
    }
    if budget == 0 {
        return Err(Error::BudgetTooSmall { budget, radius: 0.0 });
    }
    let n = budget as f64;
    let inner_radius = n.powf(1.0 / (g + 2.0));
    let noise_modes = enumerate_modes(d, inner_radius, profile)?;
    if noise_modes.is_empty() {
        return Err(Error::BudgetTooSmall {
            budget,
            radius: inner_radius,
        });
    }
    let common = snap_ceil(n.powf((g + 2.0 - df) / (g + 2.0)));
    let alpha = rate_exponents(profile, d).alpha_uniform;
    let outer_radius = n.powf(alpha);
    let state_modes = enumerate_modes(d, outer_radius, profile)?;
    let steps = vec![common; noise_modes.len()];
    AllocationPlan::assemble(
        Regime::UniformBaseline,
        *profile,
        d,
        budget,
        inner_radius,
        outer_radius,
        noise_modes,
        steps,
        state_modes,
        n.powf(-alpha),
    )
}

/// The three pieces of `D(I, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DValue {
    /// `Σ_{i ∈ plan} λ_i / n_i`
    pub head: f64,
    /// `Σ λ_i/μ_i` over modes outside the plan with `|i|₂ <= cutoff`
    pub tail: f64,
    /// Integral estimate of `Σ λ_i/μ_i` over `|i|₂ > cutoff`
    pub remainder: f64,
    /// Cutoff radius actually used
    pub cutoff: f64,
}

impl DValue {
    pub fn total(&self) -> f64 {
        self.head + self.tail + self.remainder
    }
}

/// `D(I, n)` for the plan's noise modes and step counts.
///
/// The infinite tail is summed exactly up to `tail_cutoff` (default
/// `max(4I, 50)`) and completed with an integral estimate; the cutoff doubles
/// until that estimate is below 1% of the summed tail.
pub fn objective_d(
    plan: &AllocationPlan,
    profile: &CovarianceProfile,
    d: usize,
    tail_cutoff: Option<f64>,
) -> Result<DValue> {
    let head: f64 = plan
        .noise_modes
        .iter()
        .zip(&plan.steps)
        .map(|(m, &n)| m.lambda() / n as f64)
        .sum();
    let (tail, remainder, cutoff) = tail_sum(&plan.noise_modes, plan.inner_radius, profile, d, tail_cutoff)?;
    Ok(DValue {
        head,
        tail,
        remainder,
        cutoff,
    })
}

fn tail_sum(
    kept: &[MultiIndex],
    inner_radius: f64,
    profile: &CovarianceProfile,
    d: usize,
    tail_cutoff: Option<f64>,
) -> Result<(f64, f64, f64)> {
    let mut cutoff = tail_cutoff.unwrap_or_else(|| (4.0 * inner_radius).max(50.0));
    if cutoff.is_nan() || cutoff <= inner_radius {
        return Err(Error::Domain(format!(
            "tail cutoff {cutoff} must exceed the inner radius {inner_radius}"
        )));
    }
    let kept: HashSet<&[u32]> = kept.iter().map(|m| m.coords()).collect();
    loop {
        let modes = enumerate_modes(d, cutoff, profile)?;
        let tail: f64 = modes
            .iter()
            .filter(|m| !kept.contains(m.coords()))
            .map(|m| m.lambda() / m.mu())
            .sum();
        let remainder = tail_remainder(profile, d, cutoff);
        if (tail > 0.0 && remainder < 0.01 * tail) || modes.len() * 4 > crate::spectral::DEFAULT_MODE_CAP {
            return Ok((tail, remainder, cutoff));
        }
        cutoff *= 2.0;
    }
}

/// `∫_{|x|>C, x ∈ (0,∞)^d} λ(|x|)/(π²|x|²) dx`, the continuum analogue of
/// the lattice tail beyond radius `C`.
fn tail_remainder(profile: &CovarianceProfile, d: usize, cutoff: f64) -> f64 {
    let df = d as f64;
    // surface of the unit sphere in the positive orthant
    let orthant = 2.0 * PI.powf(df / 2.0) / statrs::function::gamma::gamma(df / 2.0) / 2f64.powi(d as i32);
    let g = profile.gamma();
    let radial = match profile.slowly_varying() {
        SlowlyVarying::One => cutoff.powf(df - 2.0 - g) / (g + 2.0 - df),
        SlowlyVarying::LogPower { .. } => {
            // r = C e^s turns ∫_C^∞ r^{d-3} λ(r) dr into ∫_0^∞ (C e^s)^{d-2} λ(C e^s) ds
            let rate = g + 2.0 - df;
            let upper = 40.0 / rate;
            let steps = 4000usize;
            let h = upper / steps as f64;
            let f = |s: f64| {
                let r = cutoff * s.exp();
                r.powf(df - 2.0) * profile.eval_unchecked(r)
            };
            let mut acc = f(0.0) + f(upper);
            for k in 1..steps {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(k as f64 * h);
            }
            acc * h / 3.0
        }
    };
    orthant * radial / (PI * PI)
}

/// Exact minimizer of `D(I, n)` over `I ∈ candidates` and integer `n_i >= 1`
/// with `Σ n_i <= N`, for `d = 1` and `N <= 64`.
///
/// Since `λ_i` is non-increasing, an optimal `n` is non-increasing in `i`
/// (swapping an inverted pair never increases `D`) and spends the whole
/// budget, so enumerating the partitions of `N` into `#𝓘` parts is exhaustive.
pub fn brute_force_min_d(
    profile: &CovarianceProfile,
    d: usize,
    budget: u64,
    candidates: &[f64],
) -> Result<(AllocationPlan, DValue)> {
    if d != 1 {
        return Err(Error::Domain("brute-force oracle is restricted to d = 1".into()));
    }
    profile.check_dimension(d)?;
    if budget == 0 {
        return Err(Error::BudgetTooSmall { budget, radius: 0.0 });
    }
    if budget > BRUTE_FORCE_MAX_BUDGET {
        return Err(Error::SearchSpaceTooLarge {
            size: partitions_total(budget),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut size: u128 = 0;
    for &radius in candidates {
        let k = mode_count_1d(radius);
        if k >= 1 && k <= budget {
            size += partitions_exact(budget, k);
        }
    }
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    let mut best: Option<(f64, f64, Vec<u64>, DValue)> = None;
    for &radius in candidates {
        let modes = enumerate_modes(1, radius, profile)?;
        let k = modes.len() as u64;
        if k == 0 || k > budget {
            continue;
        }
        let lambdas: Vec<f64> = modes.iter().map(|m| m.lambda()).collect();
        let (tail, remainder, cutoff) = tail_sum(&modes, radius, profile, 1, None)?;
        let mut parts = vec![0u64; modes.len()];
        let mut local: Option<(f64, Vec<u64>)> = None;
        visit_partitions(budget, budget, 0, &mut parts, &mut |p| {
            let head: f64 = lambdas.iter().zip(p).map(|(l, &n)| l / n as f64).sum();
            if local.as_ref().is_none_or(|(h, _)| head < *h) {
                local = Some((head, p.to_vec()));
            }
        });
        if let Some((head, steps)) = local {
            let value = DValue {
                head,
                tail,
                remainder,
                cutoff,
            };
            if best.as_ref().is_none_or(|b| value.total() < b.3.total()) {
                best = Some((radius, head, steps, value));
            }
        }
    }
    let (radius, _, steps, value) = best.ok_or(Error::BudgetTooSmall {
        budget,
        radius: candidates.iter().copied().fold(0.0, f64::max),
    })?;
    let e_star = predicted_error(profile, d, budget).unwrap_or(f64::NAN);
    let outer = if e_star.is_finite() && e_star > 0.0 { 1.0 / e_star } else { radius };
    let mut plan = AllocationPlan::custom(*profile, d, budget, radius, outer, steps, e_star)?;
    plan.regime = Regime::Custom;
    Ok((plan, value))
}

fn mode_count_1d(radius: f64) -> u64 {
    if radius < 1.0 {
        0
    } else {
        (radius * (1.0 + crate::spectral::RADIUS_SLACK)).floor() as u64
    }
}

/// Calls `f` with every non-increasing sequence of `parts.len()` positive
/// integers summing to `remaining`.
fn visit_partitions(
    remaining: u64,
    max_part: u64,
    pos: usize,
    parts: &mut [u64],
    f: &mut impl FnMut(&[u64]),
) {
    let slots_left = (parts.len() - pos) as u64;
    if pos + 1 == parts.len() {
        if remaining >= 1 && remaining <= max_part {
            parts[pos] = remaining;
            f(parts);
        }
        return;
    }
    // the remaining slots - 1 each need at least one unit
    let hi = max_part.min(remaining - (slots_left - 1));
    // and this part must be at least the average of what is left
    let lo = remaining.div_ceil(slots_left);
    for v in (lo..=hi).rev() {
        parts[pos] = v;
        visit_partitions(remaining - v, v, pos + 1, parts, f);
    }
}

/// Number of partitions of `n` into exactly `k` positive parts.
fn partitions_exact(n: u64, k: u64) -> u128 {
    let n = n as usize;
    let k = k as usize;
    if k == 0 || k > n {
        return 0;
    }
    // p[a][b] = partitions of a into exactly b parts
    let mut p = vec![vec![0u128; k + 1]; n + 1];
    p[0][0] = 1;
    for a in 1..=n {
        for b in 1..=k.min(a) {
            p[a][b] = p[a - 1][b - 1] + p[a - b][b];
        }
    }
    p[n][k]
}

fn partitions_total(n: u64) -> u128 {
    (1..=n.min(400)).map(|k| partitions_exact(n.min(400), k)).sum()
}

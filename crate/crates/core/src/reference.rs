//! Coupled reference solutions and closed-form statistics for additive noise.
//!
//! A [`CoupledSystem`] runs one or more schemes side by side with a fine
//! reference on a common Brownian path. The path lives on a grid `Q` that
//! contains every node of every compared scheme and a uniform grid of
//! `coupling_rho·n_max` intervals; each interval of `Q` is then halved
//! `log2(rho/coupling_rho)` times by bridge splits. All increments any run
//! sees are exact sums of the finest increments.

use std::collections::{HashMap, VecDeque};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationPlan;
use crate::error::{Error, Result};
use crate::nemytskij::NonlinearityG;
use crate::noise::{BrownianIncrements, NoiseKey, PathSource};
use crate::scheme::{Scheme, SchemeRun};
use crate::spectral::{enumerate_modes, InitialValue, MultiIndex};
use crate::timegrid::{GridPoint, MergedTimeGrid};

/// Fine reference discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    /// Fine intervals per `1/n_max`.
    pub rho: u64,
    /// Radius of the reference mode set; `None` means `1.5·max(I, J)`.
    pub i_ref: Option<f64>,
    /// Resolution of the shared path before bridge halving; `rho` must be
    /// `coupling_rho·2^k`.
    pub coupling_rho: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            rho: 16,
            i_ref: None,
            coupling_rho: 16,
        }
    }
}

impl ReferenceConfig {
    pub fn new(rho: u64) -> Self {
        Self {
            rho,
            i_ref: None,
            coupling_rho: rho,
        }
    }

    pub fn with_i_ref(mut self, i_ref: f64) -> Self {
        self.i_ref = Some(i_ref);
        self
    }

    pub fn with_coupling(mut self, coupling_rho: u64) -> Self {
        self.coupling_rho = coupling_rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho < 4 {
            return Err(Error::Domain(format!("reference refinement rho = {} must be >= 4", self.rho)));
        }
        if self.coupling_rho == 0
            || !self.rho.is_multiple_of(self.coupling_rho)
            || !(self.rho / self.coupling_rho).is_power_of_two()
        {
            return Err(Error::Domain(format!(
                "rho = {} must be coupling_rho = {} times a power of two",
                self.rho, self.coupling_rho
            )));
        }
        if let Some(r) = self.i_ref {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidRadius(r));
            }
        }
        Ok(())
    }

    fn levels(&self) -> u32 {
        (self.rho / self.coupling_rho).trailing_zeros()
    }
}

/// What the schemes are compared against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Fine(ReferenceConfig),
    /// Another discretization, run on the same path.
    Plan(&'a AllocationPlan),
}

/// Mean and variance of one coefficient of the additive-noise equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdditiveStats {
    pub mean: f64,
    pub variance: f64,
}

/// `Y_j(t)` for `dX = ΔX dt + dW` is Gaussian with mean `e^{−μ_j t}ξ_j` and
/// variance `λ_j(1 − e^{−2μ_j t})/(2μ_j)`.
pub fn exact_additive_stats(mode: &MultiIndex, xi: f64, t: f64, g: &NonlinearityG) -> Result<AdditiveStats> {
    if g.as_constant() != Some(1.0) {
        return Err(Error::Domain(format!("closed-form statistics need g = 1, got {g}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    let mu = mode.mu();
    Ok(AdditiveStats {
        mean: (-mu * t).exp() * xi,
        variance: mode.lambda() * -(-2.0 * mu * t).exp_m1() / (2.0 * mu),
    })
}

/// `∫₀¹ E Y_j(t)² dt` for the additive-noise equation with `ξ = 0`.
pub fn additive_energy(mode: &MultiIndex) -> f64 {
    let mu = mode.mu();
    let decay = -(-2.0 * mu).exp_m1();
    mode.lambda() / (2.0 * mu) * (1.0 - decay / (2.0 * mu))
}

/// Static data of one run inside a coupled system.
#[derive(Debug, Clone)]
struct Lane {
    scheme: Scheme,
    /// fine index of every node
    node_fine: Vec<u32>,
    /// union-noise index of every noise mode
    noise_union: Vec<usize>,
    /// reference-state index of every state mode
    state_ref: Vec<Option<usize>>,
    xi: Vec<f64>,
}

/// Per-replication output of [`CoupledSystem::replicate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    /// `∫₀¹ ‖X_ref(t) − X̂(t)‖² dt` per compared scheme.
    pub error_sq: Vec<f64>,
    /// `‖X̂(t)‖²` at the profile times, per compared scheme.
    pub profile: Vec<Vec<f64>>,
    /// `∫₀¹ Y_j(t)² dt` of the reference per reference state mode
    /// (trapezoid on the reference nodes).
    pub reference_energy: Vec<f64>,
}

/// Options for the time quadrature of [`CoupledSystem::replicate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureOptions {
    /// Midpoint-rule points per fine interval.
    pub time_quad: usize,
    /// The moment profile is recorded at `k/profile_points`, `k = 0..=profile_points`.
    pub profile_points: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            time_quad: 1,
            profile_points: 64,
        }
    }
}

/// Schemes and a reference sharing one Brownian path.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    lanes: Vec<Lane>,
    union_lineages: Vec<u64>,
    base_dt: Vec<f64>,
    levels: u32,
    fine_tau: Vec<f64>,
    options: QuadratureOptions,
}

impl CoupledSystem {
    /// Couples the schemes of `plans` with `reference`. `spatial_grid`
    /// overrides the resolution used for `g(X̂)` in every run.
    pub fn new(
        plans: &[&AllocationPlan],
        g: &NonlinearityG,
        xi: &InitialValue,
        reference: Reference<'_>,
        spatial_grid: Option<usize>,
        options: QuadratureOptions,
    ) -> Result<Self> {
        if options.time_quad == 0 || options.profile_points == 0 {
            return Err(Error::invalid("time_quad and profile_points must be positive"));
        }
        let d = match (plans.first(), reference) {
            (Some(p), _) => p.d,
            (None, Reference::Plan(p)) => p.d,
            (None, Reference::Fine(_)) => {
                return Err(Error::invalid("a fine reference needs at least one plan to size it"))
            }
        };
        if plans.iter().any(|p| p.d != d) {
            return Err(Error::invalid("all plans must share the dimension"));
        }
        let with_grid = |s: Scheme| -> Result<Scheme> {
            match spatial_grid {
                Some(m) => s.with_spatial_grid(m),
                None => Ok(s),
            }
        };
        let schemes = plans
            .iter()
            .map(|p| with_grid(Scheme::from_plan(p, g.clone())?))
            .collect::<Result<Vec<_>>>()?;

        let mut base: Vec<GridPoint> = schemes.iter().flat_map(|s| s.grid().nodes().iter().copied()).collect();
        let (reference_scheme, levels) = match reference {
            Reference::Plan(plan) => {
                let s = with_grid(Scheme::from_plan(plan, g.clone())?)?;
                base.extend_from_slice(s.grid().nodes());
                base.sort_unstable();
                base.dedup();
                (Some(s), 0)
            }
            Reference::Fine(cfg) => {
                cfg.validate()?;
                let n_max = plans.iter().map(|p| p.max_steps()).max().unwrap_or(1);
                let uniform = cfg.coupling_rho * n_max;
                base.extend((0..=uniform).map(|k| Ratio::new(k, uniform)));
                base.sort_unstable();
                base.dedup();
                (None, cfg.levels())
            }
        };
        let pieces = 1u64 << levels;
        let mut fine: Vec<GridPoint> = Vec::with_capacity((base.len() - 1) * pieces as usize + 1);
        for w in base.windows(2) {
            let step = (w[1] - w[0]) / Ratio::from_integer(pieces);
            for k in 0..pieces {
                fine.push(w[0] + step * Ratio::from_integer(k));
            }
        }
        fine.push(Ratio::from_integer(1));
        let base_dt: Vec<f64> = base.windows(2).map(|w| ratio_f64(w[1] - w[0])).collect();

        let reference_scheme = match (reference_scheme, reference) {
            (Some(s), _) => s,
            (None, Reference::Fine(cfg)) => {
                let outer = plans
                    .iter()
                    .map(|p| p.inner_radius.max(p.outer_radius))
                    .fold(0.0, f64::max);
                let j_max = plans.iter().map(|p| p.outer_radius).fold(0.0, f64::max);
                let radius = cfg.i_ref.unwrap_or(1.5 * outer);
                if radius < j_max {
                    return Err(Error::Domain(format!(
                        "reference radius {radius} is below the state radius {j_max}"
                    )));
                }
                let profile = plans[0].profile;
                let modes = enumerate_modes(d, radius, &profile)?;
                if modes.is_empty() {
                    return Err(Error::BudgetTooSmall { budget: 0, radius });
                }
                let grid = MergedTimeGrid::common(fine.clone(), modes.len())?;
                with_grid(Scheme::new(grid, modes.clone(), modes, g.clone())?)?
            }
            (None, Reference::Plan(_)) => unreachable!("plan reference is built above"),
        };

        let mut union_index: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut union_lineages = Vec::new();
        let ref_state: HashMap<&[u32], usize> = reference_scheme
            .state_modes()
            .iter()
            .enumerate()
            .map(|(k, m)| (m.coords(), k))
            .collect();
        let mut lanes = Vec::with_capacity(schemes.len() + 1);
        for scheme in std::iter::once(&reference_scheme).chain(&schemes) {
            let node_fine = scheme
                .grid()
                .nodes()
                .iter()
                .map(|n| fine.binary_search(n).map(|k| k as u32))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::invalid("scheme node missing from the coupling grid"))?;
            let noise_union = scheme
                .noise_modes()
                .iter()
                .map(|m| {
                    *union_index.entry(m.coords().to_vec()).or_insert_with(|| {
                        union_lineages.push(m.lineage_key());
                        union_lineages.len() - 1
                    })
                })
                .collect();
            let state_ref = scheme
                .state_modes()
                .iter()
                .map(|m| ref_state.get(m.coords()).copied())
                .collect();
            let xi = xi.coefficients(scheme.state_modes())?;
            lanes.push(Lane {
                scheme: scheme.clone(),
                node_fine,
                noise_union,
                state_ref,
                xi,
            });
        }
        let fine_tau = fine.iter().map(|r| ratio_f64(*r)).collect();
        Ok(Self {
            lanes,
            union_lineages,
            base_dt,
            levels,
            fine_tau,
            options,
        })
    }

    /// Drops the compared schemes; their nodes stay in the coupling grid.
    pub fn reference_only(mut self) -> Self {
        self.lanes.truncate(1);
        self
    }

    pub fn reference(&self) -> &Scheme {
        &self.lanes[0].scheme
    }

    pub fn schemes(&self) -> impl Iterator<Item = &Scheme> {
        self.lanes[1..].iter().map(|l| &l.scheme)
    }

    pub fn scheme_count(&self) -> usize {
        self.lanes.len() - 1
    }

    /// Number of fine intervals.
    pub fn fine_steps(&self) -> usize {
        self.fine_tau.len() - 1
    }

    pub fn fine_tau(&self) -> &[f64] {
        &self.fine_tau
    }

    pub fn options(&self) -> QuadratureOptions {
        self.options
    }

    /// Profile times `k/profile_points`.
    pub fn profile_times(&self) -> Vec<f64> {
        let p = self.options.profile_points;
        (0..=p).map(|k| k as f64 / p as f64).collect()
    }

    fn source(&self, key: NoiseKey) -> PathSource {
        PathSource::new(key, &self.union_lineages, self.base_dt.clone(), self.levels)
    }

    /// All fine increments, `[union mode][fine interval]`.
    fn fine_increments(&self, key: NoiseKey) -> Vec<Vec<f64>> {
        let mut source = self.source(key);
        let pieces = source.pieces();
        let mut out = vec![vec![0.0; self.fine_steps()]; self.union_lineages.len()];
        for (u, row) in out.iter_mut().enumerate() {
            for q in 0..source.base_intervals() {
                source.fill(u, q, &mut row[q * pieces..(q + 1) * pieces]);
            }
        }
        out
    }

    fn lane_increments(&self, lane: &Lane, fine: &[Vec<f64>], key: NoiseKey) -> BrownianIncrements {
        let grid = lane.scheme.grid();
        let mut increments = Vec::new();
        let mut lengths = Vec::new();
        for (i, &u) in lane.noise_union.iter().enumerate() {
            let n = grid.own_steps(i);
            let mut incs = Vec::with_capacity(n as usize);
            let mut lens = Vec::with_capacity(n as usize);
            for l in 1..=n {
                let a = grid.index_of(grid.own_point(i, l - 1)).expect("own point on grid");
                let b = grid.index_of(grid.own_point(i, l)).expect("own point on grid");
                let (fa, fb) = (lane.node_fine[a] as usize, lane.node_fine[b] as usize);
                incs.push(fine[u][fa..fb].iter().sum());
                lens.push(ratio_f64(grid.own_point(i, l) - grid.own_point(i, l - 1)));
            }
            increments.push(incs);
            lengths.push(lens);
        }
        BrownianIncrements {
            increments,
            lengths,
            lineages: lane.scheme.noise_modes().iter().map(|m| m.lineage_key()).collect(),
            key,
        }
    }

    /// The reference's own-grid increments on the shared path.
    pub fn reference_increments(&self, key: NoiseKey) -> BrownianIncrements {
        let fine = self.fine_increments(key);
        self.lane_increments(&self.lanes[0], &fine, key)
    }

    /// Own-grid increments of compared scheme `k` on the shared path.
    pub fn scheme_increments(&self, k: usize, key: NoiseKey) -> BrownianIncrements {
        let fine = self.fine_increments(key);
        self.lane_increments(&self.lanes[k + 1], &fine, key)
    }

    /// Initial coefficients of the reference.
    pub fn reference_xi(&self) -> &[f64] {
        &self.lanes[0].xi
    }

    /// Initial coefficients of compared scheme `k`.
    pub fn scheme_xi(&self, k: usize) -> &[f64] {
        &self.lanes[k + 1].xi
    }

    /// One replication: all runs stream through the fine grid together.
    pub fn replicate(&self, key: NoiseKey) -> Result<Replication> {
        let mut runs = self
            .lanes
            .iter()
            .map(|lane| lane.scheme.start(&lane.xi))
            .collect::<Result<Vec<SchemeRun<'_>>>>()?;
        let mut acc: Vec<Vec<f64>> = self
            .lanes
            .iter()
            .map(|l| vec![0.0; l.noise_union.len()])
            .collect();
        let mut incs = Vec::new();
        let mut buffer = FineBuffer::new(self.source(key), self.union_lineages.len());

        let ref_modes = self.lanes[0].scheme.state_modes().len();
        let mut energy = vec![0.0; ref_modes];
        let mut before = vec![0.0; ref_modes];
        let mut error_sq = vec![0.0; self.scheme_count()];
        let profile_times = self.profile_times();
        let mut profile: Vec<Vec<f64>> = vec![Vec::with_capacity(profile_times.len()); self.scheme_count()];
        for (k, lane) in self.lanes[1..].iter().enumerate() {
            profile[k].push(lane.xi.iter().map(|v| v * v).sum());
        }
        let mut next_profile = 1;
        let mut ref_values = vec![0.0; ref_modes];
        let mut values: Vec<Vec<f64>> = self.lanes[1..]
            .iter()
            .map(|l| vec![0.0; l.scheme.state_modes().len()])
            .collect();

        let q = self.options.time_quad;
        for f in 0..self.fine_steps() {
            for (lane_idx, (lane, run)) in self.lanes.iter().zip(runs.iter_mut()).enumerate() {
                while (lane.node_fine[run.position()] as usize) < f + 1 {
                    let m = run.position() + 1;
                    let (lo, hi) = (lane.node_fine[m - 1] as usize, lane.node_fine[m] as usize);
                    buffer.ensure(hi);
                    let sums = &mut acc[lane_idx];
                    for r in lo..hi {
                        let row = buffer.row(r);
                        for (s, &u) in sums.iter_mut().zip(&lane.noise_union) {
                            *s += row[u];
                        }
                    }
                    incs.clear();
                    for &i in lane.scheme.grid().active(m) {
                        incs.push(std::mem::take(&mut sums[i as usize]));
                    }
                    if lane_idx == 0 {
                        before.copy_from_slice(run.state());
                    }
                    run.advance(&incs)?;
                    if lane_idx == 0 {
                        let dt = lane.scheme.grid().dt(m);
                        for ((e, a), b) in energy.iter_mut().zip(&before).zip(run.state()) {
                            *e += 0.5 * dt * (a * a + b * b);
                        }
                    }
                }
            }

            let (a, b) = (self.fine_tau[f], self.fine_tau[f + 1]);
            let h = (b - a) / q as f64;
            for k in 0..q * usize::from(self.scheme_count() > 0) {
                let t = a + (k as f64 + 0.5) * h;
                runs[0].evaluate_between(t, &mut ref_values)?;
                for (s, lane) in self.lanes[1..].iter().enumerate() {
                    runs[s + 1].evaluate_between(t, &mut values[s])?;
                    error_sq[s] += h * distance_sq(&ref_values, &values[s], &lane.state_ref);
                }
            }
            while next_profile < profile_times.len() && profile_times[next_profile] <= b {
                let t = profile_times[next_profile];
                for s in 0..self.scheme_count() {
                    runs[s + 1].evaluate_between(t, &mut values[s])?;
                    profile[s].push(values[s].iter().map(|v| v * v).sum());
                }
                next_profile += 1;
            }
            buffer.release(f + 1);
        }
        Ok(Replication {
            error_sq,
            profile,
            reference_energy: energy,
        })
    }
}

fn ratio_f64(r: GridPoint) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `‖x_ref − x‖²` over the union of both mode sets.
fn distance_sq(reference: &[f64], x: &[f64], state_ref: &[Option<usize>]) -> f64 {
    let mut covered = 0.0;
    let mut total = 0.0;
    for (v, slot) in x.iter().zip(state_ref) {
        match slot {
            Some(r) => {
                let diff = reference[*r] - v;
                total += diff * diff;
                covered += reference[*r] * reference[*r];
            }
            None => total += v * v,
        }
    }
    // reference modes the scheme does not carry contribute their full energy
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    total + (ref_energy - covered).max(0.0)
}

/// Lazily generated fine increments, one row of union modes per interval.
struct FineBuffer {
    source: PathSource,
    modes: usize,
    rows: VecDeque<Vec<f64>>,
    spare: Vec<Vec<f64>>,
    front: usize,
    pieces: Vec<f64>,
}

impl FineBuffer {
    fn new(source: PathSource, modes: usize) -> Self {
        let pieces = vec![0.0; source.pieces()];
        Self {
            source,
            modes,
            rows: VecDeque::new(),
            spare: Vec::new(),
            front: 0,
            pieces,
        }
    }

    /// Generates rows up to (excluding) fine interval `hi`.
    fn ensure(&mut self, hi: usize) {
        let width = self.pieces.len();
        while self.front + self.rows.len() < hi {
            let q = (self.front + self.rows.len()) / width;
            let start = self.rows.len();
            for _ in 0..width {
                let mut row = self.spare.pop().unwrap_or_default();
                row.resize(self.modes, 0.0);
                self.rows.push_back(row);
            }
            for u in 0..self.modes {
                self.source.fill(u, q, &mut self.pieces);
                for (p, &v) in self.pieces.iter().enumerate() {
                    self.rows[start + p][u] = v;
                }
            }
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.rows[r - self.front]
    }

    /// Drops rows before fine interval `lo`.
    fn release(&mut self, lo: usize) {
        while self.front < lo && !self.rows.is_empty() {
            let row = self.rows.pop_front().expect("non-empty");
            self.spare.push(row);
            self.front += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{plan_nonuniform, AllocationPlan};
    use crate::spectral::CovarianceProfile;
    use std::f64::consts::PI;

    fn profile(gamma: f64) -> CovarianceProfile {
        CovarianceProfile::power(gamma).unwrap()
    }

    #[test]
    fn additive_stats_examples() {
        let p = CovarianceProfile::power(3.0).unwrap();
        let mode = MultiIndex::new(vec![1], &p).unwrap();
        let one = NonlinearityG::Constant(1.0);
        let s = exact_additive_stats(&mode, 0.0, 1.0, &one).unwrap();
        let expected = (1.0 - (-2.0 * PI * PI).exp()) / (2.0 * PI * PI);
        assert!((s.variance - expected).abs() < 1e-15);
        assert!((s.variance - 0.050_660_6).abs() < 1e-7);
        let s0 = exact_additive_stats(&mode, 0.7, 0.0, &one).unwrap();
        assert_eq!(s0.variance, 0.0);
        assert_eq!(s0.mean, 0.7);
        let far = MultiIndex::new(vec![1000], &p).unwrap();
        assert!(exact_additive_stats(&far, 0.0, 1.0, &one).unwrap().variance < 1e-14);
        assert!(exact_additive_stats(&mode, 0.0, 1.0, &NonlinearityG::Tanh).is_err());
    }

    #[test]
    fn additive_energy_is_the_time_integral() {
        let p = profile(3.0);
        let mode = MultiIndex::new(vec![2], &p).unwrap();
        let one = NonlinearityG::Constant(1.0);
        let n = 20_000;
        let h = 1.0 / n as f64;
        let integral: f64 = (0..n)
            .map(|k| exact_additive_stats(&mode, 0.0, (k as f64 + 0.5) * h, &one).unwrap().variance * h)
            .sum();
        assert!((integral - additive_energy(&mode)).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ReferenceConfig::new(16).validate().is_ok());
        assert!(ReferenceConfig::new(2).validate().is_err());
        assert!(ReferenceConfig::new(32).with_coupling(16).validate().is_ok());
        assert!(ReferenceConfig::new(24).with_coupling(16).validate().is_err());
        assert!(ReferenceConfig::new(16).with_i_ref(-1.0).validate().is_err());
    }

    fn small_plan() -> AllocationPlan {
        plan_nonuniform(&profile(3.0), 1, 16).unwrap()
    }

    #[test]
    fn coupled_increments_are_exact_sums() {
        let plan = small_plan();
        let sys = CoupledSystem::new(
            &[&plan],
            &NonlinearityG::Constant(1.0),
            &InitialValue::Zero,
            Reference::Fine(ReferenceConfig::new(8).with_coupling(4)),
            None,
            QuadratureOptions::default(),
        )
        .unwrap();
        let key = NoiseKey::new(3, 1);
        let fine = sys.reference_increments(key);
        let coarse = sys.scheme_increments(0, key);
        let tau = sys.fine_tau();
        let grid = sys.schemes().next().unwrap().grid();
        let ref_modes = sys.reference().noise_modes();
        for (i, mode) in plan.noise_modes.iter().enumerate() {
            let r = ref_modes.iter().position(|m| m.coords() == mode.coords()).unwrap();
            for l in 1..=grid.own_steps(i) {
                let a = ratio_f64(grid.own_point(i, l - 1));
                let b = ratio_f64(grid.own_point(i, l));
                let s: f64 = (0..sys.fine_steps())
                    .filter(|&f| tau[f] >= a && tau[f + 1] <= b)
                    .map(|f| fine.mode(r)[f])
                    .sum();
                assert!((s - coarse.mode(i)[(l - 1) as usize]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let plan = small_plan();
        let xi = InitialValue::Spectral(vec![(vec![1], 1.0)]);
        for g in [NonlinearityG::Constant(1.0), NonlinearityG::Tanh] {
            let sys = CoupledSystem::new(&[&plan], &g, &xi, Reference::Plan(&plan), None, QuadratureOptions::default())
                .unwrap();
            for r in 0..3 {
                let rep = sys.replicate(NoiseKey::new(1, r)).unwrap();
                assert_eq!(rep.error_sq, vec![0.0]);
            }
        }
    }

    #[test]
    fn streaming_matches_recorded_trajectories() {
        let plan = small_plan();
        let g = NonlinearityG::Sin;
        let xi = InitialValue::Spectral(vec![(vec![1], 0.5), (vec![2], -0.25)]);
        let options = QuadratureOptions {
            time_quad: 2,
            profile_points: 8,
        };
        let sys = CoupledSystem::new(&[&plan], &g, &xi, Reference::Fine(ReferenceConfig::new(4)), None, options)
            .unwrap();
        let key = NoiseKey::new(5, 2);
        let rep = sys.replicate(key).unwrap();

        let ref_traj = sys.reference().run(sys.reference_xi(), &sys.reference_increments(key)).unwrap();
        let scheme = sys.schemes().next().unwrap();
        let traj = scheme.run(sys.scheme_xi(0), &sys.scheme_increments(0, key)).unwrap();
        let ref_modes = sys.reference().state_modes();
        let tau = sys.fine_tau();
        let mut expected = 0.0;
        for f in 0..sys.fine_steps() {
            let h = (tau[f + 1] - tau[f]) / 2.0;
            for k in 0..2 {
                let t = tau[f] + (k as f64 + 0.5) * h;
                let x = ref_traj.at(t).unwrap();
                let y = traj.at(t).unwrap();
                let mut full = x.clone();
                for (j, m) in scheme.state_modes().iter().enumerate() {
                    let r = ref_modes.iter().position(|q| q.coords() == m.coords()).unwrap();
                    full[r] -= y[j];
                }
                expected += h * full.iter().map(|v| v * v).sum::<f64>();
            }
        }
        assert!((rep.error_sq[0] - expected).abs() <= 1e-12 * expected, "{} vs {expected}", rep.error_sq[0]);
        for (k, &t) in sys.profile_times().iter().enumerate() {
            let y = traj.at(t).unwrap();
            let e: f64 = y.iter().map(|v| v * v).sum();
            assert!((rep.profile[0][k] - e).abs() <= 1e-12 * e.max(1e-300));
        }
    }

    #[test]
    fn zero_noise_reference_tracks_the_semigroup() {
        let plan = small_plan();
        let xi = InitialValue::Spectral(vec![(vec![1], 1.0), (vec![2], 0.5)]);
        let mut errors = Vec::new();
        for rho in [4u64, 8, 16] {
            let sys = CoupledSystem::new(
                &[&plan],
                &NonlinearityG::Constant(0.0),
                &xi,
                Reference::Fine(ReferenceConfig::new(rho)),
                None,
                QuadratureOptions::default(),
            )
            .unwrap();
            let traj = sys
                .reference()
                .run(sys.reference_xi(), &sys.reference_increments(NoiseKey::new(0, 0)))
                .unwrap();
            let y = traj.at(1.0).unwrap();
            let exact1 = (-PI * PI).exp();
            let exact2 = 0.5 * (-4.0 * PI * PI).exp();
            errors.push((y[0] - exact1).abs().max((y[1] - exact2).abs()));
        }
        // first order in the fine step
        assert!(errors[1] < 0.6 * errors[0] && errors[2] < 0.6 * errors[1], "{errors:?}");
    }

    #[test]
    fn nested_coupling_shares_the_path() {
        let plan = small_plan();
        let build = |rho: u64| {
            CoupledSystem::new(
                &[&plan],
                &NonlinearityG::Constant(1.0),
                &InitialValue::Zero,
                Reference::Fine(ReferenceConfig::new(rho).with_coupling(4)),
                None,
                QuadratureOptions::default(),
            )
            .unwrap()
        };
        let key = NoiseKey::new(8, 8);
        let coarse = build(4).scheme_increments(0, key);
        let fine = build(16).scheme_increments(0, key);
        for (a, b) in coarse.increments.iter().zip(&fine.increments) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_radius_must_cover_state() {
        let plan = small_plan();
        let err = CoupledSystem::new(
            &[&plan],
            &NonlinearityG::Constant(1.0),
            &InitialValue::Zero,
            Reference::Fine(ReferenceConfig::new(4).with_i_ref(1.0)),
            None,
            QuadratureOptions::default(),
        );
        assert!(err.is_err());
    }
}

//! Drift-implicit Euler on the merged grid.
//!
//! At node `τ_m` every state mode `j` is updated as
//!
//! ```text
//! B_j   = Ŷ_j(τ_{m−1}) + Σ_{i∈K_m} λ_i^{1/2} c_{i,j}(X̂(s_{m,i})) Γ_j(τ_{m−1})/Γ_j(s_{m,i}) (β_i(τ_m) − β_i(s_{m,i}))
//! Ŷ_j(t) = B_j / (1 + μ_j (t − τ_{m−1})),   t ∈ ]τ_{m−1}, τ_m]
//! ```
//!
//! so between nodes `X̂` is the resolvent applied to the full bracket of the
//! interval. The run keeps `g(X̂(τ_p))` for every node `p` that some mode
//! still has as its last own-grid point, and drops it once all such modes
//! have stepped past it.

use std::collections::{HashMap, VecDeque};

use crate::allocation::AllocationPlan;
use crate::error::{Error, Result};
use crate::nemytskij::{grid_size_for, NonlinearityG, Projector};
use crate::noise::BrownianIncrements;
use crate::spectral::MultiIndex;
use crate::transform::SpatialField;
use crate::timegrid::MergedTimeGrid;

/// Static description of one discretization: grid, mode sets and `g`.
#[derive(Debug, Clone)]
pub struct Scheme {
    grid: MergedTimeGrid,
    noise_modes: Vec<MultiIndex>,
    sqrt_lambda: Vec<f64>,
    state_modes: Vec<MultiIndex>,
    mus: Vec<f64>,
    /// position of each noise mode among the state modes
    noise_to_state: Vec<Option<usize>>,
    g: NonlinearityG,
    spatial_grid: usize,
    cache_fields: bool,
}

impl Scheme {
    /// Scheme on the merged grid of the plan's step counts.
    pub fn from_plan(plan: &AllocationPlan, g: NonlinearityG) -> Result<Self> {
        let grid = MergedTimeGrid::build(&plan.steps)?;
        Self::new(grid, plan.noise_modes.clone(), plan.state_modes.clone(), g)
    }

    /// Scheme on an explicit grid whose modes align with `noise_modes`.
    pub fn new(
        grid: MergedTimeGrid,
        noise_modes: Vec<MultiIndex>,
        state_modes: Vec<MultiIndex>,
        g: NonlinearityG,
    ) -> Result<Self> {
        if grid.mode_count() != noise_modes.len() {
            return Err(Error::invalid(format!(
                "grid has {} modes but {} noise modes were given",
                grid.mode_count(),
                noise_modes.len()
            )));
        }
        let dims: Vec<usize> = noise_modes
            .iter()
            .chain(&state_modes)
            .map(|m| m.dim())
            .collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::invalid("all modes must have the same dimension"));
        }
        let index: HashMap<&[u32], usize> = state_modes
            .iter()
            .enumerate()
            .map(|(k, m)| (m.coords(), k))
            .collect();
        let noise_to_state = noise_modes.iter().map(|m| index.get(m.coords()).copied()).collect();
        let max_freq = noise_modes
            .iter()
            .chain(&state_modes)
            .map(|m| m.max_coord())
            .max()
            .unwrap_or(1);
        Ok(Self {
            sqrt_lambda: noise_modes.iter().map(|m| m.lambda().sqrt()).collect(),
            mus: state_modes.iter().map(|m| m.mu()).collect(),
            spatial_grid: grid_size_for(max_freq),
            grid,
            noise_modes,
            state_modes,
            noise_to_state,
            g,
            cache_fields: true,
        })
    }

    /// Overrides the spatial grid size used for `g(X̂)`.
    pub fn with_spatial_grid(mut self, m_s: usize) -> Result<Self> {
        let max_freq = self
            .noise_modes
            .iter()
            .chain(&self.state_modes)
            .map(|m| m.max_coord())
            .max()
            .unwrap_or(1);
        if !m_s.is_power_of_two() || m_s < 2 * max_freq as usize {
            return Err(Error::Aliasing {
                grid: m_s,
                freq: max_freq,
            });
        }
        self.spatial_grid = m_s;
        Ok(self)
    }

    /// Store states instead of `g(X̂)` fields and recompute on use.
    pub fn without_field_cache(mut self) -> Self {
        self.cache_fields = false;
        self
    }

    pub fn grid(&self) -> &MergedTimeGrid {
        &self.grid
    }

    pub fn noise_modes(&self) -> &[MultiIndex] {
        &self.noise_modes
    }

    pub fn state_modes(&self) -> &[MultiIndex] {
        &self.state_modes
    }

    pub fn g(&self) -> &NonlinearityG {
        &self.g
    }

    pub fn spatial_grid(&self) -> usize {
        self.spatial_grid
    }

    fn dim(&self) -> usize {
        self.state_modes
            .first()
            .or(self.noise_modes.first())
            .map_or(1, |m| m.dim())
    }

    /// Starts a run from the initial coefficients `⟨ξ, h_j⟩`.
    pub fn start(&self, xi: &[f64]) -> Result<SchemeRun<'_>> {
        SchemeRun::new(self, xi)
    }

    /// Runs the whole grid on own-grid increments and records every node.
    pub fn run(&self, xi: &[f64], increments: &BrownianIncrements) -> Result<Trajectory<'_>> {
        if increments.mode_count() != self.noise_modes.len() {
            return Err(Error::invalid("increments do not match the noise modes"));
        }
        let mut run = self.start(xi)?;
        let steps = self.grid.steps();
        let k = self.state_modes.len();
        let mut states = Vec::with_capacity((steps + 1) * k);
        let mut brackets = Vec::with_capacity((steps + 1) * k);
        states.extend_from_slice(run.state());
        brackets.extend_from_slice(run.state());
        let mut incs = Vec::new();
        for m in 1..=steps {
            incs.clear();
            for &i in self.grid.active(m) {
                let i = i as usize;
                let l = self.grid.prev_own(m, i) as usize;
                incs.push(increments.mode(i)[l]);
            }
            run.advance(&incs)?;
            states.extend_from_slice(run.state());
            brackets.extend_from_slice(run.bracket());
        }
        Ok(Trajectory {
            scheme: self,
            states,
            brackets,
        })
    }
}

#[derive(Debug)]
struct CacheEntry {
    field: Option<SpatialField>,
    state: Option<Vec<f64>>,
    log_gamma: Vec<f64>,
    refs: usize,
}

/// Live cache entries keyed by node; nodes are inserted in increasing order.
#[derive(Debug, Default)]
struct NodeCache {
    front: usize,
    slots: VecDeque<Option<CacheEntry>>,
    live: usize,
    spare: Vec<Vec<f64>>,
}

impl NodeCache {
    fn insert(&mut self, m: usize, entry: CacheEntry) {
        if self.slots.is_empty() {
            self.front = m;
        }
        while self.front + self.slots.len() < m {
            self.slots.push_back(None);
        }
        self.slots.push_back(Some(entry));
        self.live += 1;
    }

    fn get(&self, m: usize) -> Option<&CacheEntry> {
        m.checked_sub(self.front)
            .and_then(|k| self.slots.get(k))
            .and_then(Option::as_ref)
    }

    /// Drops `count` references to node `m`.
    fn release(&mut self, m: usize, count: usize) {
        let slot = &mut self.slots[m - self.front];
        let entry = slot.as_mut().expect("released entry is live");
        entry.refs -= count;
        if entry.refs == 0 {
            let entry = slot.take().expect("live");
            self.spare.push(entry.log_gamma);
            self.live -= 1;
            while let Some(None) = self.slots.front() {
                self.slots.pop_front();
                self.front += 1;
            }
        }
    }

    fn buffer(&mut self, values: &[f64]) -> Vec<f64> {
        let mut v = self.spare.pop().unwrap_or_default();
        v.clear();
        v.extend_from_slice(values);
        v
    }
}

/// A scheme run in progress, positioned at a grid node.
#[derive(Debug)]
pub struct SchemeRun<'a> {
    scheme: &'a Scheme,
    m: usize,
    y: Vec<f64>,
    log_gamma: Vec<f64>,
    bracket: Vec<f64>,
    noise: Vec<f64>,
    projected: Vec<f64>,
    groups: Vec<(usize, Vec<usize>)>,
    cache: NodeCache,
    projector: Option<Projector>,
    peak_cache: usize,
}

impl<'a> SchemeRun<'a> {
    fn new(scheme: &'a Scheme, xi: &[f64]) -> Result<Self> {
        let k = scheme.state_modes.len();
        if xi.len() != k {
            return Err(Error::invalid(format!(
                "initial value has {} coefficients for {k} state modes",
                xi.len()
            )));
        }
        if let Some(j) = xi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: 0, mode: j });
        }
        let projector = if scheme.g.as_constant().is_some() {
            None
        } else {
            let max_freq = (scheme.spatial_grid / 2) as u32;
            Some(Projector::new(scheme.dim(), scheme.spatial_grid, max_freq)?)
        };
        let mut run = Self {
            scheme,
            m: 0,
            y: xi.to_vec(),
            log_gamma: vec![0.0; k],
            bracket: xi.to_vec(),
            noise: vec![0.0; k],
            projected: vec![0.0; k],
            groups: Vec::new(),
            cache: NodeCache::default(),
            projector,
            peak_cache: 0,
        };
        run.remember(0, scheme.noise_modes.len());
        Ok(run)
    }

    pub fn scheme(&self) -> &'a Scheme {
        self.scheme
    }

    /// Index `m` of the current node.
    pub fn position(&self) -> usize {
        self.m
    }

    pub fn time(&self) -> f64 {
        self.scheme.grid.tau_at(self.m)
    }

    pub fn is_finished(&self) -> bool {
        self.m == self.scheme.grid.steps()
    }

    /// `Ŷ(τ_m)`.
    pub fn state(&self) -> &[f64] {
        &self.y
    }

    /// `log Γ_j(τ_m)`.
    pub fn log_gamma(&self) -> &[f64] {
        &self.log_gamma
    }

    /// Bracket `B_j` of the last step (the initial value before any step).
    pub fn bracket(&self) -> &[f64] {
        &self.bracket
    }

    /// Number of live cache entries.
    pub fn cache_len(&self) -> usize {
        self.cache.live
    }

    /// Largest number of cache entries held at once.
    pub fn peak_cache_len(&self) -> usize {
        self.peak_cache
    }

    fn remember(&mut self, m: usize, refs: usize) {
        if refs == 0 || m == self.scheme.grid.steps() {
            return;
        }
        let (field, state) = match (&self.scheme.g.as_constant(), self.scheme.cache_fields) {
            (Some(_), _) => (None, None),
            (None, true) => {
                let projector = self.projector.as_mut().expect("projector for non-constant g");
                (
                    Some(projector.g_field(&self.y, &self.scheme.state_modes, &self.scheme.g)),
                    None,
                )
            }
            (None, false) => (None, Some(self.y.clone())),
        };
        let log_gamma = self.cache.buffer(&self.log_gamma);
        self.cache.insert(
            m,
            CacheEntry {
                field,
                state,
                log_gamma,
                refs,
            },
        );
        self.peak_cache = self.peak_cache.max(self.cache.live);
    }

    /// Steps to `τ_{m+1}`. `increments[k]` is `β_i(τ_{m+1}) − β_i(s_{m+1,i})`
    /// for the `k`-th mode of `K_{m+1}`.
    pub fn advance(&mut self, increments: &[f64]) -> Result<()> {
        let scheme = self.scheme;
        let grid = &scheme.grid;
        let m = self.m + 1;
        if m > grid.steps() {
            return Err(Error::invalid("run is already at the final node"));
        }
        let active = grid.active(m);
        if increments.len() != active.len() {
            return Err(Error::invalid(format!(
                "step {m} needs {} increments, got {}",
                active.len(),
                increments.len()
            )));
        }

        // group the active modes by their predecessor node
        for group in &mut self.groups {
            group.1.clear();
        }
        let mut used = 0;
        for (k, &i) in active.iter().enumerate() {
            let p = grid.prev_node(m, i as usize);
            match self.groups[..used].iter().position(|g| g.0 == p) {
                Some(pos) => self.groups[pos].1.push(k),
                None => {
                    if used == self.groups.len() {
                        self.groups.push((p, Vec::new()));
                    }
                    self.groups[used].0 = p;
                    self.groups[used].1.push(k);
                    used += 1;
                }
            }
        }

        self.noise.iter_mut().for_each(|v| *v = 0.0);
        for g_idx in 0..used {
            let p = self.groups[g_idx].0;
            let entry = self.cache.get(p).ok_or(Error::MissingCacheEntry(p))?;
            let members = &self.groups[g_idx].1;
            match scheme.g.as_constant() {
                Some(c) => {
                    for &k in members {
                        let i = active[k] as usize;
                        if let Some(j) = scheme.noise_to_state[i] {
                            let w = scheme.sqrt_lambda[i] * increments[k];
                            let factor = (self.log_gamma[j] - entry.log_gamma[j]).exp();
                            self.noise[j] += c * w * factor;
                        }
                    }
                }
                None => {
                    let projector = self.projector.as_mut().expect("projector for non-constant g");
                    let recomputed;
                    let field = match (&entry.field, &entry.state) {
                        (Some(f), _) => f,
                        (None, Some(state)) => {
                            recomputed = projector.g_field(state, &scheme.state_modes, &scheme.g);
                            &recomputed
                        }
                        (None, None) => return Err(Error::MissingCacheEntry(p)),
                    };
                    let weights = members.iter().map(|&k| {
                        let i = active[k] as usize;
                        (scheme.noise_modes[i].coords(), scheme.sqrt_lambda[i] * increments[k])
                    });
                    projector.project(field, weights, &scheme.state_modes, &mut self.projected);
                    for (j, (n, v)) in self.noise.iter_mut().zip(&self.projected).enumerate() {
                        *n += (self.log_gamma[j] - entry.log_gamma[j]).exp() * v;
                    }
                }
            }
            let consumed = members.len();
            self.cache.release(p, consumed);
        }

        let dt = grid.dt(m);
        for j in 0..self.y.len() {
            let b = self.y[j] + self.noise[j];
            let y = resolvent(b, scheme.mus[j], dt);
            if !y.is_finite() {
                return Err(Error::NonFinite { step: m, mode: j });
            }
            self.bracket[j] = b;
            self.y[j] = y;
            self.log_gamma[j] -= (scheme.mus[j] * dt).ln_1p();
        }
        self.m = m;
        self.remember(m, active.len());
        Ok(())
    }

    /// `Ŷ(t)` for `t ∈ ]τ_{m−1}, τ_m]` of the last step, into `out`.
    pub fn evaluate_between(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let grid = &self.scheme.grid;
        if self.m == 0 {
            if t == 0.0 {
                out.copy_from_slice(&self.y);
                return Ok(());
            }
            return Err(Error::Domain(format!("time {t} is past the current node 0")));
        }
        let (a, b) = (grid.tau_at(self.m - 1), grid.tau_at(self.m));
        if !(t > a && t <= b) {
            return Err(Error::Domain(format!("time {t} outside ]{a}, {b}]")));
        }
        interior(&self.bracket, &self.scheme.mus, if t == b { grid.dt(self.m) } else { t - a }, out);
        Ok(())
    }
}

#[inline]
fn resolvent(bracket: f64, mu: f64, h: f64) -> f64 {
    bracket / (1.0 + mu * h)
}

fn interior(bracket: &[f64], mus: &[f64], h: f64, out: &mut [f64]) {
    for ((o, &b), &mu) in out.iter_mut().zip(bracket).zip(mus) {
        *o = resolvent(b, mu, h);
    }
}

/// A completed run with the state and bracket at every node.
#[derive(Debug, Clone)]
pub struct Trajectory<'a> {
    scheme: &'a Scheme,
    states: Vec<f64>,
    brackets: Vec<f64>,
}

impl Trajectory<'_> {
    pub fn state_modes(&self) -> &[MultiIndex] {
        &self.scheme.state_modes
    }

    /// `Ŷ(τ_m)`.
    pub fn node_state(&self, m: usize) -> &[f64] {
        let k = self.scheme.state_modes.len();
        &self.states[m * k..(m + 1) * k]
    }

    /// `Ŷ(t)` for any `t ∈ [0, 1]`.
    pub fn at(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let grid = &self.scheme.grid;
        let m = grid.interval_of(t);
        if m == 0 {
            return Ok(self.node_state(0).to_vec());
        }
        if t == grid.tau_at(m) {
            return Ok(self.node_state(m).to_vec());
        }
        let k = self.scheme.state_modes.len();
        let mut out = vec![0.0; k];
        interior(&self.brackets[m * k..(m + 1) * k], &self.scheme.mus, t - grid.tau_at(m - 1), &mut out);
        Ok(out)
    }
}

//! The merged time grid `0 = τ_0 < … < τ_M = 1` and the discrete semigroup
//! ledger `Γ_j`.
//!
//! Each noise mode `i` lives on its own uniform grid `{ℓ/n_i}`. The merged
//! grid is their union, computed exactly on rationals. At node `m` the active
//! set `K_m` holds the modes whose own grid contains `τ_m`, and `s_{m,i}` is
//! the last own-grid point of mode `i` strictly before `τ_m`.

use num_rational::Ratio;

use crate::error::{Error, Result};

/// Exact grid point.
pub type GridPoint = Ratio<u64>;

/// Default upper bound on `M·|𝓘|` for storing the predecessor table.
pub const PREV_TABLE_LIMIT: usize = 100_000_000;

/// How `s_{m,i}` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrevNodeStorage {
    /// Table when `M·|𝓘| <= PREV_TABLE_LIMIT`, otherwise on the fly.
    #[default]
    Auto,
    Table,
    OnTheFly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum OwnGrids {
    /// Mode `i` has the uniform grid `{ℓ/n_i}`.
    PerMode(Vec<u64>),
    /// Every mode is active at every merged node.
    Common(usize),
}

#[derive(Debug, Clone)]
pub struct MergedTimeGrid {
    nodes: Vec<GridPoint>,
    tau: Vec<f64>,
    /// `dt[m] = τ_m − τ_{m−1}`, with `dt[0] = 0`
    dt: Vec<f64>,
    own: OwnGrids,
    active_offsets: Vec<usize>,
    active: Vec<u32>,
    /// merged index of `s_{m,i}`, row-major in `(m, i)`
    prev: Option<Vec<u32>>,
}

impl MergedTimeGrid {
    /// Union of the uniform grids with `steps[i]` intervals each.
    pub fn build(steps: &[u64]) -> Result<Self> {
        Self::build_with(steps, PrevNodeStorage::Auto)
    }

    pub fn build_with(steps: &[u64], storage: PrevNodeStorage) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("time grid needs at least one mode"));
        }
        if steps.contains(&0) {
            return Err(Error::invalid("every step count must be at least 1"));
        }
        if steps.iter().any(|&n| n > u64::from(u32::MAX)) {
            return Err(Error::invalid("step count exceeds 2^32 - 1"));
        }
        let mut distinct = steps.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mut nodes: Vec<GridPoint> = distinct
            .iter()
            .flat_map(|&n| (0..=n).map(move |l| Ratio::new(l, n)))
            .collect();
        nodes.sort_unstable();
        nodes.dedup();

        let mut active_offsets = Vec::with_capacity(nodes.len() + 1);
        let mut active = Vec::new();
        for node in &nodes {
            active_offsets.push(active.len());
            for (i, &n) in steps.iter().enumerate() {
                if n % node.denom() == 0 {
                    active.push(i as u32);
                }
            }
        }
        active_offsets.push(active.len());

        let mut grid = Self::finish(nodes, OwnGrids::PerMode(steps.to_vec()), active_offsets, active);
        let modes = steps.len();
        let want_table = match storage {
            PrevNodeStorage::Table => true,
            PrevNodeStorage::OnTheFly => false,
            PrevNodeStorage::Auto => grid.steps().saturating_mul(modes) <= PREV_TABLE_LIMIT,
        };
        if want_table {
            let m_count = grid.nodes.len();
            let mut table = vec![0u32; m_count * modes];
            let mut last = vec![0u32; modes];
            for m in 1..m_count {
                table[m * modes..(m + 1) * modes].copy_from_slice(&last);
                for &i in grid.active(m) {
                    last[i as usize] = m as u32;
                }
            }
            grid.prev = Some(table);
        }
        Ok(grid)
    }

    /// Grid on the given nodes where every one of `modes` modes is active at
    /// every node. `nodes` must be strictly increasing from 0 to 1.
    pub fn common(nodes: Vec<GridPoint>, modes: usize) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != Ratio::from_integer(0) || *nodes.last().unwrap() != Ratio::from_integer(1) {
            return Err(Error::invalid("grid nodes must start at 0 and end at 1"));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid nodes must be strictly increasing"));
        }
        let all: Vec<u32> = (0..modes as u32).collect();
        let mut active_offsets = Vec::with_capacity(nodes.len() + 1);
        let mut active = Vec::with_capacity(nodes.len() * modes);
        for _ in &nodes {
            active_offsets.push(active.len());
            active.extend_from_slice(&all);
        }
        active_offsets.push(active.len());
        Ok(Self::finish(nodes, OwnGrids::Common(modes), active_offsets, active))
    }

    fn finish(nodes: Vec<GridPoint>, own: OwnGrids, active_offsets: Vec<usize>, active: Vec<u32>) -> Self {
        let tau: Vec<f64> = nodes.iter().map(to_f64).collect();
        let mut dt = vec![0.0; nodes.len()];
        for m in 1..nodes.len() {
            dt[m] = to_f64(&(nodes[m] - nodes[m - 1]));
        }
        Self {
            nodes,
            tau,
            dt,
            own,
            active_offsets,
            active,
            prev: None,
        }
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn mode_count(&self) -> usize {
        match &self.own {
            OwnGrids::PerMode(n) => n.len(),
            OwnGrids::Common(k) => *k,
        }
    }

    pub fn nodes(&self) -> &[GridPoint] {
        &self.nodes
    }

    pub fn node(&self, m: usize) -> GridPoint {
        self.nodes[m]
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn tau_at(&self, m: usize) -> f64 {
        self.tau[m]
    }

    pub fn dt(&self, m: usize) -> f64 {
        self.dt[m]
    }

    /// `K_m` as indices into the mode list.
    pub fn active(&self, m: usize) -> &[u32] {
        &self.active[self.active_offsets[m]..self.active_offsets[m + 1]]
    }

    pub fn is_common(&self) -> bool {
        matches!(self.own, OwnGrids::Common(_))
    }

    pub fn has_prev_table(&self) -> bool {
        self.prev.is_some()
    }

    /// Number of own-grid intervals of mode `i`.
    pub fn own_steps(&self, i: usize) -> u64 {
        match &self.own {
            OwnGrids::PerMode(n) => n[i],
            OwnGrids::Common(_) => self.steps() as u64,
        }
    }

    /// Own-grid point `t_{ℓ,i}`.
    pub fn own_point(&self, i: usize, l: u64) -> GridPoint {
        match &self.own {
            OwnGrids::PerMode(n) => Ratio::new(l, n[i]),
            OwnGrids::Common(_) => self.nodes[l as usize],
        }
    }

    /// Merged index of a grid point, if it is a node.
    pub fn index_of(&self, point: GridPoint) -> Option<usize> {
        self.nodes.binary_search(&point).ok()
    }

    /// Merged index of `s_{m,i}` for `m >= 1`.
    pub fn prev_node(&self, m: usize, i: usize) -> usize {
        debug_assert!(m >= 1);
        if let Some(table) = &self.prev {
            return table[m * self.mode_count() + i] as usize;
        }
        match &self.own {
            OwnGrids::Common(_) => m - 1,
            OwnGrids::PerMode(n) => {
                let l = self.prev_own_index(m, n[i]);
                self.index_of(Ratio::new(l, n[i]))
                    .expect("own grid points are merged nodes")
            }
        }
    }

    /// `s_{m,i}` as a time.
    pub fn prev_time(&self, m: usize, i: usize) -> f64 {
        self.tau[self.prev_node(m, i)]
    }

    /// Own-grid index `ℓ` of `s_{m,i}`.
    pub fn prev_own(&self, m: usize, i: usize) -> u64 {
        match &self.own {
            OwnGrids::Common(_) => (m - 1) as u64,
            OwnGrids::PerMode(n) => self.prev_own_index(m, n[i]),
        }
    }

    fn prev_own_index(&self, m: usize, n: u64) -> u64 {
        // ⌈τ_m n⌉ − 1
        let t = self.nodes[m];
        let scaled = u128::from(*t.numer()) * u128::from(n);
        let den = u128::from(*t.denom());
        (scaled.div_ceil(den) - 1) as u64
    }

    /// The merged interval `]τ_{m−1}, τ_m]` containing `t`, or 0 for `t = 0`.
    pub fn interval_of(&self, t: f64) -> usize {
        let m = self.tau.partition_point(|&x| x < t);
        m.min(self.steps())
    }

    /// Whether the scheme at time `t` depends on the increment of mode `i`
    /// over its `ℓ`-th own interval `]t_{ℓ−1,i}, t_{ℓ,i}]`.
    pub fn uses_increment(&self, i: usize, l: u64, t: f64) -> bool {
        if l == 0 || t <= 0.0 {
            return false;
        }
        let m = self.interval_of(t);
        self.own_point(i, l) <= self.nodes[m]
    }
}

fn to_f64(r: &GridPoint) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `log Γ_j(τ_m) = −Σ_{ν<=m} log(1 + μ_j (τ_ν − τ_{ν−1}))` for a set of modes.
#[derive(Debug, Clone)]
pub struct GammaLedger {
    mus: Vec<f64>,
    tau: Vec<f64>,
    dt: Vec<f64>,
    /// row-major `(m, j)`
    log_gamma: Vec<f64>,
}

/// Beyond this many intervals a ratio is taken from the cumulative table
/// instead of a direct product.
const DIRECT_SPAN: usize = 256;

impl GammaLedger {
    pub fn new(grid: &MergedTimeGrid, mus: &[f64]) -> Self {
        let modes = mus.len();
        let rows = grid.nodes.len();
        let mut log_gamma = vec![0.0; rows * modes];
        for m in 1..rows {
            let dt = grid.dt[m];
            for (j, &mu) in mus.iter().enumerate() {
                log_gamma[m * modes + j] = log_gamma[(m - 1) * modes + j] - (mu * dt).ln_1p();
            }
        }
        Self {
            mus: mus.to_vec(),
            tau: grid.tau.clone(),
            dt: grid.dt.clone(),
            log_gamma,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.mus.len()
    }

    /// `log Γ_j(τ_m)`.
    pub fn log_gamma_node(&self, m: usize, j: usize) -> f64 {
        self.log_gamma[m * self.mus.len() + j]
    }

    /// The row `(log Γ_j(τ_m))_j`.
    pub fn row(&self, m: usize) -> &[f64] {
        let k = self.mus.len();
        &self.log_gamma[m * k..(m + 1) * k]
    }

    fn locate(&self, t: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(self.tau.partition_point(|&x| x < t).min(self.tau.len() - 1))
    }

    /// `log Γ_j(t)`.
    pub fn gamma_at(&self, j: usize, t: f64) -> Result<f64> {
        let m = self.locate(t)?;
        if m == 0 {
            return Ok(0.0);
        }
        let partial = self.mus[j] * (t - self.tau[m - 1]);
        Ok(self.log_gamma_node(m - 1, j) - partial.ln_1p())
    }

    /// `Γ_j(t)/Γ_j(s)` for `s <= t`, in `(0, 1]`. Underflows to 0 for
    /// very stiff modes; [`GammaLedger::log_gamma_ratio`] stays finite.
    pub fn gamma_ratio(&self, j: usize, s: f64, t: f64) -> Result<f64> {
        Ok(self.log_gamma_ratio(j, s, t)?.exp())
    }

    /// `log(Γ_j(t)/Γ_j(s))` for `s <= t`, in `(−∞, 0]`.
    pub fn log_gamma_ratio(&self, j: usize, s: f64, t: f64) -> Result<f64> {
        if t < s {
            return Err(Error::Domain(format!("gamma ratio needs s <= t, got s = {s}, t = {t}")));
        }
        let ms = self.locate(s)?;
        let mt = self.locate(t)?;
        let mu = self.mus[j];
        if mt == 0 || s == t {
            return Ok(0.0);
        }
        // log Γ(t) − log Γ(s), split at the nodes between them
        let log_ratio = if ms == mt {
            let a = self.tau[mt - 1];
            (mu * (s - a)).ln_1p() - (mu * (t - a)).ln_1p()
        } else {
            let head = if ms == 0 {
                0.0
            } else {
                (mu * (s - self.tau[ms - 1])).ln_1p() - (mu * self.dt[ms]).ln_1p()
            };
            let middle = if mt - 1 - ms <= DIRECT_SPAN {
                -(ms + 1..mt).map(|v| (mu * self.dt[v]).ln_1p()).sum::<f64>()
            } else {
                self.log_gamma_node(mt - 1, j) - self.log_gamma_node(ms, j)
            };
            let tail = -(mu * (t - self.tau[mt - 1])).ln_1p();
            head + middle + tail
        };
        Ok(log_ratio.min(0.0))
    }
}

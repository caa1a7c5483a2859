//! Dirichlet-Laplacian eigenmodes on the unit cube and the covariance profile
//! of the driving noise.
//!
//! Modes are labelled by lattice points `i ∈ ℕ^d` with eigenfunctions
//! `h_i(u) = 2^{d/2} ∏ sin(i_ℓ π u_ℓ)` and eigenvalues `μ_i = π² |i|₂²`
//! (so that `Δ h_i = −μ_i h_i`). The noise covariance is diagonal in this
//! basis with weights `λ_i = λ(|i|₂)`, where `λ(r) = r^{−γ} L(r)`.

use std::f64::consts::PI;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound on the number of enumerated modes.
pub const DEFAULT_MODE_CAP: usize = 200_000;

/// Relative slack used when comparing `|i|₂` against a real radius, so that
/// radii like `64^{1/3}` that land a few ulps below an integer norm still
/// include that lattice point.
pub const RADIUS_SLACK: f64 = 1e-12;

/// A lattice point labelling one eigenmode, with its derived quantities.
///
/// Equality and hashing only look at the coordinates.
#[derive(Debug, Clone)]
pub struct MultiIndex {
    coords: Vec<u32>,
    norm_sq: u64,
    norm2: f64,
    mu: f64,
    lambda: f64,
}

impl MultiIndex {
    pub fn new(coords: Vec<u32>, profile: &CovarianceProfile) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::ZeroDimension);
        }
        if coords.contains(&0) {
            return Err(Error::Domain(format!(
                "mode coordinates must be >= 1, got {coords:?}"
            )));
        }
        let norm_sq: u64 = coords.iter().map(|&c| u64::from(c) * u64::from(c)).sum();
        let norm2 = (norm_sq as f64).sqrt();
        Ok(Self {
            mu: PI * PI * norm_sq as f64,
            lambda: profile.eval(norm2)?,
            coords,
            norm_sq,
            norm2,
        })
    }

    pub fn coords(&self) -> &[u32] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// `|i|₂²` as an exact integer.
    pub fn norm_sq(&self) -> u64 {
        self.norm_sq
    }

    pub fn norm2(&self) -> f64 {
        self.norm2
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn max_coord(&self) -> u32 {
        self.coords.iter().copied().max().unwrap_or(0)
    }

    /// Stable 64-bit key derived from the coordinates; used to address the
    /// mode's Brownian motion independently of any enumeration order.
    pub fn lineage_key(&self) -> u64 {
        let mut h = 0x9e37_79b9_7f4a_7c15_u64 ^ self.coords.len() as u64;
        for &c in &self.coords {
            h = splitmix64(h ^ u64::from(c));
        }
        h
    }
}

impl PartialEq for MultiIndex {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
    }
}

impl Eq for MultiIndex {}

impl Hash for MultiIndex {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.coords.hash(state);
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coords.iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Slowly varying factor `L` of the eigenvalue profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlowlyVarying {
    /// `L ≡ 1`.
    One,
    /// `L(r) = (1 + ln r)^p`.
    LogPower { p: f64 },
}

impl SlowlyVarying {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            SlowlyVarying::One => 1.0,
            SlowlyVarying::LogPower { p } => (1.0 + r.ln()).powf(p),
        }
    }

    pub fn is_one(&self) -> bool {
        matches!(self, SlowlyVarying::One)
            || matches!(self, SlowlyVarying::LogPower { p } if *p == 0.0)
    }

    /// Parses `one` / `1` or `log:<p>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("one") || s == "1" {
            return Ok(SlowlyVarying::One);
        }
        if let Some(p) = s.strip_prefix("log:") {
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidProfile(format!("bad log exponent in {s:?}")))?;
            return Ok(SlowlyVarying::LogPower { p });
        }
        Err(Error::InvalidProfile(format!(
            "unknown slowly varying factor {s:?} (expected `one` or `log:<p>`)"
        )))
    }
}

impl fmt::Display for SlowlyVarying {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlowlyVarying::One => write!(f, "one"),
            SlowlyVarying::LogPower { p } => write!(f, "log:{p}"),
        }
    }
}

/// Regularly varying eigenvalue profile `λ(r) = r^{−γ} L(r)` on `[1, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceProfile {
    gamma: f64,
    slowly_varying: SlowlyVarying,
}

impl CovarianceProfile {
    /// Checks that `λ` is positive, finite and non-increasing on `[1, ∞)`.
    /// Dimension-dependent conditions are checked by [`Self::check_dimension`].
    pub fn new(gamma: f64, slowly_varying: SlowlyVarying) -> Result<Self> {
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(Error::InvalidProfile(format!(
                "decay index must be positive and finite, got {gamma}"
            )));
        }
        if let SlowlyVarying::LogPower { p } = slowly_varying {
            if !p.is_finite() {
                return Err(Error::InvalidProfile("log exponent must be finite".into()));
            }
            // d/dr ln λ = (−γ + p/(1 + ln r)) / r, which is <= 0 on [1, ∞) iff p <= γ.
            if p > gamma {
                return Err(Error::InvalidProfile(format!(
                    "(1+ln r)^{p} with gamma = {gamma} is not non-increasing"
                )));
            }
        }
        Ok(Self {
            gamma,
            slowly_varying,
        })
    }

    pub fn power(gamma: f64) -> Result<Self> {
        Self::new(gamma, SlowlyVarying::One)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn slowly_varying(&self) -> SlowlyVarying {
        self.slowly_varying
    }

    /// Rejects `γ < d`, and `γ = d` unless `∫₁^∞ λ(r) r^{d−1} dr < ∞`, which
    /// for this family means `L = (1 + ln r)^p` with `p < −1`.
    pub fn check_dimension(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::ZeroDimension);
        }
        let d = d as f64;
        if self.gamma < d {
            return Err(Error::InvalidProfile(format!(
                "gamma = {} < d = {d}: covariance is not trace class",
                self.gamma
            )));
        }
        if self.gamma == d {
            let summable = matches!(self.slowly_varying, SlowlyVarying::LogPower { p } if p < -1.0);
            if !summable {
                return Err(Error::InvalidProfile(format!(
                    "gamma = d = {d} requires L(r) = (1+ln r)^p with p < -1 for summability"
                )));
            }
        }
        Ok(())
    }

    pub fn is_log_regime(&self, d: usize) -> bool {
        (self.gamma - 2.0 * d as f64).abs() <= 1e-12
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        if !r.is_finite() || r < 1.0 {
            return Err(Error::Domain(format!("lambda(r) requires r >= 1, got {r}")));
        }
        Ok(self.eval_unchecked(r))
    }

    pub(crate) fn eval_unchecked(&self, r: f64) -> f64 {
        r.powf(-self.gamma) * self.slowly_varying.eval(r)
    }
}

/// `λ(r)` for `r >= 1`.
pub fn eval_lambda(profile: &CovarianceProfile, r: f64) -> Result<f64> {
    profile.eval(r)
}

/// `h_i(u) = 2^{d/2} ∏ sin(i_ℓ π u_ℓ)` for `u` strictly inside the unit cube.
pub fn eval_eigenfunction(mode: &MultiIndex, u: &[f64]) -> Result<f64> {
    if u.len() != mode.dim() {
        return Err(Error::Domain(format!(
            "point has dimension {}, mode has dimension {}",
            u.len(),
            mode.dim()
        )));
    }
    if u.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Domain(format!("point {u:?} not inside ]0,1[^d")));
    }
    Ok(eigenfunction_unchecked(mode.coords(), u))
}

pub(crate) fn eigenfunction_unchecked(coords: &[u32], u: &[f64]) -> f64 {
    let scale = 2f64.powf(coords.len() as f64 / 2.0);
    coords
        .iter()
        .zip(u)
        .fold(scale, |acc, (&i, &x)| acc * (f64::from(i) * PI * x).sin())
}

/// All lattice points with `|i|₂ <= radius`, sorted by `(|i|₂, coords)`.
pub fn enumerate_modes(d: usize, radius: f64, profile: &CovarianceProfile) -> Result<Vec<MultiIndex>> {
    enumerate_modes_capped(d, radius, profile, DEFAULT_MODE_CAP)
}

pub fn enumerate_modes_capped(
    d: usize,
    radius: f64,
    profile: &CovarianceProfile,
    cap: usize,
) -> Result<Vec<MultiIndex>> {
    if d == 0 {
        return Err(Error::ZeroDimension);
    }
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::InvalidRadius(radius));
    }
    let r2 = radius * radius * (1.0 + RADIUS_SLACK);
    if r2 < d as f64 {
        return Ok(Vec::new());
    }
    // r2 >= d, so every coordinate ranges over 1..=floor(sqrt(r2 - (d-1))).
    let limit = r2.floor() as u64;

    let mut points: Vec<(u64, Vec<u32>)> = Vec::new();
    let mut coords = vec![1u32; d];
    collect_points(0, 0, limit, &mut coords, &mut points, cap, d, radius)?;
    points.sort_unstable_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    points
        .into_iter()
        .map(|(_, c)| MultiIndex::new(c, profile))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn collect_points(
    axis: usize,
    partial: u64,
    limit: u64,
    coords: &mut Vec<u32>,
    out: &mut Vec<(u64, Vec<u32>)>,
    cap: usize,
    d: usize,
    radius: f64,
) -> Result<()> {
    let remaining_axes = (d - axis - 1) as u64;
    let mut c: u64 = 1;
    loop {
        let sq = partial + c * c;
        // every later axis contributes at least 1
        if sq + remaining_axes > limit {
            break;
        }
        coords[axis] = c as u32;
        if axis + 1 == d {
            if out.len() >= cap {
                return Err(Error::ModeCapExceeded { d, radius, cap });
            }
            out.push((sq, coords.clone()));
        } else {
            collect_points(axis + 1, sq, limit, coords, out, cap, d, radius)?;
        }
        c += 1;
    }
    Ok(())
}

/// Pointwise initial profile on `]0,1[^d`.
pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Initial value `ξ`, given by its coefficients `⟨ξ, h_j⟩`.
#[derive(Clone)]
pub enum InitialValue {
    Zero,
    /// Explicit coefficient list; modes not listed have coefficient zero.
    Spectral(Vec<(Vec<u32>, f64)>),
    /// Pointwise function on `]0,1[^d`, projected onto the eigenbasis by
    /// midpoint quadrature with `grid` points per axis.
    Sampled {
        func: PointFn,
        grid: usize,
    },
}

impl fmt::Debug for InitialValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialValue::Zero => write!(f, "Zero"),
            InitialValue::Spectral(c) => f.debug_tuple("Spectral").field(c).finish(),
            InitialValue::Sampled { grid, .. } => write!(f, "Sampled {{ grid: {grid} }}"),
        }
    }
}

impl InitialValue {
    /// Coefficients `⟨ξ, h_j⟩` for the given modes, in the same order.
    pub fn coefficients(&self, modes: &[MultiIndex]) -> Result<Vec<f64>> {
        match self {
            InitialValue::Zero => Ok(vec![0.0; modes.len()]),
            InitialValue::Spectral(list) => {
                let mut out = vec![0.0; modes.len()];
                for (coords, value) in list {
                    if !value.is_finite() {
                        return Err(Error::Domain(format!(
                            "initial coefficient for {coords:?} is not finite"
                        )));
                    }
                    if let Some(pos) = modes.iter().position(|m| m.coords() == coords.as_slice()) {
                        out[pos] = *value;
                    }
                }
                Ok(out)
            }
            InitialValue::Sampled { func, grid } => {
                let Some(first) = modes.first() else {
                    return Ok(Vec::new());
                };
                let d = first.dim();
                let max_freq = modes.iter().map(|m| m.max_coord()).max().unwrap_or(1);
                let m = (*grid).max(2 * max_freq as usize).next_power_of_two();
                let transform = crate::transform::SineTransform::new(m, d);
                let field = crate::transform::SpatialField::from_fn(m, d, |u| func(u));
                let spectrum = transform.analyze(&field);
                let out: Vec<f64> = modes.iter().map(|mode| spectrum.at(mode.coords())).collect();
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain("sampled initial value is not finite".into()));
                }
                Ok(out)
            }
        }
    }
}

//! The multiplicative noise coefficients `c_{i,j}(x) = ⟨g(x)·h_i, h_j⟩`.
//!
//! States are synthesized on the midpoint grid, `g` is applied pointwise, and
//! inner products are midpoint-rule quadratures computed with fast
//! transforms. Two routes give the same quadrature: the cosine spectrum of
//! `f = g(x)` yields any single `c_{i,j}` from the identity
//! `2 sin a sin b = cos(a−b) − cos(a+b)`, and [`Projector::project`] forms
//! `Σ_i w_i c_{i,j}` for all `j` at once by analyzing `f·Σ_i w_i h_i`.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::{eigenfunction_unchecked, MultiIndex};
use crate::transform::{CosineSpectrum, SineSpectrum, SineTransform, SpatialField, TransformScratch};

/// Piecewise-linear `g` through a table of points, constant beyond its ends.
#[derive(Debug, Clone, PartialEq)]
pub struct TableG {
    xs: Vec<f64>,
    ys: Vec<f64>,
    source: String,
}

impl TableG {
    pub fn from_points(xs: Vec<f64>, ys: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != ys.len() {
            return Err(Error::invalid("table needs at least two (x, g(x)) rows"));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::invalid("table values must be finite"));
        }
        if xs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("table x values must be strictly increasing"));
        }
        Ok(Self {
            xs,
            ys,
            source: source.into(),
        })
    }

    /// Reads a two-column CSV `x,g(x)` (a non-numeric header row is skipped).
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::invalid(format!(
                    "{}: row {} has {} columns, expected 2",
                    path.display(),
                    row + 1,
                    record.len()
                )));
            }
            match (record[0].parse::<f64>(), record[1].parse::<f64>()) {
                (Ok(x), Ok(y)) => {
                    xs.push(x);
                    ys.push(y);
                }
                _ if row == 0 => continue,
                _ => {
                    return Err(Error::invalid(format!(
                        "{}: row {} is not numeric",
                        path.display(),
                        row + 1
                    )))
                }
            }
        }
        Self::from_points(xs, ys, path.display().to_string())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let k = self.xs.partition_point(|&v| v <= x);
        let (x0, x1) = (self.xs[k - 1], self.xs[k]);
        let (y0, y1) = (self.ys[k - 1], self.ys[k]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    pub fn max_slope(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.ys.windows(2))
            .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
            .fold(0.0, f64::max)
    }
}

/// The scalar function `g` of the Nemytskij operator `x ↦ g∘x`.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearityG {
    Constant(f64),
    Identity,
    Sin,
    Tanh,
    Table(TableG),
}

impl NonlinearityG {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            NonlinearityG::Constant(c) => *c,
            NonlinearityG::Identity => x,
            NonlinearityG::Sin => x.sin(),
            NonlinearityG::Tanh => x.tanh(),
            NonlinearityG::Table(t) => t.eval(x),
        }
    }

    /// `‖g′‖_∞`.
    pub fn derivative_bound(&self) -> f64 {
        match self {
            NonlinearityG::Constant(_) => 0.0,
            NonlinearityG::Identity | NonlinearityG::Sin | NonlinearityG::Tanh => 1.0,
            NonlinearityG::Table(t) => t.max_slope(),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            NonlinearityG::Constant(c) => Some(*c),
            _ => None,
        }
    }

    /// `const:C`, `zero`, `one`, `identity`, `sin`, `tanh` or `table:PATH`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        match spec {
            "zero" => return Ok(NonlinearityG::Constant(0.0)),
            "one" => return Ok(NonlinearityG::Constant(1.0)),
            "identity" => return Ok(NonlinearityG::Identity),
            "sin" => return Ok(NonlinearityG::Sin),
            "tanh" => return Ok(NonlinearityG::Tanh),
            _ => {}
        }
        if let Some(c) = spec.strip_prefix("const:") {
            let c: f64 = c
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad constant in g spec '{spec}'")))?;
            if !c.is_finite() {
                return Err(Error::invalid("g constant must be finite"));
            }
            return Ok(NonlinearityG::Constant(c));
        }
        if let Some(path) = spec.strip_prefix("table:") {
            return Ok(NonlinearityG::Table(TableG::from_csv(Path::new(path.trim()))?));
        }
        Err(Error::invalid(format!(
            "unknown g spec '{spec}' (expected const:C, zero, one, identity, sin, tanh or table:PATH)"
        )))
    }
}

impl fmt::Display for NonlinearityG {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NonlinearityG::Constant(c) => write!(f, "const:{c}"),
            NonlinearityG::Identity => f.write_str("identity"),
            NonlinearityG::Sin => f.write_str("sin"),
            NonlinearityG::Tanh => f.write_str("tanh"),
            NonlinearityG::Table(t) => write!(f, "table:{}", t.source),
        }
    }
}

/// Default spatial resolution `max(64, 4·next_pow2(max_freq))`.
pub fn grid_size_for(max_freq: u32) -> usize {
    (4 * (max_freq.max(1) as usize).next_power_of_two()).max(64)
}

/// `c_{i,j}` from the cosine spectrum of `f = g(x)`.
pub fn coefficient(spectrum: &CosineSpectrum, i: &[u32], j: &[u32]) -> Result<f64> {
    let d = i.len();
    let max = spectrum.max_freq();
    let mut k = vec![0u32; d];
    let mut total = 0.0;
    for subset in 0..(1usize << d) {
        let mut negative = false;
        for axis in 0..d {
            if subset >> axis & 1 == 1 {
                k[axis] = i[axis] + j[axis];
                negative = !negative;
            } else {
                k[axis] = i[axis].abs_diff(j[axis]);
            }
        }
        let value = spectrum.at(&k).ok_or(Error::FrequencyOutOfRange {
            freq: k.iter().copied().max().unwrap_or(0),
            max,
        })?;
        if negative {
            total -= value;
        } else {
            total += value;
        }
    }
    Ok(total)
}

/// Direct midpoint-rule `M^{-d} Σ_u f(u) h_i(u) h_j(u)`.
pub fn brute_quadrature(field: &SpatialField, i: &[u32], j: &[u32]) -> f64 {
    let weight = (field.grid_size() as f64).powi(field.dim() as i32);
    let mut total = 0.0;
    for (flat, &v) in field.values().iter().enumerate() {
        let u = field.point(flat);
        total += v * eigenfunction_unchecked(i, &u) * eigenfunction_unchecked(j, &u);
    }
    total / weight
}

/// Transform workspace for one dimension and grid size.
#[derive(Debug)]
pub struct Projector {
    transform: SineTransform,
    scratch: TransformScratch,
    spectrum: SineSpectrum,
    field: SpatialField,
}

impl Projector {
    /// Workspace on an `m_s^d` grid able to represent frequencies up to
    /// `max_freq` without aliasing their sums.
    pub fn new(d: usize, m_s: usize, max_freq: u32) -> Result<Self> {
        if d == 0 {
            return Err(Error::ZeroDimension);
        }
        if !m_s.is_power_of_two() || m_s < 2 * max_freq as usize {
            return Err(Error::Aliasing {
                grid: m_s,
                freq: max_freq,
            });
        }
        Ok(Self {
            transform: SineTransform::new(m_s, d),
            scratch: TransformScratch::default(),
            spectrum: SineSpectrum::zeros(m_s, d),
            field: SpatialField::zeros(m_s, d),
        })
    }

    pub fn grid_size(&self) -> usize {
        self.transform.grid_size()
    }

    pub fn dim(&self) -> usize {
        self.transform.dim()
    }

    /// `Σ_j x_j h_j` on the grid.
    pub fn synthesize(&mut self, coeffs: &[f64], modes: &[MultiIndex]) -> SpatialField {
        let mut out = SpatialField::zeros(self.grid_size(), self.dim());
        self.synthesize_into(coeffs, modes, &mut out);
        out
    }

    pub fn synthesize_into(&mut self, coeffs: &[f64], modes: &[MultiIndex], out: &mut SpatialField) {
        self.spectrum.clear();
        for (mode, &c) in modes.iter().zip(coeffs) {
            self.spectrum.set(mode.coords(), c);
        }
        self.transform.synthesize_into(&self.spectrum, out, &mut self.scratch);
    }

    /// `g(Σ_j x_j h_j)` on the grid.
    pub fn g_field(&mut self, coeffs: &[f64], modes: &[MultiIndex], g: &NonlinearityG) -> SpatialField {
        let mut out = self.synthesize(coeffs, modes);
        out.values_mut().iter_mut().for_each(|v| *v = g.eval(*v));
        out
    }

    pub fn cosine_spectrum(&self, field: &SpatialField) -> CosineSpectrum {
        self.transform.cosine_spectrum(field)
    }

    /// `out_j = Σ_i w_i ⟨f·h_i, h_j⟩` for every target mode `j`, where the
    /// sum runs over `(coords_i, w_i)` in `weights`.
    pub fn project<'a>(
        &mut self,
        f: &SpatialField,
        weights: impl IntoIterator<Item = (&'a [u32], f64)>,
        targets: &[MultiIndex],
        out: &mut [f64],
    ) {
        self.spectrum.clear();
        for (coords, w) in weights {
            let k = self.spectrum.index(coords);
            self.spectrum.set(coords, self.spectrum.values()[k] + w);
        }
        self.transform
            .synthesize_into(&self.spectrum, &mut self.field, &mut self.scratch);
        for (v, fv) in self.field.values_mut().iter_mut().zip(f.values()) {
            *v *= fv;
        }
        self.transform
            .analyze_into(&self.field, &mut self.spectrum, &mut self.scratch);
        for (o, mode) in out.iter_mut().zip(targets) {
            *o = self.spectrum.at(mode.coords());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{enumerate_modes, CovarianceProfile};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn modes(d: usize, radius: f64) -> Vec<MultiIndex> {
        enumerate_modes(d, radius, &CovarianceProfile::power(3.0).unwrap()).unwrap()
    }

    #[test]
    fn synthesis_examples() {
        let m = modes(1, 3.0);
        let mut p = Projector::new(1, 64, 3).unwrap();
        let field = p.synthesize(&[1.0, 0.0, 0.0], &m);
        // grid point 31 is u = 63/128
        let expected = 2f64.sqrt() * (PI * 63.0 / 128.0).sin();
        assert!((field.values()[31] - expected).abs() < 1e-14);
        let zero = p.synthesize(&[0.0; 3], &m);
        assert!(zero.values().iter().all(|&v| v == 0.0));

        // u = 0.5 exactly lies on the grid for odd M
        let t = SineTransform::new(3, 1);
        let mut spec = SineSpectrum::zeros(3, 1);
        spec.set(&[1], 1.0);
        assert!((t.synthesize(&spec).values()[1] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn synthesis_matches_naive_sum() {
        let m = modes(2, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coeffs: Vec<f64> = m.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut p = Projector::new(2, 64, 6).unwrap();
        let field = p.synthesize(&coeffs, &m);
        for _ in 0..16 {
            let flat = rng.random_range(0..64 * 64);
            let u = field.point(flat);
            let naive: f64 = m
                .iter()
                .zip(&coeffs)
                .map(|(mode, c)| c * eigenfunction_unchecked(mode.coords(), &u))
                .sum();
            assert!((field.values()[flat] - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn aliasing_guard() {
        assert!(matches!(Projector::new(1, 64, 33), Err(Error::Aliasing { .. })));
        assert!(Projector::new(1, 48, 4).is_err());
        assert!(Projector::new(1, 64, 32).is_ok());
        assert_eq!(grid_size_for(5), 64);
        assert_eq!(grid_size_for(20), 128);
    }

    #[test]
    fn constant_g_gives_identity() {
        let mut p = Projector::new(2, 64, 8).unwrap();
        let m = modes(2, 8.0);
        let f = p.g_field(&vec![0.3; m.len()], &m, &NonlinearityG::Constant(1.0));
        let spec = p.cosine_spectrum(&f);
        for a in &m {
            for b in &m {
                let c = coefficient(&spec, a.coords(), b.coords()).unwrap();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((c - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_example() {
        let m = modes(1, 1.0);
        let mut p = Projector::new(1, 256, 1).unwrap();
        let f = p.g_field(&[1.0], &m, &NonlinearityG::Identity);
        let c = coefficient(&p.cosine_spectrum(&f), &[1], &[1]).unwrap();
        let exact = 2f64.powf(1.5) * 4.0 / (3.0 * PI);
        assert!((c - exact).abs() < 1e-8, "{c} vs {exact}");
    }

    #[test]
    fn brute_quadrature_examples() {
        let f = SpatialField::zeros(16, 2);
        assert_eq!(brute_quadrature(&f, &[1, 2], &[3, 1]), 0.0);
        let one = SpatialField::from_fn(256, 1, |_| 1.0);
        assert!((brute_quadrature(&one, &[1], &[1]) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_frequency() {
        let p = Projector::new(1, 64, 4).unwrap();
        let spec = p.cosine_spectrum(&SpatialField::zeros(64, 1));
        assert!(matches!(
            coefficient(&spec, &[40], &[30]),
            Err(Error::FrequencyOutOfRange { .. })
        ));
    }

    #[test]
    fn transform_route_matches_brute_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gs = [NonlinearityG::Sin, NonlinearityG::Tanh, NonlinearityG::Identity];
        for case in 0..40 {
            let d = 1 + case % 2;
            let m_s = if d == 1 { 256 } else { 32 };
            let m = modes(d, 8.0);
            let coeffs: Vec<f64> = m.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut p = Projector::new(d, m_s, 16).unwrap();
            let f = p.g_field(&coeffs, &m, &gs[case % 3]);
            let spec = p.cosine_spectrum(&f);
            for _ in 0..4 {
                let i = &m[rng.random_range(0..m.len())];
                let j = &m[rng.random_range(0..m.len())];
                let a = coefficient(&spec, i.coords(), j.coords()).unwrap();
                let b = brute_quadrature(&f, i.coords(), j.coords());
                let scale = b.abs().max(f.l2_norm());
                assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
                let sym = coefficient(&spec, j.coords(), i.coords()).unwrap();
                assert_eq!(a, sym);
            }
        }
    }

    #[test]
    fn projection_matches_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 1..=2usize {
            let m = modes(d, 6.0);
            let coeffs: Vec<f64> = m.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut p = Projector::new(d, 64, 6).unwrap();
            let f = p.g_field(&coeffs, &m, &NonlinearityG::Tanh);
            let spec = p.cosine_spectrum(&f);
            let weights: Vec<f64> = m.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.0; m.len()];
            p.project(&f, m.iter().map(|x| x.coords()).zip(weights.iter().copied()), &m, &mut out);
            for (jdx, j) in m.iter().enumerate() {
                let expected: f64 = m
                    .iter()
                    .zip(&weights)
                    .map(|(i, w)| w * coefficient(&spec, i.coords(), j.coords()).unwrap())
                    .sum();
                assert!((out[jdx] - expected).abs() < 1e-12, "d={d} j={j}");
            }
        }
    }

    #[test]
    fn table_g() {
        let t = TableG::from_points(vec![-1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0], "inline").unwrap();
        assert_eq!(t.eval(-5.0), 0.0);
        assert_eq!(t.eval(-0.5), 0.5);
        assert_eq!(t.eval(1.0), 0.5);
        assert_eq!(t.max_slope(), 1.0);
        assert!(TableG::from_points(vec![0.0, 0.0], vec![1.0, 2.0], "x").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(&path, "x,g\n0,1\n1,3\n").unwrap();
        let g = NonlinearityG::parse(&format!("table:{}", path.display())).unwrap();
        assert_eq!(g.eval(0.5), 2.0);
        assert_eq!(g.derivative_bound(), 2.0);
        std::fs::write(&path, "0,1\n1\n").unwrap();
        assert!(NonlinearityG::parse(&format!("table:{}", path.display())).is_err());
    }

    #[test]
    fn parse_round_trip() {
        for spec in ["const:0.5", "identity", "sin", "tanh"] {
            assert_eq!(NonlinearityG::parse(spec).unwrap().to_string(), spec);
        }
        assert_eq!(NonlinearityG::parse("zero").unwrap(), NonlinearityG::Constant(0.0));
        assert!(NonlinearityG::parse("cube").is_err());
        assert!(NonlinearityG::parse("const:abc").is_err());
    }

    proptest! {
        #[test]
        fn lipschitz_bound(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let table = TableG::from_points(vec![-2.0, 0.0, 1.0, 4.0], vec![1.0, -1.0, 2.0, 2.5], "p").unwrap();
            for g in [NonlinearityG::Sin, NonlinearityG::Tanh, NonlinearityG::Identity, NonlinearityG::Table(table.clone())] {
                prop_assert!((g.eval(a) - g.eval(b)).abs() <= g.derivative_bound() * (a - b).abs() * (1.0 + 1e-12) + 1e-15);
            }
        }

        #[test]
        fn lipschitz_transfer(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = modes(1, 10.0);
            let x: Vec<f64> = m.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = m.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let mut p = Projector::new(1, 64, 10).unwrap();
            for g in [NonlinearityG::Sin, NonlinearityG::Tanh] {
                let fx = p.g_field(&x, &m, &g);
                let fy = p.g_field(&y, &m, &g);
                let diff: Vec<f64> = fx.values().iter().zip(fy.values()).map(|(a, b)| a - b).collect();
                let spatial = SpatialField::from_values(64, 1, diff).l2_norm();
                prop_assert!(spatial <= g.derivative_bound() * dist + 1e-10);
            }
        }
    }
}

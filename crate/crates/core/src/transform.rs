//! Fast sine/cosine transforms on the midpoint grid `u_k = (2k+1)/(2M)`.
//!
//! All three transforms are computed from a single zero-padded complex FFT of
//! length `2M` per line and applied axis by axis for `d > 1`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Values of a function on the `M^d` midpoint grid, row-major (axis 0 slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    m: usize,
    d: usize,
    values: Vec<f64>,
}

impl SpatialField {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            values: vec![0.0; m.pow(d as u32)],
        }
    }

    pub fn from_values(m: usize, d: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), m.pow(d as u32), "field size mismatch");
        Self { m, d, values }
    }

    pub fn from_fn(m: usize, d: usize, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut field = Self::zeros(m, d);
        let mut u = vec![0.0; d];
        for (flat, v) in field.values.iter_mut().enumerate() {
            grid_point(flat, m, &mut u);
            *v = f(&u);
        }
        field
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The midpoint coordinates of a flat grid index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut u = vec![0.0; self.d];
        grid_point(flat, self.m, &mut u);
        u
    }

    /// Discrete `L₂(]0,1[^d)` norm (midpoint rule).
    pub fn l2_norm(&self) -> f64 {
        let w = (self.m as f64).powi(self.d as i32);
        (self.values.iter().map(|v| v * v).sum::<f64>() / w).sqrt()
    }
}

fn grid_point(mut flat: usize, m: usize, u: &mut [f64]) {
    for slot in u.iter_mut().rev() {
        let k = flat % m;
        flat /= m;
        *slot = (2 * k + 1) as f64 / (2 * m) as f64;
    }
}

/// Sine coefficients indexed by frequency `0..M` per axis (frequency 0 is
/// always zero).
#[derive(Debug, Clone, PartialEq)]
pub struct SineSpectrum {
    m: usize,
    d: usize,
    values: Vec<f64>,
}

impl SineSpectrum {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            values: vec![0.0; m.pow(d as u32)],
        }
    }

    pub fn index(&self, coords: &[u32]) -> usize {
        debug_assert_eq!(coords.len(), self.d);
        coords.iter().fold(0usize, |acc, &c| {
            assert!((c as usize) < self.m, "frequency {c} outside sine spectrum of size {}", self.m);
            acc * self.m + c as usize
        })
    }

    pub fn at(&self, coords: &[u32]) -> f64 {
        self.values[self.index(coords)]
    }

    pub fn set(&mut self, coords: &[u32], value: f64) {
        let i = self.index(coords);
        self.values[i] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Normalized cosine spectrum `F(k) = M^{-d} Σ_u f(u) ∏ cos(k_ℓ π u_ℓ)` for
/// `k ∈ 0..=M` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineSpectrum {
    m: usize,
    d: usize,
    values: Vec<f64>,
}

impl CosineSpectrum {
    /// Largest frequency held per axis.
    pub fn max_freq(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn at(&self, k: &[u32]) -> Option<f64> {
        let side = self.m + 1;
        let mut idx = 0usize;
        for &c in k {
            if c as usize > self.m {
                return None;
            }
            idx = idx * side + c as usize;
        }
        Some(self.values[idx])
    }
}

#[derive(Debug, Clone, Copy)]
enum Kernel {
    SineSynthesis,
    SineAnalysis,
    CosineAnalysis,
}

/// Reusable buffers for [`SineTransform`].
#[derive(Debug, Default)]
pub struct TransformScratch {
    buf: Vec<Complex<f64>>,
    fft: Vec<Complex<f64>>,
    line_in: Vec<f64>,
    line_out: Vec<f64>,
    tmp_a: Vec<f64>,
    tmp_b: Vec<f64>,
}

/// Sine synthesis/analysis and cosine analysis on an `M^d` midpoint grid,
/// normalized to the orthonormal basis `h_j`.
#[derive(Clone)]
pub struct SineTransform {
    m: usize,
    d: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    twiddle_plus: Vec<Complex<f64>>,
    twiddle_minus: Vec<Complex<f64>>,
}

impl std::fmt::Debug for SineTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SineTransform")
            .field("m", &self.m)
            .field("d", &self.d)
            .finish()
    }
}

impl SineTransform {
    pub fn new(m: usize, d: usize) -> Self {
        assert!(m >= 2 && d >= 1, "transform needs m >= 2, d >= 1");
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(2 * m);
        let inverse = planner.plan_fft_inverse(2 * m);
        let angle = |j: usize| PI * j as f64 / (2 * m) as f64;
        let twiddle_plus = (0..=m).map(|j| Complex::from_polar(1.0, angle(j))).collect();
        let twiddle_minus = (0..=m).map(|j| Complex::from_polar(1.0, -angle(j))).collect();
        Self {
            m,
            d,
            forward,
            inverse,
            twiddle_plus,
            twiddle_minus,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn scratch(&self) -> TransformScratch {
        TransformScratch::default()
    }

    /// `Σ_j a_j h_j(u)` on the grid.
    pub fn synthesize(&self, spectrum: &SineSpectrum) -> SpatialField {
        let mut field = SpatialField::zeros(self.m, self.d);
        self.synthesize_into(spectrum, &mut field, &mut TransformScratch::default());
        field
    }

    pub fn synthesize_into(
        &self,
        spectrum: &SineSpectrum,
        out: &mut SpatialField,
        scratch: &mut TransformScratch,
    ) {
        debug_assert_eq!((spectrum.m, spectrum.d), (self.m, self.d));
        self.apply(&spectrum.values, &mut out.values, Kernel::SineSynthesis, scratch);
    }

    /// `⟨f, h_j⟩` by midpoint quadrature, for frequencies `0..M`.
    pub fn analyze(&self, field: &SpatialField) -> SineSpectrum {
        let mut spectrum = SineSpectrum::zeros(self.m, self.d);
        self.analyze_into(field, &mut spectrum, &mut TransformScratch::default());
        spectrum
    }

    pub fn analyze_into(
        &self,
        field: &SpatialField,
        out: &mut SineSpectrum,
        scratch: &mut TransformScratch,
    ) {
        debug_assert_eq!((field.m, field.d), (self.m, self.d));
        self.apply(&field.values, &mut out.values, Kernel::SineAnalysis, scratch);
    }

    pub fn cosine_spectrum(&self, field: &SpatialField) -> CosineSpectrum {
        let mut values = vec![0.0; (self.m + 1).pow(self.d as u32)];
        self.apply(
            &field.values,
            &mut values,
            Kernel::CosineAnalysis,
            &mut TransformScratch::default(),
        );
        CosineSpectrum {
            m: self.m,
            d: self.d,
            values,
        }
    }

    fn apply(&self, input: &[f64], output: &mut [f64], kernel: Kernel, s: &mut TransformScratch) {
        let m = self.m;
        let out_len = match kernel {
            Kernel::CosineAnalysis => m + 1,
            _ => m,
        };
        if self.d == 1 {
            self.line(input, output, kernel, s);
            return;
        }
        // shape[a] is the current length of axis a
        let mut shape = vec![m; self.d];
        let mut current = std::mem::take(&mut s.tmp_a);
        current.clear();
        current.extend_from_slice(input);
        let mut next = std::mem::take(&mut s.tmp_b);
        for axis in 0..self.d {
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let in_axis = shape[axis];
            next.clear();
            next.resize(outer * out_len * inner, 0.0);
            let mut line_in = std::mem::take(&mut s.line_in);
            let mut line_out = std::mem::take(&mut s.line_out);
            line_in.resize(in_axis, 0.0);
            line_out.resize(out_len, 0.0);
            for o in 0..outer {
                for i in 0..inner {
                    let base_in = o * in_axis * inner + i;
                    for k in 0..in_axis {
                        line_in[k] = current[base_in + k * inner];
                    }
                    self.line(&line_in, &mut line_out, kernel, s);
                    let base_out = o * out_len * inner + i;
                    for k in 0..out_len {
                        next[base_out + k * inner] = line_out[k];
                    }
                }
            }
            s.line_in = line_in;
            s.line_out = line_out;
            shape[axis] = out_len;
            std::mem::swap(&mut current, &mut next);
        }
        output.copy_from_slice(&current);
        s.tmp_a = current;
        s.tmp_b = next;
    }

    fn line(&self, input: &[f64], output: &mut [f64], kernel: Kernel, s: &mut TransformScratch) {
        let m = self.m;
        let buf = &mut s.buf;
        buf.clear();
        buf.resize(2 * m, Complex::new(0.0, 0.0));
        let sqrt2 = std::f64::consts::SQRT_2;
        match kernel {
            Kernel::SineSynthesis => {
                for j in 1..m {
                    buf[j] = self.twiddle_plus[j] * input[j];
                }
                s.fft.resize(self.inverse.get_inplace_scratch_len(), Complex::new(0.0, 0.0));
                self.inverse.process_with_scratch(buf, &mut s.fft);
                for k in 0..m {
                    output[k] = sqrt2 * buf[k].im;
                }
            }
            Kernel::SineAnalysis | Kernel::CosineAnalysis => {
                for k in 0..m {
                    buf[k] = Complex::new(input[k], 0.0);
                }
                s.fft.resize(self.forward.get_inplace_scratch_len(), Complex::new(0.0, 0.0));
                self.forward.process_with_scratch(buf, &mut s.fft);
                let inv_m = 1.0 / m as f64;
                if let Kernel::SineAnalysis = kernel {
                    output[0] = 0.0;
                    for j in 1..m {
                        output[j] = -(self.twiddle_minus[j] * buf[j]).im * sqrt2 * inv_m;
                    }
                } else {
                    for k in 0..=m {
                        output[k] = (self.twiddle_minus[k] * buf[k]).re * inv_m;
                    }
                }
            }
        }
    }
}

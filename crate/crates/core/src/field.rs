//! Spectral grid calculus on the circle T = [0, 2π).
//!
//! A [`GridField`] stores samples `f(2πj/n)` of a smooth periodic function.
//! Derivatives are spectral, integrals use the trapezoid rule (exact for
//! trigonometric polynomials of degree below `n`), and off-grid evaluation
//! goes through the trigonometric interpolant held in a [`Spectrum`].

use std::cell::RefCell;
use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward DFT `c_k = Σ_j v_j e^{-2πi jk/n}`.
pub(crate) fn fft_forward(buf: &mut [Complex<f64>]) {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()).process(buf));
}

/// Unnormalized inverse DFT.
pub(crate) fn fft_inverse(buf: &mut [Complex<f64>]) {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(buf.len()).process(buf));
}

/// Grid node `2πj/n`.
#[inline]
pub fn node(n: usize, j: usize) -> f64 {
    TAU * j as f64 / n as f64
}

/// Grid nodes of an `n`-point grid.
pub fn nodes(n: usize) -> Vec<f64> {
    (0..n).map(|j| node(n, j)).collect()
}

/// Check the grid size contract: a power of two, at least 8.
pub fn validate_grid(n: usize) -> Result<()> {
    if n >= 8 && n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::InvalidGrid(n))
    }
}

/// Off-grid evaluation method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Trigonometric interpolant; exact for band-limited data.
    #[default]
    BandLimited,
    /// Four-point periodic Lagrange cubic; O(1) per point.
    PeriodicCubic,
}

/// Samples of a 2π-periodic real function on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    values: Vec<f64>,
}

impl GridField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_grid(values.len())?;
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        Ok(Self { values })
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        validate_grid(n)?;
        Self::new((0..n).map(|j| f(node(n, j))).collect())
    }

    pub fn constant(n: usize, c: f64) -> Result<Self> {
        Self::from_fn(n, |_| c)
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Grid spacing `2π/n`.
    pub fn spacing(&self) -> f64 {
        TAU / self.n() as f64
    }

    /// `∫_T f dx = (2π/n) Σ f_j`.
    pub fn integrate(&self) -> f64 {
        self.spacing() * self.values.iter().sum::<f64>()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Pointwise map; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.n() != other.n() {
            return Err(Error::GridMismatch(self.n(), other.n()));
        }
        Self::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Spectral derivative of order 1, 2 or 3.
    ///
    /// The Nyquist mode is dropped for odd orders and kept for even orders,
    /// so the result is real and exact for bandwidth below `n/2`.
    pub fn differentiate(&self, order: usize) -> Result<Self> {
        if !(1..=3).contains(&order) {
            return Err(Error::DerivativeOrder(order));
        }
        let n = self.n();
        let mut buf: Vec<Complex<f64>> =
            self.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_forward(&mut buf);
        let half = n / 2;
        for (k, c) in buf.iter_mut().enumerate() {
            if k == half && order % 2 == 1 {
                *c = Complex::new(0.0, 0.0);
                continue;
            }
            let wave = if k <= half { k as f64 } else { k as f64 - n as f64 };
            *c *= Complex::new(0.0, wave).powu(order as u32);
        }
        fft_inverse(&mut buf);
        let scale = 1.0 / n as f64;
        Self::new(buf.iter().map(|c| c.re * scale).collect())
    }

    /// Real Fourier coefficients of the trigonometric interpolant.
    pub fn spectrum(&self) -> Spectrum {
        let n = self.n();
        let mut buf: Vec<Complex<f64>> =
            self.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_forward(&mut buf);
        let half = n / 2;
        let inv = 1.0 / n as f64;
        let mut cos = vec![0.0; half + 1];
        let mut sin = vec![0.0; half + 1];
        cos[0] = buf[0].re * inv;
        for k in 1..half {
            cos[k] = 2.0 * buf[k].re * inv;
            sin[k] = -2.0 * buf[k].im * inv;
        }
        cos[half] = buf[half].re * inv;
        Spectrum { cos, sin }
    }

    /// Band-limited interpolant at `x` (taken mod 2π); exact at nodes.
    pub fn interpolate(&self, x: f64) -> f64 {
        self.interpolate_with(x, Interpolation::BandLimited)
    }

    pub fn interpolate_with(&self, x: f64, method: Interpolation) -> f64 {
        if let Some(j) = self.node_index(x) {
            return self.values[j];
        }
        match method {
            Interpolation::BandLimited => self.spectrum().eval(x),
            Interpolation::PeriodicCubic => cubic(&self.values, x),
        }
    }

    fn node_index(&self, x: f64) -> Option<usize> {
        let n = self.n();
        let u = x.rem_euclid(TAU) / self.spacing();
        let r = u.round();
        ((u - r).abs() <= 1e-12).then(|| r as usize % n)
    }

    /// Grid samples of `f(m(x_j))`.
    pub fn compose(&self, m: &LiftedMap) -> Result<Self> {
        self.compose_with(m, Interpolation::BandLimited)
    }

    pub fn compose_with(&self, m: &LiftedMap, method: Interpolation) -> Result<Self> {
        if self.n() != m.n() {
            return Err(Error::GridMismatch(self.n(), m.n()));
        }
        let values = match method {
            Interpolation::BandLimited => {
                let s = self.spectrum();
                m.lift()
                    .iter()
                    .map(|&y| match self.node_index(y) {
                        Some(j) => self.values[j],
                        None => s.eval(y),
                    })
                    .collect()
            }
            Interpolation::PeriodicCubic => m
                .lift()
                .iter()
                .map(|&y| self.interpolate_with(y, method))
                .collect(),
        };
        Self::new(values)
    }

    /// CSV column with a `# n=<n> domain=2pi` header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# n={} domain=2pi", self.n())?;
        for v in &self.values {
            writeln!(w, "{v:.16e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> std::result::Result<Self, CsvError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(CsvError::MissingHeader)??;
        let n: usize = header
            .strip_prefix("# n=")
            .and_then(|rest| rest.strip_suffix(" domain=2pi"))
            .and_then(|s| s.parse().ok())
            .ok_or(CsvError::MissingHeader)?;
        let mut values = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v = line
                .trim()
                .parse()
                .map_err(|_| CsvError::BadValue { line: i + 2 })?;
            values.push(v);
        }
        if values.len() != n {
            return Err(CsvError::Length { expected: n, got: values.len() });
        }
        Ok(Self::new(values)?)
    }
}

/// Failures while reading a [`GridField`] CSV column.
#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("missing or malformed header")]
    MissingHeader,
    #[error("unparsable value on line {line}")]
    BadValue { line: usize },
    #[error("expected {expected} values, found {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Field(#[from] Error),
}

fn cubic(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    let h = TAU / n as f64;
    let u = x.rem_euclid(TAU) / h;
    let j = u.floor();
    let s = u - j;
    let j = j as usize % n;
    let at = |k: isize| values[(j as isize + k).rem_euclid(n as isize) as usize];
    let (fm, f0, f1, f2) = (at(-1), at(0), at(1), at(2));
    -s * (s - 1.0) * (s - 2.0) / 6.0 * fm + (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0 * f0
        - (s + 1.0) * s * (s - 2.0) / 2.0 * f1
        + (s + 1.0) * s * (s - 1.0) / 6.0 * f2
}

/// A real trigonometric polynomial `Σ_k cos[k]·cos(kx) + sin[k]·sin(kx)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Spectrum {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Spectrum {
    /// Build from coefficient tables; the shorter table is zero-padded.
    pub fn from_coeffs(mut cos: Vec<f64>, mut sin: Vec<f64>) -> Self {
        let len = cos.len().max(sin.len()).max(1);
        cos.resize(len, 0.0);
        sin.resize(len, 0.0);
        sin[0] = 0.0;
        Self { cos, sin }
    }

    /// Highest stored wave number.
    pub fn degree(&self) -> usize {
        self.cos.len() - 1
    }

    pub fn cos_coeffs(&self) -> &[f64] {
        &self.cos
    }

    pub fn sin_coeffs(&self) -> &[f64] {
        &self.sin
    }

    /// Drop trailing modes that are negligible relative to the largest one.
    pub fn trimmed(&self) -> Self {
        let peak = self
            .cos
            .iter()
            .chain(&self.sin)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = 4.0 * f64::EPSILON * peak;
        let mut len = self.cos.len();
        while len > 1 && self.cos[len - 1].abs() <= cut && self.sin[len - 1].abs() <= cut {
            len -= 1;
        }
        Self {
            cos: self.cos[..len].to_vec(),
            sin: self.sin[..len].to_vec(),
        }
    }

    /// Exact derivative of the polynomial.
    pub fn derivative(&self) -> Self {
        let mut cos = vec![0.0; self.cos.len()];
        let mut sin = vec![0.0; self.sin.len()];
        for k in 1..self.cos.len() {
            let kf = k as f64;
            cos[k] = kf * self.sin[k];
            sin[k] = -kf * self.cos[k];
        }
        Self { cos, sin }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (s1, c1) = x.sin_cos();
        let (mut c, mut s) = (1.0, 0.0);
        let mut acc = self.cos[0];
        for k in 1..self.cos.len() {
            (c, s) = (c * c1 - s * s1, s * c1 + c * s1);
            acc += self.cos[k] * c + self.sin[k] * s;
        }
        acc
    }

    /// Value and first three derivatives at `x`.
    pub fn eval_derivs(&self, x: f64) -> [f64; 4] {
        let (s1, c1) = x.sin_cos();
        let (mut c, mut s) = (1.0, 0.0);
        let mut out = [self.cos[0], 0.0, 0.0, 0.0];
        for k in 1..self.cos.len() {
            (c, s) = (c * c1 - s * s1, s * c1 + c * s1);
            let kf = k as f64;
            let (a, b) = (self.cos[k], self.sin[k]);
            let even = a * c + b * s;
            let odd = b * c - a * s;
            out[0] += even;
            out[1] += kf * odd;
            out[2] -= kf * kf * even;
            out[3] -= kf * kf * kf * odd;
        }
        out
    }

    /// Sample on an `n`-point grid.
    pub fn sample(&self, n: usize) -> Result<GridField> {
        GridField::from_fn(n, |x| self.eval(x))
    }
}

/// Lift of an orientation-preserving circle diffeomorphism with winding
/// number one: `lift[j] = X(x_j)` and `X(x + 2π) = X(x) + 2π`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedMap {
    lift: Vec<f64>,
}

impl LiftedMap {
    pub fn new(lift: Vec<f64>) -> Result<Self> {
        validate_grid(lift.len())?;
        if let Some(j) = lift.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        let n = lift.len();
        for j in 0..n {
            let next = if j + 1 < n { lift[j + 1] } else { lift[0] + TAU };
            if next <= lift[j] {
                return Err(Error::DiffeomorphismViolation(format!(
                    "lift not increasing at index {j}"
                )));
            }
        }
        Ok(Self { lift })
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        validate_grid(n)?;
        Self::new((0..n).map(|j| f(node(n, j))).collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, |x| x)
    }

    pub fn rotation(n: usize, c: f64) -> Result<Self> {
        Self::from_fn(n, |x| x + c)
    }

    pub fn n(&self) -> usize {
        self.lift.len()
    }

    pub fn lift(&self) -> &[f64] {
        &self.lift
    }

    /// The periodic part `X(x) − x`.
    pub fn displacement(&self) -> GridField {
        let n = self.n();
        GridField {
            values: self.lift.iter().enumerate().map(|(j, &l)| l - node(n, j)).collect(),
        }
    }

    /// Band-limited evaluation of the lift at an arbitrary real `x`.
    pub fn eval(&self, x: f64) -> f64 {
        x + self.displacement().interpolate(x)
    }

    /// `∂x X` by spectral differentiation of the displacement.
    pub fn spectral_jacobian(&self) -> GridField {
        let d = self
            .displacement()
            .differentiate(1)
            .expect("order 1 is valid");
        GridField {
            values: d.values.iter().map(|v| 1.0 + v).collect(),
        }
    }

    /// Lifted inverse by safeguarded Newton iteration on the band-limited
    /// lift, bracketed by the grid samples.
    pub fn invert_monotone(&self) -> Result<Self> {
        let jac = self.spectral_jacobian();
        if let Some(j) = jac.values.iter().position(|&v| v <= 0.0) {
            return Err(Error::DiffeomorphismViolation(format!(
                "Jacobian sign change near index {j}"
            )));
        }
        let n = self.n();
        let h = TAU / n as f64;
        let p = self.displacement().spectrum().trimmed();
        let l0 = self.lift[0];
        let at = |i: usize| if i < n { self.lift[i] } else { l0 + TAU };
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let y = node(n, j);
            let wraps = ((y - l0) / TAU).floor();
            let yr = y - wraps * TAU;
            // Largest i with lift(x_i) <= yr.
            let (mut lo, mut hi) = (0usize, n);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if at(mid) <= yr {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let x = newton_bracketed(&p, yr, lo as f64 * h, (lo + 1) as f64 * h, at(lo), at(lo + 1))?;
            out.push(x + wraps * TAU);
        }
        Self::new(out)
    }
}

fn newton_bracketed(p: &Spectrum, y: f64, mut a: f64, mut b: f64, ya: f64, yb: f64) -> Result<f64> {
    if ya == y {
        return Ok(a);
    }
    let mut x = a + (b - a) * (y - ya) / (yb - ya);
    let tol = 1e-14 * y.abs().max(1.0);
    for _ in 0..200 {
        let [v, d, _, _] = p.eval_derivs(x);
        let g = x + v - y;
        if g.abs() <= tol {
            return Ok(x);
        }
        if g < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let slope = 1.0 + d;
        let step = x - g / slope;
        x = if slope > 0.0 && step > a && step < b {
            step
        } else {
            0.5 * (a + b)
        };
        if b - a <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            return Ok(x);
        }
    }
    Err(Error::DiffeomorphismViolation(
        "inverse iteration did not converge".into(),
    ))
}

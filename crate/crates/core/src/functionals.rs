//! Potential, internal and interaction energies on probability measures over
//! the circle, their first and second derivatives along gradient fields
//! `∂xψ`, and Monte Carlo checks of the Itô formula along stochastic flows.
//!
//! Measures are handled through a [`MeasureView`]: `μ = X_#(ρ₀dx)` with
//! `J = X'`, so that `∫g dμ = ∫g(X)ρ₀ dx` and the density of `μ` at `X` is
//! `ρ₀/J`. An Eulerian density `ρ` is the case `X = id`, `ρ₀ = ρ`.

use std::f64::consts::TAU;

use log::warn;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{fft_forward, nodes, GridField, Spectrum};
use crate::flow::{Density, DENSITY_FLOOR};
use crate::stats::{compensated_sum, mean_and_se};
use crate::stochastic_flow::{
    check_driver, path_seed, sample_driver, BrownianDriver, Channel, NoiseBasis, Scheme, Stepper,
};

/// Minimum number of Monte Carlo paths for [`ito_verify`].
pub const ITO_MIN_PATHS: usize = 64;

/// Two-sided z-score threshold of the Monte Carlo tests.
pub const Z_THRESHOLD: f64 = 3.0;

/// A measure `X_#(ρ₀dx)` given on the grid.
#[derive(Debug, Clone, Copy)]
pub struct MeasureView<'a> {
    x: &'a [f64],
    jac: &'a [f64],
    rho0: &'a [f64],
}

impl<'a> MeasureView<'a> {
    pub fn new(x: &'a [f64], jac: &'a [f64], rho0: &'a [f64]) -> Result<Self> {
        if jac.len() != x.len() {
            return Err(Error::GridMismatch(x.len(), jac.len()));
        }
        if rho0.len() != x.len() {
            return Err(Error::GridMismatch(x.len(), rho0.len()));
        }
        Ok(Self { x, jac, rho0 })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn points(&self) -> &[f64] {
        self.x
    }

    /// `∫g dμ` for `g` given by its values at the support points.
    fn integrate(&self, g: impl Fn(usize) -> f64) -> f64 {
        let h = TAU / self.n() as f64;
        h * compensated_sum((0..self.n()).map(|j| g(j) * self.rho0[j]))
    }

    /// Density of `μ` at the `j`-th support point, floored at `DENSITY_FLOOR`.
    fn density_at(&self, j: usize) -> Result<f64> {
        let r = self.rho0[j] / self.jac[j];
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::IllConditionedDensity(format!("nonpositive density {r:e} at node {j}")));
        }
        Ok(r.max(DENSITY_FLOOR))
    }
}

/// `(∂xψ, ∂x²ψ, ∂x³ψ)` at the support points of a measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
}

impl Direction {
    pub fn from_spectrum(psi: &Spectrum, x: &[f64]) -> Self {
        let mut d = Self::zeros(x.len());
        for (j, &p) in x.iter().enumerate() {
            let e = psi.eval_derivs(p);
            (d.d1[j], d.d2[j], d.d3[j]) = (e[1], e[2], e[3]);
        }
        d
    }

    /// The channel potential with unit weight.
    pub fn from_channel(ch: &Channel, x: &[f64]) -> Self {
        let mut d = Self::zeros(x.len());
        for (j, &p) in x.iter().enumerate() {
            let e = ch.derivs(p);
            (d.d1[j], d.d2[j], d.d3[j]) = (e[0], e[1], e[2]);
        }
        d
    }

    fn zeros(n: usize) -> Self {
        Self { d1: vec![0.0; n], d2: vec![0.0; n], d3: vec![0.0; n] }
    }
}

/// `F_φ(μ) = ∫φ dμ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialEnergy {
    phi: Spectrum,
}

impl PotentialEnergy {
    pub fn new(phi: &GridField) -> Self {
        Self { phi: phi.spectrum().trimmed() }
    }

    pub fn from_spectrum(phi: Spectrum) -> Self {
        Self { phi }
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.phi
    }
}

/// Integrand `χ` of an internal energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Chi {
    /// `χ(s) = s log s`.
    Entropy,
    /// `χ(s) = s^m`.
    Power { m: f64 },
}

impl Chi {
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            Chi::Entropy => s * s.ln(),
            Chi::Power { m } => s.powf(m),
        }
    }

    pub fn d1(&self, s: f64) -> f64 {
        match *self {
            Chi::Entropy => s.ln() + 1.0,
            Chi::Power { m } => m * s.powf(m - 1.0),
        }
    }

    pub fn d2(&self, s: f64) -> f64 {
        match *self {
            Chi::Entropy => 1.0 / s,
            Chi::Power { m } => m * (m - 1.0) * s.powf(m - 2.0),
        }
    }

    /// `p(s) = χ′(s) − χ(s)/s`.
    pub fn pressure(&self, s: f64) -> f64 {
        match *self {
            Chi::Entropy => 1.0,
            Chi::Power { m } => (m - 1.0) * s.powf(m - 1.0),
        }
    }

    /// `p′(s) = χ″(s) − χ′(s)/s + χ(s)/s²`.
    pub fn pressure_derivative(&self, s: f64) -> f64 {
        match *self {
            Chi::Entropy => 0.0,
            Chi::Power { m } => (m - 1.0) * (m - 1.0) * s.powf(m - 2.0),
        }
    }

    /// Whether `|χ(s)| + s|χ′(s)| + s²|χ″(s)|` stays bounded on `(0, 1]`.
    pub fn satisfies_hypothesis(&self) -> bool {
        match *self {
            Chi::Entropy => true,
            Chi::Power { m } => m >= 0.0,
        }
    }
}

/// `F(μ) = ∫χ(ρ) dx` for `μ = ρ dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InternalEnergy {
    chi: Chi,
}

impl InternalEnergy {
    /// Warns when `χ` violates the boundedness hypothesis near zero.
    pub fn new(chi: Chi) -> Self {
        if !chi.satisfies_hypothesis() {
            warn!("{chi:?}: |χ(s)| + s|χ′(s)| + s²|χ″(s)| is unbounded on (0, 1]");
        }
        Self { chi }
    }

    pub fn chi(&self) -> Chi {
        self.chi
    }
}

/// `𝒲(μ) = ∬W(x, y) μ(dx)μ(dy)`, held as the 2D Fourier expansion
/// `W = Σ c_{jk} e^{i(jx + ky)}` of the grid samples.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEnergy {
    freqs: Vec<i64>,
    /// `(index of j, index of k, c_{jk})` into `freqs`.
    terms: Vec<(usize, usize, Complex<f64>)>,
}

impl InteractionEnergy {
    /// From samples `w[i·n + l] = W(x_i, y_l)` on an `n × n` grid.
    pub fn from_grid(n: usize, w: &[f64]) -> Result<Self> {
        crate::field::validate_grid(n)?;
        if w.len() != n * n {
            return Err(Error::GridMismatch(n * n, w.len()));
        }
        if let Some(i) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut buf: Vec<Complex<f64>> = w.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_mut(n) {
            fft_forward(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for l in 0..n {
            for i in 0..n {
                col[i] = buf[i * n + l];
            }
            fft_forward(&mut col);
            for i in 0..n {
                buf[i * n + l] = col[i];
            }
        }
        let scale = 1.0 / (n * n) as f64;
        let peak = buf.iter().fold(0.0f64, |m, c| m.max(c.norm())) * scale;
        let cut = 64.0 * f64::EPSILON * peak;
        let half = n / 2;
        // The Nyquist index stands for both ±n/2 with half weight each.
        let split = |a: usize| -> Vec<(i64, f64)> {
            if a == half {
                vec![(half as i64, 0.5), (-(half as i64), 0.5)]
            } else if a < half {
                vec![(a as i64, 1.0)]
            } else {
                vec![(a as i64 - n as i64, 1.0)]
            }
        };
        let mut raw = Vec::new();
        for a in 0..n {
            for b in 0..n {
                let c = buf[a * n + b] * scale;
                if c.norm() <= cut {
                    continue;
                }
                for (fa, wa) in split(a) {
                    for (fb, wb) in split(b) {
                        raw.push((fa, fb, c * (wa * wb)));
                    }
                }
            }
        }
        let mut freqs: Vec<i64> = raw.iter().flat_map(|&(a, b, _)| [a, b]).collect();
        freqs.sort_unstable();
        freqs.dedup();
        let index = |f: i64| freqs.binary_search(&f).expect("frequency present");
        let terms = raw.iter().map(|&(a, b, c)| (index(a), index(b), c)).collect();
        Ok(Self { freqs, terms })
    }

    pub fn from_fn(n: usize, w: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let x = nodes(n);
        let samples: Vec<f64> = x.iter().flat_map(|&a| x.iter().map(move |&b| (a, b))).map(|(a, b)| w(a, b)).collect();
        Self::from_grid(n, &samples)
    }

    /// Number of retained Fourier terms.
    pub fn terms(&self) -> usize {
        self.terms.len()
    }

    /// `∫e^{ijx}dμ` and, with a direction, `∫L_ψ e dμ` and `∫L²_ψ e dμ`
    /// where `L_ψ = ∂xψ ∂x`.
    fn moments(&self, m: &MeasureView, dir: Option<&Direction>) -> [Vec<Complex<f64>>; 3] {
        let h = TAU / m.n() as f64;
        let nf = self.freqs.len();
        let mut out = [vec![Complex::new(0.0, 0.0); nf], vec![Complex::new(0.0, 0.0); nf], vec![Complex::new(0.0, 0.0); nf]];
        for (i, &f) in self.freqs.iter().enumerate() {
            let fj = f as f64;
            let (mut a, mut b, mut c) = (Complex::new(0.0, 0.0), Complex::new(0.0, 0.0), Complex::new(0.0, 0.0));
            for j in 0..m.n() {
                let e = Complex::from_polar(m.rho0[j], fj * m.x[j]);
                a += e;
                if let Some(d) = dir {
                    let (p1, p2) = (d.d1[j], d.d2[j]);
                    b += e * Complex::new(0.0, fj * p1);
                    c += e * Complex::new(-fj * fj * p1 * p1, fj * p1 * p2);
                }
            }
            out[0][i] = a * h;
            out[1][i] = b * h;
            out[2][i] = c * h;
        }
        out
    }
}

/// One of the three energy families.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    Potential(PotentialEnergy),
    Internal(InternalEnergy),
    Interaction(InteractionEnergy),
}

impl Functional {
    pub fn name(&self) -> &'static str {
        match self {
            Functional::Potential(_) => "potential",
            Functional::Internal(_) => "internal",
            Functional::Interaction(_) => "interaction",
        }
    }

    /// `F(μ)`.
    pub fn value_at(&self, m: &MeasureView) -> Result<f64> {
        match self {
            Functional::Potential(p) => Ok(m.integrate(|j| p.phi.eval(m.x[j]))),
            Functional::Internal(e) => {
                let r = densities(m)?;
                Ok(m.integrate(|j| e.chi.value(r[j]) / r[j]))
            }
            Functional::Interaction(w) => {
                let [mo, ..] = w.moments(m, None);
                Ok(w.terms.iter().map(|&(a, b, c)| (c * mo[a] * mo[b]).re).sum())
            }
        }
    }

    /// `D̄_{V_ψ}F(μ)`.
    pub fn first_at(&self, m: &MeasureView, d: &Direction) -> Result<f64> {
        match self {
            Functional::Potential(p) => Ok(m.integrate(|j| p.phi.eval_derivs(m.x[j])[1] * d.d1[j])),
            Functional::Internal(e) => {
                let r = densities(m)?;
                Ok(-m.integrate(|j| e.chi.pressure(r[j]) * d.d2[j]))
            }
            Functional::Interaction(w) => {
                let [mo, u, _] = w.moments(m, Some(d));
                Ok(w.terms.iter().map(|&(a, b, c)| (c * (u[a] * mo[b] + mo[a] * u[b])).re).sum())
            }
        }
    }

    /// `D̄²_{V_ψ}F(μ)`.
    pub fn second_at(&self, m: &MeasureView, d: &Direction) -> Result<f64> {
        match self {
            Functional::Potential(p) => Ok(m.integrate(|j| {
                let e = p.phi.eval_derivs(m.x[j]);
                d.d1[j] * (d.d2[j] * e[1] + d.d1[j] * e[2])
            })),
            Functional::Internal(e) => {
                let r = densities(m)?;
                Ok(m.integrate(|j| {
                    e.chi.pressure_derivative(r[j]) * r[j] * d.d2[j] * d.d2[j] - e.chi.pressure(r[j]) * d.d1[j] * d.d3[j]
                }))
            }
            Functional::Interaction(w) => {
                let [mo, u, v] = w.moments(m, Some(d));
                Ok(w.terms
                    .iter()
                    .map(|&(a, b, c)| (c * (v[a] * mo[b] + 2.0 * u[a] * u[b] + mo[a] * v[b])).re)
                    .sum())
            }
        }
    }

    /// `F(ρ dx)`.
    pub fn evaluate(&self, rho: &Density) -> Result<f64> {
        let (x, one) = eulerian(rho.n());
        self.value_at(&MeasureView::new(&x, &one, rho.values())?)
    }

    /// `D̄_{V_ψ}F(ρ dx)`.
    pub fn first_derivative(&self, rho: &Density, psi: &GridField) -> Result<f64> {
        let (x, one) = eulerian(rho.n());
        let d = Direction::from_spectrum(&psi.spectrum().trimmed(), &x);
        self.first_at(&MeasureView::new(&x, &one, rho.values())?, &d)
    }

    /// `D̄²_{V_ψ}F(ρ dx)`.
    pub fn second_derivative(&self, rho: &Density, psi: &GridField) -> Result<f64> {
        let (x, one) = eulerian(rho.n());
        let d = Direction::from_spectrum(&psi.spectrum().trimmed(), &x);
        self.second_at(&MeasureView::new(&x, &one, rho.values())?, &d)
    }
}

fn eulerian(n: usize) -> (Vec<f64>, Vec<f64>) {
    (nodes(n), vec![1.0; n])
}

fn densities(m: &MeasureView) -> Result<Vec<f64>> {
    (0..m.n()).map(|j| m.density_at(j)).collect()
}

/// Gap `|(I₁ + I₂) − (I₃ − I₄)|` of the drift cancellation for internal
/// energies, with every term assembled on the grid from its defining
/// integral:
/// `I₁ = ∫χ′(ρ) ∂(∂(ρφ′)φ′)`, `I₂ = ∫χ″(ρ)(∂(ρφ′))²`,
/// `I₃ = ∫p′(ρ)(φ″)²ρ²`, `I₄ = ∫χ′(ρ)φ′φ‴ρ − ∫χ(ρ)φ′φ‴`.
pub fn cancellation_gap(chi: Chi, rho: &Density, phi: &GridField) -> Result<f64> {
    let r = rho.field();
    let d1 = phi.differentiate(1)?;
    let d2 = phi.differentiate(2)?;
    let d3 = phi.differentiate(3)?;
    let flux = r.zip_with(&d1, |a, b| a * b)?;
    let div = flux.differentiate(1)?;
    let inner = div.zip_with(&d1, |a, b| a * b)?.differentiate(1)?;
    let (rv, dv, iv) = (r.values(), div.values(), inner.values());
    let (p1, p2, p3) = (d1.values(), d2.values(), d3.values());
    let n = r.n();
    let h = TAU / n as f64;
    let sum = |g: &dyn Fn(usize) -> f64| h * compensated_sum((0..n).map(g));
    let i1 = sum(&|j| chi.d1(rv[j]) * iv[j]);
    let i2 = sum(&|j| chi.d2(rv[j]) * dv[j] * dv[j]);
    let i3 = sum(&|j| chi.pressure_derivative(rv[j]) * p2[j] * p2[j] * rv[j] * rv[j]);
    let i4 = sum(&|j| (chi.d1(rv[j]) * rv[j] - chi.value(rv[j])) * p1[j] * p3[j]);
    Ok(((i1 + i2) - (i3 - i4)).abs())
}

/// Lagrangian record of `μ_t = (X_t)_#(ρ₀dx)` at every driver step.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurePath {
    pub rho0: Density,
    pub dt: f64,
    pub drift: Option<Spectrum>,
    positions: Vec<Vec<f64>>,
    jacobians: Vec<Vec<f64>>,
}

impl MeasurePath {
    /// Number of steps; the record holds `steps + 1` states.
    pub fn steps(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn view(&self, k: usize) -> MeasureView<'_> {
        MeasureView { x: &self.positions[k], jac: &self.jacobians[k], rho0: self.rho0.values() }
    }
}

/// Drive `(X, J)` from the identity through every driver step, calling
/// `visit(step, X, J)` on each state including the initial one.
fn run_lagrangian(
    n: usize,
    basis: &NoiseBasis,
    drift: Option<&Spectrum>,
    driver: &BrownianDriver,
    scheme: Scheme,
    mut visit: impl FnMut(usize, &[f64], &[f64]) -> Result<()>,
) -> Result<()> {
    check_driver(basis, driver)?;
    let mut stepper = Stepper::new(basis, drift, scheme, n, None);
    let mut y = stepper.initial(&nodes(n), None);
    visit(0, &y[..n], &y[n..2 * n])?;
    for s in 0..driver.steps {
        stepper.step(&mut y, None, &driver.row(s)[..basis.len()], driver.dt);
        stepper.check(&y, (s + 1) as f64 * driver.dt)?;
        visit(s + 1, &y[..n], &y[n..2 * n])?;
    }
    Ok(())
}

/// Simulate the flow `dX = ∂xφ₀(X)dt + Σ w_c ∂xφ_c(X)∘dB^c` from the grid
/// and record every state.
pub fn simulate_measure_path(
    rho0: &Density,
    basis: &NoiseBasis,
    drift: Option<&Spectrum>,
    driver: &BrownianDriver,
    scheme: Scheme,
) -> Result<MeasurePath> {
    let mut positions = Vec::with_capacity(driver.steps + 1);
    let mut jacobians = Vec::with_capacity(driver.steps + 1);
    run_lagrangian(rho0.n(), basis, drift, driver, scheme, |_, x, j| {
        positions.push(x.to_vec());
        jacobians.push(j.to_vec());
        Ok(())
    })?;
    Ok(MeasurePath { rho0: rho0.clone(), dt: driver.dt, drift: drift.cloned(), positions, jacobians })
}

/// Itô drift `D̄_{V_{φ₀}}F + ½Σ w_c² D̄²_{V_{φ_c}}F` at `μ`.
fn ito_drift(
    f: &Functional,
    m: &MeasureView,
    basis: &NoiseBasis,
    dirs: &[Direction],
    drift: Option<&Direction>,
) -> Result<f64> {
    let mut acc = match drift {
        Some(d) => f.first_at(m, d)?,
        None => 0.0,
    };
    for (ch, d) in basis.channels().iter().zip(dirs) {
        if ch.weight != 0.0 {
            acc += 0.5 * ch.weight * ch.weight * f.second_at(m, d)?;
        }
    }
    Ok(acc)
}

fn directions(basis: &NoiseBasis, drift: Option<&Spectrum>, x: &[f64]) -> (Vec<Direction>, Option<Direction>) {
    let dirs = basis.channels().iter().map(|c| Direction::from_channel(c, x)).collect();
    (dirs, drift.map(|s| Direction::from_spectrum(s, x)))
}

/// Weak-form residual of the density SPDE along a recorded path, tested
/// against `g`: the largest deviation over the stored times of
/// `⟨μ_t, g⟩ − ⟨μ_0, g⟩ − ∫(D̄_{V_{φ₀}}F_g + ½Σw_c²D̄²_{V_{φ_c}}F_g)dt
///  − Σ_c ∫w_c D̄_{V_{φ_c}}F_g dB^c`.
/// The stochastic integral is the left-point Itô sum over the driver
/// increments and the `dt` integral uses the trapezoid rule.
pub fn spde_residual(path: &MeasurePath, basis: &NoiseBasis, driver: &BrownianDriver, test_fn: &GridField) -> Result<f64> {
    check_driver(basis, driver)?;
    if driver.steps != path.steps() || (driver.dt - path.dt).abs() > 1e-12 * path.dt {
        return Err(Error::DriverMismatch(format!(
            "path has {} steps of {}, driver {} steps of {}",
            path.steps(),
            path.dt,
            driver.steps,
            driver.dt
        )));
    }
    if test_fn.n() != path.rho0.n() {
        return Err(Error::GridMismatch(path.rho0.n(), test_fn.n()));
    }
    let f = Functional::Potential(PotentialEnergy::new(test_fn));
    let eval = |k: usize| -> Result<(f64, f64, Vec<f64>)> {
        let m = path.view(k);
        let (dirs, drift) = directions(basis, path.drift.as_ref(), m.points());
        let noise = dirs.iter().map(|d| f.first_at(&m, d)).collect::<Result<Vec<_>>>()?;
        Ok((f.value_at(&m)?, ito_drift(&f, &m, basis, &dirs, drift.as_ref())?, noise))
    };
    let (f0, mut drift_prev, mut noise_prev) = eval(0)?;
    let mut integral = 0.0;
    let mut worst = 0.0f64;
    for k in 1..=path.steps() {
        let (fk, drift_k, noise_k) = eval(k)?;
        integral += 0.5 * path.dt * (drift_prev + drift_k);
        for ((ch, d), db) in basis.channels().iter().zip(&noise_prev).zip(driver.row(k - 1)) {
            integral += ch.weight * d * db;
        }
        worst = worst.max((fk - f0 - integral).abs());
        (drift_prev, noise_prev) = (drift_k, noise_k);
    }
    Ok(worst)
}

/// Monte Carlo configuration of [`ito_verify`].
#[derive(Debug, Clone, PartialEq)]
pub struct ItoSetup {
    pub rho0: Density,
    pub basis: NoiseBasis,
    /// Deterministic potential `φ₀`, if any.
    pub drift: Option<Spectrum>,
    /// Simulated paths, an even number split into antithetic pairs.
    pub paths: usize,
    pub dt: f64,
    pub t: f64,
    pub seed: u64,
    pub scheme: Scheme,
    /// Number of equal subintervals of the martingale test.
    pub subintervals: usize,
}

/// Sample mean of one compensated increment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncrementTest {
    pub t0: f64,
    pub t1: f64,
    pub mean: f64,
    pub std_error: f64,
    pub z_score: f64,
}

/// Outcome of the Itô-formula test for one functional.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItoReport {
    pub functional: String,
    /// Mean of `F(μ_T) − F(μ_0) − ∫₀ᵀ drift dt`.
    pub estimate: f64,
    pub std_error: f64,
    pub z_score: f64,
    /// Terminal and every increment test within `Z_THRESHOLD`.
    pub pass: bool,
    pub martingale: Vec<IncrementTest>,
}

fn z_score(mean: f64, se: f64) -> f64 {
    if se > 0.0 {
        mean / se
    } else if mean.abs() <= 1e-12 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    }
}

fn negated(driver: &BrownianDriver) -> Result<BrownianDriver> {
    let inc: Vec<f64> = (0..driver.steps).flat_map(|s| driver.row(s).iter().map(|v| -v)).collect();
    BrownianDriver::from_increments(driver.dt, driver.channels, inc)
}

/// Compensated process `F(μ_t) − F(μ_0) − ∫₀ᵗ drift` at the checkpoints
/// `k·steps/subintervals`, one row per functional.
fn compensated(fs: &[Functional], setup: &ItoSetup, driver: &BrownianDriver, stride: usize) -> Result<Vec<Vec<f64>>> {
    let cps = driver.steps / stride;
    let mut out = vec![vec![0.0; cps + 1]; fs.len()];
    let mut first = vec![0.0; fs.len()];
    let mut prev = vec![0.0; fs.len()];
    let mut integral = vec![0.0; fs.len()];
    let rho0 = setup.rho0.values();
    run_lagrangian(setup.rho0.n(), &setup.basis, setup.drift.as_ref(), driver, setup.scheme, |k, x, jac| {
        let m = MeasureView::new(x, jac, rho0)?;
        let (dirs, drift) = directions(&setup.basis, setup.drift.as_ref(), x);
        for (i, f) in fs.iter().enumerate() {
            let d = ito_drift(f, &m, &setup.basis, &dirs, drift.as_ref())?;
            if k == 0 {
                first[i] = f.value_at(&m)?;
            } else {
                integral[i] += 0.5 * driver.dt * (prev[i] + d);
                if k % stride == 0 {
                    out[i][k / stride] = f.value_at(&m)? - first[i] - integral[i];
                }
            }
            prev[i] = d;
        }
        Ok(())
    })?;
    Ok(out)
}

/// Monte Carlo test of the Itô formula `dF(μ_t) = martingale + drift dt`
/// for several functionals on shared antithetic paths `(B, −B)`.
///
/// The terminal test checks that `E[F(μ_T) − F(μ_0) − ∫drift]` is within
/// `Z_THRESHOLD` standard errors of zero; the martingale test does the same
/// for the compensated increments over each subinterval.
pub fn ito_verify_all(fs: &[Functional], setup: &ItoSetup) -> Result<Vec<ItoReport>> {
    if setup.paths < ITO_MIN_PATHS {
        return Err(Error::InsufficientPaths { got: setup.paths, min: ITO_MIN_PATHS });
    }
    if setup.paths % 2 != 0 {
        return Err(Error::InvalidParameter(format!("antithetic pairs need an even path count, got {}", setup.paths)));
    }
    let steps = (setup.t / setup.dt).round() as usize;
    if steps == 0 || ((steps as f64) * setup.dt - setup.t).abs() > 1e-9 * setup.t {
        return Err(Error::InvalidParameter(format!("T = {} is not a multiple of dt = {}", setup.t, setup.dt)));
    }
    if setup.subintervals == 0 || steps % setup.subintervals != 0 {
        return Err(Error::InvalidParameter(format!(
            "{} steps do not split into {} subintervals",
            steps, setup.subintervals
        )));
    }
    let stride = steps / setup.subintervals;
    let per_pair: Vec<Vec<Vec<f64>>> = (0..setup.paths / 2)
        .into_par_iter()
        .map(|p| -> Result<Vec<Vec<f64>>> {
            let driver = sample_driver(path_seed(setup.seed, p as u64), setup.dt, steps, setup.basis.len())?;
            let a = compensated(fs, setup, &driver, stride)?;
            let b = compensated(fs, setup, &negated(&driver)?, stride)?;
            Ok(a.iter()
                .zip(&b)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| 0.5 * (u + v)).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    let reports = fs
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let terminal: Vec<f64> = per_pair.iter().map(|r| r[i][setup.subintervals]).collect();
            let (estimate, std_error) = mean_and_se(&terminal);
            let z = z_score(estimate, std_error);
            let martingale: Vec<IncrementTest> = (0..setup.subintervals)
                .map(|s| {
                    let inc: Vec<f64> = per_pair.iter().map(|r| r[i][s + 1] - r[i][s]).collect();
                    let (mean, se) = mean_and_se(&inc);
                    let w = setup.t / setup.subintervals as f64;
                    IncrementTest { t0: s as f64 * w, t1: (s + 1) as f64 * w, mean, std_error: se, z_score: z_score(mean, se) }
                })
                .collect();
            let pass = z.abs() <= Z_THRESHOLD && martingale.iter().all(|m| m.z_score.abs() <= Z_THRESHOLD);
            ItoReport { functional: f.name().to_string(), estimate, std_error, z_score: z, pass, martingale }
        })
        .collect();
    Ok(reports)
}

/// [`ito_verify_all`] for a single functional.
pub fn ito_verify(f: &Functional, setup: &ItoSetup) -> Result<ItoReport> {
    Ok(ito_verify_all(std::slice::from_ref(f), setup)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{flow_to, VelocityPotential};
    use crate::stochastic_flow::ChannelKind;

    fn field(n: usize, f: impl Fn(f64) -> f64) -> GridField {
        GridField::from_fn(n, f).unwrap()
    }

    fn potential(n: usize, f: impl Fn(f64) -> f64) -> Functional {
        Functional::Potential(PotentialEnergy::new(&field(n, f)))
    }

    fn entropy() -> Functional {
        Functional::Internal(InternalEnergy::new(Chi::Entropy))
    }

    fn cos_diff(n: usize) -> Functional {
        Functional::Interaction(InteractionEnergy::from_fn(n, |x, y| (x - y).cos()).unwrap())
    }

    /// `F((U_s)_#μ)` for the flow `U` of `∂xψ`, at `s = h, 0, −h`.
    fn along_flow(f: &Functional, rho: &Density, psi: &Spectrum, h: f64) -> [f64; 3] {
        let n = rho.n();
        let neg = Spectrum::from_coeffs(
            psi.cos_coeffs().iter().map(|v| -v).collect(),
            psi.sin_coeffs().iter().map(|v| -v).collect(),
        );
        let at = |s: &Spectrum| {
            let st = flow_to(&VelocityPotential::from_spectrum(s), n, h, 1e-3).unwrap();
            f.value_at(&MeasureView::new(st.x.lift(), st.jac.values(), rho.values()).unwrap()).unwrap()
        };
        [at(psi), f.evaluate(rho).unwrap(), at(&neg)]
    }

    #[test]
    fn evaluation_examples() {
        let n = 64;
        let uni = Density::uniform(n).unwrap();
        let rho = Density::from_fn(n, |x| 1.0 + 0.4 * x.sin()).unwrap();
        assert!((potential(n, |_| 2.5).evaluate(&rho).unwrap() - 2.5).abs() < 1e-13);
        assert!((entropy().evaluate(&uni).unwrap() - (1.0 / TAU).ln()).abs() < 1e-13);
        assert!(cos_diff(n).evaluate(&uni).unwrap().abs() < 1e-15);
        // ∬cos(x−y)ρρ = |∫e^{ix}ρ|² = (0.4/2)² for ρ = (1 + 0.4 sin x)/(2π).
        assert!((cos_diff(n).evaluate(&rho).unwrap() - 0.04).abs() < 1e-13);
        let power = Functional::Internal(InternalEnergy::new(Chi::Power { m: 1.0 }));
        assert!((power.evaluate(&rho).unwrap() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn derivative_examples() {
        let n = 64;
        let uni = Density::uniform(n).unwrap();
        let rho = Density::from_fn(n, |x| 1.0 + 0.4 * x.sin()).unwrap();
        let psi = field(n, f64::sin);
        let flat = field(n, |_| 3.0);
        let all = [potential(n, f64::sin), entropy(), cos_diff(n)];
        for f in &all {
            assert_eq!(f.first_derivative(&rho, &flat).unwrap(), 0.0);
            assert_eq!(f.second_derivative(&rho, &flat).unwrap(), 0.0);
        }
        assert!((all[0].first_derivative(&uni, &psi).unwrap() - 0.5).abs() < 1e-14);
        assert!((all[1].second_derivative(&uni, &psi).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pressure_closed_forms_match_chi() {
        for chi in [Chi::Entropy, Chi::Power { m: 2.0 }, Chi::Power { m: 0.5 }, Chi::Power { m: 3.5 }] {
            for s in [0.05, 0.3, 1.0, 2.7] {
                let p = chi.d1(s) - chi.value(s) / s;
                let dp = chi.d2(s) - chi.d1(s) / s + chi.value(s) / (s * s);
                assert!((chi.pressure(s) - p).abs() < 1e-12 * (1.0 + p.abs()));
                assert!((chi.pressure_derivative(s) - dp).abs() < 1e-11 * (1.0 + dp.abs()));
            }
        }
        assert!(Chi::Entropy.satisfies_hypothesis());
        assert!(!Chi::Power { m: -0.5 }.satisfies_hypothesis());
    }

    #[test]
    fn derivatives_match_flow_finite_differences() {
        let n = 128;
        let rho = Density::from_fn(n, |x| 1.0 + 0.3 * x.cos() + 0.1 * (2.0 * x).sin()).unwrap();
        let psi = Spectrum::from_coeffs(vec![0.0, 0.2, 0.0], vec![0.0, 0.7, 0.15]);
        let sampled = psi.sample(n).unwrap();
        let all = [
            potential(n, |x| x.sin() + 0.3 * (2.0 * x).cos()),
            entropy(),
            Functional::Internal(InternalEnergy::new(Chi::Power { m: 2.0 })),
            Functional::Interaction(InteractionEnergy::from_fn(n, |x, y| (x - y).cos() + 0.5 * (x + 2.0 * y).sin()).unwrap()),
        ];
        for f in &all {
            let d1 = f.first_derivative(&rho, &sampled).unwrap();
            let d2 = f.second_derivative(&rho, &sampled).unwrap();
            let errs: Vec<(f64, f64)> = [0.1, 0.05]
                .iter()
                .map(|&h| {
                    let [p, z, m] = along_flow(f, &rho, &psi, h);
                    (((p - m) / (2.0 * h) - d1).abs(), ((p - 2.0 * z + m) / (h * h) - d2).abs())
                })
                .collect();
            let (r1, r2) = (errs[0].0 / errs[1].0, errs[0].1 / errs[1].1);
            assert!(r1 >= 3.5, "{} first-derivative ratio {r1} ({errs:?})", f.name());
            assert!(r2 >= 3.5, "{} second-derivative ratio {r2} ({errs:?})", f.name());
        }
    }

    #[test]
    fn product_rule_through_interaction() {
        let n = 64;
        let rho = Density::from_fn(n, |x| 1.0 + 0.3 * x.cos() + 0.2 * (3.0 * x).sin()).unwrap();
        let psi = field(n, |x| 0.6 * x.sin() + 0.3 * (2.0 * x).cos());
        let (fs, fc) = (potential(n, f64::sin), potential(n, f64::cos));
        let prod = Functional::Interaction(InteractionEnergy::from_fn(n, |x, y| x.sin() * y.cos()).unwrap());
        let (a, b) = (fs.evaluate(&rho).unwrap(), fc.evaluate(&rho).unwrap());
        let (da, db) = (fs.first_derivative(&rho, &psi).unwrap(), fc.first_derivative(&rho, &psi).unwrap());
        let (dda, ddb) = (fs.second_derivative(&rho, &psi).unwrap(), fc.second_derivative(&rho, &psi).unwrap());
        assert!((prod.evaluate(&rho).unwrap() - a * b).abs() < 1e-12);
        let expanded = b * dda + a * ddb + 2.0 * da * db;
        assert!((prod.second_derivative(&rho, &psi).unwrap() - expanded).abs() < 1e-9);
    }

    #[test]
    fn nyquist_content_is_reproduced_on_the_grid() {
        let n = 8;
        let w = InteractionEnergy::from_fn(n, |x, y| (4.0 * x).cos() * (1.0 + y.sin())).unwrap();
        let rho = Density::from_fn(n, |x| 1.0 + 0.2 * x.cos()).unwrap();
        let h = TAU / n as f64;
        let direct: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |l| (i, l)))
            .map(|(i, l)| {
                let (x, y) = (crate::field::node(n, i), crate::field::node(n, l));
                (4.0 * x).cos() * (1.0 + y.sin()) * rho.values()[i] * rho.values()[l] * h * h
            })
            .sum();
        let got = Functional::Interaction(w).evaluate(&rho).unwrap();
        assert!((got - direct).abs() < 1e-14, "{got} {direct}");
    }

    #[test]
    fn cancellation_identity() {
        let n = 256;
        let rho = Density::from_fn(n, |x| 1.0 + 0.3 * x.cos() + 0.2 * (2.0 * x).sin()).unwrap();
        let phi = field(n, |x| x.sin() + 0.4 * (3.0 * x).cos());
        for chi in [Chi::Entropy, Chi::Power { m: 2.0 }] {
            assert!(cancellation_gap(chi, &rho, &phi).unwrap() < 1e-9);
        }
    }

    #[test]
    fn interaction_rejects_bad_grids() {
        assert!(InteractionEnergy::from_grid(8, &[0.0; 63]).is_err());
        let mut w = vec![0.0; 64];
        w[5] = f64::NAN;
        assert!(matches!(InteractionEnergy::from_grid(8, &w), Err(Error::NonFinite(5))));
    }

    fn setup(basis: NoiseBasis, drift: Option<Spectrum>, paths: usize) -> ItoSetup {
        ItoSetup {
            rho0: Density::from_fn(64, |x| 1.0 + 0.3 * x.sin()).unwrap(),
            basis,
            drift,
            paths,
            dt: 1e-2,
            t: 0.32,
            seed: 7,
            scheme: Scheme::StratRk4,
            subintervals: 8,
        }
    }

    #[test]
    fn ito_without_noise_is_a_quadrature() {
        let off = NoiseBasis::single(ChannelKind::Cos, 1, 0.0);
        let drift = Spectrum::from_coeffs(vec![0.0, 0.3], vec![0.0, 0.5]);
        let fs = [potential(64, f64::sin), entropy(), cos_diff(64)];
        for r in ito_verify_all(&fs, &setup(off, Some(drift), 64)).unwrap() {
            assert!(r.estimate.abs() <= 1e-6, "{r:?}");
        }
    }

    #[test]
    fn ito_small_sample_passes() {
        let basis = NoiseBasis::single(ChannelKind::Cos, 1, 1.0);
        let fs = [potential(64, f64::sin), entropy(), cos_diff(64)];
        for r in ito_verify_all(&fs, &setup(basis, None, 256)).unwrap() {
            assert!(r.std_error > 0.0);
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn ito_rejects_bad_setups() {
        let basis = NoiseBasis::single(ChannelKind::Cos, 1, 1.0);
        let f = entropy();
        assert!(matches!(ito_verify(&f, &setup(basis.clone(), None, 32)), Err(Error::InsufficientPaths { .. })));
        assert!(ito_verify(&f, &setup(basis.clone(), None, 65)).is_err());
        let mut s = setup(basis, None, 64);
        s.subintervals = 5;
        assert!(ito_verify(&f, &s).is_err());
    }

    #[test]
    fn spde_residual_cases() {
        let n = 64;
        let rho = Density::from_fn(n, |x| 1.0 + 0.3 * x.sin()).unwrap();
        let basis = NoiseBasis::fourier(2, 3.0).unwrap();
        let g = field(n, |x| x.cos() + 0.2 * (2.0 * x).sin());
        let quiet = BrownianDriver::zero(1e-3, 200, basis.len());
        let drift = Spectrum::from_coeffs(vec![0.0], vec![0.0, 0.2]);
        let path = simulate_measure_path(&rho, &basis, Some(&drift), &quiet, Scheme::StratRk4).unwrap();
        assert!(spde_residual(&path, &basis, &quiet, &g).unwrap() <= 1e-6);
        let driver = sample_driver(11, 1e-3, 200, basis.len()).unwrap();
        let path = simulate_measure_path(&rho, &basis, None, &driver, Scheme::StratRk4).unwrap();
        let one = field(n, |_| 1.0);
        assert!(spde_residual(&path, &basis, &driver, &one).unwrap() <= 1e-10);
        let short = sample_driver(11, 1e-3, 100, basis.len()).unwrap();
        assert!(matches!(spde_residual(&path, &basis, &short, &g), Err(Error::DriverMismatch(_))));
    }

    #[test]
    fn spde_residual_decays_like_root_dt() {
        let n = 64;
        let rho = Density::from_fn(n, |x| 1.0 + 0.3 * x.sin()).unwrap();
        let basis = NoiseBasis::fourier(2, 3.0).unwrap();
        let g = field(n, |x| x.cos() + 0.2 * (2.0 * x).sin());
        let rms = |dt: f64, steps: usize| -> f64 {
            let sq: f64 = (0..24)
                .map(|p| {
                    let fine = sample_driver(path_seed(5, p), 1e-3 / 4.0, 2400, basis.len()).unwrap();
                    let d = fine.coarsen((dt / fine.dt).round() as usize).unwrap();
                    assert_eq!(d.steps, steps);
                    let path = simulate_measure_path(&rho, &basis, None, &d, Scheme::StratRk4).unwrap();
                    spde_residual(&path, &basis, &d, &g).unwrap().powi(2)
                })
                .sum();
            (sq / 24.0).sqrt()
        };
        let (a, b) = (rms(2e-3, 300), rms(1e-3, 600));
        let ratio = a / b;
        assert!((1.2..=1.7).contains(&ratio), "ratio {ratio} ({a:e}, {b:e})");
    }
}

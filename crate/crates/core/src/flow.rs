//! Deterministic flows of circle diffeomorphisms driven by gradient
//! velocities `∂xφ_t`, with their Jacobians and pushforward densities.

use std::f64::consts::TAU;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{node, GridField, LiftedMap, Spectrum};

/// Smallest admissible Jacobian value before a flow is declared degenerate.
pub const JACOBIAN_FLOOR: f64 = 1e-10;
/// Density floor.
pub const DENSITY_FLOOR: f64 = 1e-12;
/// Mass tolerance for densities.
pub const MASS_TOL: f64 = 1e-8;

/// Continuous time profile multiplying a Fourier mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeWeight {
    Constant(f64),
    /// `intercept + slope·t`
    Linear { intercept: f64, slope: f64 },
    /// `amplitude·cos(omega·t + phase)`
    Harmonic { amplitude: f64, omega: f64, phase: f64 },
}

impl TimeWeight {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Self::Constant(c) => c,
            Self::Linear { intercept, slope } => intercept + slope * t,
            Self::Harmonic { amplitude, omega, phase } => amplitude * (omega * t + phase).cos(),
        }
    }
}

impl Default for TimeWeight {
    fn default() -> Self {
        Self::Constant(1.0)
    }
}

/// One term `w(t)·(a·cos kx + b·sin kx)` of a velocity potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub k: u32,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
    #[serde(default)]
    pub weight: TimeWeight,
}

/// Time-dependent potential `φ_t(x) = c·x + Σ w_m(t)(a_m cos k_m x + b_m sin k_m x)`.
///
/// The linear part generates a rigid rotation with constant speed `c`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityPotential {
    #[serde(default)]
    pub translation: f64,
    #[serde(default)]
    pub modes: Vec<Mode>,
}

impl VelocityPotential {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Time-independent single mode `a·cos kx + b·sin kx`.
    pub fn single(k: u32, cos: f64, sin: f64) -> Self {
        Self {
            translation: 0.0,
            modes: vec![Mode { k, cos, sin, weight: TimeWeight::Constant(1.0) }],
        }
    }

    /// Time-independent potential with the given periodic part (the constant
    /// term is irrelevant to the velocity and dropped).
    pub fn from_spectrum(s: &Spectrum) -> Self {
        let modes = (1..=s.degree())
            .filter(|&k| s.cos_coeffs()[k] != 0.0 || s.sin_coeffs()[k] != 0.0)
            .map(|k| Mode {
                k: k as u32,
                cos: s.cos_coeffs()[k],
                sin: s.sin_coeffs()[k],
                weight: TimeWeight::Constant(1.0),
            })
            .collect();
        Self { translation: 0.0, modes }
    }

    /// Rigid rotation with speed `c`.
    pub fn rotation(c: f64) -> Self {
        Self { translation: c, modes: Vec::new() }
    }

    /// Largest wave number present.
    pub fn degree(&self) -> usize {
        self.modes.iter().map(|m| m.k as usize).max().unwrap_or(0)
    }

    /// Periodic part of `φ_t` as a trigonometric polynomial.
    pub fn spectrum_at(&self, t: f64) -> Spectrum {
        let deg = self.degree();
        let mut cos = vec![0.0; deg + 1];
        let mut sin = vec![0.0; deg + 1];
        for m in &self.modes {
            let w = m.weight.at(t);
            cos[m.k as usize] += w * m.cos;
            if m.k > 0 {
                sin[m.k as usize] += w * m.sin;
            }
        }
        Spectrum::from_coeffs(cos, sin)
    }

    /// `(φ_t, ∂xφ_t, ∂x²φ_t, ∂x³φ_t)` at a point.
    pub fn derivs_at(&self, t: f64, x: f64) -> [f64; 4] {
        let mut d = self.spectrum_at(t).eval_derivs(x);
        d[0] += self.translation * x;
        d[1] += self.translation;
        d
    }

    /// Derivative fields of orders 0..=3 sampled on the grid. Order 0 holds
    /// the periodic part only.
    pub fn fields_at(&self, t: f64, n: usize) -> Result<[GridField; 4]> {
        let s = self.spectrum_at(t);
        let mut cols = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for j in 0..n {
            let d = s.eval_derivs(node(n, j));
            for (c, v) in cols.iter_mut().zip(d) {
                c[j] = v;
            }
            cols[1][j] += self.translation;
        }
        let [a, b, c, d] = cols;
        Ok([GridField::new(a)?, GridField::new(b)?, GridField::new(c)?, GridField::new(d)?])
    }

    /// `sup_x |∂x²φ_t(x)|`, by dense sampling.
    pub fn sup_second_derivative(&self, t: f64) -> f64 {
        let s = self.spectrum_at(t);
        let m = 64 * (self.degree() + 1);
        (0..m)
            .map(|j| s.eval_derivs(TAU * j as f64 / m as f64)[2].abs())
            .fold(0.0, f64::max)
    }
}

/// Strictly positive probability density on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    field: GridField,
}

impl Density {
    /// Validate an already normalized density.
    pub fn new(field: GridField) -> Result<Self> {
        let min = field.min();
        if min < DENSITY_FLOOR {
            return Err(Error::IllConditionedDensity(format!("min value {min:.3e}")));
        }
        let defect = (field.integrate() - 1.0).abs();
        if defect > MASS_TOL {
            return Err(Error::MassDefect(defect));
        }
        Ok(Self { field })
    }

    /// Scale a positive profile to unit mass.
    pub fn normalized(field: GridField) -> Result<Self> {
        let mass = field.integrate();
        if field.min() <= 0.0 || mass <= 0.0 {
            return Err(Error::IllConditionedDensity("profile is not positive".into()));
        }
        Ok(Self::floored(field.map(|v| v / mass)?))
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::normalized(GridField::from_fn(n, f)?)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(GridField::constant(n, 1.0 / TAU)?)
    }

    /// Floor at [`DENSITY_FLOOR`] and renormalize, warning when it bites.
    fn floored(field: GridField) -> Self {
        if field.min() >= DENSITY_FLOOR {
            return Self { field };
        }
        warn!("density floor reached (min {:.3e}); renormalizing", field.min());
        let clipped = field.map(|v| v.max(DENSITY_FLOOR)).expect("finite");
        let mass = clipped.integrate();
        Self { field: clipped.map(|v| v / mass).expect("finite") }
    }

    pub fn field(&self) -> &GridField {
        &self.field
    }

    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    pub fn n(&self) -> usize {
        self.field.n()
    }

    /// `log ρ` (the stored density is already floored).
    pub fn log(&self) -> GridField {
        self.field.map(f64::ln).expect("positive density")
    }
}

/// The flow map `X_t` together with `J = ∂xX_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x: LiftedMap,
    pub jac: GridField,
}

impl FlowState {
    pub fn identity(n: usize) -> Result<Self> {
        Ok(Self {
            t: 0.0,
            x: LiftedMap::identity(n)?,
            jac: GridField::constant(n, 1.0)?,
        })
    }

    pub fn n(&self) -> usize {
        self.jac.n()
    }

    pub(crate) fn from_raw(t: f64, x: Vec<f64>, jac: Vec<f64>) -> Result<Self> {
        let min = jac.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > JACOBIAN_FLOOR) {
            return Err(Error::JacobianLoss { t, min });
        }
        Ok(Self {
            t,
            x: LiftedMap::new(x)?,
            jac: GridField::new(jac)?,
        })
    }
}

/// Right-hand side of the Lagrangian system `(X, J)` for a gradient flow.
fn flow_rhs(v: &VelocityPotential, t: f64, x: &[f64], jac: &[f64], dx: &mut [f64], dj: &mut [f64]) {
    let s = v.spectrum_at(t);
    for i in 0..x.len() {
        let d = s.eval_derivs(x[i]);
        dx[i] = d[1] + v.translation;
        dj[i] = d[2] * jac[i];
    }
}

/// One RK4 step of `dX = ∂xφ_t(X) dt`, `dJ = ∂x²φ_t(X) J dt`.
pub fn advance_flow(state: &FlowState, v: &VelocityPotential, dt: f64) -> Result<FlowState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let n = state.n();
    let x0 = state.x.lift();
    let j0 = state.jac.values();
    let t = state.t;
    let mut kx = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut kj = kx.clone();
    let mut xs = vec![0.0; n];
    let mut js = vec![0.0; n];
    let offsets = [0.0, 0.5, 0.5, 1.0];
    for stage in 0..4 {
        if stage == 0 {
            xs.copy_from_slice(x0);
            js.copy_from_slice(j0);
        } else {
            let c = offsets[stage] * dt;
            for i in 0..n {
                xs[i] = x0[i] + c * kx[stage - 1][i];
                js[i] = j0[i] + c * kj[stage - 1][i];
            }
        }
        let (ax, aj) = (&mut kx[stage], &mut kj[stage]);
        flow_rhs(v, t + offsets[stage] * dt, &xs, &js, ax, aj);
    }
    let combine = |y0: &[f64], k: &[Vec<f64>; 4]| -> Vec<f64> {
        (0..n)
            .map(|i| y0[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
            .collect()
    };
    FlowState::from_raw(t + dt, combine(x0, &kx), combine(j0, &kj))
}

/// Advance by `duration` with uniform steps no larger than `dt_max`.
pub fn advance_by(state: &FlowState, v: &VelocityPotential, duration: f64, dt_max: f64) -> Result<FlowState> {
    if duration <= 0.0 {
        return Ok(state.clone());
    }
    let steps = (duration / dt_max).ceil().max(1.0) as usize;
    let dt = duration / steps as f64;
    let mut s = state.clone();
    for _ in 0..steps {
        s = advance_flow(&s, v, dt)?;
    }
    Ok(s)
}

/// Flow from the identity at time 0 to time `t`.
pub fn flow_to(v: &VelocityPotential, n: usize, t: f64, dt_max: f64) -> Result<FlowState> {
    advance_by(&FlowState::identity(n)?, v, t, dt_max)
}

/// `ρ_t = (ρ₀/J)∘X⁻¹`, resampled on the uniform grid.
pub fn push_density(rho0: &Density, state: &FlowState) -> Result<Density> {
    if rho0.n() != state.n() {
        return Err(Error::GridMismatch(rho0.n(), state.n()));
    }
    let q = rho0.field().zip_with(&state.jac, |r, j| r / j)?;
    let inv = state.x.invert_monotone()?;
    let pushed = q.compose(&inv)?;
    let defect = (pushed.integrate() - 1.0).abs();
    if defect > MASS_TOL {
        return Err(Error::MassDefect(defect));
    }
    Ok(Density::floored(pushed))
}

/// Density of `(X⁻¹)_#(dx)` with respect to `dx`, on the original grid;
/// on the circle this is the Jacobian `∂xX`.
pub fn inverse_jacobian_density(state: &FlowState) -> GridField {
    state.jac.clone()
}

/// Write flow snapshots as CSV rows `t,x,X,J`.
pub fn write_flow_csv<W: Write>(mut w: W, states: &[FlowState]) -> std::io::Result<()> {
    writeln!(w, "t,x,X,J")?;
    for s in states {
        let n = s.n();
        for (j, (&xl, &jv)) in s.x.lift().iter().zip(s.jac.values()).enumerate() {
            writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e}", s.t, node(n, j), xl, jv)?;
        }
    }
    Ok(())
}

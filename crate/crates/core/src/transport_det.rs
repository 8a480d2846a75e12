//! Deterministic parallel translation along `c_t = (X_t)_#(ρ₀dx)`.
//!
//! The transported field is integrated in Lagrangian form, `f_t = g_t∘X_t`,
//! where `df/dt = −(∫f·a_t·ρ₀dx)·ρ̂_t(X_t)` with `a_t = (∂x²φ_t/ρ_t)∘X_t`.
//! Since `ρ_t(X_t) = ρ₀/J`, every coefficient is available pointwise on the
//! Lagrangian grid and no interpolation enters the time loop.

use std::io::Write;

use crate::error::{Error, Result};
use crate::field::{GridField, Spectrum};
use crate::flow::{push_density, Density, FlowState, VelocityPotential};
use crate::stats::compensated_sum;
use crate::tangent::{project, witten_laplacian, TangentField};

/// A field in `L²(ρ₀dx)`, the Lagrangian picture of a tangent field.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianField {
    values: GridField,
}

impl LagrangianField {
    pub fn new(values: GridField) -> Self {
        Self { values }
    }

    pub fn field(&self) -> &GridField {
        &self.values
    }

    pub fn values(&self) -> &[f64] {
        self.values.values()
    }

    /// `‖f‖²_{L²(ρ₀dx)}`.
    pub fn norm_sq(&self, rho0: &Density) -> f64 {
        let h = self.values.spacing();
        h * compensated_sum(self.values().iter().zip(rho0.values()).map(|(f, r)| f * f * r))
    }
}

/// `Λ(t, f) = −(∫f·a_t·ρ₀dx)·ρ̂_t(X_t)` evaluated on the Lagrangian grid.
pub fn lambda_det(
    t: f64,
    f: &LagrangianField,
    v: &VelocityPotential,
    rho0: &Density,
    flow: &FlowState,
) -> Result<LagrangianField> {
    let n = rho0.n();
    if f.field().n() != n || flow.n() != n {
        return Err(Error::GridMismatch(n, f.field().n().max(flow.n())));
    }
    let spec = v.spectrum_at(t);
    let d2: Vec<f64> = flow.x.lift().iter().map(|&x| spec.eval_derivs(x)[2]).collect();
    let mut out = vec![0.0; n];
    lambda_kernel(f.values(), &d2, flow.jac.values(), rho0.values(), &mut out);
    Ok(LagrangianField::new(GridField::new(out)?))
}

/// `out = −(Σ f·∂²φ(X)·J)·J/(ρ₀·Σ J²/ρ₀)`; the grid spacing cancels.
pub(crate) fn lambda_kernel(f: &[f64], d2: &[f64], jac: &[f64], rho0: &[f64], out: &mut [f64]) {
    let mut pairing = 0.0;
    let mut c = 0.0;
    for i in 0..f.len() {
        pairing += f[i] * d2[i] * jac[i];
        c += jac[i] * jac[i] / rho0[i];
    }
    let scale = -pairing / c;
    for i in 0..f.len() {
        out[i] = scale * jac[i] / rho0[i];
    }
}

/// Stored solution of the deterministic transport problem.
#[derive(Debug, Clone)]
pub struct TransportTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub flows: Vec<FlowState>,
    pub f: Vec<LagrangianField>,
    /// `∫g_t²ρ_t dx` per step.
    pub norms: Vec<f64>,
    /// `∫g_t dx` per step.
    pub means: Vec<f64>,
    pub rho0: Density,
}

impl TransportTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Eulerian field `g_t = f_t∘X_t⁻¹` at step `i`.
    pub fn eulerian(&self, i: usize) -> Result<TangentField> {
        let inv = self.flows[i].x.invert_monotone()?;
        Ok(TangentField::new(self.f[i].field().compose(&inv)?))
    }

    /// `ρ_t` at step `i`.
    pub fn density(&self, i: usize) -> Result<Density> {
        push_density(&self.rho0, &self.flows[i])
    }

    /// `max_t |norm(t) − norm(0)| / norm(0)`.
    pub fn norm_drift_rel(&self) -> f64 {
        let n0 = self.norms[0];
        self.norms.iter().map(|v| (v - n0).abs() / n0).fold(0.0, f64::max)
    }

    /// `max_t |∫g_t dx|`.
    pub fn max_abs_mean(&self) -> f64 {
        self.means.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Step index matching time `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let i = (t / self.dt).round();
        if i < 0.0 || i as usize >= self.len() || (i * self.dt - t).abs() > 1e-9 {
            return Err(Error::OutOfRange(t));
        }
        Ok(i as usize)
    }

    /// CSV with columns `t,norm,mean_g`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,norm,mean_g")?;
        for i in 0..self.len() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.times[i], self.norms[i], self.means[i])?;
        }
        Ok(())
    }
}

/// `(∫f²ρ₀dx, ∫f·J dx)`: the transported norm and the Eulerian mean.
pub(crate) fn diagnostics(f: &[f64], jac: &[f64], rho0: &[f64]) -> (f64, f64) {
    let h = std::f64::consts::TAU / f.len() as f64;
    let norm = compensated_sum(f.iter().zip(rho0).map(|(a, r)| a * a * r));
    let mean = compensated_sum(f.iter().zip(jac).map(|(a, j)| a * j));
    (h * norm, h * mean)
}

struct Rhs<'a> {
    v: &'a VelocityPotential,
    rho0: &'a [f64],
    d2: Vec<f64>,
}

impl Rhs<'_> {
    fn eval(&mut self, t: f64, x: &[f64], jac: &[f64], f: &[f64], dx: &mut [f64], dj: &mut [f64], df: &mut [f64]) {
        let s = self.v.spectrum_at(t);
        for i in 0..x.len() {
            let d = s.eval_derivs(x[i]);
            dx[i] = d[1] + self.v.translation;
            self.d2[i] = d[2];
            dj[i] = d[2] * jac[i];
        }
        lambda_kernel(f, &self.d2, jac, self.rho0, df);
    }
}

/// RK4 integration of the joint system `(X, J, f)` from `g0` over `[0, t_end]`.
pub fn integrate_parallel_det(
    g0: &TangentField,
    v: &VelocityPotential,
    rho0: &Density,
    dt: f64,
    t_end: f64,
) -> Result<TransportTrajectory> {
    if !g0.is_tangent() {
        return Err(Error::NonzeroMean(g0.mean()));
    }
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::InvalidParameter(format!("need dt > 0 and t_end > 0, got {dt}, {t_end}")));
    }
    let n = rho0.n();
    if g0.field().n() != n {
        return Err(Error::GridMismatch(n, g0.field().n()));
    }
    let steps = (t_end / dt).round().max(1.0) as usize;
    let state0 = FlowState::identity(n)?;
    let mut x = state0.x.lift().to_vec();
    let mut jac = vec![1.0; n];
    let mut f = g0.field().values().to_vec();
    let (norm0, mean0) = diagnostics(&f, &jac, rho0.values());
    let mut traj = TransportTrajectory {
        dt,
        times: vec![0.0],
        flows: vec![state0],
        f: vec![LagrangianField::new(g0.field().clone())],
        norms: vec![norm0],
        means: vec![mean0],
        rho0: rho0.clone(),
    };
    let mut rhs = Rhs { v, rho0: rho0.values(), d2: vec![0.0; n] };
    let zero = || vec![0.0; n];
    let mut k = [[zero(), zero(), zero()], [zero(), zero(), zero()], [zero(), zero(), zero()], [zero(), zero(), zero()]];
    let (mut xs, mut js, mut fs) = (zero(), zero(), zero());
    let offsets = [0.0, 0.5, 0.5, 1.0];
    for step in 0..steps {
        let t = step as f64 * dt;
        for stage in 0..4 {
            if stage == 0 {
                xs.copy_from_slice(&x);
                js.copy_from_slice(&jac);
                fs.copy_from_slice(&f);
            } else {
                let c = offsets[stage] * dt;
                let prev = &k[stage - 1];
                for i in 0..n {
                    xs[i] = x[i] + c * prev[0][i];
                    js[i] = jac[i] + c * prev[1][i];
                    fs[i] = f[i] + c * prev[2][i];
                }
            }
            let [kx, kj, kf] = &mut k[stage];
            rhs.eval(t + offsets[stage] * dt, &xs, &js, &fs, kx, kj, kf);
        }
        for (comp, y) in [&mut x, &mut jac, &mut f].into_iter().enumerate() {
            for i in 0..n {
                y[i] += dt / 6.0 * (k[0][comp][i] + 2.0 * k[1][comp][i] + 2.0 * k[2][comp][i] + k[3][comp][i]);
            }
        }
        let t1 = (step + 1) as f64 * dt;
        let state = FlowState::from_raw(t1, x.clone(), jac.clone())?;
        let (norm, mean) = diagnostics(&f, &jac, rho0.values());
        traj.times.push(t1);
        traj.flows.push(state);
        traj.f.push(LagrangianField::new(GridField::new(f.clone())?));
        traj.norms.push(norm);
        traj.means.push(mean);
    }
    Ok(traj)
}

/// Centered-difference residual of the weak transport equation
/// `d/dt ∫∂xψ·g_t ρ_t dx = ∫∂x²ψ·∂xφ_t·g_t ρ_t dx` with test function `ψ`.
pub fn weak_form_residual(
    traj: &TransportTrajectory,
    v: &VelocityPotential,
    testfn: &GridField,
    t: f64,
    h: f64,
) -> Result<f64> {
    let (lo, mid, hi) = (traj.index_of(t - h)?, traj.index_of(t)?, traj.index_of(t + h)?);
    let psi = testfn.spectrum();
    let pairing = |i: usize| {
        lagrangian_integral(traj, i, |x, _| psi.eval_derivs(x)[1])
    };
    let lhs = (pairing(hi) - pairing(lo)) / (2.0 * h);
    let tm = traj.times[mid];
    let rhs = lagrangian_integral(traj, mid, |x, _| {
        psi.eval_derivs(x)[2] * v.derivs_at(tm, x)[1]
    });
    Ok((lhs - rhs).abs())
}

/// `∫w(y)·g_t(y)·ρ_t(y) dy = Σ w(X_j)·f_j·ρ₀_j·h` at step `i`.
fn lagrangian_integral(traj: &TransportTrajectory, i: usize, w: impl Fn(f64, usize) -> f64) -> f64 {
    let x = traj.flows[i].x.lift();
    let f = traj.f[i].values();
    let r = traj.rho0.values();
    let h = std::f64::consts::TAU / x.len() as f64;
    h * compensated_sum((0..x.len()).map(|j| w(x[j], j) * f[j] * r[j]))
}

/// Centered-difference residual of
/// `d/dt ∫Z·g_t ρ_t dx = −∫(Δφ_t·Π⊥Z)·g_t ρ_t dx + ∫∂xφ_t·∂x(ΠZ)·g_t ρ_t dx`.
pub fn pairing_derivative_residual(
    traj: &TransportTrajectory,
    v: &VelocityPotential,
    z: &GridField,
    t: f64,
    h: f64,
) -> Result<f64> {
    let (lo, mid, hi) = (traj.index_of(t - h)?, traj.index_of(t)?, traj.index_of(t + h)?);
    let zs = z.spectrum();
    let pairing = |i: usize| lagrangian_integral(traj, i, |x, _| zs.eval(x));
    let lhs = (pairing(hi) - pairing(lo)) / (2.0 * h);
    let n = z.n();
    let tm = traj.times[mid];
    let rho = traj.density(mid)?;
    let proj = project(&rho, z)?;
    let perp = z.zip_with(proj.field(), |a, b| a - b)?;
    let [phi, dphi, ..] = v.fields_at(tm, n)?;
    let dlog = rho.log().differentiate(1)?;
    let lap = witten_laplacian(&rho, &phi)?.zip_with(&dlog, |a, d| a + v.translation * d)?;
    let dproj = proj.field().differentiate(1)?;
    let integrand = GridField::new(
        (0..n)
            .map(|j| -lap.values()[j] * perp.values()[j] + dphi.values()[j] * dproj.values()[j])
            .collect(),
    )?;
    let is: Spectrum = integrand.spectrum();
    let rhs = lagrangian_integral(traj, mid, |x, _| is.eval(x));
    Ok((lhs - rhs).abs())
}

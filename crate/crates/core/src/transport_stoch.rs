//! Stochastic parallel translation along `μ_t = (X_t)_#(ρ₀dx)` for Fourier
//! noise, in Lagrangian form.
//!
//! The Itô form reads `df = Σ_c w_c Λ_c(f) dB^c + Σ_c (w_c²/2) Θ_c(f) dt`
//! with `Λ_c(f) = −(∫f a_c ρ₀dx)·ρ̂_t(X_t)` and
//! `Θ_c(f) = −(∫f a_c ρ₀)·(ρ̂_t ∂x²φ_c)(X_t) − (∫f b_c ρ₀)·ρ̂_t(X_t)
//!           + 3 (∫f a_c ρ₀)(∫∂x²φ_c ρ̂_t dx)·ρ̂_t(X_t)`,
//! where `a_c = (∂x²φ_c/ρ_t)∘X_t` and `b_c = (∂x(∂x²φ_c ∂xφ_c)/ρ_t)∘X_t`.
//! The Stratonovich form keeps only the `Λ` terms.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{GridField, LiftedMap};
use crate::flow::{push_density, Density, FlowState};
use crate::stats::{loglog_slope, mean_and_se};
use crate::stochastic_flow::{
    path_seed, sample_driver, summarize, BrownianDriver, Channel, NoiseBasis, Scheme, Stepper,
    StochFlowState, MIN_PATHS,
};
use crate::tangent::{hat_density, TangentField};
use crate::transport_det::{diagnostics, LagrangianField};

/// Per-channel coefficients `a_c` and `b_c` on the Lagrangian grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftCoefficients {
    pub a: Vec<GridField>,
    pub b: Vec<GridField>,
}

/// `a_c = (∂x²φ_c/ρ_t)∘X` and `b_c = (∂x(∂x²φ_c∂xφ_c)/ρ_t)∘X`, using
/// `ρ_t(X) = ρ₀/J`.
pub fn drift_coefficients(basis: &NoiseBasis, state: &StochFlowState, rho0: &Density) -> Result<DriftCoefficients> {
    let n = rho0.n();
    if state.n() != n {
        return Err(Error::GridMismatch(n, state.n()));
    }
    let mut a = Vec::with_capacity(basis.len());
    let mut b = Vec::with_capacity(basis.len());
    for ch in basis.channels() {
        let (mut av, mut bv) = (vec![0.0; n], vec![0.0; n]);
        for j in 0..n {
            let d = ch.derivs(state.x.lift()[j]);
            let scale = state.jac.values()[j] / rho0.values()[j];
            av[j] = d[1] * scale;
            bv[j] = d[3] * scale;
        }
        a.push(GridField::new(av)?);
        b.push(GridField::new(bv)?);
    }
    Ok(DriftCoefficients { a, b })
}

/// `(Λ_c(f), Θ_c(f))` for one channel with unit weight.
pub fn lambda_theta(
    channel: &Channel,
    f: &LagrangianField,
    a: &GridField,
    b: &GridField,
    rho0: &Density,
    state: &StochFlowState,
) -> Result<(LagrangianField, LagrangianField)> {
    let n = rho0.n();
    let h = std::f64::consts::TAU / n as f64;
    let (fv, r, jac) = (f.values(), rho0.values(), state.jac.values());
    let c = h * (0..n).map(|j| jac[j] * jac[j] / r[j]).sum::<f64>();
    let hat: Vec<f64> = (0..n).map(|j| jac[j] / (r[j] * c)).collect();
    let ia = h * (0..n).map(|j| fv[j] * a.values()[j] * r[j]).sum::<f64>();
    let ib = h * (0..n).map(|j| fv[j] * b.values()[j] * r[j]).sum::<f64>();
    let d2: Vec<f64> = state.x.lift().iter().map(|&x| channel.derivs(x)[1]).collect();
    let k = h * (0..n).map(|j| d2[j] * hat[j] * jac[j]).sum::<f64>();
    let lambda: Vec<f64> = hat.iter().map(|v| -ia * v).collect();
    let theta: Vec<f64> = (0..n)
        .map(|j| -ia * hat[j] * d2[j] - ib * hat[j] + 3.0 * ia * k * hat[j])
        .collect();
    Ok((
        LagrangianField::new(GridField::new(lambda)?),
        LagrangianField::new(GridField::new(theta)?),
    ))
}

/// Lagrangian snapshot of a stochastic transport path.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub x: LiftedMap,
    pub jac: GridField,
    pub f: LagrangianField,
}

/// One pathwise solution with its per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StochTransportPath {
    pub seed: u64,
    pub times: Vec<f64>,
    /// `∫g_t²ρ_t dx` per step.
    pub norms: Vec<f64>,
    /// `∫g_t dx` per step.
    pub means: Vec<f64>,
    /// `max_x |exp(log K̃) − J|/J` per step.
    pub kunita_gaps: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub rho0: Density,
}

impl StochTransportPath {
    pub fn norm_drift_rel(&self) -> f64 {
        let n0 = self.norms[0];
        self.norms.iter().map(|v| (v - n0).abs() / n0).fold(0.0, f64::max)
    }

    pub fn max_abs_mean(&self) -> f64 {
        self.means.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn max_kunita_gap(&self) -> f64 {
        self.kunita_gaps.iter().copied().fold(0.0, f64::max)
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("at least the initial snapshot")
    }

    /// `g_t = f_t∘X_t⁻¹` for snapshot `i`.
    pub fn eulerian(&self, i: usize) -> Result<TangentField> {
        let s = &self.snapshots[i];
        Ok(TangentField::new(s.f.field().compose(&s.x.invert_monotone()?)?))
    }

    /// `ρ_t` for snapshot `i`.
    pub fn density(&self, i: usize) -> Result<Density> {
        let s = &self.snapshots[i];
        push_density(&self.rho0, &FlowState { t: s.t, x: s.x.clone(), jac: s.jac.clone() })
    }

    /// CSV rows `t,norm,mean_g` prefixed by `path`.
    pub fn write_csv<W: Write>(&self, path: usize, mut w: W) -> std::io::Result<()> {
        for i in 0..self.times.len() {
            writeln!(w, "{path},{:.16e},{:.16e},{:.16e}", self.times[i], self.norms[i], self.means[i])?;
        }
        Ok(())
    }
}

/// Integrate the transport SDE jointly with the flow. Snapshots are kept
/// every `record_every` steps (and at the final step); `0` keeps only the
/// endpoints.
pub fn integrate_stoch_parallel(
    g0: &TangentField,
    basis: &NoiseBasis,
    driver: &BrownianDriver,
    rho0: &Density,
    scheme: Scheme,
    record_every: usize,
) -> Result<StochTransportPath> {
    if !g0.is_tangent() {
        return Err(Error::NonzeroMean(g0.mean()));
    }
    if driver.channels < basis.len() {
        return Err(Error::DriverMismatch(format!(
            "driver has {} channels, basis needs {}",
            driver.channels,
            basis.len()
        )));
    }
    let n = rho0.n();
    if g0.field().n() != n {
        return Err(Error::GridMismatch(n, g0.field().n()));
    }
    let mut stepper = Stepper::new(basis, None, scheme, n, Some(rho0.values()));
    let x0 = LiftedMap::identity(n)?;
    let mut y = stepper.initial(x0.lift(), Some(g0.field().values()));
    let (norm0, mean0) = diagnostics(g0.field().values(), &y[n..2 * n], rho0.values());
    let mut path = StochTransportPath {
        seed: driver.seed,
        times: vec![0.0],
        norms: vec![norm0],
        means: vec![mean0],
        kunita_gaps: vec![0.0],
        snapshots: vec![Snapshot {
            t: 0.0,
            x: x0,
            jac: GridField::constant(n, 1.0)?,
            f: LagrangianField::new(g0.field().clone()),
        }],
        rho0: rho0.clone(),
    };
    for s in 0..driver.steps {
        stepper.step(&mut y, None, &driver.row(s)[..basis.len()], driver.dt);
        let t = (s + 1) as f64 * driver.dt;
        stepper.check(&y, t)?;
        let (jac, logk, f) = (&y[n..2 * n], &y[2 * n..3 * n], &y[3 * n..]);
        let (norm, mean) = diagnostics(f, jac, rho0.values());
        let gap = logk
            .iter()
            .zip(jac)
            .map(|(l, j)| (l.exp() - j).abs() / j)
            .fold(0.0, f64::max);
        path.times.push(t);
        path.norms.push(norm);
        path.means.push(mean);
        path.kunita_gaps.push(gap);
        let last = s + 1 == driver.steps;
        if last || (record_every > 0 && (s + 1) % record_every == 0) {
            path.snapshots.push(Snapshot {
                t,
                x: LiftedMap::new(y[..n].to_vec())?,
                jac: GridField::new(jac.to_vec())?,
                f: LagrangianField::new(GridField::new(f.to_vec())?),
            });
        }
    }
    Ok(path)
}

/// Gap between the eight-term expansion and its consolidated form, in
/// `L²(dx)`. With `B = ∫∂x²ψ·∂xφ dx`:
/// `I₁ = ∂x(∂x²ψ∂xφ)∂xφ`, `I₂ = −B∂xρ̂∂xφ`, `I₃ = −(∫∂x(∂x²ψ∂xφ)∂xφ)ρ̂`,
/// `I₄ = B(∫∂xρ̂∂xφ)ρ̂`, `J₁ = B∂x²φρ̂`, `J₂ = B∂x(log ρ)∂xφρ̂`,
/// `J₃ = −B(∫∂x²φρ̂)ρ̂`, `J₄ = −B(∫∂x(log ρ)∂xφρ̂)ρ̂`; the consolidated form
/// merges `I₂+J₂ = −2B∂xφ∂xρ̂` and `I₄+J₄ = 2B(∫∂xφ∂xρ̂)ρ̂`.
pub fn rs_identity_check(rho: &Density, phi: &GridField, psi: &GridField) -> Result<f64> {
    let n = rho.n();
    let hat = hat_density(rho)?;
    let dhat = hat.differentiate(1)?;
    let dlog = rho.log().differentiate(1)?;
    let (d1, d2) = (phi.differentiate(1)?, phi.differentiate(2)?);
    let psi2 = psi.differentiate(2)?;
    let v = |g: &GridField, j: usize| g.values()[j];
    let integral = |f: &dyn Fn(usize) -> f64| std::f64::consts::TAU / n as f64 * (0..n).map(f).sum::<f64>();
    let b = integral(&|j| v(&psi2, j) * v(&d1, j));
    let inner = GridField::new((0..n).map(|j| v(&psi2, j) * v(&d1, j)).collect())?;
    let dinner = inner.differentiate(1)?;
    let c3 = integral(&|j| v(&dinner, j) * v(&d1, j));
    let c4 = integral(&|j| v(&dhat, j) * v(&d1, j));
    let c_j3 = integral(&|j| v(&d2, j) * v(&hat, j));
    let c_j4 = integral(&|j| v(&dlog, j) * v(&d1, j) * v(&hat, j));
    let mut gap = 0.0;
    for j in 0..n {
        let (p1, p2, r, dr) = (v(&d1, j), v(&d2, j), v(&hat, j), v(&dhat, j));
        let i1 = v(&dinner, j) * p1;
        let i2 = -b * dr * p1;
        let i3 = -c3 * r;
        let i4 = b * c4 * r;
        let j1 = p2 * b * r;
        let j2 = v(&dlog, j) * p1 * b * r;
        let j3 = -b * c_j3 * r;
        let j4 = -b * c_j4 * r;
        let expanded = i1 + i2 + i3 + i4 + j1 + j2 + j3 + j4;
        let consolidated = i1 + i3 + j1 + j3 - 2.0 * b * p1 * dr + 2.0 * b * c4 * r;
        gap += (expanded - consolidated).powi(2);
    }
    Ok((std::f64::consts::TAU / n as f64 * gap).sqrt())
}

/// Boolean outcomes of the Galerkin experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PassFlags {
    pub strictly_decreasing: bool,
    pub slope: bool,
}

/// Galerkin convergence report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GalerkinReport {
    pub levels: Vec<usize>,
    pub ref_level: usize,
    /// `E[max_t ‖f_t^N − f_t^ref‖²_{L²(ρ₀dx)}]` per level.
    pub sup_errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub slope: f64,
    pub slope_ci: [f64; 2],
    /// Fraction of paths with `max_t ‖f_t^N − f_t^ref‖ > N^{-β}`.
    pub exceedance: Vec<f64>,
    pub beta: f64,
    pub pass_flags: PassFlags,
    pub pass: bool,
}

/// Parameters of the Galerkin experiment.
#[derive(Debug, Clone)]
pub struct GalerkinSetup {
    pub g0: TangentField,
    pub rho0: Density,
    pub q: f64,
    pub levels: Vec<usize>,
    pub ref_level: usize,
    pub paths: usize,
    pub dt: f64,
    pub t: f64,
    pub beta: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub slope_target: f64,
}

/// Strong convergence of the truncated transport as the noise truncation
/// grows, against a finer reference on coupled noise.
pub fn galerkin_convergence(setup: &GalerkinSetup) -> Result<GalerkinReport> {
    if !(setup.q > 2.5) {
        return Err(Error::InvalidParameter(format!("q must exceed 5/2, got {}", setup.q)));
    }
    if setup.paths < MIN_PATHS {
        return Err(Error::InsufficientPaths { got: setup.paths, min: MIN_PATHS });
    }
    if setup.levels.is_empty() || setup.levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("levels must be strictly increasing".into()));
    }
    let max_level = *setup.levels.last().expect("non-empty");
    if setup.ref_level < max_level {
        return Err(Error::InvalidParameter("reference level below the largest level".into()));
    }
    if setup.ref_level < 2 * max_level {
        warn!("reference level {} is below twice the largest level {}", setup.ref_level, max_level);
    }
    if !setup.g0.is_tangent() {
        return Err(Error::NonzeroMean(setup.g0.mean()));
    }
    let n = setup.rho0.n();
    let reference = NoiseBasis::fourier(setup.ref_level, setup.q)?;
    let bases: Vec<NoiseBasis> = setup
        .levels
        .iter()
        .map(|&l| NoiseBasis::fourier(l, setup.q))
        .collect::<Result<_>>()?;
    let steps = (setup.t / setup.dt).round() as usize;
    let rho0 = setup.rho0.values();
    let h = std::f64::consts::TAU / n as f64;
    let per_path: Vec<Vec<f64>> = (0..setup.paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>> {
            let driver = sample_driver(path_seed(setup.seed, p as u64), setup.dt, steps, reference.len())?;
            let x0 = LiftedMap::identity(n)?;
            let mut ref_stepper = Stepper::new(&reference, None, setup.scheme, n, Some(rho0));
            let mut y_ref = ref_stepper.initial(x0.lift(), Some(setup.g0.field().values()));
            let mut steppers: Vec<Stepper> = bases
                .iter()
                .map(|b| Stepper::new(b, None, setup.scheme, n, Some(rho0)))
                .collect();
            let mut ys: Vec<Vec<f64>> = steppers
                .iter()
                .map(|s| s.initial(x0.lift(), Some(setup.g0.field().values())))
                .collect();
            let mut sup = vec![0.0f64; bases.len()];
            for s in 0..steps {
                let row = driver.row(s);
                ref_stepper.step(&mut y_ref, None, row, setup.dt);
                let t = (s + 1) as f64 * setup.dt;
                ref_stepper.check(&y_ref, t)?;
                for (l, (st, y)) in steppers.iter_mut().zip(ys.iter_mut()).enumerate() {
                    st.step(y, None, &row[..bases[l].len()], setup.dt);
                    st.check(y, t)?;
                    let err: f64 = (0..n)
                        .map(|j| (y[3 * n + j] - y_ref[3 * n + j]).powi(2) * rho0[j])
                        .sum::<f64>()
                        * h;
                    sup[l] = sup[l].max(err);
                }
            }
            Ok(sup)
        })
        .collect::<Result<_>>()?;
    let base = summarize(&setup.levels, &per_path, setup.slope_target);
    let exceedance = setup
        .levels
        .iter()
        .enumerate()
        .map(|(l, &lv)| {
            let threshold = (lv as f64).powf(-setup.beta);
            per_path.iter().filter(|r| r[l].sqrt() > threshold).count() as f64 / per_path.len() as f64
        })
        .collect();
    let pass_flags = PassFlags {
        strictly_decreasing: base.monotone,
        slope: base.slope <= setup.slope_target,
    };
    Ok(GalerkinReport {
        levels: base.levels,
        ref_level: setup.ref_level,
        sup_errors: base.estimates,
        std_errors: base.std_errors,
        slope: base.slope,
        slope_ci: base.slope_ci,
        exceedance,
        beta: setup.beta,
        pass_flags,
        pass: pass_flags.strictly_decreasing && pass_flags.slope,
    })
}

/// Strong gap between two schemes as the step shrinks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeGapReport {
    pub dts: Vec<f64>,
    /// `E‖f_T^{(a)} − f_T^{(b)}‖²_{L²(ρ₀dx)}` per step size.
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Fitted exponent of the gap in `dt`.
    pub order: f64,
    pub order_ci: [f64; 2],
}

/// Parameters of the scheme-agreement experiment.
#[derive(Debug, Clone)]
pub struct SchemeGapSetup {
    pub g0: TangentField,
    pub rho0: Density,
    pub basis: NoiseBasis,
    pub dts: Vec<f64>,
    pub t: f64,
    pub paths: usize,
    pub seed: u64,
    pub schemes: (Scheme, Scheme),
}

/// `E‖f_T^{(a)} − f_T^{(b)}‖²` on coupled noise for each step size.
pub fn scheme_gap_experiment(setup: &SchemeGapSetup) -> Result<SchemeGapReport> {
    if setup.paths < 2 {
        return Err(Error::InsufficientPaths { got: setup.paths, min: 2 });
    }
    let n = setup.rho0.n();
    let h = std::f64::consts::TAU / n as f64;
    let per_path: Vec<Vec<f64>> = (0..setup.paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>> {
            setup
                .dts
                .iter()
                .map(|&dt| {
                    let steps = (setup.t / dt).round() as usize;
                    let driver = sample_driver(path_seed(setup.seed, p as u64), dt, steps, setup.basis.len())?;
                    let a = integrate_stoch_parallel(&setup.g0, &setup.basis, &driver, &setup.rho0, setup.schemes.0, 0)?;
                    let b = integrate_stoch_parallel(&setup.g0, &setup.basis, &driver, &setup.rho0, setup.schemes.1, 0)?;
                    let (fa, fb) = (a.last().f.values(), b.last().f.values());
                    Ok(h * (0..n).map(|j| (fa[j] - fb[j]).powi(2) * setup.rho0.values()[j]).sum::<f64>())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut estimates = Vec::new();
    let mut std_errors = Vec::new();
    for l in 0..setup.dts.len() {
        let col: Vec<f64> = per_path.iter().map(|r| r[l]).collect();
        let (m, se) = mean_and_se(&col);
        estimates.push(m);
        std_errors.push(se);
    }
    let (order, half) = loglog_slope(&setup.dts, &estimates, &std_errors);
    Ok(SchemeGapReport {
        dts: setup.dts.clone(),
        estimates,
        std_errors,
        order,
        order_ci: [order - half, order + half],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic_flow::{simulate_stoch_flow, ChannelKind};

    fn setup(n: usize) -> (Density, TangentField) {
        let rho = Density::from_fn(n, |x| 1.0 + 0.3 * x.cos()).unwrap();
        let g0 = TangentField::new(GridField::from_fn(n, f64::sin).unwrap());
        (rho, g0)
    }

    #[test]
    fn coefficients_at_identity_and_zero_field() {
        let n = 32;
        let rho = Density::uniform(n).unwrap();
        let basis = NoiseBasis::single(ChannelKind::Cos, 1, 1.0);
        let id = StochFlowState::identity(n).unwrap();
        let c = drift_coefficients(&basis, &id, &rho).unwrap();
        for (j, v) in c.a[0].values().iter().enumerate() {
            let x = crate::field::node(n, j);
            assert!((v - (-x.sin()) * std::f64::consts::TAU).abs() < 1e-12);
        }
        let zero = LagrangianField::new(GridField::constant(n, 0.0).unwrap());
        let (l, t) = lambda_theta(&basis.channels()[0], &zero, &c.a[0], &c.b[0], &rho, &id).unwrap();
        assert_eq!(l.field().max_abs(), 0.0);
        assert_eq!(t.field().max_abs(), 0.0);
    }

    #[test]
    fn coefficient_norm_matches_change_of_variables() {
        let n = 256;
        let (rho, _) = setup(n);
        let basis = NoiseBasis::fourier(2, 3.0).unwrap();
        let driver = sample_driver(3, 1e-3, 300, basis.len()).unwrap();
        let state = simulate_stoch_flow(&basis, &driver, n, Scheme::StratRk4, |_| {}).unwrap();
        let c = drift_coefficients(&basis, &state, &rho).unwrap();
        let rho_t = push_density(&rho, &FlowState { t: state.t, x: state.x.clone(), jac: state.jac.clone() }).unwrap();
        for (ch, a) in basis.channels().iter().zip(&c.a) {
            let lhs = a.zip_with(rho.field(), |v, r| v * v * r).unwrap().integrate();
            let rhs = GridField::from_fn(n, |x| ch.derivs(x)[1].powi(2))
                .unwrap()
                .zip_with(rho_t.field(), |v, r| v / r)
                .unwrap()
                .integrate();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} {rhs}");
        }
    }

    #[test]
    fn zero_increments_freeze_heun_and_move_ito() {
        let n = 64;
        let (rho, g0) = setup(n);
        let basis = NoiseBasis::fourier(2, 3.0).unwrap();
        let driver = BrownianDriver::zero(1e-2, 10, basis.len());
        let heun = integrate_stoch_parallel(&g0, &basis, &driver, &rho, Scheme::StratHeun, 0).unwrap();
        assert_eq!(heun.last().f.field(), g0.field());
        let ito = integrate_stoch_parallel(&g0, &basis, &driver, &rho, Scheme::ItoEuler, 0).unwrap();
        assert!(ito.last().f.field().zip_with(g0.field(), |a, b| a - b).unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn single_channel_norm_drift_halves() {
        let n = 128;
        let rho = Density::uniform(n).unwrap();
        let g0 = TangentField::new(GridField::from_fn(n, f64::sin).unwrap());
        let basis = NoiseBasis::single(ChannelKind::Cos, 1, 1.0);
        let mut drifts = Vec::new();
        for (dt, steps) in [(1e-3, 1000), (5e-4, 2000)] {
            let driver = sample_driver(17, dt, steps, 1).unwrap();
            let p = integrate_stoch_parallel(&g0, &basis, &driver, &rho, Scheme::StratHeun, 0).unwrap();
            drifts.push(p.norm_drift_rel());
        }
        assert!(drifts[0] <= 1e-3, "{drifts:?}");
        assert!(drifts[0] / drifts[1] >= 1.7, "{drifts:?}");
    }

    #[test]
    fn transport_is_linear() {
        let n = 64;
        let (rho, g0) = setup(n);
        let h0 = TangentField::new(GridField::from_fn(n, |x| (2.0 * x).cos()).unwrap());
        let basis = NoiseBasis::fourier(3, 3.0).unwrap();
        let driver = sample_driver(5, 1e-3, 200, basis.len()).unwrap();
        let comb = TangentField::new(g0.field().zip_with(h0.field(), |a, b| 2.0 * a - 0.5 * b).unwrap());
        let run = |g: &TangentField| integrate_stoch_parallel(g, &basis, &driver, &rho, Scheme::StratHeun, 0).unwrap();
        let (a, b, c) = (run(&g0), run(&h0), run(&comb));
        for j in 0..n {
            let lin = 2.0 * a.last().f.values()[j] - 0.5 * b.last().f.values()[j];
            assert!((lin - c.last().f.values()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn rs_gap_cases() {
        let n = 128;
        let rho = Density::from_fn(n, |x| 1.0 + 0.3 * x.sin()).unwrap();
        let phi = GridField::from_fn(n, f64::sin).unwrap();
        let psi = GridField::from_fn(n, |x| (2.0 * x).cos()).unwrap();
        assert!(rs_identity_check(&rho, &phi, &psi).unwrap() <= 1e-9);
        let uni = Density::uniform(n).unwrap();
        assert!(rs_identity_check(&uni, &phi, &psi).unwrap() <= 1e-10);
        let flat = GridField::constant(n, 0.0).unwrap();
        assert_eq!(rs_identity_check(&rho, &flat, &psi).unwrap(), 0.0);
    }

    #[test]
    fn galerkin_validation() {
        let (rho, g0) = setup(32);
        let s = GalerkinSetup {
            g0,
            rho0: rho,
            q: 2.5,
            levels: vec![2],
            ref_level: 4,
            paths: 32,
            dt: 1e-2,
            t: 0.2,
            beta: 0.25,
            seed: 1,
            scheme: Scheme::StratHeun,
            slope_target: -1.5,
        };
        assert!(galerkin_convergence(&s).is_err());
        let ok = GalerkinSetup { q: 3.0, levels: vec![2, 4], ..s };
        let r = galerkin_convergence(&ok).unwrap();
        assert_eq!(r.sup_errors[1], 0.0);
        assert!(r.sup_errors[0] > 0.0);
    }
}

//! Stochastic flows of circle diffeomorphisms driven by Fourier noise
//! `dX = Σ_c w_c ∂xφ_c(X)∘dB^c`, with pathwise Jacobians, Kunita densities,
//! a refinement-coupled Brownian driver and the appendix estimates.
//!
//! All Lagrangian quantities are stepped together in one state vector
//! `[X | J | log K̃ | f]`; the transported field `f` is optional and handled
//! by the transport module through the same stepper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{node, GridField, LiftedMap, Spectrum};
use crate::flow::JACOBIAN_FLOOR;
use crate::stats::{loglog_slope, mean_and_se};

/// Which Fourier field a channel carries: `∂xφ = cos kx` or `∂xφ = sin kx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    Cos,
    Sin,
}

/// One noise channel `w·∂xφ` with `∂xφ ∈ {cos kx, sin kx}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    pub k: u32,
    pub kind: ChannelKind,
    pub weight: f64,
}

impl Channel {
    /// `(∂xφ, ∂x²φ, ∂x³φ, ∂x(∂x²φ·∂xφ))` at `x`.
    pub fn derivs(&self, x: f64) -> [f64; 4] {
        let k = self.k as f64;
        let (s, c) = (k * x).sin_cos();
        let c2 = (2.0 * k * x).cos();
        match self.kind {
            ChannelKind::Cos => [c, -k * s, -k * k * c, -k * k * c2],
            ChannelKind::Sin => [s, k * c, -k * k * s, k * k * c2],
        }
    }
}

/// An ordered list of noise channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBasis {
    channels: Vec<Channel>,
}

impl NoiseBasis {
    /// The truncated basis: for `k = 1..=modes`, channels `cos kx` then
    /// `sin kx`, both with weight `k^{-q}`.
    pub fn fourier(modes: usize, q: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::InvalidParameter("truncation level must be at least 1".into()));
        }
        if !(q > 1.0) {
            return Err(Error::InvalidParameter(format!("weight exponent q must exceed 1, got {q}")));
        }
        let channels = (1..=modes as u32)
            .flat_map(|k| {
                let w = (k as f64).powf(-q);
                [ChannelKind::Cos, ChannelKind::Sin].map(|kind| Channel { k, kind, weight: w })
            })
            .collect();
        Ok(Self { channels })
    }

    pub fn single(kind: ChannelKind, k: u32, weight: f64) -> Self {
        Self { channels: vec![Channel { k, kind, weight }] }
    }

    pub fn from_channels(channels: Vec<Channel>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidParameter("noise basis needs at least one channel".into()));
        }
        if let Some(c) = channels.iter().find(|c| c.k == 0 || !c.weight.is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid channel {c:?}")));
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn max_k(&self) -> usize {
        self.channels.iter().map(|c| c.k as usize).max().unwrap_or(0)
    }
}

/// Time-stepping scheme for the Lagrangian SDE system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Euler–Maruyama on the Itô form.
    ItoEuler,
    /// Stratonovich predictor-corrector (Heun).
    #[default]
    StratHeun,
    /// Classical RK4 on the per-step Wong–Zakai ODE with frozen increments.
    StratRk4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for Monte Carlo path `path` of an experiment seeded with `seed`.
pub fn path_seed(seed: u64, path: u64) -> u64 {
    splitmix64(seed ^ splitmix64(path))
}

/// Multi-channel Brownian increments, `steps × channels`, row-major by step.
///
/// Each channel draws from its own ChaCha stream. With `steps = m·2^j`
/// (`m` odd), `m` coarse increments are drawn first and refined `j` times by
/// Brownian-bridge midpoint splitting, refinement level `l` drawing from
/// stream `(channel, l)`. Drivers that share a seed and a horizon are then
/// coupled across every dyadic refinement of the step, and restricting to
/// the first channels reproduces a smaller driver bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianDriver {
    pub seed: u64,
    pub dt: f64,
    pub steps: usize,
    pub channels: usize,
    increments: Vec<f64>,
}

pub fn sample_driver(seed: u64, dt: f64, steps: usize, channels: usize) -> Result<BrownianDriver> {
    if !(dt > 0.0) || steps == 0 {
        return Err(Error::InvalidParameter(format!("need dt > 0 and steps ≥ 1, got {dt}, {steps}")));
    }
    let levels = steps.trailing_zeros() as usize;
    let base = steps >> levels;
    let mut increments = vec![0.0; steps * channels];
    let mut col = Vec::with_capacity(steps);
    for c in 0..channels {
        let stream = |level: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((c as u64) << 8) | level as u64);
            rng
        };
        let mut tau = dt * (1usize << levels) as f64;
        let mut rng = stream(0);
        col.clear();
        col.extend((0..base).map(|_| tau.sqrt() * rng.sample::<f64, _>(StandardNormal)));
        for level in 1..=levels {
            let mut rng = stream(level);
            let sd = 0.5 * tau.sqrt();
            let mut next = Vec::with_capacity(col.len() * 2);
            for &d in &col {
                let first = 0.5 * d + sd * rng.sample::<f64, _>(StandardNormal);
                next.push(first);
                next.push(d - first);
            }
            col = next;
            tau *= 0.5;
        }
        for (s, v) in col.iter().enumerate() {
            increments[s * channels + c] = *v;
        }
    }
    Ok(BrownianDriver { seed, dt, steps, channels, increments })
}

impl BrownianDriver {
    /// A driver with all increments zero.
    pub fn zero(dt: f64, steps: usize, channels: usize) -> Self {
        Self { seed: 0, dt, steps, channels, increments: vec![0.0; steps * channels] }
    }

    /// Build from explicit increments (`steps × channels`, row-major).
    pub fn from_increments(dt: f64, channels: usize, increments: Vec<f64>) -> Result<Self> {
        if channels == 0 || increments.len() % channels != 0 {
            return Err(Error::DriverMismatch("increment table is not rectangular".into()));
        }
        Ok(Self { seed: 0, dt, steps: increments.len() / channels, channels, increments })
    }

    /// Increments of all channels at one step.
    pub fn row(&self, step: usize) -> &[f64] {
        &self.increments[step * self.channels..(step + 1) * self.channels]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.steps).map(|s| self.increments[s * self.channels + c]).collect()
    }

    /// The first `channels` columns.
    pub fn restrict(&self, channels: usize) -> Result<Self> {
        if channels > self.channels {
            return Err(Error::DriverMismatch(format!("cannot restrict {} channels to {channels}", self.channels)));
        }
        let increments = (0..self.steps)
            .flat_map(|s| self.row(s)[..channels].iter().copied())
            .collect();
        Ok(Self { channels, increments, ..*self })
    }

    /// Sum consecutive blocks of `factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::DriverMismatch(format!("{} steps not divisible by {factor}", self.steps)));
        }
        let steps = self.steps / factor;
        let mut increments = vec![0.0; steps * self.channels];
        for s in 0..self.steps {
            for c in 0..self.channels {
                increments[(s / factor) * self.channels + c] += self.row(s)[c];
            }
        }
        Ok(Self { dt: self.dt * factor as f64, steps, increments, ..*self })
    }
}

/// Pointwise Fourier evaluation tables for one step.
struct ModeTable {
    kmax: usize,
    /// `Σ w·ΔB` over cos and sin channels at wave number `k`.
    cos_inc: Vec<f64>,
    sin_inc: Vec<f64>,
    /// `½ Σ w²` over cos and sin channels at wave number `k`.
    cos_var: Vec<f64>,
    sin_var: Vec<f64>,
}

impl ModeTable {
    fn new(basis: &NoiseBasis) -> Self {
        let kmax = basis.max_k();
        let mut t = Self {
            kmax,
            cos_inc: vec![0.0; kmax + 1],
            sin_inc: vec![0.0; kmax + 1],
            cos_var: vec![0.0; kmax + 1],
            sin_var: vec![0.0; kmax + 1],
        };
        for ch in basis.channels() {
            let v = 0.5 * ch.weight * ch.weight;
            match ch.kind {
                ChannelKind::Cos => t.cos_var[ch.k as usize] += v,
                ChannelKind::Sin => t.sin_var[ch.k as usize] += v,
            }
        }
        t
    }

    fn load(&mut self, basis: &NoiseBasis, db: &[f64]) {
        self.cos_inc.iter_mut().for_each(|v| *v = 0.0);
        self.sin_inc.iter_mut().for_each(|v| *v = 0.0);
        for (ch, d) in basis.channels().iter().zip(db) {
            let inc = ch.weight * d;
            match ch.kind {
                ChannelKind::Cos => self.cos_inc[ch.k as usize] += inc,
                ChannelKind::Sin => self.sin_inc[ch.k as usize] += inc,
            }
        }
    }

    /// `(Σ inc ∂xφ(x), Σ inc ∂x²φ(x))`.
    #[inline]
    fn velocity(&self, x: f64) -> (f64, f64) {
        let (s1, c1) = x.sin_cos();
        let (mut c, mut s) = (c1, s1);
        let (mut u, mut w) = (0.0, 0.0);
        for k in 1..=self.kmax {
            let (a, b) = (self.cos_inc[k], self.sin_inc[k]);
            u += a * c + b * s;
            w += k as f64 * (b * c - a * s);
            (c, s) = (c * c1 - s * s1, s * c1 + c * s1);
        }
        (u, w)
    }
}

/// Steps the Lagrangian state `[X | J | log K̃ | f]` of `n` particles.
pub(crate) struct Stepper<'a> {
    basis: &'a NoiseBasis,
    drift: Option<&'a Spectrum>,
    scheme: Scheme,
    n: usize,
    rho0: Option<&'a [f64]>,
    table: ModeTable,
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
    s_noise: Vec<f64>,
}

impl<'a> Stepper<'a> {
    /// `rho0` present means the transported field `f` is part of the state.
    pub(crate) fn new(
        basis: &'a NoiseBasis,
        drift: Option<&'a Spectrum>,
        scheme: Scheme,
        n: usize,
        rho0: Option<&'a [f64]>,
    ) -> Self {
        let len = n * if rho0.is_some() { 4 } else { 3 };
        Self {
            basis,
            drift,
            scheme,
            n,
            rho0,
            table: ModeTable::new(basis),
            k: [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]],
            stage: vec![0.0; len],
            s_noise: vec![0.0; n],
        }
    }

    pub(crate) fn state_len(&self) -> usize {
        self.stage.len()
    }

    /// Initial state at the given particle positions.
    pub(crate) fn initial(&self, x: &[f64], f: Option<&[f64]>) -> Vec<f64> {
        let mut y = vec![0.0; self.state_len()];
        let n = self.n;
        y[..n].copy_from_slice(x);
        y[n..2 * n].iter_mut().for_each(|v| *v = 1.0);
        if let Some(f) = f {
            y[3 * n..].copy_from_slice(f);
        }
        y
    }

    /// Stratonovich vector field times the increments, plus `dt` times the
    /// deterministic drift. Writes `Σ inc ∂x²φ(X)` (noise only) to `s_noise`
    /// when requested.
    fn field(&mut self, y: &[f64], dt: f64, out: &mut [f64], record_s: bool) {
        let n = self.n;
        let (mut pairing, mut c) = (0.0, 0.0);
        for j in 0..n {
            let x = y[j];
            let (mut u, w) = self.table.velocity(x);
            if record_s {
                self.s_noise[j] = w;
            }
            let mut w_tot = w;
            if let Some(d) = self.drift {
                let e = d.eval_derivs(x);
                u += dt * e[1];
                w_tot += dt * e[2];
            }
            let jac = y[n + j];
            out[j] = u;
            out[n + j] = jac * w_tot;
            out[2 * n + j] = w_tot;
            if let Some(r) = self.rho0 {
                pairing += y[3 * n + j] * jac * w_tot;
                c += jac * jac / r[j];
            }
        }
        if let Some(r) = self.rho0 {
            let scale = -pairing / c;
            for j in 0..n {
                out[3 * n + j] = scale * y[n + j] / r[j];
            }
        }
    }

    /// Itô correction `dt·D(y)` added to `out`.
    fn ito_drift(&self, y: &[f64], dt: f64, out: &mut [f64]) {
        let n = self.n;
        let t = &self.table;
        for j in 0..n {
            let x = y[j];
            let (s1, c1) = x.sin_cos();
            let (mut c, mut s) = (c1, s1);
            let (mut dx, mut dj, mut dl) = (0.0, 0.0, 0.0);
            for k in 1..=t.kmax {
                let kf = k as f64;
                let (vc, vs) = (t.cos_var[k], t.sin_var[k]);
                dx += kf * s * c * (vs - vc);
                dj += kf * kf * (c * c - s * s) * (vs - vc);
                dl -= kf * kf * (vc * c * c + vs * s * s);
                (c, s) = (c * c1 - s * s1, s * c1 + c * s1);
            }
            out[j] += dt * dx;
            out[n + j] += dt * dj * y[n + j];
            out[2 * n + j] += dt * dl;
        }
        if let Some(r) = self.rho0 {
            let f = &y[3 * n..];
            let jac = &y[n..2 * n];
            let theta = theta_sum(self.basis, &y[..n], jac, f, r);
            for j in 0..n {
                out[3 * n + j] += dt * theta[j];
            }
        }
    }

    /// Advance `y` by one step with Brownian increments `db` (one per basis
    /// channel). Accumulates the left-point Itô integral `Σ w ∂x²φ(X) ΔB`
    /// into `khat` when given.
    pub(crate) fn step(&mut self, y: &mut [f64], khat: Option<&mut [f64]>, db: &[f64], dt: f64) {
        self.table.load(self.basis, db);
        let len = y.len();
        let mut k = std::mem::take(&mut self.k);
        let mut stage = std::mem::take(&mut self.stage);
        self.field(y, dt, &mut k[0], true);
        if let Some(kh) = khat {
            for (a, b) in kh.iter_mut().zip(&self.s_noise) {
                *a += b;
            }
        }
        match self.scheme {
            Scheme::ItoEuler => {
                self.ito_drift(y, dt, &mut k[0]);
                for i in 0..len {
                    y[i] += k[0][i];
                }
            }
            Scheme::StratHeun => {
                for i in 0..len {
                    stage[i] = y[i] + k[0][i];
                }
                self.field(&stage, dt, &mut k[1], false);
                for i in 0..len {
                    y[i] += 0.5 * (k[0][i] + k[1][i]);
                }
            }
            Scheme::StratRk4 => {
                for (from, (to, c)) in [(0, (1, 0.5)), (1, (2, 0.5)), (2, (3, 1.0))] {
                    for i in 0..len {
                        stage[i] = y[i] + c * k[from][i];
                    }
                    let (_, rest) = k.split_at_mut(to);
                    self.field(&stage, dt, &mut rest[0], false);
                }
                for i in 0..len {
                    y[i] += (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]) / 6.0;
                }
            }
        }
        self.k = k;
        self.stage = stage;
    }

    /// Fail when the Jacobian block has left the admissible range.
    pub(crate) fn check(&self, y: &[f64], t: f64) -> Result<()> {
        let jac = &y[self.n..2 * self.n];
        let min = jac.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > JACOBIAN_FLOOR) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::JacobianLoss { t, min });
        }
        Ok(())
    }
}

/// `Σ_c (w_c²/2)·Θ_c(f)` on the Lagrangian grid, with
/// `Θ_c(f) = −I_a ρ̂(X)∂x²φ_c(X) − I_b ρ̂(X) + 3 I_a K_c ρ̂(X)`,
/// `I_a = ∫f a_c ρ₀`, `I_b = ∫f b_c ρ₀`, `K_c = ∫∂x²φ_c ρ̂_t dy`.
pub(crate) fn theta_sum(basis: &NoiseBasis, x: &[f64], jac: &[f64], f: &[f64], rho0: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h = std::f64::consts::TAU / n as f64;
    let csum: f64 = (0..n).map(|j| jac[j] * jac[j] / rho0[j]).sum();
    let c_true = h * csum;
    let mut out = vec![0.0; n];
    let mut a = vec![0.0; n];
    for ch in basis.channels() {
        let (mut ia, mut ib, mut kc) = (0.0, 0.0, 0.0);
        for j in 0..n {
            let d = ch.derivs(x[j]);
            a[j] = d[1];
            ia += f[j] * d[1] * jac[j];
            ib += f[j] * d[3] * jac[j];
            kc += d[1] * jac[j] * jac[j] / rho0[j];
        }
        let (ia, ib, kc) = (h * ia, h * ib, kc / csum);
        let v = 0.5 * ch.weight * ch.weight;
        for j in 0..n {
            let hat = jac[j] / (rho0[j] * c_true);
            out[j] += v * hat * (-ia * a[j] - ib + 3.0 * ia * kc);
        }
    }
    out
}

/// Pathwise state of a stochastic flow on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StochFlowState {
    pub t: f64,
    pub x: LiftedMap,
    pub jac: GridField,
    /// Stratonovich accumulation `∫Σ w ∂x²φ(X)∘dB`, the log of `K̃`.
    pub log_kunita: GridField,
    /// Left-point Itô accumulation `∫Σ w ∂x²φ(X) dB`, the log of `K̂`.
    pub log_khat: GridField,
}

impl StochFlowState {
    pub fn identity(n: usize) -> Result<Self> {
        Ok(Self {
            t: 0.0,
            x: LiftedMap::identity(n)?,
            jac: GridField::constant(n, 1.0)?,
            log_kunita: GridField::constant(n, 0.0)?,
            log_khat: GridField::constant(n, 0.0)?,
        })
    }

    pub fn n(&self) -> usize {
        self.jac.n()
    }

    fn from_state(t: f64, y: &[f64], khat: &[f64], n: usize) -> Result<Self> {
        Ok(Self {
            t,
            x: LiftedMap::new(y[..n].to_vec())?,
            jac: GridField::new(y[n..2 * n].to_vec())?,
            log_kunita: GridField::new(y[2 * n..3 * n].to_vec())?,
            log_khat: GridField::new(khat.to_vec())?,
        })
    }
}

pub(crate) fn check_driver(basis: &NoiseBasis, driver: &BrownianDriver) -> Result<()> {
    if driver.channels < basis.len() {
        return Err(Error::DriverMismatch(format!(
            "driver has {} channels, basis needs {}",
            driver.channels,
            basis.len()
        )));
    }
    Ok(())
}

/// One step of the flow system `(X, J, log K̃)` using increments `step_index`.
pub fn advance_stoch_flow(
    state: &StochFlowState,
    basis: &NoiseBasis,
    driver: &BrownianDriver,
    step_index: usize,
    scheme: Scheme,
) -> Result<StochFlowState> {
    check_driver(basis, driver)?;
    if step_index >= driver.steps {
        return Err(Error::DriverMismatch(format!("step {step_index} beyond {} steps", driver.steps)));
    }
    let n = state.n();
    let mut stepper = Stepper::new(basis, None, scheme, n, None);
    let mut y = Vec::with_capacity(3 * n);
    y.extend_from_slice(state.x.lift());
    y.extend_from_slice(state.jac.values());
    y.extend_from_slice(state.log_kunita.values());
    let mut khat = state.log_khat.values().to_vec();
    stepper.step(&mut y, Some(&mut khat), &driver.row(step_index)[..basis.len()], driver.dt);
    let t = state.t + driver.dt;
    stepper.check(&y, t)?;
    StochFlowState::from_state(t, &y, &khat, n)
}

/// Run the flow from the identity through every driver step. `observe`
/// receives each state after it is produced, starting with `t = 0`.
pub fn simulate_stoch_flow(
    basis: &NoiseBasis,
    driver: &BrownianDriver,
    n: usize,
    scheme: Scheme,
    mut observe: impl FnMut(&StochFlowState),
) -> Result<StochFlowState> {
    check_driver(basis, driver)?;
    let mut state = StochFlowState::identity(n)?;
    observe(&state);
    let mut stepper = Stepper::new(basis, None, scheme, n, None);
    let mut y = stepper.initial(state.x.lift(), None);
    let mut khat = vec![0.0; n];
    for s in 0..driver.steps {
        stepper.step(&mut y, Some(&mut khat), &driver.row(s)[..basis.len()], driver.dt);
        let t = (s + 1) as f64 * driver.dt;
        stepper.check(&y, t)?;
        state = StochFlowState::from_state(t, &y, &khat, n)?;
        observe(&state);
    }
    Ok(state)
}

/// Particle positions only, started at arbitrary points.
pub(crate) fn flow_points(
    basis: &NoiseBasis,
    driver: &BrownianDriver,
    points: &[f64],
    scheme: Scheme,
) -> Result<Vec<f64>> {
    let n = points.len();
    let mut stepper = Stepper::new(basis, None, scheme, n, None);
    let mut y = stepper.initial(points, None);
    for s in 0..driver.steps {
        stepper.step(&mut y, None, &driver.row(s)[..basis.len()], driver.dt);
    }
    stepper.check(&y, driver.steps as f64 * driver.dt)?;
    Ok(y[..n].to_vec())
}

/// `K̃_t = exp(log K̃)`; on the circle it coincides with `J`.
pub fn kunita_density(state: &StochFlowState) -> GridField {
    state.log_kunita.map(f64::exp).expect("finite exponent")
}

/// `max_j |exp(log K̃_j) − J_j| / J_j`.
pub fn kunita_gap(state: &StochFlowState) -> f64 {
    state
        .log_kunita
        .values()
        .iter()
        .zip(state.jac.values())
        .map(|(l, j)| (l.exp() - j).abs() / j)
        .fold(0.0, f64::max)
}

/// Monte Carlo convergence report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub levels: Vec<usize>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub slope: f64,
    pub slope_ci: [f64; 2],
    pub monotone: bool,
    pub pass: bool,
}

/// Minimum Monte Carlo sample for the convergence experiments.
pub const MIN_PATHS: usize = 32;

/// Parameters of the coupling experiment.
#[derive(Debug, Clone)]
pub struct CouplingSetup {
    pub paths: usize,
    pub levels: Vec<usize>,
    pub ref_level: usize,
    pub q: f64,
    pub dt: f64,
    pub t: f64,
    pub p: u32,
    pub seed: u64,
    /// Number of evenly spaced starting points averaged per path.
    pub points: usize,
    pub scheme: Scheme,
    /// Slope the fitted exponent must not exceed for `pass`.
    pub slope_target: f64,
}

/// Estimates `E[(X_t^N(x) − X_t^{ref}(x))^{2p}]` for each level on coupled
/// noise, averaging over evenly spaced starting points.
pub fn coupling_error_experiment(setup: &CouplingSetup) -> Result<ConvergenceReport> {
    if setup.paths < MIN_PATHS {
        return Err(Error::InsufficientPaths { got: setup.paths, min: MIN_PATHS });
    }
    if !(setup.q > 1.5) {
        return Err(Error::InvalidParameter(format!("q must exceed 3/2, got {}", setup.q)));
    }
    let max_level = setup.levels.iter().copied().max().unwrap_or(0);
    if setup.levels.is_empty() || setup.levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("levels must be strictly increasing".into()));
    }
    if setup.ref_level < max_level {
        return Err(Error::InvalidParameter("reference level below the largest level".into()));
    }
    let reference = NoiseBasis::fourier(setup.ref_level, setup.q)?;
    let bases: Vec<NoiseBasis> = setup
        .levels
        .iter()
        .map(|&l| NoiseBasis::fourier(l, setup.q))
        .collect::<Result<_>>()?;
    let steps = (setup.t / setup.dt).round() as usize;
    let points: Vec<f64> = (0..setup.points).map(|j| std::f64::consts::TAU * j as f64 / setup.points as f64).collect();
    let per_path: Vec<Vec<f64>> = (0..setup.paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>> {
            let driver = sample_driver(path_seed(setup.seed, p as u64), setup.dt, steps, reference.len())?;
            let xr = flow_points(&reference, &driver, &points, setup.scheme)?;
            bases
                .iter()
                .map(|b| {
                    let xn = flow_points(b, &driver, &points, setup.scheme)?;
                    let m = xn
                        .iter()
                        .zip(&xr)
                        .map(|(a, r)| (a - r).powi(2 * setup.p as i32))
                        .sum::<f64>()
                        / points.len() as f64;
                    Ok(m)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&setup.levels, &per_path, setup.slope_target))
}

/// Mean, standard error, fitted slope and monotonicity from per-path
/// per-level samples.
pub(crate) fn summarize(levels: &[usize], per_path: &[Vec<f64>], slope_target: f64) -> ConvergenceReport {
    let mut estimates = Vec::new();
    let mut std_errors = Vec::new();
    for l in 0..levels.len() {
        let col: Vec<f64> = per_path.iter().map(|r| r[l]).collect();
        let (m, se) = mean_and_se(&col);
        estimates.push(m);
        std_errors.push(se);
    }
    let xs: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
    let positive = estimates.iter().all(|&e| e > 0.0);
    let (slope, half) = if positive && levels.len() >= 2 {
        loglog_slope(&xs, &estimates, &std_errors)
    } else {
        (f64::NAN, f64::NAN)
    };
    let monotone = estimates.windows(2).all(|w| w[1] < w[0]);
    ConvergenceReport {
        levels: levels.to_vec(),
        estimates,
        std_errors,
        slope,
        slope_ci: [slope - half, slope + half],
        monotone,
        pass: monotone && slope <= slope_target,
    }
}

/// Riemann zeta function for real `s > 1`, by Euler–Maclaurin summation.
pub fn riemann_zeta(s: f64) -> Result<f64> {
    if !(s > 1.0) {
        return Err(Error::InvalidParameter(format!("zeta diverges at s = {s}")));
    }
    let m = 32.0f64;
    let mut sum: f64 = (1..32).map(|k| (k as f64).powf(-s)).sum();
    sum += m.powf(1.0 - s) / (s - 1.0) + 0.5 * m.powf(-s);
    let bernoulli = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0];
    let mut rising = s;
    let mut fact = 2.0;
    for (i, b) in bernoulli.iter().enumerate() {
        let p = 2 * i + 1;
        sum += b / fact * rising * m.powf(-s - p as f64);
        rising *= (s + p as f64) * (s + p as f64 + 1.0);
        fact *= ((p + 2) * (p + 3)) as f64;
    }
    Ok(sum)
}

/// Result of the exponential-martingale moment check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentReport {
    pub estimate: f64,
    pub std_error: f64,
    pub ci: [f64; 2],
    pub bound: f64,
    /// `exp(p²v/2)`, the exact value for a Gaussian exponent of variance `v`.
    pub gaussian_value: f64,
    /// The CI lower edge does not exceed the bound.
    pub pass: bool,
    /// The whole CI lies below the bound.
    pub ci_below_bound: bool,
}

/// Parameters of the moment check.
#[derive(Debug, Clone)]
pub struct MomentSetup {
    pub modes: usize,
    pub q: f64,
    pub dt: f64,
    pub t: f64,
    pub p: f64,
    pub paths: usize,
    pub seed: u64,
    pub points: usize,
    pub scheme: Scheme,
}

/// Monte Carlo estimate of `E[K̂_t^p]` against `exp(p²·ζ(2q−2)·t)`.
pub fn moment_bound_check(setup: &MomentSetup) -> Result<MomentReport> {
    let zeta = riemann_zeta(2.0 * setup.q - 2.0)?;
    let basis = NoiseBasis::fourier(setup.modes, setup.q)?;
    let bound = (setup.p * setup.p * zeta * setup.t).exp();
    let variance = setup.t * (1..=setup.modes).map(|k| (k as f64).powf(2.0 - 2.0 * setup.q)).sum::<f64>();
    let gaussian_value = (0.5 * setup.p * setup.p * variance).exp();
    if setup.paths < 2 {
        return Err(Error::InsufficientPaths { got: setup.paths, min: 2 });
    }
    let steps = (setup.t / setup.dt).round() as usize;
    let points: Vec<f64> = (0..setup.points).map(|j| std::f64::consts::TAU * j as f64 / setup.points as f64).collect();
    let samples: Vec<f64> = (0..setup.paths)
        .into_par_iter()
        .map(|p| -> Result<f64> {
            if steps == 0 || setup.p == 0.0 {
                return Ok(1.0);
            }
            let driver = sample_driver(path_seed(setup.seed, p as u64), setup.dt, steps, basis.len())?;
            let m = points.len();
            let mut stepper = Stepper::new(&basis, None, setup.scheme, m, None);
            let mut y = stepper.initial(&points, None);
            let mut khat = vec![0.0; m];
            for s in 0..steps {
                stepper.step(&mut y, Some(&mut khat), driver.row(s), setup.dt);
            }
            stepper.check(&y, setup.t)?;
            Ok(khat.iter().map(|l| (setup.p * l).exp()).sum::<f64>() / m as f64)
        })
        .collect::<Result<_>>()?;
    let (estimate, std_error) = mean_and_se(&samples);
    let ci = [estimate - 1.96 * std_error, estimate + 1.96 * std_error];
    Ok(MomentReport {
        estimate,
        std_error,
        ci,
        bound,
        gaussian_value,
        pass: ci[0] <= bound,
        ci_below_bound: ci[1] < bound,
    })
}

/// Evenly spaced points on the grid of size `n`.
pub fn grid_points(n: usize) -> Vec<f64> {
    (0..n).map(|j| node(n, j)).collect()
}

//! Dispatch of each command to the core library, collecting checks,
//! metrics and artifacts.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use wtransport_core::field::{node, GridField};
use wtransport_core::flow::{advance_flow, push_density, write_flow_csv, FlowState};
use wtransport_core::functionals::{
    ito_verify_all, Functional, InteractionEnergy, InternalEnergy, ItoSetup, PotentialEnergy,
};
use wtransport_core::random::{random_density, random_field};
use wtransport_core::stochastic_flow::{
    coupling_error_experiment, moment_bound_check, path_seed, sample_driver, CouplingSetup, MomentSetup, NoiseBasis,
};
use wtransport_core::transport_det::integrate_parallel_det;
use wtransport_core::transport_stoch::{
    galerkin_convergence, integrate_stoch_parallel, rs_identity_check, GalerkinSetup,
};

use crate::config::{Command, ExperimentConfig, Target};
use crate::CliError;

/// Summary schema version.
pub const SCHEMA: u32 = 1;

/// Machine-readable outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub schema: u32,
    pub command: Command,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub pass: bool,
    pub checks: BTreeMap<String, bool>,
    pub metrics: BTreeMap<String, f64>,
}

/// A file to be written into the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Default)]
struct Outcome {
    checks: BTreeMap<String, bool>,
    metrics: BTreeMap<String, f64>,
    artifacts: Vec<Artifact>,
}

impl Outcome {
    fn check(&mut self, name: &str, ok: bool) {
        self.checks.insert(name.to_string(), ok);
    }

    fn metric(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    fn file(&mut self, name: &str, bytes: Vec<u8>) {
        self.artifacts.push(Artifact { name: name.to_string(), bytes });
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
        bytes.push(b'\n');
        self.file(name, bytes);
    }
}

/// Run the configured experiment. Check failures are reported in the
/// summary, not as errors.
pub fn run(cfg: &ExperimentConfig) -> Result<(RunSummary, Vec<Artifact>), CliError> {
    let out = match cfg.command {
        Command::Flow => flow(cfg)?,
        Command::TransportDet => transport_det(cfg)?,
        Command::TransportStoch => transport_stoch(cfg)?,
        Command::Converge => converge(cfg)?,
        Command::ItoCheck => ito_check(cfg)?,
        Command::Moments => moments(cfg)?,
        Command::RsCheck => rs_check(cfg)?,
    };
    let summary = RunSummary {
        schema: SCHEMA,
        command: cfg.command,
        config: cfg.clone(),
        config_hash: cfg.content_hash(),
        pass: out.checks.values().all(|&ok| ok),
        checks: out.checks,
        metrics: out.metrics,
    };
    Ok((summary, out.artifacts))
}

fn basis(cfg: &ExperimentConfig) -> Result<NoiseBasis, CliError> {
    Ok(NoiseBasis::from_channels(cfg.noise.clone())?)
}

fn flow(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let rho0 = cfg.density()?;
    let mut state = FlowState::identity(cfg.n)?;
    let mut kept = vec![state.clone()];
    for s in 1..=cfg.steps() {
        state = advance_flow(&state, &cfg.potential, cfg.dt)?;
        if s % cfg.record_every == 0 || s == cfg.steps() {
            kept.push(state.clone());
        }
    }
    let rho_t = push_density(&rho0, &state)?;
    let mut o = Outcome::default();
    let defect = (rho_t.field().integrate() - 1.0).abs();
    let jac_consistency = state
        .x
        .spectral_jacobian()
        .values()
        .iter()
        .zip(state.jac.values())
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);
    o.metric("mass_defect", defect);
    o.metric("min_jacobian", state.jac.min());
    o.metric("max_jacobian", state.jac.values().iter().copied().fold(0.0, f64::max));
    o.metric("jacobian_consistency", jac_consistency);
    o.metric("density_min", rho_t.field().min());
    o.check("mass_conservation", defect <= 1e-8);
    o.check("jacobian_positive", state.jac.min() > 0.0);
    let mut csv = Vec::new();
    write_flow_csv(&mut csv, &kept)?;
    o.file("flow.csv", csv);
    let mut dens = b"x,rho\n".to_vec();
    for (j, r) in rho_t.values().iter().enumerate() {
        writeln!(dens, "{:.16e},{:.16e}", node(cfg.n, j), r)?;
    }
    o.file("density.csv", dens);
    Ok(o)
}

fn transport_det(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let traj = integrate_parallel_det(&cfg.g0()?, &cfg.potential, &cfg.density()?, cfg.dt, cfg.t)?;
    let mut o = Outcome::default();
    o.metric("norm_drift_rel", traj.norm_drift_rel());
    o.metric("max_abs_mean", traj.max_abs_mean());
    o.metric("norm_initial", traj.norms[0]);
    o.metric("norm_final", *traj.norms.last().expect("nonempty"));
    o.check("norm_conservation", traj.norm_drift_rel() <= 1e-6);
    o.check("tangency", traj.max_abs_mean() <= 1e-8);
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    o.file("trajectory.csv", csv);
    Ok(o)
}

fn transport_stoch(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let (g0, rho0, basis) = (cfg.g0()?, cfg.density()?, basis(cfg)?);
    let paths = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let driver = sample_driver(path_seed(cfg.seed, p as u64), cfg.dt, cfg.steps(), basis.len())?;
            integrate_stoch_parallel(&g0, &basis, &driver, &rho0, cfg.scheme, 0)
        })
        .collect::<wtransport_core::Result<Vec<_>>>()?;
    let worst = |f: &dyn Fn(&wtransport_core::transport_stoch::StochTransportPath) -> f64| {
        paths.iter().map(f).fold(0.0, f64::max)
    };
    let (drift, mean, gap) = (worst(&|p| p.norm_drift_rel()), worst(&|p| p.max_abs_mean()), worst(&|p| p.max_kunita_gap()));
    let mut o = Outcome::default();
    o.metric("worst_norm_drift_rel", drift);
    o.metric("worst_abs_mean", mean);
    o.metric("worst_kunita_gap", gap);
    o.metric(
        "mean_norm_drift_rel",
        paths.iter().map(|p| p.norm_drift_rel()).sum::<f64>() / paths.len() as f64,
    );
    o.check("norm_conservation", drift <= 5e-3);
    o.check("tangency", mean <= 1e-3);
    o.check("kunita_agreement", gap <= 1e-4);
    let mut csv = b"path,t,norm,mean_g\n".to_vec();
    for (i, p) in paths.iter().enumerate() {
        p.write_csv(i, &mut csv)?;
    }
    o.file("trajectory.csv", csv);
    Ok(o)
}

#[derive(Serialize)]
struct ConvergenceFile<'a> {
    target: Target,
    levels: &'a [usize],
    ref_level: usize,
    sup_errors: &'a [f64],
    std_errors: &'a [f64],
    slope: f64,
    slope_ci: [f64; 2],
}

fn converge(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut o = Outcome::default();
    let (errors, std_errors, slope, ci) = match cfg.target {
        Target::Galerkin => {
            let r = galerkin_convergence(&GalerkinSetup {
                g0: cfg.g0()?,
                rho0: cfg.density()?,
                q: cfg.q,
                levels: cfg.levels.clone(),
                ref_level: cfg.ref_level,
                paths: cfg.paths,
                dt: cfg.dt,
                t: cfg.t,
                beta: cfg.beta,
                seed: cfg.seed,
                scheme: cfg.scheme,
                slope_target: -1.5,
            })?;
            o.check("strictly_decreasing", r.pass_flags.strictly_decreasing);
            o.check("slope", r.pass_flags.slope);
            for (l, e) in r.levels.iter().zip(&r.exceedance) {
                o.metric(format!("exceedance_level_{l}"), *e);
            }
            (r.sup_errors, r.std_errors, r.slope, r.slope_ci)
        }
        Target::Coupling => {
            let r = coupling_error_experiment(&CouplingSetup {
                paths: cfg.paths,
                levels: cfg.levels.clone(),
                ref_level: cfg.ref_level,
                q: cfg.q,
                dt: cfg.dt,
                t: cfg.t,
                p: cfg.p as u32,
                seed: cfg.seed,
                points: cfg.points,
                scheme: cfg.scheme,
                slope_target: -3.0,
            })?;
            o.check("strictly_decreasing", r.monotone);
            o.check("slope", r.slope <= -3.0);
            (r.estimates, r.std_errors, r.slope, r.slope_ci)
        }
    };
    o.metric("slope", slope);
    o.metric("slope_ci_low", ci[0]);
    o.metric("slope_ci_high", ci[1]);
    for (l, e) in cfg.levels.iter().zip(&errors) {
        o.metric(format!("error_level_{l}"), *e);
    }
    o.json(
        "report.json",
        &ConvergenceFile {
            target: cfg.target,
            levels: &cfg.levels,
            ref_level: cfg.ref_level,
            sup_errors: &errors,
            std_errors: &std_errors,
            slope,
            slope_ci: ci,
        },
    );
    Ok(o)
}

fn ito_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let phi = GridField::from_fn(cfg.n, |x| cfg.phi.eval(x))?;
    let fs = [
        Functional::Potential(PotentialEnergy::new(&phi)),
        Functional::Internal(InternalEnergy::new(cfg.chi)),
        Functional::Interaction(InteractionEnergy::from_fn(cfg.n, |x, y| cfg.kernel(x, y))?),
    ];
    let reports = ito_verify_all(
        &fs,
        &ItoSetup {
            rho0: cfg.density()?,
            basis: basis(cfg)?,
            drift: None,
            paths: cfg.paths,
            dt: cfg.dt,
            t: cfg.t,
            seed: cfg.seed,
            scheme: cfg.scheme,
            subintervals: cfg.subintervals,
        },
    )?;
    let mut o = Outcome::default();
    for r in &reports {
        o.check(&r.functional, r.pass);
        o.metric(format!("{}_z_score", r.functional), r.z_score);
        o.metric(format!("{}_estimate", r.functional), r.estimate);
        let worst = r.martingale.iter().map(|m| m.z_score.abs()).fold(0.0, f64::max);
        o.metric(format!("{}_max_increment_z", r.functional), worst);
    }
    o.json("report.json", &reports);
    Ok(o)
}

fn moments(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let r = moment_bound_check(&MomentSetup {
        modes: cfg.modes,
        q: cfg.q,
        dt: cfg.dt,
        t: cfg.t,
        p: cfg.p,
        paths: cfg.paths,
        seed: cfg.seed,
        points: cfg.points,
        scheme: cfg.scheme,
    })?;
    let mut o = Outcome::default();
    o.metric("estimate", r.estimate);
    o.metric("std_error", r.std_error);
    o.metric("bound", r.bound);
    o.metric("gaussian_value", r.gaussian_value);
    o.check("below_bound", r.pass);
    o.check("ci_below_bound", r.ci_below_bound);
    o.json("report.json", &r);
    Ok(o)
}

fn rs_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = b"trial,gap\n".to_vec();
    let mut worst = 0.0f64;
    for i in 0..cfg.trials {
        let rho = random_density(&mut rng, cfg.n, 4, 0.5)?;
        let phi = random_field(&mut rng, cfg.n, 4)?;
        let psi = random_field(&mut rng, cfg.n, 4)?;
        let gap = rs_identity_check(&rho, &phi, &psi)?;
        worst = worst.max(gap);
        writeln!(csv, "{i},{gap:.16e}")?;
    }
    let mut o = Outcome::default();
    o.metric("max_gap", worst);
    o.check("identity", worst <= 1e-9);
    o.file("rs_gaps.csv", csv);
    Ok(o)
}

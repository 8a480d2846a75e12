//! Experiment configuration: a JSON file of optional fields, overridden by
//! command-line flags, resolved against per-command defaults and validated.

use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wtransport_core::field::{nodes, GridField};
use wtransport_core::functionals::Chi;
use wtransport_core::stochastic_flow::{Channel, ChannelKind, Scheme};
use wtransport_core::tangent::TangentField;
use wtransport_core::{Density, VelocityPotential};

use crate::CliError;

/// Experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Deterministic flow and pushed-forward density.
    Flow,
    /// Deterministic parallel transport.
    TransportDet,
    /// Stochastic parallel transport over Monte Carlo paths.
    TransportStoch,
    /// Convergence in the noise truncation level.
    Converge,
    /// Monte Carlo check of the Itô formula for three energies.
    ItoCheck,
    /// Moment bound for the Itô exponential of the flow.
    Moments,
    /// Drift-algebra identity on random triples.
    RsCheck,
}

/// Which convergence experiment `converge` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Sup-in-time L² error of the truncated transport.
    Galerkin,
    /// Moment error of the truncated flow.
    Coupling,
}

/// Trigonometric series `Σ_k cos[k−1]·cos kx + sin[k−1]·sin kx`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Series {
    #[serde(default)]
    pub cos: Vec<f64>,
    #[serde(default)]
    pub sin: Vec<f64>,
}

impl Series {
    pub fn eval(&self, x: f64) -> f64 {
        let c: f64 = self.cos.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * x).cos()).sum();
        let s: f64 = self.sin.iter().enumerate().map(|(k, b)| b * ((k + 1) as f64 * x).sin()).sum();
        c + s
    }

    fn degree(&self) -> usize {
        self.cos.len().max(self.sin.len())
    }

    fn finite(&self) -> bool {
        self.cos.iter().chain(&self.sin).all(|v| v.is_finite())
    }
}

/// One term `cos·cos(jx + ky) + sin·sin(jx + ky)` of an interaction kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTerm {
    pub j: i32,
    pub k: i32,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// Contents of a config file; every field is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub command: Option<Command>,
    pub n: Option<usize>,
    pub dt: Option<f64>,
    pub t: Option<f64>,
    pub seed: Option<u64>,
    pub q: Option<f64>,
    pub modes: Option<usize>,
    pub levels: Option<Vec<usize>>,
    pub ref_level: Option<usize>,
    pub paths: Option<usize>,
    pub trials: Option<usize>,
    pub scheme: Option<Scheme>,
    pub potential: Option<VelocityPotential>,
    pub noise: Option<Vec<Channel>>,
    pub density: Option<Series>,
    pub g0: Option<Series>,
    pub phi: Option<Series>,
    pub chi: Option<Chi>,
    pub interaction: Option<Vec<KernelTerm>>,
    pub target: Option<Target>,
    pub p: Option<f64>,
    pub beta: Option<f64>,
    pub points: Option<usize>,
    pub subintervals: Option<usize>,
    pub record_every: Option<usize>,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub n: Option<usize>,
    pub q: Option<f64>,
    pub paths: Option<usize>,
}

/// Fully resolved configuration; this is what a run echoes and hashes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub n: usize,
    pub dt: f64,
    pub t: f64,
    pub seed: u64,
    pub q: f64,
    pub modes: usize,
    pub levels: Vec<usize>,
    pub ref_level: usize,
    pub paths: usize,
    pub trials: usize,
    pub scheme: Scheme,
    pub potential: VelocityPotential,
    pub noise: Vec<Channel>,
    pub density: Series,
    pub g0: Series,
    pub phi: Series,
    pub chi: Chi,
    pub interaction: Vec<KernelTerm>,
    pub target: Target,
    pub p: f64,
    pub beta: f64,
    pub points: usize,
    pub subintervals: usize,
    pub record_every: usize,
}

/// Defaults shown by `--help`.
pub const DEFAULTS_HELP: &str = "\
Defaults: n=256, dt=1e-3, t=1, seed=42, q=3, modes=4, levels=[4,8,16], ref_level=64,
scheme=strat-rk4, potential=sin x, density ∝ 1+0.3cos x (1+0.3sin x for ito-check),
g0=sin x, noise=cos/sin pairs k=1..modes with weight k^-q (cos x for ito-check),
phi=sin x, chi=entropy, interaction=cos(x-y), target=galerkin, beta=0.25, points=16,
subintervals=8, record_every=100, trials=50.
paths: transport-stoch 64, converge 256, ito-check 10000, moments 1000.
p: moments 2, coupling 1.

Exit codes: 0 all checks pass, 1 configuration error, 2 numerical breakdown or
I/O failure, 3 a scientific check failed.";

impl FileConfig {
    /// Parse a config file; blank files mean all defaults.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}:{e}", path.display())))
    }

    /// Parse config text, reporting `line:column: message` on failure.
    pub fn parse(text: &str) -> Result<Self, String> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).map_err(|e| format!("{}:{}: {e}", e.line(), e.column()))
    }
}

/// Merge file, flags and defaults for `command`, then validate.
pub fn resolve(command: Command, file: FileConfig, flags: &Overrides) -> Result<ExperimentConfig, CliError> {
    if let Some(c) = file.command {
        if c != command {
            return Err(CliError::Config(format!(
                "config file is for command {:?} but {:?} was requested",
                c, command
            )));
        }
    }
    let q = flags.q.or(file.q).unwrap_or(3.0);
    let modes = file.modes.unwrap_or(4);
    let ito = command == Command::ItoCheck;
    let target = file.target.unwrap_or(Target::Galerkin);
    let default_paths = match command {
        Command::TransportStoch => 64,
        Command::Converge => 256,
        Command::ItoCheck => 10_000,
        Command::Moments => 1000,
        Command::Flow | Command::TransportDet | Command::RsCheck => 1,
    };
    let default_noise = || -> Vec<Channel> {
        if ito {
            return vec![Channel { k: 1, kind: ChannelKind::Cos, weight: 1.0 }];
        }
        (1..=modes as u32)
            .flat_map(|k| {
                let w = (k as f64).powf(-q);
                [ChannelKind::Cos, ChannelKind::Sin].map(|kind| Channel { k, kind, weight: w })
            })
            .collect()
    };
    let default_density = if ito {
        Series { cos: vec![], sin: vec![0.3] }
    } else {
        Series { cos: vec![0.3], sin: vec![] }
    };
    let sin_x = Series { cos: vec![], sin: vec![1.0] };
    let cfg = ExperimentConfig {
        command,
        n: flags.n.or(file.n).unwrap_or(256),
        dt: flags.dt.or(file.dt).unwrap_or(1e-3),
        t: file.t.unwrap_or(1.0),
        seed: flags.seed.or(file.seed).unwrap_or(42),
        q,
        modes,
        levels: file.levels.unwrap_or_else(|| vec![4, 8, 16]),
        ref_level: file.ref_level.unwrap_or(64),
        paths: flags.paths.or(file.paths).unwrap_or(default_paths),
        trials: file.trials.unwrap_or(50),
        scheme: file.scheme.unwrap_or(Scheme::StratRk4),
        potential: file.potential.unwrap_or_else(|| VelocityPotential::single(1, 0.0, 1.0)),
        noise: file.noise.unwrap_or_else(default_noise),
        density: file.density.unwrap_or(default_density),
        g0: file.g0.unwrap_or_else(|| sin_x.clone()),
        phi: file.phi.unwrap_or(sin_x),
        chi: file.chi.unwrap_or(Chi::Entropy),
        interaction: file.interaction.unwrap_or_else(|| vec![KernelTerm { j: 1, k: -1, cos: 1.0, sin: 0.0 }]),
        target,
        p: file.p.unwrap_or(if command == Command::Moments { 2.0 } else { 1.0 }),
        beta: file.beta.unwrap_or(0.25),
        points: file.points.unwrap_or(16),
        subintervals: file.subintervals.unwrap_or(8),
        record_every: file.record_every.unwrap_or(100),
    };
    let problems = cfg.violations();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(format!("invalid configuration:\n  {}", problems.join("\n  "))))
    }
}

impl ExperimentConfig {
    pub fn steps(&self) -> usize {
        (self.t / self.dt).round() as usize
    }

    /// Every range violation, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let c = self.command;
        if !(self.n.is_power_of_two() && (64..=4096).contains(&self.n)) {
            v.push(format!("n = {} must be a power of two in [64, 4096]", self.n));
        }
        if !(1e-5..=1e-1).contains(&self.dt) {
            v.push(format!("dt = {} must lie in [1e-5, 1e-1]", self.dt));
        }
        if !(self.t > 0.0 && self.t <= 10.0) {
            v.push(format!("t = {} must lie in (0, 10]", self.t));
        } else if (self.steps() as f64 * self.dt - self.t).abs() > 1e-9 * self.t {
            v.push(format!("t = {} is not a whole number of steps dt = {}", self.t, self.dt));
        }
        if !(self.q > 1.0) {
            v.push(format!("q = {} must exceed 1", self.q));
        } else if c == Command::Converge && !(self.q > 2.5) {
            v.push(format!("q = {} must exceed 5/2 for converge", self.q));
        }
        if self.modes == 0 || 4 * self.modes > self.n {
            v.push(format!("modes = {} must lie in [1, n/4]", self.modes));
        }
        if self.levels.is_empty() || self.levels[0] == 0 || self.levels.windows(2).any(|w| w[0] >= w[1]) {
            v.push(format!("levels = {:?} must be positive and strictly increasing", self.levels));
        } else if self.ref_level < *self.levels.last().expect("nonempty") {
            v.push(format!("ref_level = {} must be at least max(levels)", self.ref_level));
        }
        if 4 * self.ref_level > self.n && c == Command::Converge {
            v.push(format!("ref_level = {} must not exceed n/4", self.ref_level));
        }
        let min_paths = match c {
            Command::Converge => 32,
            Command::ItoCheck => 64,
            Command::Moments => 2,
            _ => 1,
        };
        if self.paths < min_paths {
            v.push(format!("paths = {} must be at least {min_paths} for {c:?}", self.paths));
        }
        if c == Command::ItoCheck && self.paths % 2 != 0 {
            v.push(format!("paths = {} must be even (antithetic pairs)", self.paths));
        }
        if self.trials == 0 {
            v.push("trials must be at least 1".into());
        }
        let half = (self.n / 2) as u32;
        if self.potential.modes.iter().any(|m| m.k >= half || !m.cos.is_finite() || !m.sin.is_finite())
            || !self.potential.translation.is_finite()
        {
            v.push(format!("potential modes need finite coefficients and k < n/2 = {half}"));
        }
        if self.noise.is_empty() || self.noise.iter().any(|ch| ch.k == 0 || ch.k >= half || !ch.weight.is_finite()) {
            v.push(format!("noise needs at least one channel, each with 1 ≤ k < n/2 = {half} and finite weight"));
        }
        for (name, s) in [("density", &self.density), ("g0", &self.g0), ("phi", &self.phi)] {
            if !s.finite() || s.degree() >= self.n / 2 {
                v.push(format!("{name} needs finite coefficients of degree below n/2"));
            }
        }
        if self.density.finite() && nodes(self.n).iter().any(|&x| 1.0 + self.density.eval(x) <= 0.0) {
            v.push("density 1 + series must be positive on the grid".into());
        }
        if let Chi::Power { m } = self.chi {
            if !m.is_finite() {
                v.push(format!("chi power m = {m} must be finite"));
            }
        }
        if self.interaction.iter().any(|term| {
            !term.cos.is_finite() || !term.sin.is_finite() || term.j.unsigned_abs() >= half || term.k.unsigned_abs() >= half
        }) {
            v.push(format!("interaction terms need finite coefficients and |j|, |k| < n/2 = {half}"));
        }
        if !(self.p > 0.0) {
            v.push(format!("p = {} must be positive", self.p));
        } else if c == Command::Converge && self.target == Target::Coupling && self.p.fract() != 0.0 {
            v.push(format!("p = {} must be a whole number for coupling", self.p));
        }
        if !(self.beta > 0.0) {
            v.push(format!("beta = {} must be positive", self.beta));
        }
        if self.points == 0 {
            v.push("points must be at least 1".into());
        }
        if self.subintervals == 0 || (c == Command::ItoCheck && self.steps() % self.subintervals != 0) {
            v.push(format!("subintervals = {} must divide the {} steps", self.subintervals, self.steps()));
        }
        if self.record_every == 0 {
            v.push("record_every must be at least 1".into());
        }
        v
    }

    pub fn density(&self) -> wtransport_core::Result<Density> {
        Density::from_fn(self.n, |x| 1.0 + self.density.eval(x))
    }

    pub fn g0(&self) -> wtransport_core::Result<TangentField> {
        Ok(TangentField::new(GridField::from_fn(self.n, |x| self.g0.eval(x))?))
    }

    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        self.interaction
            .iter()
            .map(|t| {
                let a = t.j as f64 * x + t.k as f64 * y;
                t.cos * a.cos() + t.sin * a.sin()
            })
            .sum()
    }

    /// Keys sorted, compact: the form that is hashed.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    /// SHA-256 of the canonical JSON framed as a git blob object.
    pub fn content_hash(&self) -> String {
        let body = self.canonical_json();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()));
        h.update(body.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_text(command: Command, text: &str, flags: &Overrides) -> Result<ExperimentConfig, CliError> {
        resolve(command, FileConfig::parse(text).map_err(CliError::Config)?, flags)
    }

    #[test]
    fn blank_file_gives_defaults() {
        let cfg = resolve_text(Command::TransportDet, "", &Overrides::default()).unwrap();
        assert_eq!((cfg.n, cfg.dt, cfg.q, cfg.seed), (256, 1e-3, 3.0, 42));
        assert_eq!(cfg, resolve_text(Command::TransportDet, "{}", &Overrides::default()).unwrap());
    }

    #[test]
    fn flags_override_file() {
        let flags = Overrides { dt: Some(1e-3), ..Default::default() };
        let cfg = resolve_text(Command::Flow, r#"{"dt": 1e-2}"#, &flags).unwrap();
        assert_eq!(cfg.dt, 1e-3);
        let cfg = resolve_text(Command::Flow, r#"{"dt": 1e-2}"#, &Overrides::default()).unwrap();
        assert_eq!(cfg.dt, 1e-2);
    }

    #[test]
    fn converge_needs_q_above_five_halves() {
        let err = resolve_text(Command::Converge, r#"{"q": 2}"#, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("5/2"), "{err}");
        assert!(resolve_text(Command::Moments, r#"{"q": 2}"#, &Overrides::default()).is_ok());
    }

    #[test]
    fn unknown_fields_and_syntax_errors_are_located() {
        let err = FileConfig::parse("{\n  \"dt\": 1e-3,\n  \"bogus\": 1\n}").unwrap_err();
        assert!(err.starts_with("3:") && err.contains("bogus"), "{err}");
        assert!(FileConfig::parse("{\"n\": }").unwrap_err().starts_with("1:"));
    }

    #[test]
    fn violations_are_listed_exhaustively() {
        let err = resolve_text(Command::Converge, r#"{"n": 100, "dt": 1.0, "q": 2}"#, &Overrides::default()).unwrap_err();
        let text = err.to_string();
        for needle in ["n = 100", "dt = 1", "q = 2"] {
            assert!(text.contains(needle), "{text}");
        }
    }

    #[test]
    fn hash_ignores_field_order() {
        let a = resolve_text(Command::Flow, r#"{"dt": 2e-3, "seed": 9}"#, &Overrides::default()).unwrap();
        let b = resolve_text(Command::Flow, r#"{"seed": 9, "dt": 2e-3}"#, &Overrides::default()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = resolve_text(Command::Flow, r#"{"seed": 10, "dt": 2e-3}"#, &Overrides::default()).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn mismatched_command_is_rejected() {
        assert!(resolve_text(Command::Flow, r#"{"command": "moments"}"#, &Overrides::default()).is_err());
        assert!(resolve_text(Command::Moments, r#"{"command": "moments"}"#, &Overrides::default()).is_ok());
    }
}

//! Seeded random trigonometric polynomials for randomized checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{GridField, Spectrum};
use crate::flow::Density;

/// `Σ_{k=1}^{degree} k^{-decay}(a_k cos kx + b_k sin kx)` with standard
/// normal `a_k, b_k` and no constant term.
pub fn trig_polynomial<R: Rng + ?Sized>(rng: &mut R, degree: usize, decay: f64) -> Spectrum {
    let mut cos = vec![0.0; degree + 1];
    let mut sin = vec![0.0; degree + 1];
    for k in 1..=degree {
        let s = (k as f64).powf(-decay);
        cos[k] = s * rng.sample::<f64, _>(StandardNormal);
        sin[k] = s * rng.sample::<f64, _>(StandardNormal);
    }
    Spectrum::from_coeffs(cos, sin)
}

/// Random smooth field with a random constant term.
pub fn random_field<R: Rng + ?Sized>(rng: &mut R, n: usize, degree: usize) -> Result<GridField> {
    let c: f64 = rng.sample(StandardNormal);
    let s = trig_polynomial(rng, degree, 1.0);
    GridField::from_fn(n, |x| c + s.eval(x))
}

/// Random smooth zero-mean field.
pub fn random_tangent<R: Rng + ?Sized>(rng: &mut R, n: usize, degree: usize) -> Result<GridField> {
    trig_polynomial(rng, degree, 1.0).sample(n)
}

/// Random density `∝ 1 + contrast·p/max|p|` for a random polynomial `p`, so
/// that `max ρ / min ρ = (1 + contrast)/(1 − contrast)` at most.
pub fn random_density<R: Rng + ?Sized>(rng: &mut R, n: usize, degree: usize, contrast: f64) -> Result<Density> {
    if !(0.0..1.0).contains(&contrast) {
        return Err(Error::InvalidParameter(format!("contrast must lie in [0, 1), got {contrast}")));
    }
    let p = trig_polynomial(rng, degree, 1.0).sample(n)?;
    let peak = p.max_abs().max(f64::MIN_POSITIVE);
    Density::normalized(p.map(|v| 1.0 + contrast * v / peak)?)
}

//! Tangent-space calculus at `μ = ρ dx`: the projection onto zero-mean
//! fields, the auxiliary density `ρ̂`, the Witten Laplacian and the
//! weighted divergence.

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::flow::{flow_to, push_density, Density, VelocityPotential, DENSITY_FLOOR};

/// Zero-mean tolerance for tangent membership.
pub const TANGENT_TOL: f64 = 1e-10;

/// Internal step used when flows are built for residual checks.
const RESIDUAL_DT: f64 = 1e-3;

/// Eulerian vector field on the circle, identified with a scalar function.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentField {
    values: GridField,
}

impl TangentField {
    pub fn new(values: GridField) -> Self {
        Self { values }
    }

    /// Checked constructor: requires `|∫v dx| ≤ TANGENT_TOL`.
    pub fn tangent(values: GridField) -> Result<Self> {
        let mean = values.integrate();
        if mean.abs() > TANGENT_TOL {
            return Err(Error::NonzeroMean(mean));
        }
        Ok(Self { values })
    }

    pub fn field(&self) -> &GridField {
        &self.values
    }

    pub fn into_field(self) -> GridField {
        self.values
    }

    /// `∫v dx`; zero exactly when `v` is a derivative of a periodic function.
    pub fn mean(&self) -> f64 {
        self.values.integrate()
    }

    pub fn is_tangent(&self) -> bool {
        self.mean().abs() <= TANGENT_TOL
    }
}

fn check_density(rho: &Density) -> Result<()> {
    let min = rho.field().min();
    if min <= DENSITY_FLOOR {
        return Err(Error::IllConditionedDensity(format!(
            "density floor reached (min {min:.3e})"
        )));
    }
    Ok(())
}

/// `ρ̂ = 1/((∫dx/ρ)·ρ)`.
pub fn hat_density(rho: &Density) -> Result<GridField> {
    check_density(rho)?;
    let c = rho.field().map(|r| 1.0 / r)?.integrate();
    rho.field().map(|r| 1.0 / (c * r))
}

/// `Π_ρ v = v − (∫v dx)·ρ̂`.
pub fn project(rho: &Density, v: &GridField) -> Result<TangentField> {
    let hat = hat_density(rho)?;
    let m = v.integrate();
    Ok(TangentField::new(v.zip_with(&hat, |a, h| a - m * h)?))
}

/// `Δ_μ f = ∂x²f + ∂x(log ρ)·∂xf`.
pub fn witten_laplacian(rho: &Density, f: &GridField) -> Result<GridField> {
    check_density(rho)?;
    let dl = rho.log().differentiate(1)?;
    let d1 = f.differentiate(1)?;
    let d2 = f.differentiate(2)?;
    let prod = dl.zip_with(&d1, |a, b| a * b)?;
    d2.zip_with(&prod, |a, b| a + b)
}

/// `div_μ Z = ∂xZ + ∂x(log ρ)·Z`.
pub fn div_mu(rho: &Density, z: &GridField) -> Result<GridField> {
    check_density(rho)?;
    let dl = rho.log().differentiate(1)?;
    let dz = z.differentiate(1)?;
    let prod = dl.zip_with(z, |a, b| a * b)?;
    dz.zip_with(&prod, |a, b| a + b)
}

/// `∫ a·b·ρ dx`.
pub fn inner_rho(rho: &Density, a: &GridField, b: &GridField) -> Result<f64> {
    Ok(a.zip_with(b, |x, y| x * y)?
        .zip_with(rho.field(), |x, r| x * r)?
        .integrate())
}

/// Centered-difference residual of the projection-derivative formula
/// `d/dt Π_{c_t}Z = −Π_{c_t}(Δ_{c_t}φ_t · Π⊥_{c_t}Z)`, measured in `L²(c_t)`.
pub fn projection_derivative_residual(
    v: &VelocityPotential,
    rho0: &Density,
    z: &GridField,
    t: f64,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && t - h > 0.0 && t + h < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < t-h and t+h < 1, got t={t}, h={h}"
        )));
    }
    let n = rho0.n();
    let density_at = |s: f64| -> Result<Density> {
        push_density(rho0, &flow_to(v, n, s, RESIDUAL_DT)?)
    };
    let proj_plus = project(&density_at(t + h)?, z)?;
    let proj_minus = project(&density_at(t - h)?, z)?;
    let rho_t = density_at(t)?;
    let proj = project(&rho_t, z)?;
    let perp = z.zip_with(proj.field(), |a, b| a - b)?;
    let [phi, ..] = v.fields_at(t, n)?;
    let lap = witten_laplacian_with_translation(&rho_t, &phi, v.translation)?;
    let correction = project(&rho_t, &lap.zip_with(&perp, |a, b| a * b)?)?;
    let resid = proj_plus
        .field()
        .zip_with(proj_minus.field(), |a, b| (a - b) / (2.0 * h))?
        .zip_with(correction.field(), |a, b| a + b)?;
    Ok(inner_rho(&rho_t, &resid, &resid)?.sqrt())
}

/// Witten Laplacian of `c·x + φ` where `φ` is periodic.
fn witten_laplacian_with_translation(rho: &Density, phi: &GridField, c: f64) -> Result<GridField> {
    let lap = witten_laplacian(rho, phi)?;
    let dl = rho.log().differentiate(1)?;
    lap.zip_with(&dl, |a, d| a + c * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn rho_cos(n: usize, eps: f64) -> Density {
        Density::from_fn(n, |x| 1.0 + eps * x.cos()).unwrap()
    }

    fn rho_sin(n: usize, eps: f64) -> Density {
        Density::from_fn(n, |x| 1.0 + eps * x.sin()).unwrap()
    }

    fn field(n: usize, f: impl Fn(f64) -> f64) -> GridField {
        GridField::from_fn(n, f).unwrap()
    }

    #[test]
    fn uniform_is_its_own_hat() {
        let hat = hat_density(&Density::uniform(32).unwrap()).unwrap();
        assert!(hat.values().iter().all(|v| (v - 1.0 / TAU).abs() < 1e-15));
    }

    #[test]
    fn hat_has_unit_mass() {
        let rho = rho_cos(128, 0.5);
        let hat = hat_density(&rho).unwrap();
        assert!((hat.integrate() - 1.0).abs() < 1e-10);
        // ∫dx/ρ = 2π·2π/√(1−ε²) for ρ = (1+ε cos x)/(2π).
        let c = TAU * TAU / (1.0f64 - 0.25).sqrt();
        for (h, r) in hat.values().iter().zip(rho.values()) {
            assert!((h - 1.0 / (c * r)).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_is_scale_invariant() {
        let a = Density::from_fn(64, |x| 1.0 + 0.2 * x.sin()).unwrap();
        let b = Density::from_fn(64, |x| 7.0 * (1.0 + 0.2 * x.sin())).unwrap();
        let (ha, hb) = (hat_density(&a).unwrap(), hat_density(&b).unwrap());
        for (x, y) in ha.values().iter().zip(hb.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_examples() {
        let n = 64;
        let rho = rho_cos(n, 0.5);
        let s = field(n, f64::sin);
        let p = project(&rho, &s).unwrap();
        for (a, b) in p.field().values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        let v = field(n, |x| 1.0 + x.cos());
        let p = project(&Density::uniform(n).unwrap(), &v).unwrap();
        for (j, a) in p.field().values().iter().enumerate() {
            assert!((a - crate::field::node(n, j).cos()).abs() < 1e-12);
        }
        let one = field(n, |_| 1.0);
        let p = project(&rho, &one).unwrap();
        let perp = one.zip_with(p.field(), |a, b| a - b).unwrap();
        for w in [field(n, f64::sin), field(n, |x| (2.0 * x).cos())] {
            assert!(inner_rho(&rho, &perp, &w).unwrap().abs() < 1e-9);
        }
        assert!(p.is_tangent());
    }

    #[test]
    fn witten_laplacian_integration_by_parts() {
        let n = 128;
        let rho = rho_sin(n, 0.3);
        let f = field(n, f64::sin);
        let g = field(n, |x| (2.0 * x).cos());
        let lhs = inner_rho(&rho, &witten_laplacian(&rho, &f).unwrap(), &g).unwrap();
        let rhs = -inner_rho(&rho, &f.differentiate(1).unwrap(), &g.differentiate(1).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-8);
        let uni = Density::uniform(n).unwrap();
        let l = witten_laplacian(&uni, &f).unwrap();
        for (a, b) in l.values().iter().zip(f.values()) {
            assert!((a + b).abs() < 1e-12);
        }
        assert!(witten_laplacian(&rho, &field(n, |_| 2.0)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn divergence_duality() {
        let n = 128;
        let rho = rho_sin(n, 0.3);
        let z = field(n, |x| (2.0 * x).sin());
        let phi = field(n, f64::cos);
        let lhs = inner_rho(&rho, &phi.differentiate(1).unwrap(), &z).unwrap();
        let rhs = -inner_rho(&rho, &phi, &div_mu(&rho, &z).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-8);
        let uni = Density::uniform(n).unwrap();
        assert!(div_mu(&uni, &field(n, |_| 1.0)).unwrap().max_abs() < 1e-14);
        let f = field(n, |x| x.sin() + 0.2 * (3.0 * x).cos());
        let a = div_mu(&rho, &f.differentiate(1).unwrap()).unwrap();
        let b = witten_laplacian(&rho, &f).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_derivative_residual_cases() {
        let n = 128;
        let rho = rho_cos(n, 0.3);
        let z = field(n, |x| 1.0 + x.cos());
        let r0 = projection_derivative_residual(&VelocityPotential::zero(), &rho, &z, 0.5, 1e-2).unwrap();
        assert!(r0 <= 1e-12);
        let uni = Density::uniform(n).unwrap();
        let tangent = field(n, f64::sin);
        let rot = VelocityPotential::rotation(0.3);
        assert!(projection_derivative_residual(&rot, &uni, &tangent, 0.5, 1e-2).unwrap() <= 1e-10);
        let v = VelocityPotential::single(1, 0.0, 1.0);
        let a = projection_derivative_residual(&v, &rho, &z, 0.5, 1e-2).unwrap();
        let b = projection_derivative_residual(&v, &rho, &z, 0.5, 5e-3).unwrap();
        assert!(a / b >= 3.5, "ratio {}", a / b);
        assert!(projection_derivative_residual(&v, &rho, &z, 0.005, 1e-2).is_err());
    }
}

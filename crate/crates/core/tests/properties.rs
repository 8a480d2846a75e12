use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wtransport_core::field::{GridField, Spectrum};
use wtransport_core::flow::{flow_to, push_density, VelocityPotential};
use wtransport_core::random::{random_density, random_field, trig_polynomial};
use wtransport_core::stochastic_flow::sample_driver;
use wtransport_core::tangent::{inner_rho, project};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_diff(a: &GridField, b: &GridField) -> f64 {
    a.zip_with(b, |x, y| x - y).unwrap().max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_an_orthogonal_projection_onto_zero_mean_fields(seed: u64, contrast in 0.0..0.9f64) {
        let mut r = rng(seed);
        let rho = random_density(&mut r, 128, 4, contrast).unwrap();
        let v = random_field(&mut r, 128, 6).unwrap();
        let w = project(&rho, &random_field(&mut r, 128, 6).unwrap()).unwrap();
        let p = project(&rho, &v).unwrap();
        prop_assert!(p.field().integrate().abs() <= 1e-10);
        prop_assert!(max_diff(project(&rho, p.field()).unwrap().field(), p.field()) <= 1e-10);
        let perp = v.zip_with(p.field(), |a, b| a - b).unwrap();
        prop_assert!(inner_rho(&rho, &perp, w.field()).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn integration_is_linear(seed: u64, a in -5.0..5.0f64, b in -5.0..5.0f64) {
        let mut r = rng(seed);
        let f = random_field(&mut r, 64, 8).unwrap();
        let g = random_field(&mut r, 64, 8).unwrap();
        let lhs = f.zip_with(&g, |x, y| a * x + b * y).unwrap().integrate();
        let rhs = a * f.integrate() + b * g.integrate();
        prop_assert!((lhs - rhs).abs() <= 1e-11 * (1.0 + rhs.abs()));
    }

    #[test]
    fn band_limited_fields_survive_a_spectral_round_trip(seed: u64) {
        let mut r = rng(seed);
        let f = random_field(&mut r, 64, 20).unwrap();
        prop_assert!(max_diff(&f.spectrum().sample(64).unwrap(), &f) <= 1e-12);
    }

    #[test]
    fn pushforward_conserves_mass(seed: u64, contrast in 0.0..0.8f64) {
        let mut r = rng(seed);
        let rho0 = random_density(&mut r, 128, 3, contrast).unwrap();
        let spec = trig_polynomial(&mut r, 3, 1.0);
        let scale = VelocityPotential::from_spectrum(&spec).sup_second_derivative(0.0).max(1e-12);
        let v = VelocityPotential::from_spectrum(&scaled(&spec, 1.0 / scale));
        let flow = flow_to(&v, 128, 0.5, 1e-2).unwrap();
        let rho_t = push_density(&rho0, &flow).unwrap();
        prop_assert!(flow.jac.min() > 0.0);
        prop_assert!((rho_t.field().integrate() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn drivers_are_coupled_across_refinement(seed: u64, levels in 1usize..5) {
        let fine = sample_driver(seed, 1e-3, 48 << levels, 3).unwrap();
        let coarse = sample_driver(seed, 1e-3 * (1 << levels) as f64, 48, 3).unwrap();
        let summed = fine.coarsen(1 << levels).unwrap();
        for c in 0..3 {
            for (a, b) in summed.channel(c).iter().zip(coarse.channel(c)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
        let narrow = sample_driver(seed, 1e-3, 48 << levels, 2).unwrap();
        prop_assert_eq!(fine.restrict(2).unwrap(), narrow);
    }
}

fn scaled(s: &Spectrum, c: f64) -> Spectrum {
    let cos = s.cos_coeffs().iter().map(|v| v * c).collect();
    let sin = s.sin_coeffs().iter().map(|v| v * c).collect();
    Spectrum::from_coeffs(cos, sin)
}

//! Property tests across the public API.

use std::f64::consts::PI;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgdm_core::analysis::{dual_norm, DualNormOptions, PiecewiseConstantPath};
use sgdm_core::scheme::initial_state;
use sgdm_core::{BoundingBox, FluxModel, GdKind, GradientDiscretisation, Mesh, Multiplier, NoiseModel, RunSpec, SolverConfig, SpaceTimeGd, Stepper};

fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn mesh_strategy() -> impl Strategy<Value = Mesh> {
    prop_oneof![
        (1usize..12, -2.0f64..0.0, 0.5f64..3.0).prop_map(|(n, a, len)| Mesh::uniform_interval(n, a, a + len).unwrap()),
        (1usize..5, 1usize..5, 0.5f64..2.0, 0.5f64..2.0)
            .prop_map(|(nx, ny, lx, ly)| Mesh::uniform_rectangle(nx, ny, BoundingBox::new([0.0, -1.0], [lx, ly - 1.0])).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cover_and_refinement(mesh in mesh_strategy()) {
        let ext = mesh.bbox().extent();
        let area = if mesh.dim() == 1 { ext[0] } else { ext[0] * ext[1] };
        let mut m = mesh.clone();
        let d0 = mesh.max_diameter();
        for k in 0..3 {
            let total: f64 = (0..m.n_cells()).map(|c| m.cell_measure(c)).sum();
            prop_assert!((total - area).abs() <= 1e-12 * area);
            prop_assert!((m.max_diameter() - d0 / 2f64.powi(k)).abs() <= 1e-12 * d0);
            m = m.refine();
        }
    }

    #[test]
    fn save_load_round_trip(mesh in mesh_strategy()) {
        let back = Mesh::from_text(&mesh.to_text()).unwrap();
        prop_assert_eq!(back, mesh);
    }

    #[test]
    fn gradient_norm_is_a_norm(seed in 0u64..1000, kind in prop_oneof![Just(GdKind::P1Conforming), Just(GdKind::P1MassLumped), Just(GdKind::CrouzeixRaviart)], p in 1.2f64..4.0) {
        let mesh = Mesh::uniform_rectangle(3, 3, BoundingBox::unit_square()).unwrap();
        let gd = GradientDiscretisation::new(&mesh, kind).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..30 {
            let v = random_vector(gd.n_dofs(), &mut rng);
            prop_assert!(gd.grad_lp_norm(&v, p).unwrap() > 0.0);
        }
    }

    #[test]
    fn dual_norm_is_below_l2(seed in 0u64..1000, p in 1.3f64..4.0) {
        let gd = GradientDiscretisation::new(&Mesh::uniform_interval(7, 0.0, 1.0).unwrap(), GdKind::P1Conforming).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_vector(gd.n_dofs(), &mut rng);
        let r = dual_norm(&gd, &w, p, DualNormOptions { restarts: 3, oracle_max_dofs: 0, ..DualNormOptions::default() }).unwrap();
        prop_assert!(r.value <= gd.lp_norm(&w, 2.0).unwrap() * (1.0 + 1e-10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pathwise_energy_inequality(seed in 0u64..1_000_000, p in 1.6f64..4.0, tanh in any::<bool>()) {
        let gd = GradientDiscretisation::new(&Mesh::uniform_interval(8, 0.0, 1.0).unwrap(), GdKind::P1Conforming).unwrap();
        let sgd = SpaceTimeGd::new(gd, 0.1, 8).unwrap();
        let flux = FluxModel::p_laplace(p).unwrap();
        let f0 = if tanh { Multiplier::Tanh } else { Multiplier::Identity };
        let noise = NoiseModel::sine(BoundingBox::new([0.0, 0.0], [1.0, 0.0]), 1, 4, 1.5, f0).unwrap();
        let st = Stepper::new(&sgd, &flux, &noise, SolverConfig::default()).unwrap();
        let traj = st.run_trajectory(&initial_state(&sgd, |x| (PI * x[0]).sin()), RunSpec::new(seed, 0)).unwrap();
        prop_assert!(st.energy_inequality_gap(&traj) <= 1e-8);
    }

    #[test]
    fn short_translates_are_linear_in_the_shift(seed in 0u64..10_000, frac in 0.01f64..1.0) {
        let gd = GradientDiscretisation::new(&Mesh::uniform_interval(6, 0.0, 1.0).unwrap(), GdKind::P1MassLumped).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<DVector<f64>> = (0..6).map(|_| random_vector(gd.n_dofs(), &mut rng)).collect();
        let dt = 0.125;
        let path = PiecewiseConstantPath::from_dof_vectors(&gd, dt, &values).unwrap();
        let rho = frac * dt;
        let jumps: f64 = values.windows(2).map(|w| gd.lp_norm(&(&w[1] - &w[0]), 2.0).unwrap().powi(2)).sum();
        let v = path.continuous_translate(rho).unwrap();
        prop_assert!((v - rho * jumps).abs() <= 1e-12 * (1.0 + v));
    }
}

/// `||Pi v||_{L^4} <= C ||grad v||_{L^2}` with `C` fitted on the coarsest
/// level holds on two refinements with slack 1.5.
#[test]
fn discrete_sobolev_embedding() {
    for (base, kind) in [
        (Mesh::uniform_interval(8, 0.0, 1.0).unwrap(), GdKind::P1Conforming),
        (Mesh::uniform_rectangle(4, 4, BoundingBox::unit_square()).unwrap(), GdKind::P1Conforming),
        (Mesh::uniform_rectangle(4, 4, BoundingBox::unit_square()).unwrap(), GdKind::CrouzeixRaviart),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mesh = base;
        let mut fitted = None;
        for _ in 0..3 {
            let gd = GradientDiscretisation::new(&mesh, kind).unwrap();
            let worst = (0..500)
                .map(|_| {
                    let v = random_vector(gd.n_dofs(), &mut rng);
                    gd.lp_norm(&v, 4.0).unwrap() / gd.grad_lp_norm(&v, 2.0).unwrap()
                })
                .fold(0.0, f64::max);
            let c = *fitted.get_or_insert(worst);
            assert!(worst <= 1.5 * c, "{kind}: {worst} vs {c}");
            mesh = mesh.refine();
        }
    }
}

use chemoflow::driver::{
    advance, cfl_dt, init_state, InitialSpec, ScalarInit, SimParams, VelocityInit,
};
use chemoflow::fluid::{ForcingSpec, Potential};
use chemoflow::operators::{
    div_tol, divergence_faces_to_cells, gradient_cells_to_faces, project_divergence_free,
};
use chemoflow::{make_domain, Domain, PoissonSolverConfig, ScalarField, VectorField};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_velocity(rng: &mut ChaCha8Rng, d: Domain) -> VectorField {
    let comps = (0..d.dim()).map(|a| random(rng, d.face_count(a))).collect();
    VectorField::from_components(d, comps)
}

fn scenario(seed: u64, n: usize, chi: f64, amp: f64, implicit: bool, three: bool) -> SimParams {
    let (domain, g) = if three {
        (
            make_domain(3, &[1.0, 1.0, 1.0], &[n, n, n]).unwrap(),
            vec![0.0, 0.0, 0.3],
        )
    } else {
        (
            make_domain(2, &[1.0, 1.0], &[n, n]).unwrap(),
            vec![0.0, 0.3],
        )
    };
    let mut p = SimParams {
        domain,
        seed,
        initial: InitialSpec {
            n: ScalarInit::Noise {
                base: 1.0,
                amplitude: amp,
            },
            c: ScalarInit::Noise {
                base: 1.0,
                amplitude: 0.5,
            },
            u: VelocityInit::Noise { amplitude: 0.2 },
        },
        forcing: ForcingSpec {
            phi: Potential::Linear { g },
            ..Default::default()
        },
        ..Default::default()
    };
    p.reaction.chi = chi;
    p.flags.implicit_diffusion = implicit;
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn steps_keep_the_discrete_invariants(
        seed in any::<u64>(),
        n in 6usize..14,
        chi in 0.0f64..3.0,
        amp in 0.0f64..0.99,
        implicit in any::<bool>(),
        three in proptest::bool::weighted(0.25),
    ) {
        let p = scenario(seed, if three { n / 2 + 2 } else { n }, chi, amp, implicit, three);
        let mut s = init_state(&p).unwrap();
        let pos_tol = p.reaction.resolved_pos_tol(&s.n);
        let sup_c0 = s.c.max_abs();
        for _ in 0..5 {
            let dt = 0.5 * cfl_dt(&s, &p);
            let rep = advance(&s, &p, dt, pos_tol).unwrap();
            prop_assert!(rep.violations.is_empty(), "{:?}", rep.violations);
            let next = rep.state;
            prop_assert!(next.n.min() >= -pos_tol);
            prop_assert!(next.c.min() >= 0.0);
            prop_assert!(next.c.max_abs() <= s.c.max_abs() * (1.0 + 1e-12));
            prop_assert!(rep.mass_residual <= 1e-10 * s.n.integral());
            prop_assert!(divergence_faces_to_cells(&next.u).max_abs() <= div_tol(&next.u).max(1e-14));
            prop_assert!(next.u.no_slip_exact());
            s = next;
        }
        prop_assert!(s.c.max_abs() <= sup_c0);
    }

    #[test]
    fn gradient_and_divergence_are_adjoint(seed in any::<u64>(), nx in 4usize..12, ny in 4usize..12) {
        let d = make_domain(2, &[1.0, 0.7], &[nx, ny]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = ScalarField::from_values(d, random(&mut rng, d.cell_count()));
        let mut u = random_velocity(&mut rng, d);
        u.enforce_no_slip();
        let lhs = gradient_cells_to_faces(&f).dot(&u);
        let div = divergence_faces_to_cells(&u);
        let rhs: f64 = -f.values().iter().zip(div.values()).map(|(a, b)| a * b).sum::<f64>() * d.cell_volume();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn projection_is_idempotent_and_nonexpansive(seed in any::<u64>(), n in 4usize..20) {
        let d = make_domain(2, &[1.0, 1.0], &[n, n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = random_velocity(&mut rng, d);
        u.enforce_no_slip();
        let cfg = PoissonSolverConfig::default();
        let pu = project_divergence_free(&u, &cfg).unwrap();
        let ppu = project_divergence_free(&pu, &cfg).unwrap();
        prop_assert!(pu.l2_distance(&ppu) <= 1e-9 * pu.l2_norm().max(1e-300));
        prop_assert!(pu.l2_norm() <= u.l2_norm() * (1.0 + 1e-9));
    }
}

#[test]
fn semi_trivial_state_is_a_fixed_point() {
    let mut p = scenario(1, 12, 1.0, 0.0, false, false);
    p.initial = InitialSpec {
        n: ScalarInit::Constant { value: 1.0 },
        c: ScalarInit::Constant { value: 1e-300 },
        u: VelocityInit::Zero,
    };
    let s = init_state(&p).unwrap();
    let mut cur = s.clone();
    for _ in 0..20 {
        cur = advance(&cur, &p, 1e-2, 1e-12).unwrap().state;
    }
    for v in cur.n.values() {
        assert!((v - 1.0).abs() <= 1e-10, "{v}");
    }
    assert!(cur.u.max_abs() <= 1e-10);
}

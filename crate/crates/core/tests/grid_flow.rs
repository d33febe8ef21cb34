use std::f64::consts::TAU;

use g2flow::curvature::curvature_symmetry_residual;
use g2flow::evolution::{stability_ratio, verify_evolution, EvolutionCheck, VerifyTolerances};
use g2flow::flow::{self, FlowState, StepPolicy};
use g2flow::grid::{Field, GridError, GridSpec};
use g2flow::initial::{flat, perturbed, Perturbation};
use g2flow::snapshot::{self, SnapshotError};
use g2flow::torsion::structure_residuals;

fn perturbed_state(n: usize, eps: f64) -> FlowState<f64> {
    let grid = GridSpec::with_active(&[0, 1], n).unwrap();
    FlowState::new(
        0.0,
        0,
        perturbed(
            &grid,
            &Perturbation {
                epsilon: eps,
                ..Default::default()
            },
        ),
    )
}

#[test]
fn grid_rejects_short_axes_and_bad_periods() {
    let mut shape = [1usize; 7];
    shape[2] = 3;
    assert_eq!(
        GridSpec::<f64>::new(shape, [TAU; 7]).unwrap_err(),
        GridError::TooFewPoints { axis: 2, n: 3 }
    );
    shape[2] = 0;
    assert!(matches!(
        GridSpec::<f64>::new(shape, [TAU; 7]),
        Err(GridError::EmptyAxis { axis: 2 })
    ));
    let mut per = [TAU; 7];
    per[4] = -1.0;
    assert!(matches!(
        GridSpec::<f64>::new([1; 7], per),
        Err(GridError::BadPeriod { axis: 4 })
    ));
}

#[test]
fn field_length_is_checked() {
    let g = GridSpec::<f64>::with_active(&[0], 8).unwrap();
    assert_eq!(
        Field::from_vec(&g, 2, vec![0.0; 15]).unwrap_err(),
        GridError::Length {
            expected: 16,
            got: 15
        }
    );
}

#[test]
fn central_difference_is_fourth_order() {
    let err = |n: usize| {
        let g = GridSpec::<f64>::with_active(&[3], n).unwrap();
        let f = Field::from_fn(&g, 1, |p, o| o[0] = g.coords(p)[3].sin());
        let d = f.partial(3);
        let exact = Field::from_fn(&g, 1, |p, o| o[0] = g.coords(p)[3].cos());
        d.max_abs_diff(&exact)
    };
    let order = (err(16) / err(32)).log2();
    assert!(order > 3.9 && order < 4.1, "order {order}");
    // inactive axes differentiate to zero
    let g = GridSpec::<f64>::with_active(&[3], 8).unwrap();
    let f = Field::from_fn(&g, 1, |p, o| o[0] = p as f64);
    assert_eq!(f.partial(0).max_abs(), 0.0);
}

#[test]
fn exterior_derivative_squares_to_zero() {
    let s = perturbed_state(12, 0.1);
    let p = flow::potential(s.structure().unwrap());
    assert!(p.exterior_derivative().exterior_derivative().max_abs() < 1e-13);
}

#[test]
fn flat_state_does_not_move() {
    let grid = GridSpec::with_active(&[0, 1], 8).unwrap();
    let s0 = FlowState::new(0.0, 0, flat(&grid));
    let mut s = s0.clone();
    for _ in 0..5 {
        s = flow::step(&s, &StepPolicy::default()).unwrap().0;
    }
    assert_eq!(s.step_index(), 5);
    assert!(s.t() > 0.0);
    assert!(s.phi().max_abs_diff(s0.phi()) <= 1e-12);
    let b = s.curvature().unwrap();
    assert!(b.rm.max_abs() <= 1e-12 && s.torsion().unwrap().t.max_abs() <= 1e-12);
}

#[test]
fn perturbed_flow_stays_closed_in_class_and_grows_volume() {
    let mut s = perturbed_state(12, 0.05);
    let p0 = flow::period_integrals(s.phi());
    let mut vol = s.structure().unwrap().hitchin_volume();
    for _ in 0..4 {
        s = flow::step(&s, &StepPolicy::default()).unwrap().0;
        assert!(s.closedness() <= 1e-12);
        assert!(flow::period_drift(&p0, &flow::period_integrals(s.phi())) <= 1e-10);
        let v = s.structure().unwrap().hitchin_volume();
        assert!(v >= vol * (1.0 - 1e-12), "{v} < {vol}");
        vol = v;
    }
}

#[test]
fn curvature_symmetries_and_scalar_sign() {
    let s = perturbed_state(16, 0.05);
    let b = s.curvature().unwrap();
    let rm = b.rm.max_abs();
    assert!(rm > 1e-3);
    // antisymmetry in the first pair is exact, the rest holds to truncation
    assert!(curvature_symmetry_residual(&b.rm) < 0.05 * rm);
    // R = −|T|² ≤ 0 up to discretisation error
    assert!(b.scalar.max() < 1e-3 * b.scalar.max_abs());
}

#[test]
fn structure_identities_converge_at_fourth_order() {
    let res = |n: usize| {
        let s = perturbed_state(n, 0.05);
        let st = s.structure().unwrap();
        structure_residuals(
            &st.phi,
            &st.psi,
            &st.metric,
            s.torsion().unwrap(),
            s.curvature().unwrap(),
        )
    };
    let (a, b) = (res(12), res(24));
    for ((name, x), (_, y)) in a.named().into_iter().zip(b.named()) {
        if x > 1e-12 {
            let order = (x / y).log2();
            assert!(order > 3.3, "{name}: {x:e} -> {y:e}, order {order}");
        }
    }
}

#[test]
fn step_halves_on_positivity_loss_and_stalls_at_floor() {
    let s = perturbed_state(8, 0.05);
    let policy = StepPolicy {
        max_dt: 1e3,
        safety: 1e6,
        dt_floor: 1e-300,
        fixed_dt: None,
    };
    let (_, info) = flow::step(&s, &policy).unwrap();
    assert!(info.rejections > 0);
    let stall = StepPolicy {
        dt_floor: 10.0,
        ..policy
    };
    assert!(matches!(
        flow::step(&s, &stall),
        Err(flow::FlowError::Stalled { .. })
    ));
}

#[test]
fn set_phi_invalidates_caches() {
    let mut s = perturbed_state(8, 0.05);
    let before = s.curvature().unwrap().scalar.min();
    let old = s.stamp();
    s.set_phi(perturbed_state(8, 0.1).phi().clone());
    assert_ne!(s.stamp(), old);
    assert!(s.caches_consistent());
    assert_ne!(s.curvature().unwrap().scalar.min(), before);
}

#[test]
fn snapshot_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.g2snap");
    let s = flow::step(&perturbed_state(8, 0.05), &StepPolicy::default())
        .unwrap()
        .0;
    snapshot::save(&s, &path).unwrap();
    let back: FlowState<f64> = snapshot::load(&path).unwrap();
    assert_eq!(back.t(), s.t());
    assert_eq!(back.step_index(), 1);
    assert_eq!(back.phi().max_abs_diff(s.phi()), 0.0);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[200] ^= 1;
    assert!(matches!(
        snapshot::decode::<f64>(&bytes),
        Err(SnapshotError::Checksum)
    ));
    bytes[0] = b'X';
    assert!(matches!(
        snapshot::decode::<f64>(&bytes),
        Err(SnapshotError::BadMagic)
    ));
    let other = GridSpec::with_active(&[0, 2], 8).unwrap();
    assert!(snapshot::check_grid(&back, &other).is_err());
}

#[test]
fn evolution_identities_hold_on_a_coarse_grid() {
    let s = perturbed_state(16, 0.05);
    let dt = flow::suggested_dt(&s, &StepPolicy::default()).unwrap();
    let gammas = [2.0];
    let checks = [
        EvolutionCheck::ScalarEvolution,
        EvolutionCheck::RicciEvolution,
        EvolutionCheck::PinchingEvolution { gamma: 2.0 },
    ];
    let rep =
        verify_evolution(&s, dt, &checks, 1.0, &gammas, &VerifyTolerances::default()).unwrap();
    for c in &rep.checks {
        assert!(c.passed, "{c:?}");
        let o = c.measured_time_order.unwrap();
        assert!((o - 2.0).abs() < 0.2, "{}: order {o}", c.name);
    }
}

#[test]
fn evolution_check_names_parse_back() {
    let g = [1.5, 3.0];
    for c in EvolutionCheck::all(&g) {
        assert_eq!(EvolutionCheck::parse(&c.name(), &g), Some(vec![c]));
    }
    assert_eq!(
        EvolutionCheck::parse("pinching_evolution", &g)
            .unwrap()
            .len(),
        2
    );
    assert_eq!(EvolutionCheck::parse("nonsense", &g), None);
}

#[test]
fn stability_ratio_cases() {
    assert_eq!(stability_ratio(&[]), 1.0);
    assert_eq!(stability_ratio(&[0.0, 0.0]), 1.0);
    assert_eq!(stability_ratio(&[1.0, 2.0, 4.0]), 2.0);
    assert_eq!(stability_ratio(&[0.0, 0.0, 1.0]), f64::INFINITY);
}

#[test]
fn single_precision_pipeline_runs() {
    let grid = GridSpec::<f32>::with_active(&[0, 1], 8).unwrap();
    let s = FlowState::new(0.0f32, 0, perturbed(&grid, &Perturbation::default()));
    let (next, _) = flow::step(&s, &StepPolicy::default()).unwrap();
    assert!(next.closedness() < 1e-4);
    assert!(next.curvature().unwrap().scalar.max() < 1e-3);
}

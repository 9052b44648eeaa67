//! Randomized structural invariants: quadrature identities, box and
//! projection geometry, Hamiltonian affinity in the costate, and exactness of
//! the discrete stage gradients.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use teamopt::{
    discrete_control_gradients, discrete_cost, discrete_forward, eval_hamiltonian, project,
    weighted_inner, weighted_norm, BoxSet, DiscreteTeamProblem, InfoSpec, InfoSubspace,
    StrategyProfile, TeamProblem, TimeGrid, Trajectory,
};

fn dvec(values: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(values)
}

/// Componentwise bound entry: finite or open on either side.
fn bound_entry() -> impl Strategy<Value = (f64, f64)> {
    prop_oneof![
        (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(a, b)| (a.min(b), a.max(b))),
        (-3.0f64..3.0).prop_map(|a| (f64::NEG_INFINITY, a)),
        (-3.0f64..3.0).prop_map(|a| (a, f64::INFINITY)),
        Just((f64::NEG_INFINITY, f64::INFINITY)),
    ]
}

/// Two-state single-control test problem with a smooth nonlinear drift; the
/// derivative callbacks are left to the finite-difference fallback.
fn smooth_fixture() -> TeamProblem {
    TeamProblem::builder(2, 1.0, dvec(&[1.0, -0.5]))
        .dynamics(|t, x, u| {
            dvec(&[
                -0.5 * x[0] + 0.3 * x[1].sin() + u[0],
                0.2 * x[0].cos() - 0.4 * x[1] + 0.5 * u[0] * t,
            ])
        })
        .running_cost(|_t, x, u| 0.5 * u[0] * u[0] + 0.3 * x[0] * x[0] + 0.1 * x[1].sin())
        .terminal_cost(|x| 0.5 * x.norm_squared())
        .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
        .build()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trapezoid_weights_sum_to_horizon(horizon in 0.1f64..5.0, steps in 1usize..400) {
        let grid = TimeGrid::new(horizon, steps).unwrap();
        let total: f64 = grid.trapezoid_weights().iter().sum();
        prop_assert!((total - horizon).abs() <= 1e-12 * (1.0 + horizon));
    }

    #[test]
    fn trapezoid_integrates_affine_samples_exactly(
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        horizon in 0.1f64..3.0,
        steps in 1usize..200,
    ) {
        let grid = TimeGrid::new(horizon, steps).unwrap();
        let samples: Vec<f64> = grid.nodes().iter().map(|&t| a * t + b).collect();
        let exact = 0.5 * a * horizon * horizon + b * horizon;
        prop_assert!((grid.trapezoid(&samples).unwrap() - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
    }

    #[test]
    fn grid_nodes_are_increasing_and_span_the_horizon(horizon in 0.1f64..5.0, steps in 1usize..300) {
        let grid = TimeGrid::new(horizon, steps).unwrap();
        let nodes = grid.nodes();
        prop_assert_eq!(nodes.len(), steps + 1);
        prop_assert_eq!(nodes[0], 0.0);
        prop_assert!((nodes[steps] - horizon).abs() <= 1e-12 * horizon);
        for k in 0..steps {
            prop_assert!(nodes[k + 1] > nodes[k]);
        }
    }

    #[test]
    fn box_clip_lands_inside_and_is_idempotent(
        bounds in prop::collection::vec(bound_entry(), 1..5),
        point in prop::collection::vec(-10.0f64..10.0, 1..5),
    ) {
        let dim = bounds.len().min(point.len());
        let lower = DVector::from_iterator(dim, bounds[..dim].iter().map(|b| b.0));
        let upper = DVector::from_iterator(dim, bounds[..dim].iter().map(|b| b.1));
        let action = BoxSet::new(lower.clone(), upper.clone()).unwrap();
        let v = dvec(&point[..dim]);
        let clipped = action.clip(&v);
        for c in 0..dim {
            prop_assert!(clipped[c] >= lower[c] && clipped[c] <= upper[c]);
        }
        prop_assert!(action.contains(&clipped, 0.0));
        prop_assert_eq!(action.clip(&clipped), clipped);
    }

    #[test]
    fn free_box_clip_is_identity(point in prop::collection::vec(-50.0f64..50.0, 1..6)) {
        let v = dvec(&point);
        prop_assert_eq!(BoxSet::free(point.len()).clip(&v), v);
    }

    #[test]
    fn interpolation_clamps_and_stays_within_node_bounds(
        values in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 2..30),
        query in -0.5f64..1.5,
    ) {
        let grid = TimeGrid::new(1.0, values.len() - 1).unwrap();
        let traj = Trajectory::new(
            grid.nodes(),
            values.iter().map(|v| dvec(v)).collect(),
        ).unwrap();
        let v = traj.at(query);
        if query <= 0.0 {
            prop_assert_eq!(&v, traj.first());
        } else if query >= 1.0 {
            prop_assert_eq!(&v, traj.last());
        } else {
            for c in 0..traj.dim() {
                let lo = values.iter().map(|w| w[c]).fold(f64::INFINITY, f64::min);
                let hi = values.iter().map(|w| w[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(v[c] >= lo - 1e-12 && v[c] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn profile_construction_clips_into_action_boxes(
        bounds in prop::collection::vec(bound_entry(), 2),
        raw in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 4),
    ) {
        let grid = TimeGrid::new(1.0, raw.len() - 1).unwrap();
        let mut builder = TeamProblem::builder(1, 1.0, dvec(&[0.0]))
            .dynamics(|_t, _x, u| dvec(&[u[0] + u[1]]));
        for b in &bounds {
            builder = builder.decision_maker(
                1,
                BoxSet::new(dvec(&[b.0]), dvec(&[b.1])).unwrap(),
                InfoSpec::OpenLoop,
            );
        }
        let p = builder.build().unwrap();
        let per_dm: Vec<Vec<DVector<f64>>> = (0..2)
            .map(|i| raw.iter().map(|nodes| dvec(&[nodes[i]])).collect())
            .collect();
        let profile = StrategyProfile::from_node_values(&p, &grid, per_dm).unwrap();
        for i in 0..2 {
            for value in profile.realized(i) {
                prop_assert!(p.action_set(i).contains(value, 0.0));
            }
        }
    }

    #[test]
    fn hamiltonian_is_affine_in_the_costate(
        x in prop::collection::vec(-3.0f64..3.0, 2),
        u in -3.0f64..3.0,
        pa in prop::collection::vec(-3.0f64..3.0, 2),
        pb in prop::collection::vec(-3.0f64..3.0, 2),
        t in 0.0f64..1.0,
    ) {
        let p = smooth_fixture();
        let (x, u) = (dvec(&x), dvec(&[u]));
        let value_at = |psi: &DVector<f64>| {
            eval_hamiltonian(&p, t, &x, psi, &u).unwrap().value
        };
        let (pa, pb) = (dvec(&pa), dvec(&pb));
        let combined = value_at(&(&pa + &pb));
        let split = value_at(&pa) + value_at(&pb) - value_at(&DVector::zeros(2));
        prop_assert!((combined - split).abs() <= 1e-9 * (1.0 + combined.abs()));
    }

    #[test]
    fn projection_is_idempotent_selfadjoint_and_nonexpansive(
        steps in 4usize..24,
        m in 1usize..4,
        mix in prop::collection::vec(-2.0f64..2.0, 18),
        ya in prop::collection::vec(-3.0f64..3.0, 24),
        yb in prop::collection::vec(-3.0f64..3.0, 24),
    ) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let weights = grid.trapezoid_weights();
        // Smooth, bounded features: random mixes of low-order polynomials.
        let features = DMatrix::from_fn(grid.len(), m, |k, j| {
            let t = grid.node(k);
            mix[3 * j] + mix[3 * j + 1] * t + mix[3 * j + 2] * t * t
        });
        let sub = match InfoSubspace::from_feature_matrix(features, weights.clone()) {
            Ok(sub) => sub,
            Err(_) => return Ok(()), // features vanish on the grid; nothing to test
        };
        // The ridged projector is idempotent only up to ridge / min_ev;
        // fold that documented defect into the tolerance instead of
        // discarding ill-conditioned spans.
        let mut ridge_defect = 0.0_f64;
        if let Some(span) = sub.span() {
            let eigen = span.gram().clone().symmetric_eigenvalues();
            let max_ev = eigen.iter().cloned().fold(0.0_f64, f64::max);
            let min_ev = eigen.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(min_ev >= 1e-6 * max_ev && max_ev > 1e-8);
            ridge_defect = span.ridge() / min_ev;
        }

        let path = |vals: &[f64]| {
            Trajectory::new(
                grid.nodes(),
                (0..grid.len()).map(|k| dvec(&[vals[k % vals.len()]])).collect(),
            ).unwrap()
        };
        let (a, b) = (path(&ya), path(&yb));
        let pa = project(&sub, &a).unwrap();
        let pb = project(&sub, &b).unwrap();
        let ppa = project(&sub, &pa).unwrap();

        let na = weighted_norm(&weights, a.values());
        let nb = weighted_norm(&weights, b.values());
        let diff: Vec<DVector<f64>> = ppa
            .values()
            .iter()
            .zip(pa.values())
            .map(|(l, r)| l - r)
            .collect();
        prop_assert!(weighted_norm(&weights, &diff) <= (1e-9 + 4.0 * ridge_defect) * (1.0 + na));
        prop_assert!(weighted_norm(&weights, pa.values()) <= na + 1e-9);
        let symmetry = weighted_inner(&weights, pa.values(), b.values())
            - weighted_inner(&weights, a.values(), pb.values());
        prop_assert!(symmetry.abs() <= 1e-9 * (1.0 + na * nb));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn discrete_gradients_match_finite_differences(
        steps in 2usize..6,
        gain in -1.0f64..1.0,
        coupling in -0.5f64..0.5,
        controls in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let p = DiscreteTeamProblem::builder(2, steps, dvec(&[1.0, -0.5]))
            .transition(move |_k, x, u| {
                dvec(&[
                    x[0] + 0.2 * (coupling * x[1]).sin() + 0.3 * u[0],
                    x[1] + 0.2 * gain * x[0] + 0.4 * u[1],
                ])
            })
            .running_cost(|_k, x, u| 0.5 * u.norm_squared() + 0.25 * x.norm_squared())
            .terminal_cost(|x| 0.5 * x.norm_squared())
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
            .build()
            .unwrap();
        let u: Vec<DVector<f64>> = (0..steps)
            .map(|k| dvec(&[controls[2 * k % 12], controls[(2 * k + 1) % 12]]))
            .collect();

        let xs = discrete_forward(&p, &u).unwrap();
        let psi = teamopt::discrete_adjoint(&p, &u, &xs).unwrap();
        let grads = discrete_control_gradients(&p, &u, &xs, &psi).unwrap();

        let cost_of = |u: &[DVector<f64>]| {
            let xs = discrete_forward(&p, u).unwrap();
            discrete_cost(&p, u, &xs).unwrap()
        };
        let eps = 1e-5;
        for k in 0..steps {
            for c in 0..2 {
                let mut up = u.clone();
                up[k][c] += eps;
                let mut um = u.clone();
                um[k][c] -= eps;
                let fd = (cost_of(&up) - cost_of(&um)) / (2.0 * eps);
                prop_assert!((grads[k][c] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}

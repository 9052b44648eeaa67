//! Grid sweeps for the per-iteration building blocks: forward integration,
//! adjoint integration, and span projection.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use teamopt::{
    integrate_adjoint, integrate_forward, project, BoxSet, InfoSpec, InfoSubspace, TeamProblem,
    TimeGrid, Trajectory,
};

const GRID_STEPS: [usize; 2] = [200, 800];

/// Two-state nonlinear fixture with analytic jacobians, two scalar inputs.
fn fixture() -> TeamProblem {
    let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.8]);
    let jb = b.clone();
    TeamProblem::builder(2, 1.0, DVector::from_vec(vec![0.6, -0.4]))
        .dynamics(move |t, x, u| {
            DVector::from_vec(vec![
                -0.5 * x[0] + 0.3 * x[1].sin() + (2.0 * t).sin(),
                -0.7 * x[1] + 0.2 * x[0].sin(),
            ]) + &b * u
        })
        .dynamics_jacobians(
            |_t, x, _u| {
                DMatrix::from_row_slice(2, 2, &[-0.5, 0.3 * x[1].cos(), 0.2 * x[0].cos(), -0.7])
            },
            move |_t, _x, _u| jb.clone(),
        )
        .running_cost(|_t, x, u| 0.5 * u.norm_squared() + 0.25 * x.norm_squared())
        .running_cost_gradients(|_t, x, _u| x * 0.5, |_t, _x, u| u.clone())
        .terminal_cost(|x| 0.5 * x.norm_squared())
        .terminal_cost_gradient(|x| x.clone())
        .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
        .decision_maker(1, BoxSet::free(1), InfoSpec::OpenLoop)
        .build()
        .expect("fixture builds")
}

fn control_path(grid: &TimeGrid) -> Trajectory {
    let values = grid
        .nodes()
        .iter()
        .map(|&t| DVector::from_vec(vec![(3.0 * t).sin(), (2.0 * t).cos()]))
        .collect();
    Trajectory::new(grid.nodes(), values).expect("control path")
}

fn bench_forward(c: &mut Criterion) {
    let p = fixture();
    let mut group = c.benchmark_group("integrate_forward");
    for steps in GRID_STEPS {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let u = control_path(&grid);
        group.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, _| {
            b.iter(|| integrate_forward(black_box(&p), black_box(&u), &grid).unwrap())
        });
    }
    group.finish();
}

fn bench_adjoint(c: &mut Criterion) {
    let p = fixture();
    let mut group = c.benchmark_group("integrate_adjoint");
    for steps in GRID_STEPS {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let u = control_path(&grid);
        let x = integrate_forward(&p, &u, &grid).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, _| {
            b.iter(|| integrate_adjoint(black_box(&p), &u, black_box(&x), &grid).unwrap())
        });
    }
    group.finish();
}

fn bench_projection(c: &mut Criterion) {
    let mut group = c.benchmark_group("span_projection");
    let m = 8;
    for steps in GRID_STEPS {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let times = grid.nodes();
        let features = DMatrix::from_fn(times.len(), m, |k, j| {
            (std::f64::consts::TAU * (j + 1) as f64 * times[k]).sin()
        });
        let subspace =
            InfoSubspace::from_feature_matrix(features, grid.trapezoid_weights()).unwrap();
        let values = times
            .iter()
            .map(|&t| DVector::from_vec(vec![(5.0 * t).cos()]))
            .collect();
        let traj = Trajectory::new(times.clone(), values).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(steps), &steps, |b, _| {
            b.iter(|| project(black_box(&subspace), black_box(&traj)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward, bench_adjoint, bench_projection);
criterion_main!(benches);

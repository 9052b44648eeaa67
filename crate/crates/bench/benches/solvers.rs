//! Whole-solve benchmarks on the builtin instances.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DVector;
use teamopt::{
    discrete_solve_team, find_builtin, solve_decentralized_lq, solve_team, BuiltinKind,
    InfoSubspace, SolveOptions, StrategyProfile, TimeGrid,
};

fn options() -> SolveOptions {
    SolveOptions {
        certificate_samples: 0,
        ..SolveOptions::default()
    }
}

fn bench_team_p1(c: &mut Criterion) {
    let BuiltinKind::Team(make) = find_builtin("p1").unwrap().kind else {
        panic!("p1 is a team builtin");
    };
    let p = make();
    let grid = TimeGrid::new(p.horizon(), 200).unwrap();
    let opts = options();
    let mut group = c.benchmark_group("solve_team");
    group.sample_size(20);
    group.bench_function("p1", |b| {
        b.iter(|| {
            let init = StrategyProfile::zeros(&p, &grid);
            solve_team(black_box(&p), init, &grid, &opts).unwrap()
        })
    });
    group.finish();
}

fn bench_lq_fixed_point(c: &mut Criterion) {
    let BuiltinKind::Lq(make) = find_builtin("decoupled-pair").unwrap().kind else {
        panic!("decoupled-pair is an lq builtin");
    };
    let lq = make();
    let grid = TimeGrid::new(lq.horizon(), 200).unwrap();
    let subspaces = vec![InfoSubspace::full(grid.len()); lq.num_dms()];
    let opts = options();
    let mut group = c.benchmark_group("lq_fixed_point");
    group.sample_size(20);
    group.bench_function("decoupled-pair", |b| {
        b.iter(|| solve_decentralized_lq(black_box(&lq), &subspaces, &grid, &opts).unwrap())
    });
    group.finish();
}

fn bench_discrete(c: &mut Criterion) {
    let BuiltinKind::DiscreteTeam(make) = find_builtin("p1d").unwrap().kind else {
        panic!("p1d is a discrete builtin");
    };
    let p = make();
    let opts = options();
    let mut group = c.benchmark_group("discrete_solve");
    group.sample_size(10);
    group.bench_function("p1d", |b| {
        b.iter(|| {
            let init = vec![DVector::zeros(p.control_dim()); p.steps()];
            discrete_solve_team(black_box(&p), init, &opts).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_team_p1, bench_lq_fixed_point, bench_discrete);
criterion_main!(benches);

use std::hint::black_box;

use acvar_core::dp::lqr_control_span;
use acvar_core::lp::scalar_moment_polytope;
use acvar_core::{
    acvar_recursion, critical_gamma, leqr_recursion, lqr_recursion, robust_value_iteration, simulate, solve_max,
    synthesize_acvar_control, DisturbanceSpec, FiniteDisturbance, Grid2, LqProblem, Mat, Policy, SeedSchedule,
    Vector,
};
use criterion::{criterion_group, criterion_main, Criterion};

/// A lightly damped chain of `n` coupled integrators with `n/2` inputs.
fn chain(n: usize, horizon: usize) -> LqProblem {
    let m = (n / 2).max(1);
    let a = Mat::from_fn(n, n, |i, j| match (i as i64 - j as i64).abs() {
        0 => 0.98,
        1 => 0.05,
        _ => 0.0,
    });
    let b = Mat::from_fn(n, m, |i, j| if i == 2 * j { 1.0 } else { 0.0 });
    let i = Mat::identity(n, n);
    LqProblem::new(a, b, &i * 0.1, Mat::identity(m, m), i.clone(), &i * 0.5, horizon).expect("valid chain")
}

fn recursions(c: &mut Criterion) {
    let mut g = c.benchmark_group("recursion");
    for n in [1, 4, 16] {
        let p = chain(n, 50);
        let l = Mat::identity(n, n) * 10.0;
        g.bench_function(format!("acvar_n{n}_N50"), |b| b.iter(|| acvar_recursion(black_box(&p), &l).unwrap()));
        g.bench_function(format!("lqr_n{n}_N50"), |b| b.iter(|| lqr_recursion(black_box(&p)).unwrap()));
        g.bench_function(format!("leqr_n{n}_N50"), |b| b.iter(|| leqr_recursion(black_box(&p), 0.05).unwrap()));
    }
    let fig = LqProblem::benchmark_scalar();
    g.bench_function("critical_gamma_scalar", |b| b.iter(|| critical_gamma(black_box(&fig), 1e-10).unwrap()));
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let p = chain(4, 10);
    let schedule = acvar_recursion(&p, &(Mat::identity(4, 4) * 5.0)).unwrap();
    let x = Vector::from_column_slice(&[1.0, -0.5, 0.25, 2.0]);
    let s = (x.transpose() * &schedule.p[0] * &x)[(0, 0)];
    c.bench_function("synthesize_n4", |b| b.iter(|| synthesize_acvar_control(black_box(&x), s, 0, &schedule, &p).unwrap()));
}

fn lp(c: &mut Criterion) {
    let mut lp = scalar_moment_polytope(&[-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0], 1.0);
    lp.c = vec![4.0, 1.0, 0.0, 2.0, 0.5, 3.0, 1.0, 0.0, 5.0];
    c.bench_function("moment_lp_k9", |b| b.iter(|| solve_max(black_box(&lp)).unwrap()));
}

fn monte_carlo(c: &mut Criterion) {
    let p = LqProblem::benchmark_scalar();
    let policy = Policy::LinearFeedback { gains: lqr_recursion(&p).unwrap().k };
    let dist = DisturbanceSpec::gaussian_scalar(1.0);
    let x0 = Vector::from_element(1, 1.0);
    let seeds = SeedSchedule::new(1);
    c.bench_function("simulate_lqr_10k", |b| {
        b.iter(|| simulate(&p, &policy, &dist, &x0, 0.0, 10_000, &seeds, &[0.05]).unwrap())
    });
}

fn dynamic_programming(c: &mut Criterion) {
    let p = LqProblem::benchmark_scalar();
    let gains: Vec<f64> = lqr_recursion(&p).unwrap().k.iter().map(|k| k[(0, 0)]).collect();
    let span = lqr_control_span(&gains, 6.0);
    let grids = Grid2::uniform((-6.0, 6.0), 41, (-5.0, 40.0), 41, (-span, span), 31).unwrap();
    let dist = FiniteDisturbance::new(vec![-2.0, -1.0, 0.0, 1.0, 2.0], 1.0).unwrap();
    let mut g = c.benchmark_group("dp");
    g.sample_size(10);
    g.bench_function("robust_41x41x31", |b| b.iter(|| robust_value_iteration(&p, &dist, black_box(&grids)).unwrap()));
    g.finish();
}

criterion_group!(benches, recursions, synthesis, lp, monte_carlo, dynamic_programming);
criterion_main!(benches);

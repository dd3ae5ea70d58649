//! Benchmarks along the closed-loop hot path: kinematics primitives, the
//! network forward pass, constraint refinement, and the full per-step
//! pipeline the latency budget applies to.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kincast_core::losses::BaseState;
use kincast_core::model::{reference_model, Configuration, SystemVelocity};
use kincast_core::network::{forward, init_params, NetworkDescriptor};
use kincast_core::runtime::{
    refine_first_step, step, JointStateBuffer, RefinementProblem, StepOptions,
};
use kincast_core::training::{buffer_snapshot, input_window};
use kincast_core::{
    differential_kinematics, forward_kinematics, generate_motion, link_jacobian, simulate_imus,
    AccelConvention, MotionKind, NoiseParams, RecordedSequence,
};

fn walk_sequence() -> RecordedSequence {
    let model = reference_model();
    let mut seq = generate_motion(&model, MotionKind::ForwardWalk, 4.0, 60.0, 17).unwrap();
    simulate_imus(&model, &mut seq, NoiseParams::default(), AccelConvention::Proper, 17).unwrap();
    seq
}

fn bench_kinematics(c: &mut Criterion) {
    let model = reference_model();
    let seq = walk_sequence();
    let q = seq.step(30).configuration.clone();
    let fk = forward_kinematics(&model, &q);

    c.bench_function("forward_kinematics_20dof", |b| {
        b.iter(|| forward_kinematics(&model, std::hint::black_box(&q)))
    });
    c.bench_function("link_jacobians_all_links", |b| {
        b.iter(|| {
            for link in 0..model.links().len() {
                std::hint::black_box(link_jacobian(&model, &fk, link));
            }
        })
    });
}

fn bench_network_forward(c: &mut Criterion) {
    let model = reference_model();
    let d = NetworkDescriptor::for_model(&model);
    let params = init_params(&d, 1).unwrap();
    let seq = walk_sequence();
    let anchor = d.input_steps - 1;
    let window = input_window(&seq, anchor, d.input_steps).unwrap();
    let snapshot = buffer_snapshot(&seq, anchor, d.input_steps);

    c.bench_function("network_forward_default", |b| {
        b.iter(|| forward(&params, std::hint::black_box(&window), &snapshot).unwrap())
    });
}

/// A refinement problem whose targets come from a known state, with the
/// guess perturbed the way a trained network misses.
fn perturbed_problem(seed: u64) -> RefinementProblem {
    let model = reference_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.dof();
    let s = DVector::from_fn(n, |j, _| {
        let (lo, hi) = model.joints()[j].limits;
        let m = 0.1 * (hi - lo);
        rng.gen_range(lo + m..hi - m)
    });
    let sdot = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let base = BaseState {
        position: nalgebra::Vector3::new(0.1, -0.2, 0.9),
        rotation: nalgebra::Matrix3::identity(),
        linear: nalgebra::Vector3::new(0.5, 0.0, 0.1),
        angular: nalgebra::Vector3::new(0.0, 0.2, 0.0),
    };
    let q = Configuration::new(base.position, base.rotation, s.clone()).unwrap();
    let nu = SystemVelocity::new(base.linear, base.angular, sdot.clone()).unwrap();
    let fk = forward_kinematics(&model, &q);
    let twists = model
        .instrumented_links()
        .iter()
        .map(|&l| differential_kinematics(&model, &fk, &nu, l).as_vector())
        .collect();
    let mut problem = RefinementProblem::new(s, sdot, base, twists);
    for j in 0..n {
        problem.guess_positions[j] += 0.05 * rng.gen_range(-1.0..1.0f64);
        problem.guess_velocities[j] += 0.05 * rng.gen_range(-1.0..1.0f64);
    }
    problem
}

fn bench_refinement(c: &mut Criterion) {
    let model = reference_model();
    let problem = perturbed_problem(5);
    let mut group = c.benchmark_group("refinement");
    group.sample_size(30);
    group.bench_function("first_step_sigma_0.05", |b| {
        b.iter(|| refine_first_step(&model, std::hint::black_box(&problem)).unwrap())
    });
    group.finish();
}

fn bench_closed_loop_step(c: &mut Criterion) {
    let model = reference_model();
    let d = NetworkDescriptor::for_model(&model);
    let params = init_params(&d, 1).unwrap();
    let seq = walk_sequence();
    let m = d.input_steps;
    let init: Vec<_> = (0..m - 1)
        .map(|t| {
            let s = seq.step(t);
            (
                s.configuration.joint_positions().clone(),
                s.velocity.joint_velocities().clone(),
            )
        })
        .collect();
    let buffer = JointStateBuffer::init(m - 1, &init).unwrap();
    let anchor = m - 1;
    let window = input_window(&seq, anchor, m).unwrap();
    let truth = seq.step(anchor);
    let base = BaseState {
        position: *truth.configuration.base_position(),
        rotation: *truth.configuration.base_rotation(),
        linear: *truth.velocity.base_linear(),
        angular: *truth.velocity.base_angular(),
    };
    let options = StepOptions::default();

    let mut group = c.benchmark_group("closed_loop");
    group.sample_size(30);
    group.bench_function("step_refined", |b| {
        b.iter_batched(
            || buffer.clone(),
            |mut buf| {
                step(
                    &model,
                    &params,
                    &mut buf,
                    &window,
                    &base,
                    &truth.link_twists,
                    &options,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_kinematics,
    bench_network_forward,
    bench_refinement,
    bench_closed_loop_step
);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use reachnet::dynamics::{Costate, SystemSpec};
use reachnet::gridoracle::{solve_air3d, GridSpec};
use reachnet::trainer::{compute_loss, CurriculumState};
use reachnet::verifier::{rollout_many, sample_states};
use reachnet_bench::{batch, network};

fn network_kernels(c: &mut Criterion) {
    let spec = SystemSpec::air3d();
    let b = batch(&spec, 2000);
    let state = CurriculumState::at(1, 0, 1);
    for schedule in ["ssssl", "rrrrl"] {
        let net = network(&spec, schedule, 128);
        c.bench_function(&format!("forward_batch_2000_{schedule}"), |bn| {
            bn.iter(|| net.forward_batch(&b.inputs).unwrap())
        });
        c.bench_function(&format!("input_gradient_batch_2000_{schedule}"), |bn| {
            bn.iter(|| net.input_gradient_batch(&b.inputs).unwrap())
        });
        c.bench_function(&format!("loss_and_gradients_2000_{schedule}"), |bn| {
            bn.iter(|| compute_loss(&net, &spec, &b, 100.0, &state).unwrap())
        });
    }
}

fn dynamics_kernels(c: &mut Criterion) {
    for spec in [SystemSpec::air3d(), SystemSpec::vehicles9d()] {
        let xs = sample_states(&spec, 1000, 0);
        let p = Costate(vec![0.3; spec.dim()]);
        c.bench_function(&format!("hamiltonian_1000_{}", spec.name()), |bn| {
            bn.iter(|| {
                xs.chunks_exact(spec.dim())
                    .map(|x| spec.hamiltonian(x, &p).unwrap())
                    .sum::<f64>()
            })
        });
    }
}

fn oracle_and_rollouts(c: &mut Criterion) {
    let mut spec = SystemSpec::air3d();
    spec.set("T_f", "0.2").unwrap();
    let grid = GridSpec::cubic(&spec, 31).unwrap();
    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("grid_solve_31_cubed_short_horizon", |bn| {
        bn.iter(|| solve_air3d(&spec, &grid).unwrap())
    });
    let spec = SystemSpec::air3d();
    let net = network(&spec, "ssssl", 128);
    group.bench_function("rollouts_200_ssssl", |bn| {
        bn.iter_batched(
            || sample_states(&spec, 200, 1),
            |xs| rollout_many(&net, &spec, &xs, 0.01).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, network_kernels, dynamics_kernels, oracle_and_rollouts);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use clustersim::collectives::{ring_allreduce, CollectiveMode};
use clustersim::network::{max_min_allocate, Demand, Protocol};
use clustersim::scenario::{preset, simulate_cluster};
use clustersim::simcore::{Engine, RngStream, SimTime};

fn engine_dispatch(c: &mut Criterion) {
    c.bench_function("engine_dispatch_100k", |b| {
        b.iter_batched(
            || {
                let mut rng = RngStream::new("bench", 0);
                let mut e: Engine<u32> = Engine::new();
                for i in 0..100_000u32 {
                    e.schedule(SimTime::new(rng.unit() * 1e6).unwrap(), u64::from(i % 64), i).unwrap();
                }
                e
            },
            |mut e| {
                let mut sum = 0u64;
                e.run_until(SimTime::new(2e6).unwrap(), |_, r| sum += u64::from(r.event));
                black_box(sum)
            },
            BatchSize::LargeInput,
        )
    });
}

fn allocation(c: &mut Criterion) {
    let mut rng = RngStream::new("alloc", 0);
    let links = 512;
    let capacity: Vec<f64> = (0..links).map(|_| 50.0 + 150.0 * rng.unit()).collect();
    let demands: Vec<Demand> = (0..2_000)
        .map(|_| Demand {
            usage: (0..6).map(|_| ((rng.unit() * links as f64) as usize % links, 1.0)).collect(),
            limit: f64::INFINITY,
        })
        .collect();
    c.bench_function("max_min_allocate_2000_flows", |b| b.iter(|| max_min_allocate(black_box(&capacity), black_box(&demands))));
}

fn allreduce(c: &mut Criterion) {
    let cfg = preset("fig3-sweep").unwrap();
    let topo = cfg.build_topology().unwrap();
    let nodes: Vec<usize> = (0..32).collect();
    c.bench_function("ring_allreduce_simulated_256_gpus", |b| {
        b.iter(|| {
            ring_allreduce(&topo, &nodes, 2e9, Protocol::Gdr, &cfg.network.path_model, CollectiveMode::Simulated, &[], 0)
                .unwrap()
        })
    });
}

fn month(c: &mut Criterion) {
    let mut cfg = preset("vela-resilience-month").unwrap();
    cfg.output.event_log = false;
    cfg.output.metrics = false;
    let mut g = c.benchmark_group("cluster");
    g.sample_size(10);
    g.bench_function("resilience_month", |b| b.iter(|| simulate_cluster(&cfg, 1).unwrap()));
    g.finish();
}

criterion_group!(benches, engine_dispatch, allocation, allreduce, month);
criterion_main!(benches);

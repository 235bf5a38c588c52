use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dtmem_core::config::RunConfig;
use dtmem_core::numerics::kernels;
use dtmem_core::tasks::{generate_episodes, Split};
use dtmem_core::training::{TaskData, Trainer};
use dtmem_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Rows of a row-stochastic matrix.
fn simplex(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let mut t = random(rng, r, c);
    for row in t.values_mut().chunks_mut(c) {
        row.iter_mut().for_each(|x| *x = x.exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul");
    for n in [64, 192] {
        let (a, b) = (random(&mut rng, n, 64), random(&mut rng, 64, 64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| kernels::matmul(n, 64, 64, black_box(a.values()), black_box(b.values())))
        });
    }
    g.finish();
}

fn memory_scan(c: &mut Criterion) {
    // Desk batch: 16 segments of 12 timesteps, 3 tokens each, d = 64.
    let (blocks, l, d) = (16, 36, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("memory_scan");
    for n in [4, 16, 64] {
        let m = random(&mut rng, blocks * n, d);
        let w = simplex(&mut rng, blocks * l, n);
        let beta = simplex(&mut rng, blocks * l, n);
        let v = random(&mut rng, blocks * l, d);
        g.bench_with_input(BenchmarkId::new("forward", n), &n, |bch, _| {
            bch.iter(|| {
                let tape = Tape::new();
                let out = tape
                    .constant(&m)
                    .memory_scan(tape.constant(&w), tape.constant(&beta), tape.constant(&v), blocks)
                    .unwrap();
                black_box(out.values());
            })
        });
        g.bench_with_input(BenchmarkId::new("backward", n), &n, |bch, _| {
            bch.iter(|| {
                let tape = Tape::new();
                let ms = m.clone().with_grad();
                let vs = v.clone().with_grad();
                let out = tape
                    .leaf(&ms)
                    .memory_scan(tape.constant(&w), tape.constant(&beta), tape.leaf(&vs), blocks)
                    .unwrap();
                black_box(tape.backward(out.sum()).unwrap());
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let (blocks, l, d, heads) = (16, 36, 64, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, k, v) = (random(&mut rng, blocks * l, d), random(&mut rng, blocks * l, d), random(&mut rng, blocks * l, d));
    c.bench_function("causal_attention/forward_backward", |bch| {
        bch.iter(|| {
            let tape = Tape::new();
            let (qv, kv, vv) = (
                tape.leaf(&q.clone().with_grad()),
                tape.leaf(&k.clone().with_grad()),
                tape.leaf(&v.clone().with_grad()),
            );
            let out = qv.causal_attention(kv, vv, blocks, heads).unwrap();
            black_box(tape.backward(out.sum()).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let spec = cfg.suite.tasks().into_iter().find(|t| t.split == Split::Train).unwrap();
    let trajs = generate_episodes(&spec, 50, &cfg.suite.epsilons, 3).unwrap();
    let data = TaskData::new(&spec.task_id, &trajs, cfg.model.backbone.context).unwrap();
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.to_json()).unwrap();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    g.bench_function("desk", |bch| bch.iter(|| black_box(trainer.step(&data).unwrap())));
    g.finish();
}

criterion_group!(benches, matmul, memory_scan, attention, train_step);
criterion_main!(benches);

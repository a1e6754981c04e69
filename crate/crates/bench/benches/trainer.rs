use brac_core::data::collect;
use brac_core::envs::{EnvName, UniformRandom};
use brac_core::policies::TanhGaussianPolicy;
use brac_core::rng::seeded;
use brac_core::trainer::{Algo, Trainer, TrainerConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_steps(c: &mut Criterion) {
    let env = EnvName::PointMass2D.build();
    let mut rng = seeded(0);
    let random = UniformRandom::for_env(env.as_ref());
    let ds = collect(env.as_ref(), &random, "none".parse().unwrap(), 5_000, &mut rng).unwrap();
    let behavior =
        TanhGaussianPolicy::new(env.state_dim(), &[64, 64], env.action_low(), env.action_high(), &mut rng).unwrap();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for algo in [Algo::MmdVp, Algo::KlVp, Algo::KldualPr, Algo::WVp, Algo::Bear, Algo::Bcq] {
        let mut cfg = TrainerConfig::preset(algo, algo.strength_grid()[2], env.action_dim());
        cfg.total_steps = 1_000_000;
        let mut trainer = Trainer::new(cfg, &behavior).unwrap();
        g.bench_function(BenchmarkId::from_parameter(algo), |b| {
            b.iter(|| trainer.train_step(&ds).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_steps);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, Criterion};
use pgformer::eval::MetricReport;
use pgformer::training::{pose_step, Adam};
use pgformer::{DiffusionConfig, DiffusionModel, PgFormer, PgFormerConfig};
use pgformer_bench::uniform;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lifter(c: &mut Criterion) {
    let model = PgFormer::build(&PgFormerConfig::gt(), 0).unwrap();
    let x = uniform(&[64, 16, 2], 1);
    c.bench_function("pgformer_gt_predict_b64", |b| b.iter(|| model.predict(&x).unwrap()));

    let mut toy = PgFormer::build(&PgFormerConfig::toy(32, 2), 0).unwrap();
    let mut adam = Adam::new(&toy.store);
    let y = uniform(&[64, 16, 3], 2);
    let mut step = 0;
    c.bench_function("pgformer_d32_train_step_b64", |b| {
        b.iter(|| {
            step += 1;
            pose_step(&mut toy, &mut adam, &x, &y, 0.025, 1e-4, step).unwrap()
        })
    });
}

fn diffusion(c: &mut Criterion) {
    let cfg = DiffusionConfig { backbone: PgFormerConfig::toy(32, 2), ..DiffusionConfig::default() };
    let model = DiffusionModel::build(&cfg, 0).unwrap();
    let encoder = PgFormer::build(&PgFormerConfig::toy(32, 2), 1).unwrap();
    let x = uniform(&[16, 16, 2], 3);
    c.bench_function("ddim_5x5_b16", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            model.sample(&encoder, &x, &mut rng).unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let pred = uniform(&[2048, 16, 3], 4);
    let gt = uniform(&[2048, 16, 3], 5);
    c.bench_function("metric_report_2048", |b| b.iter(|| MetricReport::compute(&pred, &gt, 0, None).unwrap()));
}

criterion_group!(benches, lifter, diffusion, metrics);
criterion_main!(benches);

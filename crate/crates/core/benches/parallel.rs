use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use psoctseg::losses::LossConfig;
use psoctseg::nn::Normalization;
use psoctseg::par::Exec;
use psoctseg::phantom::{generate_records, PhantomConfig};
use psoctseg::segnet::{SegModel, SegNet, SegNetConfig};
use psoctseg::trainer::batch_gradient;

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", Exec::Parallel));
    }
    m
}

fn bench_phantoms(c: &mut Criterion) {
    let cfg = PhantomConfig::for_grid(64, 128);
    let mut group = c.benchmark_group("generate_16_phantoms");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_records(&cfg, 16, 1, exec).unwrap()));
    }
    group.finish();
}

fn bench_batch_gradient(c: &mut Criterion) {
    let records = generate_records(&PhantomConfig::for_grid(32, 64), 8, 1, Exec::Sequential).unwrap();
    let batch: Vec<_> = records.iter().map(|r| (r.image.clone(), r.labels.clone().unwrap())).collect();
    let net = SegNet::new(SegNetConfig::default());
    let model = SegModel { params: net.init_params(0), net, norm: Normalization::identity(3) };
    let loss = LossConfig { lambda_ap: 0.0, ..LossConfig::default() };
    let mut group = c.benchmark_group("batch_gradient_8x32x64");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradient(&model, &batch, &loss, None, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_phantoms, bench_batch_gradient);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use orientpose::exec::Exec;
use orientpose::grad::Tape;
use orientpose::net::{fcnn_forward, fcnn_init, image_tensor, FcnnConfig};
use orientpose::perturb::rng_for;
use orientpose::synthdata::{generate, DataConfig};

fn modes() -> [(&'static str, Exec); 2] {
    [("parallel", Exec::Auto), ("sequential", Exec::Sequential)]
}

fn rendering(c: &mut Criterion) {
    let cfg = DataConfig { count: 64, ..DataConfig::default() };
    let mut group = c.benchmark_group("generate_64");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate(&cfg, exec).unwrap()));
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let net = FcnnConfig::default();
    let params = fcnn_init(&net, &mut rng_for(1)).unwrap();
    let samples = generate(&DataConfig { count: 16, ..DataConfig::default() }, Exec::Sequential).unwrap();
    let mut group = c.benchmark_group("fcnn_batch_16");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map(&samples, |s| {
                    let tape = Tape::new();
                    let bound = params.bind(&tape, true);
                    let maps = fcnn_forward(tape.constant(image_tensor(&s.image)), &bound, &net).unwrap();
                    let loss = maps.last().unwrap().conf.sum();
                    bound.grads(&tape.backward(loss).unwrap())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, rendering, forward_backward);
criterion_main!(benches);

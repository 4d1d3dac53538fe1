use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use graformer::layers::Forward;
use graformer::training::{mse_loss, TrainConfig, Trainer};
use graformer::{GraFormer, ModelConfig, SkeletonGraph};
use graformer_bench::pose_batch;

fn model(preset: &str) -> GraFormer {
    let config = ModelConfig::preset(preset, SkeletonGraph::human16()).unwrap();
    GraFormer::new(config, 0).unwrap()
}

fn forward(c: &mut Criterion) {
    let (x, _) = pose_batch(64, 1);
    for preset in ["small", "default"] {
        let m = model(preset);
        c.bench_function(&format!("predict/{preset}/batch64"), |b| {
            b.iter(|| m.predict(&x).unwrap())
        });
    }
}

fn forward_backward(c: &mut Criterion) {
    let (x, y) = pose_batch(64, 2);
    let m = model("default");
    c.bench_function("forward_backward/default/batch64", |b| {
        b.iter(|| {
            let mut f = Forward::eval_with_grads(m.params());
            let (xv, yv) = (f.input(x.clone()), f.input(y.clone()));
            let pred = m.forward(&mut f, xv).unwrap();
            let loss = mse_loss(&mut f.tape, pred, yv).unwrap();
            f.backward(loss).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let (x, y) = pose_batch(64, 3);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("default/batch64", |b| {
        b.iter_batched(
            || Trainer::new(model("default"), TrainConfig::default()).unwrap(),
            |mut t| t.train_batch(&x, &y).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, forward, forward_backward, train_step);
criterion_main!(benches);

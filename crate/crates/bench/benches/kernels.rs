use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use neuropinn::sim::{generate, integrate};
use neuropinn::spectral::power_spectrum;
use neuropinn::train::{stage_loss, ResidualScaling};
use neuropinn::Regime;
use neuropinn_bench::hopf_fixture;

fn network(c: &mut Criterion) {
    let fx = hopf_fixture(500);
    let net = &fx.bundle.nets[1];
    c.bench_function("net_forward_batch500", |b| b.iter(|| net.eval_batch(black_box(&fx.batch))));
    let tape = net.eval_batch(&fx.batch);
    let adj = vec![1e-3; fx.batch.len()];
    c.bench_function("net_backward_batch500", |b| {
        b.iter_batched(
            || vec![0.0; net.param_count()],
            |mut g| {
                net.backward_batch(&tape, &adj, &adj, &mut g).unwrap();
                g
            },
            BatchSize::SmallInput,
        )
    });
}

fn residual(c: &mut Criterion) {
    let fx = hopf_fixture(500);
    let w = [1.0, 1.0];
    for (name, scaling) in [
        ("stage_loss_batch500", ResidualScaling::None),
        ("stage_loss_batch500_timescale", ResidualScaling::Timescale),
    ] {
        c.bench_function(name, |b| {
            b.iter(|| stage_loss(&fx.bundle, &fx.spec, &fx.truth, &fx.cp, black_box(&fx.batch), &w, None, scaling).unwrap())
        });
    }
}

fn signal(c: &mut Criterion) {
    let (spec, truth) = Regime::Hopf.load();
    let voltage = generate(&spec, &truth).unwrap().component(spec.observed_index);
    c.bench_function("power_spectrum_2001", |b| b.iter(|| power_spectrum(black_box(&voltage)).unwrap()));
    let x0 = [-40.0, 0.2];
    c.bench_function("heun_sml_2000_steps", |b| {
        b.iter(|| integrate(&spec, &truth, black_box(&x0), 0.1, 2000).unwrap())
    });
}

criterion_group!(benches, network, residual, signal);
criterion_main!(benches);

//! Benchmarks for the kernels that dominate training and detection time.

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use mtnet_bench::{random_conv, random_tensor};
use mtnet_core::detection::{connected_components, SegmentationMap};
use mtnet_core::layers::{conv2d_backward, conv2d_forward, maxpool2, tconv2_forward};

fn conv_layers(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    // the three most expensive layers of the full network at 240x240 input
    for &(h, w, cin, cout, n) in &[(120usize, 120, 64, 32, 7), (60, 60, 128, 64, 5), (240, 240, 32, 16, 5)] {
        let x = random_tensor(h, w, cin, 1);
        let p = random_conv(n, cin, cout, 2);
        let flops = 2 * h * w * cout * n * n * cin;
        group.throughput(Throughput::Elements(flops as u64));
        group.bench_function(format!("fwd_{h}x{w}_{cin}to{cout}_n{n}"), |b| {
            b.iter(|| conv2d_forward(&x, &p).unwrap())
        });
        let grad = random_tensor(h, w, cout, 3);
        group.bench_function(format!("bwd_{h}x{w}_{cin}to{cout}_n{n}"), |b| {
            b.iter(|| conv2d_backward(&x, &p, &grad).unwrap())
        });
    }
    group.finish();
}

fn tconv_layer(c: &mut Criterion) {
    let x = random_tensor(30, 30, 128, 4);
    let p = random_conv(2, 128, 128, 5);
    c.bench_function("tconv2/fwd_30x30_128to128", |b| b.iter(|| tconv2_forward(&x, &p).unwrap()));
}

fn pooling(c: &mut Criterion) {
    let x = random_tensor(240, 240, 16, 6);
    c.bench_function("maxpool2/240x240x16", |b| b.iter(|| maxpool2(&x).unwrap()));
}

fn components(c: &mut Criterion) {
    // checkerboard-ish blob pattern exercises the union-find merge path
    let (h, w) = (480, 480);
    let mut map = SegmentationMap::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            if (y / 40 + x / 40) % 2 == 0 && (y % 40 < 36) && (x % 40 < 36) {
                map.set(y, x, 1);
            }
        }
    }
    c.bench_function("connected_components/480x480", |b| b.iter(|| connected_components(&map)));
}

criterion_group!(benches, conv_layers, tconv_layer, pooling, components);
criterion_main!(benches);

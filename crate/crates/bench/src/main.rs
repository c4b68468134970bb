//! Quick one-shot kernel timer (`cargo run --release -p mtnet-bench`).
//! Criterion gives the statistically careful numbers; this prints a fast
//! overview of the layers that dominate a training step.

use mtnet_bench::{random_conv, random_tensor};
use mtnet_core::layers::{conv2d_backward, conv2d_forward, tconv2_backward, tconv2_forward};
use std::time::Instant;

fn main() {
    println!("{:<28} {:>10} {:>12}", "kernel", "ms/call", "GFLOP/s");
    for &(h, w, cin, cout, n) in &[
        (240usize, 240, 16, 16, 5),
        (120, 120, 64, 32, 7),
        (60, 60, 128, 64, 5),
        (240, 240, 32, 16, 5),
    ] {
        let x = random_tensor(h, w, cin, 1);
        let p = random_conv(n, cin, cout, 2);
        let flops = (2 * h * w * cout * n * n * cin) as f64;
        let reps = 10;

        let mut out = conv2d_forward(&x, &p).unwrap();
        let t0 = Instant::now();
        for _ in 0..reps {
            out = conv2d_forward(&x, &p).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("conv fwd {h}x{w} {cin}->{cout} n={n}: {:>8.1} {:>12.1}", dt * 1e3, flops / dt / 1e9);

        let t0 = Instant::now();
        for _ in 0..reps {
            let _ = conv2d_backward(&x, &p, &out).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("conv bwd {h}x{w} {cin}->{cout} n={n}: {:>8.1} {:>12.1}", dt * 1e3, 2.0 * flops / dt / 1e9);
    }

    let x = random_tensor(30, 30, 128, 4);
    let p = random_conv(2, 128, 128, 5);
    let flops = (2 * 30 * 30 * 128 * 4 * 128) as f64;
    let out = tconv2_forward(&x, &p).unwrap();
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = tconv2_forward(&x, &p).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / 50.0;
    println!("tconv fwd 30x30 128->128:   {:>8.2} {:>12.1}", dt * 1e3, flops / dt / 1e9);
    let t0 = Instant::now();
    for _ in 0..50 {
        let _ = tconv2_backward(&x, &p, &out).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / 50.0;
    println!("tconv bwd 30x30 128->128:   {:>8.2} {:>12.1}", dt * 1e3, 2.0 * flops / dt / 1e9);
}

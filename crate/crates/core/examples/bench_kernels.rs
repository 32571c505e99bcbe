//! Scratch: isolate conv kernel vs tape overhead.
use atta_core::tensor::{Reduction, Tape};
use std::time::Instant;

fn main() {
    // Raw-ish measurement: single conv layer fwd+bwd through the tape, batch 128.
    for (ci, co, h) in [(1usize, 4usize, 28usize), (4, 4, 28), (8, 8, 28), (8, 16, 14), (16, 16, 14)] {
        let n = 128;
        let x_data: Vec<f32> = (0..n * ci * h * h).map(|i| (i as f32 * 0.001).sin()).collect();
        let w_data: Vec<f32> = (0..co * ci * 9).map(|i| (i as f32 * 0.01).cos() * 0.2).collect();
        let iters = 30;
        let t0 = Instant::now();
        for _ in 0..iters {
            let mut t = Tape::<f32>::new();
            let x = t.leaf(x_data.clone(), &[n, ci, h, h], true).unwrap();
            let w = t.leaf(w_data.clone(), &[co, ci, 3, 3], false).unwrap();
            let b = t.leaf(vec![0.0; co], &[co], false).unwrap();
            let c = t.conv2d(&x, &w, &b, 1, 1).unwrap();
            let loss = t.sum(&c);
            t.backward(&loss).unwrap();
            std::hint::black_box(t.grad(&x).unwrap()[0]);
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let macs = (n * ci * co * 9 * h * h) as f64 * 2.0; // fwd + dx
        println!("conv {ci}->{co} @{h}: {:.2} ms  ({:.2} GMAC/s)", dt * 1e3, macs / dt / 1e9);
    }
    // Elementwise chain cost: relu+add on 1.6 MB tensors
    let n = 128 * 4 * 28 * 28;
    let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.001).sin()).collect();
    let iters = 50;
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(data.clone(), &[n], true).unwrap();
        let r = t.relu(&x);
        let r2 = t.relu(&r);
        let loss = t.sum(&r2);
        t.backward(&loss).unwrap();
        std::hint::black_box(t.grad(&x).unwrap()[0]);
    }
    println!("relu-chain on {} floats: {:.2} ms/iter", n, t0.elapsed().as_secs_f64() / iters as f64 * 1e3);
    // cross-entropy + linear at batch 128
    let (i, o) = (392usize, 32usize);
    let xd: Vec<f32> = (0..128 * i).map(|v| (v as f32 * 0.001).sin()).collect();
    let wd: Vec<f32> = (0..i * o).map(|v| (v as f32 * 0.01).cos() * 0.1).collect();
    let labels: Vec<usize> = (0..128).map(|e| e % 10).collect();
    let t0 = Instant::now();
    let iters = 200;
    for _ in 0..iters {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(xd.clone(), &[128, i], true).unwrap();
        let w = t.leaf(wd.clone(), &[i, o], false).unwrap();
        let b = t.leaf(vec![0.0; o], &[o], false).unwrap();
        let l = t.linear(&x, &w, &b).unwrap();
        let w2 = t.leaf(vec![0.01; o * 10], &[o, 10], false).unwrap();
        let b2 = t.leaf(vec![0.0; 10], &[10], false).unwrap();
        let l2 = t.linear(&l, &w2, &b2).unwrap();
        let loss = t.cross_entropy(&l2, &labels, Reduction::Sum).unwrap();
        t.backward(&loss).unwrap();
        std::hint::black_box(t.grad(&x).unwrap()[0]);
    }
    println!("linear 392->32->10 + ce: {:.2} ms/iter", t0.elapsed().as_secs_f64() / iters as f64 * 1e3);
}

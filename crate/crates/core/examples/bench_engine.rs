//! Scratch benchmark: batch-128 forward+backward timings for candidate CNNs.
use atta_core::tensor::{Reduction, Tape};
use std::time::Instant;

fn run(convs: &[usize], fcs: &[usize], iters: usize, track_params: bool) -> f64 {
    let n = 128;
    let (c0, h, w) = (1usize, 28usize, 28usize);
    let mut rng = 1234567u64;
    let mut rand = || {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng >> 33) as f32 / u32::MAX as f32) - 0.5
    };
    let x_data: Vec<f32> = (0..n * c0 * h * w).map(|_| rand()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();

    // weights
    let mut weights = Vec::new();
    let mut cin = c0;
    for &c in convs {
        weights.push(((0..c * cin * 9).map(|_| rand() * 0.2).collect::<Vec<f32>>(), vec![c, cin, 3, 3]));
        weights.push((vec![0.0f32; c], vec![c]));
        cin = c;
    }
    let spatial = (h / 4) * (w / 4);
    let mut fin = cin * spatial;
    for &f in fcs {
        weights.push(((0..fin * f).map(|_| rand() * 0.1).collect::<Vec<f32>>(), vec![fin, f]));
        weights.push((vec![0.0f32; f], vec![f]));
        fin = f;
    }
    weights.push(((0..fin * 10).map(|_| rand() * 0.1).collect::<Vec<f32>>(), vec![fin, 10]));
    weights.push((vec![0.0f32; 10], vec![10]));

    let start = Instant::now();
    for _ in 0..iters {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(x_data.clone(), &[n, c0, h, w], !track_params).unwrap();
        let mut wi = weights.iter().map(|(d, s)| t.leaf(d.clone(), s, track_params).unwrap()).collect::<Vec<_>>().into_iter();
        let mut cur = x.clone();
        for (i, _) in convs.iter().enumerate() {
            let wt = wi.next().unwrap();
            let bt = wi.next().unwrap();
            let c = t.conv2d(&cur, &wt, &bt, 1, 1).unwrap();
            let r = t.relu(&c);
            cur = if i % 2 == 1 { t.max_pool2x2(&r).unwrap() } else { r };
        }
        cur = t.flatten(&cur).unwrap();
        for _ in 0..fcs.len() {
            let wt = wi.next().unwrap();
            let bt = wi.next().unwrap();
            let l = t.linear(&cur, &wt, &bt).unwrap();
            cur = t.relu(&l);
        }
        let wt = wi.next().unwrap();
        let bt = wi.next().unwrap();
        let logits = t.linear(&cur, &wt, &bt).unwrap();
        let loss = t.cross_entropy(&logits, &labels, Reduction::Sum).unwrap();
        t.backward(&loss).unwrap();
        std::hint::black_box(t.grad(&x).map(|g| g[0]));
    }
    start.elapsed().as_secs_f64() / iters as f64
}

fn main() {
    for (name, convs, fcs) in [
        ("tiny  4,4,8,8 fc32", vec![4usize, 4, 8, 8], vec![32usize]),
        ("small 8,8,16,16 fc64", vec![8, 8, 16, 16], vec![64]),
        ("spec  32,32,64,64 fc1024,512", vec![32, 32, 64, 64], vec![1024, 512]),
    ] {
        let t_attack = run(&convs, &fcs, 6, false);
        let t_train = run(&convs, &fcs, 6, true);
        println!("{name}: attack-pass {:.1} ms, train-pass {:.1} ms", t_attack * 1e3, t_train * 1e3);
    }
}

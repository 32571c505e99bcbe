//! Dense-tensor arithmetic with reverse-mode automatic differentiation.

mod fd;
mod pool;
mod ops;
mod real;
mod tape;

pub use fd::finite_difference_check;
pub use real::Real;
pub use tape::{Reduction, Tape, Tensor, TensorError, TensorResult};

#[cfg(test)]
mod tests {
    use super::*;

    fn tape32() -> Tape<f32> {
        Tape::new()
    }

    #[test]
    fn relu_definition() {
        let mut t = tape32();
        let x = t.leaf(vec![-1.0, 0.0, 2.0], &[3], false).unwrap();
        let y = t.relu(&x);
        assert_eq!(t.value(&y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut t = tape32();
        let p = t.leaf(vec![0.3, -1.2, 2.0, 0.3, -1.2, 2.0], &[2, 3], false).unwrap();
        let q = t.leaf(vec![0.3, -1.2, 2.0, 0.3, -1.2, 2.0], &[2, 3], false).unwrap();
        let kl = t.kl_div_logits(&p, &q, Reduction::Mean).unwrap();
        assert!(t.scalar(&kl).abs() < 1e-7);
    }

    #[test]
    fn conv2d_all_ones_counting() {
        let mut t = tape32();
        let x = t.leaf(vec![1.0; 25], &[1, 1, 5, 5], false).unwrap();
        let w = t.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let b = t.leaf(vec![0.0], &[1], false).unwrap();
        let y = t.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(t.value(&y).iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv2d_zero_padding_shapes() {
        let mut t = tape32();
        let x = t.leaf(vec![1.0; 2 * 16], &[2, 1, 4, 4], false).unwrap();
        let w = t.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let b = t.leaf(vec![0.5], &[1], false).unwrap();
        let y = t.conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 4]);
        // Corner sees a 2x2 window of ones plus bias.
        assert_eq!(t.value(&y)[0], 4.5);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = tape32();
        let x = t.leaf(vec![5.0, -2.0, 0.25], &[3], true).unwrap();
        let loss = t.sum(&x);
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = tape32();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let sq = t.mul(&x, &x).unwrap();
        let loss = t.sum(&sq);
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // loss = sum(x + x) should give the same gradient as 2·sum(x).
        let mut t = tape32();
        let x = t.leaf(vec![1.0, -3.0], &[2], true).unwrap();
        let doubled = t.add(&x, &x).unwrap();
        let loss = t.sum(&doubled);
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reruns() {
        let mut t = tape32();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let y = t.relu(&x);
        assert!(matches!(
            t.backward(&y),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let loss = t.sum(&y);
        t.backward(&loss).unwrap();
        assert!(matches!(t.backward(&loss), Err(TensorError::BackwardTwice)));
        t.reset_grads();
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = tape32();
        let a = t.leaf(vec![0.0; 4], &[4], false).unwrap();
        let b = t.leaf(vec![0.0; 3], &[3], false).unwrap();
        let err = t.add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[4]") && msg.contains("[3]"));
    }

    #[test]
    fn cross_entropy_label_range_checked() {
        let mut t = tape32();
        let z = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let err = t.cross_entropy(&z, &[1, 3], Reduction::Mean).unwrap_err();
        assert!(matches!(err, TensorError::LabelOutOfRange { label: 3, .. }));
    }

    #[test]
    fn cw_margin_arithmetic() {
        let mut t = tape32();
        let z = t.leaf(vec![3.0, 1.0, 0.0], &[1, 3], false).unwrap();
        let m = t.cw_margin(&z, &[0], Reduction::Sum).unwrap();
        assert_eq!(t.scalar(&m), -2.0);
    }

    #[test]
    fn max_pool_picks_first_max_on_ties() {
        let mut t = tape32();
        let x = t
            .leaf(vec![1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2], true)
            .unwrap();
        let y = t.max_pool2x2(&x).unwrap();
        assert_eq!(t.value(&y), &[1.0]);
        let loss = t.sum(&y);
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        // Fixed small net in f64; h = 1e-3 per coordinate.
        let mut rng = crate::rng::stream(7, &[1]);
        let x: Vec<f64> = (0..12).map(|_| crate::rng::uniform(&mut rng, 1.0)).collect();
        let w1: Vec<f64> = (0..12 * 5).map(|_| crate::rng::uniform(&mut rng, 0.7)).collect();
        let w2: Vec<f64> = (0..5 * 3).map(|_| crate::rng::uniform(&mut rng, 0.7)).collect();
        let err = finite_difference_check(
            move |t, xt| {
                let w1 = t.constant(w1.clone(), &[12, 5])?;
                let b1 = t.constant(vec![0.1; 5], &[5])?;
                let w2 = t.constant(w2.clone(), &[5, 3])?;
                let b2 = t.constant(vec![-0.2; 3], &[3])?;
                let h1 = t.linear(xt, &w1, &b1)?;
                let a1 = t.relu(&h1);
                let z = t.linear(&a1, &w2, &b2)?;
                t.cross_entropy(&z, &[1], crate::tensor::Reduction::Mean)
            },
            &x,
            &[1, 12],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn fd_check_sum_of_squares_and_constant() {
        let x = vec![0.4_f64, -1.1, 0.9];
        let err = finite_difference_check(
            |t, xt| {
                let sq = t.mul(xt, xt)?;
                Ok(t.sum(&sq))
            },
            &x,
            &[3],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-4, "sum of squares err {err}");

        let err = finite_difference_check(
            |t, xt| {
                let zero = t.scale(xt, 0.0);
                Ok(t.sum(&zero))
            },
            &x,
            &[3],
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_rejects_zero_step() {
        let err = finite_difference_check(|t, xt| Ok(t.sum(xt)), &[1.0_f64], &[1], 0.0);
        assert!(matches!(err, Err(TensorError::BadStep { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = tape32();
            let x = t
                .leaf((0..32).map(|i| (i as f32 * 0.37).sin()).collect(), &[2, 1, 4, 4], true)
                .unwrap();
            let w = t
                .leaf((0..18).map(|i| (i as f32 * 0.11).cos()).collect(), &[2, 1, 3, 3], false)
                .unwrap();
            let b = t.leaf(vec![0.05, -0.05], &[2], false).unwrap();
            let c = t.conv2d(&x, &w, &b, 1, 1).unwrap();
            let r = t.relu(&c);
            let p = t.max_pool2x2(&r).unwrap();
            let f = t.flatten(&p).unwrap();
            let loss = t.mean(&f);
            t.backward(&loss).unwrap();
            (
                t.value(&f).to_vec(),
                t.grad(&x).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}

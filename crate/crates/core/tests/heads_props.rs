mod common;

use plotfuse_core::autograd::Tape;
use plotfuse_core::heads::cross_entropy_value;
use plotfuse_core::metrics::argmax;
use plotfuse_core::prelude::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_shift_leaves_argmax_and_loss(seed in 0u64..10_000, b in 1usize..6, k in 2usize..8, shift in -50.0f64..50.0) {
        let logits = common::random_tensor(seed, &[b, k]);
        let shifted = logits.map(|v| v + shift);
        let labels: Vec<usize> = (0..b).map(|i| (i * 7 + seed as usize) % k).collect();
        for i in 0..b {
            prop_assert_eq!(argmax(logits.row(i).data()), argmax(shifted.row(i).data()));
        }
        let a = cross_entropy_value(&logits, &labels).unwrap();
        let s = cross_entropy_value(&shifted, &labels).unwrap();
        prop_assert!((a - s).abs() < 1e-9);

        let grad = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.watch(t.clone());
            let loss = tape.cross_entropy(v, &labels).unwrap();
            tape.backward(loss).wrt(v).unwrap().clone()
        };
        prop_assert!(grad(&logits).max_abs_diff(&grad(&shifted)) < 1e-12);
    }

    #[test]
    fn forecast_is_channel_equivariant(seed in 0u64..500, rot in 1usize..3) {
        let model = Model::new(common::small_config(Task::Forecasting, false, seed)).unwrap();
        let c = 3;
        let x = common::random_tensor(seed, &[2, 16, c]);
        let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
        let xp = Tensor::from_fn(x.shape(), |i| x.data()[i - i % c + perm[i % c]]);
        let y = model.predict(&x, None, 2).unwrap();
        let yp = model.predict(&xp, None, 2).unwrap();
        let expected = Tensor::from_fn(y.shape(), |i| y.data()[i - i % c + perm[i % c]]);
        prop_assert_eq!(yp, expected);
    }
}

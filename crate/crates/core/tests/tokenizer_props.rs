mod common;

use plotfuse_core::tensor::Tensor;
use plotfuse_core::tokenizer::*;
use proptest::prelude::*;

fn padded(x: &Tensor, target: usize) -> Tensor {
    let (b, l, c) = (x.dim(0), x.dim(1), x.dim(2));
    Tensor::from_fn(&[b, target, c], |i| {
        let (bi, t, ci) = (i / (target * c), (i / c) % target, i % c);
        x.at(&[bi, t.min(l - 1), ci])
    })
}

proptest! {
    #[test]
    fn mixed_patches_partition_padded_input(seed in 0u64..10_000, b in 1usize..4, l in 2usize..80, c in 1usize..6, r_frac in 0.0f64..1.0) {
        let r = 1 + ((l - 1) as f64 * r_frac) as usize;
        let x = common::random_tensor(seed, &[b, l, c]);
        let (xn, _) = revin_fit_transform(&x).unwrap();
        let cfg = TokenizerConfig { r, patch_mode: PatchMode::Mixed, d: 4 };
        let p = patchify(&xn, &cfg).unwrap();
        prop_assert_eq!(p.dim(1), r);
        let back = unpatchify_mixed(&p, c).unwrap();
        prop_assert_eq!(back, padded(&xn, r * cfg.patch_len(l).unwrap()));
    }

    #[test]
    fn channel_permutation_permutes_row_blocks(seed in 0u64..10_000, b in 1usize..4, l in 2usize..50, c in 2usize..6, r in 1usize..8, rot in 1usize..5) {
        let r = r.min(l);
        let x = common::random_tensor(seed, &[b, l, c]);
        let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
        let xp = Tensor::from_fn(&[b, l, c], |i| x.data()[i - i % c + perm[i % c]]);
        let cfg = TokenizerConfig { r, patch_mode: PatchMode::ChannelIndependent, d: 4 };
        let p = patchify(&x, &cfg).unwrap();
        let pp = patchify(&xp, &cfg).unwrap();
        for bi in 0..b {
            for (ci, &pc) in perm.iter().enumerate() {
                prop_assert_eq!(pp.row(bi * c + ci), p.row(bi * c + pc));
            }
        }
    }

    #[test]
    fn revin_inverts(seed in 0u64..10_000, b in 1usize..5, l in 2usize..64, c in 1usize..8, scale in -3.0f64..3.0, offset in -1e3f64..1e3) {
        let x = common::random_tensor(seed, &[b, l, c]).map(|v| offset + 10f64.powf(scale) * v);
        let (xn, stats) = revin_fit_transform(&x).unwrap();
        prop_assert!(revin_invert(&xn, &stats).unwrap().max_abs_diff(&x) < 1e-5);
    }
}

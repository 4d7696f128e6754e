//! Tiled kernels and the recurrent form checked against the dense reference
//! over random shapes.

use proptest::prelude::*;
use stickbreaking::blocked::{
    blocked_backward_fused, blocked_backward_twophase, blocked_forward, plan_blocks, ForwardOptions,
};
use stickbreaking::numerics::{Matrix, Rng};
use stickbreaking::reference::{sb_backward, sb_forward, sb_recurrent};
use stickbreaking::Exec;

fn qkv(n: usize, d: usize, seed: u64, spread: f64) -> (Matrix, Matrix, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    (
        rng.normal_matrix(n, d, spread),
        rng.normal_matrix(n, d, spread),
        rng.normal_matrix(n, d, 1.0),
        rng.normal_matrix(n, d, 1.0),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocked_matches_reference(n in 1usize..90, d in 1usize..9, block in 1usize..33, seed in any::<u64>(), spread in 0.1f64..3.0) {
        let (q, k, v, d_o) = qkv(n, d, seed, spread);
        let (o_ref, cache) = sb_forward(&q, &k, &v).unwrap();
        let g_ref = sb_backward(&cache, &d_o).unwrap();
        let layout = plan_blocks(n, block).unwrap();
        let fwd = blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default().with_skip(false).two_phase()).unwrap();
        prop_assert!(fwd.o.max_abs_diff(&o_ref) < 1e-10);
        let fused = blocked_backward_fused(&fwd.cache, &d_o, Exec::Sequential).unwrap();
        let two = blocked_backward_twophase(&fwd.cache, &d_o, None, Exec::Sequential).unwrap().grads;
        for (a, b) in [(&fused.d_q, &g_ref.d_q), (&fused.d_k, &g_ref.d_k), (&fused.d_v, &g_ref.d_v)] {
            prop_assert!(a.max_abs_diff(b) < 1e-9);
        }
        for (a, b) in [(&two.d_q, &fused.d_q), (&two.d_k, &fused.d_k), (&two.d_v, &fused.d_v)] {
            prop_assert!(a.max_abs_diff(b) < 1e-10);
        }
    }

    #[test]
    fn recurrent_matches_forward(n in 1usize..48, d in 1usize..8, seed in any::<u64>()) {
        let (q, k, v, _) = qkv(n, d, seed, 1.0);
        let (o, _) = sb_forward(&q, &k, &v).unwrap();
        prop_assert!(sb_recurrent(&q, &k, &v).unwrap().max_abs_diff(&o) < 1e-12);
    }

    #[test]
    fn attention_never_exceeds_the_stick(n in 2usize..64, d in 1usize..8, seed in any::<u64>(), spread in 0.1f64..6.0) {
        let (q, k, v, _) = qkv(n, d, seed, spread);
        let (_, cache) = sb_forward(&q, &k, &v).unwrap();
        for (j, m) in cache.remaining_mass().iter().enumerate() {
            let sum: f64 = (0..n).map(|i| cache.weights.a[(i, j)]).sum();
            prop_assert!(sum <= 1.0 + 1e-9, "query {} sum {:e}", j, sum - 1.0);
            prop_assert!((sum + m - 1.0).abs() < 1e-6, "query {} sum {} mass {}", j, sum, m);
        }
    }

    #[test]
    fn worker_count_does_not_change_bits(n in 1usize..120, block in 4usize..24, threads in 2usize..6, seed in any::<u64>()) {
        let (q, k, v, d_o) = qkv(n, 4, seed, 1.5);
        let layout = plan_blocks(n, block).unwrap();
        let run = |exec: Exec| {
            let f = blocked_forward(&q, &k, &v, &layout, &ForwardOptions::default().with_exec(exec)).unwrap();
            let g = blocked_backward_fused(&f.cache, &d_o, exec).unwrap();
            (f.o, g.d_q, g.d_k, g.d_v)
        };
        prop_assert_eq!(run(Exec::Sequential), run(Exec::Parallel { threads }));
    }
}

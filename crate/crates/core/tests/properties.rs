use paraformer::checkpoint::{from_bytes, to_bytes};
use paraformer::lifecycle::{compress_keep_prefix, expand_add_branch};
use paraformer::model::{ModelConfig, ParaFormerModel};
use paraformer::runtime::{PoolConfig, WorkerPool};
use paraformer::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_model(n: usize, layers: usize, heads: usize, seed: u64) -> ParaFormerModel<f64> {
    let width = 2 * heads;
    let cfg = ModelConfig {
        n_branches: n,
        layers_per_branch: layers,
        width,
        heads,
        ffn_width: 5,
        patch_size: 2,
        image_height: 4,
        image_width: 2,
        image_channels: 1,
        n_classes: 3,
        seed,
        ..ModelConfig::default()
    };
    let mut m = ParaFormerModel::<f64>::init(cfg).unwrap();
    // Non-zero aggregator so every branch contributes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
    for a in &mut m.agg.per_branch {
        *a = Tensor::randn(&[width, 3], 1.0, &mut rng);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stage_logits_are_prefix_sums(n in 1usize..5, layers in 1usize..3, heads in 1usize..3, seed in 0u64..1000, b in 1usize..4) {
        let m = random_model(n, layers, heads, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::<f64>::randn(&[b * m.tokens(), m.config.width], 1.0, &mut rng);
        let stages = m.forward_all_stages(&x0).unwrap();
        prop_assert_eq!(stages.len(), n);
        for k in 1..=n {
            let term = m.branch_term(&x0, k - 1).unwrap();
            let expected = if k == 1 {
                term.add_row(&m.agg.bias).unwrap()
            } else {
                stages[k - 2].add(&term).unwrap()
            };
            prop_assert!(stages[k - 1].bitwise_eq(&expected));
            prop_assert!(compress_keep_prefix(&m, k).unwrap().predict(&x0).unwrap().bitwise_eq(&stages[k - 1]));
        }
    }

    #[test]
    fn pool_and_expansion_preserve_predictions(n in 1usize..5, workers in 1usize..6, seed in 0u64..1000) {
        let m = random_model(n, 1, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::<f64>::randn(&[2 * m.tokens(), m.config.width], 1.0, &mut rng);
        let seq = m.predict(&x0).unwrap();
        let mut pool = WorkerPool::<f64>::new(PoolConfig::new(workers, 4)).unwrap();
        prop_assert!(pool.parallel_predict(&x0, &m).unwrap().bitwise_eq(&seq));
        let e = expand_add_branch(&m, seed, seed % 2 == 0).unwrap();
        prop_assert!(e.predict(&x0).unwrap().bitwise_eq(&seq));
    }

    #[test]
    fn checkpoint_round_trip(n in 1usize..4, layers in 1usize..3, seed in 0u64..1000, frozen in 0usize..4) {
        let mut m = random_model(n, layers, 1, seed);
        m.frozen_prefix = frozen.min(n);
        let back = from_bytes::<f64>(&to_bytes(&m)).unwrap();
        prop_assert_eq!(&back.config, &m.config);
        prop_assert_eq!(back.frozen_prefix, m.frozen_prefix);
        for ((na, ta), (nb, tb)) in m.named_params().iter().zip(&back.named_params()) {
            prop_assert_eq!(na, nb);
            prop_assert!(ta.bitwise_eq(tb));
        }
    }
}

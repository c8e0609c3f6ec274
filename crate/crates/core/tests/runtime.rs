use paraformer::data::synth_clusters;
use paraformer::layer::LayerWeights;
use paraformer::model::{ModelConfig, ParaFormerModel};
use paraformer::runtime::{bench_inference, Pinning, PoolConfig, WorkerPool};
use paraformer::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(n: usize) -> ParaFormerModel<f32> {
    let cfg = ModelConfig {
        n_branches: n,
        layers_per_branch: 2,
        width: 8,
        heads: 2,
        ffn_width: 16,
        patch_size: 2,
        image_height: 4,
        image_width: 4,
        image_channels: 1,
        n_classes: 3,
        seed: 1,
        ..ModelConfig::default()
    };
    let mut m = ParaFormerModel::<f32>::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in &mut m.branches {
        for l in &mut b.layers {
            *l = LayerWeights::random(8, 2, 16, 0.3, &mut rng).unwrap();
        }
    }
    for a in &mut m.agg.per_branch {
        *a = Tensor::randn(&[8, 3], 0.5, &mut rng);
    }
    m
}

#[test]
fn parallel_predict_is_bitwise_sequential() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for w in [1, 2, 3, 4, 6] {
        let mut pool = WorkerPool::<f32>::new(PoolConfig::new(w, 8)).unwrap();
        for _ in 0..10 {
            let x0 = Tensor::<f32>::randn(&[3 * 4, 8], 1.0, &mut rng);
            let seq = m.predict(&x0).unwrap();
            assert!(pool.parallel_predict(&x0, &m).unwrap().bitwise_eq(&seq), "W={w}");
        }
    }
}

#[test]
fn branches_are_spread_round_robin_without_worker_traffic() {
    let m = model(5);
    let x0 = Tensor::<f32>::full(&[4, 8], 0.5);
    let mut pool = WorkerPool::<f32>::new(PoolConfig::new(2, 8)).unwrap();
    pool.parallel_predict(&x0, &m).unwrap();
    let t = pool.last_traffic();
    assert_eq!(t.inter_worker, 0);
    assert_eq!((t.dispatches, t.replies), (2, 2));
    assert_eq!(t.branch_worker, vec![0, 1, 0, 1, 0]);

    // More workers than branches: only N are used.
    let mut pool = WorkerPool::<f32>::new(PoolConfig::new(8, 8)).unwrap();
    pool.parallel_predict(&x0, &m).unwrap();
    assert_eq!(pool.last_traffic().dispatches, 5);
    assert_eq!(pool.last_traffic().branch_worker, vec![0, 1, 2, 3, 4]);
}

#[test]
fn single_branch_is_evaluated_once() {
    let m = model(1);
    let x0 = Tensor::<f32>::full(&[4, 8], 0.25);
    for w in [1, 3] {
        m.reset_eval_counts();
        let mut pool = WorkerPool::<f32>::new(PoolConfig::new(w, 8)).unwrap();
        let out = pool.parallel_predict(&x0, &m).unwrap();
        assert!(out.bitwise_eq(&m.predict(&x0).unwrap()));
        assert_eq!(m.eval_counts(), vec![2]);
    }
}

#[test]
fn shutdown_turns_calls_into_runtime_errors() {
    let m = model(3);
    let x0 = Tensor::<f32>::full(&[4, 8], 0.5);
    let mut pool = WorkerPool::<f32>::new(PoolConfig::new(2, 8)).unwrap();
    pool.parallel_predict(&x0, &m).unwrap();
    let before = pool.last_traffic().clone();
    pool.request_shutdown();
    assert!(pool.is_shut_down());
    assert!(matches!(pool.parallel_predict(&x0, &m), Err(Error::Runtime(_))));
    assert_eq!(pool.last_traffic(), &before);
}

#[test]
fn bad_input_shape_is_rejected() {
    let m = model(2);
    let mut pool = WorkerPool::<f32>::new(PoolConfig::new(2, 8)).unwrap();
    let x0 = Tensor::<f32>::full(&[5, 8], 0.5);
    assert!(matches!(pool.parallel_predict(&x0, &m), Err(Error::Shape { .. })));
    assert!(matches!(WorkerPool::<f32>::new(PoolConfig::new(0, 8)), Err(Error::Config(_))));
}

#[test]
fn pinned_pool_still_matches() {
    let m = model(2);
    let x0 = Tensor::<f32>::full(&[8, 8], 0.1);
    let cfg = PoolConfig {
        pinning: Pinning::RoundRobin,
        ..PoolConfig::new(2, 8)
    };
    let mut pool = WorkerPool::<f32>::new(cfg).unwrap();
    assert!(pool.parallel_predict(&x0, &m).unwrap().bitwise_eq(&m.predict(&x0).unwrap()));
}

#[test]
fn bench_reports_baseline_and_each_config() {
    let m = model(2);
    let data = synth_clusters(1, 3, 20, (4, 4, 1), 0.1).unwrap();
    let reports = bench_inference(&m, &data, &[PoolConfig::new(1, 8), PoolConfig::new(2, 8)]).unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[0].workers, 1);
    assert_eq!(reports[0].speedup, 1.0);
    for r in &reports {
        assert!(r.outputs_match);
        assert_eq!(r.times_ms.len(), 5);
        assert_eq!(r.per_branch_ms.len(), 2);
        assert!(r.median_ms > 0.0 && r.speedup > 0.0);
        assert_eq!(r.samples, 20);
    }
    let empty = data.take(0);
    assert!(matches!(bench_inference(&m, &empty, &[]), Err(Error::Data(_))));
}

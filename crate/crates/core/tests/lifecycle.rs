use paraformer::checkpoint::{self, from_bytes, to_bytes};
use paraformer::data::{synth_clusters_stream, Split};
use paraformer::layer::LayerWeights;
use paraformer::lifecycle::{compress_keep_prefix, compression_ratio, expand_add_branch, expand_and_finetune};
use paraformer::model::{ModelConfig, ParaFormerModel};
use paraformer::optim::AdamConfig;
use paraformer::trainer::{Schedule, TrainConfig};
use paraformer::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(n: usize) -> ModelConfig {
    ModelConfig {
        n_branches: n,
        layers_per_branch: 1,
        width: 8,
        heads: 2,
        ffn_width: 16,
        patch_size: 2,
        image_height: 4,
        image_width: 4,
        image_channels: 1,
        n_classes: 3,
        seed: 4,
        ..ModelConfig::default()
    }
}

fn random_model(n: usize) -> ParaFormerModel<f32> {
    let mut m = ParaFormerModel::<f32>::init(config(n)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for b in &mut m.branches {
        b.layers[0] = LayerWeights::random(8, 2, 16, 0.3, &mut rng).unwrap();
    }
    for a in &mut m.agg.per_branch {
        *a = Tensor::randn(&[8, 3], 0.5, &mut rng);
    }
    m.agg.bias = Tensor::randn(&[3], 0.5, &mut rng);
    m
}

fn same_params(a: &ParaFormerModel<f32>, b: &ParaFormerModel<f32>) -> bool {
    let (pa, pb) = (a.named_params(), b.named_params());
    pa.len() == pb.len() && pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
}

#[test]
fn compression_equals_stage_prefix() {
    let m = random_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=4 {
        let c = compress_keep_prefix(&m, k).unwrap();
        assert_eq!(c.n_branches(), k);
        for _ in 0..5 {
            let x0 = Tensor::<f32>::randn(&[2 * 4, 8], 1.0, &mut rng);
            assert!(c.predict(&x0).unwrap().bitwise_eq(&m.forward_stage(&x0, k).unwrap()));
        }
    }
    assert!(same_params(&compress_keep_prefix(&m, 4).unwrap(), &m));
    assert!(matches!(compress_keep_prefix(&m, 0), Err(Error::Stage { .. })));
    assert!(matches!(compress_keep_prefix(&m, 5), Err(Error::Stage { .. })));
    assert_eq!(compression_ratio(6, 2), 3.0);
}

#[test]
fn expansion_is_neutral_until_trained() {
    let m = random_model(2);
    let e = expand_add_branch(&m, 77, false).unwrap();
    assert_eq!(e.n_branches(), 3);
    assert_eq!(e.frozen_prefix, 0);
    assert!(e.agg.per_branch[2].data().iter().all(|&v| v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let x0 = Tensor::<f32>::randn(&[4, 8], 1.0, &mut rng);
        assert!(e.predict(&x0).unwrap().bitwise_eq(&m.predict(&x0).unwrap()));
    }
    let f = expand_add_branch(&m, 77, true).unwrap();
    assert_eq!(f.frozen_prefix, 2);
    // Same seed, same new branch.
    assert_eq!(e.branch_checksum(2), f.branch_checksum(2));
}

fn shards() -> (paraformer::data::Dataset, paraformer::data::Dataset) {
    let old = synth_clusters_stream(3, 0, 3, 48, (4, 4, 1), 0.2, Split::Train).unwrap();
    let new = synth_clusters_stream(3, 2, 3, 48, (4, 4, 1), 0.2, Split::Train).unwrap();
    (old, new)
}

fn finetune_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        optimizer: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        schedule: Schedule::Progressive,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_expansion_keeps_existing_parameters() {
    let m = random_model(2);
    let (old, new) = shards();
    let (e, metrics, report) = expand_and_finetune(&m, &old, &new, &finetune_cfg(), 5, true).unwrap();
    assert_eq!(metrics.len(), 5 * 3);
    let before: Vec<_> = m.named_params();
    let after: std::collections::HashMap<_, _> = e.named_params().into_iter().collect();
    for (name, t) in &before {
        assert!(after[name].bitwise_eq(t), "{name} changed");
    }
    assert_ne!(e.branch_checksum(2), expand_add_branch(&m, 5, true).unwrap().branch_checksum(2));
    assert_eq!(report.before.len(), 2);
    assert_eq!(report.after.len(), 3);
    assert!(report.render().lines().count() >= 5);
}

#[test]
fn unfrozen_expansion_trains_everything() {
    let m = random_model(2);
    let (old, new) = shards();
    let (e, _, report) = expand_and_finetune(&m, &old, &new, &finetune_cfg(), 5, false).unwrap();
    assert_ne!(e.branch_checksum(0), m.branch_checksum(0));
    assert!(!report.frozen);
    let (b, a) = report.full_model_accuracy();
    assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&a));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut m = random_model(3);
    m.frozen_prefix = 1;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.frozen_prefix, 1);
    assert!(same_params(&back, &m));

    let m64 = ParaFormerModel::<f64>::init(config(2)).unwrap();
    let back64 = from_bytes::<f64>(&to_bytes(&m64)).unwrap();
    assert_eq!(back64.named_params().len(), m64.named_params().len());
    assert!(matches!(from_bytes::<f32>(&to_bytes(&m64)), Err(Error::Schema(_))));
}

#[test]
fn header_layout() {
    let m = random_model(1);
    let b = to_bytes(&m);
    assert_eq!(&b[..4], b"PFCK");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    let cfg_len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&b[16..16 + cfg_len]).unwrap();
    assert!(text.contains("n_branches=1\n"));
    assert!(text.contains("frozen_branches=0\n"));
    let count = u64::from_le_bytes(b[16 + cfg_len..24 + cfg_len].try_into().unwrap()) as usize;
    assert_eq!(count, m.named_params().len());
    let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&b[..b.len() - 4]));
}

fn reseal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let b = to_bytes(&random_model(2));
    let body = b[..b.len() - 4].to_vec();

    for pos in [20, b.len() / 2, b.len() - 5] {
        let mut flipped = b.clone();
        flipped[pos] ^= 0x40;
        assert!(matches!(from_bytes::<f32>(&flipped), Err(Error::Integrity { .. })), "byte {pos}");
    }

    for len in [0, 3, 7, 11, 40, b.len() / 2, b.len() - 1] {
        let r = from_bytes::<f32>(&b[..len]);
        assert!(
            matches!(r, Err(Error::Integrity { .. }) | Err(Error::Schema(_))),
            "truncated to {len}: {r:?}"
        );
    }

    let mut bad_magic = b.clone();
    bad_magic[0] = b'X';
    assert!(matches!(from_bytes::<f32>(&bad_magic), Err(Error::Format(_))));

    let mut v2 = body.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        from_bytes::<f32>(&reseal(v2)),
        Err(Error::Version { found: 2, expected: 1 })
    ));

    // Claim a third branch whose tensors are absent.
    let text_at = body.windows(12).position(|w| w == b"n_branches=2").unwrap();
    let mut missing = body.clone();
    missing[text_at + 11] = b'3';
    let r = from_bytes::<f32>(&reseal(missing));
    assert!(matches!(&r, Err(Error::Schema(msg)) if msg.contains("missing")), "{r:?}");

    // Claim one branch; the second branch's tensors are then unexpected.
    let mut extra = body.clone();
    extra[text_at + 11] = b'1';
    let r = from_bytes::<f32>(&reseal(extra));
    assert!(matches!(&r, Err(Error::Schema(msg)) if msg.contains("unexpected")), "{r:?}");

    let mut trailing = body;
    trailing.push(0);
    assert!(matches!(from_bytes::<f32>(&reseal(trailing)), Err(Error::Schema(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let r = checkpoint::load::<f32>(std::path::Path::new("/nonexistent/x.ckpt"));
    assert!(matches!(r, Err(Error::Io { .. })));
}

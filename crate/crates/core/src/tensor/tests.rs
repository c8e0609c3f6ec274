use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(&[r, c], -1.0, 1.0, rng)
}

#[test]
fn new_rejects_bad_shapes() {
    assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
}

#[test]
fn matmul_identity() {
    let i2 = Tensor::<f64>::eye(2);
    assert_eq!(i2.matmul(&i2).unwrap(), i2);
}

#[test]
fn matmul_hand_checked() {
    let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = Tensor::<f64>::from_rows(&[&[1.0], &[1.0]]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_mat(3, 4, &mut rng);
    let b = rand_mat(4, 2, &mut rng);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0;
            for p in 0..4 {
                acc += a.at(i, p) * b.at(p, j);
            }
            assert!((c.at(i, j) - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
}

#[test]
fn softmax_symmetric_and_stable() {
    let s = Tensor::<f64>::from_rows(&[&[0.0, 0.0]]).softmax_rows().unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = Tensor::<f64>::from_rows(&[&[1000.0, 1000.0]]).softmax_rows().unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_matches_direct_formula() {
    let s = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]).softmax_rows().unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (j, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((s.data()[j] - v.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn kron_cases() {
    let i2 = Tensor::<f64>::eye(2);
    assert_eq!(i2.kron(&i2).unwrap(), Tensor::eye(4));

    let b = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 4.0, -1.0]]);
    let two = Tensor::<f64>::from_rows(&[&[2.0]]);
    assert_eq!(two.kron(&b).unwrap(), b.scale(2.0));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_mat(2, 2, &mut rng);
    let b = rand_mat(2, 3, &mut rng);
    let k = a.kron(&b).unwrap();
    assert_eq!(k.shape(), &[4, 6]);
    for i in 0..2 {
        for j in 0..2 {
            for r in 0..2 {
                for s in 0..3 {
                    assert_eq!(k.at(i * 2 + r, j * 3 + s), a.at(i, j) * b.at(r, s));
                }
            }
        }
    }
}

#[test]
fn kron_rejects_non_matrix() {
    let v = Tensor::<f64>::zeros(&[3]);
    assert!(matches!(v.kron(&v), Err(Error::Rank { .. })));
}

#[test]
fn vec_cols_definition() {
    let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(a.vec_cols().unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    let col = Tensor::<f64>::from_rows(&[&[1.0], &[2.0], &[3.0]]);
    assert_eq!(col.vec_cols().unwrap().data(), col.data());
    assert_eq!(a.vec_cols().unwrap().unvec_cols(2, 2).unwrap(), a);
}

#[test]
fn vec_kron_identity_twenty_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for t in 0..20 {
        let (m, n, p, q) = (1 + t % 3, 2 + t % 2, 1 + (t / 3) % 3, 2);
        let a = rand_mat(m, n, &mut rng);
        let x = rand_mat(n, p, &mut rng);
        let b = rand_mat(p, q, &mut rng);
        let lhs = a.matmul(&x).unwrap().matmul(&b).unwrap().vec_cols().unwrap();
        let rhs = b
            .transpose()
            .unwrap()
            .kron(&a)
            .unwrap()
            .matmul(&x.vec_cols().unwrap().as_column().unwrap())
            .unwrap()
            .reshape(&[m * q])
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }
}

#[test]
fn segment_ops_match_per_block_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_mat(6, 4, &mut rng);
    let k = rand_mat(6, 4, &mut rng);
    let v = rand_mat(6, 2, &mut rng);
    let s = q.segment_matmul_nt(&k, 3).unwrap();
    let o = s.segment_matmul(&v, 3).unwrap();
    let mean = o.segment_mean_rows(3).unwrap();
    for blk in 0..2 {
        let qb = q.slice_rows(blk * 3, 3).unwrap();
        let kb = k.slice_rows(blk * 3, 3).unwrap();
        let vb = v.slice_rows(blk * 3, 3).unwrap();
        let sb = qb.matmul(&kb.transpose().unwrap()).unwrap();
        assert!(s.slice_rows(blk * 3, 3).unwrap().max_abs_diff(&sb).unwrap() < 1e-14);
        let ob = sb.matmul(&vb).unwrap();
        assert!(o.slice_rows(blk * 3, 3).unwrap().max_abs_diff(&ob).unwrap() < 1e-14);
        let mb = ob.mean_rows().unwrap();
        assert!(mean.slice_rows(blk, 1).unwrap().max_abs_diff(&mb).unwrap() < 1e-14);
    }
}

#[test]
fn concat_and_slice_cols_invert() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_mat(3, 2, &mut rng);
    let b = rand_mat(3, 5, &mut rng);
    let c = Tensor::concat_cols(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(c.slice_cols(0, 2).unwrap(), a);
    assert_eq!(c.slice_cols(2, 5).unwrap(), b);
}

#[test]
fn cross_entropy_uniform_logits() {
    let logits = Tensor::<f64>::zeros(&[3, 4]);
    let (loss, _) = logits.cross_entropy(&[0, 1, 3]).unwrap();
    assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    assert!(logits.cross_entropy(&[0, 1, 4]).is_err());
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_mat(7, 5, &mut rng);
    let b = rand_mat(5, 3, &mut rng);
    let x = a.matmul(&b).unwrap().gelu().softmax_rows().unwrap();
    let y = a.matmul(&b).unwrap().gelu().softmax_rows().unwrap();
    assert!(x.bitwise_eq(&y));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-500.0f64..500.0, 1..40), cols in 1usize..8) {
        let rows = vals.len().div_ceil(cols);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.0);
        let s = Tensor::<f64>::matrix(rows, cols, data).unwrap().softmax_rows().unwrap();
        for row in s.data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_rows_standardizes(vals in prop::collection::vec(-10.0f64..10.0, 8)) {
        let t = Tensor::<f64>::matrix(2, 4, vals).unwrap().layer_norm_rows().unwrap();
        for row in t.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}

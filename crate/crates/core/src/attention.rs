//! Multi-head self-attention and its closed-form linear operator.
//!
//! For a token matrix `X` (`m × D`) the attention block computes
//! `[‖ⱼ Hⱼ X W^Vⱼ] W^O + X` with `Hⱼ = softmax(X W^Qⱼ (X W^Kⱼ)ᵀ / √d)`.
//! Holding the `Hⱼ` fixed, the residual-free part is linear in `vec(X)`
//! (column-major) with matrix
//! `W^S = (W^Oᵀ ⊗ I_m) · [‖ⱼ (W^Vⱼ ⊗ Hⱼᵀ)]ᵀ`.
//! [`closedform_ws`] materializes that matrix so the two routes can be
//! compared; it is never used on the training path.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::Ops;
use crate::tensor::{Scalar, Tensor};

/// Largest `m·D` for which [`closedform_ws`] will build the dense `(mD)²` matrix.
pub const WS_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<V> {
    pub w_q: V,
    pub w_k: V,
    pub w_v: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlockWeights<V> {
    pub heads: Vec<HeadWeights<V>>,
    pub w_o: V,
}

impl<V> HeadWeights<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> HeadWeights<U> {
        HeadWeights {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
        }
    }
}

impl<V> AttnBlockWeights<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> AttnBlockWeights<U> {
        AttnBlockWeights {
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
            w_o: f(&self.w_o),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        for (j, h) in self.heads.iter().enumerate() {
            f(format!("{prefix}.head{j}.w_q"), &h.w_q);
            f(format!("{prefix}.head{j}.w_k"), &h.w_k);
            f(format!("{prefix}.head{j}.w_v"), &h.w_v);
        }
        f(format!("{prefix}.w_o"), &self.w_o);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        for (j, h) in self.heads.iter_mut().enumerate() {
            f(format!("{prefix}.head{j}.w_q"), &mut h.w_q);
            f(format!("{prefix}.head{j}.w_k"), &mut h.w_k);
            f(format!("{prefix}.head{j}.w_v"), &mut h.w_v);
        }
        f(format!("{prefix}.w_o"), &mut self.w_o);
    }
}

impl<T: Scalar> AttnBlockWeights<Tensor<T>> {
    /// Even split of width `d_model` over `heads`, entries from `init`.
    pub fn build(
        d_model: usize,
        heads: usize,
        mut init: impl FnMut(&[usize]) -> Tensor<T>,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {d_model} is not divisible by {heads} heads"
            )));
        }
        let d = d_model / heads;
        let heads = (0..heads)
            .map(|_| HeadWeights {
                w_q: init(&[d_model, d]),
                w_k: init(&[d_model, d]),
                w_v: init(&[d_model, d]),
            })
            .collect();
        Ok(AttnBlockWeights {
            heads,
            w_o: init(&[d_model, d_model]),
        })
    }

    pub fn zeros(d_model: usize, heads: usize) -> Result<Self> {
        Self::build(d_model, heads, |s| Tensor::zeros(s))
    }

    pub fn random<R: Rng>(d_model: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        Self::build(d_model, heads, |s| Tensor::randn(s, std, rng))
    }

    /// Checks the shape contract against model width `d_model`.
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::Config("attention block needs at least one head".into()))?;
        let d = first.w_q.cols();
        let mut concat = 0;
        for h in &self.heads {
            for w in [&h.w_q, &h.w_k] {
                if w.shape() != [d_model, d] {
                    return Err(Error::shape("attention q/k", w.shape(), &[d_model, d]));
                }
            }
            if h.w_v.rank() != 2 || h.w_v.rows() != d_model {
                return Err(Error::shape("attention v", h.w_v.shape(), &[d_model]));
            }
            concat += h.w_v.cols();
        }
        if self.w_o.shape() != [concat, d_model] {
            return Err(Error::shape("attention w_o", self.w_o.shape(), &[concat, d_model]));
        }
        Ok(())
    }
}

/// Residual-free multi-head attention over a stack of samples of `tokens`
/// rows each: `[‖ⱼ Hⱼ X W^Vⱼ] W^O`.
pub(crate) fn attention_delta<T: Scalar, V: Ops<T>>(
    x: &V,
    w: &AttnBlockWeights<V>,
    tokens: usize,
) -> Result<V> {
    let mut outs = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let d = head.w_q.to_tensor().cols();
        let q = x.matmul(&head.w_q)?;
        let k = x.matmul(&head.w_k)?;
        let v = x.matmul(&head.w_v)?;
        let probs = q
            .segment_matmul_nt(&k, tokens)?
            .scale(T::of(1.0 / (d as f64).sqrt()))
            .softmax_rows()?;
        outs.push(probs.segment_matmul(&v, tokens)?);
    }
    let cat = if outs.len() == 1 {
        outs.pop().expect("one head")
    } else {
        V::concat_cols(&outs)?
    };
    cat.matmul(&w.w_o)
}

/// `H = softmax(Q·Kᵀ/√d)` for one head, `Q = x·w_q`, `K = x·w_k`.
pub fn head_attention_matrix<T: Scalar>(x: &Tensor<T>, head: &HeadWeights<Tensor<T>>) -> Result<Tensor<T>> {
    let (m, _) = x.dims2("head_attention_matrix")?;
    let d = head.w_q.cols();
    let q = x.matmul(&head.w_q)?;
    let k = x.matmul(&head.w_k)?;
    q.segment_matmul_nt(&k, m)?
        .scale(T::of(1.0 / (d as f64).sqrt()))
        .softmax_rows()
}

/// Multi-head attention with its residual, for a single `m × D` token matrix.
pub fn mha_forward<T: Scalar>(x: &Tensor<T>, w: &AttnBlockWeights<Tensor<T>>) -> Result<Tensor<T>> {
    let (m, _) = x.dims2("mha_forward")?;
    mha_forward_batched(x, w, m)
}

/// Multi-head attention with residual over `x` holding consecutive samples
/// of `tokens` rows each. Attention never crosses a sample boundary.
pub fn mha_forward_batched<T: Scalar>(
    x: &Tensor<T>,
    w: &AttnBlockWeights<Tensor<T>>,
    tokens: usize,
) -> Result<Tensor<T>> {
    attention_delta(x, w, tokens)?.add(x)
}

/// Materializes `W^S` for token matrix `x` (`m × D`).
pub fn closedform_ws<T: Scalar>(x: &Tensor<T>, w: &AttnBlockWeights<Tensor<T>>) -> Result<Tensor<T>> {
    let (m, d_model) = x.dims2("closedform_ws")?;
    check_cap(m, d_model)?;
    let hs = w
        .heads
        .iter()
        .map(|h| head_attention_matrix(x, h))
        .collect::<Result<Vec<_>>>()?;
    closedform_ws_with_heads(w, &hs)
}

/// Assembles `W^S = (W^Oᵀ ⊗ I) · [‖ⱼ (W^Vⱼ ⊗ Hⱼᵀ)]ᵀ` from explicit per-head
/// attention matrices.
pub fn closedform_ws_with_heads<T: Scalar>(
    w: &AttnBlockWeights<Tensor<T>>,
    attn: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if attn.len() != w.heads.len() {
        return Err(Error::shape(
            "closedform_ws heads",
            &[attn.len()],
            &[w.heads.len()],
        ));
    }
    let (m, m2) = attn[0].dims2("closedform_ws")?;
    if m != m2 {
        return Err(Error::shape("closedform_ws attention", attn[0].shape(), &[m, m]));
    }
    check_cap(m, w.w_o.cols())?;
    let blocks = w
        .heads
        .iter()
        .zip(attn)
        .map(|(head, h)| head.w_v.kron(&h.transpose()?))
        .collect::<Result<Vec<_>>>()?;
    let stacked = Tensor::concat_cols(&blocks)?.transpose()?;
    w.w_o.transpose()?.kron(&Tensor::eye(m))?.matmul(&stacked)
}

fn check_cap(m: usize, d_model: usize) -> Result<()> {
    if m * d_model > WS_CAP {
        return Err(Error::Size(format!(
            "closed-form operator needs m·D = {} ≤ {WS_CAP}; use smaller token count or width",
            m * d_model
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub max_abs_err: f64,
    pub pass: bool,
}

pub const EQUIVALENCE_TOL: f64 = 1e-8;

/// Draws `x` and attention weights from `seed` and compares
/// `vec(mha_forward(x))` against `W^S·vec(x) + vec(x)` at f64.
pub fn verify_equivalence(seed: u64, tokens: usize, width: usize, heads: usize) -> Result<EquivalenceReport> {
    if tokens == 0 || width == 0 {
        return Err(Error::Config("tokens and width must be positive".into()));
    }
    check_cap(tokens, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = AttnBlockWeights::<Tensor<f64>>::random(width, heads, 0.5, &mut rng)?;
    let x = Tensor::<f64>::randn(&[tokens, width], 1.0, &mut rng);
    let max_abs_err = equivalence_error(&x, &w)?;
    Ok(EquivalenceReport {
        tokens,
        width,
        heads,
        max_abs_err,
        pass: max_abs_err < EQUIVALENCE_TOL,
    })
}

/// `max |vec(mha_forward(x)) − (W^S·vec(x) + vec(x))|`.
pub fn equivalence_error(x: &Tensor<f64>, w: &AttnBlockWeights<Tensor<f64>>) -> Result<f64> {
    let (m, d_model) = x.dims2("equivalence_error")?;
    let direct = mha_forward(x, w)?.vec_cols()?;
    let vx = x.vec_cols()?;
    let ws = closedform_ws(x, w)?;
    let closed = ws
        .matmul(&vx.as_column()?)?
        .reshape(&[m * d_model])?
        .add(&vx)?;
    direct.max_abs_diff(&closed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent per-element loop evaluation of one head's attention matrix.
    fn h_oracle(x: &Tensor<f64>, head: &HeadWeights<Tensor<f64>>) -> Vec<Vec<f64>> {
        let (m, dm) = (x.rows(), x.cols());
        let d = head.w_q.cols();
        let proj = |w: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..m)
                .map(|i| {
                    (0..w.cols())
                        .map(|c| (0..dm).map(|p| x.at(i, p) * w.at(p, c)).sum())
                        .collect()
                })
                .collect()
        };
        let q = proj(&head.w_q);
        let k = proj(&head.w_k);
        (0..m)
            .map(|i| {
                let logits: Vec<f64> = (0..m)
                    .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                logits.iter().map(|l| l.exp() / z).collect()
            })
            .collect()
    }

    /// Loop oracle for the full block: Σⱼ Hⱼ X W^Vⱼ W^Oⱼ + X.
    fn mha_oracle(x: &Tensor<f64>, w: &AttnBlockWeights<Tensor<f64>>) -> Vec<Vec<f64>> {
        let (m, dm) = (x.rows(), x.cols());
        let mut out: Vec<Vec<f64>> = (0..m).map(|i| (0..dm).map(|c| x.at(i, c)).collect()).collect();
        let mut col_offset = 0;
        for head in &w.heads {
            let h = h_oracle(x, head);
            let dv = head.w_v.cols();
            for i in 0..m {
                for c in 0..dm {
                    let mut acc = 0.0;
                    for jv in 0..dv {
                        let mut hv = 0.0;
                        for t in 0..m {
                            let v: f64 = (0..dm).map(|p| x.at(t, p) * head.w_v.at(p, jv)).sum();
                            hv += h[i][t] * v;
                        }
                        acc += hv * w.w_o.at(col_offset + jv, c);
                    }
                    out[i][c] += acc;
                }
            }
            col_offset += dv;
        }
        out
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut r = rng(1);
        let w = AttnBlockWeights::<Tensor<f64>>::random(4, 2, 1.0, &mut r).unwrap();
        let x = Tensor::randn(&[1, 4], 1.0, &mut r);
        let h = head_attention_matrix(&x, &w.heads[0]).unwrap();
        assert_eq!(h.data(), &[1.0]);
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut r = rng(2);
        let mut w = AttnBlockWeights::<Tensor<f64>>::random(4, 1, 1.0, &mut r).unwrap();
        w.heads[0].w_q = Tensor::zeros(&[4, 4]);
        w.heads[0].w_k = Tensor::zeros(&[4, 4]);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let h = head_attention_matrix(&x, &w.heads[0]).unwrap();
        for &v in h.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matrix_matches_formula_oracle() {
        let mut r = rng(3);
        let w = AttnBlockWeights::<Tensor<f64>>::random(4, 2, 0.7, &mut r).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let h = head_attention_matrix(&x, &w.heads[0]).unwrap();
        let want = h_oracle(&x, &w.heads[0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((h.at(i, j) - want[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut r = rng(4);
        let w = AttnBlockWeights::<Tensor<f64>>::random(4, 2, 1.0, &mut r).unwrap();
        let x = Tensor::randn(&[3, 5], 1.0, &mut r);
        assert!(matches!(mha_forward(&x, &w), Err(Error::Shape { .. })));
        assert!(head_attention_matrix(&x, &w.heads[0]).is_err());
    }

    #[test]
    fn head_width_and_output_mismatch_is_shape_error() {
        let mut r = rng(4);
        let mut w = AttnBlockWeights::<Tensor<f64>>::random(4, 2, 1.0, &mut r).unwrap();
        w.w_o = Tensor::zeros(&[3, 4]);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        assert!(matches!(mha_forward(&x, &w), Err(Error::Shape { .. })));
        assert!(w.validate(4).is_err());
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let mut r = rng(5);
        let w = AttnBlockWeights::<Tensor<f64>>::zeros(4, 2).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        assert_eq!(mha_forward(&x, &w).unwrap(), x);
    }

    #[test]
    fn zero_output_projection_is_exact_identity() {
        let mut r = rng(6);
        let mut w = AttnBlockWeights::<Tensor<f64>>::random(6, 3, 1.0, &mut r).unwrap();
        w.w_o = Tensor::zeros(&[6, 6]);
        let x = Tensor::randn(&[4, 6], 1.0, &mut r);
        assert!(mha_forward(&x, &w).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn uniform_attention_with_identity_projections_averages_tokens() {
        let mut r = rng(7);
        let w = AttnBlockWeights {
            heads: vec![HeadWeights {
                w_q: Tensor::zeros(&[3, 3]),
                w_k: Tensor::zeros(&[3, 3]),
                w_v: Tensor::eye(3),
            }],
            w_o: Tensor::eye(3),
        };
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
        let out = mha_forward(&x, &w).unwrap();
        let mean = x.mean_rows().unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((out.at(i, c) - (mean.at(0, c) + x.at(i, c))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mha_matches_loop_oracle() {
        let mut r = rng(8);
        let w = AttnBlockWeights::<Tensor<f64>>::random(4, 2, 0.6, &mut r).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let out = mha_forward(&x, &w).unwrap();
        let want = mha_oracle(&x, &w);
        for i in 0..3 {
            for c in 0..4 {
                assert!((out.at(i, c) - want[i][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batched_equals_per_sample_bitwise() {
        let mut r = rng(9);
        let w = AttnBlockWeights::<Tensor<f64>>::random(4, 2, 0.6, &mut r).unwrap();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[3, 4], 1.0, &mut r);
        let both = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
        let out = mha_forward_batched(&both, &w, 3).unwrap();
        assert!(out.slice_rows(0, 3).unwrap().bitwise_eq(&mha_forward(&a, &w).unwrap()));
        assert!(out.slice_rows(3, 3).unwrap().bitwise_eq(&mha_forward(&b, &w).unwrap()));
    }

    #[test]
    fn delta_attention_with_identities_collapses_to_identity() {
        let w = AttnBlockWeights {
            heads: vec![HeadWeights {
                w_q: Tensor::<f64>::zeros(&[3, 3]),
                w_k: Tensor::zeros(&[3, 3]),
                w_v: Tensor::eye(3),
            }],
            w_o: Tensor::eye(3),
        };
        let ws = closedform_ws_with_heads(&w, &[Tensor::eye(2)]).unwrap();
        assert_eq!(ws, Tensor::eye(6));
    }

    #[test]
    fn zero_output_projection_gives_zero_operator() {
        let mut r = rng(10);
        let mut w = AttnBlockWeights::<Tensor<f64>>::random(2, 2, 1.0, &mut r).unwrap();
        w.w_o = Tensor::zeros(&[2, 2]);
        let x = Tensor::randn(&[3, 2], 1.0, &mut r);
        assert_eq!(closedform_ws(&x, &w).unwrap(), Tensor::zeros(&[6, 6]));
    }

    #[test]
    fn closed_form_matches_direct_small() {
        let mut r = rng(11);
        let w = AttnBlockWeights::<Tensor<f64>>::random(2, 2, 0.8, &mut r).unwrap();
        let x = Tensor::randn(&[2, 2], 1.0, &mut r);
        assert!(equivalence_error(&x, &w).unwrap() < 1e-9);
    }

    #[test]
    fn cap_is_enforced() {
        let x = Tensor::<f64>::zeros(&[65, 64]);
        let w = AttnBlockWeights::<Tensor<f64>>::zeros(64, 2).unwrap();
        assert!(matches!(closedform_ws(&x, &w), Err(Error::Size(_))));
        assert!(matches!(verify_equivalence(0, 65, 64, 2), Err(Error::Size(_))));
    }

    #[test]
    fn verify_equivalence_examples() {
        for (seed, m, d, h) in [(0, 2, 2, 1), (7, 4, 6, 3), (3, 1, 4, 2)] {
            let rep = verify_equivalence(seed, m, d, h).unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }

    #[test]
    fn token_permutation_permutes_output() {
        let mut r = rng(12);
        let w = AttnBlockWeights::<Tensor<f64>>::random(4, 2, 0.6, &mut r).unwrap();
        let x = Tensor::randn(&[4, 4], 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];
        let px = Tensor::concat_rows(&perm.map(|p| x.slice_rows(p, 1).unwrap())).unwrap();
        let out = mha_forward(&x, &w).unwrap();
        let pout = mha_forward(&px, &w).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            let d = pout
                .slice_rows(i, 1)
                .unwrap()
                .max_abs_diff(&out.slice_rows(p, 1).unwrap())
                .unwrap();
            assert!(d < 1e-12);
        }
    }
}

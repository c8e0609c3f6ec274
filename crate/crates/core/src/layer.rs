//! Transformer layer `G(x) = G^F(G^S(x))` and branches of stacked layers.
//!
//! Each layer is residual twice over: `x_s = x + A(x)` and
//! `out = x_s + F(x_s)`, so `out = Ĝ(x) + x` with `Ĝ(x) = A(x) + F(x_s)`.

use rand::Rng;

use crate::attention::{attention_delta, closedform_ws, AttnBlockWeights};
use crate::error::{Error, Result};
use crate::ops::Ops;
use crate::tensor::{Activation, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<V> {
    pub w_f1: V,
    pub b_f1: V,
    pub w_f2: V,
    pub b_f2: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<V> {
    pub attn: AttnBlockWeights<V>,
    pub ffn: FfnWeights<V>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchWeights<V> {
    pub layers: Vec<LayerWeights<V>>,
}

/// Per-layer switches that are not parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerOpts {
    pub activation: Activation,
    /// Parameter-free row standardization before each block. Breaks the
    /// closed-form identity, so it stays off unless asked for.
    pub pre_norm: bool,
}

impl<V> FfnWeights<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> FfnWeights<U> {
        FfnWeights {
            w_f1: f(&self.w_f1),
            b_f1: f(&self.b_f1),
            w_f2: f(&self.w_f2),
            b_f2: f(&self.b_f2),
        }
    }
}

impl<V> LayerWeights<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> LayerWeights<U> {
        LayerWeights {
            attn: self.attn.map(f),
            ffn: self.ffn.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ffn.w_f1"), &self.ffn.w_f1);
        f(format!("{prefix}.ffn.b_f1"), &self.ffn.b_f1);
        f(format!("{prefix}.ffn.w_f2"), &self.ffn.w_f2);
        f(format!("{prefix}.ffn.b_f2"), &self.ffn.b_f2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.ffn.w_f1"), &mut self.ffn.w_f1);
        f(format!("{prefix}.ffn.b_f1"), &mut self.ffn.b_f1);
        f(format!("{prefix}.ffn.w_f2"), &mut self.ffn.w_f2);
        f(format!("{prefix}.ffn.b_f2"), &mut self.ffn.b_f2);
    }
}

impl<V> BranchWeights<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> BranchWeights<U> {
        BranchWeights {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

impl<T: Scalar> FfnWeights<Tensor<T>> {
    /// Weights from `init`, biases zero.
    pub fn build(d_model: usize, d_ff: usize, mut init: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        FfnWeights {
            w_f1: init(&[d_model, d_ff]),
            b_f1: Tensor::zeros(&[d_ff]),
            w_f2: init(&[d_ff, d_model]),
            b_f2: Tensor::zeros(&[d_model]),
        }
    }

    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        Self::build(d_model, d_ff, |s| Tensor::zeros(s))
    }

    pub fn random<R: Rng>(d_model: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        let mut w = Self::build(d_model, d_ff, |s| Tensor::randn(s, std, rng));
        w.b_f1 = Tensor::randn(&[d_ff], std, rng);
        w.b_f2 = Tensor::randn(&[d_model], std, rng);
        w
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let d_ff = self.w_f1.cols();
        if self.w_f1.shape() != [d_model, d_ff]
            || self.b_f1.numel() != d_ff
            || self.w_f2.shape() != [d_ff, d_model]
            || self.b_f2.numel() != d_model
        {
            return Err(Error::shape("ffn", self.w_f1.shape(), self.w_f2.shape()));
        }
        Ok(())
    }
}

impl<T: Scalar> LayerWeights<Tensor<T>> {
    pub fn zeros(d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(LayerWeights {
            attn: AttnBlockWeights::zeros(d_model, heads)?,
            ffn: FfnWeights::zeros(d_model, d_ff),
        })
    }

    pub fn random<R: Rng>(d_model: usize, heads: usize, d_ff: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(LayerWeights {
            attn: AttnBlockWeights::random(d_model, heads, std, rng)?,
            ffn: FfnWeights::random(d_model, d_ff, std, rng),
        })
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        self.attn.validate(d_model)?;
        self.ffn.validate(d_model)
    }
}

impl<T: Scalar> BranchWeights<Tensor<T>> {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a branch needs at least one layer".into()));
        }
        self.layers.iter().try_for_each(|l| l.validate(d_model))
    }
}

/// `σ(x_s·W1 + b1)·W2 + b2`, the feed-forward block without its residual.
pub(crate) fn ffn_delta<T: Scalar, V: Ops<T>>(x_s: &V, w: &FfnWeights<V>, act: Activation) -> Result<V> {
    x_s.matmul(&w.w_f1)?
        .add_row(&w.b_f1)?
        .activation(act)
        .matmul(&w.w_f2)?
        .add_row(&w.b_f2)
}

/// Attention output `x_s` and the two residual-free increments.
fn layer_parts<T: Scalar, V: Ops<T>>(
    x: &V,
    w: &LayerWeights<V>,
    tokens: usize,
    opts: LayerOpts,
) -> Result<(V, V, V)> {
    let attn_in = if opts.pre_norm { x.layer_norm_rows()? } else { x.clone() };
    let a = attention_delta(&attn_in, &w.attn, tokens)?;
    let x_s = a.add(x)?;
    let ffn_in = if opts.pre_norm { x_s.layer_norm_rows()? } else { x_s.clone() };
    let f = ffn_delta(&ffn_in, &w.ffn, opts.activation)?;
    Ok((x_s, a, f))
}

pub(crate) fn layer_apply<T: Scalar, V: Ops<T>>(
    x: &V,
    w: &LayerWeights<V>,
    tokens: usize,
    opts: LayerOpts,
) -> Result<V> {
    let (x_s, _, f) = layer_parts(x, w, tokens, opts)?;
    f.add(&x_s)
}

pub(crate) fn ghat_apply<T: Scalar, V: Ops<T>>(
    x: &V,
    w: &LayerWeights<V>,
    tokens: usize,
    opts: LayerOpts,
) -> Result<V> {
    let (_, a, f) = layer_parts(x, w, tokens, opts)?;
    a.add(&f)
}

pub(crate) fn branch_apply<T: Scalar, V: Ops<T>>(
    x0: &V,
    b: &BranchWeights<V>,
    tokens: usize,
    opts: LayerOpts,
) -> Result<V> {
    let mut x = x0.clone();
    for layer in &b.layers {
        x = layer_apply(&x, layer, tokens, opts)?;
    }
    Ok(x)
}

/// Feed-forward block with residual: `σ(x_s·W1 + b1)·W2 + b2 + x_s`.
pub fn ffn_forward<T: Scalar>(x_s: &Tensor<T>, w: &FfnWeights<Tensor<T>>, act: Activation) -> Result<Tensor<T>> {
    ffn_delta(x_s, w, act)?.add(x_s)
}

/// One full layer on a single `m × D` token matrix.
pub fn layer_forward<T: Scalar>(x: &Tensor<T>, w: &LayerWeights<Tensor<T>>, opts: LayerOpts) -> Result<Tensor<T>> {
    let (m, _) = x.dims2("layer_forward")?;
    layer_apply(x, w, m, opts)
}

/// The layer without its outermost residual, computed directly as `A(x) + F(x_s)`.
pub fn ghat_forward<T: Scalar>(x: &Tensor<T>, w: &LayerWeights<Tensor<T>>, opts: LayerOpts) -> Result<Tensor<T>> {
    let (m, _) = x.dims2("ghat_forward")?;
    ghat_apply(x, w, m, opts)
}

/// Sequential composition of the branch's layers on a single token matrix.
pub fn branch_forward<T: Scalar>(x0: &Tensor<T>, b: &BranchWeights<Tensor<T>>, opts: LayerOpts) -> Result<Tensor<T>> {
    let (m, _) = x0.dims2("branch_forward")?;
    branch_apply(x0, b, m, opts)
}

/// The layer written entirely in column-major vec space:
/// `F2·σ(W¹·x + b1) + b2 + W^S·x + x` with `W¹ = F1·W^S + F1`, where
/// `F1 = W^{F1}ᵀ ⊗ I_m`, `F2 = W^{F2}ᵀ ⊗ I_m` and the biases are repeated per
/// token. Returns a `[m·D]` vector. Verification only: builds `(mD)²` matrices.
pub fn expanded_layer_vec(
    x: &Tensor<f64>,
    w: &LayerWeights<Tensor<f64>>,
    act: Activation,
) -> Result<Tensor<f64>> {
    let (m, d_model) = x.dims2("expanded_layer_vec")?;
    let ws = closedform_ws(x, &w.attn)?;
    let eye = Tensor::eye(m);
    let f1 = w.ffn.w_f1.transpose()?.kron(&eye)?;
    let f2 = w.ffn.w_f2.transpose()?.kron(&eye)?;
    let d_ff = w.ffn.w_f1.cols();
    let ones = Tensor::full(&[m, 1], 1.0);
    let b1 = ones.matmul(&w.ffn.b_f1.reshape(&[1, d_ff])?)?.vec_cols()?;
    let b2 = ones.matmul(&w.ffn.b_f2.reshape(&[1, d_model])?)?.vec_cols()?;
    let vx = x.vec_cols()?.as_column()?;
    let w1 = f1.matmul(&ws)?.add(&f1)?;
    let hidden = w1
        .matmul(&vx)?
        .reshape(&[m * d_ff])?
        .add(&b1)?
        .activation(act);
    let ffn = f2.matmul(&hidden.as_column()?)?.reshape(&[m * d_model])?.add(&b2)?;
    let attn = ws.matmul(&vx)?.reshape(&[m * d_model])?;
    ffn.add(&attn)?.add(&vx.reshape(&[m * d_model])?)
}

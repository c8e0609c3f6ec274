//! The operation set shared by plain tensors and taped variables, so the model
//! is written once and runs either for inference or for training.

use crate::autodiff::Var;
use crate::error::Result;
use crate::tensor::{Activation, Scalar, Tensor};

pub trait Ops<T: Scalar>: Clone {
    fn matmul(&self, rhs: &Self) -> Result<Self>;
    fn add(&self, rhs: &Self) -> Result<Self>;
    fn scale(&self, s: T) -> Self;
    fn add_row(&self, bias: &Self) -> Result<Self>;
    fn add_tiled(&self, tile: &Self) -> Result<Self>;
    fn activation(&self, act: Activation) -> Self;
    fn softmax_rows(&self) -> Result<Self>;
    fn layer_norm_rows(&self) -> Result<Self>;
    fn concat_cols(parts: &[Self]) -> Result<Self>;
    fn segment_matmul_nt(&self, rhs: &Self, seg: usize) -> Result<Self>;
    fn segment_matmul(&self, rhs: &Self, seg: usize) -> Result<Self>;
    fn segment_mean_rows(&self, seg: usize) -> Result<Self>;
    fn to_tensor(&self) -> Tensor<T>;
}

impl<T: Scalar> Ops<T> for Tensor<T> {
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        Tensor::matmul(self, rhs)
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        Tensor::add(self, rhs)
    }
    fn scale(&self, s: T) -> Self {
        Tensor::scale(self, s)
    }
    fn add_row(&self, bias: &Self) -> Result<Self> {
        Tensor::add_row(self, bias)
    }
    fn add_tiled(&self, tile: &Self) -> Result<Self> {
        Tensor::add_tiled(self, tile)
    }
    fn activation(&self, act: Activation) -> Self {
        Tensor::activation(self, act)
    }
    fn softmax_rows(&self) -> Result<Self> {
        Tensor::softmax_rows(self)
    }
    fn layer_norm_rows(&self) -> Result<Self> {
        Tensor::layer_norm_rows(self)
    }
    fn concat_cols(parts: &[Self]) -> Result<Self> {
        Tensor::concat_cols(parts)
    }
    fn segment_matmul_nt(&self, rhs: &Self, seg: usize) -> Result<Self> {
        Tensor::segment_matmul_nt(self, rhs, seg)
    }
    fn segment_matmul(&self, rhs: &Self, seg: usize) -> Result<Self> {
        Tensor::segment_matmul(self, rhs, seg)
    }
    fn segment_mean_rows(&self, seg: usize) -> Result<Self> {
        Tensor::segment_mean_rows(self, seg)
    }
    fn to_tensor(&self) -> Tensor<T> {
        self.clone()
    }
}

impl<'t, T: Scalar> Ops<T> for Var<'t, T> {
    fn matmul(&self, rhs: &Self) -> Result<Self> {
        Var::matmul(self, rhs)
    }
    fn add(&self, rhs: &Self) -> Result<Self> {
        Var::add(self, rhs)
    }
    fn scale(&self, s: T) -> Self {
        Var::scale(self, s)
    }
    fn add_row(&self, bias: &Self) -> Result<Self> {
        Var::add_row(self, bias)
    }
    fn add_tiled(&self, tile: &Self) -> Result<Self> {
        Var::add_tiled(self, tile)
    }
    fn activation(&self, act: Activation) -> Self {
        Var::activation(self, act)
    }
    fn softmax_rows(&self) -> Result<Self> {
        Var::softmax_rows(self)
    }
    fn layer_norm_rows(&self) -> Result<Self> {
        Var::layer_norm_rows(self)
    }
    fn concat_cols(parts: &[Self]) -> Result<Self> {
        Var::concat_cols(parts)
    }
    fn segment_matmul_nt(&self, rhs: &Self, seg: usize) -> Result<Self> {
        Var::segment_matmul_nt(self, rhs, seg)
    }
    fn segment_matmul(&self, rhs: &Self, seg: usize) -> Result<Self> {
        Var::segment_matmul(self, rhs, seg)
    }
    fn segment_mean_rows(&self, seg: usize) -> Result<Self> {
        Var::segment_mean_rows(self, seg)
    }
    fn to_tensor(&self) -> Tensor<T> {
        self.value()
    }
}

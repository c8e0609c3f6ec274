//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids are
//! assigned in creation order, so the tape is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Gradients accumulate across
//! repeated `backward` calls until [`Tape::zero_grad`].

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gemm_nn, gemm_nt, gemm_tn, Activation, Scalar, Tensor, LAYER_NORM_EPS,
};

#[derive(Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    AddTiled(usize, usize),
    Act(usize, Activation),
    Softmax(usize),
    LayerNorm(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SegmentMean(usize, usize),
    SegMatMulNt(usize, usize, usize),
    SegMatMul(usize, usize, usize),
    Sum(usize),
    CrossEntropy(usize, Vec<usize>, Tensor<T>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::SliceCols(a, _)
            | Op::SegmentMean(a, _)
            | Op::Sum(a)
            | Op::CrossEntropy(a, _, _) => vec![*a],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddTiled(a, b)
            | Op::SegMatMulNt(a, b, _)
            | Op::SegMatMul(a, b, _) => vec![*a, *b],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation. Single-threaded by construction.
#[derive(Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Trainable input: gradients are tracked.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].needs_grad)
        };
        self.push(value, op, needs_grad)
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Accumulated gradient of a node; zeros if nothing has reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d`loss`/d(node) to every node reachable from `loss` and adds
    /// it to the node's stored gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::rank("backward", 0, root.value.shape()));
        }
        let mut local: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            for (input, contrib) in input_grads(&nodes, id, &g)? {
                match &mut local[input] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn input_grads<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].needs_grad;
    let mut out = Vec::new();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(*a) {
                out.push((*a, g.matmul_nt(val(*b))?));
            }
            if wants(*b) {
                out.push((*b, val(*a).matmul_tn(g)?));
            }
        }
        Op::Transpose(a) => out.push((*a, g.transpose()?)),
        Op::Add(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::Sub(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.scale(-T::one())));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                out.push((*a, g.mul(val(*b))?));
            }
            if wants(*b) {
                out.push((*b, g.mul(val(*a))?));
            }
        }
        Op::Scale(a, s) => out.push((*a, g.scale(*s))),
        Op::AddRow(x, b) => {
            out.push((*x, g.clone()));
            if wants(*b) {
                let (_, c) = g.dims2("add_row backward")?;
                let mut db = vec![T::zero(); c];
                for row in g.data().chunks_exact(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                out.push((*b, Tensor::new(val(*b).shape().to_vec(), db)?));
            }
        }
        Op::AddTiled(x, t) => {
            out.push((*x, g.clone()));
            if wants(*t) {
                let tile = val(*t);
                let mut dt = vec![T::zero(); tile.numel()];
                for block in g.data().chunks_exact(tile.numel()) {
                    for (d, &v) in dt.iter_mut().zip(block) {
                        *d += v;
                    }
                }
                out.push((*t, Tensor::new(tile.shape().to_vec(), dt)?));
            }
        }
        Op::Act(a, act) => {
            let x = val(*a);
            let dx: Vec<T> = match act {
                Activation::Gelu => x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad_scalar(xv))
                    .collect(),
                Activation::Relu => x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
            };
            out.push((*a, Tensor::new(x.shape().to_vec(), dx)?));
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            let (r, c) = y.dims2("softmax backward")?;
            let mut dx = vec![T::zero(); r * c];
            for ((drow, yrow), grow) in dx
                .chunks_exact_mut(c)
                .zip(y.data().chunks_exact(c))
                .zip(g.data().chunks_exact(c))
            {
                let dot: T = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d = yv * (gv - dot);
                }
            }
            out.push((*a, Tensor::matrix(r, c, dx)?));
        }
        Op::LayerNorm(a) => {
            let x = val(*a);
            let y = &nodes[id].value;
            let (r, c) = x.dims2("layer_norm backward")?;
            let n = T::of(c as f64);
            let eps = T::of(LAYER_NORM_EPS);
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                let xr = &x.data()[i * c..(i + 1) * c];
                let yr = &y.data()[i * c..(i + 1) * c];
                let gr = &g.data()[i * c..(i + 1) * c];
                let mean = xr.iter().copied().sum::<T>() / n;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = (var + eps).sqrt().recip();
                let g_mean = gr.iter().copied().sum::<T>() / n;
                let gy_mean = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<T>() / n;
                for j in 0..c {
                    dx[i * c + j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                }
            }
            out.push((*a, Tensor::matrix(r, c, dx)?));
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols();
                if wants(p) {
                    out.push((p, g.slice_cols(start, w)?));
                }
                start += w;
            }
        }
        Op::SliceCols(a, start) => {
            let x = val(*a);
            let (r, c) = x.dims2("slice_cols backward")?;
            let w = g.cols();
            let mut dx = vec![T::zero(); r * c];
            for i in 0..r {
                dx[i * c + start..i * c + start + w]
                    .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            out.push((*a, Tensor::matrix(r, c, dx)?));
        }
        Op::SegmentMean(a, seg) => {
            let x = val(*a);
            let (r, c) = x.dims2("segment_mean backward")?;
            let inv = T::of(*seg as f64).recip();
            let mut dx = vec![T::zero(); r * c];
            for (i, row) in dx.chunks_exact_mut(c).enumerate() {
                let grow = &g.data()[(i / seg) * c..(i / seg + 1) * c];
                for (d, &gv) in row.iter_mut().zip(grow) {
                    *d = gv * inv;
                }
            }
            out.push((*a, Tensor::matrix(r, c, dx)?));
        }
        Op::SegMatMulNt(a, b, seg) => {
            let (av, bv) = (val(*a), val(*b));
            let (r, d) = av.dims2("segment_matmul_nt backward")?;
            let seg = *seg;
            let mut da = vec![T::zero(); r * d];
            let mut db = vec![T::zero(); r * d];
            for s in 0..r / seg {
                let gs = &g.data()[s * seg * seg..(s + 1) * seg * seg];
                let a_s = &av.data()[s * seg * d..(s + 1) * seg * d];
                let b_s = &bv.data()[s * seg * d..(s + 1) * seg * d];
                gemm_nn(gs, b_s, &mut da[s * seg * d..(s + 1) * seg * d], seg, seg, d);
                gemm_tn(gs, a_s, &mut db[s * seg * d..(s + 1) * seg * d], seg, seg, d);
            }
            if wants(*a) {
                out.push((*a, Tensor::matrix(r, d, da)?));
            }
            if wants(*b) {
                out.push((*b, Tensor::matrix(r, d, db)?));
            }
        }
        Op::SegMatMul(p, v, seg) => {
            let (pv, vv) = (val(*p), val(*v));
            let (r, n) = vv.dims2("segment_matmul backward")?;
            let seg = *seg;
            let mut dp = vec![T::zero(); r * seg];
            let mut dv = vec![T::zero(); r * n];
            for s in 0..r / seg {
                let gs = &g.data()[s * seg * n..(s + 1) * seg * n];
                let p_s = &pv.data()[s * seg * seg..(s + 1) * seg * seg];
                let v_s = &vv.data()[s * seg * n..(s + 1) * seg * n];
                gemm_nt(gs, v_s, &mut dp[s * seg * seg..(s + 1) * seg * seg], seg, n, seg);
                gemm_tn(p_s, gs, &mut dv[s * seg * n..(s + 1) * seg * n], seg, seg, n);
            }
            if wants(*p) {
                out.push((*p, Tensor::matrix(r, seg, dp)?));
            }
            if wants(*v) {
                out.push((*v, Tensor::matrix(r, n, dv)?));
            }
        }
        Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.item()))),
        Op::CrossEntropy(a, labels, probs) => {
            let (b, c) = probs.dims2("cross_entropy backward")?;
            let coef = g.item() / T::of(b as f64);
            let mut dx = probs.to_vec();
            for (i, &l) in labels.iter().enumerate() {
                dx[i * c + l] -= T::one();
            }
            for v in dx.iter_mut() {
                *v *= coef;
            }
            out.push((*a, Tensor::matrix(b, c, dx)?));
        }
    }
    Ok(out.into_iter().filter(|(i, _)| wants(*i)).collect())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn grad(&self) -> Tensor<T> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn same_tape(&self, other: &Self) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.record(value, op)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs);
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.unary(v, Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(&self) -> Result<Self> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs);
        let v = self.value().add(&rhs.value())?;
        Ok(self.unary(v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs);
        let v = self.value().sub(&rhs.value())?;
        Ok(self.unary(v, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.same_tape(rhs);
        let v = self.value().mul(&rhs.value())?;
        Ok(self.unary(v, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(&self, s: T) -> Self {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        self.same_tape(bias);
        let v = self.value().add_row(&bias.value())?;
        Ok(self.unary(v, Op::AddRow(self.id, bias.id)))
    }

    pub fn add_tiled(&self, tile: &Self) -> Result<Self> {
        self.same_tape(tile);
        let v = self.value().add_tiled(&tile.value())?;
        Ok(self.unary(v, Op::AddTiled(self.id, tile.id)))
    }

    pub fn activation(&self, act: Activation) -> Self {
        let v = self.value().activation(act);
        self.unary(v, Op::Act(self.id, act))
    }

    pub fn gelu(&self) -> Self {
        self.activation(Activation::Gelu)
    }

    pub fn relu(&self) -> Self {
        self.activation(Activation::Relu)
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        let v = self.value().softmax_rows()?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    pub fn layer_norm_rows(&self) -> Result<Self> {
        let v = self.value().layer_norm_rows()?;
        Ok(self.unary(v, Op::LayerNorm(self.id)))
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat_cols of zero parts".into()))?;
        for p in parts {
            first.same_tape(p);
        }
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(first.unary(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let v = self.value().slice_cols(start, width)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn mean_rows(&self) -> Result<Self> {
        let rows = self.value().dims2("mean_rows")?.0;
        self.segment_mean_rows(rows)
    }

    pub fn segment_mean_rows(&self, seg: usize) -> Result<Self> {
        let v = self.value().segment_mean_rows(seg)?;
        Ok(self.unary(v, Op::SegmentMean(self.id, seg)))
    }

    pub fn segment_matmul_nt(&self, rhs: &Self, seg: usize) -> Result<Self> {
        self.same_tape(rhs);
        let v = self.value().segment_matmul_nt(&rhs.value(), seg)?;
        Ok(self.unary(v, Op::SegMatMulNt(self.id, rhs.id, seg)))
    }

    pub fn segment_matmul(&self, rhs: &Self, seg: usize) -> Result<Self> {
        self.same_tape(rhs);
        let v = self.value().segment_matmul(&rhs.value(), seg)?;
        Ok(self.unary(v, Op::SegMatMul(self.id, rhs.id, seg)))
    }

    pub fn sum(&self) -> Self {
        let v = self.value().sum();
        self.unary(v, Op::Sum(self.id))
    }

    /// Mean softmax cross-entropy against integer labels; scalar output.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let (loss, probs) = self.value().cross_entropy(labels)?;
        Ok(self.unary(loss, Op::CrossEntropy(self.id, labels.to_vec(), probs)))
    }
}

//! Central finite-difference checks for taped operations.
//!
//! The checked function is scalarized as `Σ out ⊙ R` with a fixed random `R`,
//! then every input element is nudged by `±step` and the numerical slope is
//! compared against the gradient from [`Tape::backward`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tolerance: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tolerance: 1e-4,
            floor: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

fn scalarized<F>(f: &F, inputs: &[Tensor<f64>], weights: &Option<Tensor<f64>>) -> Result<(f64, Tensor<f64>)>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?.value();
    let w = match weights {
        Some(w) => w.clone(),
        None => out.clone(),
    };
    Ok((out.mul(&w)?.sum().item(), out))
}

/// Compares analytic and numerical gradients of `f` at `inputs`.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    // Fix the projection weights from the unperturbed output's shape.
    let (_, out) = scalarized(&f, inputs, &None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proj = Tensor::<f64>::rand_uniform(out.shape(), -1.0, 1.0, &mut rng);
    let proj = Some(proj);

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let r = tape.constant(proj.clone().expect("set above"));
    out.mul(&r)?.sum().backward()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    for (k, var) in vars.iter().enumerate() {
        let analytic = var.grad();
        for e in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += cfg.step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= cfg.step;
            let (lp, _) = scalarized(&f, &plus, &proj)?;
            let (lm, _) = scalarized(&f, &minus, &proj)?;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, e);
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err < cfg.rel_tolerance;
    Ok(report)
}

type TapedFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// One differentiable operation together with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<Vec<usize>>>,
    pub f: TapedFn,
}

#[derive(Debug, Clone)]
pub struct OpResult {
    pub name: &'static str,
    pub shape_index: usize,
    pub report: GradCheckReport,
}

fn case(
    name: &'static str,
    shapes: Vec<Vec<Vec<usize>>>,
    f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes,
        f: Box::new(f),
    }
}

/// Every differentiable tape operation, each at three input shapes, plus a
/// few compositions.
pub fn op_cases() -> Vec<OpCase> {
    let un = |a: &[usize], b: &[usize], c: &[usize]| vec![vec![a.to_vec()], vec![b.to_vec()], vec![c.to_vec()]];
    let bin = |a: [&[usize]; 2], b: [&[usize]; 2], c: [&[usize]; 2]| {
        [a, b, c]
            .iter()
            .map(|p| p.iter().map(|s| s.to_vec()).collect())
            .collect::<Vec<_>>()
    };
    vec![
        case("matmul", bin([&[2, 3], &[3, 4]], [&[1, 5], &[5, 1]], [&[4, 2], &[2, 3]]), |_, v| {
            v[0].matmul(&v[1])
        }),
        case("transpose", un(&[2, 3], &[1, 4], &[5, 2]), |_, v| v[0].transpose()),
        case("add", bin([&[2, 3], &[2, 3]], [&[1, 4], &[1, 4]], [&[3, 3], &[3, 3]]), |_, v| {
            v[0].add(&v[1])
        }),
        case("sub", bin([&[2, 3], &[2, 3]], [&[4, 1], &[4, 1]], [&[3, 2], &[3, 2]]), |_, v| {
            v[0].sub(&v[1])
        }),
        case("mul", bin([&[2, 3], &[2, 3]], [&[1, 4], &[1, 4]], [&[3, 3], &[3, 3]]), |_, v| {
            v[0].mul(&v[1])
        }),
        case("scale", un(&[2, 3], &[4], &[3, 3]), |_, v| Ok(v[0].scale(-1.7))),
        case("add_row", bin([&[2, 3], &[3]], [&[4, 2], &[1, 2]], [&[1, 5], &[5]]), |_, v| {
            v[0].add_row(&v[1])
        }),
        case("add_tiled", bin([&[4, 3], &[2, 3]], [&[3, 2], &[1, 2]], [&[6, 2], &[3, 2]]), |_, v| {
            v[0].add_tiled(&v[1])
        }),
        case("gelu", un(&[2, 3], &[5], &[3, 4]), |_, v| Ok(v[0].gelu())),
        case("relu", un(&[2, 3], &[5], &[3, 4]), |_, v| Ok(v[0].relu())),
        case("softmax_rows", un(&[2, 3], &[1, 5], &[4, 2]), |_, v| v[0].softmax_rows()),
        case("layer_norm_rows", un(&[2, 3], &[1, 5], &[4, 4]), |_, v| v[0].layer_norm_rows()),
        case("concat_cols", bin([&[2, 3], &[2, 1]], [&[1, 2], &[1, 4]], [&[3, 3], &[3, 2]]), |_, v| {
            Var::concat_cols(v)
        }),
        case("slice_cols", un(&[2, 4], &[3, 3], &[1, 5]), |_, v| v[0].slice_cols(1, 2)),
        case("mean_rows", un(&[2, 3], &[5, 1], &[4, 4]), |_, v| v[0].mean_rows()),
        case("segment_mean_rows", un(&[4, 3], &[6, 2], &[2, 5]), |_, v| v[0].segment_mean_rows(2)),
        case(
            "segment_matmul_nt",
            bin([&[4, 3], &[4, 3]], [&[6, 2], &[6, 2]], [&[2, 4], &[2, 4]]),
            |_, v| v[0].segment_matmul_nt(&v[1], 2),
        ),
        case(
            "segment_matmul",
            bin([&[4, 2], &[4, 3]], [&[6, 2], &[6, 1]], [&[2, 2], &[2, 4]]),
            |_, v| v[0].segment_matmul(&v[1], 2),
        ),
        case("sum", un(&[2, 3], &[4], &[1, 1]), |_, v| Ok(v[0].sum())),
        case("cross_entropy", un(&[2, 3], &[4, 2], &[1, 5]), |_, v| {
            let rows = v[0].value().rows();
            let labels: Vec<usize> = (0..rows).map(|i| (i * 7 + 1) % v[0].value().cols()).collect();
            v[0].cross_entropy(&labels)
        }),
        case(
            "two_layer_mlp",
            bin([&[2, 3], &[3, 4]], [&[3, 2], &[2, 5]], [&[1, 4], &[4, 2]]),
            |tape, v| {
                let w2 = tape.constant(crate::tensor::Tensor::full(&[v[1].value().cols(), 2], 0.3));
                v[0].matmul(&v[1])?.gelu().matmul(&w2)?.softmax_rows()
            },
        ),
        case(
            "attention_head",
            bin([&[3, 4], &[4, 2]], [&[2, 2], &[2, 2]], [&[4, 3], &[3, 3]]),
            |_, v| {
                let tokens = v[0].value().rows();
                let q = v[0].matmul(&v[1])?;
                let s = q.segment_matmul_nt(&q, tokens)?.scale(0.5).softmax_rows()?;
                s.segment_matmul(&v[0], tokens)
            },
        ),
    ]
}

/// Runs [`check`] for every case and shape with inputs drawn from `seed`.
/// Inputs are kept at least 0.05 away from zero so ReLU's kink is never
/// straddled by the finite-difference step.
pub fn run_op_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<OpResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for case in op_cases() {
        for (si, shapes) in case.shapes.iter().enumerate() {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    Tensor::<f64>::rand_uniform(s, -1.0, 1.0, &mut rng)
                        .map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
                })
                .collect();
            let report = check(&case.f, &inputs, cfg)?;
            results.push(OpResult {
                name: case.name,
                shape_index: si,
                report,
            });
        }
    }
    Ok(results)
}

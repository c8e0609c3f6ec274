//! The full model: patch embedding, `N` branches that all read the same
//! embedded tokens `X₀`, and a linear aggregator over mean-pooled branch
//! outputs.
//!
//! Stage `i` logits are `bias + Σ_{j≤i} mean_rows(X_j)·A_j`, accumulated in
//! ascending branch order starting from the bias. Because of that fixed
//! order, stage `i` equals stage `i−1` plus branch `i`'s term bit for bit,
//! and any evaluator that sums in the same order (prefix compression, the
//! parallel runtime) reproduces the sequential result exactly.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{branch_apply, BranchWeights, LayerOpts, LayerWeights};
use crate::ops::Ops;
use crate::tensor::{Activation, Scalar, Tensor};

/// Standard deviation of the truncated normal used for every projection.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_branches: usize,
    pub layers_per_branch: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub pre_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Width 192 with 3 heads of 64 and FFN 768, on 32×32×3 images.
    fn default() -> Self {
        ModelConfig {
            n_branches: 4,
            layers_per_branch: 3,
            width: 192,
            heads: 3,
            ffn_width: 768,
            patch_size: 4,
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            n_classes: 10,
            activation: Activation::Gelu,
            pre_norm: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_branches", self.n_branches),
            ("layers_per_branch", self.layers_per_branch),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("patch_size", self.patch_size),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("image_channels", self.image_channels),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.image_height, self.image_width, self.patch_size, self.patch_size
            )));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Token count `m = (H/p)·(W/p)`.
    pub fn tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    pub fn layer_opts(&self) -> LayerOpts {
        LayerOpts {
            activation: self.activation,
            pre_norm: self.pre_norm,
        }
    }

    /// `key=value` pairs in a fixed order. Also the checkpoint config block.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_branches", self.n_branches.to_string()),
            ("layers_per_branch", self.layers_per_branch.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_width", self.ffn_width.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("activation", self.activation.name().to_string()),
            ("pre_norm", self.pre_norm.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 13] = [
        "n_branches",
        "layers_per_branch",
        "width",
        "heads",
        "ffn_width",
        "patch_size",
        "image_height",
        "image_width",
        "image_channels",
        "n_classes",
        "activation",
        "pre_norm",
        "seed",
    ];

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "n_branches" => self.n_branches = num(key, value)?,
            "layers_per_branch" => self.layers_per_branch = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_width" => self.ffn_width = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "image_width" => self.image_width = num(key, value)?,
            "image_channels" => self.image_channels = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "activation" => {
                self.activation = Activation::parse(value)
                    .ok_or_else(|| Error::Config(format!("activation: unknown {value:?}")))?
            }
            "pre_norm" => self.pre_norm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingWeights<V> {
    /// `[p·p·C, D]`
    pub patch_proj: V,
    /// `[m, D]`
    pub pos: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorWeights<V> {
    /// One `[D, n_classes]` block per branch.
    pub per_branch: Vec<V>,
    pub bias: V,
}

impl<V> EmbeddingWeights<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> EmbeddingWeights<U> {
        EmbeddingWeights {
            patch_proj: f(&self.patch_proj),
            pos: f(&self.pos),
        }
    }
}

/// Per-branch evaluation counts. Cloning yields fresh zeroed counters.
pub struct EvalCounter {
    counts: Vec<AtomicU64>,
}

impl EvalCounter {
    fn new(n: usize) -> Self {
        EvalCounter {
            counts: (0..n).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub(crate) fn bump(&self, branch: usize) {
        self.counts[branch].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset(&self) {
        for c in &self.counts {
            c.store(0, Ordering::Relaxed);
        }
    }
}

impl Clone for EvalCounter {
    fn clone(&self) -> Self {
        EvalCounter::new(self.counts.len())
    }
}

impl fmt::Debug for EvalCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EvalCounter{:?}", self.snapshot())
    }
}

#[derive(Clone)]
pub struct ParaFormerModel<T> {
    pub config: ModelConfig,
    pub embed: EmbeddingWeights<Tensor<T>>,
    pub branches: Vec<BranchWeights<Tensor<T>>>,
    pub agg: AggregatorWeights<Tensor<T>>,
    /// Branches `0..frozen_prefix` (and the shared embedding and aggregator
    /// bias, when nonzero) are excluded from training.
    pub frozen_prefix: usize,
    evals: EvalCounter,
}

impl<T: Scalar> fmt::Debug for ParaFormerModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParaFormerModel")
            .field("config", &self.config)
            .field("params", &self.param_count())
            .field("frozen_prefix", &self.frozen_prefix)
            .field("evals", &self.evals)
            .finish()
    }
}

fn truncated_normal<R: Rng, T: Scalar>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// A freshly initialized branch: truncated-normal projections, zero biases.
pub fn init_branch<T: Scalar, R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<BranchWeights<Tensor<T>>> {
    let mut layers = Vec::with_capacity(config.layers_per_branch);
    for _ in 0..config.layers_per_branch {
        let attn = crate::attention::AttnBlockWeights::build(config.width, config.heads, |s| {
            truncated_normal(s, INIT_STD, rng)
        })?;
        let ffn = crate::layer::FfnWeights::build(config.width, config.ffn_width, |s| {
            truncated_normal(s, INIT_STD, rng)
        });
        layers.push(LayerWeights { attn, ffn });
    }
    Ok(BranchWeights { layers })
}

impl<T: Scalar> ParaFormerModel<T> {
    /// Seeded initialization. The aggregator starts at zero, so every stage
    /// initially predicts uniform logits.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = EmbeddingWeights {
            patch_proj: truncated_normal(&[config.patch_dim(), config.width], INIT_STD, &mut rng),
            pos: truncated_normal(&[config.tokens(), config.width], INIT_STD, &mut rng),
        };
        let branches = (0..config.n_branches)
            .map(|_| init_branch(&config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let agg = AggregatorWeights {
            per_branch: (0..config.n_branches)
                .map(|_| Tensor::zeros(&[config.width, config.n_classes]))
                .collect(),
            bias: Tensor::zeros(&[config.n_classes]),
        };
        Self::from_parts(config, embed, branches, agg)
    }

    pub fn from_parts(
        config: ModelConfig,
        embed: EmbeddingWeights<Tensor<T>>,
        branches: Vec<BranchWeights<Tensor<T>>>,
        agg: AggregatorWeights<Tensor<T>>,
    ) -> Result<Self> {
        let n = branches.len();
        let model = ParaFormerModel {
            config,
            embed,
            branches,
            agg,
            frozen_prefix: 0,
            evals: EvalCounter::new(n),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.branches.len() != c.n_branches || self.agg.per_branch.len() != c.n_branches {
            return Err(Error::Config(format!(
                "config says {} branches, model has {} branches and {} aggregator blocks",
                c.n_branches,
                self.branches.len(),
                self.agg.per_branch.len()
            )));
        }
        if self.embed.patch_proj.shape() != [c.patch_dim(), c.width] {
            return Err(Error::shape("patch_proj", self.embed.patch_proj.shape(), &[c.patch_dim(), c.width]));
        }
        if self.embed.pos.shape() != [c.tokens(), c.width] {
            return Err(Error::shape("pos", self.embed.pos.shape(), &[c.tokens(), c.width]));
        }
        for b in &self.branches {
            b.validate(c.width)?;
            if b.layers.len() != c.layers_per_branch {
                return Err(Error::Config("branch depth differs from layers_per_branch".into()));
            }
        }
        for a in &self.agg.per_branch {
            if a.shape() != [c.width, c.n_classes] {
                return Err(Error::shape("aggregator block", a.shape(), &[c.width, c.n_classes]));
            }
        }
        if self.agg.bias.numel() != c.n_classes {
            return Err(Error::shape("aggregator bias", self.agg.bias.shape(), &[c.n_classes]));
        }
        if self.frozen_prefix > c.n_branches {
            return Err(Error::Config("frozen prefix exceeds branch count".into()));
        }
        Ok(())
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens()
    }

    pub fn eval_counts(&self) -> Vec<u64> {
        self.evals.snapshot()
    }

    pub fn reset_eval_counts(&self) {
        self.evals.reset()
    }

    pub(crate) fn count_eval(&self, branch: usize) {
        self.evals.bump(branch)
    }

    /// Visits every parameter with its stable name.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("embed.patch_proj".into(), &self.embed.patch_proj);
        f("embed.pos".into(), &self.embed.pos);
        for (j, b) in self.branches.iter().enumerate() {
            b.visit(&format!("branch{j}"), f);
        }
        for (j, a) in self.agg.per_branch.iter().enumerate() {
            f(format!("agg.branch{j}"), a);
        }
        f("agg.bias".into(), &self.agg.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("embed.patch_proj".into(), &mut self.embed.patch_proj);
        f("embed.pos".into(), &mut self.embed.pos);
        for (j, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&format!("branch{j}"), f);
        }
        for (j, a) in self.agg.per_branch.iter_mut().enumerate() {
            f(format!("agg.branch{j}"), a);
        }
        f("agg.bias".into(), &mut self.agg.bias);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// CRC-32 over the names and little-endian bytes of every parameter
    /// accepted by `select`.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        self.visit_params(&mut |name, t| {
            if select(&name) {
                buf.clear();
                buf.extend_from_slice(name.as_bytes());
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
                h.update(&buf);
            }
        });
        h.finalize()
    }

    /// Checksum of branch `j` (0-based) and its aggregator block.
    pub fn branch_checksum(&self, j: usize) -> u32 {
        let (prefix, agg) = (format!("branch{j}."), format!("agg.branch{j}"));
        self.checksum(|name| name.starts_with(&prefix) || name == agg)
    }

    /// Whether the named parameter may be updated by training.
    pub fn is_trainable(&self, name: &str) -> bool {
        if self.frozen_prefix == 0 {
            return true;
        }
        if name.starts_with("embed.") || name == "agg.bias" {
            return false;
        }
        let index = name
            .strip_prefix("branch")
            .or_else(|| name.strip_prefix("agg.branch"))
            .and_then(|rest| rest.split('.').next())
            .and_then(|n| n.parse::<usize>().ok());
        match index {
            Some(j) => j >= self.frozen_prefix,
            None => true,
        }
    }

    /// Embeds a batch of images given as patch rows (`[B·m, p·p·C]`).
    pub fn embed_patches(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        embed_apply(patches, &self.embed)
    }

    /// Embeds the samples `indices` of `data`.
    pub fn embed_batch(&self, data: &Dataset, indices: &[usize]) -> Result<Tensor<T>> {
        self.check_data(data)?;
        let patches = patch_matrix(data, indices, self.config.patch_size)?;
        self.embed_patches(&patches)
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let c = &self.config;
        if (data.height, data.width, data.channels) != (c.image_height, c.image_width, c.image_channels) {
            return Err(Error::Config(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                data.height, data.width, data.channels, c.image_height, c.image_width, c.image_channels
            )));
        }
        if data.n_classes > c.n_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                data.n_classes, c.n_classes
            )));
        }
        Ok(())
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.n_branches() {
            return Err(Error::Stage {
                stage,
                max: self.n_branches(),
            });
        }
        Ok(())
    }

    fn batch_tokens(&self, x0: &Tensor<T>) -> Result<usize> {
        let (rows, cols) = x0.dims2("model input")?;
        let m = self.tokens();
        if cols != self.config.width || rows % m != 0 {
            return Err(Error::shape("model input", x0.shape(), &[m, self.config.width]));
        }
        Ok(m)
    }

    /// Branch `j`'s (0-based) logit contribution `mean_rows(X_j)·A_j`, `[B, n_classes]`.
    pub fn branch_term(&self, x0: &Tensor<T>, j: usize) -> Result<Tensor<T>> {
        let m = self.batch_tokens(x0)?;
        self.count_eval(j);
        branch_term(x0, &self.branches[j], &self.agg.per_branch[j], m, self.config.layer_opts())
    }

    /// Stage-`stage` logits (1-based). Only branches `1..=stage` are evaluated.
    pub fn forward_stage(&self, x0: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        self.check_stage(stage)?;
        let terms = (0..stage)
            .map(|j| self.branch_term(x0, j))
            .collect::<Result<Vec<_>>>()?;
        aggregate(&terms, &self.agg.bias)
    }

    /// Logits for every stage `1..=N` from a single pass over all branches.
    pub fn forward_all_stages(&self, x0: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.n_branches());
        for j in 0..self.n_branches() {
            let term = self.branch_term(x0, j)?;
            let next = match out.last() {
                None => term.add_row(&self.agg.bias)?,
                Some(prev) => prev.add(&term)?,
            };
            out.push(next);
        }
        Ok(out)
    }

    /// Full-model logits.
    pub fn predict(&self, x0: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_stage(x0, self.n_branches())
    }

    /// Token features `X_j` of branch `j` (1-based).
    pub fn branch_features(&self, x0: &Tensor<T>, j: usize) -> Result<Tensor<T>> {
        if j == 0 || j > self.n_branches() {
            return Err(Error::BranchIndex {
                index: j,
                max: self.n_branches(),
            });
        }
        let m = self.batch_tokens(x0)?;
        self.count_eval(j - 1);
        branch_apply(x0, &self.branches[j - 1], m, self.config.layer_opts())
    }

    /// Mean-pooled features of branch `j` (1-based), `[B, D]`.
    pub fn pooled_features(&self, x0: &Tensor<T>, j: usize) -> Result<Tensor<T>> {
        let m = self.tokens();
        self.branch_features(x0, j)?.segment_mean_rows(m)
    }
}

/// `patches·W_patch + pos` (pos repeated per sample).
pub(crate) fn embed_apply<T: Scalar, V: Ops<T>>(patches: &V, e: &EmbeddingWeights<V>) -> Result<V> {
    patches.matmul(&e.patch_proj)?.add_tiled(&e.pos)
}

pub(crate) fn branch_term<T: Scalar, V: Ops<T>>(
    x0: &V,
    branch: &BranchWeights<V>,
    agg_block: &V,
    tokens: usize,
    opts: LayerOpts,
) -> Result<V> {
    branch_apply(x0, branch, tokens, opts)?
        .segment_mean_rows(tokens)?
        .matmul(agg_block)
}

/// `((t₁ + bias) + t₂) + …`: ascending branch order, bias first.
pub(crate) fn aggregate<T: Scalar, V: Ops<T>>(terms: &[V], bias: &V) -> Result<V> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::InvalidTensor("aggregate of zero branches".into()))?;
    let mut acc = first.add_row(bias)?;
    for t in rest {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// Splits one `H×W×C` image (row-major, channel innermost) into
/// non-overlapping `p×p` patches, each flattened row-major over `(y, x, c)`.
/// Output rows follow the patch grid in row-major order.
pub fn image_patches<T: Scalar>(
    pixels: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
    out: &mut Vec<T>,
) {
    for py in 0..height / patch {
        for px in 0..width / patch {
            for y in 0..patch {
                let row = (py * patch + y) * width;
                for x in 0..patch {
                    let base = (row + px * patch + x) * channels;
                    out.extend(pixels[base..base + channels].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
    }
}

/// Patch rows for the given samples, `[B·m, p·p·C]`.
pub fn patch_matrix<T: Scalar>(data: &Dataset, indices: &[usize], patch: usize) -> Result<Tensor<T>> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if !data.height.is_multiple_of(patch) || !data.width.is_multiple_of(patch) {
        return Err(Error::Config(format!("images not divisible into {patch}x{patch} patches")));
    }
    let m = (data.height / patch) * (data.width / patch);
    let dim = patch * patch * data.channels;
    let mut out = Vec::with_capacity(indices.len() * m * dim);
    for &i in indices {
        image_patches(data.image(i), data.height, data.width, data.channels, patch, &mut out);
    }
    Tensor::matrix(indices.len() * m, dim, out)
}

/// Embeds a single `[H, W, C]` image with patch size `patch`.
pub fn embed<T: Scalar>(image: &Tensor<T>, e: &EmbeddingWeights<Tensor<T>>, patch: usize) -> Result<Tensor<T>> {
    if image.rank() != 3 {
        return Err(Error::rank("embed", 3, image.shape()));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("image {h}x{w} not divisible into {patch}x{patch} patches")));
    }
    let m = (h / patch) * (w / patch);
    if e.patch_proj.rows() != patch * patch * c || e.pos.rows() != m {
        return Err(Error::Config(format!(
            "image {h}x{w}x{c} does not match embedding {:?}/{:?}",
            e.patch_proj.shape(),
            e.pos.shape()
        )));
    }
    let pixels: Vec<f32> = image.data().iter().map(|v| v.as_f64() as f32).collect();
    let mut rows = Vec::with_capacity(m * patch * patch * c);
    image_patches(&pixels, h, w, c, patch, &mut rows);
    let patches = Tensor::matrix(m, patch * patch * c, rows)?;
    embed_apply(&patches, e)
}

//! Growing and shrinking a trained model by whole branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_branch, AggregatorWeights, ParaFormerModel};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{evaluate_stages, StageMetrics, TrainConfig, Trainer};

/// Keeps branches `1..=k` and their aggregator blocks. The result's
/// `predict` equals the original's stage-`k` logits bit for bit.
pub fn compress_keep_prefix<T: Scalar>(model: &ParaFormerModel<T>, k: usize) -> Result<ParaFormerModel<T>> {
    if k == 0 || k > model.n_branches() {
        return Err(Error::Stage {
            stage: k,
            max: model.n_branches(),
        });
    }
    let mut config = model.config.clone();
    config.n_branches = k;
    let agg = AggregatorWeights {
        per_branch: model.agg.per_branch[..k].to_vec(),
        bias: model.agg.bias.clone(),
    };
    let mut out = ParaFormerModel::from_parts(config, model.embed.clone(), model.branches[..k].to_vec(), agg)?;
    out.frozen_prefix = model.frozen_prefix.min(k);
    Ok(out)
}

/// Branch-count reduction factor `N / k`.
pub fn compression_ratio(original: usize, kept: usize) -> f64 {
    original as f64 / kept as f64
}

/// Appends a freshly initialized branch whose aggregator block is zero, so
/// predictions are unchanged until that block is trained. With
/// `freeze_existing`, every pre-existing parameter (branches, embedding and
/// aggregator bias) is excluded from later training.
pub fn expand_add_branch<T: Scalar>(
    model: &ParaFormerModel<T>,
    init_seed: u64,
    freeze_existing: bool,
) -> Result<ParaFormerModel<T>> {
    let mut config = model.config.clone();
    config.n_branches += 1;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut branches = model.branches.clone();
    branches.push(init_branch(&config, &mut rng)?);
    let mut per_branch = model.agg.per_branch.clone();
    per_branch.push(Tensor::zeros(&[config.width, config.n_classes]));
    let agg = AggregatorWeights {
        per_branch,
        bias: model.agg.bias.clone(),
    };
    let mut out = ParaFormerModel::from_parts(config, model.embed.clone(), branches, agg)?;
    out.frozen_prefix = if freeze_existing {
        model.n_branches()
    } else {
        model.frozen_prefix
    };
    Ok(out)
}

/// Per-stage metrics on the original shard before and after fine-tuning an
/// expanded model on a new shard.
#[derive(Debug, Clone)]
pub struct RetentionReport {
    pub frozen: bool,
    pub before: Vec<StageMetrics>,
    pub after: Vec<StageMetrics>,
    /// Per-stage metrics of the expanded model on the new shard after training.
    pub new_shard: Vec<StageMetrics>,
}

impl RetentionReport {
    /// Full-model accuracy on the original shard, before and after.
    pub fn full_model_accuracy(&self) -> (f64, f64) {
        let last = |v: &[StageMetrics]| v.last().map_or(0.0, |m| m.accuracy);
        (last(&self.before), last(&self.after))
    }

    pub fn render(&self) -> String {
        let mut s = format!("retention report (freeze_existing={})\n", self.frozen);
        s.push_str("stage,before_loss,before_acc,after_loss,after_acc\n");
        for a in &self.after {
            let b = self.before.iter().find(|b| b.stage == a.stage);
            let (bl, ba) = b.map_or((f64::NAN, f64::NAN), |b| (b.loss, b.accuracy));
            s.push_str(&format!("{},{bl:.6},{ba:.6},{:.6},{:.6}\n", a.stage, a.loss, a.accuracy));
        }
        s
    }
}

/// Expands `model` by one branch, trains it on `new_shard` and reports how
/// the original shard's per-stage metrics moved.
pub fn expand_and_finetune<T: Scalar>(
    model: &ParaFormerModel<T>,
    old_shard: &Dataset,
    new_shard: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
    freeze_existing: bool,
) -> Result<(ParaFormerModel<T>, Vec<StageMetrics>, RetentionReport)> {
    let before = evaluate_stages(model, old_shard, cfg.eval_batch_size)?;
    let mut expanded = expand_add_branch(model, init_seed, freeze_existing)?;
    let metrics = Trainer::new(cfg.clone()).fit(&mut expanded, new_shard, None)?;
    let after = evaluate_stages(&expanded, old_shard, cfg.eval_batch_size)?;
    let new_eval = evaluate_stages(&expanded, new_shard, cfg.eval_batch_size)?;
    let report = RetentionReport {
        frozen: freeze_existing,
        before,
        after,
        new_shard: new_eval,
    };
    Ok((expanded, metrics, report))
}

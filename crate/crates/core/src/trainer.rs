//! Training schedules and per-stage evaluation.
//!
//! * progressive: for every batch, one update per stage `i = 1..=N` on the
//!   stage-`i` loss (only branches `≤ i` are on the tape), followed by a
//!   second pass over the batches updating on the full-model loss. With a
//!   single branch the two loops coincide and run once.
//! * milestone: branch `i` joins at its milestone epoch; each batch takes
//!   one update on the loss of the currently active prefix.
//! * joint: one update per batch on the full-model loss.
//!
//! Metric rows come from evaluating every stage at the end of each epoch,
//! so all schedules report the same `(epoch, stage, split)` grid.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layer::BranchWeights;
use crate::model::{aggregate, branch_term, embed_apply, patch_matrix, ParaFormerModel};
use crate::optim::{AdamConfig, AdamW};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Progressive,
    Milestone,
    Joint,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Progressive => "progressive",
            Schedule::Milestone => "milestone",
            Schedule::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "progressive" => Some(Schedule::Progressive),
            "milestone" => Some(Schedule::Milestone),
            "joint" => Some(Schedule::Joint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    /// 1-based activation epoch of each branch (milestone schedule only).
    pub milestones: Vec<usize>,
    pub seed: u64,
    /// Batch size used for evaluation passes. Does not affect results.
    pub eval_batch_size: usize,
    /// Train only the aggregator (blocks and bias); embedding and branches
    /// stay fixed.
    pub aggregator_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            schedule: Schedule::Progressive,
            milestones: Vec::new(),
            seed: 0,
            eval_batch_size: 256,
            aggregator_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_branches: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be at least 1".into()));
        }
        if self.schedule == Schedule::Milestone {
            let ms = &self.milestones;
            if ms.len() != n_branches {
                return Err(Error::Config(format!(
                    "milestone schedule needs {n_branches} milestones, got {}",
                    ms.len()
                )));
            }
            if ms[0] != 1 {
                return Err(Error::Config("the first branch must activate at epoch 1".into()));
            }
            if ms.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Config("milestones must be non-decreasing".into()));
            }
            if let Some(&last) = ms.last() {
                if last > self.epochs {
                    return Err(Error::Config(format!(
                        "milestone {last} is beyond the {} training epochs",
                        self.epochs
                    )));
                }
            }
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 10] = [
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "schedule",
        "milestones",
        "train_seed",
    ];

    /// Applies one `key=value` setting; `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.optimizer.lr = num(key, value)?,
            "beta1" => self.optimizer.beta1 = num(key, value)?,
            "beta2" => self.optimizer.beta2 = num(key, value)?,
            "eps" => self.optimizer.eps = num(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = num(key, value)?,
            "schedule" => {
                self.schedule = Schedule::parse(value)
                    .ok_or_else(|| Error::Config(format!("schedule: unknown {value:?}")))?
            }
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "train_seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_ms: f64,
}

/// Which loss a training step optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Stage-`i` update inside the per-batch stage loop.
    Stage(usize),
    /// Full-model update (second progressive pass or joint training).
    Full,
    /// Update on the active prefix of the milestone schedule.
    Active(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEvent {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    /// Number of branches on the tape for this step.
    pub branches: usize,
    pub after: bool,
}

type Observer<'a, T> = Box<dyn FnMut(&StepEvent, &ParaFormerModel<T>) + 'a>;

/// Holds optimizer state across epochs and an optional per-step observer.
pub struct Trainer<'a, T> {
    pub cfg: TrainConfig,
    opt: AdamW<T>,
    observer: Option<Observer<'a, T>>,
    steps: usize,
}

/// Mean cross-entropy and accuracy of every stage on `data`. Pure read.
pub fn evaluate_stages<T: Scalar>(
    model: &ParaFormerModel<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<StageMetrics>> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let start = Instant::now();
    let n = model.n_branches();
    let mut loss = vec![0.0f64; n];
    let mut correct = vec![0usize; n];
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let x0 = model.embed_batch(data, idx)?;
        let labels = data.labels_of(idx);
        for (i, logits) in model.forward_all_stages(&x0)?.iter().enumerate() {
            let (l, _) = logits.cross_entropy(&labels)?;
            loss[i] += l.item().as_f64() * idx.len() as f64;
            let pred = logits.argmax_rows()?;
            correct[i] += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((0..n)
        .map(|i| StageMetrics {
            epoch: 0,
            stage: i + 1,
            split: data.split,
            loss: loss[i] / data.len() as f64,
            accuracy: correct[i] as f64 / data.len() as f64,
            wall_ms,
        })
        .collect())
}

/// Accuracy of the full model on `data`.
pub fn accuracy<T: Scalar>(model: &ParaFormerModel<T>, data: &Dataset) -> Result<f64> {
    Ok(evaluate_stages(model, data, 256)?
        .last()
        .map(|m| m.accuracy)
        .unwrap_or(0.0))
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(cfg: TrainConfig) -> Self {
        let opt = AdamW::new(cfg.optimizer);
        Trainer {
            cfg,
            opt,
            observer: None,
            steps: 0,
        }
    }

    /// Called before and after every optimizer step.
    pub fn with_observer(mut self, f: impl FnMut(&StepEvent, &ParaFormerModel<T>) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    /// Total optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.opt
    }

    /// Seeded batch order for `epoch` (1-based).
    pub fn batches(&self, len: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    fn notify(&mut self, event: StepEvent, model: &ParaFormerModel<T>) {
        if let Some(obs) = self.observer.as_mut() {
            obs(&event, model);
        }
    }

    /// One optimizer update on the loss of the first `branches` branches.
    /// Frozen parameters enter the tape as constants and are never written.
    pub fn step(
        &mut self,
        model: &mut ParaFormerModel<T>,
        data: &Dataset,
        idx: &[usize],
        branches: usize,
        epoch: usize,
        batch: usize,
        phase: Phase,
    ) -> Result<f64> {
        if branches == 0 || branches > model.n_branches() {
            return Err(Error::Stage {
                stage: branches,
                max: model.n_branches(),
            });
        }
        let mut event = StepEvent {
            epoch,
            batch,
            phase,
            branches,
            after: false,
        };
        self.notify(event, model);

        let (loss, grads) = {
            let tape = Tape::new();
            let frozen = model.frozen_prefix;
            let param = |trainable: bool, t: &Tensor<T>| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            };
            let agg_only = self.cfg.aggregator_only;
            let shared = frozen == 0;
            let embed = model.embed.map(&mut |t| param(shared && !agg_only, t));
            let bias = param(shared, &model.agg.bias);
            let mut bvars: Vec<BranchWeights<Var<'_, T>>> = Vec::with_capacity(branches);
            let mut avars = Vec::with_capacity(branches);
            for j in 0..branches {
                let trainable = j >= frozen;
                bvars.push(model.branches[j].map(&mut |t| param(trainable && !agg_only, t)));
                avars.push(param(trainable, &model.agg.per_branch[j]));
            }

            let patches = tape.constant(patch_matrix(data, idx, model.config.patch_size)?);
            let x0 = embed_apply(&patches, &embed)?;
            let m = model.tokens();
            let opts = model.config.layer_opts();
            let mut terms = Vec::with_capacity(branches);
            for j in 0..branches {
                model.count_eval(j);
                terms.push(branch_term(&x0, &bvars[j], &avars[j], m, opts)?);
            }
            let logits = aggregate(&terms, &bias)?;
            let loss = logits.cross_entropy(&data.labels_of(idx))?;
            loss.backward()?;

            let mut grads: HashMap<String, Tensor<T>> = HashMap::new();
            if shared {
                if !agg_only {
                    grads.insert("embed.patch_proj".into(), embed.patch_proj.grad());
                    grads.insert("embed.pos".into(), embed.pos.grad());
                }
                grads.insert("agg.bias".into(), bias.grad());
            }
            for j in frozen.min(branches)..branches {
                if !agg_only {
                    bvars[j].visit(&format!("branch{j}"), &mut |name, v| {
                        grads.insert(name, v.grad());
                    });
                }
                grads.insert(format!("agg.branch{j}"), avars[j].grad());
            }
            (loss.value().item().as_f64(), grads)
        };

        let mut failure = None;
        let opt = &mut self.opt;
        model.visit_params_mut(&mut |name, t| {
            if let Some(g) = grads.get(&name) {
                if let Err(e) = opt.step(&name, t, g) {
                    failure.get_or_insert(e);
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        self.steps += 1;
        event.after = true;
        self.notify(event, model);
        Ok(loss)
    }

    fn check(&self, model: &ParaFormerModel<T>, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        model.check_data(data)?;
        self.cfg.validate(model.n_branches())
    }

    /// One epoch of the progressive schedule. Returns the mean training loss
    /// of each stage's updates during the epoch.
    pub fn progressive_epoch(&mut self, model: &mut ParaFormerModel<T>, data: &Dataset, epoch: usize) -> Result<Vec<f64>> {
        self.check(model, data)?;
        let n = model.n_branches();
        let batches = self.batches(data.len(), epoch);
        let mut sums = vec![0.0; n];
        for (b, idx) in batches.iter().enumerate() {
            for i in 1..=n {
                sums[i - 1] += self.step(model, data, idx, i, epoch, b, Phase::Stage(i))?;
            }
        }
        if n > 1 {
            for (b, idx) in batches.iter().enumerate() {
                self.step(model, data, idx, n, epoch, b, Phase::Full)?;
            }
        }
        Ok(sums.iter().map(|s| s / batches.len() as f64).collect())
    }

    /// Number of active branches at `epoch` (1-based) under the milestone schedule.
    pub fn active_branches(&self, epoch: usize) -> usize {
        self.cfg.milestones.iter().filter(|&&m| m <= epoch).count()
    }

    pub fn milestone_epoch(&mut self, model: &mut ParaFormerModel<T>, data: &Dataset, epoch: usize) -> Result<f64> {
        self.check(model, data)?;
        let active = self.active_branches(epoch);
        let batches = self.batches(data.len(), epoch);
        let mut sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            sum += self.step(model, data, idx, active, epoch, b, Phase::Active(active))?;
        }
        Ok(sum / batches.len() as f64)
    }

    pub fn joint_epoch(&mut self, model: &mut ParaFormerModel<T>, data: &Dataset, epoch: usize) -> Result<f64> {
        self.check(model, data)?;
        let n = model.n_branches();
        let batches = self.batches(data.len(), epoch);
        let mut sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            sum += self.step(model, data, idx, n, epoch, b, Phase::Full)?;
        }
        Ok(sum / batches.len() as f64)
    }

    /// Runs `cfg.epochs` epochs of the configured schedule. After each epoch
    /// every stage is evaluated on `train` and, when given, on `test`.
    pub fn fit(
        &mut self,
        model: &mut ParaFormerModel<T>,
        train: &Dataset,
        test: Option<&Dataset>,
    ) -> Result<Vec<StageMetrics>> {
        self.fit_with(model, train, test, |_| {})
    }

    /// [`Trainer::fit`] with a callback receiving each epoch's rows as they
    /// are produced.
    pub fn fit_with(
        &mut self,
        model: &mut ParaFormerModel<T>,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&[StageMetrics]),
    ) -> Result<Vec<StageMetrics>> {
        self.check(model, train)?;
        if let Some(t) = test {
            model.check_data(t)?;
        }
        let mut out = Vec::new();
        for epoch in 1..=self.cfg.epochs {
            let start = Instant::now();
            match self.cfg.schedule {
                Schedule::Progressive => {
                    self.progressive_epoch(model, train, epoch)?;
                }
                Schedule::Milestone => {
                    self.milestone_epoch(model, train, epoch)?;
                }
                Schedule::Joint => {
                    self.joint_epoch(model, train, epoch)?;
                }
            }
            let train_ms = start.elapsed().as_secs_f64() * 1e3;
            let mut rows = Vec::new();
            let train_view = train.clone().with_split(Split::Train);
            for mut r in evaluate_stages(model, &train_view, self.cfg.eval_batch_size)? {
                r.epoch = epoch;
                r.wall_ms = train_ms;
                rows.push(r);
            }
            if let Some(t) = test {
                let view = t.clone().with_split(Split::Test);
                for mut r in evaluate_stages(model, &view, self.cfg.eval_batch_size)? {
                    r.epoch = epoch;
                    rows.push(r);
                }
            }
            on_epoch(&rows);
            out.extend(rows);
        }
        Ok(out)
    }
}

/// One progressive epoch with a fresh optimizer.
pub fn progressive_epoch<T: Scalar>(model: &mut ParaFormerModel<T>, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    Trainer::new(cfg.clone()).progressive_epoch(model, data, 1)
}

pub fn milestone_train<T: Scalar>(
    model: &mut ParaFormerModel<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<StageMetrics>> {
    let cfg = TrainConfig {
        schedule: Schedule::Milestone,
        ..cfg.clone()
    };
    Trainer::new(cfg).fit(model, data, test)
}

pub fn joint_train<T: Scalar>(
    model: &mut ParaFormerModel<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<StageMetrics>> {
    let cfg = TrainConfig {
        schedule: Schedule::Joint,
        ..cfg.clone()
    };
    Trainer::new(cfg).fit(model, data, test)
}

pub fn progressive_train<T: Scalar>(
    model: &mut ParaFormerModel<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<StageMetrics>> {
    let cfg = TrainConfig {
        schedule: Schedule::Progressive,
        ..cfg.clone()
    };
    Trainer::new(cfg).fit(model, data, test)
}

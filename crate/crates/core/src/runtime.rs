//! Branch-parallel inference on a long-lived worker pool.
//!
//! Each call sends every worker the shared embedding `X₀` plus handles to
//! the branches assigned to it (round-robin by branch index). Workers only
//! talk to the coordinating thread; there is no channel between workers.
//! The coordinator waits for every branch term and sums them in ascending
//! branch order with the same code path as [`ParaFormerModel::predict`], so
//! the result is bitwise identical to the sequential one.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::{BranchWeights, LayerOpts};
use crate::model::{aggregate, branch_term, ParaFormerModel};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pinning {
    #[default]
    None,
    /// Worker `w` is pinned to CPU `w mod ncpu`.
    RoundRobin,
}

impl Pinning {
    pub fn name(self) -> &'static str {
        match self {
            Pinning::None => "none",
            Pinning::RoundRobin => "round-robin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Pinning::None),
            "round-robin" => Some(Pinning::RoundRobin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub workers: usize,
    pub batch_size: usize,
    pub pinning: Pinning,
}

impl PoolConfig {
    pub fn new(workers: usize, batch_size: usize) -> Self {
        PoolConfig {
            workers,
            batch_size,
            pinning: Pinning::None,
        }
    }
}

struct BranchJob<T> {
    index: usize,
    branch: BranchWeights<Tensor<T>>,
    agg_block: Tensor<T>,
}

struct Task<T> {
    x0: Tensor<T>,
    tokens: usize,
    opts: LayerOpts,
    jobs: Vec<BranchJob<T>>,
    reply: Sender<Reply<T>>,
}

struct Reply<T> {
    worker: usize,
    /// `(branch index, term, compute ms)` in job order.
    terms: Result<Vec<(usize, Tensor<T>, f64)>>,
}

/// Data movement observed during the most recent call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficStats {
    /// Messages from the coordinator to workers (one per busy worker).
    pub dispatches: usize,
    /// Messages from workers back to the coordinator.
    pub replies: usize,
    /// Messages exchanged directly between workers. Always zero: workers
    /// hold no channel to each other.
    pub inter_worker: usize,
    /// Which worker evaluated each branch.
    pub branch_worker: Vec<usize>,
    /// Per-branch compute time in milliseconds.
    pub branch_ms: Vec<f64>,
}

pub struct WorkerPool<T: Scalar> {
    senders: Vec<Sender<Task<T>>>,
    handles: Vec<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
    pub config: PoolConfig,
    last: TrafficStats,
}

fn worker_loop<T: Scalar>(id: usize, rx: Receiver<Task<T>>, stop: Arc<AtomicBool>) {
    while let Ok(task) = rx.recv() {
        if stop.load(Ordering::SeqCst) {
            // Dropping the reply sender unanswered tells the coordinator the
            // pool went away mid-call.
            return;
        }
        let terms = task
            .jobs
            .iter()
            .map(|job| {
                let start = Instant::now();
                let term = branch_term(&task.x0, &job.branch, &job.agg_block, task.tokens, task.opts)?;
                Ok((job.index, term, start.elapsed().as_secs_f64() * 1e3))
            })
            .collect();
        if task.reply.send(Reply { worker: id, terms }).is_err() {
            return;
        }
    }
}

#[cfg(target_os = "linux")]
fn pin_current_thread(cpu: usize) -> bool {
    // SAFETY: cpu_set_t is plain data; the calls only read it and affect the
    // calling thread.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_current_thread(_cpu: usize) -> bool {
    false
}

impl<T: Scalar> WorkerPool<T> {
    pub fn new(config: PoolConfig) -> Result<Self> {
        if config.workers == 0 || config.batch_size == 0 {
            return Err(Error::Config("pool needs at least one worker and batch size 1".into()));
        }
        let stop = Arc::new(AtomicBool::new(false));
        let ncpu = thread::available_parallelism().map_or(1, |n| n.get());
        let mut senders = Vec::with_capacity(config.workers);
        let mut handles = Vec::with_capacity(config.workers);
        for id in 0..config.workers {
            let (tx, rx) = mpsc::channel::<Task<T>>();
            let stop = Arc::clone(&stop);
            let pinning = config.pinning;
            let handle = thread::Builder::new()
                .name(format!("branch-worker-{id}"))
                .spawn(move || {
                    if pinning == Pinning::RoundRobin && !pin_current_thread(id % ncpu) {
                        log::warn!("could not pin worker {id} to cpu {}", id % ncpu);
                    }
                    worker_loop(id, rx, stop)
                })
                .map_err(|e| Error::Runtime(format!("spawning worker {id}: {e}")))?;
            senders.push(tx);
            handles.push(handle);
        }
        Ok(WorkerPool {
            senders,
            handles,
            stop,
            config,
            last: TrafficStats::default(),
        })
    }

    pub fn workers(&self) -> usize {
        self.senders.len()
    }

    /// Asks workers to exit. Calls in flight and later calls fail with a
    /// runtime error.
    pub fn request_shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_shut_down(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn last_traffic(&self) -> &TrafficStats {
        &self.last
    }

    /// Full-model logits for `x0` (`[B·m, D]`), computed branch-parallel.
    pub fn parallel_predict(&mut self, x0: &Tensor<T>, model: &ParaFormerModel<T>) -> Result<Tensor<T>> {
        let n = model.n_branches();
        let m = model.tokens();
        let (rows, cols) = x0.dims2("parallel_predict")?;
        if cols != model.config.width || rows % m != 0 {
            return Err(Error::shape("parallel_predict", x0.shape(), &[m, model.config.width]));
        }
        let active = self.workers().min(n);
        let mut per_worker: Vec<Vec<BranchJob<T>>> = (0..active).map(|_| Vec::new()).collect();
        for j in 0..n {
            per_worker[j % active].push(BranchJob {
                index: j,
                branch: model.branches[j].clone(),
                agg_block: model.agg.per_branch[j].clone(),
            });
        }

        let (reply_tx, reply_rx) = mpsc::channel();
        let mut traffic = TrafficStats {
            branch_worker: vec![usize::MAX; n],
            branch_ms: vec![0.0; n],
            ..TrafficStats::default()
        };
        for (w, jobs) in per_worker.into_iter().enumerate() {
            let task = Task {
                x0: x0.clone(),
                tokens: m,
                opts: model.config.layer_opts(),
                jobs,
                reply: reply_tx.clone(),
            };
            self.senders[w]
                .send(task)
                .map_err(|_| Error::Runtime(format!("worker {w} is gone")))?;
            traffic.dispatches += 1;
        }
        drop(reply_tx);

        let mut terms: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut failure = None;
        for _ in 0..active {
            let reply = reply_rx
                .recv()
                .map_err(|_| Error::Runtime("worker pool shut down during the call".into()))?;
            traffic.replies += 1;
            match reply.terms {
                Ok(list) => {
                    for (j, term, ms) in list {
                        traffic.branch_worker[j] = reply.worker;
                        traffic.branch_ms[j] = ms;
                        terms[j] = Some(term);
                    }
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        let terms = terms
            .into_iter()
            .enumerate()
            .map(|(j, t)| t.ok_or_else(|| Error::Runtime(format!("branch {j} produced no result"))))
            .collect::<Result<Vec<_>>>()?;
        for j in 0..n {
            model.count_eval(j);
        }
        self.last = traffic;
        aggregate(&terms, &model.agg.bias)
    }

    /// Logits for every sample of `data`, batched by the pool's batch size.
    pub fn predict_dataset(&mut self, model: &ParaFormerModel<T>, data: &Dataset) -> Result<Tensor<T>> {
        let all: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::new();
        for idx in all.chunks(self.config.batch_size) {
            let x0 = model.embed_batch(data, idx)?;
            out.push(self.parallel_predict(&x0, model)?);
        }
        Tensor::concat_rows(&out)
    }
}

impl<T: Scalar> Drop for WorkerPool<T> {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.senders.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

pub const WARMUP_PASSES: usize = 2;
pub const TIMED_PASSES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub workers: usize,
    pub batch_size: usize,
    pub pinning: Pinning,
    pub n_branches: usize,
    pub layers_per_branch: usize,
    pub width: usize,
    pub samples: usize,
    /// Median wall time of one pass over the evaluation set.
    pub median_ms: f64,
    pub times_ms: Vec<f64>,
    /// Baseline median over this config's median, baseline measured in the same run.
    pub speedup: f64,
    /// Mean per-branch compute time per pass.
    pub per_branch_ms: Vec<f64>,
    /// Logits bitwise equal to the baseline's.
    pub outputs_match: bool,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

fn bench_one<T: Scalar>(
    model: &ParaFormerModel<T>,
    data: &Dataset,
    cfg: PoolConfig,
) -> Result<(BenchReport, Tensor<T>)> {
    let mut pool = WorkerPool::new(cfg)?;
    let n = model.n_branches();
    let mut logits = None;
    for _ in 0..WARMUP_PASSES {
        logits = Some(pool.predict_dataset(model, data)?);
    }
    let mut times = Vec::with_capacity(TIMED_PASSES);
    let mut branch_ms = vec![0.0; n];
    for _ in 0..TIMED_PASSES {
        let start = Instant::now();
        let all: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::new();
        for idx in all.chunks(cfg.batch_size) {
            let x0 = model.embed_batch(data, idx)?;
            out.push(pool.parallel_predict(&x0, model)?);
            for (acc, ms) in branch_ms.iter_mut().zip(&pool.last_traffic().branch_ms) {
                *acc += ms;
            }
        }
        times.push(start.elapsed().as_secs_f64() * 1e3);
        logits = Some(Tensor::concat_rows(&out)?);
    }
    let report = BenchReport {
        workers: cfg.workers,
        batch_size: cfg.batch_size,
        pinning: cfg.pinning,
        n_branches: n,
        layers_per_branch: model.config.layers_per_branch,
        width: model.config.width,
        samples: data.len(),
        median_ms: median(&times),
        times_ms: times,
        speedup: 1.0,
        per_branch_ms: branch_ms.iter().map(|t| t / TIMED_PASSES as f64).collect(),
        outputs_match: true,
    };
    Ok((report, logits.expect("at least one pass")))
}

/// Times inference over `data` for each pool config. The first report is the
/// single-worker baseline (same batch size and pinning as the first config);
/// every speedup is relative to it.
pub fn bench_inference<T: Scalar>(
    model: &ParaFormerModel<T>,
    data: &Dataset,
    configs: &[PoolConfig],
) -> Result<Vec<BenchReport>> {
    if data.is_empty() {
        return Err(Error::Data("benchmark needs a nonempty dataset".into()));
    }
    let first = configs
        .first()
        .copied()
        .unwrap_or_else(|| PoolConfig::new(1, 64));
    let baseline_cfg = PoolConfig { workers: 1, ..first };
    let (baseline, reference) = bench_one(model, data, baseline_cfg)?;
    let mut out = vec![baseline.clone()];
    for &cfg in configs {
        let (mut r, logits) = bench_one(model, data, cfg)?;
        r.speedup = baseline.median_ms / r.median_ms;
        r.outputs_match = logits.bitwise_eq(&reference);
        out.push(r);
    }
    Ok(out)
}

//! CSV output for metrics, pooled branch features and benchmark results.
//! Floats are written in shortest round-trip form.

use std::fs::File;
use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ParaFormerModel;
use crate::runtime::BenchReport;
use crate::tensor::Scalar;
use crate::trainer::StageMetrics;

pub const METRICS_HEADER: [&str; 6] = ["epoch", "stage", "split", "loss", "accuracy", "wall_ms"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(rows: &[StageMetrics], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.stage.to_string(),
            r.split.name().to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
            r.wall_ms.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish(w, path)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StageMetrics>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    let bad = |field: &str| Error::Format(format!("{}: bad {field}", path.display()));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let split = match &rec[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad("split")),
        };
        out.push(StageMetrics {
            epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
            stage: rec[1].parse().map_err(|_| bad("stage"))?,
            split,
            loss: rec[3].parse().map_err(|_| bad("loss"))?,
            accuracy: rec[4].parse().map_err(|_| bad("accuracy"))?,
            wall_ms: rec[5].parse().map_err(|_| bad("wall_ms"))?,
        });
    }
    Ok(out)
}

/// One row per `(sample, branch)`: the branch's mean-pooled token features.
pub fn write_features_csv<T: Scalar>(
    model: &ParaFormerModel<T>,
    data: &Dataset,
    path: &Path,
    batch_size: usize,
) -> Result<usize> {
    let d = model.config.width;
    let mut w = writer(path)?;
    let mut header = vec!["sample_id".to_string(), "branch".to_string()];
    header.extend((0..d).map(|k| format!("dim_{k}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut rows = 0;
    for idx in all.chunks(batch_size.max(1)) {
        let x0 = model.embed_batch(data, idx)?;
        let pooled: Vec<_> = (1..=model.n_branches())
            .map(|j| model.pooled_features(&x0, j))
            .collect::<Result<_>>()?;
        for (b, &sample) in idx.iter().enumerate() {
            for (j, feats) in pooled.iter().enumerate() {
                let mut rec = vec![sample.to_string(), (j + 1).to_string()];
                rec.extend((0..d).map(|k| feats.at(b, k).to_string()));
                rec.push(data.labels[sample].to_string());
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
                rows += 1;
            }
        }
    }
    finish(w, path)?;
    Ok(rows)
}

pub const BENCH_HEADER: [&str; 12] = [
    "workers",
    "batch_size",
    "pinning",
    "n_branches",
    "layers_per_branch",
    "width",
    "samples",
    "median_ms",
    "speedup",
    "outputs_match",
    "times_ms",
    "per_branch_ms",
];

/// Benchmark rows; the two list columns are `;`-separated.
pub fn write_bench_csv(reports: &[BenchReport], path: &Path) -> Result<()> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
    let mut w = writer(path)?;
    w.write_record(BENCH_HEADER).map_err(|e| csv_err(path, e))?;
    for r in reports {
        w.write_record([
            r.workers.to_string(),
            r.batch_size.to_string(),
            r.pinning.name().to_string(),
            r.n_branches.to_string(),
            r.layers_per_branch.to_string(),
            r.width.to_string(),
            r.samples.to_string(),
            r.median_ms.to_string(),
            r.speedup.to_string(),
            r.outputs_match.to_string(),
            join(&r.times_ms),
            join(&r.per_branch_ms),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish(w, path)
}

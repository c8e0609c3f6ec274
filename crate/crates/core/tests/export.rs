use paraformer::data::{load_idx, synth_clusters, Split};
use paraformer::export::{read_metrics_csv, write_features_csv, write_metrics_csv, METRICS_HEADER};
use paraformer::model::{ModelConfig, ParaFormerModel};
use paraformer::optim::AdamConfig;
use paraformer::trainer::{TrainConfig, Trainer};
use paraformer::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_branches: 3,
        layers_per_branch: 1,
        width: 4,
        heads: 2,
        ffn_width: 8,
        patch_size: 2,
        image_height: 4,
        image_width: 4,
        image_channels: 1,
        n_classes: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn metrics_round_trip_with_one_row_per_epoch_stage_split() {
    let train = synth_clusters(1, 2, 24, (4, 4, 1), 0.2).unwrap();
    let test = synth_clusters(2, 2, 8, (4, 4, 1), 0.2).unwrap().with_split(Split::Test);
    let mut model = ParaFormerModel::<f32>::init(tiny()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        optimizer: AdamConfig::default(),
        ..TrainConfig::default()
    };
    let rows = Trainer::new(cfg).fit(&mut model, &train, Some(&test)).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(text.lines().count(), 13);
    let back = read_metrics_csv(&path).unwrap();
    assert_eq!(back, rows);
}

#[test]
fn empty_metrics_file_has_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,stage,split,loss,accuracy,wall_ms\n");
    assert!(read_metrics_csv(&path).unwrap().is_empty());

    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    assert!(matches!(read_metrics_csv(&path), Err(Error::Format(_))));
}

#[test]
fn feature_rows_cover_every_sample_and_branch() {
    let data = synth_clusters(4, 2, 5, (4, 4, 1), 0.2).unwrap();
    let model = ParaFormerModel::<f32>::init(tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    assert_eq!(write_features_csv(&model, &data, &path, 2).unwrap(), 15);

    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["sample_id", "branch", "dim_0", "dim_1", "dim_2", "dim_3", "label"]);
    let recs: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 15);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r[0].parse::<usize>().unwrap(), i / 3);
        assert_eq!(r[1].parse::<usize>().unwrap(), i % 3 + 1);
        assert_eq!(r[6].parse::<usize>().unwrap(), data.labels[i / 3]);
    }
    // Features match the model's own pooling.
    let x0 = model.embed_batch(&data, &[4]).unwrap();
    let f = model.pooled_features(&x0, 2).unwrap();
    let row = &recs[4 * 3 + 1];
    for k in 0..4 {
        assert_eq!(row[2 + k].parse::<f32>().unwrap(), f.at(0, k));
    }
}

fn idx_images(n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, h, w] {
        b.extend_from_slice(&(v as u32).to_be_bytes());
    }
    b.extend((0..n * h * w).map(|i| (i % 256) as u8));
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_files_load_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, idx_images(3, 2, 2)).unwrap();
    std::fs::write(&lp, idx_labels(&[1, 0, 2])).unwrap();
    let d = load_idx(&ip, &lp, Split::Test).unwrap();
    assert_eq!((d.len(), d.height, d.width, d.channels), (3, 2, 2, 1));
    assert_eq!(d.labels, vec![1, 0, 2]);
    assert_eq!(d.image(1), &[4.0 / 255.0, 5.0 / 255.0, 6.0 / 255.0, 7.0 / 255.0]);
    assert_eq!(d.split, Split::Test);

    std::fs::write(&lp, idx_labels(&[1, 0])).unwrap();
    assert!(matches!(load_idx(&ip, &lp, Split::Test), Err(Error::Data(_))));
    let mut short = idx_images(3, 2, 2);
    short.pop();
    std::fs::write(&ip, short).unwrap();
    assert!(matches!(load_idx(&ip, &lp, Split::Test), Err(Error::Format(_))));
    assert!(matches!(
        load_idx(&dir.path().join("nope"), &lp, Split::Test),
        Err(Error::Io { .. })
    ));
}

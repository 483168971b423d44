//! File round trips for checkpoints, result tables, CSV data and configs.

use std::fs;
use std::sync::Arc;

use tmc_core::io::checkpoint::{read_header, CheckpointKind};
use tmc_core::io::{
    load_base, load_csv_split, load_tangent, read_results, save_base, save_tangent, write_results,
    CheckpointMeta, CsvSchema, ExperimentConfig, ResultRow,
};
use tmc_core::{Activation, BaseModel, Error, NetworkSpec, ParamVector, TangentModel};

fn anchor() -> Arc<BaseModel> {
    Arc::new(BaseModel::init(
        NetworkSpec::mlp(4, &[6, 5], 3, Activation::LeakyRelu { slope: 0.05 }).unwrap(),
        3,
    ))
}

fn component(base: &Arc<BaseModel>, s: f64, id: u32) -> TangentModel {
    let d = (0..base.spec().param_count())
        .map(|i| s * ((i as f64) * 0.7).cos())
        .collect();
    TangentModel::component(Arc::clone(base), ParamVector::from_vec(d))
        .unwrap()
        .tracked(id)
}

#[test]
fn checkpoints_round_trip_bit_exactly_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let base = anchor();
    let meta = CheckpointMeta {
        seed: Some(9),
        config_digest: None,
    };
    let bp = dir.path().join("base.ckpt");
    save_base(&bp, &base, &meta).unwrap();
    let (back, m) = load_base(&bp).unwrap();
    assert_eq!(back.weights(), base.weights());
    assert_eq!(back.spec(), base.spec());
    assert_eq!(m, meta);

    let mut composed = TangentModel::at_anchor_tracked(Arc::clone(&base));
    for (i, s) in [0.3, -0.2, 0.5].into_iter().enumerate() {
        composed = composed
            .absorb_next(&component(&base, s, i as u32 + 1))
            .unwrap();
    }
    let tp = dir.path().join("composed.ckpt");
    save_tangent(&tp, &composed, &CheckpointMeta::default()).unwrap();
    let loaded_base = Arc::new(back);
    let (loaded, _) = load_tangent(&tp, &loaded_base).unwrap();
    let bits = |p: &ParamVector| p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(loaded.delta()), bits(composed.delta()));

    // Unlearning after a reload gives the same model as before it.
    let a = composed.unlearn(2, true).unwrap();
    let b = loaded.unlearn(2, true).unwrap();
    assert_eq!(bits(a.delta()), bits(b.delta()));

    let header = read_header(&tp).unwrap();
    assert_eq!(header.kind, CheckpointKind::Tangent);
    assert_eq!(header.task_count, 3);
    assert_eq!(header.value_count, 4 * base.spec().param_count());

    // Saving the same model twice gives identical bytes.
    let again = dir.path().join("again.ckpt");
    save_tangent(&again, &loaded, &CheckpointMeta::default()).unwrap();
    assert_eq!(fs::read(&tp).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn damaged_checkpoint_files_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let base = anchor();
    let p = dir.path().join("c.ckpt");
    save_tangent(&p, &component(&base, 1.0, 1), &CheckpointMeta::default()).unwrap();
    let mut bytes = fs::read(&p).unwrap();
    let mid = bytes.len() - 20;
    bytes[mid] ^= 0x40;
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(
        load_tangent(&p, &base),
        Err(Error::ChecksumMismatch)
    ));
    assert!(matches!(
        load_base(dir.path().join("missing.ckpt")),
        Err(Error::Io { .. })
    ));
    fs::write(&p, b"not a checkpoint").unwrap();
    assert!(matches!(load_base(&p), Err(Error::Checkpoint(_))));
}

#[test]
fn result_tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        ResultRow {
            dataset: "d".into(),
            protocol: "class_incremental".into(),
            tasks: 5,
            method: "tmc".into(),
            accuracy: 1.0 / 3.0,
            inference_us_per_sample: Some(12.5),
            train_seconds: None,
            seed: 4,
        },
        ResultRow {
            dataset: "d".into(),
            protocol: "data_incremental".into(),
            tasks: 5,
            method: "naive_seq".into(),
            accuracy: 0.1,
            inference_us_per_sample: None,
            train_seconds: Some(0.25),
            seed: 4,
        },
    ];
    let p = dir.path().join("r.csv");
    write_results(&rows, &p).unwrap();
    assert_eq!(read_results(&p).unwrap(), rows);
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("dataset,protocol,tasks,method,accuracy,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn csv_split_uses_training_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    fs::write(&train, "a,b,label\n0,10,0\n2,30,1\n4,20,1\n").unwrap();
    fs::write(&test, "a,b,label\n2,20,0\n").unwrap();
    let schema = CsvSchema {
        standardize: true,
        ..CsvSchema::default()
    };
    let (tr, te) = load_csv_split(&train, &test, &schema).unwrap();
    assert_eq!(tr.len(), 3);
    assert_eq!(tr.num_classes(), 2);
    // The test row sits at the training mean, so it standardizes to zero.
    assert!(te.sample(0).0.iter().all(|v| v.abs() < 1e-12));
    fs::write(&test, "a,b,label\n1,x,0\n").unwrap();
    assert!(matches!(
        load_csv_split(&train, &test, &schema),
        Err(Error::Data(_))
    ));
}

#[test]
fn config_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("exp");
    fs::create_dir(&sub).unwrap();
    fs::write(
        sub.join("train.csv"),
        "x,label\n0,0\n1,1\n2,0\n3,1\n4,0\n5,1\n",
    )
    .unwrap();
    fs::write(sub.join("test.csv"), "x,label\n0.5,0\n2.5,1\n").unwrap();
    let text = r#"
name = "csv"
protocols = ["data_incremental"]
num_tasks = 2
methods = ["tmc"]
seeds = [1]
output_dir = "results"

[dataset]
source = "csv"
train = "train.csv"
test = "test.csv"

[network]
hidden = [3]

[pretrain]
fraction = 0.34
"#;
    let cfg_path = sub.join("exp.toml");
    fs::write(&cfg_path, text).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.output_dir, sub.join("results"));
    let round = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(round, cfg);

    fs::write(&cfg_path, text.replace("num_tasks = 2", "num_tasks = 0")).unwrap();
    assert!(matches!(
        ExperimentConfig::load(&cfg_path),
        Err(Error::Config { .. })
    ));
}

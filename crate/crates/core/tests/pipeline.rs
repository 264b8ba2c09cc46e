use std::collections::{BTreeSet, HashMap};

use blp_core::eval::{evaluate, split_dataset, train_model, Split, TrainConfig};
use blp_core::ingest::Manifest;
use blp_core::models::{CyclePatchConfig, InterEncoder, ModelCheckpoint, ModelSpec};
use blp_core::preprocess::{make_dataset, read_cache, write_cache, LabelingOptions};
use blp_core::synth::{generate_fleet, read_labels, SynthConfig};
use tempfile::TempDir;

fn small_spec() -> ModelSpec {
    ModelSpec::Cpmlp(CyclePatchConfig {
        d1: 4,
        d2: 8,
        intra_layers: 1,
        inter: InterEncoder::MlpStack { layers: 1, hidden: 8 },
        ..CyclePatchConfig::default()
    })
}

#[test]
fn written_fleet_trains_and_round_trips_through_disk() {
    let tmp = TempDir::new().unwrap();
    let cfg = SynthConfig {
        n_batteries: 12,
        ..SynthConfig::default()
    };
    let fleet = generate_fleet(&cfg, 11).unwrap();
    fleet.write(tmp.path()).unwrap();

    let labels = read_labels(tmp.path().join("labels.csv")).unwrap();
    assert_eq!(labels.len(), 12);

    let manifest = Manifest::load(tmp.path().join("manifest.json")).unwrap();
    let s: BTreeSet<usize> = [20, 40].into_iter().collect();
    let ds = make_dataset(&manifest, &s, &LabelingOptions::default()).unwrap();
    let labeled = labels.iter().filter(|r| r.expected_label.is_some()).count();
    assert_eq!(ds.samples.len(), 2 * labeled);
    for sample in &ds.samples {
        let row = labels.iter().find(|r| r.id == sample.battery_id).unwrap();
        let truth = row.expected_label.unwrap() as i64;
        assert!((sample.label as i64 - truth).abs() <= 2, "{} vs {truth}", sample.label);
    }

    let cache = tmp.path().join("samples.blpt");
    write_cache(&cache, &ds.samples).unwrap();
    let conditions: HashMap<_, _> = ds.samples.iter().map(|x| (x.battery_id.clone(), x.condition.clone())).collect();
    let cached = read_cache(&cache, &conditions).unwrap();
    assert_eq!(cached.len(), ds.samples.len());
    for (a, b) in cached.iter().zip(&ds.samples) {
        assert_eq!(a.battery_id, b.battery_id);
        assert_eq!(a.usable_cycles, b.usable_cycles);
        assert_eq!(a.data(), b.data());
    }

    let split = split_dataset(&cached, 5).unwrap();
    let (train, val, test) = (
        split.select(&cached, Split::Train),
        split.select(&cached, Split::Val),
        split.select(&cached, Split::Test),
    );
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let outcome = train_model(&small_spec(), &train, &val, &cfg, 5).unwrap();
    assert!(!outcome.untrained);
    let path = tmp.path().join("model.blpw");
    outcome.checkpoint.write(&path).unwrap();
    let loaded = ModelCheckpoint::read(&path).unwrap();
    assert_eq!(loaded.to_bytes(), outcome.checkpoint.to_bytes());
    let before = evaluate(&outcome.checkpoint, &test, 0.15).unwrap();
    let after = evaluate(&loaded, &test, 0.15).unwrap();
    assert_eq!(before, after);
}

mod common;

use std::collections::BTreeMap;

use common::*;
use normlab::data::{make_synthetic, BatchIterator, Dataset, Split};
use normlab::harness::config::{DataSource, GridSpace, TrainConfig};
use normlab::harness::grid::{best_cell, grid_search, IndexEntry, RunStatus, INDEX_FILE, SUMMARY_FILE};
use normlab::harness::train::{self, RunRecord};
use normlab::harness::GridSummary;
use normlab::optim::{zero_grads, Optimizer, OptimizerKind};
use normlab::resnet::{Model, ModelConfig};
use normlab::tensor::ParamStore;
use normlab::{NormScheme, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, -bound, bound)
}

#[test]
fn two_layer_conv_net_fits_synthetic_data() {
    let data = make_synthetic(200, 4, 8, Split::Train, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let k1 = store.add("k1", kaiming(&mut rng, &[8, 3, 3, 3]).with_requires_grad(true));
    let k2 = store.add("k2", kaiming(&mut rng, &[8, 8, 3, 3]).with_requires_grad(true));
    let w = store.add("w", kaiming(&mut rng, &[4, 8]).with_requires_grad(true));
    let b = store.add("b", Tensor::zeros(vec![4]).unwrap().with_requires_grad(true));
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2).unwrap();

    let forward = |store: &ParamStore, tape: &mut Tape, images: Tensor| {
        let x = tape.constant(images);
        let (k1, k2, w, b) = (tape.param(store, k1), tape.param(store, k2), tape.param(store, w), tape.param(store, b));
        let h = tape.conv2d(x, k1, 1, 1).unwrap();
        let h = tape.relu(h).unwrap();
        let h = tape.conv2d(h, k2, 1, 1).unwrap();
        let h = tape.relu(h).unwrap();
        let p = tape.global_avg_pool(h).unwrap();
        tape.linear(p, w, b).unwrap()
    };
    let mut step = 0;
    'outer: for epoch in 0.. {
        for batch in BatchIterator::shuffled(&data, 20, epoch, true).unwrap() {
            if step == 200 {
                break 'outer;
            }
            zero_grads(&mut store);
            let mut tape = Tape::new();
            let logits = forward(&store, &mut tape, batch.images);
            let loss = tape.softmax_cross_entropy(logits, &batch.labels).unwrap();
            tape.backward(loss, &mut store).unwrap();
            opt.step(&mut store).unwrap();
            step += 1;
        }
    }
    let (images, labels) = data.gather(&(0..data.len()).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let logits = forward(&store, &mut tape, images);
    let correct = tape
        .value(logits)
        .chunks(4)
        .zip(&labels)
        .filter(|(row, &l)| row.iter().enumerate().all(|(i, &v)| i == l || v < row[l]))
        .count();
    let acc = correct as f64 / labels.len() as f64;
    assert!(acc >= 0.95, "train accuracy {acc} after 200 steps");
}

#[test]
fn random_init_scores_chance_on_balanced_labels() {
    // Labels are shuffled independently of the images, so any fixed
    // classifier has expected accuracy 1/10; 0.05 is over seven binomial
    // standard deviations at n = 2000.
    let images = make_synthetic(2000, 10, 16, Split::Validation, 8).unwrap();
    let mut labels = images.labels().to_vec();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let pixels = (0..images.len()).flat_map(|i| images.raw_image(i).to_vec()).collect();
    let data = Dataset::new(pixels, labels, 16, 10, Split::Validation).unwrap();
    assert_eq!(data.class_counts(), vec![200; 10]);
    for scheme in [NormScheme::BatchNorm, NormScheme::None] {
        let mut config = ModelConfig::preset("resnet-tiny", scheme, 10).unwrap();
        config.base_width = 8;
        let mut model = Model::build(&config, 4).unwrap();
        let acc = train::accuracy(&mut model, &data, 250).unwrap();
        assert!((acc - 0.1).abs() <= 0.05, "{scheme}: accuracy {acc}");
    }
}

#[test]
fn none_model_loss_falls_over_fifty_steps() {
    let data = make_synthetic(100, 4, 8, Split::Train, 2).unwrap();
    let mut config = ModelConfig::preset("resnet-tiny", NormScheme::None, 4).unwrap();
    config.base_width = 4;
    let mut model = Model::build(&config, 0).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2).unwrap();
    let losses = train_steps(&mut model, &mut opt, &data, 10, 50, 0);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
}

#[test]
fn identical_configs_give_identical_records() {
    let config = TrainConfig {
        base_width: Some(4),
        epochs: 2,
        data: DataSource::Synthetic { train: 60, validation: 20, classes: 4, image_size: 8 },
        ..TrainConfig::default()
    };
    let a = train::train_run(&config, None).unwrap();
    let b = train::train_run(&config, None).unwrap();
    assert!(a.same_outcome(&b));
    assert_eq!(a.epochs.len(), 2);
    assert!(a.epochs.iter().all(|e| (0.0..=1.0).contains(&e.train_accuracy) && (0.0..=1.0).contains(&e.validation_accuracy)));
    let other = train::train_run(&TrainConfig { seed: 1, ..config }, None).unwrap();
    assert!(!a.same_outcome(&other));
}

fn grid_base() -> TrainConfig {
    TrainConfig {
        base_width: Some(4),
        epochs: 1,
        batch_size: 10,
        data: DataSource::Synthetic { train: 40, validation: 20, classes: 4, image_size: 8 },
        ..TrainConfig::default()
    }
}

#[test]
fn grid_records_every_repeat_and_reports_failures() {
    let base = grid_base();
    let (train_set, validation) = base.data.load().unwrap();
    let space = GridSpace { lrs: vec![1e-3, 1e-2], batch_sizes: vec![10, 500], ..GridSpace::single(base) };
    let dir = tempfile::tempdir().unwrap();
    let out = grid_search(&space, 2, 1, &train_set, &validation, Some(dir.path())).unwrap();
    assert_eq!(out.summary.cells.len(), 4);
    assert_eq!(out.records.len(), 4);
    for cell in &out.summary.cells {
        if cell.cell.batch_size == 500 {
            assert_eq!(cell.status, RunStatus::Failed);
            assert_eq!((cell.completed, cell.failed), (0, 2));
            assert!(cell.mean_validation_accuracy.is_none());
        } else {
            assert_eq!(cell.status, RunStatus::Ok);
            assert_eq!(cell.completed, 2);
        }
    }
    let seeds: Vec<u64> = out.records.iter().filter(|r| r.config.lr == 1e-3).map(|r| r.config.seed).collect();
    assert_eq!(seeds, vec![0, 1]);

    let index: Vec<IndexEntry> = std::fs::read_to_string(dir.path().join(INDEX_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(index.len(), 8);
    assert_eq!(index.iter().filter(|e| e.status == RunStatus::Failed).count(), 4);
    assert!(index.iter().filter(|e| e.status == RunStatus::Failed).all(|e| e.error.as_deref().is_some_and(|m| m.contains("batch size"))));
}

#[test]
fn summary_argmax_matches_persisted_records() {
    let base = grid_base();
    let (train_set, validation) = base.data.load().unwrap();
    let space = GridSpace {
        norms: vec![NormScheme::BatchNorm, NormScheme::None],
        lrs: vec![1e-3, 3e-2],
        ..GridSpace::single(base)
    };
    let dir = tempfile::tempdir().unwrap();
    let out = grid_search(&space, 2, 2, &train_set, &validation, Some(dir.path())).unwrap();

    // Recompute from the record files alone.
    let summary: GridSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary, out.summary);
    let mut per_cell: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for entry in std::fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap().lines() {
        let entry: IndexEntry = serde_json::from_str(entry).unwrap();
        let record = RunRecord::read(&dir.path().join(entry.record.unwrap())).unwrap();
        per_cell.entry(entry.cell).or_default().push((entry.repeat, record.final_validation_accuracy));
    }
    let keys: Vec<String> = space.cells().iter().map(|c| c.key()).collect();
    let means: Vec<Option<f64>> = keys
        .iter()
        .map(|k| {
            // Workers finish in any order; average in repeat order.
            let mut v = per_cell[k].clone();
            v.sort_by_key(|&(r, _)| r);
            Some(v.iter().map(|&(_, a)| a).sum::<f64>() / v.len() as f64)
        })
        .collect();
    let mut best = 0;
    for i in 1..means.len() {
        if means[i].unwrap() > means[best].unwrap() {
            best = i;
        }
    }
    assert_eq!(best_cell(&means), Some(best));
    assert_eq!(summary.best.as_deref(), Some(keys[best].as_str()));
}

#[test]
fn parallel_workers_do_not_change_runs() {
    let base = grid_base();
    let (train_set, validation) = base.data.load().unwrap();
    let space = GridSpace { lrs: vec![1e-3, 1e-2, 3e-3], ..GridSpace::single(base) };
    let serial = grid_search(&space, 1, 1, &train_set, &validation, None).unwrap();
    let parallel = grid_search(&space, 1, 3, &train_set, &validation, None).unwrap();
    assert_eq!(serial.summary, parallel.summary);
    for (a, b) in serial.records.iter().zip(&parallel.records) {
        assert!(a.same_outcome(b));
    }
}

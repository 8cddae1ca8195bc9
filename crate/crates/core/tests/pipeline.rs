use std::fs;
use std::path::Path;

use coreselect::config::RunConfig;
use coreselect::data::{cifar, idx, make_synthetic, Dataset, Split, SyntheticSpec};
use coreselect::eval::{consistency, imbalance};
use coreselect::scoring::{
    load_scores, read_cossim_log, read_ranking_csv, save_scores, write_ranking_csv, append_cossim_log,
};
use coreselect::train::{ContrastiveTrainer, TrainSettings};
use coreselect::Error;

fn quantized(ds: &Dataset) -> Vec<f64> {
    ds.images.iter().map(|&v| (v * 255.0).round() / 255.0).collect()
}

fn config(dir: &Path, text: &str) -> RunConfig {
    let path = dir.join("run.conf");
    fs::write(&path, text).unwrap();
    RunConfig::from_file(&path).unwrap()
}

#[test]
fn idx_files_feed_training_through_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n: 80,
        image_size: 12,
        channels: 1,
        ..SyntheticSpec::default()
    };
    let (train, _) = make_synthetic(&spec, Split::Train).unwrap();
    idx::write_idx(&train, &tmp.path().join("train-images"), &tmp.path().join("train-labels")).unwrap();
    let cfg = config(
        tmp.path(),
        "dataset.source = idx\ndataset.images = train-images\ndataset.labels = train-labels\n\
         dataset.limit = 64\nloss_mode = moco\nepochs = 3\nbatch_size = 16\nqueue_capacity = 32\n\
         encoder.hidden_dim = 24\nencoder.feature_dim = 12\nencoder.projection_dim = 8\n\
         augment.output_height = 12\naugment.output_width = 12\n",
    );
    let data = cfg.dataset.load().unwrap();
    assert!(data.test.is_none() && data.truth.is_none());
    assert_eq!(data.train.len(), 64);
    assert_eq!(data.train.labels.as_deref(), Some(&train.labels.as_ref().unwrap()[..64]));
    assert_eq!(data.train.images.iter().copied().collect::<Vec<_>>(), quantized(&train.truncate(64)));

    let log = tmp.path().join("log.csv");
    let mut trainer = ContrastiveTrainer::new(&data.train, TrainSettings::from_config(&cfg), cfg.hash()).unwrap();
    while !trainer.is_finished() {
        let summary = trainer.run_epoch(&data.train).unwrap();
        append_cossim_log(&log, summary.epoch as u32, &summary.pair_cossims).unwrap();
    }
    let table = trainer.into_table();
    save_scores(&tmp.path().join("scores.cscr"), &table).unwrap();
    let reloaded = load_scores(&tmp.path().join("scores.cscr")).unwrap();
    // The checkpoint carries the config hash; seed and mode live in the config it names.
    assert_eq!(reloaded.scores(), table.scores());
    assert_eq!(reloaded.epochs_seen(), 3);
    assert_eq!(reloaded.provenance.config_hash, cfg.hash());

    let mut replay = vec![0.0f64; 64];
    for r in read_cossim_log(&log).unwrap() {
        replay[r.example_index] -= r.cossim;
    }
    assert_eq!(replay, table.scores());

    let ranking = table.rank().unwrap();
    let path = tmp.path().join("ranking.csv");
    write_ranking_csv(&path, &ranking, Some(&table.mean_cossim().unwrap()), None).unwrap();
    assert_eq!(read_ranking_csv(&path).unwrap(), ranking);
}

#[test]
fn cifar_batches_concatenate_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n: 30,
        image_size: 32,
        ..SyntheticSpec::default()
    };
    let (full, _) = make_synthetic(&spec, Split::Train).unwrap();
    let head = full.clone().truncate(20);
    let tail = Dataset::new(
        "tail",
        Split::Train,
        full.shape,
        full.images.slice(ndarray::s![20.., ..]).to_owned(),
        full.labels.as_ref().map(|l| l[20..].to_vec()),
        full.num_classes,
    )
    .unwrap();
    cifar::write_cifar_binary(&head, &tmp.path().join("b1.bin")).unwrap();
    cifar::write_cifar_binary(&tail, &tmp.path().join("b2.bin")).unwrap();
    cifar::write_cifar_binary(&tail, &tmp.path().join("t.bin")).unwrap();
    let cfg = config(
        tmp.path(),
        "dataset.source = cifar\ndataset.batches = b1.bin, b2.bin\ndataset.test_batches = t.bin\n",
    );
    let data = cfg.dataset.load().unwrap();
    assert_eq!(data.train.len(), 30);
    assert_eq!(data.test.as_ref().unwrap().len(), 10);
    assert_eq!(data.train.labels, full.labels);
    assert_eq!(data.train.images.iter().copied().collect::<Vec<_>>(), quantized(&full));
    assert_eq!(data.train.num_classes, 10);

    let mut joined = fs::read(tmp.path().join("b1.bin")).unwrap();
    joined.extend(fs::read(tmp.path().join("b2.bin")).unwrap());
    cifar::write_cifar_binary(&data.train, &tmp.path().join("all.bin")).unwrap();
    assert_eq!(fs::read(tmp.path().join("all.bin")).unwrap(), joined);
}

#[test]
fn missing_and_damaged_dataset_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.conf");
    fs::write(&path, "dataset.source = idx\ndataset.images = nope\ndataset.labels = nope2\n").unwrap();
    let parsed = RunConfig::from_file(&path).unwrap();
    assert!(matches!(parsed.validate(), Err(Error::Config(m)) if m.contains("dataset.images")));
    assert!(matches!(parsed.dataset.load(), Err(Error::Io { .. })));

    fs::write(tmp.path().join("b.bin"), vec![0u8; cifar::RECORD + 3]).unwrap();
    let cfg = config(tmp.path(), "dataset.source = cifar\ndataset.batches = b.bin\n");
    assert!(matches!(cfg.dataset.load(), Err(Error::Format { .. })));
}

#[test]
fn identical_config_texts_share_a_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let a = config(tmp.path(), "epochs = 7\n# comment\nseed = 3\n");
    let b = config(tmp.path(), "seed = 3\nepochs = 7\noutput_dir = elsewhere\n");
    assert_eq!(a.hash(), b.hash());
    let echoed = config(tmp.path(), &a.echo_text());
    assert_eq!(echoed.hash(), a.hash());
    assert_ne!(config(tmp.path(), "epochs = 8\nseed = 3\n").hash(), a.hash());
}

#[test]
fn evaluation_helpers_agree_on_a_loaded_split() {
    let data = RunConfig::default().dataset.load().unwrap();
    let labels = data.train.labels.as_ref().unwrap();
    let all: Vec<usize> = (0..data.train.len()).collect();
    let h = imbalance(&all, labels, data.train.num_classes).unwrap();
    assert_eq!(h.fraction, vec![0.25; 4]);
    let truth = data.truth.unwrap();
    assert_eq!(truth.hard_indices.len(), 200);
    let hard = imbalance(&truth.hard_indices, labels, 4).unwrap();
    assert_eq!(hard.counts.iter().sum::<usize>(), 200);
    let r = coreselect::scoring::CoresetRanking::identity(data.train.len());
    assert!(matches!(
        consistency(&[r.clone(), coreselect::scoring::CoresetRanking::identity(10)], 5),
        Err(Error::Config(_))
    ));
}

mod common;

use std::fs;
use std::time::Instant;

use stagematch::data::UnpairedData;
use stagematch::training::{fit, Checkpoint, Trainer, TrainMetrics};
use stagematch::Error;

#[test]
fn short_fit_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = common::toy_config(dir.path(), 4, 0);
    c.train.epochs = 2;
    c.train.checkpoint_every = 1;
    c.train.sampler_log_every = 1;
    let data = UnpairedData::open(&c.dataset()).unwrap();
    let mut t = Trainer::new(c.clone(), data.batches_per_epoch(1)).unwrap();
    let start = Instant::now();
    let report = fit(&mut t, &data, &c.run_dir(), |_, _| Ok(())).unwrap();
    eprintln!("sec/iter {:.3}", start.elapsed().as_secs_f64() / 8.0);

    assert_eq!(report.iterations, 8);
    let lines: Vec<TrainMetrics> = fs::read_to_string(&report.metrics_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|m| m.loss_total.is_finite() && m.latent_std.is_some()));
    assert!(lines[..4].iter().all(|m| m.identity_active));
    assert!(lines[4..].iter().all(|m| !m.identity_active));
    assert!(lines.windows(2).all(|w| w[1].lr_g <= w[0].lr_g));
    assert_eq!(lines[0].loss_pairs.len(), 2);

    let names: Vec<_> = report.checkpoints.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
    assert_eq!(names, ["epoch_0001.safetensors", "final.safetensors"]);
    let ck = Checkpoint::load(&report.final_checkpoint).unwrap();
    assert_eq!(ck.meta.iteration, 8);
    assert_eq!(ck.meta.tag, "final");
    assert!(!ck.component("generator").is_empty());
    // sampler history covers both decoder taps, one record per item and iteration
    let sampler = fs::read_to_string(&report.sampler_path).unwrap();
    assert_eq!(sampler.lines().count(), 16);
    assert!(t.train_step(&data.batch(0, 0, 1).unwrap().a, &data.batch(0, 0, 1).unwrap().b).is_err());
}

#[test]
fn resume_rejects_edited_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = common::toy_config(dir.path(), 2, 1);
    c.train.max_iterations = Some(1);
    let t = Trainer::new(c, 2).unwrap();
    let mut ck = t.checkpoint("periodic").unwrap();
    ck.meta.config_json = ck.meta.config_json.replace("\"seed\":1", "\"seed\":2");
    assert!(matches!(Trainer::from_checkpoint(&ck, 2), Err(Error::Checkpoint(_))));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = stagematch::RunConfig::toy();
    c.data.root = dir.path().join("nowhere");
    assert!(matches!(UnpairedData::open(&c.dataset()), Err(Error::Data(_))));
}

#[test]
fn content_term_off_skips_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = common::toy_config(dir.path(), 2, 2);
    c.loss.lambda_nce = 0.0;
    c.train.max_iterations = Some(1);
    let data = UnpairedData::open(&c.dataset()).unwrap();
    let mut t = Trainer::new(c, data.batches_per_epoch(1)).unwrap();
    let b = data.batch(0, 0, 1).unwrap();
    let m = t.train_step(&b.a, &b.b).unwrap();
    assert_eq!(m.loss_multistage, None);
    assert_eq!(m.latent_std, None);
    assert!(t.take_sampler_log().is_empty());
}

use candle_core::{Device, Tensor};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stagematch::dag::{self, DagConfig, DenseScores, SamplerRecord};
use stagematch::eval::{self, inception, EvalConfig, ExtractorKind, InceptionV3};
use stagematch::nn::InitScheme;
use stagematch::training::Trainer;
use stagematch::{Error, Result, RunConfig};

fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * (1.0 + 0.1 * j as f64) + shift
    })
}

#[test]
fn fid_is_symmetric_and_grows_with_shift() -> Result<()> {
    let a = gaussian(400, 6, 0.0, 1);
    let b = gaussian(300, 6, 0.5, 2);
    let ab = eval::fid_from_features(&a, &b)?;
    let ba = eval::fid_from_features(&b, &a)?;
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
    let mut last = -1.0;
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let f = eval::fid_from_features(&a, &gaussian(400, 6, shift, 3))?;
        assert!(f > last, "{f} after {last}");
        last = f;
    }
    Ok(())
}

#[test]
fn fid_shrinks_as_samples_grow() -> Result<()> {
    // two halves of one distribution: the estimate's bias falls with n
    let small = eval::fid_from_features(&gaussian(64, 4, 0.0, 4), &gaussian(64, 4, 0.0, 5))?;
    let large = eval::fid_from_features(&gaussian(1024, 4, 0.0, 6), &gaussian(1024, 4, 0.0, 7))?;
    assert!(large < small, "{large} vs {small}");
    Ok(())
}

#[test]
fn embedder_rows_follow_images() -> Result<()> {
    let dev = Device::Cpu;
    let e = eval::RandomEmbedder::new(0)?;
    let x = Tensor::rand(-1f32, 1., (3, 3, 32, 32), &dev)?;
    let f = eval::extract_features(&x, &e, 2)?;
    assert_eq!(f.nrows(), 3);
    let same = Tensor::cat(&[x.narrow(0, 0, 1)?, x.narrow(0, 0, 1)?], 0)?;
    let g = eval::extract_features(&same, &e, 1)?;
    assert_eq!(g.row(0), g.row(1));
    assert_eq!(g.row(0), f.row(0));
    Ok(())
}

#[test]
fn inception_random_weights_give_pool_features() -> Result<()> {
    let net = InceptionV3::random(0)?;
    let x = Tensor::rand(-1f32, 1., (1, 3, 299, 299), &Device::Cpu)?;
    let f = net.forward(&x)?;
    assert_eq!(f.dims(), &[1, 2048]);
    let v: Vec<f32> = f.flatten_all()?.to_vec1()?;
    assert!(v.iter().all(|x| x.is_finite()));
    Ok(())
}

#[test]
fn missing_inception_weights_name_the_artifact() {
    let cfg = EvalConfig {
        extractor: ExtractorKind::Inception,
        inception_weights: Some("/nonexistent/pt_inception.safetensors".into()),
        ..Default::default()
    };
    let err = eval::make_extractor(&cfg).err().expect("missing weights must fail");
    assert!(err.to_string().contains(inception::WEIGHTS_ARTIFACT), "{err}");
    let unset = EvalConfig { extractor: ExtractorKind::Inception, ..Default::default() };
    assert!(matches!(eval::make_extractor(&unset), Err(Error::Config(_))));
}

fn record(set: dag::PatchIndexSet, iteration: u64) -> SamplerRecord {
    SamplerRecord {
        iteration,
        tap: set.source_tap,
        grid: set.grid,
        importance_count: set.importance_count,
        indices: set.indices,
    }
}

#[test]
fn uniform_history_gives_flat_map() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let records: Vec<_> = (0..8000)
        .map(|i| Ok(record(dag::sample_uniform((8, 8), 16, 24, &mut rng)?, i)))
        .collect::<Result<_>>()?;
    let map = eval::sampling_frequency_map(&records, (8, 8), Some(24))?;
    let min = map.normalized.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min > 0.8, "min normalized frequency {min}");
    assert!(eval::sampling_frequency_map(&[], (8, 8), None).is_err());
    Ok(())
}

#[test]
fn dag_history_concentrates_on_fake_region() -> Result<()> {
    // low discriminator scores (judged fake) in the top-left quadrant
    let values: Vec<f32> = (0..64)
        .map(|i| if i / 8 < 4 && i % 8 < 4 { -1.0 } else { 1.0 })
        .collect();
    let scores = DenseScores::new(values, 8, 8)?;
    let cfg = DagConfig { n_patches: 16, oversampling_ratio: 4, importance_ratio: 0.5, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let records: Vec<_> = (0..1000)
        .map(|i| Ok(record(dag::sample(&scores, &cfg, 24, &mut rng)?, i)))
        .collect::<Result<_>>()?;
    let map = eval::sampling_frequency_map(&records, (8, 8), None)?;
    let total: u64 = map.counts.iter().sum();
    let region: u64 = (0..64).filter(|i| i / 8 < 4 && i % 8 < 4).map(|i| map.counts[i]).sum();
    let share = region as f64 / total as f64;
    // 8 importance picks land there almost surely, 8 covering picks at 1/4
    assert!(share > 0.55, "fake-region share {share}");
    Ok(())
}

#[test]
fn normal_init_density_has_unit_std() -> Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.init = InitScheme::Normal { std: 1.0 };
    let ck = Trainer::new(cfg, 1)?.checkpoint("init")?;
    let (name, _) = ck
        .tensors
        .iter()
        .filter(|(k, t)| k.starts_with("discriminator.") && k.ends_with("weight") && t.elem_count() >= 20_000)
        .max_by_key(|(_, t)| t.elem_count())
        .expect("a large discriminator weight");
    let d = eval::weight_density(&ck, name, 60)?;
    assert!((d.std - 1.0).abs() < 0.05, "std {}", d.std);
    assert!(d.mean.abs() < 0.05);
    let peak = d.density.iter().cloned().fold(0.0, f64::max);
    assert!((peak - 0.3989).abs() < 0.06, "peak {peak}");
    assert!(matches!(eval::weight_density(&ck, "nope", 10), Err(Error::Usage(_))));
    let zeros = eval::histogram("zeros", &[0.0; 100], 5)?;
    assert_eq!(zeros.counts.iter().filter(|&&c| c > 0).count(), 1);
    Ok(())
}

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use stagematch::data::{list_images, load_image, synth_toy, ToyDomainSpec, UnpairedData, UnpairedDataset};
use stagematch::{Error, Result};

fn write_solid(path: &Path, size: u32, rgb: [u8; 3]) {
    RgbImage::from_pixel(size, size, Rgb(rgb)).save(path).unwrap();
}

fn two_domains(root: &Path, na: usize, nb: usize) -> UnpairedDataset {
    for (dir, n) in [("trainA", na), ("trainB", nb)] {
        fs::create_dir_all(root.join(dir)).unwrap();
        for i in 0..n {
            write_solid(&root.join(dir).join(format!("{i:03}.png")), 8, [i as u8 * 10, 0, 0]);
        }
    }
    UnpairedDataset::from_root(root, 8, 5)
}

#[test]
fn epoch_runs_over_domain_a_with_b_cycled() -> Result<()> {
    let dir = tempfile::tempdir().unwrap();
    let data = UnpairedData::open(&two_domains(dir.path(), 3, 5))?;
    assert_eq!(data.batches_per_epoch(1), 3);
    assert_eq!(data.batches_per_epoch(2), 2);
    let mut b_seen = Vec::new();
    for epoch in 0..5 {
        let plan = data.epoch_plan(epoch);
        assert_eq!(plan.len(), 3);
        let mut a: Vec<_> = plan.iter().map(|p| p.0).collect();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
        b_seen.extend(plan.iter().map(|p| p.1));
    }
    // 15 draws cover B three full cycles
    for cycle in b_seen.chunks(5) {
        let mut c = cycle.to_vec();
        c.sort();
        assert_eq!(c, vec![0, 1, 2, 3, 4]);
    }
    let short = data.batch(0, 1, 2)?;
    assert_eq!(short.a.dims(), &[1, 3, 8, 8]);
    Ok(())
}

#[test]
fn fixed_seed_fixes_order() -> Result<()> {
    let dir = tempfile::tempdir().unwrap();
    let spec = two_domains(dir.path(), 6, 4);
    let a = UnpairedData::open(&spec)?;
    let b = UnpairedData::open(&spec)?;
    for epoch in 0..3 {
        assert_eq!(a.epoch_plan(epoch), b.epoch_plan(epoch));
    }
    let other = UnpairedData::open(&UnpairedDataset { shuffle_seed: 6, ..spec })?;
    assert!((0..3).any(|e| a.epoch_plan(e) != other.epoch_plan(e)));
    Ok(())
}

#[test]
fn large_input_is_resized() -> Result<()> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.png");
    write_solid(&path, 512, [255, 0, 128]);
    let t = load_image(&path, 256)?;
    assert_eq!(t.dims(), &[3, 256, 256]);
    let px: Vec<f32> = t.flatten_all()?.to_vec1()?;
    assert!((px[0] - 1.0).abs() < 1e-6);
    assert!((px[256 * 256] + 1.0).abs() < 1e-6);
    Ok(())
}

#[test]
fn empty_and_undecodable_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let err = list_images(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains(&dir.path().display().to_string()));

    let bad = dir.path().join("broken.png");
    fs::write(&bad, b"not an image").unwrap();
    let err = load_image(&bad, 8).unwrap_err();
    assert!(err.to_string().contains("broken.png"), "{err}");
}

#[test]
fn toy_writes_both_domains() -> Result<()> {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToyDomainSpec { n_images: 4, size: 64, ..Default::default() };
    synth_toy(&spec, dir.path())?;
    for d in ["trainA", "trainB"] {
        let files = list_images(&dir.path().join(d))?;
        assert_eq!(files.len(), 4);
        assert!(files.iter().all(|f| f.extension().is_some_and(|e| e == "png")));
        assert_eq!(image::open(&files[0]).unwrap().width(), 64);
    }
    Ok(())
}

//! Sampling-frequency heatmaps and weight-density histograms.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{GrayImage, Luma};

use crate::dag::SamplerRecord;
use crate::error::{Error, Result};
use crate::training::Checkpoint;

/// Reads a sampler history written as JSON lines.
pub fn read_sampler_log(path: &Path) -> Result<Vec<SamplerRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMap {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u64>,
    /// Counts divided by the maximum count.
    pub normalized: Vec<f64>,
}

/// Per-position selection counts over every record on `grid` (optionally
/// restricted to one tap).
pub fn sampling_frequency_map(
    records: &[SamplerRecord],
    grid: (usize, usize),
    tap: Option<usize>,
) -> Result<FrequencyMap> {
    if records.is_empty() {
        return Err(Error::Data("sampler history is empty".into()));
    }
    let (h, w) = grid;
    let mut counts = vec![0u64; h * w];
    let mut used = 0;
    for r in records.iter().filter(|r| r.grid == grid && tap.is_none_or(|t| t == r.tap)) {
        for &i in &r.indices {
            let slot = counts.get_mut(i).ok_or_else(|| {
                Error::Data(format!("sampled index {i} outside the {h}x{w} grid"))
            })?;
            *slot += 1;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data(format!("no sampler records on a {h}x{w} grid")));
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let normalized = counts.iter().map(|&c| c as f64 / max).collect();
    Ok(FrequencyMap {
        height: h,
        width: w,
        counts,
        normalized,
    })
}

impl FrequencyMap {
    /// Grayscale PNG, each cell drawn as a `scale × scale` block.
    pub fn save_png(&self, path: &Path, scale: u32) -> Result<()> {
        let s = scale.max(1);
        let img = GrayImage::from_fn(self.width as u32 * s, self.height as u32 * s, |x, y| {
            let v = self.normalized[(y / s) as usize * self.width + (x / s) as usize];
            Luma([(v * 255.0).round() as u8])
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    pub component: String,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Normalized so that Σ density · bin_width = 1.
    pub density: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Histogram of `values` over `bins` equal-width bins spanning their range.
pub fn histogram(component: &str, values: &[f64], bins: usize) -> Result<Density> {
    if values.is_empty() {
        return Err(Error::Data(format!("component {component} has no weights")));
    }
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let bin_edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let density = counts.iter().map(|&c| c as f64 / (n as f64 * width)).collect();
    Ok(Density {
        component: component.to_string(),
        bin_edges,
        counts,
        density,
        n,
        mean,
        std,
    })
}

/// Weight histogram of every parameter named `component` or `component.*`.
pub fn weight_density(ck: &Checkpoint, component: &str, bins: usize) -> Result<Density> {
    let prefix = format!("{component}.");
    let selected: Vec<_> = ck
        .tensors
        .iter()
        .filter(|(k, _)| !k.starts_with("optim.") && (k.as_str() == component || k.starts_with(&prefix)))
        .collect();
    if selected.is_empty() {
        let mut roots: Vec<String> = ck
            .tensors
            .keys()
            .filter(|k| !k.starts_with("optim."))
            .filter_map(|k| k.rsplitn(3, '.').last().map(str::to_string))
            .collect();
        roots.dedup();
        return Err(Error::Usage(format!(
            "unknown component {component}; some available components: {}",
            roots.into_iter().take(12).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut values = Vec::new();
    for (_, t) in selected {
        values.extend(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?);
    }
    histogram(component, &values, bins)
}

impl Density {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = String::from("bin_left,bin_right,count,density\n");
        for i in 0..self.counts.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                self.counts[i],
                self.density[i]
            ));
        }
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Bar plot of the histogram, black on white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bins = self.counts.len();
        let bar = (640 / bins).max(1) as u32;
        let (w, h) = (bar * bins as u32, 240u32);
        let max = self.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let img = GrayImage::from_fn(w, h, |x, y| {
            let c = self.counts[((x / bar) as usize).min(bins - 1)] as f64;
            let top = h as f64 * (1.0 - c / max);
            Luma([if (y as f64) >= top && c > 0.0 { 0 } else { 255 }])
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(indices: Vec<usize>) -> SamplerRecord {
        SamplerRecord {
            iteration: 0,
            tap: 24,
            grid: (2, 2),
            importance_count: 0,
            indices,
        }
    }

    #[test]
    fn frequency_single_entry() -> Result<()> {
        let m = sampling_frequency_map(&[rec(vec![0])], (2, 2), None)?;
        assert_eq!(m.normalized, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(sampling_frequency_map(&[], (2, 2), None).is_err());
        assert!(sampling_frequency_map(&[rec(vec![9])], (2, 2), None).is_err());
        assert!(sampling_frequency_map(&[rec(vec![0])], (3, 3), None).is_err());
        Ok(())
    }

    #[test]
    fn histogram_spike_and_mass() -> Result<()> {
        let d = histogram("z", &[0.0; 50], 11)?;
        assert_eq!(d.counts[5], 50);
        assert_eq!(d.counts.iter().sum::<u64>(), 50);
        let width = d.bin_edges[1] - d.bin_edges[0];
        assert!((d.density.iter().sum::<f64>() * width - 1.0).abs() < 1e-12);
        assert!(histogram("z", &[], 4).is_err());
        Ok(())
    }
}

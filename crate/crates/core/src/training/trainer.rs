use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dag::{self, PatchIndexSet, SamplerRecord};
use crate::data::UnpairedData;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::heads::{Heads, TapPair};
use crate::losses::{self, LossParts, PairPatches, StopGrad};
use crate::nn::{Grad, ParamStore};
use crate::ops;

use super::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use super::optim::Adam;
use super::{identity_active, lr_factor_with, memory_peak_bytes};

/// The three trained networks.
#[derive(Debug, Clone)]
pub struct Models {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub heads: Heads,
}

impl Models {
    /// Builds all networks from seeds derived from `train.seed`; also
    /// returns the sampling rng, which is independent of the init streams.
    pub fn new(config: &RunConfig) -> Result<(Self, ChaCha8Rng)> {
        let mut master = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut fork = || ChaCha8Rng::seed_from_u64(master.random());
        let (mut rg, mut rd, mut rh, sampler) = (fork(), fork(), fork(), fork());
        let generator = Generator::new(&config.generator, config.init, &mut rg)?;
        let discriminator = Discriminator::new(&config.discriminator, config.init, &mut rd)?;
        let heads = Heads::new(
            &config.heads,
            &config.pair_shapes(),
            config.stages.asymmetric,
            config.init,
            &mut rh,
        )?;
        Ok((
            Self {
                generator,
                discriminator,
                heads,
            },
            sampler,
        ))
    }

    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        let mut all = self.generator.params().snapshot();
        all.extend(self.discriminator.params().snapshot());
        all.extend(self.heads.params().snapshot());
        all
    }

    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.generator.params().load(tensors)?;
        self.discriminator.params().load(tensors)?;
        self.heads.params().load(tensors)
    }
}

/// One record of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub iteration: u64,
    pub epoch: u64,
    pub progress: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_heads: f64,
    pub identity_active: bool,
    pub loss_gan_g: f64,
    pub loss_gan_d: f64,
    pub loss_multistage: Option<f64>,
    pub loss_identity: Option<f64>,
    pub loss_total: f64,
    pub loss_pairs: BTreeMap<String, f64>,
    /// Spread of normalized decoder latents; `None` when the content term is off.
    pub latent_std: Option<f64>,
    pub sec_per_iter: f64,
    pub memory_peak: u64,
}

impl TrainMetrics {
    /// The record without wall-clock and memory fields, which vary between
    /// otherwise identical runs.
    pub fn deterministic_part(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or_default();
        if let Some(map) = v.as_object_mut() {
            map.remove("sec_per_iter");
            map.remove("memory_peak");
        }
        v
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    ops::scalar(t)
}

pub struct Trainer {
    config: RunConfig,
    models: Models,
    opt_g: Adam,
    opt_d: Adam,
    opt_heads: Adam,
    rng: ChaCha8Rng,
    iteration: u64,
    batches_per_epoch: u64,
    total_iterations: u64,
    sampler_log: Vec<SamplerRecord>,
}

impl Trainer {
    pub fn new(config: RunConfig, batches_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        if batches_per_epoch == 0 {
            return Err(Error::Data("the dataset yields no batches".into()));
        }
        let (models, rng) = Models::new(&config)?;
        let t = &config.train;
        let adam = t.adam();
        let opt_g = Adam::new("g", models.generator.params(), t.lr_g, adam)?;
        let opt_d = Adam::new("d", models.discriminator.params(), t.lr_d, adam)?;
        let opt_heads = Adam::new("heads", models.heads.params(), t.lr_heads, adam)?;
        let bpe = batches_per_epoch as u64;
        let mut total = t.epochs as u64 * bpe;
        if let Some(cap) = t.max_iterations {
            total = total.min(cap);
        }
        Ok(Self {
            config,
            models,
            opt_g,
            opt_d,
            opt_heads,
            rng,
            iteration: 0,
            batches_per_epoch: bpe,
            total_iterations: total,
            sampler_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_iterations
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.batches_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.total_iterations
    }

    pub fn progress(&self) -> f64 {
        self.iteration as f64 / self.total_iterations.max(1) as f64
    }

    pub fn lr_factor(&self) -> f64 {
        lr_factor_with(self.progress(), self.config.train.decay_start_fraction)
    }

    pub fn identity_active(&self) -> bool {
        !self.config.train.identity_half || identity_active(self.progress())
    }

    /// (generator, discriminator, heads) learning rates for the next step.
    pub fn learning_rates(&self) -> (f64, f64, f64) {
        let f = self.lr_factor();
        let t = &self.config.train;
        (t.lr_g * f, t.lr_d * f, t.lr_heads * f)
    }

    pub fn optimizers(&self) -> [&Adam; 3] {
        [&self.opt_g, &self.opt_d, &self.opt_heads]
    }

    /// Sampler records collected since the last call.
    pub fn take_sampler_log(&mut self) -> Vec<SamplerRecord> {
        std::mem::take(&mut self.sampler_log)
    }

    fn pairs(&self) -> &[TapPair] {
        &self.config.stages.pairs
    }

    fn content_on(&self) -> bool {
        self.config.loss.lambda_nce > 0.0
    }

    /// Draws positions for every pair and batch item on the decoder grid.
    fn sample_positions(
        &mut self,
        score: &crate::discriminator::ScoreMap,
        grids: &[(usize, usize)],
        batch: usize,
    ) -> Result<Vec<Vec<PatchIndexSet>>> {
        let cfg = self.config.dag.clone();
        let pairs = self.pairs().to_vec();
        let mut out = Vec::with_capacity(pairs.len());
        for (pair, &grid) in pairs.iter().zip(grids) {
            cfg.check_grid(grid.0 * grid.1)?;
            let mut sets = Vec::with_capacity(batch);
            for b in 0..batch {
                let set = if cfg.uses_scores() {
                    let dense = dag::upsample_scores(score, b, grid)?;
                    dag::sample(&dense, &cfg, pair.decoder, &mut self.rng)?
                } else {
                    dag::sample_uniform(grid, cfg.n_patches, pair.decoder, &mut self.rng)?
                };
                sets.push(set);
            }
            out.push(sets);
        }
        Ok(out)
    }

    /// One discriminator update followed by one generator + heads update.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor) -> Result<TrainMetrics> {
        if self.is_finished() {
            return Err(Error::Usage(format!(
                "training already finished after {} iterations",
                self.total_iterations
            )));
        }
        let start = Instant::now();
        let it = self.iteration;
        let progress = self.progress();
        let factor = self.lr_factor();
        let idt_on = self.identity_active() && self.config.loss.lambda_idt > 0.0;
        let content = self.content_on();
        let pairs = self.pairs().to_vec();
        let (enc_taps, dec_taps): (Vec<usize>, Vec<usize>) = if content {
            pairs.iter().map(|p| (p.encoder, p.decoder)).unzip()
        } else {
            (Vec::new(), Vec::new())
        };

        let g = &self.models.generator;
        let d = &self.models.discriminator;
        let (fake, taps) = g.forward_with_taps(x, &enc_taps, &dec_taps)?;

        // discriminator step on real targets and detached translations
        let real_scores = d.score_map(y, Grad::Track)?;
        let fake_scores = d.score_map(&fake.detach(), Grad::Track)?;
        let loss_d = losses::gan_loss_d(&real_scores, &fake_scores)?;
        let loss_d_value = scalar(&loss_d)?;
        if !loss_d_value.is_finite() {
            return Err(self.non_finite("loss_gan_d", loss_d_value));
        }
        let grads_d = loss_d.backward()?;
        self.opt_d.step(self.models.discriminator.params(), &grads_d, factor)?;
        drop(grads_d);

        // generator step against the updated, frozen discriminator
        let d = &self.models.discriminator;
        let pred_fake = d.score_map(&fake, Grad::Frozen)?;
        let loss_gan = losses::gan_loss_g(&pred_fake)?;
        let mut parts = LossParts {
            gan: scalar(&loss_gan)?,
            ..Default::default()
        };
        let mut loss_pairs = BTreeMap::new();
        let mut latent_std = None;
        let multistage = if content {
            let grids: Vec<(usize, usize)> = pairs.iter().map(|p| taps[&p.decoder].spatial_size()).collect();
            let batch = x.dims()[0];
            let positions = self.sample_positions(&pred_fake, &grids, batch)?;
            let log_now = self.config.train.sampler_log_every > 0 && it % self.config.train.sampler_log_every == 0;
            let heads = &self.models.heads;
            let mut patches = Vec::with_capacity(pairs.len());
            for (pair, sets) in pairs.iter().zip(&positions) {
                let dec = &taps[&pair.decoder];
                let enc = if self.config.stages.asymmetric {
                    Heads::resize_to_decoder(&taps[&pair.encoder], dec)?
                } else {
                    taps[&pair.encoder].clone()
                };
                patches.push(PairPatches {
                    pair: *pair,
                    encoder: dag::gather_patches(&enc, sets)?,
                    decoder: dag::gather_patches(dec, sets)?,
                    encoder_positions: sets.clone(),
                    decoder_positions: sets.clone(),
                });
                if log_now {
                    for s in sets {
                        self.sampler_log.push(SamplerRecord {
                            iteration: it,
                            tap: pair.decoder,
                            grid: s.grid,
                            importance_count: s.importance_count,
                            indices: s.indices.clone(),
                        });
                    }
                }
            }
            let stop = if self.config.train.stop_gradient {
                StopGrad::Enabled
            } else {
                StopGrad::Disabled
            };
            let ms = losses::multistage_loss(heads, &patches, stop)?;
            for (pair, l) in &ms.per_pair {
                loss_pairs.insert(pair.label(), scalar(l)?);
            }
            parts.multistage = scalar(&ms.total)?;
            latent_std = Some(ms.latent_std);
            Some(ms.total)
        } else {
            None
        };
        let identity = if idt_on {
            let l = losses::identity_loss(&self.models.generator.translate(y)?, y)?;
            parts.identity = scalar(&l)?;
            Some(l)
        } else {
            None
        };
        let total = losses::total_loss_tensor(
            &loss_gan,
            multistage.as_ref(),
            identity.as_ref(),
            &self.config.loss,
        )?;
        let total_value = scalar(&total)?;
        for (name, v) in [
            ("loss_gan_g", parts.gan),
            ("loss_multistage", parts.multistage),
            ("loss_identity", parts.identity),
            ("loss_total", total_value),
        ] {
            if !v.is_finite() {
                return Err(self.non_finite(name, v));
            }
        }
        let grads = total.backward()?;
        self.opt_g.step(self.models.generator.params(), &grads, factor)?;
        self.opt_heads.step(self.models.heads.params(), &grads, factor)?;
        drop(grads);

        self.iteration += 1;
        let (lr_g, lr_d, lr_heads) = (
            self.opt_g.last_lr(),
            self.opt_d.last_lr(),
            self.opt_heads.last_lr(),
        );
        Ok(TrainMetrics {
            iteration: it,
            epoch: it / self.batches_per_epoch,
            progress,
            lr_g,
            lr_d,
            lr_heads,
            identity_active: idt_on,
            loss_gan_g: parts.gan,
            loss_gan_d: loss_d_value,
            loss_multistage: content.then_some(parts.multistage),
            loss_identity: idt_on.then_some(parts.identity),
            loss_total: total_value,
            loss_pairs,
            latent_std,
            sec_per_iter: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
            memory_peak: memory_peak_bytes(),
        })
    }

    fn non_finite(&self, what: &str, value: f64) -> Error {
        Error::Numeric(format!(
            "non-finite {what} = {value} at iteration {} (progress {:.4}, lr factor {:.4})",
            self.iteration,
            self.progress(),
            self.lr_factor()
        ))
    }

    pub fn checkpoint(&self, tag: &str) -> Result<Checkpoint> {
        let mut tensors = self.models.snapshot();
        for opt in self.optimizers() {
            tensors.extend(opt.state_tensors());
        }
        let config_json = self.config.to_json()?;
        Ok(Checkpoint {
            tensors,
            meta: CheckpointMeta {
                config_hash: crate::config::hash_str(&config_json),
                config_json,
                iteration: self.iteration,
                total_iterations: self.total_iterations,
                tag: tag.to_string(),
                rng: RngState::capture(&self.rng),
                optim_steps: self
                    .optimizers()
                    .iter()
                    .map(|o| (o.name().to_string(), o.steps()))
                    .collect(),
            },
        })
    }

    pub fn save_checkpoint(&self, path: &Path, tag: &str) -> Result<()> {
        self.checkpoint(tag)?.save(path)
    }

    /// Restores a trainer exactly as it was when the checkpoint was written.
    pub fn from_checkpoint(ck: &Checkpoint, batches_per_epoch: usize) -> Result<Self> {
        ck.meta.verify_hash()?;
        let config = ck.meta.config()?;
        let mut t = Self::new(config, batches_per_epoch)?;
        if t.total_iterations != ck.meta.total_iterations {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for {} iterations but the dataset gives {}",
                ck.meta.total_iterations, t.total_iterations
            )));
        }
        t.models.load(&ck.tensors)?;
        let steps = |name: &str| ck.meta.optim_steps.get(name).copied().unwrap_or(0);
        let (sg, sd, sh) = (steps("g"), steps("d"), steps("heads"));
        t.opt_g.load_state(&ck.tensors, sg)?;
        t.opt_d.load_state(&ck.tensors, sd)?;
        t.opt_heads.load_state(&ck.tensors, sh)?;
        t.rng = ck.meta.rng.restore()?;
        t.iteration = ck.meta.iteration;
        Ok(t)
    }

    pub fn resume(path: &Path, batches_per_epoch: usize) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, batches_per_epoch)
    }
}

/// Where a [`fit`] call left its outputs.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub sampler_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub iterations: u64,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Drops records at or past `iteration`, left behind by a run that went
/// further than the checkpoint it is resumed from.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::with_capacity(text.len());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["iteration"].as_u64().is_some_and(|i| i < iteration) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunStamp<'a> {
    version: &'a str,
    seed: u64,
    config_hash: String,
}

/// Runs the trainer to completion over `data`, writing the resolved config,
/// one metrics record per iteration, sampler history, periodic checkpoints
/// and a final checkpoint under `run_dir`. A trainer restored from a
/// checkpoint continues where it stopped; log records past that point are
/// dropped before appending.
pub fn fit(
    trainer: &mut Trainer,
    data: &UnpairedData,
    run_dir: &Path,
    mut on_step: impl FnMut(&Trainer, &TrainMetrics) -> Result<()>,
) -> Result<FitReport> {
    let bs = trainer.config.train.batch_size;
    if data.batches_per_epoch(bs) as u64 != trainer.batches_per_epoch {
        return Err(Error::Data(format!(
            "trainer expects {} batches per epoch, dataset gives {}",
            trainer.batches_per_epoch,
            data.batches_per_epoch(bs)
        )));
    }
    let ck_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let config_path = run_dir.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&trainer.config)?)
        .map_err(|e| Error::io(&config_path, e))?;
    let stamp_path = run_dir.join("run.json");
    let stamp = RunStamp {
        version: env!("CARGO_PKG_VERSION"),
        seed: trainer.config.train.seed,
        config_hash: trainer.config.hash()?,
    };
    fs::write(&stamp_path, serde_json::to_string_pretty(&stamp)?).map_err(|e| Error::io(&stamp_path, e))?;

    let resuming = trainer.iteration > 0;
    let metrics_path = run_dir.join("metrics.jsonl");
    let sampler_path = run_dir.join("sampler.jsonl");
    if resuming {
        truncate_log(&metrics_path, trainer.iteration)?;
        truncate_log(&sampler_path, trainer.iteration)?;
    }
    let mut metrics_out = open_log(&metrics_path, resuming)?;
    let mut sampler_out = open_log(&sampler_path, resuming)?;
    let mut checkpoints = Vec::new();
    let every = trainer.config.train.checkpoint_every as u64;
    let bpe = trainer.batches_per_epoch;

    while !trainer.is_finished() {
        let epoch = trainer.iteration / bpe;
        let plan = data.epoch_plan(epoch);
        let first = (trainer.iteration % bpe) as usize;
        for step in first..bpe as usize {
            if trainer.is_finished() {
                break;
            }
            let batch = data.batch_from_plan(&plan, step, bs)?;
            let metrics = match trainer.train_step(&batch.a, &batch.b) {
                Ok(m) => m,
                Err(e @ Error::Numeric(_)) => {
                    let path = ck_dir.join(format!("nonfinite_{:07}.safetensors", trainer.iteration));
                    trainer.save_checkpoint(&path, "diagnostic")?;
                    metrics_out.flush().map_err(|e| Error::io(&metrics_path, e))?;
                    return Err(Error::Numeric(format!("{e}; state saved to {}", path.display())));
                }
                Err(e) => return Err(e),
            };
            write_line(&mut metrics_out, &metrics_path, &metrics)?;
            for rec in trainer.take_sampler_log() {
                write_line(&mut sampler_out, &sampler_path, &rec)?;
            }
            on_step(trainer, &metrics)?;
        }
        let completed = trainer.iteration / bpe;
        let epoch_done = trainer.iteration % bpe == 0;
        if every > 0 && epoch_done && completed % every == 0 && !trainer.is_finished() {
            let path = ck_dir.join(format!("epoch_{completed:04}.safetensors"));
            trainer.save_checkpoint(&path, "periodic")?;
            checkpoints.push(path);
        }
    }
    metrics_out.flush().map_err(|e| Error::io(&metrics_path, e))?;
    sampler_out.flush().map_err(|e| Error::io(&sampler_path, e))?;
    let final_checkpoint = ck_dir.join("final.safetensors");
    trainer.save_checkpoint(&final_checkpoint, "final")?;
    checkpoints.push(final_checkpoint.clone());
    Ok(FitReport {
        run_dir: run_dir.to_path_buf(),
        metrics_path,
        sampler_path,
        checkpoints,
        final_checkpoint,
        iterations: trainer.iteration,
    })
}

/// Opens the configured dataset, builds a fresh trainer and fits it into
/// the configured run directory.
pub fn train_from_config(config: &RunConfig) -> Result<FitReport> {
    config.validate()?;
    let data = UnpairedData::open(&config.dataset())?;
    let mut trainer = Trainer::new(config.clone(), data.batches_per_epoch(config.train.batch_size))?;
    fit(&mut trainer, &data, &config.run_dir(), |_, _| Ok(()))
}

/// All parameters of a store, for gradient-presence checks.
pub fn has_any_grad(params: &ParamStore, grads: &candle_core::backprop::GradStore) -> bool {
    params.iter().any(|(_, v)| grads.get(v.as_tensor()).is_some())
}

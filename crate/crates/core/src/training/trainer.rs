//! The optimization loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::{BackendSource, LatentSource, TrainConfig, BACKEND_DIR_ENV};
use super::metrics::{MetricsWriter, StepRecord};
use super::objective::{Objective, SampleValues};
use super::optim::Adam;
use crate::augmentation::{view_transforms, AugmentationConfig};
use crate::autodiff::Tape;
use crate::backends::{load_suite, make_toy_suite, read_latents, BackendSuite, LatentCode};
use crate::error::{Error, Result};
use crate::mapper::MapperParams;
use crate::rng::{derive_seed, rng_for, stream};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(output_dir: &Path, step: u64) -> PathBuf {
    output_dir
        .join(CHECKPOINT_DIR)
        .join(format!("step_{step:06}.cfck"))
}

/// Builds the backend suite a config names.
pub fn build_suite(config: &TrainConfig) -> Result<BackendSuite> {
    match &config.backend {
        BackendSource::Toy { seed } => make_toy_suite(*seed, config.dims),
        BackendSource::Dir(dir) => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => std::env::var_os(BACKEND_DIR_ENV)
                    .map(PathBuf::from)
                    .ok_or_else(|| {
                        Error::config("backend.dir", format!("not set and ${BACKEND_DIR_ENV} is empty"))
                    })?,
            };
            load_suite(&dir)
        }
    }
}

enum Latents {
    Sampled,
    Inverted(Vec<LatentCode>),
}

/// Mean travel and alignment over the held-out codes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub travel: f64,
    pub cos_dir: f64,
}

pub struct Trainer<'s> {
    pub config: TrainConfig,
    suite: &'s BackendSuite,
    objective: Objective<'s>,
    latents: Latents,
    aug: AugmentationConfig,
    pub params: MapperParams,
    pub optim: Adam,
    /// Completed steps.
    pub step: u64,
}

impl<'s> Trainer<'s> {
    /// Fresh state: seeded init plus the cold-start perturbation.
    pub fn new(config: TrainConfig, suite: &'s BackendSuite) -> Result<Self> {
        config.validate()?;
        let mut params = MapperParams::init(config.master_seed, config.dims.into(), config.init_zero_last)?;
        params.perturb_last_layers(config.master_seed, config.init_epsilon);
        Self::assemble(config, suite, params, None, 0)
    }

    pub fn resume(ck: Checkpoint, suite: &'s BackendSuite) -> Result<Self> {
        Self::assemble(ck.config, suite, ck.params, Some(ck.optim), ck.step)
    }

    fn assemble(
        config: TrainConfig,
        suite: &'s BackendSuite,
        params: MapperParams,
        optim: Option<Adam>,
        step: u64,
    ) -> Result<Self> {
        let objective = Objective::new(&config, suite)?;
        let latents = match &config.latent_source {
            LatentSource::Sampled => Latents::Sampled,
            LatentSource::Inverted(path) => {
                let codes = read_latents(path)?;
                for c in &codes {
                    c.check_shape(&suite.dims)?;
                }
                Latents::Inverted(codes)
            }
        };
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        let optim = optim.unwrap_or_else(|| Adam::new(config.optimizer, &shapes));
        let aug = AugmentationConfig {
            seed_stream: derive_seed(config.master_seed, &[stream::VIEW, config.aug.seed_stream]),
            ..config.aug.clone()
        };
        Ok(Self {
            config,
            suite,
            objective,
            latents,
            aug,
            params,
            optim,
            step,
        })
    }

    pub fn objective(&self) -> &Objective<'s> {
        &self.objective
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.params.clone(),
            optim: self.optim.clone(),
        }
    }

    /// The codes for 1-based step `step`.
    pub fn batch_for(&self, step: u64) -> Result<Vec<LatentCode>> {
        let b = self.config.batch_size as u64;
        let seed = self.config.master_seed;
        match &self.latents {
            Latents::Sampled => (0..b)
                .map(|i| {
                    self.suite
                        .sample_latent(derive_seed(seed, &[stream::LATENT, step, i]))
                })
                .collect(),
            Latents::Inverted(codes) => {
                let n = codes.len() as u64;
                let mut cached: Option<(u64, Vec<usize>)> = None;
                (0..b)
                    .map(|i| {
                        let k = (step - 1) * b + i;
                        let epoch = k / n;
                        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                            let mut order: Vec<usize> = (0..codes.len()).collect();
                            order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch]));
                            cached = Some((epoch, order));
                        }
                        let order = &cached.as_ref().unwrap().1;
                        Ok(codes[order[(k % n) as usize]].clone())
                    })
                    .collect()
            }
        }
    }

    /// One update on `batch` as step `self.step + 1`.
    pub fn training_step(&mut self, batch: &[LatentCode]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::BadDims("empty batch".into()));
        }
        let step = self.step + 1;
        let started = Instant::now();
        let dims = self.suite.dims;
        let b = batch.len() as u64;
        let views = (0..b)
            .map(|i| view_transforms(dims.height, dims.width, dims.channels, &self.aug, (step - 1) * b + i))
            .collect::<Result<Vec<_>>>()?;

        let (grads, mean, total) = {
            let mut tape = Tape::new();
            let pv = self.params.register(&mut tape);
            let mut totals = Vec::with_capacity(batch.len());
            let mut mean = SampleValues::default();
            for (w, v) in batch.iter().zip(&views) {
                let (t, s) = self
                    .objective
                    .sample_loss(&mut tape, &self.params, &pv, w, v, step)?;
                totals.push(t);
                mean.clip += s.clip;
                mean.l2 += s.l2;
                mean.id += s.id;
                mean.perc += s.perc;
                mean.cos_dir += s.cos_dir;
            }
            let total = tape.mean(&totals)?;
            let grads: Vec<Vec<f64>> = {
                let g = tape.backward(total);
                pv.vars().iter().map(|&v| g.get(v)).collect()
            };
            (grads, mean, tape.scalar(total))
        };
        let n = b as f64;
        let record = StepRecord {
            step,
            loss_total: total,
            loss_nce: mean.clip / n,
            loss_l2: mean.l2 / n,
            loss_id: mean.id / n,
            loss_perc: mean.perc / n,
            cos_dir: mean.cos_dir / n,
            wall_ms: if self.config.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        if !record.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: record.to_line(),
            });
        }
        if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient of {}", self.params.tensors()[k].0),
            });
        }
        self.optim.step(&mut self.params.tensors_mut(), &grads)?;
        self.step = step;
        Ok(record)
    }

    /// Draws the next batch and applies one update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.batch_for(self.step + 1)?;
        self.training_step(&batch)
    }

    pub fn eval_latents(&self) -> Result<Vec<LatentCode>> {
        let k = self.config.eval_latents;
        match &self.latents {
            Latents::Sampled => (0..k as u64)
                .map(|i| {
                    self.suite
                        .sample_latent(derive_seed(self.config.master_seed, &[stream::EVAL, i]))
                })
                .collect(),
            Latents::Inverted(codes) => Ok(codes.iter().take(k).cloned().collect()),
        }
    }

    pub fn evaluate(&self) -> Result<EvalSummary> {
        let codes = self.eval_latents()?;
        if codes.is_empty() {
            return Ok(EvalSummary {
                travel: 0.0,
                cos_dir: 0.0,
            });
        }
        let (mut travel, mut cos) = (0.0, 0.0);
        for w in &codes {
            let (t, c) = self.objective.evaluate(&self.params, w)?;
            travel += t;
            cos += c;
        }
        let n = codes.len() as f64;
        Ok(EvalSummary {
            travel: travel / n,
            cos_dir: cos / n,
        })
    }

    /// Runs the remaining steps, logging each one and writing checkpoints.
    /// Returns the final checkpoint path.
    pub fn run(&mut self, metrics: &mut MetricsWriter) -> Result<PathBuf> {
        self.run_with(metrics, |_| {})
    }

    /// [`Trainer::run`] with a callback per record.
    pub fn run_with(
        &mut self,
        metrics: &mut MetricsWriter,
        mut on_record: impl FnMut(&StepRecord),
    ) -> Result<PathBuf> {
        let checksum = self.suite.checksum();
        let out = self.config.output_dir.clone();
        let every = self.config.checkpoint_every;
        let result = (|| {
            while self.step < self.config.iterations {
                let r = self.step()?;
                metrics.write(&r)?;
                on_record(&r);
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.config.iterations {
                    self.checkpoint().save(&checkpoint_path(&out, self.step))?;
                }
            }
            let last = checkpoint_path(&out, self.step);
            self.checkpoint().save(&last)?;
            Ok(last)
        })();
        metrics.flush()?;
        if self.suite.checksum() != checksum {
            return Err(Error::BackendFailure("backend weights changed during training".into()));
        }
        result
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub eval: EvalSummary,
}

/// Fresh run from `config` into `config.output_dir`.
pub fn train(config: TrainConfig, suite: &BackendSuite) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, suite)?;
    let metrics_path = trainer.config.output_dir.join(METRICS_FILE);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let final_checkpoint = trainer.run(&mut metrics)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics: metrics_path,
        eval: trainer.evaluate()?,
    })
}

/// Continues a run from a checkpoint, appending to its metrics log.
pub fn resume(ck: Checkpoint, suite: &BackendSuite) -> Result<TrainOutcome> {
    let mut trainer = Trainer::resume(ck, suite)?;
    let metrics_path = trainer.config.output_dir.join(METRICS_FILE);
    let mut metrics = MetricsWriter::resume(&metrics_path, trainer.step)?;
    let final_checkpoint = trainer.run(&mut metrics)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics: metrics_path,
        eval: trainer.evaluate()?,
    })
}

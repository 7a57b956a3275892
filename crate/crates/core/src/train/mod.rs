//! Training loop: Adam, EMA, context dropout, checkpoints and loss logs.
//!
//! Every random draw of step `k` comes from streams keyed by
//! `(seed, purpose, k)`, so a run resumed from a checkpoint at step `k`
//! continues exactly as the uninterrupted run would have.

mod optim;

pub use optim::{adam_step, adam_update, ema_update, ema_update_slice, AdamConfig, AdamState};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::KeyValues;
use crate::data::{BatchSource, PairMode};
use crate::diffusion::{diffusion_loss_on, LossSpace, NoiseDraw, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::{drop_context, Bound, Checkpoint, Denoiser, DenoiserConfig, Params, EMA};
use crate::rng::{stream, Purpose};
use crate::tensor::{Tape, Tensor};

const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";
pub const CHECKPOINT_FILE: &str = "checkpoint.semc";
pub const LOSS_FILE: &str = "loss.csv";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub num_steps: u64,
    pub context_dropout: f64,
    pub seed: u64,
    pub objective: PairMode,
    pub loss_space: LossSpace,
    /// Steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ema_decay: 0.995,
            batch_size: 64,
            num_steps: 2000,
            context_dropout: 0.1,
            seed: 0,
            objective: PairMode::Pair,
            loss_space: LossSpace::Epsilon,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::Config(format!(
                "ema decay {} outside (0, 1]",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.context_dropout) {
            return Err(Error::Config(format!(
                "context dropout {} outside [0, 1]",
                self.context_dropout
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.learning_rate", self.adam.lr);
        kv.set("train.beta1", self.adam.beta1);
        kv.set("train.beta2", self.adam.beta2);
        kv.set("train.adam_eps", self.adam.eps);
        kv.set("train.ema_decay", self.ema_decay);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.num_steps", self.num_steps);
        kv.set("train.context_dropout", self.context_dropout);
        kv.set("train.seed", self.seed);
        kv.set("train.objective", self.objective);
        kv.set(
            "train.loss_space",
            match self.loss_space {
                LossSpace::Epsilon => "epsilon",
                LossSpace::Data => "data",
            },
        );
        kv.set("train.checkpoint_every", self.checkpoint_every);
        kv
    }

    pub fn updated_from(&self, kv: &KeyValues) -> Result<Self> {
        let mut c = self.clone();
        kv.load("train.learning_rate", &mut c.adam.lr)?;
        kv.load("train.beta1", &mut c.adam.beta1)?;
        kv.load("train.beta2", &mut c.adam.beta2)?;
        kv.load("train.adam_eps", &mut c.adam.eps)?;
        kv.load("train.ema_decay", &mut c.ema_decay)?;
        kv.load("train.batch_size", &mut c.batch_size)?;
        kv.load("train.num_steps", &mut c.num_steps)?;
        kv.load("train.context_dropout", &mut c.context_dropout)?;
        kv.load("train.seed", &mut c.seed)?;
        kv.load("train.objective", &mut c.objective)?;
        if let Some(s) = kv.raw("train.loss_space") {
            c.loss_space = match s {
                "epsilon" => LossSpace::Epsilon,
                "data" => LossSpace::Data,
                other => return Err(Error::Config(format!("unknown loss space {other:?}"))),
            };
        }
        kv.load("train.checkpoint_every", &mut c.checkpoint_every)?;
        c.validate()?;
        Ok(c)
    }

    pub const KEYS: &'static [&'static str] = &[
        "train.learning_rate",
        "train.beta1",
        "train.beta2",
        "train.adam_eps",
        "train.ema_decay",
        "train.batch_size",
        "train.num_steps",
        "train.context_dropout",
        "train.seed",
        "train.objective",
        "train.loss_space",
        "train.checkpoint_every",
    ];
}

/// Model, EMA copy and optimizer state at a given step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Denoiser,
    pub ema: Params,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub schedule: ScheduleConfig,
    /// Extra config (such as the encoder spec) carried through checkpoints.
    pub meta: KeyValues,
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(model_cfg: &DenoiserConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::init(model_cfg, cfg.seed)?;
        Ok(Self {
            ema: model.params.clone(),
            opt: AdamState::new(&model.params)?,
            schedule: ScheduleConfig::for_resolution(
                model_cfg.image.height.min(model_cfg.image.width),
            ),
            model,
            cfg: cfg.clone(),
            meta: KeyValues::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`]. The
    /// training config stored in the checkpoint wins except for
    /// `num_steps` and `checkpoint_every`.
    pub fn from_checkpoint(ck: &Checkpoint, num_steps: u64, checkpoint_every: u64) -> Result<Self> {
        let model = ck.denoiser(false)?;
        let mut cfg = TrainConfig::default().updated_from(&ck.config)?;
        cfg.num_steps = num_steps;
        cfg.checkpoint_every = checkpoint_every;
        let step = ck
            .config
            .get::<u64>("train.step")?
            .ok_or_else(|| Error::Format("checkpoint has no train.step".into()))?;
        let take = |ns: &str| -> Result<Params> {
            let p = ck.params(ns);
            model.params.check_same_layout(&p)?;
            Ok(p)
        };
        Ok(Self {
            ema: take(EMA)?,
            opt: AdamState {
                m: take(ADAM_M)?,
                v: take(ADAM_V)?,
                step,
            },
            schedule: ScheduleConfig::for_resolution(
                model.cfg.image.height.min(model.cfg.image.width),
            ),
            model,
            cfg,
            meta: ck
                .config
                .keys()
                .filter(|k| !k.starts_with("model.") && !k.starts_with("train."))
                .filter_map(|k| Some((k.to_string(), ck.config.raw(k)?.to_string())))
                .collect(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_denoiser(&self.model);
        ck.config.merge(&self.meta);
        ck.config.merge(&self.cfg.to_kv());
        ck.config.set("train.step", self.opt.step);
        ck.insert_params(EMA, &self.ema);
        ck.insert_params(ADAM_M, &self.opt.m);
        ck.insert_params(ADAM_V, &self.opt.v);
        ck
    }

    /// Loss and gradients for the batch of step `step` without updating.
    pub fn loss_and_grads(&self, source: &mut dyn BatchSource, step: u64) -> Result<(f64, Params)> {
        let seed = self.cfg.seed;
        let mut batch = source.batch_at(step)?;
        drop_context(
            &mut batch.context,
            self.cfg.context_dropout,
            &mut stream(seed, Purpose::Dropout, step),
        )?;
        let draw = NoiseDraw::<f32>::sample(
            &self.schedule,
            batch.targets.shape(),
            &mut stream(seed, Purpose::Timestep, step),
            &mut stream(seed, Purpose::Noise, step),
        )?;
        let tape = Tape::<f32>::new();
        let bound = Bound::trainable(&tape, &self.model.params);
        let cfg = &self.model.cfg;
        let context = &batch.context;
        let loss = diffusion_loss_on(&tape, &batch.targets, &draw, self.cfg.loss_space, |z, t| {
            bound.forward(cfg, z, t, Some(context))
        })?;
        let value = loss.value().item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} is {value}")));
        }
        let grads = tape.backward(loss)?;
        let map = bound
            .iter()
            .map(|(name, var)| {
                let g = match grads.tensor(var) {
                    Some(g) => g,
                    None => Tensor::zeros(&var.shape())?,
                };
                Ok((name.to_string(), g))
            })
            .collect::<Result<_>>()?;
        Ok((value, Params::from_map(map)))
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self, source: &mut dyn BatchSource) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(source, self.opt.step)?;
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.opt,
            &self.cfg.adam,
        )?;
        ema_update(&mut self.ema, &self.model.params, self.cfg.ema_decay)?;
        Ok(loss)
    }
}

/// Result of a [`train`] run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// `(step, loss)` for every step taken in this run.
    pub losses: Vec<(u64, f64)>,
    pub checkpoint: PathBuf,
}

/// Trains until `trainer.cfg.num_steps` total steps, writing
/// `checkpoint.semc`, `loss.csv` (step, loss) and `timing.csv` (step,
/// seconds) into `out_dir`.
///
/// Wall time lives in its own file so that `loss.csv` is reproducible byte
/// for byte. On a non-finite loss the last good state is saved and the
/// error returned.
pub fn train(
    mut trainer: Trainer,
    source: &mut dyn BatchSource,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let resumed = trainer.step() > 0;
    let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
        let path = out_dir.join(name);
        let file = if resumed && path.exists() {
            OpenOptions::new().append(true).open(&path)?
        } else {
            let mut f = File::create(&path)?;
            writeln!(f, "{header}")?;
            f
        };
        Ok(BufWriter::new(file))
    };
    let mut loss_log = open(LOSS_FILE, "step,loss")?;
    let mut time_log = open(TIMING_FILE, "step,seconds")?;
    let start = Instant::now();
    let mut losses = Vec::new();
    while trainer.step() < trainer.cfg.num_steps {
        let step = trainer.step();
        let loss = match trainer.train_step(source) {
            Ok(l) => l,
            Err(e @ Error::NonFinite(_)) => {
                loss_log.flush()?;
                trainer.checkpoint().write(&ck_path)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(loss_log, "{step},{loss:.9e}")?;
        writeln!(time_log, "{step},{:.3}", start.elapsed().as_secs_f64())?;
        losses.push((step, loss));
        let every = trainer.cfg.checkpoint_every;
        if every > 0
            && trainer.step().is_multiple_of(every)
            && trainer.step() < trainer.cfg.num_steps
        {
            loss_log.flush()?;
            trainer.checkpoint().write(&ck_path)?;
        }
    }
    loss_log.flush()?;
    time_log.flush()?;
    trainer.checkpoint().write(&ck_path)?;
    Ok(TrainOutcome {
        trainer,
        losses,
        checkpoint: ck_path,
    })
}

//! The training loop: sample, forward, L1, backward, Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{checkpoint, Checkpoint, Model};
use crate::train::data::{sample_batch, TrainingSet};
use crate::train::optim::{clip_grad_norm, Adam, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

pub const LOG_HEADER: &str = "step,epoch,lr,loss";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{}", self.step, self.epoch, self.lr, self.loss)
    }
}

/// Model plus optimizer state at a given step.
///
/// Each step draws its batch from a generator keyed by `(seed, step)`, so a
/// resumed run continues exactly where an uninterrupted one would.
pub struct Trainer {
    model: Model<f32>,
    adam: Adam<f32>,
    cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params(), &cfg);
        Ok(Trainer {
            model,
            adam,
            cfg,
            step: 0,
        })
    }

    pub fn resume(ck: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = match ck.optimizer {
            Some(state) => Adam::from_state(state, ck.model.params(), &cfg)?,
            None => Adam::new(ck.model.params(), &cfg),
        };
        Ok(Trainer {
            model: ck.model,
            adam,
            cfg,
            step: ck.step,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn rng_for(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        rng
    }

    /// Runs one optimizer step and reports the loss before the update.
    pub fn train_step(&mut self, set: &TrainingSet) -> Result<StepLog> {
        let scale = self.model.scale();
        if set.scale != scale {
            return Err(Error::config(format!("dataset scale x{} but model scale x{scale}", set.scale)));
        }
        let mut rng = self.rng_for(self.step);
        let (lr_batch, hr_batch) = sample_batch(set, self.cfg.batch_size, self.cfg.patch, self.cfg.augment, &mut rng)?;
        let mut graph = Graph::new();
        let pred = self.model.record(&mut graph, lr_batch)?;
        let target = graph.constant(hr_batch);
        let loss_var = graph.l1_loss(pred, target)?;
        let loss = f64::from(graph.value(loss_var).item()?);
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss became {loss} at step {}", self.step)));
        }
        graph.backward(loss_var)?;
        let store = self.model.params_mut();
        store.zero_grad();
        store.accumulate_from(&graph);
        drop(graph);
        if let Some(max) = self.cfg.clip_norm {
            clip_grad_norm(store, max);
        }
        let lr = self.cfg.lr_at(self.step);
        self.adam.step(store, lr)?;
        let log = StepLog {
            step: self.step,
            epoch: self.cfg.epoch_of(self.step),
            lr,
            loss,
        };
        self.step += 1;
        Ok(log)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.model, self.step, Some(&self.adam.state()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, self.step, Some(&self.adam.state()))
    }
}

/// Where the loop writes its outputs.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:05}.ckpt"))
    }
}

/// Runs `steps` optimizer steps, logging every step to CSV and saving
/// checkpoints every `checkpoint_every` epochs and at the end.
pub fn train_loop(trainer: &mut Trainer, set: &TrainingSet, steps: u64, files: &RunFiles) -> Result<Vec<StepLog>> {
    std::fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
    let log_path = files.log();
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let write_err = |e| Error::io(&log_path, e);
    writeln!(log, "{LOG_HEADER}").map_err(write_err)?;
    let per_epoch = trainer.cfg.steps_per_epoch as u64;
    let every = trainer.cfg.checkpoint_every as u64;
    let mut history = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let entry = trainer.train_step(set)?;
        writeln!(log, "{}", entry.csv_row()).map_err(write_err)?;
        if entry.step % 100 == 0 {
            info!("step {} epoch {} lr {:e} loss {:.5}", entry.step, entry.epoch, entry.lr, entry.loss);
        }
        history.push(entry);
        let done = trainer.step();
        if every > 0 && done % (per_epoch * every) == 0 {
            trainer.save(&files.epoch_checkpoint(done / per_epoch))?;
        }
    }
    log.flush().map_err(write_err)?;
    trainer.save(&files.final_checkpoint())?;
    Ok(history)
}

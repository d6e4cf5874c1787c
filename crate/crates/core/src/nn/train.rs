//! Batch-size-one training of the cascade.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::{apply_running_updates, AdamConfig, AdamState};
use super::checkpoint::{Checkpoint, TrainingProgress};
use super::loss::{masked_l2_with_grad, LossError, LossWeights};
use super::model::{Cascade, CascadeConfig, Init, ModelError};
use super::params::ParamStore;
use super::tape::{Mode, Tape};
use super::tensor::Tensor;
use crate::depth_io::DepthMap;
use crate::warp::channel;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (epoch {epoch}): coarse {coarse}, refined {refined}")]
    NonFinite {
        step: u64,
        epoch: usize,
        coarse: f64,
        refined: f64,
    },
    #[error("sample {index}: {message}")]
    Sample { index: usize, message: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Network inputs and dense supervision for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub stack: Tensor<f32>,
    pub color: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub gt_mask: Vec<bool>,
}

impl TrainingSample {
    pub fn new(stack: Tensor<f32>, color: Tensor<f32>, gt: &DepthMap) -> Result<Self, String> {
        let (h, w) = (stack.height(), stack.width());
        if (color.height(), color.width()) != (h, w) || (gt.height(), gt.width()) != (h, w) {
            return Err(format!(
                "stack is {w}x{h}, color {}x{}, ground truth {}x{}",
                color.width(),
                color.height(),
                gt.width(),
                gt.height()
            ));
        }
        let gt_mask = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| gt.mask().get(x, y)).collect();
        let gt = Tensor::from_fn(1, h, w, |_, y, x| gt.get(x, y).unwrap_or(0.0) as f32);
        Ok(Self {
            stack,
            color,
            gt,
            gt_mask,
        })
    }

    /// Mirror image of the sample. Horizontal flow components change sign.
    pub fn flipped(&self) -> Self {
        let mut stack = self.stack.flip_horizontal();
        let n = stack.plane_len();
        for c in [channel::FLOW_PREV_U, channel::FLOW_NEXT_U] {
            stack.data_mut()[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = -*v);
        }
        let w = self.gt.width();
        let gt_mask = self
            .gt_mask
            .chunks(w)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Self {
            stack,
            color: self.color.flip_horizontal(),
            gt: self.gt.flip_horizontal(),
            gt_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Mirror each sample with probability 1/2.
    pub flip: bool,
    /// Visit samples in a fresh random order each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            flip: true,
            shuffle: true,
        }
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// One-based optimizer step.
    pub step: u64,
    pub epoch: usize,
    pub coarse: f64,
    pub refined: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_trace_csv<W: Write>(mut out: W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(out, "step,epoch,coarse_loss,refined_loss,total,lr")?;
    for r in records {
        writeln!(out, "{},{},{},{},{},{}", r.step, r.epoch, r.coarse, r.refined, r.total, r.lr)?;
    }
    Ok(())
}

pub struct Trainer {
    cascade: Cascade,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    config: TrainConfig,
    epochs_done: usize,
    trace: Vec<LossRecord>,
}

impl Trainer {
    /// Fresh parameters initialized from `config.seed`.
    pub fn new(model: &CascadeConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.adam.validate().map_err(TrainError::Config)?;
        let mut params = ParamStore::new();
        let cascade = Cascade::build(model, &mut params, Init::Seeded(config.seed))?;
        let adam = AdamState::new(&params);
        Ok(Self {
            cascade,
            params,
            adam,
            config,
            epochs_done: 0,
            trace: Vec::new(),
        })
    }

    /// Continues from a checkpoint. Optimizer state and the epoch counter are
    /// restored when the checkpoint carries them.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        config.adam.validate().map_err(TrainError::Config)?;
        let Checkpoint {
            cascade,
            params,
            progress,
        } = checkpoint;
        let (adam, epochs_done) = match progress {
            Some(p) => (p.adam, p.epochs_done),
            None => (AdamState::new(&params), 0),
        };
        Ok(Self {
            cascade,
            params,
            adam,
            config,
            epochs_done,
            trace: Vec::new(),
        })
    }

    pub fn cascade(&self) -> &Cascade {
        &self.cascade
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Losses of every step taken by this trainer.
    pub fn trace(&self) -> &[LossRecord] {
        &self.trace
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cascade: self.cascade.clone(),
            params: self.params.clone(),
            progress: Some(TrainingProgress {
                adam: self.adam.clone(),
                epochs_done: self.epochs_done,
            }),
        }
    }

    /// Forward, backward and one optimizer update on a single sample.
    pub fn train_step(&mut self, sample: &TrainingSample, epoch: usize) -> Result<LossRecord, TrainError> {
        let lr = self.config.adam.lr_for_epoch(epoch);
        let weights = self.config.loss;
        let step = self.adam.step + 1;
        let (losses, grads, updates) = {
            let mut tape = Tape::new(&self.params, Mode::Train);
            let vars = self.cascade.forward(&mut tape, &sample.stack, &sample.color)?;
            let (lc, gc) = masked_l2_with_grad(tape.value(vars.coarse), &sample.gt, &sample.gt_mask)?;
            let (lr_, gr) = masked_l2_with_grad(tape.value(vars.refined), &sample.gt, &sample.gt_mask)?;
            let (lc, lr_) = (f64::from(lc), f64::from(lr_));
            if !(lc.is_finite() && lr_.is_finite()) {
                return Err(TrainError::NonFinite {
                    step,
                    epoch,
                    coarse: lc,
                    refined: lr_,
                });
            }
            let wc = weights.coarse as f32;
            let wr = weights.refined as f32;
            let grads = tape.backward(&[(vars.coarse, gc.map(|g| g * wc)), (vars.refined, gr.map(|g| g * wr))]);
            ((lc, lr_), grads, tape.into_running_updates())
        };
        self.adam.update(&mut self.params, &grads, &self.config.adam, lr);
        apply_running_updates(&mut self.params, &updates);
        let record = LossRecord {
            step,
            epoch,
            coarse: losses.0,
            refined: losses.1,
            total: weights.coarse * losses.0 + weights.refined * losses.1,
            lr,
        };
        self.trace.push(record);
        Ok(record)
    }

    /// Sample order and flips for a zero-based epoch.
    pub fn epoch_plan(&self, epoch: usize, len: usize) -> Vec<(usize, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..len).collect();
        if self.config.shuffle {
            order.shuffle(&mut rng);
        }
        order
            .into_iter()
            .map(|i| (i, self.config.flip && rng.gen_bool(0.5)))
            .collect()
    }

    pub fn run_epoch(&mut self, data: &[TrainingSample]) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let epoch = self.epochs_done;
        for (i, flip) in self.epoch_plan(epoch, data.len()) {
            if flip {
                self.train_step(&data[i].flipped(), epoch)?;
            } else {
                self.train_step(&data[i], epoch)?;
            }
        }
        self.epochs_done += 1;
        Ok(())
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn fit(&mut self, data: &[TrainingSample]) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        while self.epochs_done < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }
}

//! Mini-batch training of independent streams with per-epoch reporting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::fusion::{accuracy, fuse, stream_predictions, tune_fusion_weights};
use crate::model::{stream_inputs, stream_loss_grads, Model, StreamKind, StreamParams};
use crate::optim::{frozen_params, Optimizer, PlateauScheduler};
use crate::seed::{derive_seed, Tag};
use crate::skeleton::{fix_length, SkeletonSequence};
use crate::tape::Gradients;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEpoch {
    /// Mean per-sample training loss over the epoch's mini-batches.
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Learning rate used during the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEpoch {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<StreamEpoch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<StreamEpoch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<FusedEpoch>,
}

impl EpochRecord {
    pub fn stream(&self, kind: StreamKind) -> Option<&StreamEpoch> {
        match kind {
            StreamKind::Joint => self.joint.as_ref(),
            StreamKind::Line => self.line.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub streams: Vec<StreamKind>,
    pub attention: bool,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters each stream keeps; empty before any epoch ran.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected: Vec<SelectedEpoch>,
    /// Weights tuned on the validation set; present when both streams train.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEpoch {
    pub stream: StreamKind,
    pub epoch: usize,
    pub val_accuracy: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

struct StreamState {
    params: StreamParams,
    optimizer: Optimizer,
    scheduler: Option<PlateauScheduler>,
    val_probs: Vec<Vec<f64>>,
    train_probs: Vec<Vec<f64>>,
    best: Option<Snapshot>,
}

/// Parameters at the best validation accuracy so far (latest on ties).
struct Snapshot {
    epoch: usize,
    val_accuracy: f64,
    params: StreamParams,
    val_probs: Vec<Vec<f64>>,
}

/// Epoch-at-a-time trainer; [`train`] drives it to completion.
pub struct Trainer<'a> {
    config: ModelConfig,
    train: &'a [SkeletonSequence],
    val: &'a [SkeletonSequence],
    states: Vec<StreamState>,
    report: TrainReport,
}

fn check_dataset(name: &str, data: &[SkeletonSequence], config: &ModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{name} set is empty")));
    }
    for (i, seq) in data.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Config(format!("{name} sample {i} has no frames")));
        }
        if seq.label >= config.classes {
            return Err(Error::Config(format!(
                "{name} sample {i}: label {} out of range for {} classes",
                seq.label, config.classes
            )));
        }
        if let Some(f) = seq.frames.iter().find(|f| f.num_joints() != config.joints) {
            return Err(Error::Config(format!(
                "{name} sample {i}: frame has {} joints, config expects {}",
                f.num_joints(),
                config.joints
            )));
        }
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &ModelConfig,
        streams: &[StreamKind],
        train: &'a [SkeletonSequence],
        val: &'a [SkeletonSequence],
    ) -> Result<Self> {
        config.validate()?;
        check_dataset("training", train, config)?;
        check_dataset("validation", val, config)?;
        let mut kinds = streams.to_vec();
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(Error::Config("no stream selected for training".into()));
        }
        let states = kinds
            .iter()
            .map(|&kind| StreamState {
                params: StreamParams::seeded(config, kind),
                optimizer: Optimizer::from_config(config),
                scheduler: (config.optimizer == OptimizerKind::Sgd).then(|| {
                    PlateauScheduler::new(config.plateau_patience, config.lr_decay_factor)
                }),
                val_probs: Vec::new(),
                train_probs: Vec::new(),
                best: None,
            })
            .collect();
        Ok(Trainer {
            config: config.clone(),
            train,
            val,
            states,
            report: TrainReport {
                format_version: REPORT_FORMAT_VERSION,
                streams: kinds,
                attention: config.attention,
                epochs: Vec::new(),
                selected: Vec::new(),
                fusion: None,
            },
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.report.epochs.len()
    }

    pub fn params(&self, kind: StreamKind) -> Option<&StreamParams> {
        self.states
            .iter()
            .find(|s| s.params.kind == kind)
            .map(|s| &s.params)
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    /// Runs one pass over the training set for every stream, then
    /// evaluates on the training and validation sets.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.report.epochs.len();
        let mut record = EpochRecord {
            epoch: epoch + 1,
            joint: None,
            line: None,
            fused: None,
        };
        let train_labels: Vec<usize> = self.train.iter().map(|s| s.label).collect();
        let val_labels: Vec<usize> = self.val.iter().map(|s| s.label).collect();
        for state in &mut self.states {
            let kind = state.params.kind;
            let lr = state.optimizer.learning_rate();
            let loss = train_stream_epoch(&self.config, state, self.train, epoch)?;
            state.train_probs = stream_predictions(&state.params, &self.config, self.train)?;
            state.val_probs = stream_predictions(&state.params, &self.config, self.val)?;
            let val_accuracy = accuracy(&state.val_probs, &val_labels);
            if state
                .best
                .as_ref()
                .is_none_or(|b| val_accuracy >= b.val_accuracy)
            {
                state.best = Some(Snapshot {
                    epoch: epoch + 1,
                    val_accuracy,
                    params: state.params.clone(),
                    val_probs: state.val_probs.clone(),
                });
            }
            if let Some(sched) = &mut state.scheduler {
                let next = sched.observe(val_accuracy, lr);
                state.optimizer.set_learning_rate(next);
            }
            let stats = StreamEpoch {
                loss,
                train_accuracy: accuracy(&state.train_probs, &train_labels),
                val_accuracy,
                learning_rate: lr,
            };
            match kind {
                StreamKind::Joint => record.joint = Some(stats),
                StreamKind::Line => record.line = Some(stats),
            }
        }
        if let [j, l] = self.states.as_slice() {
            let (alpha, beta) = (self.config.alpha, self.config.beta);
            let fused = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| fuse(x, y, alpha, beta))
                    .collect()
            };
            record.fused = Some(FusedEpoch {
                train_accuracy: accuracy(&fused(&j.train_probs, &l.train_probs)?, &train_labels),
                val_accuracy: accuracy(&fused(&j.val_probs, &l.val_probs)?, &val_labels),
            });
        }
        self.report.epochs.push(record);
        Ok(self.report.epochs.last().expect("just pushed"))
    }

    /// Restores each stream's best-validation parameters, tunes fusion
    /// weights on the validation set (both streams only) and returns the
    /// trained model with its report.
    pub fn finish(mut self) -> Result<(Model, TrainReport)> {
        let mut config = self.config.clone();
        for state in &mut self.states {
            if let Some(best) = state.best.take() {
                self.report.selected.push(SelectedEpoch {
                    stream: state.params.kind,
                    epoch: best.epoch,
                    val_accuracy: best.val_accuracy,
                });
                state.params = best.params;
                state.val_probs = best.val_probs;
            }
        }
        if let [j, l] = self.states.as_mut_slice() {
            if j.val_probs.is_empty() {
                j.val_probs = stream_predictions(&j.params, &config, self.val)?;
                l.val_probs = stream_predictions(&l.params, &config, self.val)?;
            }
            let labels: Vec<usize> = self.val.iter().map(|s| s.label).collect();
            let (alpha, beta) = tune_fusion_weights(&j.val_probs, &l.val_probs, &labels)?;
            config.alpha = alpha;
            config.beta = beta;
            self.report.fusion = Some(FusionWeights { alpha, beta });
        }
        let mut model = Model {
            config,
            joint: None,
            line: None,
        };
        for state in self.states {
            let kind = state.params.kind;
            *model.stream_slot(kind) = Some(state.params);
        }
        Ok((model, self.report))
    }
}

fn train_stream_epoch(
    config: &ModelConfig,
    state: &mut StreamState,
    train: &[SkeletonSequence],
    epoch: usize,
) -> Result<f64> {
    let kind = state.params.kind;
    let seed = config.rng_seed;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[Tag::Shuffle as u64, kind as u64, epoch as u64],
    ));
    order.shuffle(&mut rng);
    let frozen = frozen_params(config);
    let mut loss_sum = 0.0;
    for batch in order.chunks(config.batch_size) {
        let params = &state.params;
        let outputs: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let sample_seed = derive_seed(
                    seed,
                    &[Tag::TrainSample as u64, kind as u64, epoch as u64, i as u64],
                );
                let fixed = fix_length(&train[i], config.frames, sample_seed)?;
                let inputs = stream_inputs(&fixed, kind, config)?;
                stream_loss_grads(params, config, &inputs, train[i].label, None)
            })
            .collect::<Result<_>>()?;
        // Fixed reduction order keeps results independent of scheduling.
        let mut total = Gradients::default();
        for out in &outputs {
            loss_sum += out.loss.expect("label given");
            total.accumulate(out.grads.as_ref().expect("gradients requested"));
        }
        total.scale(1.0 / batch.len() as f64);
        state.optimizer.step(&mut state.params, &total, &frozen)?;
    }
    Ok(loss_sum / train.len() as f64)
}

/// Trains every stream in `streams` for `config.epochs` epochs.
pub fn train(
    config: &ModelConfig,
    streams: &[StreamKind],
    train: &[SkeletonSequence],
    val: &[SkeletonSequence],
) -> Result<(Model, TrainReport)> {
    let mut trainer = Trainer::new(config, streams, train, val)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    trainer.finish()
}

//! Two-stage training.
//!
//! Stage one optimizes the full objective with query reconstruction on
//! masked queries; stage two freezes the reconstruction head, drops its loss
//! and trains on clean queries.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{mask_for_qr, Sample};
use crate::error::{Error, Result};
use crate::heads::MaskedQuery;
use crate::model::{BatchItem, BatchLoss, Model, StepConfig, Terms};
use crate::rng::{stream_rng, Stream};

/// Losses averaged over the batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub total: f64,
    pub mr: f64,
    pub evidential: f64,
    pub qr: f64,
    pub nll: f64,
    pub reg: f64,
    pub grad_norm: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,stage,lr,total,mr,evidential,qr,nll,reg,grad_norm";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage,
            self.lr,
            self.total,
            self.mr,
            self.evidential,
            self.qr,
            self.nll,
            self.reg,
            self.grad_norm
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters as restored from `checkpoint`.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(&cfg.model, cfg.synth.dim, cfg.synth.vocab_size, cfg.seed)
}

/// Masking stream index of a sample in an epoch.
fn mask_stream(epoch: usize, id: u64) -> u64 {
    ((epoch as u64) << 32) ^ id
}

/// Trains on `train_set`. With `checkpoint_path`, a checkpoint is written
/// at initialization and after every epoch, so a numerical failure leaves
/// the last good one on disk. `resume` continues from a checkpoint written
/// under the same configuration.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sample],
    resume: Option<&Checkpoint>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let hash = cfg.hash()?;
    let vocab = cfg.synth.vocab()?;
    let mut model = build_model(cfg)?;
    let mut start = 0usize;
    if let Some(ck) = resume {
        ck.check_config(hash)?;
        ck.restore_into(&mut model.store)?;
        start = ck.epoch as usize;
    }
    let total_epochs = cfg.train.qr_epochs + cfg.train.epochs;
    if let Some(path) = checkpoint_path {
        Checkpoint::from_store(&model.store, hash, start as u64).save(path)?;
    }

    let qr_ids = model.arch.qr_params();
    let mut log = Vec::new();
    for epoch in start..total_epochs {
        let stage1 = epoch < cfg.train.qr_epochs;
        for &id in &qr_ids {
            model.store.set_frozen(id, !stage1);
        }
        let qr_active = stage1 && cfg.model.qr;
        let lr = if stage1 { cfg.train.qr_lr } else { cfg.train.lr };
        let step = StepConfig {
            weights: cfg.loss,
            mode: cfg.mode,
            qr_active,
            terms: Terms::default(),
        };

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64));

        let mut sums = BatchLoss::default();
        let mut grad_norm = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let masks: Vec<Option<MaskedQuery>> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    qr_active
                        .then(|| mask_for_qr(s, cfg.train.mask_policy, &vocab, cfg.seed, mask_stream(epoch, s.id)))
                        .transpose()
                })
                .collect::<Result<_>>()?;
            let batch: Vec<BatchItem> = chunk
                .iter()
                .zip(&masks)
                .map(|(&i, mq)| BatchItem {
                    video: &train_set[i].video,
                    tokens: &train_set[i].query,
                    gt: train_set[i].gt,
                    mask: mq.as_ref(),
                })
                .collect();
            let loss = model.arch.objective(&mut model.store, &batch, &step, None, true)?;
            let norm = model.store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient norm in epoch {epoch}")));
            }
            model.store.adam_step(lr);
            sums.total += loss.total;
            sums.mr += loss.mr;
            sums.evidential += loss.evidential;
            sums.qr += loss.qr;
            sums.nll += loss.nll;
            sums.reg += loss.reg;
            grad_norm += norm;
            n_batches += 1;
        }
        let k = 1.0 / n_batches as f64;
        log.push(EpochLog {
            epoch,
            stage: if stage1 { 1 } else { 2 },
            lr,
            total: sums.total * k,
            mr: sums.mr * k,
            evidential: sums.evidential * k,
            qr: sums.qr * k,
            nll: sums.nll * k,
            reg: sums.reg * k,
            grad_norm: grad_norm * k,
        });
        if let Some(path) = checkpoint_path {
            Checkpoint::from_store(&model.store, hash, epoch as u64 + 1).save(path)?;
        }
    }
    for &id in &qr_ids {
        model.store.set_frozen(id, false);
    }

    let checkpoint = Checkpoint::from_store(&model.store, hash, total_epochs.max(start) as u64);
    checkpoint.restore_into(&mut model.store)?;
    Ok(TrainOutcome { model, checkpoint, log })
}

/// Rebuilds a model from a checkpoint written under `cfg`.
pub fn load_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<Model> {
    ck.check_config(cfg.hash()?)?;
    let mut model = build_model(cfg)?;
    ck.restore_into(&mut model.store)?;
    Ok(model)
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{EPOCH_LOG_HEADER}")?;
    for row in log {
        writeln!(f, "{}", row.csv_row())?;
    }
    Ok(())
}

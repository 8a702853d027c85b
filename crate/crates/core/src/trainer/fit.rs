//! The outer training loop: logging, periodic validation and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use alm_tensor::Real;

use crate::corpus::Block;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::trainer::train_loop::{DataIterator, StepStats, Trainer};

pub const TRAIN_LOG: &str = "train.log";
pub const VALID_LOG: &str = "valid.log";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub log_interval: usize,
    /// Updates between validations; 0 validates only at the end.
    pub valid_interval: usize,
    /// Receives logs and checkpoints; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Stored in every checkpoint.
    pub config_text: String,
    pub eval: EvalOptions,
    pub pad_id: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitSummary {
    pub steps: usize,
    pub last: Option<StepStats>,
    /// Update and mean validation loss of the best validation so far.
    pub best_valid: Option<(usize, f64)>,
}

struct Logs {
    train: Option<File>,
    valid: Option<File>,
}

fn append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn write_line(file: &mut Option<File>, dir: &Option<PathBuf>, name: &str, line: &str) -> Result<()> {
    if let (Some(f), Some(dir)) = (file.as_mut(), dir) {
        writeln!(f, "{line}").map_err(|e| Error::io(dir.join(name), e))?;
    }
    Ok(())
}

/// Trains until the configured number of updates. On a non-finite loss or
/// gradient the state before the failing update is written as the last
/// checkpoint and the error returned.
pub fn fit<T: Real>(
    trainer: &mut Trainer<'_, T>,
    data: &mut DataIterator,
    valid: &[Block],
    opts: &FitOptions,
) -> Result<FitSummary> {
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut logs = Logs {
        train: opts.out_dir.as_ref().map(|d| append(&d.join(TRAIN_LOG))).transpose()?,
        valid: opts.out_dir.as_ref().map(|d| append(&d.join(VALID_LOG))).transpose()?,
    };
    let mut summary = FitSummary::default();
    let save = |trainer: &Trainer<'_, T>, data: &DataIterator, name: &str| -> Result<()> {
        match &opts.out_dir {
            Some(dir) => trainer
                .checkpoint(&opts.config_text, data.state())
                .save(&dir.join(name)),
            None => Ok(()),
        }
    };
    while !trainer.is_done() {
        let stats = match trainer.train_step(data) {
            Ok(s) => s,
            Err(e @ Error::NonFinite(_)) => {
                log::error!("{e}; keeping the state before this update");
                save(trainer, data, LAST_CHECKPOINT)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        summary.steps += 1;
        summary.last = Some(stats);
        if stats.step % opts.log_interval == 0 || trainer.is_done() {
            let line = stats.log_line();
            log::info!("{line}");
            write_line(&mut logs.train, &opts.out_dir, TRAIN_LOG, &line)?;
        }
        let validate_now = trainer.is_done() || (opts.valid_interval > 0 && stats.step % opts.valid_interval == 0);
        if validate_now {
            if !valid.is_empty() {
                let report = evaluate(trainer.model(), &trainer.store, valid, opts.pad_id, opts.eval)?;
                let loss = report.mean_nll();
                let line = format!("{}\t{:.6}\t{:.4}", stats.step, loss, loss.exp());
                log::info!("valid {line}");
                write_line(&mut logs.valid, &opts.out_dir, VALID_LOG, &line)?;
                if summary.best_valid.is_none_or(|(_, best)| loss < best) {
                    summary.best_valid = Some((stats.step, loss));
                    save(trainer, data, BEST_CHECKPOINT)?;
                }
            }
            save(trainer, data, LAST_CHECKPOINT)?;
        }
    }
    Ok(summary)
}

//! Mini-batch SGD with heavy-ball momentum, per-epoch evaluation, run logs and
//! resumable checkpoints.

mod checkpoint;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{batch_count, Batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_loss, softmax_xent_row, Model};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;
use crate::Mode;

pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUNLOG_HEADER: &str = "epoch,train_loss,test_loss,test_error_percent";

/// Rows evaluated per inference call.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (and after the last).
    pub eval_every: usize,
    /// Diagnostic snapshot interval in steps; `None` disables diagnostics.
    pub diag_interval: Option<u64>,
    /// Where the run log and checkpoint are written after each epoch.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 512,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            eval_every: 1,
            diag_interval: Some(500),
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.diag_interval == Some(0) {
            return bad("diagnostic interval must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_error_percent: f64,
}

/// Per-epoch results, epochs strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    rows: Vec<EpochRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog::default()
    }

    pub fn rows(&self) -> &[EpochRecord] {
        &self.rows
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    pub fn push(&mut self, row: EpochRecord) -> Result<()> {
        if let Some(prev) = self.rows.last() {
            if row.epoch <= prev.epoch {
                return Err(Error::InvalidParameter(format!(
                    "run log epochs must increase: {} after {}",
                    row.epoch, prev.epoch
                )));
            }
        }
        if !(0.0..=100.0).contains(&row.test_error_percent) {
            return Err(Error::InvalidParameter(format!(
                "test error {} outside [0, 100]",
                row.test_error_percent
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Best (lowest) test error over all rows.
    pub fn best_test_error(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.test_error_percent).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                r.epoch, r.train_loss, r.test_loss, r.test_error_percent
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(RUNLOG_HEADER) {
            return Err(Error::InvalidParameter(format!(
                "run log must start with header {RUNLOG_HEADER:?}"
            )));
        }
        let mut log = RunLog::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::InvalidParameter(format!("malformed run log row {}: {line:?}", n + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            log.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                test_loss: num(f[2])?,
                test_error_percent: num(f[3])?,
            })?;
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunLog::from_csv(&text)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Heavy-ball SGD: `v ← momentum·v − lr·g`, `θ ← θ + v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocities: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(model: &Model, learning_rate: f64, momentum: f64) -> Self {
        let velocities = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        SgdMomentum {
            learning_rate,
            momentum,
            velocities,
        }
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    pub fn set_velocities(&mut self, velocities: Vec<Tensor>) -> Result<()> {
        if velocities.len() != self.velocities.len() {
            return Err(Error::shape(
                "optimizer velocities",
                &[self.velocities.len()],
                &[velocities.len()],
            ));
        }
        for (old, new) in self.velocities.iter().zip(&velocities) {
            if old.shape() != new.shape() {
                return Err(Error::shape("optimizer velocity", old.shape(), new.shape()));
            }
        }
        self.velocities = velocities;
        Ok(())
    }

    pub fn step(&mut self, model: &mut Model) {
        let (lr, m) = (self.learning_rate, self.momentum);
        for ((param, grad), vel) in model.params_and_grads_mut().into_iter().zip(&mut self.velocities) {
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.data_mut()) {
                *v = m * *v - lr * g;
                *p += *v;
            }
        }
    }
}

/// Mean cross-entropy and percentage of argmax mistakes over `data`, in
/// inference mode. The model is not modified.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut wrong) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather(chunk);
        let logits = model.infer(&x)?;
        let (_, classes) = logits.dims2()?;
        for (row, &label) in logits.data().chunks_exact(classes).zip(&labels) {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            loss += softmax_xent_row(row, label).0;
            if argmax(row) != label {
                wrong += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, 100.0 * wrong as f64 / n))
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepInfo {
    /// Zero-based global step.
    pub step: u64,
    /// One-based epoch this step belongs to.
    pub epoch: usize,
    /// Last step of the whole run.
    pub is_final: bool,
}

/// Hooks called by the training loop. `after_forward` sees the model between
/// the forward and backward pass of a step, so every projection's statistics
/// are the ones its current matrix was drawn from.
pub trait StepObserver {
    fn after_forward(&mut self, _info: StepInfo, _model: &Model) -> Result<()> {
        Ok(())
    }

    fn after_epoch(&mut self, _record: &EpochRecord, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl StepObserver for () {}

#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    optimizer: SgdMomentum,
    shuffle: RngStream,
    config: TrainConfig,
    epoch: usize,
    step: u64,
    log: RunLog,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = SgdMomentum::new(&model, config.learning_rate, config.momentum);
        Ok(Trainer {
            shuffle: RngStream::new(config.seed, streams::SHUFFLE),
            model,
            optimizer,
            config,
            epoch: 0,
            step: 0,
            log: RunLog::new(),
        })
    }

    /// Continues a run from a checkpoint. `out_dir` is not stored in the
    /// checkpoint and must be set again by the caller if wanted.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.restore_model()?;
        let mut trainer = Trainer::new(model, ckpt.config.clone())?;
        if !ckpt.velocities.is_empty() {
            trainer.optimizer.set_velocities(ckpt.velocities)?;
        }
        trainer.shuffle = RngStream::from_state(ckpt.shuffle_state);
        trainer.epoch = ckpt.epoch;
        trainer.step = ckpt.step;
        trainer.log = ckpt.log;
        Ok(trainer)
    }

    pub fn resume(path: &Path) -> Result<Self> {
        Trainer::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn optimizer(&self) -> &SgdMomentum {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changes the total epoch count, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        self.config.epochs = epochs;
        Ok(())
    }

    pub fn set_out_dir(&mut self, dir: Option<PathBuf>) {
        self.config.out_dir = dir;
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn into_parts(self) -> (Model, RunLog) {
        (self.model, self.log)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(self)
    }

    /// Trains one epoch and, when scheduled, evaluates on `test`. Returns the
    /// logged row, if any.
    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        observer: &mut dyn StepObserver,
    ) -> Result<Option<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let epoch = self.epoch + 1;
        let total_steps = (self.config.epochs * batch_count(train.len(), self.config.batch_size)) as u64;
        let mut loss_sum = 0.0;
        for (x, labels) in Batches::shuffled(train, self.config.batch_size, &mut self.shuffle)? {
            let logits = self.model.forward(&x, Mode::Training)?;
            let (loss, dlogits) = cross_entropy_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: self.step,
                });
            }
            observer.after_forward(
                StepInfo {
                    step: self.step,
                    epoch,
                    is_final: self.step + 1 == total_steps,
                },
                &self.model,
            )?;
            self.model.backward(&dlogits)?;
            self.optimizer.step(&mut self.model);
            loss_sum += loss * labels.len() as f64;
            self.step += 1;
        }
        self.epoch = epoch;

        let mut record = None;
        if epoch.is_multiple_of(self.config.eval_every) || epoch == self.config.epochs {
            let (test_loss, test_error_percent) = evaluate(&self.model, test)?;
            let row = EpochRecord {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                test_loss,
                test_error_percent,
            };
            self.log.push(row)?;
            observer.after_epoch(&row, &self.model)?;
            record = Some(row);
        }
        if let Some(dir) = &self.config.out_dir {
            self.log.write_csv(&dir.join(RUNLOG_FILE))?;
            self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(record)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, train: &Dataset, test: &Dataset, observer: &mut dyn StepObserver) -> Result<()> {
        if let Some(dir) = &self.config.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while !self.is_done() {
            self.run_epoch(train, test, observer)?;
        }
        Ok(())
    }
}

/// Trains `model` from scratch for `config.epochs` epochs.
pub fn train(model: Model, train: &Dataset, test: &Dataset, config: TrainConfig) -> Result<(Model, RunLog)> {
    train_observed(model, train, test, config, &mut ())
}

pub fn train_observed(
    model: Model,
    train: &Dataset,
    test: &Dataset,
    config: TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<(Model, RunLog)> {
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(train, test, observer)?;
    Ok(trainer.into_parts())
}

#[cfg(test)]
mod tests;

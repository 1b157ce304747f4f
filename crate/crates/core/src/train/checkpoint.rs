//! Binary checkpoints.
//!
//! All integers and floats are little-endian. Layout, in order:
//!
//! ```text
//! magic        8 bytes  "VISPCKPT"
//! version      u32      currently 1
//! spec         u8 dataset (0 mnist, 1 cifar10)
//!              u8 regularizer (0 none, 1 fixed noise, 2 visp)
//!              3 × f64  noise stds, or beta/epsilon/alpha, or zeros
//!              u64 model seed
//! config       u64 epochs, u64 batch_size, f64 learning_rate, f64 momentum,
//!              u64 seed, u64 eval_every, u64 diag_interval (0 = off)
//! progress     u64 completed epochs, u64 completed steps
//! params       tensor list
//! velocities   tensor list (may be empty)
//! stats        u32 count, then per projection layer:
//!              u64 d, f64 beta, f64 epsilon, f64 alpha, u64 step_count,
//!              d × f64 mu, d × f64 sigma_sq
//! noise rngs   u32 count, then rng states in layer order
//! shuffle rng  rng state
//! run log      u32 rows, then per row u64 epoch and 3 × f64
//! ```
//!
//! A tensor list is a `u32` count followed by tensors, each written as
//! `u32 rank`, `rank × u64` dims, `u8 dtype` (1 = f64) and the row-major
//! values. An rng state is 32 seed bytes, `u64` stream and `u128` word
//! position. The last drawn projection matrix is not stored; it is redrawn on
//! the next training forward pass.

use std::path::Path;

use super::{write_atomic, EpochRecord, RunLog, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::gradstats::GradStats;
use crate::nn::{DatasetKind, Model, ModelSpec, Regularizer, VispParams};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VISPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub params: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
    pub stats: Vec<GradStats>,
    pub noise_states: Vec<RngState>,
    pub shuffle_state: RngState,
    pub log: RunLog,
}

impl Checkpoint {
    pub(super) fn capture(trainer: &Trainer) -> Result<Self> {
        let mut ckpt = Checkpoint::of_model(&trainer.model)?;
        ckpt.config = trainer.config.clone();
        ckpt.config.out_dir = None;
        ckpt.epoch = trainer.epoch;
        ckpt.step = trainer.step;
        ckpt.velocities = trainer.optimizer.velocities().to_vec();
        ckpt.shuffle_state = trainer.shuffle.state();
        ckpt.log = trainer.log.clone();
        Ok(ckpt)
    }

    /// A checkpoint of the model alone, with a fresh default training state.
    pub fn of_model(model: &Model) -> Result<Self> {
        let spec = model
            .spec()
            .ok_or_else(|| Error::InvalidSpec("only models built from a spec can be checkpointed".into()))?
            .clone();
        let config = TrainConfig {
            seed: spec.seed,
            ..TrainConfig::default()
        };
        Ok(Checkpoint {
            shuffle_state: crate::rng::RngStream::new(config.seed, crate::rng::streams::SHUFFLE).state(),
            spec,
            config,
            epoch: 0,
            step: 0,
            params: model.params().into_iter().cloned().collect(),
            velocities: Vec::new(),
            stats: model.projections().map(|p| p.stats().clone()).collect(),
            noise_states: model.noise_rng_states(),
            log: RunLog::new(),
        })
    }

    /// Rebuilds the model from the stored spec and overwrites its state.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::build(&self.spec)?;
        let mut slots = model.params_and_grads_mut();
        if slots.len() != self.params.len() {
            return Err(Error::shape("checkpoint parameters", &[slots.len()], &[self.params.len()]));
        }
        for ((dst, _), src) in slots.iter_mut().zip(&self.params) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("checkpoint parameter", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        drop(slots);
        let count = model.projections().count();
        if count != self.stats.len() {
            return Err(Error::shape("checkpoint statistics", &[count], &[self.stats.len()]));
        }
        for (p, s) in model.projections_mut().zip(&self.stats) {
            p.set_stats(s.clone())?;
        }
        model.set_noise_rng_states(&self.noise_states)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);

        w.u8(match self.spec.dataset {
            DatasetKind::Mnist => 0,
            DatasetKind::Cifar10 => 1,
        });
        let (tag, vals) = match &self.spec.regularizer {
            Regularizer::None => (0, [0.0; 3]),
            Regularizer::FixedNoise { stds } => (1, *stds),
            Regularizer::Visp(p) => (2, [p.beta, p.epsilon, p.alpha]),
        };
        w.u8(tag);
        vals.iter().for_each(|&v| w.f64(v));
        w.u64(self.spec.seed);

        let c = &self.config;
        w.u64(c.epochs as u64);
        w.u64(c.batch_size as u64);
        w.f64(c.learning_rate);
        w.f64(c.momentum);
        w.u64(c.seed);
        w.u64(c.eval_every as u64);
        w.u64(c.diag_interval.unwrap_or(0));

        w.u64(self.epoch as u64);
        w.u64(self.step);
        w.tensors(&self.params);
        w.tensors(&self.velocities);

        w.u32(self.stats.len() as u32);
        for s in &self.stats {
            w.u64(s.dim() as u64);
            w.f64(s.beta());
            w.f64(s.epsilon());
            w.f64(s.alpha());
            w.u64(s.step_count());
            s.mu().iter().for_each(|&v| w.f64(v));
            s.sigma_sq().iter().for_each(|&v| w.f64(v));
        }

        w.u32(self.noise_states.len() as u32);
        self.noise_states.iter().for_each(|s| w.rng(s));
        w.rng(&self.shuffle_state);

        w.u32(self.log.rows().len() as u32);
        for r in self.log.rows() {
            w.u64(r.epoch as u64);
            w.f64(r.train_loss);
            w.f64(r.test_loss);
            w.f64(r.test_error_percent);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::FormatVersionMismatch("missing checkpoint magic".into()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersionMismatch(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }

        let dataset = match r.u8()? {
            0 => DatasetKind::Mnist,
            1 => DatasetKind::Cifar10,
            other => return Err(Error::FormatVersionMismatch(format!("unknown dataset tag {other}"))),
        };
        let tag = r.u8()?;
        let vals = [r.f64()?, r.f64()?, r.f64()?];
        let regularizer = match tag {
            0 => Regularizer::None,
            1 => Regularizer::FixedNoise { stds: vals },
            2 => Regularizer::Visp(VispParams {
                beta: vals[0],
                epsilon: vals[1],
                alpha: vals[2],
            }),
            other => return Err(Error::FormatVersionMismatch(format!("unknown regularizer tag {other}"))),
        };
        let spec = ModelSpec {
            dataset,
            regularizer,
            seed: r.u64()?,
        };

        let epochs = r.usize()?;
        let batch_size = r.usize()?;
        let learning_rate = r.f64()?;
        let momentum = r.f64()?;
        let seed = r.u64()?;
        let eval_every = r.usize()?;
        let diag = r.u64()?;
        let config = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            momentum,
            seed,
            eval_every,
            diag_interval: (diag > 0).then_some(diag),
            out_dir: None,
        };

        let epoch = r.usize()?;
        let step = r.u64()?;
        let params = r.tensors()?;
        let velocities = r.tensors()?;

        let n = r.u32()? as usize;
        let mut stats = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let d = r.usize()?;
            let (beta, epsilon, alpha) = (r.f64()?, r.f64()?, r.f64()?);
            let steps = r.u64()?;
            let mu = r.f64s(d)?;
            let sigma_sq = r.f64s(d)?;
            stats.push(GradStats::from_parts(mu, sigma_sq, beta, epsilon, alpha, steps)?);
        }

        let n = r.u32()? as usize;
        let noise_states = (0..n).map(|_| r.rng()).collect::<Result<Vec<_>>>()?;
        let shuffle_state = r.rng()?;

        let n = r.u32()? as usize;
        let mut log = RunLog::new();
        for _ in 0..n {
            log.push(EpochRecord {
                epoch: r.usize()?,
                train_loss: r.f64()?,
                test_loss: r.f64()?,
                test_error_percent: r.f64()?,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::FormatVersionMismatch(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            spec,
            config,
            epoch,
            step,
            params,
            velocities,
            stats,
            noise_states,
            shuffle_state,
            log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Saves the model's parameters, statistics and random streams.
pub fn checkpoint_save(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::of_model(model)?.save(path)
}

/// Loads the model stored in any checkpoint.
pub fn checkpoint_load(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.restore_model()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn rng(&mut self, s: &RngState) {
        self.0.extend_from_slice(&s.seed);
        self.u64(s.stream);
        self.0.extend_from_slice(&s.word_pos.to_le_bytes());
    }
    fn tensors(&mut self, ts: &[Tensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.u32(t.rank() as u32);
            t.shape().iter().for_each(|&d| self.u64(d as u64));
            self.u8(DTYPE_F64);
            t.data().iter().for_each(|&v| self.f64(v));
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::FormatVersionMismatch(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::FormatVersionMismatch("count does not fit in usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::FormatVersionMismatch("tensor length overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn rng(&mut self) -> Result<RngState> {
        Ok(RngState {
            seed: self.array()?,
            stream: self.u64()?,
            word_pos: u128::from_le_bytes(self.array()?),
        })
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let dtype = self.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::FormatVersionMismatch(format!("unknown tensor dtype {dtype}")));
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::FormatVersionMismatch("tensor length overflows".into())
            })?;
            out.push(Tensor::new(shape, self.f64s(len)?)?);
        }
        Ok(out)
    }
}

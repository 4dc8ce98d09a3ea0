use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use super::loss::{total_loss, LossConfig};
use crate::autodiff::Tape;
use crate::error::{contract_err, Error, Result};
use crate::model::{save_checkpoint, ForwardOptions, Model};
use crate::ops::NormMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One training example at model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    /// `[4, S, S]`: RGB scaled to [-1, 1] followed by the visible mask.
    pub input: Vec<T>,
    /// `[1, S, S]` in {0, 1}.
    pub amodal: Vec<T>,
    /// `[1, S, S]` in {0, 1}.
    pub occluded: Vec<T>,
}

/// A batch stacked along the leading dimension.
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub amodal: Tensor<T>,
    pub occluded: Tensor<T>,
}

pub fn stack_batch<T: Scalar>(samples: &[&TrainSample<T>], side: usize) -> Result<Batch<T>> {
    let n = samples.len();
    let plane = side * side;
    let mut input = Vec::with_capacity(n * 4 * plane);
    let mut amodal = Vec::with_capacity(n * plane);
    let mut occluded = Vec::with_capacity(n * plane);
    for s in samples {
        if s.input.len() != 4 * plane || s.amodal.len() != plane || s.occluded.len() != plane {
            return contract_err(format!("training sample does not match side {side}"));
        }
        input.extend_from_slice(&s.input);
        amodal.extend_from_slice(&s.amodal);
        occluded.extend_from_slice(&s.occluded);
    }
    Ok(Batch {
        input: Tensor::new(vec![n, 4, side, side], input)?,
        amodal: Tensor::new(vec![n, 1, side, side], amodal)?,
        occluded: Tensor::new(vec![n, 1, side, side], occluded)?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// JSON Lines training log.
    pub log_path: Option<PathBuf>,
    /// Final checkpoint.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            log_path: None,
            checkpoint_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_a: f64,
    pub loss_o: f64,
    pub loss_total: f64,
}

/// Seeded batch order: each epoch visits every sample once in a fresh
/// permutation; batches may straddle epochs.
pub struct BatchSampler {
    n: usize,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.queue.is_empty() {
                let mut perm: Vec<usize> = (0..self.n).collect();
                perm.shuffle(&mut self.rng);
                perm.reverse();
                self.queue = perm;
            }
            out.push(self.queue.pop().expect("non-empty"));
        }
        out
    }
}

fn last_good_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".last_good");
    PathBuf::from(s)
}

/// Trains `model` in place and returns the per-step loss log.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`]; the
/// parameters from before the failing step are then saved next to the
/// configured checkpoint.
pub fn fit<T: Scalar>(model: &mut Model<T>, samples: &[TrainSample<T>], cfg: &FitConfig) -> Result<Vec<LogRecord>> {
    if samples.is_empty() {
        return contract_err("training set is empty");
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let side = model.config().image_side;
    let mut opt = AdamW::<T>::new(cfg.optimizer);
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed);
    let mut log_file = match &cfg.log_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let picked: Vec<&TrainSample<T>> = idx.iter().map(|&i| &samples[i]).collect();
        let batch = stack_batch(&picked, side)?;
        let outcome = train_step(model, &mut opt, &batch, &cfg.loss);
        let record = match outcome {
            Ok(r) => LogRecord { step, ..r },
            Err(Error::NonFinite(_)) => {
                let last_good = match &cfg.checkpoint_path {
                    Some(p) => {
                        let lg = last_good_path(p);
                        save_checkpoint(model, &lg)?;
                        Some(lg)
                    }
                    None => None,
                };
                return Err(Error::Diverged { step, last_good });
            }
            Err(e) => return Err(e),
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        log.push(record);
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    if let Some(p) = &cfg.checkpoint_path {
        save_checkpoint(model, p)?;
    }
    Ok(log)
}

/// One forward/backward/update on a stacked batch. The returned record's
/// `step` is zero.
pub fn train_step<T: Scalar>(model: &mut Model<T>, opt: &mut AdamW<T>, batch: &Batch<T>, loss: &LossConfig) -> Result<LogRecord> {
    let (record, grads, updates) = {
        let mut tape = Tape::new();
        let x = tape.input(&batch.input);
        let out = model.forward(&mut tape, x, NormMode::Train, ForwardOptions::default())?;
        let gt_o = out.occluded.map(|_| &batch.occluded);
        let terms = total_loss(&mut tape, out.amodal, out.occluded, &batch.amodal, gt_o, loss)?;
        let val = |v| tape.value(v).item().map(|x: T| x.to_f64().unwrap_or(f64::NAN));
        let record = LogRecord {
            step: 0,
            loss_a: val(terms.amodal)?,
            loss_o: terms.occluded.map(val).transpose()?.unwrap_or(0.0),
            loss_total: val(terms.total)?,
        };
        if !record.loss_total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut grads = tape.backward(terms.total)?.into_params();
        // Parameters disconnected from the loss (the occluded head when its
        // weight is zero) have a zero gradient.
        for (id, e) in model.params().entries().iter().enumerate() {
            if e.role.trainable() {
                grads.entry(id).or_insert_with(|| vec![T::zero(); e.tensor.numel()]);
            }
        }
        (record, grads, out.bn_updates)
    };
    opt.step(model.params_mut(), &grads)?;
    model.apply_bn_updates(&updates);
    Ok(record)
}

//! Adam training of the composite objective `cross_entropy + λ·L_c`,
//! evaluation, and metrics output.

mod checkpoint;

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::Tape;
use crate::correlation::corr_loss;
use crate::data::{augment, shuffled_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplied into the learning rate once every `decay_period` epochs.
    pub lr_decay: f64,
    pub decay_period: usize,
    /// Weight of the correlation loss; only applied to regularized models.
    pub lambda: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub precision: DType,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            lr_decay: 0.1,
            decay_period: 5,
            lambda: 1e-2,
            seed: 0,
            deterministic: false,
            precision: DType::F32,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("lr_decay", self.lr_decay)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.decay_period == 0 {
            return Err(Error::config("decay_period must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (batchnorm needs a batch variance)"));
        }
        Ok(())
    }

    /// `lr₀ · decay^⌊epoch / period⌋` for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_period) as i32)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    pub(crate) fn from_parts(step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// One update. Tensors without a gradient keep their value and moments.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<Option<Tensor<T>>>, lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step_size = T::lit(lr / (1.0 - self.beta1.powi(t)));
        let bias2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            // unreachable from the loss: leave untouched
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + c1 * *gi;
                *vi = b2 * *vi + c2 * *gi * *gi;
                *w -= step_size * *mi / ((*vi * bias2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Value and gradients of the composite loss for one batch.
pub struct LossEval<T> {
    pub task_loss: f64,
    pub corr_loss: f64,
    pub total_loss: f64,
    pub correct: usize,
    /// In [`Model::learnable_mut`] order.
    pub grads: Vec<Option<Tensor<T>>>,
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

/// Training-mode forward and backward of `CE + lambda·L_c`.
pub fn loss_and_gradients<T: Scalar>(
    model: &Model<T>,
    images: Tensor<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<LossEval<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(images)?;
    let pass = model.forward(&mut tape, x, true)?;
    let ce = tape.softmax_cross_entropy(pass.logits, labels)?;
    let corr = corr_loss(&mut tape, &pass.primaries)?;
    let loss = if lambda > 0.0 && !pass.primaries.is_empty() {
        let weighted = tape.scale(corr, lambda)?;
        tape.add(ce, weighted)?
    } else {
        ce
    };
    let value = |v| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    let (task_loss, corr_loss, total_loss) = (value(ce), value(corr), value(loss));
    let correct = count_correct(tape.value(pass.logits), labels);
    let mut grads = tape.backward(loss)?;
    Ok(LossEval {
        task_loss,
        corr_loss,
        total_loss,
        correct,
        grads: pass.params.iter().map(|v| grads.take(*v)).collect(),
        batch_stats: pass.batch_stats,
    })
}

/// Index of the largest logit per row; ties go to the lowest class.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    logits
        .data()
        .chunks(logits.row_len())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                .0
        })
        .collect()
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub corr_loss: f64,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Mean correlation loss over the epoch's steps.
    pub corr_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct Trainer<T> {
    model: Model<T>,
    config: TrainConfig,
    optimizer: Adam<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    steps: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.learnable_mut().into_iter().map(|t| &*t));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep the data stream apart from the initialization stream
        rng.set_stream(1);
        Ok(Self {
            model,
            config,
            optimizer,
            rng,
            epoch: 0,
            steps: 0,
        })
    }

    pub fn resume(checkpoint: Checkpoint<T>) -> Result<Self> {
        let Checkpoint {
            mut model,
            config,
            epoch,
            rng,
            optimizer,
        } = checkpoint;
        config.validate()?;
        if model.is_folded() {
            return Err(Error::config("a folded model cannot be trained"));
        }
        let optimizer = match optimizer {
            Some(o) => o,
            None => Adam::new(model.learnable_mut().into_iter().map(|t| &*t)),
        };
        Ok(Self {
            steps: optimizer.steps(),
            model,
            config,
            optimizer,
            rng: rng.restore(),
            epoch,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    fn lambda(&self) -> f64 {
        if self.model.spec().regularized {
            self.config.lambda
        } else {
            0.0
        }
    }

    /// One optimizer step on a prepared batch.
    pub fn train_step(&mut self, images: Tensor<T>, labels: &[usize], lr: f64) -> Result<StepStats> {
        self.steps += 1;
        let step = self.steps;
        let abort = |e: Error| match e {
            Error::NonFinite { op } => Error::Numerical(format!("step {step}: {op} produced a non-finite value")),
            other => other,
        };
        let eval = loss_and_gradients(&self.model, images, labels, self.lambda()).map_err(abort)?;
        if !eval.total_loss.is_finite() {
            return Err(Error::Numerical(format!("step {step}: loss is {}", eval.total_loss)));
        }
        self.model.update_running_stats(&eval.batch_stats)?;
        self.optimizer
            .step(self.model.learnable_mut(), eval.grads, lr)
            .map_err(abort)?;
        Ok(StepStats {
            task_loss: eval.task_loss,
            corr_loss: eval.corr_loss,
            correct: eval.correct,
        })
    }

    /// One pass over `data` in shuffled batches. A trailing batch of a
    /// single sample is skipped (batchnorm needs two).
    pub fn train_epoch(&mut self, data: &LabeledDataset<T>) -> Result<EpochMetrics> {
        if data.channels() != self.model.input_channels() {
            return Err(Error::config(format!(
                "dataset has {} channels, model expects {}",
                data.channels(),
                self.model.input_channels()
            )));
        }
        let started = Instant::now();
        let lr = self.config.lr_at(self.epoch);
        let batches = shuffled_batches(data.len(), self.config.batch_size, &mut self.rng);
        let (mut loss_sum, mut corr_sum, mut correct, mut seen, mut steps) = (0.0, 0.0, 0, 0, 0);
        for idx in batches.iter().filter(|b| b.len() >= 2) {
            let (mut images, labels) = data.gather(idx)?;
            if self.config.augment {
                images = augment(&images, data.kind(), &mut self.rng)?;
            }
            let stats = self.train_step(images, &labels, lr).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("epoch {}, {msg}", self.epoch + 1)),
                other => other,
            })?;
            loss_sum += stats.task_loss * labels.len() as f64;
            corr_sum += stats.corr_loss;
            correct += stats.correct;
            seen += labels.len();
            steps += 1;
        }
        self.epoch += 1;
        let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: per(loss_sum, seen),
            train_acc: per(correct as f64, seen),
            corr_loss: per(corr_sum, steps),
            lr,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
}

/// Top-1 accuracy and mean cross-entropy in evaluation mode.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &LabeledDataset<T>, batch_size: usize) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = data.gather(chunk)?;
        let mut tape = Tape::inference();
        let x = tape.constant(images)?;
        let pass = model.forward(&mut tape, x, false)?;
        let ce = tape.softmax_cross_entropy(pass.logits, &labels)?;
        loss_sum += tape.value(ce).data()[0].to_f64().unwrap_or(f64::NAN) * labels.len() as f64;
        predictions.extend(argmax_rows(tape.value(pass.logits)));
    }
    let correct = predictions.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    let total = data.len();
    let ratio = |x: f64| if total == 0 { 0.0 } else { x / total as f64 };
    Ok(Evaluation {
        correct,
        total,
        accuracy: ratio(correct as f64),
        mean_loss: ratio(loss_sum),
        predictions,
    })
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,L_c,lr,seconds";

/// One metrics CSV line (no newline). With `deterministic` the wall-clock
/// column is written as 0 so that seeded runs compare byte for byte.
pub fn metrics_row(m: &EpochMetrics, test_acc: f64, deterministic: bool) -> String {
    let mut line = String::new();
    let seconds = if deterministic { 0.0 } else { m.seconds };
    let _ = write!(
        line,
        "{},{:.6},{:.6},{:.6},{:.6},{:e},{:.3}",
        m.epoch, m.train_loss, m.train_acc, test_acc, m.corr_loss, m.lr, seconds
    );
    line
}

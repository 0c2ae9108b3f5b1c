use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{bce_with_logits, dense_backward, dense_forward, sigmoid};
use super::network::{Layer, LayerGrad, LayerKind, Network};
use super::{CnnError, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            learning_rate: 1e-4,
            momentum: 0.0,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), CnnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CnnError::InvalidSpec(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CnnError::InvalidSpec(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(CnnError::InvalidSpec("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Flat samples of equal length with 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples<T> {
    pub data: Vec<T>,
    pub sample_len: usize,
    pub labels: Vec<f64>,
}

impl<T: Real> Samples<T> {
    pub fn new(data: Vec<T>, sample_len: usize, labels: Vec<f64>) -> Result<Self, CnnError> {
        if data.len() != sample_len * labels.len() {
            return Err(CnnError::ShapeMismatch(format!(
                "{} values for {} samples of length {sample_len}",
                data.len(),
                labels.len()
            )));
        }
        Ok(Samples { data, sample_len, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        &self.data[i * self.sample_len..(i + 1) * self.sample_len]
    }

    fn gather(&self, indices: &[usize]) -> (Vec<T>, Vec<f64>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        (data, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Applies `f` to consecutive chunks of at most `chunk` samples and
    /// concatenates the per-sample outputs.
    fn map_chunks(
        &self,
        chunk: usize,
        mut f: impl FnMut(Vec<T>, usize) -> Result<Vec<T>, CnnError>,
    ) -> Result<Vec<T>, CnnError> {
        let mut out = Vec::new();
        let indices: Vec<usize> = (0..self.len()).collect();
        for part in indices.chunks(chunk.max(1)) {
            let (data, _) = self.gather(part);
            out.extend(f(data, part.len())?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch mean losses.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub const HISTORY_HEADER: &str = "epoch\ttrain_loss\tval_loss\tval_accuracy";

pub fn write_history<W: Write>(mut out: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(out, "{}\t{:.6}\t{:.6}\t{:.4}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy)?;
    }
    out.flush()
}

/// Loss and accuracy (probability ≥ 0.5 predicts 1) of logits against labels.
pub fn score<T: Real>(logits: &[T], labels: &[f64]) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let (loss, _) = bce_with_logits(logits, labels);
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(z, &y)| (sigmoid(z.as_f64()) >= 0.5) == (y >= 0.5))
        .count();
    (loss, correct as f64 / labels.len() as f64)
}

/// Batch size used for inference-only passes.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FineTuneOptions {
    pub freeze_blocks: usize,
    pub freeze_fc: bool,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        FineTuneOptions {
            freeze_blocks: 4,
            freeze_fc: false,
        }
    }
}

/// Freezes the first `freeze_blocks` conv blocks, reinitializes every trainable
/// layer from `spec.seed` and trains with SGD on mini-batches of `train`.
/// Activations of the frozen prefix are computed once up front.
pub fn fine_tune<T: Real>(
    net: &mut Network<T>,
    train: &Samples<T>,
    val: &Samples<T>,
    spec: &TrainSpec,
    opts: FineTuneOptions,
) -> Result<Vec<EpochRecord>, CnnError> {
    spec.validate()?;
    net.set_frozen(opts.freeze_blocks, opts.freeze_fc)?;
    if train.is_empty() || val.is_empty() {
        return Err(CnnError::EmptySplit);
    }
    for s in [train, val] {
        if s.sample_len != net.config.image_len() {
            return Err(CnnError::ShapeMismatch(format!(
                "samples of length {} for a {}-value input",
                s.sample_len,
                net.config.image_len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..net.layers.len() {
        if net.layers[i].trainable {
            net.reinitialize_layer(i, &mut rng);
        }
    }
    net.clear_momentum();

    let start = net.block_boundary(opts.freeze_blocks);
    let prefix_len = net.dims_at(start).len();
    let prefix = |s: &Samples<T>, net: &Network<T>| -> Result<Samples<T>, CnnError> {
        let data = s.map_chunks(EVAL_CHUNK, |data, n| net.prefix(&data, n, start))?;
        Samples::new(data, prefix_len, s.labels.clone())
    };
    let train_in = prefix(train, net)?;
    let val_in = prefix(val, net)?;
    let any_trainable = net.layers.iter().any(|l| l.trainable);

    let mut history = Vec::with_capacity(spec.epochs);
    let mut order: Vec<usize> = (0..train_in.len()).collect();
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(spec.batch_size) {
            let (data, labels) = train_in.gather(batch);
            let (logits, cache) = net.forward_from(start, data, batch.len())?;
            let grads = net.backward(&cache, &logits, &labels)?;
            batch_losses.push(grads.loss);
            if any_trainable {
                net.sgd_step(&grads, spec)?;
            }
        }
        let logits = val_in.map_chunks(EVAL_CHUNK, |data, n| net.predict_from(start, data, n))?;
        let (val_loss, val_accuracy) = score(&logits, &val_in.labels);
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        log::info!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
    }
    Ok(history)
}

/// Single logistic unit over stored feature vectors.
#[derive(Debug, Clone)]
pub struct LogisticHead<T> {
    pub layer: Layer<T>,
}

impl<T: Real> LogisticHead<T> {
    pub fn zeros(features: usize) -> Self {
        LogisticHead {
            layer: Layer::zeros("head", LayerKind::Dense { fin: features, fout: 1 }, None),
        }
    }

    pub fn features(&self) -> usize {
        self.layer.kind.fan_in()
    }

    pub fn logits(&self, features: &[T], n: usize) -> Result<Vec<T>, CnnError> {
        if features.len() != n * self.features() {
            return Err(CnnError::ShapeMismatch(format!(
                "expected {n} feature vectors of length {}",
                self.features()
            )));
        }
        Ok(dense_forward(features, n, self.features(), &self.layer.weight, &self.layer.bias, 1))
    }
}

/// Trains a logistic head on feature vectors with the same SGD update and
/// batching as [`fine_tune`]. Weights start at zero.
pub fn train_logistic_head<T: Real>(
    train: &Samples<T>,
    val: &Samples<T>,
    spec: &TrainSpec,
) -> Result<(LogisticHead<T>, Vec<EpochRecord>), CnnError> {
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CnnError::EmptySplit);
    }
    if val.sample_len != train.sample_len {
        return Err(CnnError::ShapeMismatch("train and validation feature lengths differ".into()));
    }
    let mut head = LogisticHead::zeros(train.sample_len);
    let f = train.sample_len;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(spec.batch_size) {
            let (x, labels) = train.gather(batch);
            let logits = head.logits(&x, batch.len())?;
            let (loss, dz) = bce_with_logits(&logits, &labels);
            let (dw, db, _) = dense_backward(&x, batch.len(), f, &head.layer.weight, 1, &dz, false);
            head.layer.sgd_update(&LayerGrad { weight: dw, bias: db }, spec)?;
            batch_losses.push(loss);
        }
        let logits = head.logits(&val.data, val.len())?;
        let (val_loss, val_accuracy) = score(&logits, &val.labels);
        history.push(EpochRecord {
            epoch,
            train_loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok((head, history))
}

/// Probabilities for every sample, computed in fixed-size chunks.
pub fn predict_probabilities<T: Real>(net: &Network<T>, images: &Samples<T>) -> Result<Vec<f64>, CnnError> {
    let logits = images.map_chunks(EVAL_CHUNK, |data, n| net.predict(&data, n))?;
    Ok(logits.iter().map(|z| sigmoid(z.as_f64())).collect())
}

/// Feature vectors for every sample, computed in fixed-size chunks.
pub fn extract_all_features<T: Real>(net: &Network<T>, images: &Samples<T>) -> Result<Samples<T>, CnnError> {
    let data = images.map_chunks(EVAL_CHUNK, |data, n| net.extract_features(&data, n))?;
    Samples::new(data, net.config.feature_len(), images.labels.clone())
}

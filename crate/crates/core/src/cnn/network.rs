use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    bce_with_logits, conv3x3_backward, conv3x3_forward, dense_backward, dense_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward,
};
use super::{CnnError, Real, TrainSpec};

/// Convolutions per block.
pub const BLOCK_LAYOUT: [usize; 5] = [2, 2, 3, 3, 3];
/// Channels per block at width scale 1.
pub const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_size: usize,
    /// Multiplies every channel count; channel counts never drop below 1.
    pub width_scale: f64,
    pub fc_sizes: (usize, usize),
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 224,
            width_scale: 1.0,
            fc_sizes: (4096, 4096),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), CnnError> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(CnnError::InvalidConfig(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return Err(CnnError::InvalidConfig(format!("width scale {} outside (0, 1]", self.width_scale)));
        }
        if self.fc_sizes.0 == 0 || self.fc_sizes.1 == 0 {
            return Err(CnnError::InvalidConfig("fully connected sizes must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of block `b` (0-based).
    pub fn block_channels(&self, b: usize) -> usize {
        ((BASE_CHANNELS[b] as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Length of the flattened post-block-5 feature vector.
    pub fn feature_len(&self) -> usize {
        let side = self.input_size / 32;
        side * side * self.block_channels(4)
    }

    pub fn image_len(&self) -> usize {
        self.input_size * self.input_size * 3
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    Map { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Dims {
    pub fn len(&self) -> usize {
        match *self {
            Dims::Map { h, w, c } => h * w * c,
            Dims::Flat(f) => f,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Dims::Map { h, w, c } => write!(f, "{h}x{w}x{c}"),
            Dims::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize },
    Dense { fin: usize, fout: usize },
}

impl LayerKind {
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv { cin, .. } => 9 * cin,
            LayerKind::Dense { fin, .. } => fin,
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv { cin, cout } => vec![3, 3, cin, cout],
            LayerKind::Dense { fin, fout } => vec![fin, fout],
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            LayerKind::Conv { cout, .. } => cout,
            LayerKind::Dense { fout, .. } => fout,
        }
    }
}

#[derive(Clone)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind,
    /// 1-based conv block, `None` for fully connected layers.
    pub block: Option<usize>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub trainable: bool,
    velocity_w: Vec<T>,
    velocity_b: Vec<T>,
}

impl<T: Real> Layer<T> {
    pub fn zeros(name: impl Into<String>, kind: LayerKind, block: Option<usize>) -> Self {
        let wlen = kind.weight_dims().iter().product();
        let blen = kind.outputs();
        Layer {
            name: name.into(),
            kind,
            block,
            weight: vec![T::zero(); wlen],
            bias: vec![T::zero(); blen],
            trainable: true,
            velocity_w: vec![T::zero(); wlen],
            velocity_b: vec![T::zero(); blen],
        }
    }

    /// Uniform weights in `±gain/sqrt(fan_in)`, zero biases, cleared momentum.
    pub fn reinitialize<R: Rng>(&mut self, gain: f64, rng: &mut R) {
        let bound = gain / (self.kind.fan_in() as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in &mut self.weight {
            *w = T::of(dist.sample(rng));
        }
        self.bias.fill(T::zero());
        self.clear_momentum();
    }

    pub fn clear_momentum(&mut self) {
        self.velocity_w.fill(T::zero());
        self.velocity_b.fill(T::zero());
    }

    /// `v ← momentum·v + g; w ← w − lr·v`. A frozen layer is left untouched.
    pub fn sgd_update(&mut self, grad: &LayerGrad<T>, spec: &TrainSpec) -> Result<(), CnnError> {
        if grad.weight.len() != self.weight.len() || grad.bias.len() != self.bias.len() {
            return Err(CnnError::ShapeMismatch(format!("gradient for {} has the wrong size", self.name)));
        }
        if !self.trainable {
            return Ok(());
        }
        let lr = T::of(spec.learning_rate);
        let mu = T::of(spec.momentum);
        for ((w, v), &g) in self.weight.iter_mut().zip(&mut self.velocity_w).zip(&grad.weight) {
            *v = mu * *v + g;
            *w = *w - lr * *v;
        }
        for ((b, v), &g) in self.bias.iter_mut().zip(&mut self.velocity_b).zip(&grad.bias) {
            *v = mu * *v + g;
            *b = *b - lr * *v;
        }
        Ok(())
    }
}

impl<T> fmt::Debug for Layer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Layer")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("trainable", &self.trainable)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients of the mean batch loss, present only for trainable layers.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: f64,
    layers: Vec<(String, Option<LayerGrad<T>>)>,
}

impl<T> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&LayerGrad<T>> {
        self.layers.iter().find(|(n, _)| n == name).and_then(|(_, g)| g.as_ref())
    }

    /// Names of layers that received gradient storage.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().filter(|(_, g)| g.is_some()).map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv(usize),
    Relu,
    Pool,
    Flatten,
    Dense(usize),
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    version: u64,
    start_op: usize,
    n: usize,
    inputs: Vec<(Dims, Vec<T>)>,
    argmax: Vec<Vec<usize>>,
}

/// Architecture rows observed during a forward pass: each block's conv stack output,
/// each pool output, the flatten, and every fully connected output.
pub type ShapeTrace = Vec<(String, Dims)>;

#[derive(Clone)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub layers: Vec<Layer<T>>,
    ops: Vec<Op>,
    /// Bumped on every parameter change so stale caches are detectable.
    version: u64,
}

impl<T> fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .field("layers", &self.layers)
            .finish_non_exhaustive()
    }
}

/// Gain applied to `1/sqrt(fan_in)` for layers followed by ReLU.
pub const HE_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)

/// Gain for the output unit. Inputs keep the 0..255 pixel scale, so hidden
/// activations are large; a small gain keeps the untrained logit near zero.
pub const OUTPUT_GAIN: f64 = 0.01;

impl<T: Real> Network<T> {
    /// All weights and biases zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self, CnnError> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut ops = Vec::new();
        let mut cin = 3;
        for (b, &convs) in BLOCK_LAYOUT.iter().enumerate() {
            let cout = config.block_channels(b);
            for j in 0..convs {
                ops.push(Op::Conv(layers.len()));
                ops.push(Op::Relu);
                layers.push(Layer::zeros(
                    format!("block{}.conv{}", b + 1, j + 1),
                    LayerKind::Conv { cin, cout },
                    Some(b + 1),
                ));
                cin = cout;
            }
            ops.push(Op::Pool);
        }
        ops.push(Op::Flatten);
        let (f1, f2) = config.fc_sizes;
        for (name, fin, fout) in [("fc1", config.feature_len(), f1), ("fc2", f1, f2), ("out", f2, 1)] {
            ops.push(Op::Dense(layers.len()));
            if name != "out" {
                ops.push(Op::Relu);
            }
            layers.push(Layer::zeros(name, LayerKind::Dense { fin, fout }, None));
        }
        Ok(Network { config, layers, ops, version: 0 })
    }

    /// Random initialization from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, CnnError> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..net.layers.len() {
            net.reinitialize_layer(i, &mut rng);
        }
        Ok(net)
    }

    /// Hidden layers use [`HE_GAIN`], the output unit [`OUTPUT_GAIN`].
    pub fn reinitialize_layer<R: Rng>(&mut self, index: usize, rng: &mut R) {
        let layer = &mut self.layers[index];
        let gain = if layer.name == "out" { OUTPUT_GAIN } else { HE_GAIN };
        layer.reinitialize(gain, rng);
        self.version += 1;
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.version += 1;
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Freezes conv blocks `1..=freeze_blocks` (and the FC layers when asked);
    /// everything else becomes trainable.
    pub fn set_frozen(&mut self, freeze_blocks: usize, freeze_fc: bool) -> Result<(), CnnError> {
        if freeze_blocks > BLOCK_LAYOUT.len() {
            return Err(CnnError::InvalidFreezeCount(freeze_blocks));
        }
        for layer in &mut self.layers {
            layer.trainable = match layer.block {
                Some(b) => b > freeze_blocks,
                None => !freeze_fc,
            };
        }
        Ok(())
    }

    /// Op index where block `blocks + 1` starts (0 = network input,
    /// 5 = the flatten).
    pub fn block_boundary(&self, blocks: usize) -> usize {
        if blocks == 0 {
            return 0;
        }
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, op)| **op == Op::Pool)
            .nth(blocks - 1)
            .map(|(i, _)| i + 1)
            .unwrap_or(self.ops.len())
    }

    fn flatten_op(&self) -> usize {
        self.ops.iter().position(|op| *op == Op::Flatten).expect("network has a flatten")
    }

    /// Per-sample input shape expected by op `index`.
    pub fn dims_at(&self, index: usize) -> Dims {
        let s = self.config.input_size;
        let mut dims = Dims::Map { h: s, w: s, c: 3 };
        for op in &self.ops[..index] {
            dims = self.op_output(*op, dims);
        }
        dims
    }

    fn op_output(&self, op: Op, dims: Dims) -> Dims {
        match (op, dims) {
            (Op::Conv(l), Dims::Map { h, w, .. }) => Dims::Map { h, w, c: self.layers[l].kind.outputs() },
            (Op::Pool, Dims::Map { h, w, c }) => Dims::Map { h: h / 2, w: w / 2, c },
            (Op::Flatten, d) => Dims::Flat(d.len()),
            (Op::Dense(l), _) => Dims::Flat(self.layers[l].kind.outputs()),
            (_, d) => d,
        }
    }

    /// Runs ops `start..end` on `n` samples shaped like `dims_at(start)`.
    fn run(
        &self,
        start: usize,
        end: usize,
        input: Vec<T>,
        n: usize,
        keep_cache: bool,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<(Vec<T>, Option<Cache<T>>), CnnError> {
        let mut dims = self.dims_at(start);
        if input.len() != n * dims.len() {
            return Err(CnnError::ShapeMismatch(format!(
                "expected {n} samples of {dims} ({} values), got {}",
                n * dims.len(),
                input.len()
            )));
        }
        let mut cache = Cache {
            version: self.version,
            start_op: start,
            n,
            inputs: Vec::new(),
            argmax: Vec::new(),
        };
        let mut x = input;
        for (i, &op) in self.ops.iter().enumerate().take(end).skip(start) {
            let out_dims = self.op_output(op, dims);
            let mut arg = Vec::new();
            let y = match (op, dims) {
                (Op::Conv(l), Dims::Map { h, w, c }) => {
                    let layer = &self.layers[l];
                    conv3x3_forward(&x, n, h, w, c, &layer.weight, &layer.bias, out_dims.len() / (h * w))
                }
                (Op::Relu, _) => relu_forward(&x),
                (Op::Pool, Dims::Map { h, w, c }) => {
                    let (y, a) = maxpool2_forward(&x, n, h, w, c);
                    arg = a;
                    y
                }
                (Op::Flatten, _) => x.clone(),
                (Op::Dense(l), d) => {
                    let layer = &self.layers[l];
                    dense_forward(&x, n, d.len(), &layer.weight, &layer.bias, out_dims.len())
                }
                _ => return Err(CnnError::ShapeMismatch(format!("op {op:?} cannot take {dims}"))),
            };
            if let Some(trace) = trace.as_deref_mut() {
                let label = match op {
                    Op::Relu if matches!(self.ops.get(i + 1), Some(Op::Pool)) => Some("conv".to_string()),
                    Op::Pool => Some("pool".to_string()),
                    Op::Flatten => Some("flatten".to_string()),
                    Op::Dense(l) => Some(self.layers[l].name.clone()),
                    _ => None,
                };
                if let Some(label) = label {
                    trace.push((label, out_dims));
                }
            }
            if keep_cache {
                cache.inputs.push((dims, x));
                cache.argmax.push(arg);
            }
            x = y;
            dims = out_dims;
        }
        Ok((x, keep_cache.then_some(cache)))
    }

    fn check_images(&self, images: &[T], n: usize) -> Result<(), CnnError> {
        if images.len() != n * self.config.image_len() {
            return Err(CnnError::ShapeMismatch(format!(
                "expected {n} images of {s}x{s}x3, got {} values",
                images.len(),
                s = self.config.input_size
            )));
        }
        Ok(())
    }

    /// Logits for `n` NHWC images, plus the cache backward needs.
    pub fn forward(&self, images: &[T], n: usize) -> Result<(Vec<T>, Cache<T>), CnnError> {
        self.check_images(images, n)?;
        let (logits, cache) = self.run(0, self.ops.len(), images.to_vec(), n, true, None)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Forward pass starting at op `start` on activations shaped like
    /// `dims_at(start)`.
    pub fn forward_from(&self, start: usize, input: Vec<T>, n: usize) -> Result<(Vec<T>, Cache<T>), CnnError> {
        let (logits, cache) = self.run(start, self.ops.len(), input, n, true, None)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Logits without keeping a cache, starting at op `start`.
    pub fn predict_from(&self, start: usize, input: Vec<T>, n: usize) -> Result<Vec<T>, CnnError> {
        Ok(self.run(start, self.ops.len(), input, n, false, None)?.0)
    }

    pub fn predict(&self, images: &[T], n: usize) -> Result<Vec<T>, CnnError> {
        self.check_images(images, n)?;
        self.predict_from(0, images.to_vec(), n)
    }

    /// Activations entering op `end` for `n` images.
    pub fn prefix(&self, images: &[T], n: usize, end: usize) -> Result<Vec<T>, CnnError> {
        self.check_images(images, n)?;
        Ok(self.run(0, end, images.to_vec(), n, false, None)?.0)
    }

    /// Flattened post-pool block-5 activations, `n × feature_len`.
    pub fn extract_features(&self, images: &[T], n: usize) -> Result<Vec<T>, CnnError> {
        self.prefix(images, n, self.flatten_op())
    }

    /// Logits together with the observed activation-shape trace.
    pub fn traced_forward(&self, images: &[T], n: usize) -> Result<(Vec<T>, ShapeTrace), CnnError> {
        self.check_images(images, n)?;
        let mut trace = Vec::new();
        let (logits, _) = self.run(0, self.ops.len(), images.to_vec(), n, false, Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// Mean BCE of the cached batch against `labels` (0 or 1) and its gradients
    /// for every trainable layer the cache covers.
    pub fn backward(&self, cache: &Cache<T>, logits: &[T], labels: &[f64]) -> Result<Gradients<T>, CnnError> {
        if cache.version != self.version {
            return Err(CnnError::StaleCache);
        }
        if labels.len() != cache.n || logits.len() != cache.n {
            return Err(CnnError::ShapeMismatch(format!(
                "{} labels and {} logits for a batch of {}",
                labels.len(),
                logits.len(),
                cache.n
            )));
        }
        let (loss, mut dy) = bce_with_logits(logits, labels);
        let mut grads: Vec<(String, Option<LayerGrad<T>>)> =
            self.layers.iter().map(|l| (l.name.clone(), None)).collect();
        let first_trainable = (cache.start_op..self.ops.len()).find(|&i| match self.ops[i] {
            Op::Conv(l) | Op::Dense(l) => self.layers[l].trainable,
            _ => false,
        });
        let Some(first_trainable) = first_trainable else {
            return Ok(Gradients { loss, layers: grads });
        };
        let n = cache.n;
        for i in (first_trainable..self.ops.len()).rev() {
            let (dims, x) = &cache.inputs[i - cache.start_op];
            let need_dx = i > first_trainable;
            dy = match (self.ops[i], *dims) {
                (Op::Conv(l), Dims::Map { h, w, c }) => {
                    let layer = &self.layers[l];
                    let (dw, db, dx) =
                        conv3x3_backward(x, n, h, w, c, &layer.weight, layer.kind.outputs(), &dy, need_dx);
                    if layer.trainable {
                        grads[l].1 = Some(LayerGrad { weight: dw, bias: db });
                    }
                    dx.unwrap_or_default()
                }
                (Op::Dense(l), d) => {
                    let layer = &self.layers[l];
                    let (dw, db, dx) =
                        dense_backward(x, n, d.len(), &layer.weight, layer.kind.outputs(), &dy, need_dx);
                    if layer.trainable {
                        grads[l].1 = Some(LayerGrad { weight: dw, bias: db });
                    }
                    dx.unwrap_or_default()
                }
                (Op::Relu, _) => relu_backward(x, &dy),
                (Op::Pool, _) => maxpool2_backward(&dy, &cache.argmax[i - cache.start_op], x.len()),
                (Op::Flatten, _) => dy,
                (op, d) => return Err(CnnError::ShapeMismatch(format!("op {op:?} cannot take {d}"))),
            };
        }
        Ok(Gradients { loss, layers: grads })
    }

    /// Applies one SGD step to every trainable layer that has a gradient.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, spec: &TrainSpec) -> Result<(), CnnError> {
        if grads.layers.len() != self.layers.len() {
            return Err(CnnError::ShapeMismatch("gradient set does not match the network".into()));
        }
        for (layer, (name, grad)) in self.layers.iter_mut().zip(&grads.layers) {
            if *name != layer.name {
                return Err(CnnError::ShapeMismatch(format!("gradient {name} does not match layer {}", layer.name)));
            }
            if let Some(g) = grad {
                layer.sgd_update(g, spec)?;
            }
        }
        self.version += 1;
        Ok(())
    }

    pub fn clear_momentum(&mut self) {
        for layer in &mut self.layers {
            layer.clear_momentum();
        }
    }
}

//! Network architectures, Adam, and the mini-batch training loop with
//! validation-based model selection.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LrnParams, NodeId, Padding};
use crate::data::{batches, sequential_batches, Dataset, Splits};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::margin::{multiclass_test_error, MarginBatch};
use crate::tensor::Tensor;

/// Rows per forward pass when evaluating without gradients.
const EVAL_CHUNK: usize = 1000;
/// Stream id offset separating the dropout RNG from shuffling streams.
const DROPOUT_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "FC-128-32")]
    Fc128x32,
    #[serde(rename = "FC-500-500-2000")]
    Fc500x500x2000,
    #[serde(rename = "CNN-MNIST-NORB")]
    CnnMnist,
    #[serde(rename = "CNN-CIFAR")]
    CnnCifar,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Fc128x32,
        Architecture::Fc500x500x2000,
        Architecture::CnnMnist,
        Architecture::CnnCifar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Fc128x32 => "FC-128-32",
            Architecture::Fc500x500x2000 => "FC-500-500-2000",
            Architecture::CnnMnist => "CNN-MNIST-NORB",
            Architecture::CnnCifar => "CNN-CIFAR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.to_ascii_uppercase().replace('_', "-");
        match key.as_str() {
            "FC-128-32" | "FC128" => Ok(Architecture::Fc128x32),
            "FC-500-500-2000" | "FC500" => Ok(Architecture::Fc500x500x2000),
            "CNN-MNIST-NORB" | "CNN-MNIST" | "CNN" => Ok(Architecture::CnnMnist),
            "CNN-CIFAR" => Ok(Architecture::CnnCifar),
            _ => Err(Error::InvalidArgument(format!("unknown model {s:?}"))),
        }
    }

    pub fn layers(self, classes: usize) -> Vec<Layer> {
        use Layer::*;
        let dense = |units| Dense { units, relu: true };
        let conv = |filters| Conv {
            filters,
            kernel: 5,
            stride: 1,
        };
        let head = Dense {
            units: classes,
            relu: false,
        };
        match self {
            Architecture::Fc128x32 => vec![dense(128), dense(32), head],
            Architecture::Fc500x500x2000 => vec![dense(500), dense(500), dense(2000), head],
            Architecture::CnnMnist => vec![
                conv(32),
                MaxPool { window: 2, stride: 2 },
                conv(64),
                MaxPool { window: 2, stride: 2 },
                dense(512),
                Dropout { keep: 0.5 },
                head,
            ],
            Architecture::CnnCifar => vec![
                conv(54),
                MaxPool { window: 3, stride: 2 },
                Lrn(LrnParams::default()),
                conv(64),
                Lrn(LrnParams::default()),
                MaxPool { window: 3, stride: 2 },
                dense(384),
                dense(192),
                head,
            ],
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One stage of a feed-forward stack. Convolutions use same padding and are
/// always followed by ReLU; pooling uses valid padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense { units: usize, relu: bool },
    Conv { filters: usize, kernel: usize, stride: usize },
    MaxPool { window: usize, stride: usize },
    Lrn(LrnParams),
    Dropout { keep: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Per-example input shape `H×W×C`.
    pub input_shape: [usize; 3],
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input_shape: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            arch,
            input_shape,
            classes,
        }
    }

    pub fn for_dataset(arch: Architecture, data: &Dataset) -> Result<Self> {
        let s = data.sample_shape();
        let input_shape = match *s {
            [h, w, c] => [h, w, c],
            [d] => [1, 1, d],
            _ => return Err(Error::shape("model", format!("unsupported sample shape {s:?}"))),
        };
        Ok(ModelSpec::new(arch, input_shape, data.classes))
    }
}

/// Architecture plus parameters: `(weight, bias)` per dense/conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub params: Vec<Tensor>,
}

pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Model {
    /// He-uniform weights (`±√(6/fan_in)`) and zero biases, deterministic in
    /// `seed` and independent of the loss.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Model> {
        Self::with_layers(spec, spec.arch.layers(spec.classes), seed)
    }

    /// A custom stack, initialized like [`Model::init`].
    pub fn with_layers(spec: &ModelSpec, layers: Vec<Layer>, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut h, mut w, mut c] = spec.input_shape;
        let mut flat: Option<usize> = None;
        let mut params = Vec::new();
        let uniform = |shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data)
        };
        for layer in &layers {
            match *layer {
                Layer::Dense { units, .. } => {
                    let fan_in = flat.unwrap_or(h * w * c);
                    params.push(uniform(vec![fan_in, units], fan_in, &mut rng)?);
                    params.push(Tensor::zeros([units]));
                    flat = Some(units);
                }
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                } => {
                    if flat.is_some() {
                        return Err(Error::InvalidArgument("conv after dense layer".into()));
                    }
                    let fan_in = kernel * kernel * c;
                    params.push(uniform(vec![kernel, kernel, c, filters], fan_in, &mut rng)?);
                    params.push(Tensor::zeros([filters]));
                    h = h.div_ceil(stride);
                    w = w.div_ceil(stride);
                    c = filters;
                }
                Layer::MaxPool { window, stride } => {
                    if flat.is_some() || window > h || window > w {
                        return Err(Error::shape(
                            "model",
                            format!("max-pool {window} does not fit {h}×{w}"),
                        ));
                    }
                    h = (h - window) / stride + 1;
                    w = (w - window) / stride + 1;
                }
                Layer::Lrn(_) | Layer::Dropout { .. } => {}
            }
        }
        if flat != Some(spec.classes) {
            return Err(Error::InvalidArgument(format!(
                "last layer must be dense with {} units",
                spec.classes
            )));
        }
        Ok(Model {
            spec: spec.clone(),
            layers,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records the forward pass for `input` (`N×H×W×C`, or `N×D` for dense
    /// stacks) and returns `(logits, parameter nodes)`.
    pub fn forward(&self, g: &mut Graph, input: &Tensor, mut mode: Mode<'_>) -> Result<(NodeId, Vec<NodeId>)> {
        let pids: Vec<NodeId> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut x = g.constant(input.clone());
        let mut p = 0;
        for layer in &self.layers {
            x = match *layer {
                Layer::Dense { relu, .. } => {
                    let flat = g.flatten(x)?;
                    let z = g.matmul(flat, pids[p])?;
                    let z = g.add(z, pids[p + 1])?;
                    p += 2;
                    if relu {
                        g.relu(z)
                    } else {
                        z
                    }
                }
                Layer::Conv { stride, .. } => {
                    let z = g.conv2d(x, pids[p], stride, Padding::Same)?;
                    let z = g.add(z, pids[p + 1])?;
                    p += 2;
                    g.relu(z)
                }
                Layer::MaxPool { window, stride } => g.maxpool2d(x, window, stride)?,
                Layer::Lrn(params) => g.lrn(x, params)?,
                Layer::Dropout { keep } => match &mut mode {
                    Mode::Train(rng) => g.dropout(x, keep, *rng)?,
                    Mode::Eval => x,
                },
            };
        }
        Ok((x, pids))
    }

    /// Inference logits for every row of `images`, dropout disabled.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape().first().copied().unwrap_or(0);
        let k = self.spec.classes;
        let mut out = Vec::with_capacity(n * k);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = images.gather_rows(&idx);
            let mut g = Graph::new();
            let (logits, _) = self.forward(&mut g, &chunk, Mode::Eval)?;
            out.extend_from_slice(g.value(logits).data());
            start = end;
        }
        Tensor::new([n, k], out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters vs {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Model, optimizer and dropout RNG for one training run.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub loss: LossSpec,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig, loss: LossKind, seed: u64) -> Result<Self> {
        let loss = LossSpec::new(loss, model.spec.classes)?;
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(DROPOUT_STREAM);
        Ok(Trainer {
            adam: Adam::new(adam, &model.params),
            model,
            loss,
            dropout_rng,
        })
    }

    /// Loss and parameter gradients for one batch, without updating.
    pub fn loss_and_grads(&mut self, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (logits, pids) = self
            .model
            .forward(&mut g, images, Mode::Train(&mut self.dropout_rng))?;
        let loss = self.loss.build(&mut g, logits, labels)?;
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?.collect(&g, &pids);
        Ok((value, grads))
    }

    /// One Adam step; returns the batch loss before the update. Non-finite
    /// losses are reported and leave parameters untouched.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let (value, grads) = self.loss_and_grads(images, labels)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                value,
            });
        }
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(loss: LossKind, seed: u64) -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 500,
            epochs: 50,
            loss,
            seed,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
}

/// Outcome of [`train`]. Epoch 0 is the untrained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: Architecture,
    pub config: TrainConfig,
    pub init_scheme: String,
    pub initial_val_error: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_error: f64,
    pub test_error: f64,
    pub best_model: Model,
}

/// Trains `spec` on `splits.train`, keeps the parameters with the lowest
/// validation error (earliest on ties), and reports their test error.
pub fn train(spec: &ModelSpec, config: &TrainConfig, splits: &Splits) -> Result<TrainReport> {
    if config.adam.lr <= 0.0 || !config.adam.lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            config.adam.lr
        )));
    }
    if config.batch_size == 0 || config.batch_size > splits.train.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} must be in 1..={}",
            config.batch_size,
            splits.train.len()
        )));
    }
    let model = Model::init(spec, config.seed)?;
    let mut trainer = Trainer::new(model, config.adam, config.loss, config.seed)?;

    let initial_val_error = evaluate_error(&trainer.model, &splits.validation)?;
    let mut best_model = trainer.model.clone();
    let mut best_epoch = 0;
    let mut best_val_error = initial_val_error;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let iter = if config.shuffle {
            batches(&splits.train, config.batch_size, config.seed, epoch)?
        } else {
            sequential_batches(&splits.train, config.batch_size)?
        };
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, batch) in iter.enumerate() {
            let value = match trainer.step(&batch.images, &batch.labels) {
                Err(Error::NonFiniteLoss { value, .. }) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        value,
                    })
                }
                other => other?,
            };
            total += value;
            count += 1;
        }
        let val_error = evaluate_error(&trainer.model, &splits.validation)?;
        if val_error < best_val_error {
            best_val_error = val_error;
            best_epoch = epoch;
            best_model = trainer.model.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / count as f64,
            val_error,
        });
    }

    let test_error = evaluate_error(&best_model, &splits.test)?;
    Ok(TrainReport {
        arch: spec.arch,
        config: config.clone(),
        init_scheme: "he-uniform(sqrt(6/fan_in)), zero bias".into(),
        initial_val_error,
        epochs,
        best_epoch,
        best_val_error,
        test_error,
        best_model,
    })
}

pub fn evaluate_error(model: &Model, data: &Dataset) -> Result<f64> {
    let logits = model.predict(&data.images)?;
    multiclass_test_error(&logits, &data.labels)
}

/// Raw outputs of a model on a split, with per-output views split by label.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub error: f64,
    pub outputs: Tensor,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn classes(&self) -> usize {
        self.outputs.shape()[1]
    }

    /// Output `k` values for examples of class `k` and for all others.
    pub fn output_split(&self, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if k >= self.classes() {
            return Err(Error::InvalidArgument(format!(
                "output {k} out of range for {} outputs",
                self.classes()
            )));
        }
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            let v = self.outputs.row(i)[k];
            if l == k {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
        Ok((pos, neg))
    }

    /// Margin statistics of output `k` under ±1 one-against-rest labels.
    pub fn margins(&self, k: usize) -> Result<MarginBatch> {
        if k >= self.classes() {
            return Err(Error::InvalidArgument(format!("output {k} out of range")));
        }
        let gamma = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let y = if l == k { 1.0 } else { -1.0 };
                y * self.outputs.row(i)[k]
            })
            .collect();
        MarginBatch::from_margins(gamma)
    }
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let outputs = model.predict(&data.images)?;
    let error = multiclass_test_error(&outputs, &data.labels)?;
    Ok(Evaluation {
        error,
        outputs,
        labels: data.labels.clone(),
    })
}

//! Sequential models: building from a config, training, evaluation and
//! the binary model file.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{ArchitectureConfig, LayerConfig};
use crate::data::{augment_batch, batches, channel_stats, normalize, Dataset, LoadedData, Targets};
use crate::error::{Error, Result};
use crate::layers::{
    ActivationLayer, Conv2d, ConvSpec, Dense, Embedding, Flatten, GlobalAvgPool, Layer, Lstm,
    MaxPool, Module, ProjectionMode, Softmax,
};
use crate::losses::{apply_weight_decay, cross_entropy, mse_mean, LossKind};
use crate::optim::Optimizer;
use crate::param::Param;
use crate::projections::{is_degenerate, Activation};
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"BPNN";
pub const MODEL_VERSION: u8 = 1;

#[derive(Clone, Debug)]
pub struct Model<S = f64> {
    config: ArchitectureConfig,
    layers: Vec<Layer<S>>,
    names: Vec<String>,
    /// `shapes[i]` is the per-sample input of layer `i`; the last entry is
    /// the model output.
    shapes: Vec<Vec<usize>>,
    /// Number of leading layers holding a forward cache.
    cached: Option<usize>,
}

fn build_error(i: usize, layer: &LayerConfig, prev: Option<(usize, &str)>, shape: &[usize], msg: &str) -> Error {
    let source = match prev {
        Some((j, kind)) => format!("layer {j} ({kind}) produces {shape:?}"),
        None => format!("the model input is {shape:?}"),
    };
    Error::Build(format!("layer {i} ({}): {msg}; {source}", layer.type_name()))
}

fn check_declared(
    declared: Option<usize>,
    actual: usize,
    what: &str,
    ctx: impl FnOnce(&str) -> Error,
) -> Result<()> {
    match declared {
        Some(d) if d != actual => Err(ctx(&format!("declares {what} {d}"))),
        _ => Ok(()),
    }
}

fn warn_degenerate(i: usize, dims: &[usize]) {
    for &d in dims {
        if is_degenerate(d) {
            log::warn!("layer {i}: extent {d} is prime, its bilinear factorization is 1 x {d}");
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Resolves every shape, validates adjacent layers and initializes
    /// parameters from `config.seed`.
    pub fn build(config: &ArchitectureConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(config.seed);
        let std = config.init_std;
        let mut shape = config.input.clone();
        let mut shapes = vec![shape.clone()];
        let mut layers: Vec<Layer<S>> = Vec::with_capacity(config.layers.len());
        let mut names = Vec::with_capacity(config.layers.len());
        let mut counts = std::collections::BTreeMap::<&str, usize>::new();
        for (i, lc) in config.layers.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| (j, config.layers[j].type_name()));
            let err = |msg: &str| build_error(i, lc, prev, &shape, msg);
            if lc.alpha() == 0 {
                return Err(Error::Param(format!("layer {i}: alpha must be at least 1")));
            }
            let layer = match lc {
                LayerConfig::Dense(c) => {
                    let [d] = shape[..] else {
                        return Err(err("expects a flat [D] input (insert a flatten layer)"));
                    };
                    check_declared(c.in_dim, d, "in", err)?;
                    if c.projection == ProjectionMode::Bilinear {
                        warn_degenerate(i, &[d, c.out_dim]);
                    }
                    Layer::Dense(Dense::new(&mut rng, c.projection, d, c.out_dim, c.alpha, c.activation, std)?)
                }
                LayerConfig::Conv2d(c) => {
                    let [_, _, ch] = shape[..] else {
                        return Err(err("expects an [H, W, C] input"));
                    };
                    check_declared(c.in_channels, ch, "in_channels", err)?;
                    if c.projection == ProjectionMode::Bilinear {
                        warn_degenerate(i, &[c.out_channels]);
                    }
                    let spec = ConvSpec::new((c.kernel[0], c.kernel[1]), c.stride, c.padding);
                    Layer::Conv2d(Conv2d::new(
                        &mut rng, c.projection, ch, c.out_channels, spec, c.alpha, c.activation, std,
                    )?)
                }
                LayerConfig::Embedding(c) => {
                    if shape.len() != 1 {
                        return Err(err("expects a token sequence [L]"));
                    }
                    if c.projection == ProjectionMode::Bilinear {
                        warn_degenerate(i, &[c.vocab, c.alpha * c.dim]);
                    }
                    Layer::Embedding(Embedding::new(&mut rng, c.projection, c.vocab, c.dim, c.alpha, std)?)
                }
                LayerConfig::Lstm(c) => {
                    let [_, d] = shape[..] else {
                        return Err(err("expects a sequence [T, D]"));
                    };
                    check_declared(c.input, d, "input", err)?;
                    if c.projection == ProjectionMode::Bilinear {
                        warn_degenerate(i, &[d, c.hidden]);
                    }
                    Layer::Lstm(Lstm::new(
                        &mut rng, c.projection, d, c.hidden, c.alpha, c.return_sequences, std,
                    )?)
                }
                LayerConfig::Relu(_) => Layer::Activation(ActivationLayer::new(Activation::Relu)),
                LayerConfig::Sigmoid(_) => Layer::Activation(ActivationLayer::new(Activation::Sigmoid)),
                LayerConfig::Tanh(_) => Layer::Activation(ActivationLayer::new(Activation::Tanh)),
                LayerConfig::Maxpool(_) => Layer::MaxPool(MaxPool::new()),
                LayerConfig::Gap(_) => Layer::GlobalAvgPool(GlobalAvgPool::new()),
                LayerConfig::Flatten(_) => Layer::Flatten(Flatten::new()),
                LayerConfig::Softmax(_) => Layer::Softmax(Softmax::new()),
            };
            shape = layer
                .output_shape(&shape)
                .map_err(|e| err(&e.to_string()))?;
            shapes.push(shape.clone());
            let kind = layer.kind();
            let k = counts.entry(kind).or_default();
            names.push(format!("{kind}{k}"));
            *k += 1;
            layers.push(layer);
        }
        Ok(Self {
            config: config.clone(),
            layers,
            names,
            shapes,
            cached: None,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    /// Report names such as `dense0`, `relu1`.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("at least the input shape")
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
        self.cached = None;
    }

    /// Index one past the last layer whose output the loss consumes.
    /// Cross-entropy works on logits, so a trailing softmax is skipped.
    pub fn logits_end(&self) -> usize {
        let n = self.layers.len();
        match (self.config.loss, self.layers.last()) {
            (LossKind::CrossEntropy, Some(Layer::Softmax(_))) => n - 1,
            _ => n,
        }
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape().get(1..) != Some(self.input_shape()) {
            return Err(Error::shape(format!(
                "model expects per-sample input {:?}, got batch {:?}",
                self.input_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Runs layers `0..end`, caching for a later [`Model::backward`].
    pub fn forward_to(&mut self, x: &Tensor<S>, end: usize) -> Result<Tensor<S>> {
        self.check_input(x)?;
        self.cached = None;
        let mut h = x.clone();
        for (i, layer) in self.layers[..end].iter_mut().enumerate() {
            h = layer.forward(&h).map_err(|e| match e {
                Error::Numeric { msg, .. } => Error::Numeric {
                    layer: i,
                    name: self.names[i].clone(),
                    msg,
                },
                other => other,
            })?;
        }
        self.cached = Some(end);
        Ok(h)
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_to(x, self.layers.len())
    }

    /// Backpropagates through the layers run by the last forward pass,
    /// accumulating parameter gradients, and returns the input gradient.
    pub fn backward(&mut self, grad: &Tensor<S>) -> Result<Tensor<S>> {
        let end = self
            .cached
            .take()
            .ok_or_else(|| Error::Usage("model backward called before forward".into()))?;
        let mut g = grad.clone();
        for layer in self.layers[..end].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Batch-mean data loss, number of correct predictions, and (when
    /// `with_grad`) parameter gradients accumulated into the model.
    pub fn batch_loss(&mut self, x: &Tensor<S>, targets: &Targets, with_grad: bool) -> Result<(f64, usize)> {
        self.batch_loss_with_kinks(x, targets, with_grad, None)
    }

    /// As [`Model::batch_loss`], also recording every layer's branch
    /// signature (see [`Module::kinks`]) from the forward pass.
    pub fn batch_loss_with_kinks(
        &mut self,
        x: &Tensor<S>,
        targets: &Targets,
        with_grad: bool,
        kinks: Option<&mut Vec<u64>>,
    ) -> Result<(f64, usize)> {
        let out = self.forward_to(x, self.logits_end())?;
        if let Some(k) = kinks {
            self.layers.iter().for_each(|l| l.kinks(k));
        }
        let width = *out.shape().last().unwrap_or(&1);
        let loss = match (self.config.loss, targets) {
            (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
                let logits = out.reshape(&[labels.len(), out.len() / labels.len().max(1)])?;
                cross_entropy(&logits, labels)?
            }
            (LossKind::CrossEntropy, Targets::Values(_)) => {
                return Err(Error::Data("cross-entropy needs class labels".into()))
            }
            (LossKind::Mse, Targets::Classes { labels, .. }) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
                    return Err(Error::Data(format!("label {bad} exceeds model output width {width}")));
                }
                let onehot = Targets::Classes { labels: labels.clone(), classes: width }.to_tensor();
                mse_mean(&out, &onehot.into_reshape(out.shape())?)?
            }
            (LossKind::Mse, Targets::Values(y)) => mse_mean(&out, &y.cast())?,
        };
        let correct = match targets {
            Targets::Classes { labels, .. } => out
                .data()
                .chunks(width)
                .zip(labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count(),
            Targets::Values(_) => 0,
        };
        let value = loss.value.as_f64();
        if !value.is_finite() {
            self.clear_cache();
            return Err(self.diagnose_nonfinite(x));
        }
        if with_grad {
            self.backward(&loss.grad.into_reshape(out.shape())?)?;
        } else {
            self.clear_cache();
        }
        Ok((value, correct))
    }

    /// Names the first layer with non-finite parameters or output on `x`.
    fn diagnose_nonfinite(&mut self, x: &Tensor<S>) -> Error {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let name = self.names[i].clone();
            if layer.params().iter().any(|p| !p.value.is_finite()) {
                return Error::Numeric { layer: i, name, msg: "non-finite parameters".into() };
            }
            match layer.forward(&h) {
                Ok(out) if out.is_finite() => h = out,
                Ok(_) => {
                    layer.clear_cache();
                    return Error::Numeric { layer: i, name, msg: "non-finite activations".into() };
                }
                Err(e) => {
                    return Error::Numeric { layer: i, name, msg: e.to_string() };
                }
            }
            layer.clear_cache();
        }
        let last = self.layers.len().saturating_sub(1);
        Error::Numeric {
            layer: last,
            name: self.names.get(last).cloned().unwrap_or_default(),
            msg: "non-finite loss".into(),
        }
    }

    /// Mean data loss and accuracy over a dataset, in fixed batch order.
    /// Accuracy is NaN for regression targets.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        self.check_data(data)?;
        let n = data.len();
        if n == 0 {
            return Ok((f64::NAN, f64::NAN));
        }
        let (mut total, mut correct) = (0.0, 0);
        for rows in batches(n, self.config.batch_size, None) {
            let x = data.features.select_rows(&rows).cast();
            let (loss, c) = self.batch_loss(&x, &data.targets.select(&rows), false)?;
            total += loss * rows.len() as f64;
            correct += c;
        }
        let acc = match data.targets {
            Targets::Classes { .. } => correct as f64 / n as f64,
            Targets::Values(_) => f64::NAN,
        };
        Ok((total / n as f64, acc))
    }

    /// Checks that samples fit the model input.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.sample_shape() != self.input_shape() {
            return Err(Error::Data(format!(
                "model input is {:?} but data samples are {:?}",
                self.input_shape(),
                data.sample_shape()
            )));
        }
        Ok(())
    }

    pub fn predict(&mut self, x: &Tensor<S>) -> Result<Vec<usize>> {
        let out = self.forward(x)?;
        self.clear_cache();
        let width = *out.shape().last().unwrap_or(&1);
        Ok(out.data().chunks(width).map(argmax).collect())
    }

    pub fn snapshot(&self) -> Vec<Tensor<S>> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<S>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::shape("snapshot does not match the parameter list"));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(format!("snapshot tensor {:?} vs {:?}", v.shape(), p.value.shape())));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Encodes the model file: magic, version, length-prefixed JSON
    /// descriptor, then each parameter as a u32 count and f64 values, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(9 + desc.len() + 8 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(&desc);
        for p in self.params() {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            for &v in p.value.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::BadMagic {
                expected: MODEL_MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = r.take(1)?[0];
        if version != MODEL_VERSION {
            return Err(Error::Version { found: version, supported: MODEL_VERSION });
        }
        let len = r.u32()? as usize;
        let desc = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Parse(format!("model descriptor is not UTF-8: {e}")))?;
        let config = ArchitectureConfig::from_json(desc)?;
        let mut model = Self::build(&config)?;
        for p in model.params_mut() {
            let count = r.u32()? as usize;
            if count != p.len() {
                return Err(Error::Parse(format!(
                    "parameter `{}` holds {} values, file has {count}",
                    p.name,
                    p.len()
                )));
            }
            let raw = r.take(8 * count)?;
            for (v, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks(8)) {
                *v = S::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        let out = self.bytes.get(self.pos..end).ok_or_else(|| Error::Truncated {
            offset: self.bytes.len(),
            needed: end - self.bytes.len(),
        })?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// First index of the maximum (NaN never wins).
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Train/validation/test partitions after the configured split and
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

impl Splits {
    /// Holds out `validation_split` of the training data (seeded by the
    /// shuffle seed) and, if enabled, standardizes every partition with
    /// training-split statistics.
    pub fn prepare(config: &ArchitectureConfig, data: LoadedData) -> Result<Self> {
        let (mut train, mut val) = data.train.split_validation(config.validation_split, config.shuffle_seed());
        let mut test = data.test;
        if config.normalize {
            let stats = channel_stats(&train)?;
            train = normalize(&train, &stats)?;
            val = normalize(&val, &stats)?;
            test = test.map(|t| normalize(&t, &stats)).transpose()?;
        }
        Ok(Self { train, val, test })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch (1-based) of the retained snapshot.
    pub best_epoch: Option<usize>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc
            );
        }
        out
    }

    pub fn best(&self) -> Option<&EpochMetrics> {
        self.best_epoch.and_then(|e| self.epochs.get(e - 1))
    }
}

/// Epoch-at-a-time training. Each epoch shuffles, runs mini-batches with
/// weight decay and the optimizer, then evaluates both partitions. The
/// parameters with the lowest validation loss (training loss when there is
/// no validation data) are kept and restored by [`Trainer::finish`].
pub struct Trainer<'a, S: Scalar = f64> {
    model: &'a mut Model<S>,
    train: &'a Dataset,
    val: &'a Dataset,
    optimizer: Optimizer<S>,
    shuffle_rng: Rng,
    augment_rng: Rng,
    history: History,
    best: Option<(f64, Vec<Tensor<S>>)>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(model: &'a mut Model<S>, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        model.check_data(train)?;
        model.check_data(val)?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut optimizer = Optimizer::new(model.config.optimizer.clone())?;
        optimizer.init(&model.params());
        // separate streams so shuffling and augmentation vary independently
        let seed = model.config.shuffle_seed();
        Ok(Self {
            optimizer,
            shuffle_rng: Rng::seed(seed.wrapping_add(0x5348_5546)),
            augment_rng: Rng::seed(seed.wrapping_add(0x4155_474d)),
            model,
            train,
            val,
            history: History::default(),
            best: None,
        })
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let cfg = self.model.config.clone();
        let lambda = S::of(cfg.optimizer.lambda);
        let augment = cfg.augment.filter(|a| !a.is_noop());
        for rows in batches(self.train.len(), cfg.batch_size, Some(&mut self.shuffle_rng)) {
            let mut x = self.train.features.select_rows(&rows);
            if let Some(flags) = &augment {
                x = augment_batch(&x, &mut self.augment_rng, flags)?;
            }
            self.model.zero_grad();
            self.model.batch_loss(&x.cast(), &self.train.targets.select(&rows), true)?;
            let mut params = self.model.params_mut();
            apply_weight_decay(&mut params, lambda);
            self.optimizer.step(&mut params)?;
        }
        let (train_loss, train_acc) = self.model.evaluate(self.train)?;
        let (val_loss, val_acc) = self.model.evaluate(self.val)?;
        let metrics = EpochMetrics {
            epoch: self.history.epochs.len() + 1,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        };
        let score = if self.val.is_empty() { train_loss } else { val_loss };
        if self.best.as_ref().is_none_or(|(b, _)| score < *b) {
            self.best = Some((score, self.model.snapshot()));
            self.history.best_epoch = Some(metrics.epoch);
        }
        log::info!(
            "epoch {}: train_loss={train_loss:.6} train_acc={train_acc:.4} val_loss={val_loss:.6} val_acc={val_acc:.4}",
            metrics.epoch
        );
        self.history.epochs.push(metrics);
        Ok(metrics)
    }

    /// Restores the best snapshot and returns the history.
    pub fn finish(self) -> Result<History> {
        if let Some((_, values)) = &self.best {
            self.model.restore(values)?;
        }
        Ok(self.history)
    }
}

/// Runs `config.epochs` epochs; see [`Trainer`].
pub fn train<S: Scalar>(model: &mut Model<S>, train: &Dataset, val: &Dataset) -> Result<History> {
    let epochs = model.config.epochs;
    let mut trainer = Trainer::new(model, train, val)?;
    for _ in 0..epochs {
        trainer.run_epoch()?;
    }
    trainer.finish()
}

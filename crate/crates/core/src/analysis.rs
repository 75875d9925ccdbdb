//! Cost accounting and the two numerical oracles: finite-difference
//! gradient checks and bilinear-vs-expanded equivalence checks.
//!
//! FLOPs are forward-only and per sample, counting a multiply-accumulate
//! as 2 and each activation/pooling output as 1; bias additions are not
//! counted. Activation memory is `batch * output elements * width` bytes.

use std::fmt::Write as _;

use crate::data::Targets;
use crate::error::{Error, Result};
use crate::layers::{Layer, Module, ProjectionMode};
use crate::losses::LossKind;
use crate::network::Model;
use crate::scalar::Scalar;
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_WIDTH: usize = 4;
pub const COST_HEADER: &str = "layer,mode,alpha,params,flops,activation_bytes";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub mode: Option<ProjectionMode>,
    pub alpha: usize,
    pub params: usize,
    pub flops: usize,
    pub activation_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub batch: usize,
    pub width: usize,
}

/// Trainable parameters per layer, from the actual tensors.
pub fn count_params<S: Scalar>(model: &Model<S>) -> Vec<usize> {
    model.layers().iter().map(|l| l.param_count()).collect()
}

/// Per-sample forward FLOPs per layer for a per-sample input shape.
pub fn estimate_flops<S: Scalar>(model: &Model<S>, input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        out.push(layer.flops(&shape)?);
        shape = layer.output_shape(&shape)?;
    }
    Ok(out)
}

/// Output-activation bytes per layer for `batch` samples of `width`-byte
/// elements, at the model's declared input shape.
pub fn estimate_activation_memory<S: Scalar>(model: &Model<S>, batch: usize, width: usize) -> Vec<usize> {
    (0..model.layers().len())
        .map(|i| batch * width * model.layer_input_shape(i + 1).iter().product::<usize>())
        .collect()
}

impl CostReport {
    /// Full report; `input` overrides the model's declared input shape for
    /// the FLOP and memory columns.
    pub fn new<S: Scalar>(model: &Model<S>, input: Option<&[usize]>, batch: usize, width: usize) -> Result<Self> {
        let input = input.unwrap_or(model.input_shape()).to_vec();
        let flops = estimate_flops(model, &input)?;
        let mut shape = input;
        let rows = model
            .layers()
            .iter()
            .zip(model.names())
            .zip(flops)
            .map(|((layer, name), flops)| {
                shape = layer.output_shape(&shape)?;
                Ok(CostRow {
                    name: name.clone(),
                    mode: layer.mode(),
                    alpha: layer.alpha(),
                    params: layer.param_count(),
                    flops,
                    activation_bytes: batch * width * shape.iter().product::<usize>(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows, batch, width })
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> usize {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_activation_bytes(&self) -> usize {
        self.rows.iter().map(|r| r.activation_bytes).sum()
    }

    /// Parameters without the final classifier, i.e. the last layer that
    /// has parameters.
    pub fn params_excluding_last(&self) -> usize {
        let last = self.rows.iter().rposition(|r| r.params > 0);
        self.rows
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != last)
            .map(|(_, r)| r.params)
            .sum()
    }

    /// CSV with a trailing `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COST_HEADER}\n");
        for r in &self.rows {
            let mode = r.mode.map_or("-", ProjectionMode::name);
            let _ = writeln!(out, "{},{mode},{},{},{},{}", r.name, r.alpha, r.params, r.flops, r.activation_bytes);
        }
        let _ = writeln!(
            out,
            "total,-,-,{},{},{}",
            self.total_params(),
            self.total_flops(),
            self.total_activation_bytes()
        );
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:<9} {:>5} {:>14} {:>16} {:>16}\n",
            "layer", "mode", "alpha", "params", "flops", "act_bytes"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<9} {:>5} {:>14} {:>16} {:>16}",
                r.name,
                r.mode.map_or("-", ProjectionMode::name),
                r.alpha,
                r.params,
                r.flops,
                r.activation_bytes
            );
        }
        let _ = writeln!(
            out,
            "{:<14} {:<9} {:>5} {:>14} {:>16} {:>16}",
            "total",
            "",
            "",
            self.total_params(),
            self.total_flops(),
            self.total_activation_bytes()
        );
        let _ = writeln!(out, "params excluding last classifier: {}", self.params_excluding_last());
        out
    }
}

pub const GRAD_STEP: f64 = 1e-6;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-5;
/// Parameter scale at which architecture-level checks are run.
pub const GRAD_CHECK_INIT_STD: f64 = 0.5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Cap on probed scalars per tensor (evenly spaced); `None` probes all.
    pub max_probes: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_GRAD_TOLERANCE,
            step: GRAD_STEP,
            max_probes: None,
        }
    }
}

/// Worst relative error over the probed scalars of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub layer: usize,
    pub layer_name: String,
    pub tensor: String,
    pub worst: f64,
    pub probes: usize,
    /// Probes skipped because the perturbation crossed a kink.
    pub excluded: usize,
    /// `(flat index, analytic, numeric)` at the worst probe.
    pub worst_at: Option<(usize, f64, f64)>,
}

impl TensorCheck {
    fn new(layer: usize, layer_name: String, tensor: String) -> Self {
        Self {
            layer,
            layer_name,
            tensor,
            worst: 0.0,
            probes: 0,
            excluded: 0,
            worst_at: None,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if self.worst_at.is_none() || err > self.worst {
            self.worst = err;
            self.worst_at = Some((index, analytic, numeric));
        }
        self.probes += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }

    pub fn excluded(&self) -> usize {
        self.checks.iter().map(|c| c.excluded).sum()
    }

    /// `(layer name, worst error)` per layer that has checked tensors.
    pub fn per_layer(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.checks {
            match out.last_mut() {
                Some((name, w)) if *name == c.layer_name => *w = w.max(c.worst),
                _ => out.push((c.layer_name.clone(), c.worst)),
            }
        }
        out
    }
}

fn probe_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|k| k * len / c).collect(),
        _ => (0..len).collect(),
    }
}

/// `L(plus) - L(minus)` of the batch-mean data loss, computed from the two
/// output tensors so that the shared part of the loss cancels exactly
/// rather than through one rounded subtraction of two large values.
fn loss_difference(kind: LossKind, plus: &Tensor<f64>, minus: &Tensor<f64>, targets: &Targets) -> Result<f64> {
    let n = targets.len().max(1);
    let width = *plus.shape().last().unwrap_or(&1);
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes { labels, .. }) => {
            let c = plus.len() / n;
            let mut total = 0.0;
            for (s, &label) in labels.iter().enumerate() {
                let zp = &plus.data()[s * c..(s + 1) * c];
                let zm = &minus.data()[s * c..(s + 1) * c];
                let max = zm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                // lse(zp) - lse(zm) = ln(1 + sum e^(zm-max) expm1(zp-zm) / sum e^(zm-max))
                let (mut base, mut change) = (0.0, 0.0);
                for (&p, &m) in zp.iter().zip(zm) {
                    let e = (m - max).exp();
                    base += e;
                    change += e * (p - m).exp_m1();
                }
                total += (change / base).ln_1p() - (zp[label] - zm[label]);
            }
            Ok(total / n as f64)
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => Err(Error::Data("cross-entropy needs class labels".into())),
        (LossKind::Mse, _) => {
            let y = match targets {
                Targets::Classes { labels, .. } => Targets::Classes { labels: labels.clone(), classes: width }.to_tensor(),
                Targets::Values(y) => y.clone(),
            };
            let sum: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(y.data())
                .map(|((&p, &m), &y)| (p - m) * (p + m - 2.0 * y))
                .sum();
            Ok(0.5 * sum / n as f64)
        }
    }
}

/// Central-difference check of every parameter tensor of `model` under its
/// configured data loss on `(x, targets)`.
pub fn grad_check_model(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    targets: &Targets,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut base_kinks = Vec::new();
    model.zero_grad();
    model.batch_loss_with_kinks(x, targets, true, Some(&mut base_kinks))?;
    let analytic: Vec<Tensor<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let outputs = |m: &mut Model<f64>| -> Result<(Tensor<f64>, Vec<u64>)> {
        let out = m.forward_to(x, m.logits_end())?;
        let mut kinks = Vec::new();
        m.layers().iter().for_each(|l| l.kinks(&mut kinks));
        m.clear_cache();
        Ok((out, kinks))
    };
    let kind = model.config().loss;
    let owners: Vec<(usize, String)> = model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.params().into_iter().map(move |p| (i, p.name.clone())))
        .collect();
    let mut checks = Vec::with_capacity(analytic.len());
    for (t, (layer, tensor)) in owners.into_iter().enumerate() {
        let mut check = TensorCheck::new(layer, model.names()[layer].clone(), tensor);
        for j in probe_indices(analytic[t].len(), opts.max_probes) {
            let orig = model.params()[t].value.data()[j];
            let at = |m: &mut Model<f64>, v: f64| {
                m.params_mut()[t].value.data_mut()[j] = v;
                outputs(m)
            };
            let plus = at(model, orig + opts.step);
            let minus = at(model, orig - opts.step);
            model.params_mut()[t].value.data_mut()[j] = orig;
            let ((op, kp), (om, km)) = (plus?, minus?);
            let numeric = loss_difference(kind, &op, &om, targets)? / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::Numeric {
                    layer,
                    name: check.layer_name,
                    msg: "non-finite loss while probing".into(),
                });
            }
            if kp != base_kinks || km != base_kinks {
                check.excluded += 1;
                continue;
            }
            check.record(j, analytic[t].data()[j], numeric);
        }
        checks.push(check);
    }
    model.zero_grad();
    Ok(GradCheckReport {
        checks,
        tolerance: opts.tolerance,
    })
}

/// Checks one layer in isolation under the objective `sum(r * layer(x))`
/// for a fixed random `r`: every parameter tensor and, for layers with a
/// differentiable input, the input gradient (reported as tensor `input`).
pub fn grad_check_layer(
    layer: &mut Layer<f64>,
    x: &Tensor<f64>,
    rng: &mut Rng,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let out = layer.forward(x)?;
    layer.clear_cache();
    let r: Vec<f64> = (0..out.len()).map(|_| rng.normal()).collect();
    let objective = |l: &mut Layer<f64>, x: &Tensor<f64>| -> Result<(Tensor<f64>, Vec<u64>)> {
        let y = l.forward(x)?;
        let mut kinks = Vec::new();
        l.kinks(&mut kinks);
        l.clear_cache();
        Ok((y, kinks))
    };
    // the objective is linear in the output, so difference outputs first:
    // sum(r * (y+ - y-)) avoids cancelling two large accumulated sums
    let central = |yp: &Tensor<f64>, ym: &Tensor<f64>| -> f64 {
        let d: f64 = yp.data().iter().zip(ym.data()).zip(&r).map(|((p, m), r)| r * (p - m)).sum();
        d / (2.0 * opts.step)
    };
    for p in layer.params_mut() {
        p.zero_grad();
    }
    layer.forward(x)?;
    let mut base_kinks = Vec::new();
    layer.kinks(&mut base_kinks);
    let dx = layer.backward(&Tensor::new(out.shape().to_vec(), r.clone())?)?;
    let analytic: Vec<(String, Tensor<f64>)> = layer
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    let name = layer.kind().to_string();
    let mut checks = Vec::new();
    let mut record = |tensor: String, probes: Vec<(usize, f64, f64, bool)>| -> Result<()> {
        let mut check = TensorCheck::new(0, name.clone(), tensor);
        for (j, a, numeric, kinked) in probes {
            if !numeric.is_finite() {
                return Err(Error::Numeric { layer: 0, name: name.clone(), msg: "non-finite objective while probing".into() });
            }
            if kinked {
                check.excluded += 1;
                continue;
            }
            check.record(j, a, numeric);
        }
        checks.push(check);
        Ok(())
    };
    for (t, (pname, grad)) in analytic.iter().enumerate() {
        let mut probes = Vec::new();
        for j in probe_indices(grad.len(), opts.max_probes) {
            let orig = layer.params()[t].value.data()[j];
            layer.params_mut()[t].value.data_mut()[j] = orig + opts.step;
            let (lp, kp) = objective(layer, x)?;
            layer.params_mut()[t].value.data_mut()[j] = orig - opts.step;
            let (lm, km) = objective(layer, x)?;
            layer.params_mut()[t].value.data_mut()[j] = orig;
            probes.push((j, grad.data()[j], central(&lp, &lm), kp != base_kinks || km != base_kinks));
        }
        record(pname.clone(), probes)?;
    }
    if !matches!(layer, Layer::Embedding(_)) {
        let mut probes = Vec::new();
        let mut xp = x.clone();
        for j in probe_indices(x.len(), opts.max_probes) {
            let orig = x.data()[j];
            xp.data_mut()[j] = orig + opts.step;
            let (lp, kp) = objective(layer, &xp)?;
            xp.data_mut()[j] = orig - opts.step;
            let (lm, km) = objective(layer, &xp)?;
            xp.data_mut()[j] = orig;
            probes.push((j, dx.data()[j], central(&lp, &lm), kp != base_kinks || km != base_kinks));
        }
        record("input".into(), probes)?;
    }
    for p in layer.params_mut() {
        p.zero_grad();
    }
    Ok(GradCheckReport {
        checks,
        tolerance: opts.tolerance,
    })
}

/// [`grad_check_layer`] for every layer with parameters, each fed a random
/// batch of `samples` inputs at its own input shape (standard normal
/// entries; valid ids for embeddings). Entries are `(layer name, report)`.
pub fn grad_check_layers(
    model: &Model<f64>,
    samples: usize,
    rng: &mut Rng,
    opts: &GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if layer.param_count() == 0 {
            continue;
        }
        let mut shape = vec![samples.max(1)];
        shape.extend_from_slice(model.layer_input_shape(i));
        let len: usize = shape.iter().product();
        let data = match layer {
            Layer::Embedding(e) => (0..len).map(|_| rng.below(e.vocab()) as f64).collect(),
            _ => (0..len).map(|_| rng.normal()).collect(),
        };
        let x = Tensor::new(shape, data)?;
        let mut probe = layer.clone();
        let mut report = grad_check_layer(&mut probe, &x, rng, opts)?;
        for c in &mut report.checks {
            c.layer = i;
            c.layer_name = model.names()[i].clone();
        }
        out.push((model.names()[i].clone(), report));
    }
    Ok(out)
}

/// A random batch conforming to `model`: standard normal features (valid
/// token ids when the first layer is an embedding) and random targets
/// matching the model output and loss.
pub fn synthetic_batch<S: Scalar>(model: &Model<S>, n: usize, rng: &mut Rng) -> Result<(Tensor<f64>, Targets)> {
    let mut shape = vec![n];
    shape.extend_from_slice(model.input_shape());
    let len: usize = shape.iter().product();
    let data = match model.layers().first() {
        Some(Layer::Embedding(e)) => (0..len).map(|_| rng.below(e.vocab()) as f64).collect(),
        _ => (0..len).map(|_| rng.normal()).collect(),
    };
    let x = Tensor::new(shape, data)?;
    let out = model.output_shape();
    let targets = match (model.config().loss, out) {
        (crate::losses::LossKind::CrossEntropy, [c]) => Targets::Classes {
            labels: (0..n).map(|_| rng.below(*c)).collect(),
            classes: *c,
        },
        (crate::losses::LossKind::CrossEntropy, _) => {
            return Err(Error::Build(format!(
                "cross-entropy needs a flat class output, model produces {out:?}"
            )))
        }
        (crate::losses::LossKind::Mse, _) => {
            let mut tshape = vec![n];
            tshape.extend_from_slice(out);
            let tlen = tshape.iter().product();
            Targets::Values(Tensor::new(tshape, (0..tlen).map(|_| rng.normal()).collect())?)
        }
    };
    Ok((x, targets))
}

pub const DEFAULT_EQUIV_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct EquivReport {
    pub max_deviation: f64,
    /// Samples compared (all ids for an embedding).
    pub samples: usize,
    pub tolerance: f64,
}

impl EquivReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

/// Compares a bilinear layer with its expanded full counterpart on
/// `trials` random inputs of per-sample shape `input` (standard normal
/// entries; every id for an embedding). `None` when the layer has no
/// bilinear projection.
pub fn equivalence_check(
    layer: &Layer<f64>,
    input: &[usize],
    trials: usize,
    tolerance: f64,
    rng: &mut Rng,
) -> Result<Option<EquivReport>> {
    if layer.mode() != Some(ProjectionMode::Bilinear) {
        return Ok(None);
    }
    let Some(mut full) = layer.to_full()? else {
        return Ok(None);
    };
    let mut bilinear = layer.clone();
    let x = match layer {
        Layer::Embedding(e) => {
            let ids: Vec<f64> = (0..e.vocab()).map(|i| i as f64).collect();
            Tensor::new(vec![e.vocab()], ids)?
        }
        _ => {
            let mut shape = vec![trials];
            shape.extend_from_slice(input);
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| rng.normal()).collect())?
        }
    };
    let a = bilinear.forward(&x)?;
    let b = full.forward(&x)?;
    Ok(Some(EquivReport {
        max_deviation: a.max_abs_diff(&b)?,
        samples: x.shape()[0],
        tolerance,
    }))
}

/// [`equivalence_check`] for every layer of a model, at each layer's input
/// shape. Entries are `(layer name, report)`.
pub fn model_equivalence(
    model: &Model<f64>,
    trials: usize,
    tolerance: f64,
    rng: &mut Rng,
) -> Result<Vec<(String, Option<EquivReport>)>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let report = equivalence_check(l, model.layer_input_shape(i), trials, tolerance, rng)?;
            Ok((model.names()[i].clone(), report))
        })
        .collect()
}

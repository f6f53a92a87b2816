//! Masked feed-forward classifiers with exact, deterministic gradients.
//!
//! A [`Model`] is an [`ArchSpec`] plus instantiated layers. Dense and conv
//! layers carry binary masks; the effective weight is `weight * mask`
//! everywhere, so pruning is a property of the model, not of the training
//! loop. Forward passes return class probabilities (the stack ends in
//! softmax), and backward passes return gradients for every parameter plus
//! the gradient w.r.t. the input, with masked weights receiving exactly zero.

pub mod checkpoint;
pub mod fd;
mod layer;
mod tensor;

pub use layer::{ArchSpec, BatchNorm, BnStats, Conv2d, Dense, Layer, LayerGrads, LayerSpec};
pub use layer::BATCHNORM_EPS;
pub use tensor::{softmax_rows, Tensor};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// A batch of samples: inputs with a leading batch axis plus class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::shape("Batch::new", "rank >= 2", inputs.rank()));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::shape(
                "Batch::new",
                format!("{} labels", inputs.shape()[0]),
                labels.len(),
            ));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch with the given sample indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(inputs, labels)
    }
}

/// Identifies one scalar parameter inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLoc {
    pub layer: usize,
    pub kind: ParamKind,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Gradients for every layer of a model, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Gradients {
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerGrads {
                    weight: Some(Tensor::zeros(d.weight.shape())),
                    bias: Some(Tensor::zeros(d.bias.shape())),
                    ..LayerGrads::default()
                },
                Layer::Conv2d(c) => LayerGrads {
                    weight: Some(Tensor::zeros(c.weight.shape())),
                    bias: Some(Tensor::zeros(c.bias.shape())),
                    ..LayerGrads::default()
                },
                Layer::BatchNorm(bn) => LayerGrads {
                    gamma: Some(Tensor::zeros(bn.gamma.shape())),
                    beta: Some(Tensor::zeros(bn.beta.shape())),
                    ..LayerGrads::default()
                },
                _ => LayerGrads::default(),
            })
            .collect();
        Gradients { layers }
    }

    /// In-place `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "Gradients::add_scaled",
                self.layers.len(),
                other.layers.len(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (mine, theirs) in [
                (&mut a.weight, &b.weight),
                (&mut a.bias, &b.bias),
                (&mut a.gamma, &b.gamma),
                (&mut a.beta, &b.beta),
            ] {
                match (mine, theirs) {
                    (Some(m), Some(t)) => m.add_scaled(t, scale)?,
                    (None, None) => {}
                    _ => {
                        return Err(Error::InvalidConfig(
                            "gradient layouts disagree".into(),
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, loc: ParamLoc) -> Option<f64> {
        let lg = self.layers.get(loc.layer)?;
        let t = match loc.kind {
            ParamKind::Weight => lg.weight.as_ref()?,
            ParamKind::Bias => lg.bias.as_ref()?,
            ParamKind::Gamma => lg.gamma.as_ref()?,
            ParamKind::Beta => lg.beta.as_ref()?,
        };
        t.data().get(loc.index).copied()
    }

    /// Largest absolute entry across all parameters.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for lg in &self.layers {
            for t in [&lg.weight, &lg.bias, &lg.gamma, &lg.beta]
                .into_iter()
                .flatten()
            {
                for &v in t.data() {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }
}

/// Cached activations from one forward pass, consumed by backward sweeps.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer, in layer order.
    pub(crate) inputs: Vec<Tensor>,
    /// Batch statistics per layer (batchnorm in training mode only).
    pub(crate) bn_stats: Vec<Option<BnStats>>,
    /// Pre-softmax activations (input to the final layer).
    pub logits: Tensor,
    /// Class probabilities (softmax output).
    pub output: Tensor,
    pub training: bool,
    /// Sum over the batch of all relu output values (relu outputs are
    /// nonnegative, so this is also their l1 norm).
    pub relu_act_sum: f64,
    /// Count of strictly positive relu outputs over the batch.
    pub relu_act_nonzero: usize,
}

/// A classifier: architecture plus instantiated layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    layers: Vec<Layer>,
}

/// Which loss `backward` differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean cross-entropy against integer labels, fused with the final
    /// softmax for numerical stability.
    CrossEntropy,
}

/// Everything a training step needs from one backward pass.
#[derive(Debug)]
pub struct BackwardOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub input_grad: Tensor,
    pub trace: Trace,
}

/// Builds a model with deterministic fan-in-scaled uniform weights.
///
/// Weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in layer order from a
/// ChaCha stream, so equal (spec, seed) pairs give bit-identical models.
/// Biases start at zero, batchnorm at the identity (gamma 1, beta 0), masks
/// all ones.
pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<Model> {
    let shapes = arch.layer_input_shapes()?;
    let mut r = rng::stream(rng::derive(seed, "init", 0));
    let mut layers = Vec::with_capacity(arch.layers.len());
    for (spec, shape) in arch.layers.iter().zip(&shapes) {
        let layer = match spec {
            LayerSpec::Dense { out } => {
                let fin: usize = shape.iter().product();
                let bound = 1.0 / (fin as f64).sqrt();
                let w: Vec<f64> = (0..out * fin).map(|_| r.gen_range(-bound..bound)).collect();
                Layer::Dense(Dense {
                    weight: Tensor::from_vec(&[*out, fin], w)?,
                    bias: Tensor::zeros(&[*out]),
                    mask: Tensor::filled(&[*out, fin], 1.0),
                })
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                padding,
            } => {
                let ic = shape[0];
                let fin = ic * kernel * kernel;
                let bound = 1.0 / (fin as f64).sqrt();
                let n = out_channels * fin;
                let w: Vec<f64> = (0..n).map(|_| r.gen_range(-bound..bound)).collect();
                Layer::Conv2d(Conv2d {
                    weight: Tensor::from_vec(&[*out_channels, ic, *kernel, *kernel], w)?,
                    bias: Tensor::zeros(&[*out_channels]),
                    mask: Tensor::filled(&[*out_channels, ic, *kernel, *kernel], 1.0),
                    padding: *padding,
                })
            }
            LayerSpec::BatchNorm => {
                let channels = shape[0];
                Layer::BatchNorm(BatchNorm {
                    gamma: Tensor::filled(&[channels], 1.0),
                    beta: Tensor::zeros(&[channels]),
                    running_mean: Tensor::zeros(&[channels]),
                    running_var: Tensor::filled(&[channels], 1.0),
                    eps: BATCHNORM_EPS,
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    Ok(Model {
        arch: arch.clone(),
        layers,
    })
}

impl Model {
    /// Rebuilds a model from parts; validates layer/arch congruence.
    pub(crate) fn from_parts(arch: ArchSpec, layers: Vec<Layer>) -> Result<Model> {
        arch.layer_input_shapes()?;
        if layers.len() != arch.layers.len() {
            return Err(Error::InvalidArch(format!(
                "{} layers for a {}-layer architecture",
                layers.len(),
                arch.layers.len()
            )));
        }
        for (i, (l, s)) in layers.iter().zip(&arch.layers).enumerate() {
            if &l.spec() != s {
                return Err(Error::InvalidArch(format!(
                    "layer {i} does not match its spec"
                )));
            }
        }
        Ok(Model { arch, layers })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Indices of layers that carry prunable weights (dense and conv).
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Total number of prunable weights.
    pub fn prunable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weight().map(Tensor::len))
            .sum()
    }

    /// Number of prunable weights still unmasked.
    pub fn kept_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.mask().map(Tensor::count_nonzero))
            .sum()
    }

    pub fn check_inputs(&self, inputs: &Tensor) -> Result<()> {
        let expected = &self.arch.input_shape;
        if inputs.rank() != expected.len() + 1 || &inputs.shape()[1..] != expected.as_slice() {
            return Err(Error::shape(
                "model input",
                format!("(batch, {expected:?})"),
                format!("{:?}", inputs.shape()),
            ));
        }
        if inputs.shape()[0] == 0 {
            return Err(Error::EmptyInput("forward on an empty batch".into()));
        }
        if !inputs.all_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    pub fn get_param(&self, loc: ParamLoc) -> Option<f64> {
        let t = self.param_tensor(loc.layer, loc.kind)?;
        t.data().get(loc.index).copied()
    }

    pub fn set_param(&mut self, loc: ParamLoc, value: f64) -> Result<()> {
        let t = self
            .param_tensor_mut(loc.layer, loc.kind)
            .ok_or_else(|| Error::InvalidConfig(format!("no such parameter: {loc:?}")))?;
        let slot = t
            .data_mut()
            .get_mut(loc.index)
            .ok_or_else(|| Error::InvalidConfig(format!("parameter index out of range: {loc:?}")))?;
        *slot = value;
        Ok(())
    }

    fn param_tensor(&self, layer: usize, kind: ParamKind) -> Option<&Tensor> {
        match (self.layers.get(layer)?, kind) {
            (Layer::Dense(d), ParamKind::Weight) => Some(&d.weight),
            (Layer::Dense(d), ParamKind::Bias) => Some(&d.bias),
            (Layer::Conv2d(c), ParamKind::Weight) => Some(&c.weight),
            (Layer::Conv2d(c), ParamKind::Bias) => Some(&c.bias),
            (Layer::BatchNorm(bn), ParamKind::Gamma) => Some(&bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::Beta) => Some(&bn.beta),
            _ => None,
        }
    }

    fn param_tensor_mut(&mut self, layer: usize, kind: ParamKind) -> Option<&mut Tensor> {
        match (self.layers.get_mut(layer)?, kind) {
            (Layer::Dense(d), ParamKind::Weight) => Some(&mut d.weight),
            (Layer::Dense(d), ParamKind::Bias) => Some(&mut d.bias),
            (Layer::Conv2d(c), ParamKind::Weight) => Some(&mut c.weight),
            (Layer::Conv2d(c), ParamKind::Bias) => Some(&mut c.bias),
            (Layer::BatchNorm(bn), ParamKind::Gamma) => Some(&mut bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::Beta) => Some(&mut bn.beta),
            _ => None,
        }
    }

    /// Every trainable parameter location, in a fixed traversal order.
    pub fn param_locs(&self) -> Vec<ParamLoc> {
        let mut locs = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let kinds: &[(ParamKind, usize)] = match layer {
                Layer::Dense(d) => &[
                    (ParamKind::Weight, d.weight.len()),
                    (ParamKind::Bias, d.bias.len()),
                ],
                Layer::Conv2d(c) => &[
                    (ParamKind::Weight, c.weight.len()),
                    (ParamKind::Bias, c.bias.len()),
                ],
                Layer::BatchNorm(bn) => &[
                    (ParamKind::Gamma, bn.gamma.len()),
                    (ParamKind::Beta, bn.beta.len()),
                ],
                _ => &[],
            };
            for &(kind, n) in kinds {
                for index in 0..n {
                    locs.push(ParamLoc {
                        layer: li,
                        kind,
                        index,
                    });
                }
            }
        }
        locs
    }
}

/// Runs the full stack and keeps per-layer caches for a backward pass.
pub fn forward_trace(model: &Model, inputs: &Tensor, training: bool) -> Result<Trace> {
    model.check_inputs(inputs)?;
    let n = model.layers.len();
    let mut layer_inputs = Vec::with_capacity(n);
    let mut bn_stats = Vec::with_capacity(n);
    let mut relu_act_sum = 0.0;
    let mut relu_act_nonzero = 0;
    let mut cur = inputs.clone();
    let mut logits = None;
    for (i, layer) in model.layers.iter().enumerate() {
        if i + 1 == n {
            logits = Some(cur.clone());
        }
        layer_inputs.push(cur.clone());
        let (y, stats) = layer.forward(&cur, training)?;
        if matches!(layer, Layer::Relu) {
            relu_act_sum += y.data().iter().sum::<f64>();
            relu_act_nonzero += y.count_nonzero();
        }
        bn_stats.push(stats);
        cur = y;
    }
    if !cur.all_finite() {
        return Err(Error::NonFinite("forward output".into()));
    }
    Ok(Trace {
        inputs: layer_inputs,
        bn_stats,
        logits: logits.expect("non-empty stack"),
        output: cur,
        training,
        relu_act_sum,
        relu_act_nonzero,
    })
}

/// Class probabilities for a batch of inputs. Rows sum to one within 1e-9.
pub fn forward(model: &Model, inputs: &Tensor, training: bool) -> Result<Tensor> {
    Ok(forward_trace(model, inputs, training)?.output)
}

/// Argmax class per sample, evaluated in inference mode.
/// Ties resolve to the lowest class index.
pub fn predict(model: &Model, inputs: &Tensor) -> Result<Vec<usize>> {
    let p = forward(model, inputs, false)?;
    Ok((0..p.shape()[0]).map(|i| p.argmax_row(i)).collect())
}

/// Fraction of a batch the model classifies correctly (inference mode).
pub fn accuracy(model: &Model, batch: &Batch) -> Result<f64> {
    let preds = predict(model, &batch.inputs)?;
    let correct = preds
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Converts a gradient w.r.t. softmax outputs into one w.r.t. the logits,
/// using the cached probabilities: dz_i = p_i * (dp_i - sum_j dp_j p_j).
pub fn prob_grad_to_logit_grad(probs: &Tensor, dprob: &Tensor) -> Result<Tensor> {
    if probs.shape() != dprob.shape() || probs.rank() != 2 {
        return Err(Error::shape(
            "prob_grad_to_logit_grad",
            format!("{:?}", probs.shape()),
            format!("{:?}", dprob.shape()),
        ));
    }
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let mut dz = vec![0.0; b * c];
    for i in 0..b {
        let p = &probs.data()[i * c..(i + 1) * c];
        let dp = &dprob.data()[i * c..(i + 1) * c];
        let dot: f64 = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
        for j in 0..c {
            dz[i * c + j] = p[j] * (dp[j] - dot);
        }
    }
    Tensor::from_vec(&[b, c], dz)
}

/// Backward sweep from a gradient w.r.t. the logits (the final softmax's
/// input). `relu_coeff` adds a constant gradient to every relu output,
/// which is how activation-l1 loss terms enter; pass 0.0 otherwise.
///
/// Returns per-layer parameter gradients and the gradient w.r.t. the inputs.
pub fn backprop_from_logits(
    model: &Model,
    trace: &Trace,
    logit_grad: &Tensor,
    relu_coeff: f64,
) -> Result<(Gradients, Tensor)> {
    let n = model.layers.len();
    let mut grads = vec![LayerGrads::default(); n];
    let mut dy = logit_grad.clone();
    // Skip the final softmax: the sweep enters at its input.
    for i in (0..n - 1).rev() {
        let layer = &model.layers[i];
        if matches!(layer, Layer::Relu) && relu_coeff != 0.0 {
            dy = dy.map(|v| v + relu_coeff);
        }
        let (dx, lg) = layer.backward(
            &trace.inputs[i],
            trace.bn_stats[i].as_ref(),
            &dy,
            trace.training,
        )?;
        grads[i] = lg;
        dy = dx;
    }
    Ok((Gradients { layers: grads }, dy))
}

/// Mean cross-entropy of a traced forward pass, computed from the logits via
/// log-sum-exp so near-zero probabilities cannot overflow.
pub fn cross_entropy_from_trace(trace: &Trace, labels: &[usize]) -> Result<f64> {
    let (b, c) = (trace.logits.shape()[0], trace.logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape("cross_entropy labels", b, labels.len()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidConfig(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let row = &trace.logits.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / b as f64)
}

/// Loss and gradients for one batch.
///
/// Cross-entropy fuses with the final softmax: the logit gradient is
/// `(probabilities - one_hot(label)) / batch`. Masked weights receive
/// exactly zero gradient. A non-finite loss is rejected.
pub fn backward(
    model: &Model,
    batch: &Batch,
    loss: LossKind,
    training: bool,
) -> Result<BackwardOutput> {
    let trace = forward_trace(model, &batch.inputs, training)?;
    let LossKind::CrossEntropy = loss;
    let loss_value = cross_entropy_from_trace(&trace, &batch.labels)?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    let (b, c) = (trace.output.shape()[0], trace.output.shape()[1]);
    let mut lg = vec![0.0; b * c];
    for (i, &y) in batch.labels.iter().enumerate() {
        for j in 0..c {
            let p = trace.output.data()[i * c + j];
            let target = if j == y { 1.0 } else { 0.0 };
            lg[i * c + j] = (p - target) / b as f64;
        }
    }
    let logit_grad = Tensor::from_vec(&[b, c], lg)?;
    let (grads, input_grad) = backprop_from_logits(model, &trace, &logit_grad, 0.0)?;
    Ok(BackwardOutput {
        loss: loss_value,
        grads,
        input_grad,
        trace,
    })
}

/// One SGD step: `p -= lr * g` for every parameter with a gradient.
/// Rejects negative or non-finite learning rates.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be finite and nonnegative, got {lr}"
        )));
    }
    if grads.layers.len() != model.layers.len() {
        return Err(Error::shape(
            "sgd_step",
            model.layers.len(),
            grads.layers.len(),
        ));
    }
    for (layer, lg) in model.layers.iter_mut().zip(&grads.layers) {
        match layer {
            Layer::Dense(d) => {
                if let Some(gw) = &lg.weight {
                    d.weight.add_scaled(gw, -lr)?;
                }
                if let Some(gb) = &lg.bias {
                    d.bias.add_scaled(gb, -lr)?;
                }
            }
            Layer::Conv2d(c) => {
                if let Some(gw) = &lg.weight {
                    c.weight.add_scaled(gw, -lr)?;
                }
                if let Some(gb) = &lg.bias {
                    c.bias.add_scaled(gb, -lr)?;
                }
            }
            Layer::BatchNorm(bn) => {
                if let Some(gg) = &lg.gamma {
                    bn.gamma.add_scaled(gg, -lr)?;
                }
                if let Some(gb) = &lg.beta {
                    bn.beta.add_scaled(gb, -lr)?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Folds batch statistics from a training forward pass into the batchnorm
/// running averages: `r = (1 - momentum) * r + momentum * batch_stat`.
pub fn update_running_stats(
    model: &mut Model,
    stats: &[Option<BnStats>],
    momentum: f64,
) -> Result<()> {
    if stats.len() != model.layers.len() {
        return Err(Error::shape(
            "update_running_stats",
            model.layers.len(),
            stats.len(),
        ));
    }
    for (layer, s) in model.layers.iter_mut().zip(stats) {
        if let (Layer::BatchNorm(bn), Some(s)) = (layer, s) {
            for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(s.mean.data()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, &b) in bn.running_var.data_mut().iter_mut().zip(s.var.data()) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;

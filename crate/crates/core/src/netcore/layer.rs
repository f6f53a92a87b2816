//! Layer kinds, their parameters and per-layer forward/backward kernels.
//!
//! Five kinds cover the desk-scale architectures: dense, stride-1 zero-padded
//! conv2d, batchnorm, relu and a final softmax. Dense and conv layers carry a
//! binary mask congruent to the weight tensor; the effective weight is always
//! `weight * mask`, so masked connections contribute exactly zero to outputs
//! and receive exactly zero gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::tensor::{softmax_rows, Tensor};

/// Numerical floor inside batchnorm denominators.
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Serializable description of one layer, before parameters exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Fully connected layer; flattens whatever comes in.
    Dense { out: usize },
    /// Stride-1 convolution with symmetric zero padding and square kernels.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    /// Per-channel (rank-4 input) or per-feature (rank-2 input) batchnorm.
    BatchNorm,
    Relu,
    /// Row softmax; only valid as the final layer.
    Softmax,
}

/// Architecture of a classifier: per-sample input shape plus layer stack.
///
/// The stack must end in `Softmax` fed by exactly `num_classes` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Shape of one sample, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// Propagates the per-sample shape through the stack, validating
    /// composition. Returns the per-layer input shapes (one per layer).
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArch(format!(
                "input shape {:?} has a zero or missing dimension",
                self.input_shape
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        match self.layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => {
                return Err(Error::InvalidArch(
                    "the final layer must be softmax".into(),
                ))
            }
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, spec) in self.layers.iter().enumerate() {
            shapes.push(cur.clone());
            let last = i + 1 == self.layers.len();
            cur = match spec {
                LayerSpec::Dense { out } => {
                    if *out == 0 {
                        return Err(Error::InvalidArch(format!("layer {i}: dense out = 0")));
                    }
                    vec![*out]
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    padding,
                } => {
                    if cur.len() != 3 {
                        return Err(Error::InvalidArch(format!(
                            "layer {i}: conv2d needs (channels, h, w) input, got {cur:?}"
                        )));
                    }
                    if *out_channels == 0 || *kernel == 0 {
                        return Err(Error::InvalidArch(format!(
                            "layer {i}: conv2d with zero channels or kernel"
                        )));
                    }
                    let (h, w) = (cur[1], cur[2]);
                    let (oh, ow) = (
                        (h + 2 * padding).checked_sub(*kernel - 1),
                        (w + 2 * padding).checked_sub(*kernel - 1),
                    );
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                            vec![*out_channels, oh, ow]
                        }
                        _ => {
                            return Err(Error::InvalidArch(format!(
                                "layer {i}: kernel {kernel} too large for {h}x{w} input with padding {padding}"
                            )))
                        }
                    }
                }
                LayerSpec::BatchNorm | LayerSpec::Relu => cur,
                LayerSpec::Softmax => {
                    if !last {
                        return Err(Error::InvalidArch(format!(
                            "layer {i}: softmax may only appear last"
                        )));
                    }
                    if cur != vec![self.num_classes] {
                        return Err(Error::InvalidArch(format!(
                            "softmax input shape {cur:?} does not match {} classes",
                            self.num_classes
                        )));
                    }
                    cur
                }
            };
        }
        Ok(shapes)
    }
}

/// Batch statistics produced by a batchnorm layer in training mode.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor, // (out, in)
    pub bias: Tensor,   // (out)
    pub mask: Tensor,   // (out, in), entries in {0, 1}
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor, // (out_ch, in_ch, k, k)
    pub bias: Tensor,   // (out_ch)
    pub mask: Tensor,   // same shape as weight
    pub padding: usize,
}

impl Dense {
    /// Masked weight (`weight * mask`).
    pub fn effective_weight(&self) -> Tensor {
        self.weight.zip_map(&self.mask, |w, m| w * m).expect("congruent")
    }
}

impl Conv2d {
    /// Masked weight (`weight * mask`).
    pub fn effective_weight(&self) -> Tensor {
        self.weight.zip_map(&self.mask, |w, m| w * m).expect("congruent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Softmax,
}

/// Gradients for one layer; `None` for parameters the layer does not have.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerGrads {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                out: d.weight.shape()[0],
            },
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                out_channels: c.weight.shape()[0],
                kernel: c.weight.shape()[2],
                padding: c.padding,
            },
            Layer::BatchNorm(_) => LayerSpec::BatchNorm,
            Layer::Relu => LayerSpec::Relu,
            Layer::Softmax => LayerSpec::Softmax,
        }
    }

    /// Weight tensor of a prunable (dense/conv) layer.
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            _ => None,
        }
    }

    /// Mask tensor of a prunable layer.
    pub fn mask(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(d) => Some(&d.mask),
            Layer::Conv2d(c) => Some(&c.mask),
            _ => None,
        }
    }

    pub fn set_mask(&mut self, mask: Tensor) -> Result<()> {
        let current = match self {
            Layer::Dense(d) => &mut d.mask,
            Layer::Conv2d(c) => &mut c.mask,
            _ => return Err(Error::InvalidArch("layer has no mask".into())),
        };
        if mask.shape() != current.shape() {
            return Err(Error::shape(
                "set_mask",
                format!("{:?}", current.shape()),
                format!("{:?}", mask.shape()),
            ));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        *current = mask;
        Ok(())
    }

    /// Effective weight (`weight * mask`) of a prunable layer.
    pub fn effective_weight(&self) -> Option<Tensor> {
        match self {
            Layer::Dense(d) => Some(d.effective_weight()),
            Layer::Conv2d(c) => Some(c.effective_weight()),
            _ => None,
        }
    }

    /// Runs the layer on a batched input.
    ///
    /// Batchnorm uses batch statistics when `training` is true (returned for
    /// running-average updates) and running statistics otherwise.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, Option<BnStats>)> {
        match self {
            Layer::Dense(d) => dense_forward(d, x).map(|y| (y, None)),
            Layer::Conv2d(c) => conv2d_forward(c, x).map(|y| (y, None)),
            Layer::BatchNorm(bn) => bn_forward(bn, x, training),
            Layer::Relu => Ok((x.map(|v| if v > 0.0 { v } else { 0.0 }), None)),
            Layer::Softmax => softmax_rows(x).map(|y| (y, None)),
        }
    }

    /// Propagates `dy` (gradient w.r.t. this layer's output) back through the
    /// layer, given the cached input `x` and, for batchnorm in training mode,
    /// the batch statistics from the forward pass.
    ///
    /// Returns the gradient w.r.t. `x` and this layer's parameter gradients.
    /// Masked weights receive exactly zero gradient.
    pub fn backward(
        &self,
        x: &Tensor,
        stats: Option<&BnStats>,
        dy: &Tensor,
        training: bool,
    ) -> Result<(Tensor, LayerGrads)> {
        match self {
            Layer::Dense(d) => dense_backward(d, x, dy),
            Layer::Conv2d(c) => conv2d_backward(c, x, dy),
            Layer::BatchNorm(bn) => bn_backward(bn, x, stats, dy, training),
            Layer::Relu => {
                let dx = dy.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 })?;
                Ok((dx, LayerGrads::default()))
            }
            Layer::Softmax => {
                // Softmax only appears as the final layer; the sweep enters
                // at its input (the logits), so this path never runs.
                Err(Error::InvalidArch(
                    "softmax backward is handled at the logits".into(),
                ))
            }
        }
    }
}

fn flatten_batch(x: &Tensor, fin: usize, context: &str) -> Result<(usize, Tensor)> {
    let b = x.shape()[0];
    let per: usize = x.shape()[1..].iter().product();
    if per != fin {
        return Err(Error::shape(context, fin, per));
    }
    Ok((b, x.reshaped(&[b, fin])?))
}

fn dense_forward(d: &Dense, x: &Tensor) -> Result<Tensor> {
    let (out, fin) = (d.weight.shape()[0], d.weight.shape()[1]);
    let (b, flat) = flatten_batch(x, fin, "dense forward")?;
    let w = &d.weight;
    let m = &d.mask;
    let mut y = vec![0.0; b * out];
    for i in 0..b {
        let xrow = &flat.data()[i * fin..(i + 1) * fin];
        for o in 0..out {
            let wrow = &w.data()[o * fin..(o + 1) * fin];
            let mrow = &m.data()[o * fin..(o + 1) * fin];
            let mut acc = d.bias.data()[o];
            for k in 0..fin {
                acc += wrow[k] * mrow[k] * xrow[k];
            }
            y[i * out + o] = acc;
        }
    }
    Tensor::from_vec(&[b, out], y)
}

fn dense_backward(d: &Dense, x: &Tensor, dy: &Tensor) -> Result<(Tensor, LayerGrads)> {
    let (out, fin) = (d.weight.shape()[0], d.weight.shape()[1]);
    let (b, flat) = flatten_batch(x, fin, "dense backward")?;
    if dy.shape() != [b, out] {
        return Err(Error::shape(
            "dense backward dy",
            format!("[{b}, {out}]"),
            format!("{:?}", dy.shape()),
        ));
    }
    let mut dw = vec![0.0; out * fin];
    let mut db = vec![0.0; out];
    let mut dx = vec![0.0; b * fin];
    for i in 0..b {
        let xrow = &flat.data()[i * fin..(i + 1) * fin];
        for o in 0..out {
            let g = dy.data()[i * out + o];
            db[o] += g;
            if g == 0.0 {
                continue;
            }
            let wrow = &d.weight.data()[o * fin..(o + 1) * fin];
            let mrow = &d.mask.data()[o * fin..(o + 1) * fin];
            let dwrow = &mut dw[o * fin..(o + 1) * fin];
            let dxrow = &mut dx[i * fin..(i + 1) * fin];
            for k in 0..fin {
                dwrow[k] += g * xrow[k];
                dxrow[k] += g * wrow[k] * mrow[k];
            }
        }
    }
    // Gradient of a masked weight is exactly zero.
    for (g, &m) in dw.iter_mut().zip(d.mask.data()) {
        *g *= m;
    }
    let grads = LayerGrads {
        weight: Some(Tensor::from_vec(&[out, fin], dw)?),
        bias: Some(Tensor::from_vec(&[out], db)?),
        ..LayerGrads::default()
    };
    let mut shape = x.shape().to_vec();
    shape[0] = b;
    Ok((Tensor::from_vec(&[b, fin], dx)?.reshaped(&shape)?, grads))
}

fn conv2d_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let ws = c.weight.shape();
    let (oc, ic, k) = (ws[0], ws[1], ws[2]);
    if x.rank() != 4 || x.shape()[1] != ic {
        return Err(Error::shape(
            "conv2d forward",
            format!("(batch, {ic}, h, w)"),
            format!("{:?}", x.shape()),
        ));
    }
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let p = c.padding as isize;
    let oh = h + 2 * c.padding - (k - 1);
    let ow = w + 2 * c.padding - (k - 1);
    let mut y = vec![0.0; b * oc * oh * ow];
    let xs = x.data();
    for bi in 0..b {
        for o in 0..oc {
            let bias = c.bias.data()[o];
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias;
                    for ci in 0..ic {
                        for kh in 0..k {
                            let iy = yy as isize + kh as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let ix = xx as isize + kw as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let widx = ((o * ic + ci) * k + kh) * k + kw;
                                let weff = c.weight.data()[widx] * c.mask.data()[widx];
                                acc += weff
                                    * xs[((bi * ic + ci) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    y[((bi * oc + o) * oh + yy) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, oc, oh, ow], y)
}

fn conv2d_backward(c: &Conv2d, x: &Tensor, dy: &Tensor) -> Result<(Tensor, LayerGrads)> {
    let ws = c.weight.shape();
    let (oc, ic, k) = (ws[0], ws[1], ws[2]);
    let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let p = c.padding as isize;
    let oh = h + 2 * c.padding - (k - 1);
    let ow = w + 2 * c.padding - (k - 1);
    if dy.shape() != [b, oc, oh, ow] {
        return Err(Error::shape(
            "conv2d backward dy",
            format!("[{b}, {oc}, {oh}, {ow}]"),
            format!("{:?}", dy.shape()),
        ));
    }
    let mut dw = vec![0.0; c.weight.len()];
    let mut db = vec![0.0; oc];
    let mut dx = vec![0.0; x.len()];
    let xs = x.data();
    let gs = dy.data();
    for bi in 0..b {
        for o in 0..oc {
            for yy in 0..oh {
                for xx in 0..ow {
                    let g = gs[((bi * oc + o) * oh + yy) * ow + xx];
                    db[o] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..ic {
                        for kh in 0..k {
                            let iy = yy as isize + kh as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let ix = xx as isize + kw as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let widx = ((o * ic + ci) * k + kh) * k + kw;
                                let xidx =
                                    ((bi * ic + ci) * h + iy as usize) * w + ix as usize;
                                dw[widx] += g * xs[xidx];
                                dx[xidx] +=
                                    g * c.weight.data()[widx] * c.mask.data()[widx];
                            }
                        }
                    }
                }
            }
        }
    }
    for (g, &m) in dw.iter_mut().zip(c.mask.data()) {
        *g *= m;
    }
    let grads = LayerGrads {
        weight: Some(Tensor::from_vec(ws, dw)?),
        bias: Some(Tensor::from_vec(&[oc], db)?),
        ..LayerGrads::default()
    };
    Ok((Tensor::from_vec(x.shape(), dx)?, grads))
}

/// Channel axis layout of a batchnorm input: (channels, outer repeats).
/// Rank-2 inputs normalize per feature, rank-4 per channel.
fn bn_layout(x: &Tensor) -> Result<(usize, usize)> {
    match x.rank() {
        2 => Ok((x.shape()[1], x.shape()[0])),
        4 => Ok((x.shape()[1], x.shape()[0] * x.shape()[2] * x.shape()[3])),
        r => Err(Error::shape("batchnorm", "rank 2 or 4", r)),
    }
}

/// Visits every element of channel `c` in index order.
fn bn_for_channel(x: &[f64], shape: &[usize], c: usize, mut f: impl FnMut(usize)) {
    if shape.len() == 2 {
        let (b, ch) = (shape[0], shape[1]);
        for i in 0..b {
            f(i * ch + c);
        }
    } else {
        let (b, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for bi in 0..b {
            let base = (bi * ch + c) * h * w;
            for j in 0..h * w {
                f(base + j);
            }
        }
    }
    let _ = x;
}

fn bn_forward(bn: &BatchNorm, x: &Tensor, training: bool) -> Result<(Tensor, Option<BnStats>)> {
    let (channels, n) = bn_layout(x)?;
    if bn.gamma.len() != channels {
        return Err(Error::shape("batchnorm channels", bn.gamma.len(), channels));
    }
    let (mean, var) = if training {
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for c in 0..channels {
            let mut sum = 0.0;
            bn_for_channel(x.data(), x.shape(), c, |i| sum += x.data()[i]);
            let m = sum / n as f64;
            let mut sq = 0.0;
            bn_for_channel(x.data(), x.shape(), c, |i| {
                let d = x.data()[i] - m;
                sq += d * d;
            });
            mean[c] = m;
            var[c] = sq / n as f64;
        }
        (mean, var)
    } else {
        (
            bn.running_mean.data().to_vec(),
            bn.running_var.data().to_vec(),
        )
    };
    let mut y = vec![0.0; x.len()];
    for c in 0..channels {
        let inv = 1.0 / (var[c] + bn.eps).sqrt();
        let (g, b) = (bn.gamma.data()[c], bn.beta.data()[c]);
        bn_for_channel(x.data(), x.shape(), c, |i| {
            y[i] = g * (x.data()[i] - mean[c]) * inv + b;
        });
    }
    let out = Tensor::from_vec(x.shape(), y)?;
    let stats = training.then(|| BnStats {
        mean: Tensor::from_vec(&[channels], mean).expect("shape"),
        var: Tensor::from_vec(&[channels], var).expect("shape"),
    });
    Ok((out, stats))
}

fn bn_backward(
    bn: &BatchNorm,
    x: &Tensor,
    stats: Option<&BnStats>,
    dy: &Tensor,
    training: bool,
) -> Result<(Tensor, LayerGrads)> {
    let (channels, n) = bn_layout(x)?;
    let (mean, var): (&[f64], &[f64]) = if training {
        let s = stats.ok_or_else(|| {
            Error::InvalidConfig("batchnorm training backward needs batch stats".into())
        })?;
        (s.mean.data(), s.var.data())
    } else {
        (bn.running_mean.data(), bn.running_var.data())
    };
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let mut dx = vec![0.0; x.len()];
    for c in 0..channels {
        let inv = 1.0 / (var[c] + bn.eps).sqrt();
        let g = bn.gamma.data()[c];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        bn_for_channel(x.data(), x.shape(), c, |i| {
            let xhat = (x.data()[i] - mean[c]) * inv;
            sum_dy += dy.data()[i];
            sum_dy_xhat += dy.data()[i] * xhat;
        });
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        if training {
            // Full gradient through the batch statistics.
            let nf = n as f64;
            bn_for_channel(x.data(), x.shape(), c, |i| {
                let xhat = (x.data()[i] - mean[c]) * inv;
                dx[i] = g * inv * (dy.data()[i] - sum_dy / nf - xhat * sum_dy_xhat / nf);
            });
        } else {
            // Running statistics are constants; the map is affine.
            bn_for_channel(x.data(), x.shape(), c, |i| {
                dx[i] = g * inv * dy.data()[i];
            });
        }
    }
    let grads = LayerGrads {
        gamma: Some(Tensor::from_vec(&[channels], dgamma)?),
        beta: Some(Tensor::from_vec(&[channels], dbeta)?),
        ..LayerGrads::default()
    };
    Ok((Tensor::from_vec(x.shape(), dx)?, grads))
}

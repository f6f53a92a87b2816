//! Per-parameter importance scores that drive mask construction.
//!
//! Four metrics are implemented. NIS propagates output-unit importance
//! backwards through absolute weights; ERM normalizes weight magnitudes per
//! layer; ASE weighs squared parameter magnitude by an estimate of the loss
//! curvature; BNSF reads channel saliency off batchnorm scale over standard
//! deviation. All metrics score the *effective* (mask-applied) weights, so a
//! connection that is already pruned scores zero and stays pruned.

use serde_json::json;

use crate::netcore::{
    backward, cross_entropy_from_trace, forward_trace, Batch, Layer, LossKind, Model, ParamKind,
    ParamLoc, Tensor,
};
use crate::{Error, Result};

/// The four scoring methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Metric {
    Nis,
    Erm,
    Ase,
    Bnsf,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Nis, Metric::Erm, Metric::Ase, Metric::Bnsf];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Nis => "nis",
            Metric::Erm => "erm",
            Metric::Ase => "ase",
            Metric::Bnsf => "bnsf",
        }
    }

    pub fn parse(s: &str) -> Result<Metric> {
        match s.to_ascii_lowercase().as_str() {
            "nis" => Ok(Metric::Nis),
            "erm" => Ok(Metric::Erm),
            "ase" => Ok(Metric::Ase),
            "bnsf" => Ok(Metric::Bnsf),
            other => Err(Error::InvalidConfig(format!("unknown metric '{other}'"))),
        }
    }
}

/// Per-layer score tensors, congruent to each prunable layer's weights.
/// Indexed like `model.layers()`; `None` for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub metric: Metric,
    pub layers: Vec<Option<Tensor>>,
}

impl ImportanceScores {
    /// Every metric must emit non-negative, finite scores.
    pub fn check(&self, model: &Model) -> Result<()> {
        for (li, entry) in self.layers.iter().enumerate() {
            if let Some(scores) = entry {
                let w = model.layers()[li].weight().ok_or_else(|| {
                    Error::InvalidArch(format!("layer {li} scored but has no weights"))
                })?;
                if scores.shape() != w.shape() {
                    return Err(Error::shape(
                        "importance scores",
                        format!("{:?}", w.shape()),
                        format!("{:?}", scores.shape()),
                    ));
                }
                if scores.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
                    return Err(Error::NonFinite(format!(
                        "importance scores of layer {li} ({})",
                        self.metric.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    /// JSON report of per-layer score statistics, optionally with raw values.
    pub fn report(&self, include_values: bool) -> serde_json::Value {
        let layers: Vec<serde_json::Value> = self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(li, entry)| entry.as_ref().map(|s| (li, s)))
            .map(|(li, s)| {
                let d = s.data();
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut v = json!({
                    "layer": li,
                    "metric": self.metric.as_str(),
                    "shape": s.shape(),
                    "min": min,
                    "max": max,
                    "mean": mean,
                });
                if include_values {
                    v["values"] = json!(d);
                }
                v
            })
            .collect();
        json!({ "metric": self.metric.as_str(), "layers": layers })
    }
}

/// Output-unit importance per prunable layer, propagated backwards from
/// `final_scores` through absolute effective weights. Dense layers propagate
/// per unit; conv layers per channel (spatial positions of a channel are
/// summed when a dense layer feeds the recursion from below).
pub fn nis_neuron_importance(model: &Model, final_scores: &Tensor) -> Result<Vec<Option<Tensor>>> {
    if final_scores.len() != model.num_classes() {
        return Err(Error::shape(
            "nis final scores",
            model.num_classes(),
            format!("{:?}", final_scores.shape()),
        ));
    }
    if final_scores.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::NonFinite("nis final scores".into()));
    }
    let shapes = model.arch().layer_input_shapes()?;
    let mut out: Vec<Option<Tensor>> = vec![None; model.layers().len()];
    let mut cur: Vec<f64> = final_scores.data().to_vec();

    for li in (0..model.layers().len()).rev() {
        match &model.layers()[li] {
            Layer::Relu | Layer::Softmax | Layer::BatchNorm(_) => {}
            Layer::Dense(d) => {
                let (units, fan_in) = (d.weight.shape()[0], d.weight.shape()[1]);
                if cur.len() != units {
                    return Err(Error::shape("nis propagation", units, cur.len()));
                }
                out[li] = Some(Tensor::from_vec(&[units], cur.clone())?);
                let w = d.effective_weight();
                let mut prev = vec![0.0; fan_in];
                for j in 0..units {
                    for k in 0..fan_in {
                        prev[k] += w.data()[j * fan_in + k].abs() * cur[j];
                    }
                }
                cur = prev;
            }
            Layer::Conv2d(c) => {
                let out_shape = &shapes[li + 1]; // [oc, h, w] per sample
                let (oc, h, w_sp) = (out_shape[0], out_shape[1], out_shape[2]);
                let ic = c.weight.shape()[1];
                let k = c.weight.shape()[2];
                // Aggregate a flattened per-feature importance (from a dense
                // layer below the recursion) into per-channel totals.
                let ch: Vec<f64> = if cur.len() == oc {
                    cur.clone()
                } else if cur.len() == oc * h * w_sp {
                    (0..oc)
                        .map(|o| cur[o * h * w_sp..(o + 1) * h * w_sp].iter().sum())
                        .collect()
                } else {
                    return Err(Error::shape("nis conv propagation", oc, cur.len()));
                };
                out[li] = Some(Tensor::from_vec(&[oc], ch.clone())?);
                let w = c.effective_weight();
                let mut prev = vec![0.0; ic];
                for o in 0..oc {
                    for i in 0..ic {
                        let mut wsum = 0.0;
                        for t in 0..k * k {
                            wsum += w.data()[(o * ic + i) * k * k + t].abs();
                        }
                        prev[i] += ch[o] * wsum;
                    }
                }
                cur = prev;
            }
        }
    }
    Ok(out)
}

/// NIS broadcast to per-weight scores: each weight inherits the importance of
/// the output unit (or channel) it feeds, scaled by its own magnitude.
pub fn score_nis(model: &Model, final_scores: &Tensor) -> Result<ImportanceScores> {
    let neuron = nis_neuron_importance(model, final_scores)?;
    let mut layers: Vec<Option<Tensor>> = vec![None; model.layers().len()];
    for (li, layer) in model.layers().iter().enumerate() {
        let Some(imp) = &neuron[li] else { continue };
        let w = layer.effective_weight().expect("prunable layer has weights");
        let per_unit = w.len() / imp.len();
        let mut s = Tensor::zeros(w.shape());
        for j in 0..imp.len() {
            for t in 0..per_unit {
                s.data_mut()[j * per_unit + t] = imp.data()[j] * w.data()[j * per_unit + t].abs();
            }
        }
        layers[li] = Some(s);
    }
    Ok(ImportanceScores {
        metric: Metric::Nis,
        layers,
    })
}

/// Per-layer scale factors for ERM scoring, one per prunable layer in order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ErmConfig {
    pub eta: Vec<f64>,
}

impl ErmConfig {
    pub fn uniform(eta: f64, prunable_layers: usize) -> Self {
        ErmConfig {
            eta: vec![eta; prunable_layers],
        }
    }
}

/// Magnitude scores normalized so each layer's largest weight scores exactly
/// its eta.
pub fn score_erm(model: &Model, cfg: &ErmConfig) -> Result<ImportanceScores> {
    let prunable = model.prunable_layers();
    if cfg.eta.len() != prunable.len() {
        return Err(Error::InvalidConfig(format!(
            "erm eta list has {} entries for {} prunable layers",
            cfg.eta.len(),
            prunable.len()
        )));
    }
    if cfg.eta.iter().any(|&e| !e.is_finite() || e <= 0.0) {
        return Err(Error::InvalidConfig("erm eta must be > 0".into()));
    }
    let mut layers: Vec<Option<Tensor>> = vec![None; model.layers().len()];
    for (pi, &li) in prunable.iter().enumerate() {
        let w = model.layers()[li]
            .effective_weight()
            .expect("prunable layer has weights");
        let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            return Err(Error::AllZeroLayer { layer: li });
        }
        let eta = cfg.eta[pi];
        layers[li] = Some(w.map(|v| eta * v.abs() / max));
    }
    Ok(ImportanceScores {
        metric: Metric::Erm,
        layers,
    })
}

/// How the diagonal loss curvature is estimated for ASE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HessianMode {
    /// Squared first gradients (Fisher approximation); the fast default.
    Fisher,
    /// Central second differences with step 1e-3; exact on quadratics and
    /// used as the test oracle. Cost is two forward passes per parameter.
    FiniteDiff,
}

const ASE_FD_STEP: f64 = 1e-3;

/// Saliency from a second-order expansion: half the curvature estimate times
/// the squared weight. The finite-difference mode takes the curvature's
/// magnitude so scores stay non-negative saliencies.
pub fn score_ase(model: &Model, batch: &Batch, mode: HessianMode) -> Result<ImportanceScores> {
    if batch.len() == 0 {
        return Err(Error::EmptyInput("ase needs a non-empty batch".into()));
    }
    let mut layers: Vec<Option<Tensor>> = vec![None; model.layers().len()];
    match mode {
        HessianMode::Fisher => {
            let out = backward(model, batch, LossKind::CrossEntropy, false)?;
            for (li, layer) in model.layers().iter().enumerate() {
                let Some(w) = layer.effective_weight() else { continue };
                let g = out.grads.layers[li]
                    .weight
                    .as_ref()
                    .expect("prunable layer has a weight gradient");
                let s = w.zip_map(g, |wv, gv| 0.5 * gv * gv * wv * wv)?;
                if !s.all_finite() {
                    return Err(Error::NonFinite(format!("ase fisher scores, layer {li}")));
                }
                layers[li] = Some(s);
            }
        }
        HessianMode::FiniteDiff => {
            let base = loss_of(model, batch)?;
            for &li in &model.prunable_layers() {
                let w = model.layers()[li]
                    .effective_weight()
                    .expect("prunable layer has weights");
                let mut s = Tensor::zeros(w.shape());
                for idx in 0..w.len() {
                    let loc = ParamLoc {
                        layer: li,
                        kind: ParamKind::Weight,
                        index: idx,
                    };
                    let mut probe = model.clone();
                    let v = probe.get_param(loc).expect("loc from prunable layer");
                    probe.set_param(loc, v + ASE_FD_STEP)?;
                    let plus = loss_of(&probe, batch)?;
                    probe.set_param(loc, v - ASE_FD_STEP)?;
                    let minus = loss_of(&probe, batch)?;
                    let d2 = (plus - 2.0 * base + minus) / (ASE_FD_STEP * ASE_FD_STEP);
                    if !d2.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "ase curvature at layer {li}, index {idx}"
                        )));
                    }
                    let wv = w.data()[idx];
                    s.data_mut()[idx] = 0.5 * d2.abs() * wv * wv;
                }
                layers[li] = Some(s);
            }
        }
    }
    Ok(ImportanceScores {
        metric: Metric::Ase,
        layers,
    })
}

fn loss_of(model: &Model, batch: &Batch) -> Result<f64> {
    let trace = forward_trace(model, &batch.inputs, false)?;
    cross_entropy_from_trace(&trace, &batch.labels)
}

/// Channel saliency |gamma| / sigma from the batchnorm immediately following
/// each prunable layer, broadcast onto incoming weights as |gamma * w| / sigma.
pub fn score_bnsf(model: &Model) -> Result<ImportanceScores> {
    let mut layers: Vec<Option<Tensor>> = vec![None; model.layers().len()];
    for &li in &model.prunable_layers() {
        let bn = match model.layers().get(li + 1) {
            Some(Layer::BatchNorm(bn)) => bn,
            _ => return Err(Error::MissingBatchNorm { layer: li }),
        };
        let w = model.layers()[li]
            .effective_weight()
            .expect("prunable layer has weights");
        let channels = w.shape()[0];
        if bn.gamma.len() != channels {
            return Err(Error::shape(
                "bnsf gamma",
                channels,
                format!("{:?}", bn.gamma.shape()),
            ));
        }
        let per_channel = w.len() / channels;
        let mut s = Tensor::zeros(w.shape());
        for j in 0..channels {
            let sigma = (bn.running_var.data()[j] + bn.eps).sqrt();
            let scale = bn.gamma.data()[j].abs() / sigma;
            for t in 0..per_channel {
                s.data_mut()[j * per_channel + t] = scale * w.data()[j * per_channel + t].abs();
            }
        }
        if !s.all_finite() {
            return Err(Error::NonFinite(format!("bnsf scores, layer {li}")));
        }
        layers[li] = Some(s);
    }
    Ok(ImportanceScores {
        metric: Metric::Bnsf,
        layers,
    })
}

/// Score a model under a metric with the workspace defaults: uniform NIS
/// output importance, eta = 1 for every layer, Fisher curvature on the given
/// batch for ASE.
pub fn compute_scores(model: &Model, metric: Metric, batch: &Batch) -> Result<ImportanceScores> {
    let scores = match metric {
        Metric::Nis => score_nis(model, &Tensor::filled(&[model.num_classes()], 1.0))?,
        Metric::Erm => score_erm(model, &ErmConfig::uniform(1.0, model.prunable_layers().len()))?,
        Metric::Ase => score_ase(model, batch, HessianMode::Fisher)?,
        Metric::Bnsf => score_bnsf(model)?,
    };
    scores.check(model)?;
    Ok(scores)
}

/// Spearman rank correlation with average ranks on ties; used to report how
/// closely the Fisher curvature tracks the finite-difference oracle.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap().then(i.cmp(&j)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

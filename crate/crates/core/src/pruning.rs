//! Mask construction from importance scores under learnable per-layer keep
//! rates, plus the alternating adversarial pruning loop.
//!
//! Keep rates are parameterized as a = (1 - a_min) * sigmoid(r) + a_min so a
//! layer can never fall below the floor a_min. Each pruning round refreshes
//! scores, nudges the rates against [adversarial loss + phi * excess-keep
//! penalty] through a straight-through estimate at the mask boundary,
//! deterministically projects the rates onto the global budget, rebuilds
//! masks, and fine-tunes the surviving weights adversarially. Stored values
//! of masked weights are kept (frozen) during the search so a later round can
//! re-admit them; they are only hard-zeroed once pruning finishes.

use serde_json::json;

use crate::advtrain::{adversarial_train, TrainConfig};
use crate::attacks;
use crate::importance::{compute_scores, ImportanceScores, Metric};
use crate::netcore::{backward, Batch, Layer, LossKind, Model, Tensor};
use crate::rng;
use crate::{Error, Result};

/// How per-layer keep rates are chosen during pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RateMode {
    /// Gradient-updated non-uniform rates (the default).
    Learned,
    /// All layers pinned to the global target rate; used when exact uniform
    /// budgets matter more than accuracy.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruneConfig {
    /// Sparsity the deployed ensemble should reach (s_r).
    pub target_sparsity: f64,
    /// Per-sub-model removal fraction (c_r); the keep target is 1 - c_r.
    pub sub_model_compression: f64,
    /// Per-layer keep-rate floor.
    pub a_min: f64,
    /// Weight of the compression-control penalty.
    pub phi: f64,
    /// Number of alternating rounds (score refresh + rate step + mask + one
    /// epoch of adversarial fine-tuning each).
    pub prune_epochs: usize,
    /// Step size for the rate updates.
    pub rate_lr: f64,
    pub rate_mode: RateMode,
    /// Final fine-tuning run after masks are frozen; its attack settings are
    /// also used for score batches during the rounds.
    pub fine_tune: TrainConfig,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("target_sparsity", self.target_sparsity),
            ("sub_model_compression", self.sub_model_compression),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        if self.sub_model_compression + 1e-12 < self.target_sparsity {
            return Err(Error::InvalidConfig(format!(
                "sub_model_compression ({}) must be >= target_sparsity ({})",
                self.sub_model_compression, self.target_sparsity
            )));
        }
        if !(self.a_min > 0.0 && self.a_min <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "a_min must lie in (0, 1], got {}",
                self.a_min
            )));
        }
        let target_keep = 1.0 - self.sub_model_compression;
        if self.a_min > target_keep + 1e-12 {
            return Err(Error::InfeasiblePruning {
                a_min: self.a_min,
                target: target_keep,
            });
        }
        if !self.phi.is_finite() || self.phi < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "phi must be finite and >= 0, got {}",
                self.phi
            )));
        }
        if !self.rate_lr.is_finite() || self.rate_lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "rate_lr must be > 0, got {}",
                self.rate_lr
            )));
        }
        self.fine_tune.validate()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Quotas saturate beyond this; keeps logit/sigmoid round trips stable.
const RATE_CLAMP: f64 = 30.0;

/// Learnable per-layer pruning quotas. The keep rate of layer l is
/// a_l = (1 - a_min) * sigmoid(r_l) + a_min, always inside [a_min, 1].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerRates {
    pub a_min: f64,
    pub r: Vec<f64>,
}

impl LayerRates {
    /// Rates that realize keep rate `a` uniformly across `layers` layers.
    pub fn uniform(a: f64, a_min: f64, layers: usize) -> Result<Self> {
        if !(a_min > 0.0 && a_min <= 1.0) {
            return Err(Error::InvalidConfig(format!("a_min out of (0,1]: {a_min}")));
        }
        if a < a_min - 1e-12 || a > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "keep rate {a} outside [a_min={a_min}, 1]"
            )));
        }
        let r = logit_for(a, a_min);
        Ok(LayerRates {
            a_min,
            r: vec![r; layers],
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// a = g(r) per layer.
    pub fn keep_rates(&self) -> Vec<f64> {
        self.r
            .iter()
            .map(|&r| (1.0 - self.a_min) * sigmoid(r) + self.a_min)
            .collect()
    }
}

/// Inverse of the rate map, clamped where the target sits on a boundary.
fn logit_for(a: f64, a_min: f64) -> f64 {
    let t = ((a - a_min) / (1.0 - a_min)).clamp(0.0, 1.0);
    if t <= 0.0 {
        -RATE_CLAMP
    } else if t >= 1.0 {
        RATE_CLAMP
    } else {
        (t / (1.0 - t)).ln().clamp(-RATE_CLAMP, RATE_CLAMP)
    }
}

/// Kept count for a layer: round-half-up of a*n, with the product snapped to
/// a 1e-9 grid first so quota round trips through sigmoid/logit cannot flip a
/// half-integer boundary.
pub fn kept_count(a: f64, n: usize) -> usize {
    let x = a * n as f64;
    let snapped = (x * 1e9).round() / 1e9;
    ((snapped + 0.5).floor() as usize).min(n)
}

/// Build per-layer masks keeping the top round(a*n) weights by score. Ties
/// prune the lower flat index first. Returns one entry per model layer,
/// aligned with `scores.layers`.
pub fn make_mask(scores: &ImportanceScores, rates: &LayerRates) -> Result<Vec<Option<Tensor>>> {
    let scored: Vec<(usize, &Tensor)> = scores
        .layers
        .iter()
        .enumerate()
        .filter_map(|(li, s)| s.as_ref().map(|t| (li, t)))
        .collect();
    if scored.len() != rates.len() {
        return Err(Error::InvalidConfig(format!(
            "{} rate entries for {} scored layers",
            rates.len(),
            scored.len()
        )));
    }
    let a = rates.keep_rates();
    let mut out: Vec<Option<Tensor>> = vec![None; scores.layers.len()];
    for (pi, (li, s)) in scored.into_iter().enumerate() {
        let n = s.len();
        let kept = kept_count(a[pi], n);
        if kept == 0 {
            return Err(Error::LayerEmptied {
                layer: li,
                rate: a[pi],
                params: n,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        // Prune priority: ascending score, then ascending index.
        order.sort_by(|&i, &j| {
            s.data()[i]
                .partial_cmp(&s.data()[j])
                .expect("scores are finite")
                .then(i.cmp(&j))
        });
        let mut mask = Tensor::filled(s.shape(), 1.0);
        for &idx in &order[..n - kept] {
            mask.data_mut()[idx] = 0.0;
        }
        out[li] = Some(mask);
    }
    Ok(out)
}

/// Excess-keep penalty in count form: max(kept / (a_t * total) - 1, 0).
pub fn compression_penalty(kept: usize, total: usize, a_t: f64) -> Result<f64> {
    if !(a_t > 0.0 && a_t <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "compression target a_t must lie in (0, 1], got {a_t}"
        )));
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok((kept as f64 / (a_t * total as f64) - 1.0).max(0.0))
}

/// Penalty evaluated on a model's current masks.
pub fn compression_loss(model: &Model, a_t: f64) -> Result<f64> {
    compression_penalty(model.kept_param_count(), model.prunable_param_count(), a_t)
}

/// Fraction of prunable parameters removed: 1 - kept / total.
pub fn global_sparsity(model: &Model) -> f64 {
    let total = model.prunable_param_count();
    if total == 0 {
        return 0.0;
    }
    1.0 - model.kept_param_count() as f64 / total as f64
}

/// Zero the stored values of masked-out weights so checkpoints carry no
/// ghost values.
pub fn apply_masks(model: &mut Model) {
    for layer in model.layers_mut() {
        match layer {
            Layer::Dense(d) => {
                for (w, m) in d.weight.data_mut().iter_mut().zip(d.mask.data()) {
                    if *m == 0.0 {
                        *w = 0.0;
                    }
                }
            }
            Layer::Conv2d(c) => {
                for (w, m) in c.weight.data_mut().iter_mut().zip(c.mask.data()) {
                    if *m == 0.0 {
                        *w = 0.0;
                    }
                }
            }
            _ => {}
        }
    }
}

fn set_all_masks_ones(model: &mut Model) {
    for layer in model.layers_mut() {
        match layer {
            Layer::Dense(d) => d.mask = Tensor::filled(d.weight.shape(), 1.0),
            Layer::Conv2d(c) => c.mask = Tensor::filled(c.weight.shape(), 1.0),
            _ => {}
        }
    }
}

/// Project rates onto the global keep budget: find the largest uniform shrink
/// of (a - a_min) such that the summed per-layer kept counts fit within
/// round(a_t * total). Monotone in the shrink factor, so a bisection is exact
/// enough after 64 steps.
fn enforce_budget(rates: &LayerRates, sizes: &[usize], a_t: f64) -> LayerRates {
    let total: usize = sizes.iter().sum();
    let budget = kept_count(a_t, total);
    let a = rates.keep_rates();
    let kept_at = |s: f64| -> usize {
        a.iter()
            .zip(sizes)
            .map(|(&ai, &n)| kept_count(rates.a_min + (ai - rates.a_min) * s, n))
            .sum()
    };
    if kept_at(1.0) <= budget {
        return rates.clone();
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if kept_at(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // lo is feasible unless even the floor violates the budget; then take it
    // anyway — the floor is the hardest constraint of the two.
    let s = if kept_at(lo) <= budget { lo } else { 0.0 };
    let r = a
        .iter()
        .map(|&ai| logit_for(rates.a_min + (ai - rates.a_min) * s, rates.a_min))
        .collect();
    LayerRates {
        a_min: rates.a_min,
        r,
    }
}

/// Per-layer outcome of a pruning run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerPruneStat {
    pub layer: usize,
    pub keep_rate: f64,
    pub kept: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PruneReport {
    pub metric: String,
    pub layers: Vec<LayerPruneStat>,
    pub global_sparsity: f64,
    pub compression_target: f64,
}

impl PruneReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!(self)
    }
}

fn report_for(model: &Model, metric: Metric, c_r: f64) -> PruneReport {
    let layers = model
        .prunable_layers()
        .into_iter()
        .map(|li| {
            let mask = model.layers()[li].mask().expect("prunable layer has a mask");
            let kept = mask.data().iter().filter(|&&m| m != 0.0).count();
            LayerPruneStat {
                layer: li,
                keep_rate: kept as f64 / mask.len() as f64,
                kept,
                total: mask.len(),
            }
        })
        .collect();
    PruneReport {
        metric: metric.as_str().to_string(),
        layers,
        global_sparsity: global_sparsity(model),
        compression_target: c_r,
    }
}

/// Straight-through sensitivity of the adversarial loss to each layer's keep
/// rate: the marginal kept weights (lowest-scored two percent, at least one)
/// contribute their first-order loss share g_j * w_j, scaled by how many
/// weights one unit of keep rate admits.
fn rate_loss_gradient(
    model: &Model,
    scores: &ImportanceScores,
    rates: &LayerRates,
    adv: &Batch,
) -> Result<Vec<f64>> {
    let out = backward(model, adv, LossKind::CrossEntropy, false)?;
    let a = rates.keep_rates();
    let mut grads = Vec::with_capacity(rates.len());
    let mut pi = 0;
    for (li, entry) in scores.layers.iter().enumerate() {
        let Some(s) = entry else { continue };
        let n = s.len();
        let kept = kept_count(a[pi], n).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            s.data()[i]
                .partial_cmp(&s.data()[j])
                .expect("scores are finite")
                .then(i.cmp(&j))
        });
        let band = ((n as f64 * 0.02).ceil() as usize).clamp(1, kept);
        let w = model.layers()[li]
            .weight()
            .expect("prunable layer has weights");
        let g = out.grads.layers[li]
            .weight
            .as_ref()
            .expect("prunable layer has a weight gradient");
        // Marginal kept weights sit right after the pruned prefix in
        // prune-priority order.
        let mut sens = 0.0;
        for &idx in &order[n - kept..n - kept + band] {
            sens += g.data()[idx] * w.data()[idx];
        }
        grads.push(n as f64 * sens / band as f64);
        pi += 1;
    }
    Ok(grads)
}

/// HARP-style adversarial pruning: alternate score refresh, rate update,
/// budget projection, masking, and adversarial fine-tuning; then run the
/// configured final fine-tune and freeze masked weights to zero.
pub fn adversarial_prune(
    model: &Model,
    metric: Metric,
    data: &Batch,
    cfg: &PruneConfig,
) -> Result<(Model, PruneReport)> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::EmptyInput("pruning dataset is empty".into()));
    }
    let c_r = cfg.sub_model_compression;
    let mut model = model.clone();

    if c_r == 0.0 {
        set_all_masks_ones(&mut model);
        let report = report_for(&model, metric, c_r);
        return Ok((model, report));
    }

    let a_t = 1.0 - c_r;
    let prunable = model.prunable_layers();
    let sizes: Vec<usize> = prunable
        .iter()
        .map(|&li| model.layers()[li].weight().unwrap().len())
        .collect();
    let mut rates = LayerRates::uniform(a_t, cfg.a_min, prunable.len())?;
    let seed = cfg.fine_tune.seed;

    // A fixed slice of the pruning data serves as the scoring batch each
    // round; it is attacked so the scores reflect adversarial behavior.
    let score_idx: Vec<usize> = (0..data.len().min(256)).collect();
    let score_clean = data.select(&score_idx)?;

    for round in 0..cfg.prune_epochs {
        let mut atk = cfg.fine_tune.attack.clone();
        atk.seed = rng::derive(seed, "prune-score", round as u64);
        let adv_inputs = attacks::pgd_attack(&model, &score_clean, &atk)?;
        let adv = Batch::new(adv_inputs, score_clean.labels.clone())?;
        let scores = compute_scores(&model, metric, &adv)?;

        if cfg.rate_mode == RateMode::Learned {
            let loss_grad = rate_loss_gradient(&model, &scores, &rates, &adv)?;
            let total: usize = sizes.iter().sum();
            let a = rates.keep_rates();
            let planned: f64 = a.iter().zip(&sizes).map(|(&ai, &n)| ai * n as f64).sum();
            let over_budget = planned / (a_t * total as f64) - 1.0 > 0.0;
            for (pi, r) in rates.r.iter_mut().enumerate() {
                let mut dl_da = loss_grad[pi];
                if over_budget {
                    dl_da += cfg.phi * sizes[pi] as f64 / (a_t * total as f64);
                }
                let sig = sigmoid(*r);
                let da_dr = (1.0 - rates.a_min) * sig * (1.0 - sig);
                *r = (*r - cfg.rate_lr * dl_da * da_dr).clamp(-RATE_CLAMP, RATE_CLAMP);
            }
        }

        let enforced = enforce_budget(&rates, &sizes, a_t);
        let masks = make_mask(&scores, &enforced)?;
        for (li, mask) in masks.into_iter().enumerate() {
            if let Some(m) = mask {
                model.layers_mut()[li].set_mask(m)?;
            }
        }

        if cfg.fine_tune.epochs > 0 {
            let mut round_cfg = cfg.fine_tune.clone();
            round_cfg.epochs = 1;
            round_cfg.seed = rng::derive(seed, "prune-round-ft", round as u64);
            let (tuned, _) = adversarial_train(&model, data, &round_cfg)?;
            model = tuned;
        }
    }

    if cfg.fine_tune.epochs > 0 {
        let mut ft = cfg.fine_tune.clone();
        ft.seed = rng::derive(seed, "prune-final-ft", 0);
        let (tuned, _) = adversarial_train(&model, data, &ft)?;
        model = tuned;
    }

    apply_masks(&mut model);
    let kept_fraction = 1.0 - global_sparsity(&model);
    if kept_fraction > a_t + 0.005 {
        return Err(Error::InvalidConfig(format!(
            "pruning missed its budget: kept fraction {kept_fraction:.4} vs target {a_t:.4}"
        )));
    }
    let report = report_for(&model, metric, c_r);
    Ok((model, report))
}

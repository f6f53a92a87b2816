//! The composite ensemble training loss and the joint training loop.
//!
//! The total is `ensemble_term + omega * misclass_term + gamma * compact_term`:
//!
//! * **ensemble_term** — the sum of member cross-entropies, plus `alpha`
//!   times the Shannon entropy of the averaged prediction, plus `beta` times
//!   a determinant diversity score: per example, the non-true-class slices
//!   of the member predictions are L2-normalized into the columns of a
//!   matrix `A`, and the score is `det(A^T A)` — the squared volume those
//!   prediction directions span, 0 when any two members align.
//! * **misclass_term** — per misclassified example (under the average
//!   combiner), `-log(clamp(1 - C * m, log_clamp_eps, 1))` where `m` is the
//!   largest probability any member assigns to any class. Because every
//!   member's top probability is at least `1/C`, the argument `1 - C * m`
//!   is never positive and the clamp always saturates: the term reduces to
//!   a constant penalty per misclassified example with an exactly-zero
//!   gradient. It is kept in this literal clamped form deliberately; the
//!   gradient path below only activates in the (unreachable) open region.
//! * **compact_term** — `lambda1` times the members' effective-weight L1
//!   norms plus `lambda2` times an activation term: the exact count of
//!   active relu units is reported as a metric (`act_nonzero`), while the
//!   value and gradients use the L1 norm of the (nonnegative) relu outputs
//!   as its differentiable surrogate.
//!
//! Any term weight set to 0 skips that term's gradient code entirely, so a
//! disabled term contributes exactly zero — not merely a small float — to
//! the parameter gradients.

use serde::{Deserialize, Serialize};

use crate::advtrain::{shuffled_batches, TrainConfig};
use crate::attacks::pgd_attack_ensemble;
use crate::ensemble::linalg::{adjugate, det};
use crate::error::{Error, Result};
use crate::netcore::{
    backprop_from_logits, cross_entropy_from_trace, forward_trace, prob_grad_to_logit_grad,
    sgd_step, update_running_stats, Batch, Gradients, Model, Tensor, Trace,
};
use crate::rng;

/// Weights and knobs of the composite loss, plus the team-selection
/// threshold that shares this config in the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EedLossConfig {
    /// Weight of the averaged-prediction entropy inside the ensemble term.
    pub alpha: f64,
    /// Weight of the determinant diversity score inside the ensemble term.
    pub beta: f64,
    /// Weight of the misclassification penalty.
    pub omega: f64,
    /// Weight of the compactness term.
    pub gamma_loss: f64,
    /// Weight of the effective-weight L1 norm inside the compactness term.
    pub lambda1: f64,
    /// Weight of the activation term inside the compactness term.
    pub lambda2: f64,
    /// Minimum robust diversity a team must reach during selection.
    pub rd_threshold: f64,
    /// Lower clamp for the misclassification log argument.
    pub log_clamp_eps: f64,
}

impl Default for EedLossConfig {
    fn default() -> Self {
        EedLossConfig {
            alpha: 0.5,
            beta: 0.1,
            omega: 10.0,
            gamma_loss: 4.0,
            lambda1: 0.7,
            lambda2: 0.25,
            rd_threshold: 0.7,
            log_clamp_eps: 1e-7,
        }
    }
}

impl EedLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("omega", self.omega),
            ("gamma_loss", self.gamma_loss),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.rd_threshold) {
            return Err(Error::InvalidConfig(format!(
                "rd_threshold must lie in [0, 1], got {}",
                self.rd_threshold
            )));
        }
        if !(self.log_clamp_eps > 0.0 && self.log_clamp_eps < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "log_clamp_eps must lie in (0, 1), got {}",
                self.log_clamp_eps
            )));
        }
        Ok(())
    }
}

/// Every term of one loss evaluation. Raw values are stored unweighted;
/// `ensemble_term`, `compact_term`, and `total` fold the weights in, so
/// `total = ensemble_term + omega * misclass_term + gamma_loss * compact_term`
/// holds by construction and is asserted by tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EedBreakdown {
    /// Sum over members of mean cross-entropy.
    pub ce: f64,
    /// Shannon entropy of the averaged prediction (batch mean, raw).
    pub entropy: f64,
    /// Determinant diversity score (batch mean, raw).
    pub diversity: f64,
    /// `ce + alpha * entropy + beta * diversity`.
    pub ensemble_term: f64,
    /// Clamped-log misclassification penalty (batch mean, raw).
    pub misclass_term: f64,
    /// Sum over members of effective-weight L1 norms (raw).
    pub weight_l1: f64,
    /// Activation-L1 surrogate, summed over members (batch mean, raw).
    pub act_l1: f64,
    /// Exact mean count of active relu units per example, summed over
    /// members. Reported as a metric only; `act_l1` carries the gradients.
    pub act_nonzero: f64,
    /// `lambda1 * weight_l1 + lambda2 * act_l1`.
    pub compact_term: f64,
    pub total: f64,
}

impl EedBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("ce", self.ce),
            ("entropy", self.entropy),
            ("diversity", self.diversity),
            ("misclass_term", self.misclass_term),
            ("weight_l1", self.weight_l1),
            ("act_l1", self.act_l1),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Field-wise mean of per-batch breakdowns, for epoch records.
pub fn mean_breakdown(parts: &[EedBreakdown]) -> EedBreakdown {
    let n = parts.len().max(1) as f64;
    let mut acc = EedBreakdown {
        ce: 0.0,
        entropy: 0.0,
        diversity: 0.0,
        ensemble_term: 0.0,
        misclass_term: 0.0,
        weight_l1: 0.0,
        act_l1: 0.0,
        act_nonzero: 0.0,
        compact_term: 0.0,
        total: 0.0,
    };
    for p in parts {
        acc.ce += p.ce;
        acc.entropy += p.entropy;
        acc.diversity += p.diversity;
        acc.ensemble_term += p.ensemble_term;
        acc.misclass_term += p.misclass_term;
        acc.weight_l1 += p.weight_l1;
        acc.act_l1 += p.act_l1;
        acc.act_nonzero += p.act_nonzero;
        acc.compact_term += p.compact_term;
        acc.total += p.total;
    }
    acc.ce /= n;
    acc.entropy /= n;
    acc.diversity /= n;
    acc.ensemble_term /= n;
    acc.misclass_term /= n;
    acc.weight_l1 /= n;
    acc.act_l1 /= n;
    acc.act_nonzero /= n;
    acc.compact_term /= n;
    acc.total /= n;
    acc
}

/// Loss terms for one batch, without gradients (inference-mode forward).
pub fn eed_loss(models: &[Model], batch: &Batch, cfg: &EedLossConfig) -> Result<EedBreakdown> {
    eed_backward(models, batch, cfg, false).map(|(bd, _, _)| bd)
}

/// Loss terms plus per-member parameter gradients and forward traces for
/// one batch. `training` selects batch versus running statistics in
/// batchnorm layers; the returned traces let the caller fold the batch
/// statistics into the running averages after the step.
pub fn eed_backward(
    models: &[Model],
    batch: &Batch,
    cfg: &EedLossConfig,
    training: bool,
) -> Result<(EedBreakdown, Vec<Gradients>, Vec<Trace>)> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::EmptyInput("loss needs at least one model".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss needs a non-empty batch".into()));
    }
    let c = models[0].num_classes();
    for m in &models[1..] {
        if m.num_classes() != c {
            return Err(Error::shape("eed members", c, m.num_classes()));
        }
    }
    let s_team = models.len();
    let bsz = batch.len();

    let mut traces = Vec::with_capacity(s_team);
    for m in models {
        traces.push(forward_trace(m, &batch.inputs, training)?);
    }

    // Member cross-entropies and their logit gradients.
    let mut ce = 0.0;
    let mut logit_grads: Vec<Vec<f64>> = Vec::with_capacity(s_team);
    for tr in &traces {
        ce += cross_entropy_from_trace(tr, &batch.labels)?;
        let mut lg = vec![0.0; bsz * c];
        for (j, &y) in batch.labels.iter().enumerate() {
            for k in 0..c {
                let p = tr.output.data()[j * c + k];
                let target = if k == y { 1.0 } else { 0.0 };
                lg[j * c + k] = (p - target) / bsz as f64;
            }
        }
        logit_grads.push(lg);
    }

    // Probability-space gradients accumulate here and convert to logit
    // space once per member at the end.
    let need_prob_grads = cfg.alpha > 0.0 || cfg.beta > 0.0 || cfg.omega > 0.0;
    let mut dprobs: Vec<Vec<f64>> = vec![vec![0.0; bsz * c]; if need_prob_grads { s_team } else { 0 }];

    // Averaged prediction.
    let mut avg = vec![0.0; bsz * c];
    for tr in &traces {
        for (a, &p) in avg.iter_mut().zip(tr.output.data()) {
            *a += p;
        }
    }
    let inv_s = 1.0 / s_team as f64;
    for a in &mut avg {
        *a *= inv_s;
    }

    // Entropy of the averaged prediction.
    let mut entropy = 0.0;
    for j in 0..bsz {
        for k in 0..c {
            let p = avg[j * c + k];
            if p > 0.0 {
                entropy -= p * p.max(1e-12).ln();
            }
        }
    }
    entropy /= bsz as f64;
    if cfg.alpha > 0.0 {
        let scale = cfg.alpha * inv_s / bsz as f64;
        for dp in &mut dprobs {
            for (slot, &p) in dp.iter_mut().zip(&avg) {
                // d(-p ln p)/dp = -(ln p + 1), clamped where p underflows.
                *slot += scale * -(p.max(1e-12).ln() + 1.0);
            }
        }
    }

    // Determinant diversity over normalized non-true-class columns.
    let mut diversity = 0.0;
    let dim = c - 1;
    for j in 0..bsz {
        let y = batch.labels[j];
        // Column i holds member i's prediction with class y removed,
        // L2-normalized. Zero-norm columns (all mass on y) stay zero.
        let mut a_mat = vec![0.0; dim * s_team]; // row-major (dim x s_team)
        let mut norms = vec![0.0; s_team];
        for (i, tr) in traces.iter().enumerate() {
            let row = &tr.output.data()[j * c..(j + 1) * c];
            let mut t = 0;
            let mut sq = 0.0;
            for (k, &p) in row.iter().enumerate() {
                if k != y {
                    a_mat[t * s_team + i] = p;
                    sq += p * p;
                    t += 1;
                }
            }
            let norm = sq.sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                for t in 0..dim {
                    a_mat[t * s_team + i] /= norm;
                }
            }
        }
        // Gram matrix G = A^T A.
        let mut g = vec![0.0; s_team * s_team];
        for p in 0..s_team {
            for q in 0..s_team {
                let mut dot = 0.0;
                for t in 0..dim {
                    dot += a_mat[t * s_team + p] * a_mat[t * s_team + q];
                }
                g[p * s_team + q] = dot;
            }
        }
        let d_val = det(&g, s_team);
        diversity += d_val;

        if cfg.beta > 0.0 {
            // d det(A^T A) / dA = 2 A adj(G), valid at rank deficiency
            // where the inverse-based form det(G) G^{-1} breaks down.
            let adj = adjugate(&g, s_team);
            let scale = cfg.beta / bsz as f64;
            for i in 0..s_team {
                if norms[i] == 0.0 {
                    continue;
                }
                // Column i of 2 A adj(G).
                let mut ddet_du = vec![0.0; dim];
                for (t, slot) in ddet_du.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..s_team {
                        acc += a_mat[t * s_team + k] * adj[k * s_team + i];
                    }
                    *slot = 2.0 * acc;
                }
                // Through the normalization u = v / |v|:
                // dv = (du - u (u . du)) / |v|.
                let u_dot: f64 = (0..dim)
                    .map(|t| a_mat[t * s_team + i] * ddet_du[t])
                    .sum();
                let dp = &mut dprobs[i];
                let mut t = 0;
                for k in 0..c {
                    if k == y {
                        continue;
                    }
                    let dv = (ddet_du[t] - a_mat[t * s_team + i] * u_dot) / norms[i];
                    dp[j * c + k] += scale * dv;
                    t += 1;
                }
            }
        }
    }
    diversity /= bsz as f64;

    // Misclassification penalty: active only where the averaged prediction
    // is wrong; see the module docs for why the clamp always saturates.
    let mut misclass = 0.0;
    for j in 0..bsz {
        let y = batch.labels[j];
        let row = &avg[j * c..(j + 1) * c];
        let mut top = 0;
        for k in 1..c {
            if row[k] > row[top] {
                top = k;
            }
        }
        if top == y {
            continue;
        }
        // Largest probability any member assigns to any class, and where.
        let (mut max_p, mut max_at) = (f64::NEG_INFINITY, (0usize, 0usize));
        for (i, tr) in traces.iter().enumerate() {
            let mrow = &tr.output.data()[j * c..(j + 1) * c];
            for (k, &p) in mrow.iter().enumerate() {
                if p > max_p {
                    max_p = p;
                    max_at = (i, k);
                }
            }
        }
        let arg = 1.0 - c as f64 * max_p;
        let clamped = arg.clamp(cfg.log_clamp_eps, 1.0);
        misclass -= clamped.ln();
        if cfg.omega > 0.0 && arg > cfg.log_clamp_eps && arg < 1.0 {
            let (i, k) = max_at;
            dprobs[i][j * c + k] += cfg.omega * c as f64 / clamped / bsz as f64;
        }
    }
    misclass /= bsz as f64;

    // Compactness: effective-weight L1 plus the activation terms.
    let mut weight_l1 = 0.0;
    for m in models {
        for li in m.prunable_layers() {
            weight_l1 += m.layers()[li]
                .effective_weight()
                .expect("prunable layers carry weights")
                .l1();
        }
    }
    let mut act_l1 = 0.0;
    let mut act_nonzero = 0.0;
    for tr in &traces {
        act_l1 += tr.relu_act_sum / bsz as f64;
        act_nonzero += tr.relu_act_nonzero as f64 / bsz as f64;
    }

    let ensemble_term = ce + cfg.alpha * entropy + cfg.beta * diversity;
    let compact_term = cfg.lambda1 * weight_l1 + cfg.lambda2 * act_l1;
    let breakdown = EedBreakdown {
        ce,
        entropy,
        diversity,
        ensemble_term,
        misclass_term: misclass,
        weight_l1,
        act_l1,
        act_nonzero,
        compact_term,
        total: ensemble_term + cfg.omega * misclass + cfg.gamma_loss * compact_term,
    };
    breakdown.check_finite()?;

    // One backward sweep per member from the combined logit gradient. The
    // activation surrogate enters as a constant added at relu outputs; the
    // weight-L1 gradient is sign(w) on kept weights, exactly zero on
    // masked ones.
    let relu_coeff = cfg.gamma_loss * cfg.lambda2 / bsz as f64;
    let mut all_grads = Vec::with_capacity(s_team);
    for (i, (m, tr)) in models.iter().zip(&traces).enumerate() {
        let mut lg = std::mem::take(&mut logit_grads[i]);
        if need_prob_grads {
            let dprob = Tensor::from_vec(&[bsz, c], std::mem::take(&mut dprobs[i]))?;
            let extra = prob_grad_to_logit_grad(&tr.output, &dprob)?;
            for (slot, &v) in lg.iter_mut().zip(extra.data()) {
                *slot += v;
            }
        }
        let lg = Tensor::from_vec(&[bsz, c], lg)?;
        let (mut grads, _) = backprop_from_logits(m, tr, &lg, relu_coeff)?;
        if cfg.gamma_loss > 0.0 && cfg.lambda1 > 0.0 {
            let scale = cfg.gamma_loss * cfg.lambda1;
            for li in m.prunable_layers() {
                let w_eff = m.layers()[li]
                    .effective_weight()
                    .expect("prunable layers carry weights");
                let gw = grads.layers[li]
                    .weight
                    .as_mut()
                    .expect("prunable layers produce weight gradients");
                for (slot, &w) in gw.data_mut().iter_mut().zip(w_eff.data()) {
                    *slot += scale * sign(w);
                }
            }
        }
        all_grads.push(grads);
    }
    Ok((breakdown, all_grads, traces))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One epoch of the joint training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EedEpochRecord {
    pub epoch: usize,
    /// Batch-mean of every loss term over the epoch.
    pub mean: EedBreakdown,
}

/// Joint adversarial training of a selected team.
///
/// Each batch is attacked against the averaged team prediction, then every
/// member takes one SGD step on the composite loss. Pruning masks are
/// preserved: masked weights receive exactly zero gradient from both the
/// backward sweep and the L1 term. Batchnorm running statistics update per
/// member after each step.
pub fn train_ensemble(
    models: &[Model],
    data: &Batch,
    cfg: &EedLossConfig,
    tc: &TrainConfig,
) -> Result<(Vec<Model>, Vec<EedEpochRecord>)> {
    cfg.validate()?;
    tc.validate()?;
    if models.is_empty() {
        return Err(Error::EmptyInput("cannot train an empty team".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("cannot train on an empty dataset".into()));
    }
    let mut team = models.to_vec();
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let epoch_seed = rng::derive(tc.seed, "eed-atk-epoch", epoch as u64);
        let mut parts = Vec::new();
        for (bi, idxs) in shuffled_batches(data.len(), tc.batch_size, tc.seed, epoch)
            .iter()
            .enumerate()
        {
            let clean = data.select(idxs)?;
            let mut atk = tc.attack.clone();
            atk.seed = rng::derive(epoch_seed, "eed-atk-batch", bi as u64);
            let adv_inputs = pgd_attack_ensemble(&team, &clean, &atk)?;
            let adv = Batch::new(adv_inputs, clean.labels.clone())?;
            let (bd, grads, traces) =
                eed_backward(&team, &adv, cfg, true).map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        Error::NonFinite(format!("{msg} (epoch {epoch}, batch {bi})"))
                    }
                    other => other,
                })?;
            for (m, g) in team.iter_mut().zip(&grads) {
                sgd_step(m, g, lr)?;
            }
            for (m, tr) in team.iter_mut().zip(&traces) {
                update_running_stats(m, &tr.bn_stats, tc.bn_momentum)?;
            }
            parts.push(bd);
        }
        history.push(EedEpochRecord {
            epoch,
            mean: mean_breakdown(&parts),
        });
    }
    Ok((team, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackConfig;
    use crate::netcore::fd::{central_diff, grad_close, has_relu_kink};
    use crate::netcore::{backward, forward, init_model, ArchSpec, LayerSpec, LossKind};
    use crate::rng;
    use rand::Rng;

    fn arch(inputs: usize, hidden: usize, classes: usize) -> ArchSpec {
        ArchSpec {
            input_shape: vec![inputs],
            layers: vec![
                LayerSpec::Dense { out: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { out: classes },
                LayerSpec::Softmax,
            ],
            num_classes: classes,
        }
    }

    fn random_batch(inputs: usize, classes: usize, n: usize, seed: u64) -> Batch {
        let mut r = rng::stream(seed);
        let x: Vec<f64> = (0..n * inputs).map(|_| r.gen_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        Batch::new(Tensor::from_vec(&[n, inputs], x).unwrap(), labels).unwrap()
    }

    /// Team + batch where finite differencing is trustworthy: no relu
    /// activation sits near its kink and no weight sits near the L1 kink
    /// at zero.
    fn clean_team(n_members: usize, seed0: u64) -> (Vec<Model>, Batch) {
        let a = arch(3, 5, 3);
        'seeds: for seed in seed0.. {
            let batch = random_batch(3, 3, 4, rng::derive(seed, "batch", 0));
            let mut team = Vec::new();
            for i in 0..n_members {
                let m = init_model(&a, rng::derive(seed, "member", i as u64)).unwrap();
                if has_relu_kink(&m, &batch, false, 1e-3).unwrap() {
                    continue 'seeds;
                }
                let min_w = m
                    .layers()
                    .iter()
                    .filter_map(|l| l.weight())
                    .flat_map(|w| w.data().iter().map(|v| v.abs()))
                    .fold(f64::INFINITY, f64::min);
                if min_w < 1e-3 {
                    continue 'seeds;
                }
                team.push(m);
            }
            return (team, batch);
        }
        unreachable!()
    }

    #[test]
    fn single_member_with_all_weights_zero_reduces_to_cross_entropy() {
        let a = arch(4, 6, 3);
        let m = init_model(&a, 7).unwrap();
        let batch = random_batch(4, 3, 8, 99);
        let cfg = EedLossConfig {
            alpha: 0.0,
            beta: 0.0,
            omega: 0.0,
            gamma_loss: 0.0,
            ..EedLossConfig::default()
        };
        let bd = eed_loss(std::slice::from_ref(&m), &batch, &cfg).unwrap();
        let trace = forward_trace(&m, &batch.inputs, false).unwrap();
        let ce = cross_entropy_from_trace(&trace, &batch.labels).unwrap();
        assert!((bd.total - ce).abs() < 1e-12, "{} vs {ce}", bd.total);
        assert_eq!(bd.total, bd.ce);
    }

    #[test]
    fn breakdown_terms_sum_to_total() {
        let (team, batch) = clean_team(3, 40);
        let cfg = EedLossConfig::default();
        let bd = eed_loss(&team, &batch, &cfg).unwrap();
        let recomposed =
            bd.ensemble_term + cfg.omega * bd.misclass_term + cfg.gamma_loss * bd.compact_term;
        assert!((bd.total - recomposed).abs() < 1e-10);
        let ens = bd.ce + cfg.alpha * bd.entropy + cfg.beta * bd.diversity;
        assert!((bd.ensemble_term - ens).abs() < 1e-10);
        let compact = cfg.lambda1 * bd.weight_l1 + cfg.lambda2 * bd.act_l1;
        assert!((bd.compact_term - compact).abs() < 1e-10);
    }

    #[test]
    fn correctly_classified_batch_has_zero_misclass_term() {
        // Label every example with the model's own prediction so the
        // combined prediction is always "correct".
        let a = arch(2, 4, 2);
        let m = init_model(&a, 3).unwrap();
        let batch0 = random_batch(2, 2, 6, 5);
        let probs = forward(&m, &batch0.inputs, false).unwrap();
        let labels: Vec<usize> = (0..batch0.len()).map(|i| probs.argmax_row(i)).collect();
        let batch = Batch::new(batch0.inputs.clone(), labels).unwrap();
        let bd = eed_loss(std::slice::from_ref(&m), &batch, &EedLossConfig::default()).unwrap();
        assert_eq!(bd.misclass_term, 0.0);
        // Flip every label: now every example is misclassified and each
        // contributes exactly -ln(log_clamp_eps).
        let flipped: Vec<usize> = batch.labels.iter().map(|&y| 1 - y).collect();
        let wrong = Batch::new(batch.inputs.clone(), flipped).unwrap();
        let bd2 = eed_loss(std::slice::from_ref(&m), &wrong, &EedLossConfig::default()).unwrap();
        assert!((bd2.misclass_term - -(1e-7f64).ln()).abs() < 1e-9);
        // And the misclass term still contributes no gradient (the clamp
        // saturates for any probability vector).
        let (_, g_on, _) = eed_backward(
            std::slice::from_ref(&m),
            &wrong,
            &EedLossConfig {
                alpha: 0.0,
                beta: 0.0,
                omega: 10.0,
                gamma_loss: 0.0,
                ..EedLossConfig::default()
            },
            false,
        )
        .unwrap();
        let (_, g_off, _) = eed_backward(
            std::slice::from_ref(&m),
            &wrong,
            &EedLossConfig {
                alpha: 0.0,
                beta: 0.0,
                omega: 0.0,
                gamma_loss: 0.0,
                ..EedLossConfig::default()
            },
            false,
        )
        .unwrap();
        for loc in m.param_locs() {
            assert_eq!(g_on[0].get(loc), g_off[0].get(loc));
        }
    }

    #[test]
    fn zero_weights_give_zero_weight_l1() {
        let a = arch(2, 3, 2);
        let mut m = init_model(&a, 1).unwrap();
        for loc in m.param_locs() {
            if matches!(loc.kind, crate::netcore::ParamKind::Weight) {
                m.set_param(loc, 0.0).unwrap();
            }
        }
        let batch = random_batch(2, 2, 4, 8);
        let bd = eed_loss(std::slice::from_ref(&m), &batch, &EedLossConfig::default()).unwrap();
        assert_eq!(bd.weight_l1, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // omega is held at 0 here on purpose: the misclassification term is
        // piecewise constant (saturated clamp), so its true gradient is zero
        // but its *value* jumps when a probe flips the combined argmax,
        // which would poison the difference quotients.
        let cfg = EedLossConfig {
            alpha: 0.5,
            beta: 0.3,
            omega: 0.0,
            gamma_loss: 0.7,
            lambda1: 0.4,
            lambda2: 0.25,
            ..EedLossConfig::default()
        };
        let (team, batch) = clean_team(2, 300);
        let (_, grads, _) = eed_backward(&team, &batch, &cfg, false).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for mi in 0..team.len() {
            for loc in team[mi].param_locs() {
                let mut probe = team.clone();
                let x0 = probe[mi].get_param(loc).unwrap();
                let fd = central_diff(
                    |x| {
                        probe[mi].set_param(loc, x)?;
                        Ok(eed_loss(&probe, &batch, &cfg)?.total)
                    },
                    x0,
                    h,
                )
                .unwrap();
                let analytic = grads[mi].get(loc).unwrap();
                assert!(
                    grad_close(analytic, fd, 1e-4, 1e-7),
                    "member {mi} {loc:?}: analytic {analytic} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 40);
    }

    #[test]
    fn disabled_terms_contribute_exactly_zero_gradient() {
        let (team, batch) = clean_team(2, 600);
        let base = EedLossConfig {
            alpha: 0.5,
            beta: 0.2,
            omega: 0.0,
            gamma_loss: 0.0,
            ..EedLossConfig::default()
        };
        let (_, g_base, _) = eed_backward(&team, &batch, &base, false).unwrap();
        // gamma_loss = 0 must equal gamma_loss = 0 with the lambdas zeroed:
        // nothing may leak through the compactness path.
        let mut no_lambdas = base.clone();
        no_lambdas.lambda1 = 0.0;
        no_lambdas.lambda2 = 0.0;
        let (_, g_nl, _) = eed_backward(&team, &batch, &no_lambdas, false).unwrap();
        for mi in 0..team.len() {
            for loc in team[mi].param_locs() {
                assert_eq!(g_base[mi].get(loc), g_nl[mi].get(loc));
            }
        }
        // Turning gamma_loss on changes weight gradients (the L1 term is
        // live), and turning it back off restores them exactly.
        let mut with_gamma = base.clone();
        with_gamma.gamma_loss = 4.0;
        let (_, g_on, _) = eed_backward(&team, &batch, &with_gamma, false).unwrap();
        let mut differs = false;
        for mi in 0..team.len() {
            for loc in team[mi].param_locs() {
                if g_on[mi].get(loc) != g_base[mi].get(loc) {
                    differs = true;
                }
            }
        }
        assert!(differs, "gamma_loss > 0 must actually change gradients");
    }

    #[test]
    fn single_member_ce_only_matches_plain_backward() {
        let a = arch(3, 4, 3);
        let m = init_model(&a, 21).unwrap();
        let batch = random_batch(3, 3, 5, 31);
        let cfg = EedLossConfig {
            alpha: 0.0,
            beta: 0.0,
            omega: 0.0,
            gamma_loss: 0.0,
            ..EedLossConfig::default()
        };
        let (bd, grads, _) = eed_backward(std::slice::from_ref(&m), &batch, &cfg, false).unwrap();
        let plain = backward(&m, &batch, LossKind::CrossEntropy, false).unwrap();
        assert!((bd.total - plain.loss).abs() < 1e-12);
        for loc in m.param_locs() {
            let a = grads[0].get(loc).unwrap();
            let b = plain.grads.get(loc).unwrap();
            assert!((a - b).abs() < 1e-15, "{loc:?}: {a} vs {b}");
        }
    }

    #[test]
    fn diversity_is_zero_for_identical_members_and_positive_otherwise() {
        let a = arch(3, 5, 3);
        let m = init_model(&a, 77).unwrap();
        let batch = random_batch(3, 3, 6, 78);
        let cfg = EedLossConfig::default();
        // Identical members: normalized columns coincide, the Gram matrix
        // is singular, the determinant vanishes.
        let bd = eed_loss(&[m.clone(), m.clone()], &batch, &cfg).unwrap();
        assert!(bd.diversity.abs() < 1e-12);
        // Distinct members: generically independent directions.
        let m2 = init_model(&a, 78).unwrap();
        let bd2 = eed_loss(&[m, m2], &batch, &cfg).unwrap();
        assert!(bd2.diversity > 0.0);
        // Gram determinant of normalized columns is a squared volume in
        // [0, 1].
        assert!(bd2.diversity <= 1.0 + 1e-12);
    }

    #[test]
    fn entropy_term_matches_hand_computation_for_uniform_outputs() {
        // A model with all-zero weights and biases emits uniform
        // probabilities, so the averaged prediction is uniform and its
        // entropy is ln(C).
        let a = arch(2, 3, 4);
        let mut m = init_model(&a, 5).unwrap();
        for loc in m.param_locs() {
            m.set_param(loc, 0.0).unwrap();
        }
        let batch = random_batch(2, 4, 3, 9);
        let bd = eed_loss(std::slice::from_ref(&m), &batch, &EedLossConfig::default()).unwrap();
        assert!((bd.entropy - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_weights_stay_untouched_through_training() {
        let a = arch(2, 4, 2);
        let mut m1 = init_model(&a, 11).unwrap();
        let m2 = init_model(&a, 12).unwrap();
        // Mask half of the first member's first layer.
        let w_shape = m1.layers()[0].weight().unwrap().shape().to_vec();
        let half: Vec<f64> = (0..w_shape.iter().product::<usize>())
            .map(|i| if i % 2 == 0 { 0.0 } else { 1.0 })
            .collect();
        m1.layers_mut()[0]
            .set_mask(Tensor::from_vec(&w_shape, half).unwrap())
            .unwrap();
        crate::pruning::apply_masks(&mut m1);
        let frozen: Vec<f64> = m1.layers()[0].weight().unwrap().data().to_vec();

        let batch = random_batch(2, 2, 16, 13);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr_schedule: vec![(0, 0.1)],
            attack: AttackConfig::pgd(0.05, 3, 0),
            bn_momentum: 0.1,
            seed: 4,
        };
        let (trained, history) =
            train_ensemble(&[m1, m2], &batch, &EedLossConfig::default(), &tc).unwrap();
        assert_eq!(history.len(), 3);
        for (i, &w0) in frozen.iter().enumerate() {
            let w1 = trained[0].layers()[0].weight().unwrap().data()[i];
            if i % 2 == 0 {
                assert_eq!(w1, w0, "masked weight {i} moved");
                assert_eq!(w1, 0.0);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let a = arch(2, 4, 2);
        let team: Vec<Model> = (0..2).map(|i| init_model(&a, 50 + i).unwrap()).collect();
        let batch = random_batch(2, 2, 12, 51);
        let cfg = EedLossConfig::default();
        let mut tc = TrainConfig {
            epochs: 2,
            batch_size: 6,
            lr_schedule: vec![(0, 0.2)],
            attack: AttackConfig::pgd(0.03, 2, 0),
            bn_momentum: 0.1,
            seed: 9,
        };
        let (t1, h1) = train_ensemble(&team, &batch, &cfg, &tc).unwrap();
        let (t2, h2) = train_ensemble(&team, &batch, &cfg, &tc).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(h1.len(), h2.len());
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.mean.total, b.mean.total);
        }
        tc.epochs = 0;
        let (t0, h0) = train_ensemble(&team, &batch, &cfg, &tc).unwrap();
        assert_eq!(t0, team);
        assert!(h0.is_empty());
    }

    #[test]
    fn loss_decreases_under_training_on_separable_data() {
        // Two blobs; the composite loss (dominated by CE early on) should
        // drop over a short run.
        let mut r = rng::stream(61);
        let n = 60;
        let mut x = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { 0.3 } else { 0.7 };
            x.push((center + r.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0));
            x.push((center + r.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0));
            labels.push(c);
        }
        let batch = Batch::new(Tensor::from_vec(&[n, 2], x).unwrap(), labels).unwrap();
        let a = arch(2, 8, 2);
        let team: Vec<Model> = (0..2).map(|i| init_model(&a, 70 + i).unwrap()).collect();
        let cfg = EedLossConfig {
            // Light compactness pressure so CE dominates on this toy set.
            lambda1: 0.01,
            lambda2: 0.01,
            gamma_loss: 1.0,
            ..EedLossConfig::default()
        };
        let tc = TrainConfig {
            epochs: 8,
            batch_size: 20,
            lr_schedule: vec![(0, 0.5)],
            attack: AttackConfig::pgd(0.02, 3, 0),
            bn_momentum: 0.1,
            seed: 71,
        };
        let (_, history) = train_ensemble(&team, &batch, &cfg, &tc).unwrap();
        let first = history.first().unwrap().mean.ce;
        let last = history.last().unwrap().mean.ce;
        assert!(
            last < first,
            "member cross-entropy should fall: {first} -> {last}"
        );
    }
}

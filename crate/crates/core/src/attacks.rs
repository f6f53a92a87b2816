//! Bounded adversarial perturbations and failure-matrix construction.
//!
//! The only norm implemented is l-infinity. `pgd_attack` performs projected
//! gradient ascent on the cross-entropy of the attacked model and returns,
//! per example, the iterate with the highest loss among every point it
//! visited — including the unperturbed input. That choice gives two contracts
//! for free: the adversarial loss never falls below the clean loss, and
//! warm-starting a larger-budget attack from a smaller one can only raise the
//! loss further. Models are always evaluated in inference mode so that each
//! row of the batch perturbs independently of the others.

use rand::Rng;
use rayon::prelude::*;

use crate::netcore::{
    backprop_from_logits, cross_entropy_from_trace, forward_trace, prob_grad_to_logit_grad,
    Batch, Model, Tensor,
};
use crate::rng;
use crate::{Error, Result};

/// Settings for an l-infinity PGD run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// Perturbation budget, in input-scale units.
    pub epsilon: f64,
    /// Per-iteration step length.
    pub step_size: f64,
    /// Number of gradient steps.
    pub steps: usize,
    /// Start from a uniform draw inside the epsilon ball instead of the input.
    pub random_start: bool,
    /// Seed for the random start (ignored when `random_start` is off).
    pub seed: u64,
}

impl AttackConfig {
    /// PGD with the conventional budget split: `steps` iterations at
    /// 2.5 * epsilon / steps, randomly started.
    pub fn pgd(epsilon: f64, steps: usize, seed: u64) -> Self {
        AttackConfig {
            epsilon,
            step_size: if steps > 0 { 2.5 * epsilon / steps as f64 } else { epsilon },
            steps,
            random_start: true,
            seed,
        }
    }

    /// The single-step configuration `fgsm_attack` delegates to.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "attack epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps >= 1 && (!self.step_size.is_finite() || self.step_size <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "attack step_size must be > 0 when steps > 0, got {}",
                self.step_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("attack needs steps >= 1".into()));
        }
        Ok(())
    }
}

/// Binary record of which models are defeated on which samples. Entry
/// `rows[m][j] == 1` means model `m` misclassified the adversarial version
/// of sample `j` (each model attacked independently against itself).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FailureMatrix {
    pub rows: Vec<Vec<u8>>,
}

impl FailureMatrix {
    pub fn num_models(&self) -> usize {
        self.rows.len()
    }

    pub fn num_samples(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Failure rate of one model across the evaluation batch.
    pub fn model_failure_rate(&self, model: usize) -> f64 {
        let row = &self.rows[model];
        if row.is_empty() {
            return 0.0;
        }
        row.iter().map(|&v| v as u64).sum::<u64>() as f64 / row.len() as f64
    }

    /// CSV with a header of sample ids and one 0/1 row per model.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for j in 0..self.num_samples() {
            out.push_str(&format!(",s{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("m{i}"));
            for &v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn check_domain(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidConfig(
            "attack inputs must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Clamp `v` into the epsilon ball around `center` intersected with [0, 1].
fn project(v: f64, center: f64, eps: f64) -> f64 {
    v.max(center - eps).min(center + eps).clamp(0.0, 1.0)
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

/// Per-example cross-entropy and mean-loss input gradient at `x`, both for a
/// single model and for an average-combined team. Losses drive the
/// best-iterate bookkeeping; the gradient drives the step.
trait AttackTarget {
    fn losses_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)>;
}

struct SingleModel<'a>(&'a Model);

impl AttackTarget for SingleModel<'_> {
    fn losses_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let trace = forward_trace(self.0, x, false)?;
        let losses = per_example_ce(&trace.logits, labels)?;
        let batch = x.shape()[0] as f64;
        let probs = &trace.output;
        let classes = probs.shape()[1];
        let mut logit_grad = Tensor::zeros(probs.shape());
        for (i, &label) in labels.iter().enumerate() {
            for c in 0..classes {
                let p = probs.data()[i * classes + c];
                let y = if c == label { 1.0 } else { 0.0 };
                logit_grad.data_mut()[i * classes + c] = (p - y) / batch;
            }
        }
        let (_, input_grad) = backprop_from_logits(self.0, &trace, &logit_grad, 0.0)?;
        Ok((losses, input_grad))
    }
}

struct AveragedTeam<'a>(&'a [Model]);

impl AttackTarget for AveragedTeam<'_> {
    fn losses_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let traces = self
            .0
            .iter()
            .map(|m| forward_trace(m, x, false))
            .collect::<Result<Vec<_>>>()?;
        let n = x.shape()[0];
        let classes = traces[0].output.shape()[1];
        let team = self.0.len() as f64;
        let mut avg = Tensor::zeros(&[n, classes]);
        for t in &traces {
            avg.add_scaled(&t.output, 1.0 / team)?;
        }
        // Loss is the cross-entropy of the averaged probabilities; the tiny
        // floor keeps the log finite if some class is fully suppressed.
        let mut losses = Vec::with_capacity(n);
        let mut davg = Tensor::zeros(&[n, classes]);
        for (i, &label) in labels.iter().enumerate() {
            let p = avg.data()[i * classes + label].max(1e-12);
            losses.push(-p.ln());
            davg.data_mut()[i * classes + label] = -1.0 / (p * n as f64);
        }
        let mut grad = Tensor::zeros(x.shape());
        for (model, trace) in self.0.iter().zip(&traces) {
            let mut dprob = davg.clone();
            for v in dprob.data_mut() {
                *v /= team;
            }
            let logit_grad = prob_grad_to_logit_grad(&trace.output, &dprob)?;
            let (_, input_grad) = backprop_from_logits(model, trace, &logit_grad, 0.0)?;
            grad.add_scaled(&input_grad, 1.0)?;
        }
        Ok((losses, grad))
    }
}

fn per_example_ce(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let classes = logits.shape()[1];
    let mut out = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.push(lse - row[label]);
    }
    Ok(out)
}

/// The shared PGD loop. `start` overrides the initial iterate (used for
/// warm starts); it must already satisfy the ball and box constraints.
fn pgd_core(
    target: &dyn AttackTarget,
    batch: &Batch,
    cfg: &AttackConfig,
    start: Option<&Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_domain(&batch.inputs)?;
    let clean = &batch.inputs;
    let n = clean.shape()[0];
    let row = clean.len() / n;

    let mut cur = match start {
        Some(s) => {
            if s.shape() != clean.shape() {
                return Err(Error::shape(
                    "pgd warm start",
                    format!("{:?}", clean.shape()),
                    format!("{:?}", s.shape()),
                ));
            }
            for (a, b) in s.data().iter().zip(clean.data()) {
                if (a - b).abs() > cfg.epsilon + 1e-9 || !(0.0..=1.0).contains(a) {
                    return Err(Error::InvalidConfig(
                        "pgd warm start violates the ball/box constraints".into(),
                    ));
                }
            }
            s.clone()
        }
        None if cfg.random_start && cfg.epsilon > 0.0 => {
            let mut r = rng::stream(rng::derive(cfg.seed, "pgd-start", 0));
            let mut t = clean.clone();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                let noise = r.gen_range(-cfg.epsilon..=cfg.epsilon);
                *v = project(*v + noise, clean.data()[i], cfg.epsilon);
            }
            t
        }
        None => clean.clone(),
    };

    // Track the best (highest per-example loss) iterate seen, starting from
    // the clean point; ties go to the later candidate.
    let (mut best_loss, _) = target.losses_and_grad(clean, &batch.labels)?;
    let mut best = clean.clone();
    let consider = |x: &Tensor, losses: &[f64], best: &mut Tensor, best_loss: &mut [f64]| {
        for i in 0..n {
            if losses[i] >= best_loss[i] {
                best_loss[i] = losses[i];
                best.data_mut()[i * row..(i + 1) * row]
                    .copy_from_slice(&x.data()[i * row..(i + 1) * row]);
            }
        }
    };

    let (losses, mut grad) = target.losses_and_grad(&cur, &batch.labels)?;
    consider(&cur, &losses, &mut best, &mut best_loss);

    for _ in 0..cfg.steps {
        for i in 0..cur.len() {
            let stepped = cur.data()[i] + cfg.step_size * sign(grad.data()[i]);
            cur.data_mut()[i] = project(stepped, clean.data()[i], cfg.epsilon);
        }
        let (losses, g) = target.losses_and_grad(&cur, &batch.labels)?;
        consider(&cur, &losses, &mut best, &mut best_loss);
        grad = g;
    }
    Ok(best)
}

/// Projected gradient descent in the l-infinity ball around the batch inputs.
pub fn pgd_attack(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<Tensor> {
    model.check_inputs(&batch.inputs)?;
    pgd_core(&SingleModel(model), batch, cfg, None)
}

/// PGD continued from a previous solution (e.g. a smaller-budget attack).
pub fn pgd_attack_from(
    model: &Model,
    batch: &Batch,
    start: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    model.check_inputs(&batch.inputs)?;
    pgd_core(&SingleModel(model), batch, cfg, Some(start))
}

/// PGD against the average-combined prediction of a whole team.
pub fn pgd_attack_ensemble(models: &[Model], batch: &Batch, cfg: &AttackConfig) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::EmptyInput("ensemble attack needs >= 1 model".into()));
    }
    models[0].check_inputs(&batch.inputs)?;
    pgd_core(&AveragedTeam(models), batch, cfg, None)
}

/// Single-step sign-gradient attack; definitionally PGD with one step of
/// length epsilon and no random start.
pub fn fgsm_attack(model: &Model, batch: &Batch, epsilon: f64) -> Result<Tensor> {
    pgd_attack(model, batch, &AttackConfig::fgsm(epsilon))
}

/// Accuracy of `model` on its own PGD-attacked batch.
pub fn robust_accuracy(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<f64> {
    let adv = pgd_attack(model, batch, cfg)?;
    let preds = crate::netcore::predict(model, &adv)?;
    let hits = preds
        .iter()
        .zip(&batch.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Accuracy of the average-combined team on a PGD attack aimed at the team.
pub fn ensemble_robust_accuracy(models: &[Model], batch: &Batch, cfg: &AttackConfig) -> Result<f64> {
    let adv = pgd_attack_ensemble(models, batch, cfg)?;
    let adv_batch = Batch::new(adv, batch.labels.clone())?;
    ensemble_clean_accuracy(models, &adv_batch)
}

/// Accuracy of the average-combined team on the batch as given.
pub fn ensemble_clean_accuracy(models: &[Model], batch: &Batch) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::EmptyInput("ensemble needs >= 1 model".into()));
    }
    let n = batch.len();
    let classes = models[0].num_classes();
    let mut avg = Tensor::zeros(&[n, classes]);
    for m in models {
        let p = crate::netcore::forward(m, &batch.inputs, false)?;
        avg.add_scaled(&p, 1.0 / models.len() as f64)?;
    }
    let mut hits = 0usize;
    for (i, &y) in batch.labels.iter().enumerate() {
        if avg.argmax_row(i) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Attack every model independently (same config, same seed) and record which
/// adversarial samples it then misclassifies. Rows are deterministic per
/// model, so a duplicated model yields identical rows.
pub fn build_failure_matrix(
    models: &[Model],
    eval_batch: &Batch,
    cfg: &AttackConfig,
) -> Result<FailureMatrix> {
    if models.is_empty() {
        return Err(Error::EmptyInput("failure matrix needs >= 1 model".into()));
    }
    if eval_batch.len() == 0 {
        return Err(Error::EmptyInput("failure matrix needs a non-empty batch".into()));
    }
    let rows = models
        .par_iter()
        .map(|model| -> Result<Vec<u8>> {
            let adv = pgd_attack(model, eval_batch, cfg)?;
            let preds = crate::netcore::predict(model, &adv)?;
            Ok(preds
                .iter()
                .zip(&eval_batch.labels)
                .map(|(p, y)| u8::from(p != y))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FailureMatrix { rows })
}

/// Convenience wrapper: probabilities of the averaged team on raw inputs.
pub fn average_probs(models: &[Model], inputs: &Tensor) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::EmptyInput("average_probs needs >= 1 model".into()));
    }
    let first = crate::netcore::forward(&models[0], inputs, false)?;
    let mut avg = first;
    for m in &models[1..] {
        let p = crate::netcore::forward(m, inputs, false)?;
        avg.add_scaled(&p, 1.0)?;
    }
    let scale = 1.0 / models.len() as f64;
    for v in avg.data_mut() {
        *v *= scale;
    }
    Ok(avg)
}

/// Per-example cross-entropy losses of a model on a batch; used by training
/// loops that need adversarial-loss reporting without a second forward pass.
pub fn batch_ce_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let trace = forward_trace(model, &batch.inputs, false)?;
    cross_entropy_from_trace(&trace, &batch.labels)
}

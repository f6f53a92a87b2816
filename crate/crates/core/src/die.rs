//! Dynamic inference: evaluate team members one at a time and stop early.
//!
//! After each member the running mean prediction is updated; how much it
//! moved (KL divergence from the previous mean) and how peaked it is (squared
//! max probability) fuse through a sigmoid into a stopping probability `q_t`.
//! Treating the q's as a sequence of Bernoulli stopping trials, the
//! likelihood of stopping exactly at step `t` is
//! `z_t = q_t * prod_{i<t}(1 - q_i)`, and the best stop is the argmax of z.
//!
//! Exhaustive mode evaluates every member and takes that argmax directly.
//! Online mode stops at the first local maximum of `z_t`, confirmed by one
//! lookahead evaluation: the first `t` with `z_t >= z_{t+1}`. The two agree
//! whenever `q` is non-increasing (then `z` is too, and both rules pick its
//! first peak); a rising `q` tail can hide a later, larger peak from the
//! online rule — see the tests for a pinned counterexample.
//!
//! `q_1` is fixed to 0 (the divergence needs two means to compare), so a
//! multi-member team never stops before its second member; a single-member
//! team trivially stops at 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{forward, Batch, Model, Tensor};

/// Additive smoothing inside the divergence logs, keeping one-hot
/// predictions finite.
pub const KL_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DieMode {
    /// Stop at the first confirmed local maximum of the stopping
    /// likelihood; costs one lookahead evaluation past the stop.
    Online,
    /// Evaluate every member, then stop at the exact argmax.
    Exhaustive,
}

impl DieMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DieMode::Online => "online",
            DieMode::Exhaustive => "exhaustive",
        }
    }

    pub fn parse(s: &str) -> Result<DieMode> {
        match s {
            "online" => Ok(DieMode::Online),
            "exhaustive" => Ok(DieMode::Exhaustive),
            other => Err(Error::InvalidConfig(format!(
                "unknown die mode {other:?}; expected \"online\" or \"exhaustive\""
            ))),
        }
    }
}

/// Stopping-rule knobs. `a` scales the divergence (instability should delay
/// stopping, so it is positive by default) and `b` scales the squared
/// confidence (certainty should encourage stopping; negative default pulls
/// the sigmoid down while predictions stay uncertain).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DieConfig {
    pub a: f64,
    pub b: f64,
    /// Hard cap on evaluated members; must not exceed the team size.
    pub max_models: usize,
    pub mode: DieMode,
}

impl DieConfig {
    /// Documented default calibration for a team of the given size.
    pub fn for_team(team_size: usize) -> DieConfig {
        DieConfig {
            a: 5.0,
            b: -1.0,
            max_models: team_size,
            mode: DieMode::Online,
        }
    }

    pub fn validate_for(&self, team_size: usize) -> Result<()> {
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "die coefficients must be finite, got a = {}, b = {}",
                self.a, self.b
            )));
        }
        if self.max_models == 0 || self.max_models > team_size {
            return Err(Error::InvalidConfig(format!(
                "max_models must lie in [1, team size {team_size}], got {}",
                self.max_models
            )));
        }
        Ok(())
    }
}

/// Arithmetic mean of the given predictions (all congruent shapes).
pub fn running_mean_prediction(predictions: &[Tensor]) -> Result<Tensor> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::EmptyInput("running mean needs >= 1 prediction".into()))?;
    let mut acc = first.data().to_vec();
    for p in &predictions[1..] {
        if p.shape() != first.shape() {
            return Err(Error::shape(
                "running_mean_prediction",
                format!("{:?}", first.shape()),
                format!("{:?}", p.shape()),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / predictions.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Tensor::from_vec(first.shape(), acc)
}

fn kl_smoothed(curr: &[f64], prev: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&c, &p) in curr.iter().zip(prev) {
        if c != 0.0 {
            d += c * ((c + KL_SMOOTHING) / (p + KL_SMOOTHING)).ln();
        }
    }
    // Smoothing can push an almost-zero divergence a hair below zero.
    d.max(0.0)
}

/// How far the running mean moved: KL(curr || prev), smoothed and clamped
/// to stay nonnegative.
pub fn uncertainty(prev: &Tensor, curr: &Tensor) -> Result<f64> {
    if prev.shape() != curr.shape() {
        return Err(Error::shape(
            "uncertainty",
            format!("{:?}", prev.shape()),
            format!("{:?}", curr.shape()),
        ));
    }
    Ok(kl_smoothed(curr.data(), prev.data()))
}

/// Squared maximum probability of the current mean prediction.
pub fn confidence(curr: &Tensor) -> f64 {
    let m = curr.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m * m
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fuses divergence and confidence into a stopping probability.
pub fn stop_probability(uncertainty: f64, confidence: f64, cfg: &DieConfig) -> Result<f64> {
    if !uncertainty.is_finite() || !confidence.is_finite() {
        return Err(Error::NonFinite(format!(
            "stop_probability inputs ({uncertainty}, {confidence})"
        )));
    }
    Ok(sigmoid(cfg.a * uncertainty + cfg.b * confidence))
}

fn check_q(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::EmptyInput("stopping schedule is empty".into()));
    }
    for (i, &v) in q.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidConfig(format!(
                "stopping probability q[{i}] = {v} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Stop-at-t likelihoods `z_t = q_t * prod_{i<t}(1 - q_i)`, computed with a
/// left-to-right running survival product.
pub fn stopping_likelihoods(q: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(q.len());
    let mut survival = 1.0;
    for (i, &qt) in q.iter().enumerate() {
        if i > 0 {
            survival *= 1.0 - q[i - 1];
        }
        z.push(qt * survival);
    }
    z
}

/// 1-based argmax of the stopping likelihood; ties break to the earliest
/// step. Equals brute-force enumeration of every prefix by construction.
pub fn optimal_stop(q: &[f64]) -> Result<usize> {
    check_q(q)?;
    let z = stopping_likelihoods(q);
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Online rule on a full schedule: the first `t` with `z_t >= z_{t+1}`
/// (first local maximum, one-step lookahead), or the horizon if `z` keeps
/// rising.
pub fn online_stop(q: &[f64]) -> Result<usize> {
    check_q(q)?;
    let z = stopping_likelihoods(q);
    for t in 1..z.len() {
        if z[t - 1] >= z[t] {
            return Ok(t);
        }
    }
    Ok(z.len())
}

/// Per-input record of the dynamic-inference walk. In online mode the
/// vectors cover the evaluated prefix (stop + 1 lookahead, horizon
/// permitting); in exhaustive mode they cover every step up to the cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DieTrace {
    /// Running mean prediction after each evaluated member.
    pub means: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub z: Vec<f64>,
    /// Chosen stop, 1-based.
    pub stop: usize,
}

impl DieTrace {
    /// Export record: stopping schedule, chosen step, the served prediction,
    /// and (when the label is known) whether it was correct.
    pub fn export(&self, correct: Option<bool>) -> serde_json::Value {
        serde_json::json!({
            "q": self.q,
            "z": self.z,
            "stop": self.stop,
            "prediction": self.means[self.stop - 1],
            "correct": correct,
        })
    }
}

/// Runs the team on one input (a single-row tensor) and serves the running
/// mean at the chosen stop.
pub fn die_predict(
    models: &[Model],
    input: &Tensor,
    cfg: &DieConfig,
) -> Result<(Vec<f64>, DieTrace)> {
    if models.is_empty() {
        return Err(Error::EmptyInput("dynamic inference needs >= 1 model".into()));
    }
    cfg.validate_for(models.len())?;
    if input.rank() < 2 || input.shape()[0] != 1 {
        return Err(Error::shape(
            "die_predict",
            "single-row input (leading dimension 1)",
            format!("{:?}", input.shape()),
        ));
    }
    let horizon = cfg.max_models;

    let member_probs = |t: usize| -> Result<Vec<f64>> {
        Ok(forward(&models[t], input, false)?.data().to_vec())
    };

    let first = member_probs(0)?;
    if horizon == 1 {
        // A team of one (or a cap of one) stops immediately.
        let trace = DieTrace {
            means: vec![first.clone()],
            q: vec![1.0],
            z: vec![1.0],
            stop: 1,
        };
        return Ok((first, trace));
    }

    let mut means = vec![first];
    let mut q = vec![0.0];
    let mut survival = 1.0;
    let mut z = vec![0.0];
    let mut stop = None;

    for t in 2..=horizon {
        let p = member_probs(t - 1)?;
        let prev = means.last().expect("at least one mean recorded").clone();
        let mean: Vec<f64> = prev
            .iter()
            .zip(&p)
            .map(|(&m, &v)| m + (v - m) / t as f64)
            .collect();
        let u = kl_smoothed(&mean, &prev);
        let conf = {
            let m = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m * m
        };
        let qt = stop_probability(u, conf, cfg)?;
        survival *= 1.0 - q[t - 2];
        let zt = qt * survival;
        means.push(mean);
        q.push(qt);
        z.push(zt);

        if cfg.mode == DieMode::Online && z[t - 2] >= zt {
            stop = Some(t - 1);
            break;
        }
    }

    let stop = match (cfg.mode, stop) {
        (DieMode::Online, Some(t)) => t,
        // z kept rising: the horizon is the first (and only) peak seen.
        (DieMode::Online, None) => z.len(),
        (DieMode::Exhaustive, _) => optimal_stop(&q)?,
    };
    let prediction = means[stop - 1].clone();
    let trace = DieTrace { means, q, z, stop };
    Ok((prediction, trace))
}

/// Dataset-level dynamic inference summary.
#[derive(Debug, Clone)]
pub struct DieEvalSummary {
    pub mean_stop: f64,
    pub accuracy: f64,
    pub stops: Vec<usize>,
    pub traces: Vec<DieTrace>,
}

impl DieEvalSummary {
    /// Model-evaluation speedup implied by early stopping.
    pub fn speedup(&self, team_size: usize) -> f64 {
        team_size as f64 / self.mean_stop
    }
}

/// Runs dynamic inference over a whole batch (rows independent, parallel).
pub fn die_eval(models: &[Model], batch: &Batch, cfg: &DieConfig) -> Result<DieEvalSummary> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("die_eval needs a non-empty batch".into()));
    }
    let rows: Vec<Result<(usize, bool, DieTrace)>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let x = batch.inputs.select_rows(&[i])?;
            let (pred, trace) = die_predict(models, &x, cfg)?;
            let mut top = 0;
            for k in 1..pred.len() {
                if pred[k] > pred[top] {
                    top = k;
                }
            }
            Ok((trace.stop, top == batch.labels[i], trace))
        })
        .collect();
    let mut stops = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());
    let mut correct = 0usize;
    for row in rows {
        let (stop, ok, trace) = row?;
        stops.push(stop);
        traces.push(trace);
        if ok {
            correct += 1;
        }
    }
    Ok(DieEvalSummary {
        mean_stop: stops.iter().sum::<usize>() as f64 / stops.len() as f64,
        accuracy: correct as f64 / batch.len() as f64,
        stops,
        traces,
    })
}

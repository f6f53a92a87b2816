//! Sub-model pool construction, team enumeration, robust-diversity scoring,
//! team selection, and prediction combiners.
//!
//! The pool is built by pruning one copy of an adversarially trained base
//! model per (importance metric, data subset) pair. A failure matrix over a
//! held-out attack run then scores candidate teams: robust diversity rewards
//! teams whose members fail on *different* samples. Selection prefers the
//! smallest team clearing a diversity threshold; the chosen team is trained
//! jointly (see [`loss`]) and served by the dynamic-inference layer.

pub mod linalg;
pub mod loss;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::FailureMatrix;
use crate::error::{Error, Result};
use crate::importance::Metric;
use crate::netcore::{Batch, Model, Tensor};
use crate::pruning::{adversarial_prune, PruneConfig, PruneReport};
use crate::rng;

pub use loss::{
    eed_backward, eed_loss, train_ensemble, EedBreakdown, EedEpochRecord, EedLossConfig,
};

/// Exhaustive team enumeration is used while `2^N - (N + 1)` stays at or
/// under this many candidates; larger pools fall back to greedy forward
/// selection.
pub const DEFAULT_MAX_ENUMERATION: usize = 100_000;

/// How the sub-model pool is carved out of the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolSpec {
    /// Number of data subsets per metric: one shared part plus
    /// `num_subsets - 1` private parts. With `num_subsets == 1` every
    /// sub-model sees the full dataset.
    pub num_subsets: usize,
    /// Fraction of the data shared by every sub-model of a metric.
    pub shared_fraction: f64,
    /// Importance metrics, one pool slice per metric.
    pub metrics: Vec<Metric>,
    pub seed: u64,
}

impl PoolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_subsets == 0 {
            return Err(Error::InvalidConfig("num_subsets must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::InvalidConfig(format!(
                "shared_fraction must lie in [0, 1], got {}",
                self.shared_fraction
            )));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidConfig(
                "pool needs at least one importance metric".into(),
            ));
        }
        for (i, m) in self.metrics.iter().enumerate() {
            if self.metrics[..i].contains(m) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate metric {} in pool spec",
                    m.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Number of sub-models this pool layout produces.
    pub fn pool_size(&self) -> usize {
        if self.num_subsets == 1 {
            self.metrics.len()
        } else {
            self.metrics.len() * (self.num_subsets - 1)
        }
    }
}

/// One pruned sub-model plus the provenance needed for reports.
#[derive(Debug, Clone)]
pub struct PoolMember {
    pub model: Model,
    pub metric: Metric,
    /// Private-part index within the metric's partition.
    pub part: usize,
    /// Sample indices (into the pool dataset) this member trained on.
    pub subset: Vec<usize>,
    pub prune_report: PruneReport,
}

/// Deterministic data subsets for one metric: each subset is the shared
/// slice plus one private part. The permutation is re-seeded per metric
/// index, so switching metrics reshuffles which samples are shared.
///
/// With `num_subsets == 1` the single subset is the full dataset in its
/// natural order.
pub fn partition_subsets(n: usize, spec: &PoolSpec, metric_index: usize) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("cannot partition an empty dataset".into()));
    }
    if spec.num_subsets == 1 {
        return Ok(vec![(0..n).collect()]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive(spec.seed, "pool-partition", metric_index as u64));
    order.shuffle(&mut r);

    let shared_count = ((spec.shared_fraction * n as f64).round() as usize).min(n);
    let parts = spec.num_subsets - 1;
    let rem = n - shared_count;
    if rem < parts {
        return Err(Error::DataTooSmall(format!(
            "{n} samples cannot cover a shared slice of {shared_count} plus {parts} non-empty \
             private parts"
        )));
    }
    let shared = &order[..shared_count];
    let base = rem / parts;
    let extra = rem % parts;
    let mut subsets = Vec::with_capacity(parts);
    let mut cursor = shared_count;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        let mut subset: Vec<usize> = shared.to_vec();
        subset.extend_from_slice(&order[cursor..cursor + size]);
        cursor += size;
        subsets.push(subset);
    }
    Ok(subsets)
}

/// Prunes one copy of the base model per (metric, subset) pair.
///
/// Sub-models prune independently and in parallel; results keep pool order
/// (metrics in spec order, private parts in index order). Each member's
/// fine-tuning seed is re-derived from the pool seed so the members' attack
/// and shuffle streams differ even when the prune config is shared.
pub fn build_pool(
    base: &Model,
    data: &Batch,
    spec: &PoolSpec,
    prune_cfg: &PruneConfig,
) -> Result<Vec<PoolMember>> {
    spec.validate()?;
    prune_cfg.validate()?;
    let mut jobs = Vec::with_capacity(spec.pool_size());
    for (mi, &metric) in spec.metrics.iter().enumerate() {
        let subsets = partition_subsets(data.len(), spec, mi)?;
        for (part, subset) in subsets.into_iter().enumerate() {
            jobs.push((jobs.len(), metric, part, subset));
        }
    }
    let members: Vec<Result<PoolMember>> = jobs
        .into_par_iter()
        .map(|(idx, metric, part, subset)| {
            let slice = data.select(&subset)?;
            let mut cfg = prune_cfg.clone();
            cfg.fine_tune.seed = rng::derive(spec.seed, "pool-ft", idx as u64);
            let (model, prune_report) = adversarial_prune(base, metric, &slice, &cfg)?;
            Ok(PoolMember {
                model,
                metric,
                part,
                subset,
                prune_report,
            })
        })
        .collect();
    members.into_iter().collect()
}

/// A candidate ensemble: sorted member indices into the pool, with the
/// robust-diversity score once computed (`None` until scored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTeam {
    pub ids: Vec<usize>,
    pub rd: Option<f64>,
}

impl EnsembleTeam {
    pub fn new(mut ids: Vec<usize>) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::InvalidConfig(
                "a team needs at least two distinct members".into(),
            ));
        }
        Ok(EnsembleTeam { ids, rd: None })
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }
}

/// All candidate teams for a pool of `n` sub-models.
///
/// When the `2^n - (n + 1)` subsets of size >= 2 fit within
/// `max_enumeration`, every one is returned (in ascending bitmask order, so
/// pairs come before larger supersets of the same low indices). Larger pools
/// use greedy forward selection instead: start from the highest-diversity
/// pair and grow one member at a time, keeping each intermediate team as a
/// candidate — this needs the failure matrix, so `fm` is required on that
/// path.
pub fn enumerate_teams(
    n: usize,
    max_enumeration: usize,
    fm: Option<&FailureMatrix>,
) -> Result<Vec<EnsembleTeam>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "team enumeration needs a pool of >= 2 models, got {n}"
        )));
    }
    let exhaustive_count = if n < usize::BITS as usize {
        (1usize << n) - (n + 1)
    } else {
        usize::MAX
    };
    if exhaustive_count <= max_enumeration {
        let mut teams = Vec::with_capacity(exhaustive_count);
        for mask in 3usize..(1usize << n) {
            if mask.count_ones() < 2 {
                continue;
            }
            let ids: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            teams.push(EnsembleTeam { ids, rd: None });
        }
        return Ok(teams);
    }
    let fm = fm.ok_or_else(|| {
        Error::InvalidConfig(format!(
            "pool of {n} exceeds the enumeration budget ({exhaustive_count} > \
             {max_enumeration}); greedy selection needs a failure matrix"
        ))
    })?;
    greedy_teams(n, fm)
}

/// Greedy forward selection: the candidate list is the chain of teams built
/// by starting from the best pair (highest RD, ties to the lexicographically
/// smallest ids) and repeatedly adding the member that maximizes the grown
/// team's RD (ties to the smallest id).
fn greedy_teams(n: usize, fm: &FailureMatrix) -> Result<Vec<EnsembleTeam>> {
    if fm.num_models() < n {
        return Err(Error::InvalidConfig(format!(
            "failure matrix covers {} models but the pool has {n}",
            fm.num_models()
        )));
    }
    let mut best_pair: Option<(f64, Vec<usize>)> = None;
    for i in 0..n {
        for j in i + 1..n {
            let rd = robust_diversity(&[i, j], fm)?.value;
            if best_pair.as_ref().is_none_or(|(b, _)| rd > *b) {
                best_pair = Some((rd, vec![i, j]));
            }
        }
    }
    let (rd, mut current) = best_pair.expect("n >= 2 guarantees at least one pair");
    let mut teams = vec![EnsembleTeam {
        ids: current.clone(),
        rd: Some(rd),
    }];
    while current.len() < n {
        let mut best: Option<(f64, usize)> = None;
        for k in 0..n {
            if current.contains(&k) {
                continue;
            }
            let mut ids = current.clone();
            ids.push(k);
            ids.sort_unstable();
            let rd = robust_diversity(&ids, fm)?.value;
            if best.as_ref().is_none_or(|(b, _)| rd > *b) {
                best = Some((rd, k));
            }
        }
        let (rd, k) = best.expect("loop runs only while members remain");
        current.push(k);
        current.sort_unstable();
        teams.push(EnsembleTeam {
            ids: current.clone(),
            rd: Some(rd),
        });
    }
    Ok(teams)
}

/// Robust diversity of a team, with the no-failure degenerate case flagged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdScore {
    /// The diversity value; 1.0 when no member ever failed.
    pub value: f64,
    /// False when the team recorded zero failures, making the underlying
    /// ratio undefined; such teams count as maximally diverse.
    pub defined: bool,
}

/// Robust diversity from per-model failure indicators.
///
/// With `X_j` the number of team members failing on sample `j` and `S` the
/// team size, the probability that one uniformly drawn (member, sample)
/// pair fails is `p1 = sum_j X_j / (S * J)`, and the probability that two
/// distinct members drawn on the same sample both fail is
/// `p2 = sum_j X_j (X_j - 1) / (S (S-1) J)`. Diversity is `1 - p2 / p1`:
/// 1 when failures never coincide, 0 when members only fail together.
///
/// Counts aggregate as integers and divide once at the end, so the result
/// is bit-identical to direct enumeration of all draws.
pub fn robust_diversity(ids: &[usize], fm: &FailureMatrix) -> Result<RdScore> {
    let s = ids.len();
    if s < 2 {
        return Err(Error::InvalidConfig(
            "robust diversity needs a team of >= 2 members".into(),
        ));
    }
    for w in ids.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidConfig(
                "team ids must be sorted and unique".into(),
            ));
        }
    }
    if ids[s - 1] >= fm.num_models() {
        return Err(Error::InvalidConfig(format!(
            "team member {} outside failure matrix of {} models",
            ids[s - 1],
            fm.num_models()
        )));
    }
    let j_count = fm.num_samples();
    if j_count == 0 {
        return Err(Error::EmptyInput("failure matrix has no samples".into()));
    }
    let mut sum_x: u64 = 0;
    let mut sum_pairs: u64 = 0;
    for j in 0..j_count {
        let x = ids.iter().filter(|&&m| fm.rows[m][j] != 0).count() as u64;
        sum_x += x;
        if x > 1 {
            sum_pairs += x * (x - 1);
        }
    }
    if sum_x == 0 {
        return Ok(RdScore {
            value: 1.0,
            defined: false,
        });
    }
    let p_one = sum_x as f64 / (s * j_count) as f64;
    let p_two = sum_pairs as f64 / (s * (s - 1) * j_count) as f64;
    Ok(RdScore {
        value: 1.0 - p_two / p_one,
        defined: true,
    })
}

/// A team with everything selection needs to rank it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTeam {
    pub ids: Vec<usize>,
    pub rd: f64,
    /// True when the team recorded zero failures (RD reported as 1.0).
    pub no_failures: bool,
    /// Mean of the members' individual failure rates.
    pub mean_failure_rate: f64,
}

impl ScoredTeam {
    pub fn size(&self) -> usize {
        self.ids.len()
    }
}

/// Result of team selection, with enough detail to reconstruct the choice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub chosen: ScoredTeam,
    /// Every candidate, scored, in enumeration order.
    pub scored: Vec<ScoredTeam>,
    pub rd_threshold: f64,
    /// True when no team cleared the threshold and the global RD argmax was
    /// used instead.
    pub used_fallback: bool,
    /// Which rule separated the winner from the runner-up.
    pub tie_break: String,
}

impl SelectionOutcome {
    /// Full selection report for artifact output.
    pub fn report(&self) -> serde_json::Value {
        serde_json::json!({
            "rd_threshold": self.rd_threshold,
            "used_fallback": self.used_fallback,
            "tie_break": self.tie_break,
            "chosen": {
                "ids": self.chosen.ids,
                "size": self.chosen.size(),
                "rd": self.chosen.rd,
                "no_failures": self.chosen.no_failures,
                "mean_failure_rate": self.chosen.mean_failure_rate,
            },
            "teams": self.scored.iter().map(|t| serde_json::json!({
                "ids": t.ids,
                "size": t.size(),
                "rd": t.rd,
                "no_failures": t.no_failures,
                "mean_failure_rate": t.mean_failure_rate,
            })).collect::<Vec<_>>(),
        })
    }
}

fn score_team(ids: &[usize], fm: &FailureMatrix) -> Result<ScoredTeam> {
    let rd = robust_diversity(ids, fm)?;
    let mean_failure_rate = ids
        .iter()
        .map(|&m| fm.model_failure_rate(m))
        .sum::<f64>()
        / ids.len() as f64;
    Ok(ScoredTeam {
        ids: ids.to_vec(),
        rd: rd.value,
        no_failures: !rd.defined,
        mean_failure_rate,
    })
}

/// Ordering for teams that cleared the threshold: smallest first, then
/// highest RD, then lowest mean failure rate, then lexicographic ids.
fn eligible_order(a: &ScoredTeam, b: &ScoredTeam) -> std::cmp::Ordering {
    a.size()
        .cmp(&b.size())
        .then(b.rd.partial_cmp(&a.rd).expect("RD is always finite"))
        .then(
            a.mean_failure_rate
                .partial_cmp(&b.mean_failure_rate)
                .expect("failure rates are always finite"),
        )
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Fallback ordering when nothing clears the threshold: highest RD first,
/// then the same tie chain.
fn fallback_order(a: &ScoredTeam, b: &ScoredTeam) -> std::cmp::Ordering {
    b.rd
        .partial_cmp(&a.rd)
        .expect("RD is always finite")
        .then(a.size().cmp(&b.size()))
        .then(
            a.mean_failure_rate
                .partial_cmp(&b.mean_failure_rate)
                .expect("failure rates are always finite"),
        )
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Names the first field that separates the winner from the runner-up.
fn decided_by(winner: &ScoredTeam, runner_up: &ScoredTeam, keys: &[&str]) -> String {
    for &key in keys {
        let differs = match key {
            "size" => winner.size() != runner_up.size(),
            "rd" => winner.rd != runner_up.rd,
            "failure-rate" => winner.mean_failure_rate != runner_up.mean_failure_rate,
            _ => true,
        };
        if differs {
            return key.to_string();
        }
    }
    "lexicographic".to_string()
}

/// Picks the team to train: the smallest team whose robust diversity clears
/// `cfg.rd_threshold`, with ties broken by higher RD, then lower mean member
/// failure rate, then lexicographically smaller ids. When no team clears the
/// threshold the global RD argmax is returned instead (same tie chain after
/// RD) and the outcome is marked as a fallback.
pub fn select_team(
    teams: &[EnsembleTeam],
    fm: &FailureMatrix,
    cfg: &loss::EedLossConfig,
) -> Result<SelectionOutcome> {
    cfg.validate()?;
    if teams.is_empty() {
        return Err(Error::EmptyInput("no candidate teams to select from".into()));
    }
    let scored: Vec<ScoredTeam> = teams
        .par_iter()
        .map(|t| score_team(&t.ids, fm))
        .collect::<Result<_>>()?;

    let mut eligible: Vec<&ScoredTeam> = scored
        .iter()
        .filter(|t| t.rd >= cfg.rd_threshold)
        .collect();
    let (chosen, used_fallback, tie_break) = if eligible.is_empty() {
        let mut all: Vec<&ScoredTeam> = scored.iter().collect();
        all.sort_by(|a, b| fallback_order(a, b));
        let tb = if all.len() > 1 {
            decided_by(all[0], all[1], &["rd", "size", "failure-rate"])
        } else {
            "only-candidate".to_string()
        };
        (all[0].clone(), true, tb)
    } else {
        eligible.sort_by(|a, b| eligible_order(a, b));
        let tb = if eligible.len() > 1 {
            decided_by(eligible[0], eligible[1], &["size", "rd", "failure-rate"])
        } else {
            "only-candidate".to_string()
        };
        (eligible[0].clone(), false, tb)
    };
    Ok(SelectionOutcome {
        chosen,
        scored,
        rd_threshold: cfg.rd_threshold,
        used_fallback,
        tie_break,
    })
}

/// How member predictions merge into one distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combiner {
    Average,
    Max,
}

impl Combiner {
    pub fn as_str(&self) -> &'static str {
        match self {
            Combiner::Average => "average",
            Combiner::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Combiner> {
        match s {
            "average" => Ok(Combiner::Average),
            "max" => Ok(Combiner::Max),
            other => Err(Error::InvalidConfig(format!(
                "unknown combiner {other:?}; expected \"average\" or \"max\""
            ))),
        }
    }
}

/// Merges per-member probability tensors (rows = examples) into one.
///
/// Average is the arithmetic mean per class. Max takes the per-class
/// elementwise maximum and renormalizes each row to sum 1 (maxima of
/// distributions need not be a distribution).
pub fn combine(predictions: &[Tensor], mode: Combiner) -> Result<Tensor> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::EmptyInput("combine needs at least one prediction".into()))?;
    if first.rank() != 2 {
        return Err(Error::shape("combine", "rank-2 tensor", first.rank()));
    }
    for p in predictions {
        if p.shape() != first.shape() {
            return Err(Error::shape(
                "combine",
                format!("{:?}", first.shape()),
                format!("{:?}", p.shape()),
            ));
        }
    }
    let (b, c) = (first.shape()[0], first.shape()[1]);
    let mut out = first.data().to_vec();
    match mode {
        Combiner::Average => {
            for p in &predictions[1..] {
                for (o, &v) in out.iter_mut().zip(p.data()) {
                    *o += v;
                }
            }
            let inv = 1.0 / predictions.len() as f64;
            for o in &mut out {
                *o *= inv;
            }
        }
        Combiner::Max => {
            for p in &predictions[1..] {
                for (o, &v) in out.iter_mut().zip(p.data()) {
                    *o = o.max(v);
                }
            }
            for i in 0..b {
                let row = &mut out[i * c..(i + 1) * c];
                let sum: f64 = row.iter().sum();
                if sum <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "max combiner: row {i} sums to {sum}, cannot renormalize"
                    )));
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
    Tensor::from_vec(&[b, c], out)
}

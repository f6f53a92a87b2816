//! Result bookkeeping: the metrics report, its JSON/CSV serializations, and
//! the significant-digit rounding that keeps those files byte-stable.
//!
//! Everything that lands in `metrics.json` must be a pure function of
//! (config, seed), so wall-clock timings live in a separate `timings.json`
//! sidecar written by the pipeline instead of here.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

/// Rounds to 6 significant digits (the serialization precision for all
/// reported numbers).
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.5e}").parse().expect("formatted float")
}

/// Number formatting for the CSV: sig6-rounded, shortest decimal form.
pub fn fmt_sig6(x: f64) -> String {
    format!("{}", sig6(x))
}

/// Accuracy figures for one evaluated entity (the base model, one pool
/// member, the team, or the team under early stopping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRow {
    pub entity: String,
    pub clean: f64,
    /// Robust accuracy keyed by attack name, e.g. "fgsm", "pgd".
    pub robust: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamSummary {
    /// Pool indices of the selected members, ascending.
    pub pool_indices: Vec<usize>,
    /// Entity names of the selected members (parallel to `pool_indices`).
    pub members: Vec<String>,
    pub size: usize,
    /// Robust-diversity score of the selected team.
    pub rd: f64,
    /// False when no member ever failed, which pins `rd` to 1 by convention.
    pub rd_defined: bool,
    /// True when no team met the diversity threshold and the best-scoring
    /// one was taken instead.
    pub used_fallback: bool,
    /// Which selection rule decided the winner.
    pub tie_break: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DieSummary {
    pub mode: String,
    /// Mean number of members consulted per sample.
    pub mean_stop: f64,
    /// team size / mean_stop.
    pub speedup: f64,
}

/// The one summary artifact of a run. Serialized field order is fixed by
/// declaration order; maps are sorted; floats are sig6-rounded before
/// writing — together that makes `metrics.json` byte-stable across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub seed: u64,
    /// Attack names in evaluation order; every entity has a robust entry
    /// for each.
    pub attacks: Vec<String>,
    pub entities: Vec<EntityRow>,
    /// Fraction of prunable parameters masked off across the deployed team.
    pub global_sparsity: Option<f64>,
    pub team: Option<TeamSummary>,
    pub die: Option<DieSummary>,
}

impl MetricsReport {
    /// Copy with every float rounded to serialization precision.
    pub fn rounded(&self) -> MetricsReport {
        let mut out = self.clone();
        for row in &mut out.entities {
            row.clean = sig6(row.clean);
            for v in row.robust.values_mut() {
                *v = sig6(*v);
            }
        }
        if let Some(s) = &mut out.global_sparsity {
            *s = sig6(*s);
        }
        if let Some(t) = &mut out.team {
            t.rd = sig6(t.rd);
        }
        if let Some(d) = &mut out.die {
            d.mean_stop = sig6(d.mean_stop);
            d.speedup = sig6(d.speedup);
        }
        out
    }

    /// All accuracies and sparsities are fractions.
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(HarnessError::stage(
                    "report",
                    format!("{name} = {v} outside [0, 1]"),
                ))
            }
        };
        for row in &self.entities {
            check(&format!("{}.clean", row.entity), row.clean)?;
            for (attack, &v) in &row.robust {
                check(&format!("{}.{attack}", row.entity), v)?;
            }
        }
        if let Some(s) = self.global_sparsity {
            check("global_sparsity", s)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.rounded()).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per (entity, attack) pair plus a clean row per entity:
    /// `(#entities) * (#attacks + 1)` data rows under the header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("entity,attack,accuracy\n");
        for row in &self.entities {
            out.push_str(&format!("{},clean,{}\n", row.entity, fmt_sig6(row.clean)));
            for attack in &self.attacks {
                let v = row.robust.get(attack).copied().unwrap_or(f64::NAN);
                out.push_str(&format!("{},{attack},{}\n", row.entity, fmt_sig6(v)));
            }
        }
        out
    }
}

/// Writes `metrics.json` and `report.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    report.validate()?;
    let write = |name: &str, contents: &str| {
        std::fs::write(dir.join(name), contents).map_err(|e| {
            HarnessError::stage("report", format!("writing {}: {e}", dir.join(name).display()))
        })
    };
    write("metrics.json", &report.to_json())?;
    write("report.csv", &report.to_csv())
}

//! Stage orchestration around the library: pretrain → prune a pool → select
//! a team → train it jointly → evaluate (with and without early stopping) →
//! report.
//!
//! Every stage reads its inputs from the output directory and writes its
//! artifacts back there, so stages can run individually, a failed run keeps
//! everything completed so far, and a re-run is reproducible from
//! `config.resolved` alone. Stage budgets of zero switch a stage to
//! "load what's there" (or skip it entirely when nothing is there), which
//! is what makes evaluation-only runs over pre-supplied checkpoints work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use eed_core::advtrain::adversarial_train;
use eed_core::attacks::{
    build_failure_matrix, ensemble_clean_accuracy, pgd_attack_ensemble, robust_accuracy,
    AttackConfig,
};
use eed_core::die::die_eval;
use eed_core::ensemble::{
    build_pool, enumerate_teams, select_team, train_ensemble, DEFAULT_MAX_ENUMERATION,
};
use eed_core::netcore::checkpoint::{load_model_from_path, save_model_to_path};
use eed_core::netcore::{accuracy, init_model, Batch, Model};
use eed_core::pruning::PruneReport;
use eed_core::rng;

use crate::config::{AttackKind, ExperimentConfig};
use crate::data;
use crate::metrics::{emit_report, DieSummary, EntityRow, MetricsReport, TeamSummary};
use crate::{HarnessError, Result};

/// Samples used for the selection-time failure matrix; enough to separate
/// failure patterns without paying for a full-split attack per pool member.
const SELECT_FM_CAP: usize = 512;

/// Locations of every artifact inside one run's output directory.
pub struct Paths {
    out: PathBuf,
}

impl Paths {
    pub fn new(cfg: &ExperimentConfig) -> Paths {
        Paths {
            out: cfg.out.clone(),
        }
    }

    pub fn config_resolved(&self) -> PathBuf {
        self.out.join("config.resolved")
    }
    pub fn base_model(&self) -> PathBuf {
        self.out.join("base.model")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.out.join("pretrain.json")
    }
    pub fn pool_dir(&self) -> PathBuf {
        self.out.join("pool")
    }
    pub fn pool_manifest(&self) -> PathBuf {
        self.pool_dir().join("manifest.json")
    }
    pub fn pool_member(&self, index: usize) -> PathBuf {
        self.pool_dir().join(format!("member-{index:02}.model"))
    }
    pub fn selection(&self) -> PathBuf {
        self.out.join("selection.json")
    }
    pub fn team_dir(&self) -> PathBuf {
        self.out.join("team")
    }
    pub fn team_manifest(&self) -> PathBuf {
        self.team_dir().join("manifest.json")
    }
    pub fn team_member(&self, slot: usize) -> PathBuf {
        self.team_dir().join(format!("member-{slot}.model"))
    }
    pub fn eed_history(&self) -> PathBuf {
        self.out.join("eed-history.json")
    }
    pub fn eval(&self) -> PathBuf {
        self.out.join("eval.json")
    }
    pub fn die(&self) -> PathBuf {
        self.out.join("die.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.out.join("timings.json")
    }
}

fn write_json<T: Serialize>(stage: &str, path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::stage(stage, format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| HarnessError::stage(stage, format!("writing {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(stage: &str, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::stage(stage, format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::stage(stage, format!("parsing {}: {e}", path.display())))
}

/// Appends one stage duration to `timings.json`. Wall times are the one
/// deliberately non-reproducible artifact, which is why they are not part
/// of `metrics.json`.
fn record_timing(paths: &Paths, stage: &str, seconds: f64) {
    let mut timings: BTreeMap<String, f64> = std::fs::read_to_string(paths.timings())
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    timings.insert(stage.to_string(), seconds);
    if let Ok(mut text) = serde_json::to_string_pretty(&timings) {
        text.push('\n');
        let _ = std::fs::write(paths.timings(), text);
    }
}

fn timed<T>(paths: &Paths, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let value = f()?;
    record_timing(paths, stage, start.elapsed().as_secs_f64());
    Ok(value)
}

/// Creates the output directory and echoes the resolved config into it.
pub fn prepare_out(cfg: &ExperimentConfig) -> Result<Paths> {
    let paths = Paths::new(cfg);
    std::fs::create_dir_all(&paths.out)
        .map_err(|e| HarnessError::Config(format!("cannot create {}: {e}", paths.out.display())))?;
    std::fs::write(paths.config_resolved(), cfg.echo()).map_err(|e| {
        HarnessError::Config(format!(
            "cannot write {}: {e}",
            paths.config_resolved().display()
        ))
    })?;
    Ok(paths)
}

/// Loads (or generates) the train/eval batches for this config and seed.
fn load_splits(cfg: &ExperimentConfig, stage: &str) -> Result<(Batch, Batch)> {
    data::load_dataset(&cfg.data, cfg.seed)
        .map_err(|e| HarnessError::stage(stage, e))
}

fn class_count(train: &Batch, eval: &Batch) -> usize {
    train
        .labels
        .iter()
        .chain(eval.labels.iter())
        .max()
        .map_or(2, |&m| (m + 1).max(2))
}

// ---------------------------------------------------------------------------
// pretrain

pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let stage = "pretrain";
    let paths = prepare_out(cfg)?;
    let wrap = |e: eed_core::Error| HarnessError::stage(stage, e);
    let (train, eval) = load_splits(cfg, stage)?;

    let model = if cfg.pretrain.epochs == 0 && paths.base_model().exists() {
        // Budget zero with a pre-supplied checkpoint: leave it alone.
        return Ok(());
    } else {
        let arch = cfg
            .model
            .arch(train.inputs.shape()[1..].to_vec(), class_count(&train, &eval));
        let init = init_model(&arch, rng::derive(cfg.seed, "init", 0)).map_err(wrap)?;
        let (trained, history) =
            adversarial_train(&init, &train, &cfg.pretrain_config()).map_err(wrap)?;
        write_json(stage, &paths.pretrain_log(), &serde_json::json!({ "epochs": history }))?;
        trained
    };
    save_model_to_path(&model, paths.base_model()).map_err(wrap)
}

fn load_base(paths: &Paths, stage: &str) -> Result<Model> {
    if !paths.base_model().exists() {
        return Err(HarnessError::stage(
            stage,
            format!("{} missing; run pretrain first", paths.base_model().display()),
        ));
    }
    load_model_from_path(paths.base_model()).map_err(|e| HarnessError::stage(stage, e))
}

// ---------------------------------------------------------------------------
// prune-pool

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolEntry {
    pub index: usize,
    pub metric: String,
    pub part: usize,
    pub entity: String,
    pub file: String,
    pub subset_len: usize,
    pub prune_report: PruneReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolManifest {
    pub members: Vec<PoolEntry>,
}

pub fn run_prune_pool(cfg: &ExperimentConfig) -> Result<()> {
    let stage = "prune-pool";
    let paths = prepare_out(cfg)?;
    let wrap = |e: eed_core::Error| HarnessError::stage(stage, e);
    let (train, _) = load_splits(cfg, stage)?;
    let base = load_base(&paths, stage)?;

    let pool = build_pool(&base, &train, &cfg.pool_spec(), &cfg.prune_config()).map_err(wrap)?;
    std::fs::create_dir_all(paths.pool_dir())
        .map_err(|e| HarnessError::stage(stage, format!("creating pool dir: {e}")))?;
    let mut members = Vec::with_capacity(pool.len());
    for (index, member) in pool.iter().enumerate() {
        let file = format!("member-{index:02}.model");
        save_model_to_path(&member.model, paths.pool_member(index)).map_err(wrap)?;
        members.push(PoolEntry {
            index,
            metric: member.metric.as_str().to_string(),
            part: member.part,
            entity: format!("pool-{index:02}-{}-{}", member.metric.as_str(), member.part),
            file,
            subset_len: member.subset.len(),
            prune_report: member.prune_report.clone(),
        });
    }
    write_json(stage, &paths.pool_manifest(), &PoolManifest { members })
}

fn load_pool(paths: &Paths, stage: &str) -> Result<Option<(PoolManifest, Vec<Model>)>> {
    if !paths.pool_manifest().exists() {
        return Ok(None);
    }
    let manifest: PoolManifest = read_json(stage, &paths.pool_manifest())?;
    let mut models = Vec::with_capacity(manifest.members.len());
    for entry in &manifest.members {
        let path = paths.pool_dir().join(&entry.file);
        models.push(load_model_from_path(&path).map_err(|e| HarnessError::stage(stage, e))?);
    }
    Ok(Some((manifest, models)))
}

// ---------------------------------------------------------------------------
// select

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub chosen_ids: Vec<usize>,
    pub rd: f64,
    /// True when the chosen team never failed at all (RD pinned to 1).
    pub no_failures: bool,
    pub used_fallback: bool,
    pub tie_break: String,
    pub fm_samples: usize,
    /// Full per-candidate scoring detail.
    pub detail: serde_json::Value,
}

pub fn run_select(cfg: &ExperimentConfig) -> Result<()> {
    let stage = "select";
    let paths = prepare_out(cfg)?;
    let wrap = |e: eed_core::Error| HarnessError::stage(stage, e);
    let (train, _) = load_splits(cfg, stage)?;
    let (_, models) = load_pool(&paths, stage)?.ok_or_else(|| {
        HarnessError::stage(stage, "pool manifest missing; run prune-pool first")
    })?;

    // Failure patterns are probed on (a prefix of) the training split under
    // the evaluation threat model; the held-out split stays untouched until
    // evaluation.
    let cap = train.len().min(SELECT_FM_CAP);
    let probe = train
        .select(&(0..cap).collect::<Vec<_>>())
        .map_err(wrap)?;
    let attack = AttackConfig::pgd(
        cfg.eval_epsilon,
        cfg.eval_steps,
        rng::derive(cfg.seed, "select-fm", 0),
    );
    let fm = build_failure_matrix(&models, &probe, &attack).map_err(wrap)?;
    let teams = enumerate_teams(models.len(), DEFAULT_MAX_ENUMERATION, Some(&fm)).map_err(wrap)?;
    let outcome = select_team(&teams, &fm, &cfg.loss).map_err(wrap)?;

    let record = SelectionRecord {
        chosen_ids: outcome.chosen.ids.clone(),
        rd: outcome.chosen.rd,
        no_failures: outcome.chosen.no_failures,
        used_fallback: outcome.used_fallback,
        tie_break: outcome.tie_break.clone(),
        fm_samples: cap,
        detail: outcome.report(),
    };
    write_json(stage, &paths.selection(), &record)
}

// ---------------------------------------------------------------------------
// train-eed

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeamManifest {
    /// Pool indices of the members, ascending.
    pub ids: Vec<usize>,
    /// Pool entity names, parallel to `ids`.
    pub entities: Vec<String>,
    /// Checkpoint files inside the team directory, parallel to `ids`.
    pub files: Vec<String>,
    pub rd: f64,
    pub rd_defined: bool,
    pub used_fallback: bool,
    pub tie_break: String,
    pub trained_epochs: usize,
}

pub fn run_train_eed(cfg: &ExperimentConfig) -> Result<()> {
    let stage = "train-eed";
    let paths = prepare_out(cfg)?;
    let wrap = |e: eed_core::Error| HarnessError::stage(stage, e);
    let (train, _) = load_splits(cfg, stage)?;
    let (manifest, models) = load_pool(&paths, stage)?.ok_or_else(|| {
        HarnessError::stage(stage, "pool manifest missing; run prune-pool first")
    })?;
    if !paths.selection().exists() {
        return Err(HarnessError::stage(
            stage,
            "selection.json missing; run select first",
        ));
    }
    let selection: SelectionRecord = read_json(stage, &paths.selection())?;

    let mut team: Vec<Model> = Vec::with_capacity(selection.chosen_ids.len());
    let mut entities = Vec::new();
    for &id in &selection.chosen_ids {
        let entry = manifest.members.get(id).ok_or_else(|| {
            HarnessError::stage(stage, format!("selected pool index {id} not in manifest"))
        })?;
        team.push(models[id].clone());
        entities.push(entry.entity.clone());
    }

    let (trained, history) =
        train_ensemble(&team, &train, &cfg.loss, &cfg.eed_train_config()).map_err(wrap)?;
    std::fs::create_dir_all(paths.team_dir())
        .map_err(|e| HarnessError::stage(stage, format!("creating team dir: {e}")))?;
    let mut files = Vec::new();
    for (slot, model) in trained.iter().enumerate() {
        save_model_to_path(model, paths.team_member(slot)).map_err(wrap)?;
        files.push(format!("member-{slot}.model"));
    }
    write_json(stage, &paths.eed_history(), &serde_json::json!({ "epochs": history }))?;
    write_json(
        stage,
        &paths.team_manifest(),
        &TeamManifest {
            ids: selection.chosen_ids.clone(),
            entities,
            files,
            rd: selection.rd,
            rd_defined: !selection.no_failures,
            used_fallback: selection.used_fallback,
            tie_break: selection.tie_break.clone(),
            trained_epochs: cfg.eed.epochs,
        },
    )
}

fn load_team(paths: &Paths, stage: &str) -> Result<Option<(TeamManifest, Vec<Model>)>> {
    if !paths.team_manifest().exists() {
        return Ok(None);
    }
    let manifest: TeamManifest = read_json(stage, &paths.team_manifest())?;
    let mut models = Vec::with_capacity(manifest.files.len());
    for file in &manifest.files {
        let path = paths.team_dir().join(file);
        models.push(load_model_from_path(&path).map_err(|e| HarnessError::stage(stage, e))?);
    }
    Ok(Some((manifest, models)))
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub attacks: Vec<String>,
    pub entities: Vec<EntityRow>,
    /// Masked fraction of prunable parameters across the deployed team.
    pub global_sparsity: Option<f64>,
}

/// Fraction of prunable parameters masked off across a set of models.
pub fn team_sparsity(models: &[Model]) -> f64 {
    let total: usize = models.iter().map(|m| m.prunable_param_count()).sum();
    if total == 0 {
        return 0.0;
    }
    let kept: usize = models.iter().map(|m| m.kept_param_count()).sum();
    1.0 - kept as f64 / total as f64
}

fn eval_single(
    cfg: &ExperimentConfig,
    entity: &str,
    model: &Model,
    batch: &Batch,
) -> Result<EntityRow> {
    let wrap = |e: eed_core::Error| HarnessError::stage("eval", e);
    let mut robust = BTreeMap::new();
    for &kind in &cfg.eval_kinds {
        let acc = robust_accuracy(model, batch, &cfg.eval_attack(kind)).map_err(wrap)?;
        robust.insert(kind.as_str().to_string(), acc);
    }
    Ok(EntityRow {
        entity: entity.to_string(),
        clean: accuracy(model, batch).map_err(wrap)?,
        robust,
    })
}

/// Adversarial inputs against the average-combined team, one tensor per
/// evaluation attack. Deterministic, so eval and die-eval craft identical
/// batches without sharing files.
fn team_adversarial_batches(
    cfg: &ExperimentConfig,
    models: &[Model],
    batch: &Batch,
) -> Result<Vec<(AttackKind, Batch)>> {
    let wrap = |e: eed_core::Error| HarnessError::stage("eval", e);
    let mut out = Vec::new();
    for &kind in &cfg.eval_kinds {
        let adv = pgd_attack_ensemble(models, batch, &cfg.eval_attack(kind)).map_err(wrap)?;
        out.push((kind, Batch::new(adv, batch.labels.clone()).map_err(wrap)?));
    }
    Ok(out)
}

pub fn run_eval(cfg: &ExperimentConfig) -> Result<()> {
    let stage = "eval";
    let paths = prepare_out(cfg)?;
    let wrap = |e: eed_core::Error| HarnessError::stage(stage, e);
    let (_, eval) = load_splits(cfg, stage)?;
    let base = load_base(&paths, stage)?;

    let mut entities = vec![eval_single(cfg, "base", &base, &eval)?];

    if let Some((manifest, models)) = load_pool(&paths, stage)? {
        for (entry, model) in manifest.members.iter().zip(&models) {
            entities.push(eval_single(cfg, &entry.entity, model, &eval)?);
        }
    }

    let mut global_sparsity = None;
    if let Some((_, models)) = load_team(&paths, stage)? {
        let mut robust = BTreeMap::new();
        for (kind, adv_batch) in team_adversarial_batches(cfg, &models, &eval)? {
            let acc = ensemble_clean_accuracy(&models, &adv_batch).map_err(wrap)?;
            robust.insert(kind.as_str().to_string(), acc);
        }
        entities.push(EntityRow {
            entity: "team".into(),
            clean: ensemble_clean_accuracy(&models, &eval).map_err(wrap)?,
            robust,
        });
        global_sparsity = Some(team_sparsity(&models));
    }

    let record = EvalRecord {
        attacks: cfg.eval_kinds.iter().map(|k| k.as_str().to_string()).collect(),
        entities,
        global_sparsity,
    };
    write_json(stage, &paths.eval(), &record)
}

// ---------------------------------------------------------------------------
// die-eval

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DieStat {
    pub mean_stop: f64,
    pub accuracy: f64,
    pub speedup: f64,
    /// `stop_counts[t]` = samples that stopped after consulting t+1 members.
    pub stop_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DieRecord {
    pub mode: String,
    pub a: f64,
    pub b: f64,
    pub team_size: usize,
    /// Keyed by input kind: "clean" plus one entry per evaluation attack.
    pub per_input: BTreeMap<String, DieStat>,
}

pub fn run_die_eval(cfg: &ExperimentConfig) -> Result<()> {
    let stage = "die-eval";
    let paths = prepare_out(cfg)?;
    let wrap = |e: eed_core::Error| HarnessError::stage(stage, e);
    let (_, eval) = load_splits(cfg, stage)?;
    let (_, models) = load_team(&paths, stage)?.ok_or_else(|| {
        HarnessError::stage(stage, "team manifest missing; run train-eed first")
    })?;
    let die_cfg = cfg.die_config(models.len()).ok_or_else(|| {
        HarnessError::stage(stage, "die.mode = off; nothing to evaluate")
    })?;
    die_cfg.validate_for(models.len()).map_err(wrap)?;

    let stat = |batch: &Batch| -> Result<DieStat> {
        let summary = die_eval(&models, batch, &die_cfg).map_err(wrap)?;
        let mut stop_counts = vec![0usize; models.len()];
        for &s in &summary.stops {
            stop_counts[s - 1] += 1;
        }
        Ok(DieStat {
            mean_stop: summary.mean_stop,
            accuracy: summary.accuracy,
            speedup: summary.speedup(models.len()),
            stop_counts,
        })
    };

    let mut per_input = BTreeMap::new();
    per_input.insert("clean".to_string(), stat(&eval)?);
    for (kind, adv_batch) in team_adversarial_batches(cfg, &models, &eval)? {
        per_input.insert(kind.as_str().to_string(), stat(&adv_batch)?);
    }
    write_json(
        stage,
        &paths.die(),
        &DieRecord {
            mode: die_cfg.mode.as_str().to_string(),
            a: die_cfg.a,
            b: die_cfg.b,
            team_size: models.len(),
            per_input,
        },
    )
}

// ---------------------------------------------------------------------------
// report

/// The attack whose numbers headline the early-stopping summary: the
/// strongest evaluated one, falling back to clean inputs.
fn headline_input(attacks: &[String]) -> String {
    if attacks.iter().any(|a| a == "pgd") {
        "pgd".into()
    } else {
        attacks.first().cloned().unwrap_or_else(|| "clean".into())
    }
}

pub fn run_report(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let stage = "report";
    let paths = prepare_out(cfg)?;
    if !paths.eval().exists() {
        return Err(HarnessError::stage(stage, "eval.json missing; run eval first"));
    }
    let eval: EvalRecord = read_json(stage, &paths.eval())?;

    let mut entities = eval.entities.clone();
    let mut team = None;
    if paths.team_manifest().exists() {
        let manifest: TeamManifest = read_json(stage, &paths.team_manifest())?;
        team = Some(TeamSummary {
            pool_indices: manifest.ids.clone(),
            members: manifest.entities.clone(),
            size: manifest.ids.len(),
            rd: manifest.rd,
            rd_defined: manifest.rd_defined,
            used_fallback: manifest.used_fallback,
            tie_break: manifest.tie_break.clone(),
        });
    }

    let mut die = None;
    if paths.die().exists() {
        let record: DieRecord = read_json(stage, &paths.die())?;
        let clean = record.per_input.get("clean").ok_or_else(|| {
            HarnessError::stage(stage, "die.json has no clean entry")
        })?;
        let mut robust = BTreeMap::new();
        for attack in &eval.attacks {
            let stat = record.per_input.get(attack).ok_or_else(|| {
                HarnessError::stage(stage, format!("die.json has no {attack} entry"))
            })?;
            robust.insert(attack.clone(), stat.accuracy);
        }
        entities.push(EntityRow {
            entity: "team-die".into(),
            clean: clean.accuracy,
            robust,
        });
        let head = record
            .per_input
            .get(&headline_input(&eval.attacks))
            .expect("headline comes from eval.attacks or clean");
        die = Some(DieSummary {
            mode: record.mode.clone(),
            mean_stop: head.mean_stop,
            speedup: head.speedup,
        });
    }

    let report = MetricsReport {
        dataset: cfg.data.source.as_str().to_string(),
        seed: cfg.seed,
        attacks: eval.attacks.clone(),
        entities,
        global_sparsity: eval.global_sparsity,
        team,
        die,
    };
    emit_report(&report, &paths.out)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// run-all and stage dispatch

/// The full pipeline with skip semantics: a zero budget for a stage means
/// "reuse what is already in the output directory" (pretrain with an
/// existing base checkpoint, pruning with an existing pool, team training
/// with an existing team), degrading gracefully down to evaluation-only.
pub fn run_all(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let paths = prepare_out(cfg)?;

    timed(&paths, "pretrain", || run_pretrain(cfg))?;

    if cfg.prune.rounds > 0 {
        timed(&paths, "prune-pool", || run_prune_pool(cfg))?;
    }

    let have_pool = paths.pool_manifest().exists();
    let have_team = paths.team_manifest().exists();
    if have_pool && (cfg.eed.epochs > 0 || !have_team) {
        timed(&paths, "select", || run_select(cfg))?;
        timed(&paths, "train-eed", || run_train_eed(cfg))?;
    }

    timed(&paths, "eval", || run_eval(cfg))?;

    if paths.team_manifest().exists() && cfg.die_mode.is_some() {
        timed(&paths, "die-eval", || run_die_eval(cfg))?;
    }

    timed(&paths, "report", || run_report(cfg))
}

/// Runs one named stage (the `--stage` escape hatch and the subcommands both
/// land here).
pub fn run_stage(cfg: &ExperimentConfig, stage: &str) -> Result<()> {
    let paths = Paths::new(cfg);
    match stage {
        "pretrain" => timed(&paths, stage, || run_pretrain(cfg)),
        "prune-pool" => timed(&paths, stage, || run_prune_pool(cfg)),
        "select" => timed(&paths, stage, || run_select(cfg)),
        "train-eed" => timed(&paths, stage, || run_train_eed(cfg)),
        "eval" => timed(&paths, stage, || run_eval(cfg)),
        "die-eval" => timed(&paths, stage, || run_die_eval(cfg)),
        "report" => timed(&paths, stage, || run_report(cfg)).map(|_| ()),
        "run-all" => run_all(cfg).map(|_| ()),
        other => Err(HarnessError::Config(format!(
            "unknown stage '{other}' (expected pretrain, prune-pool, select, train-eed, eval, die-eval, report or run-all)"
        ))),
    }
}

//! Experiment configuration.
//!
//! A config is a flat `key = value` text file with dotted section prefixes
//! (`data.noise = 0.15`), merged over built-in defaults and under CLI
//! overrides, in that precedence order. The fully resolved map is echoed
//! into the output directory as `config.resolved` so a run is reproducible
//! from that one file plus the seed it records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eed_core::advtrain::TrainConfig;
use eed_core::attacks::AttackConfig;
use eed_core::die::{DieConfig, DieMode};
use eed_core::ensemble::{EedLossConfig, PoolSpec};
use eed_core::importance::Metric;
use eed_core::netcore::{ArchSpec, LayerSpec};
use eed_core::pruning::{PruneConfig, RateMode};
use eed_core::rng;

use crate::{HarnessError, Result};

/// Every key the resolver understands; anything else in a config file is a
/// typo and gets rejected rather than silently ignored.
const KNOWN_KEYS: &[&str] = &[
    "data.source",
    "data.n",
    "data.noise",
    "data.eval_fraction",
    "data.images",
    "data.labels",
    "data.eval_images",
    "data.eval_labels",
    "data.limit",
    "model.hidden",
    "model.batchnorm",
    "pretrain.epochs",
    "pretrain.batch_size",
    "pretrain.lr",
    "pretrain.bn_momentum",
    "attack.train.epsilon",
    "attack.train.steps",
    "attack.eval.kinds",
    "attack.eval.epsilon",
    "attack.eval.steps",
    "pool.metrics",
    "pool.subsets",
    "pool.shared_fraction",
    "prune.target_sparsity",
    "prune.compression",
    "prune.a_min",
    "prune.phi",
    "prune.rounds",
    "prune.rate_lr",
    "prune.rate_mode",
    "prune.fine_tune_epochs",
    "prune.batch_size",
    "prune.lr",
    "loss.alpha",
    "loss.beta",
    "loss.omega",
    "loss.gamma",
    "loss.lambda1",
    "loss.lambda2",
    "loss.rd_threshold",
    "loss.log_clamp_eps",
    "eed.epochs",
    "eed.batch_size",
    "eed.lr",
    "die.a",
    "die.b",
    "die.mode",
    "seed",
    "out",
];

/// Built-in defaults; a run with no config file at all is a valid (if small)
/// two-moons experiment.
pub fn default_map() -> BTreeMap<String, String> {
    let pairs = [
        ("data.source", "moons"),
        ("data.n", "2000"),
        ("data.noise", "0.15"),
        ("data.eval_fraction", "0.25"),
        ("data.images", ""),
        ("data.labels", ""),
        ("data.eval_images", ""),
        ("data.eval_labels", ""),
        ("data.limit", "0"),
        ("model.hidden", "48,48"),
        ("model.batchnorm", "true"),
        ("pretrain.epochs", "10"),
        ("pretrain.batch_size", "64"),
        ("pretrain.lr", "0.1"),
        ("pretrain.bn_momentum", "0.1"),
        ("attack.train.epsilon", "0.05"),
        ("attack.train.steps", "7"),
        ("attack.eval.kinds", "fgsm,pgd"),
        ("attack.eval.epsilon", "0.05"),
        ("attack.eval.steps", "20"),
        ("pool.metrics", "nis,erm,ase,bnsf"),
        ("pool.subsets", "3"),
        ("pool.shared_fraction", "0.25"),
        ("prune.target_sparsity", "0.8"),
        ("prune.compression", "0.95"),
        ("prune.a_min", "0.02"),
        ("prune.phi", "0.01"),
        ("prune.rounds", "2"),
        ("prune.rate_lr", "0.5"),
        ("prune.rate_mode", "learned"),
        ("prune.fine_tune_epochs", "3"),
        ("prune.batch_size", "64"),
        ("prune.lr", "0.05"),
        ("loss.alpha", "0.5"),
        ("loss.beta", "0.1"),
        ("loss.omega", "10"),
        ("loss.gamma", "4"),
        ("loss.lambda1", "0.7"),
        ("loss.lambda2", "0.25"),
        ("loss.rd_threshold", "0.7"),
        ("loss.log_clamp_eps", "1e-7"),
        ("eed.epochs", "6"),
        ("eed.batch_size", "64"),
        ("eed.lr", "0.05"),
        ("die.a", "5.0"),
        ("die.b", "-1.0"),
        ("die.mode", "online"),
        ("seed", "7"),
        ("out", "runs/default"),
    ];
    pairs
        .iter()
        .map(|&(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Parses config text into a key/value map. Lines are `key = value`; blank
/// lines and lines starting with `#` are skipped. Keys must be known.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HarnessError::Config(format!("line {}: expected 'key = value', got '{line}'", ln + 1))
        })?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(HarnessError::Config(format!(
                "line {}: unknown key '{key}'",
                ln + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    parse_config_text(&text)
}

/// CLI flags that override file keys. `None` everywhere means "file wins".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub attack: Option<String>,
    pub epsilon: Option<f64>,
    pub sparsity: Option<f64>,
    pub die: Option<String>,
}

impl Overrides {
    fn apply(&self, map: &mut BTreeMap<String, String>) {
        if let Some(s) = self.seed {
            map.insert("seed".into(), s.to_string());
        }
        if let Some(o) = &self.out {
            map.insert("out".into(), o.display().to_string());
        }
        if let Some(a) = &self.attack {
            map.insert("attack.eval.kinds".into(), a.clone());
        }
        if let Some(e) = self.epsilon {
            map.insert("attack.eval.epsilon".into(), e.to_string());
        }
        if let Some(s) = self.sparsity {
            map.insert("prune.target_sparsity".into(), s.to_string());
        }
        if let Some(d) = &self.die {
            map.insert("die.mode".into(), d.clone());
        }
    }
}

/// Merge defaults <- file <- CLI and resolve to the typed config.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut map = default_map();
    if let Some(path) = file {
        map.extend(load_config_file(path)?);
    }
    overrides.apply(&mut map);
    ExperimentConfig::from_map(map)
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = map
        .get(key)
        .ok_or_else(|| HarnessError::Config(format!("missing key '{key}'")))?;
    raw.parse::<T>()
        .map_err(|e| HarnessError::Config(format!("key '{key}': cannot parse '{raw}': {e}")))
}

fn get_bool(map: &BTreeMap<String, String>, key: &str) -> Result<bool> {
    match map.get(key).map(String::as_str) {
        Some("true") | Some("1") | Some("yes") => Ok(true),
        Some("false") | Some("0") | Some("no") => Ok(false),
        Some(other) => Err(HarnessError::Config(format!(
            "key '{key}': expected true/false, got '{other}'"
        ))),
        None => Err(HarnessError::Config(format!("missing key '{key}'"))),
    }
}

fn get_path(map: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    map.get(key)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// A learning-rate value is either a single rate (`0.1`) or a
/// piecewise-constant schedule (`0:0.1,8:0.01`), boundaries in epochs.
fn parse_lr_schedule(key: &str, raw: &str) -> Result<Vec<(usize, f64)>> {
    let bad = |detail: String| HarnessError::Config(format!("key '{key}': {detail}"));
    if !raw.contains(':') {
        let lr: f64 = raw
            .parse()
            .map_err(|e| bad(format!("cannot parse rate '{raw}': {e}")))?;
        return Ok(vec![(0, lr)]);
    }
    let mut schedule = Vec::new();
    for part in raw.split(',') {
        let (epoch, lr) = part
            .split_once(':')
            .ok_or_else(|| bad(format!("expected 'epoch:rate', got '{part}'")))?;
        let epoch: usize = epoch
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad epoch in '{part}': {e}")))?;
        let lr: f64 = lr
            .trim()
            .parse()
            .map_err(|e| bad(format!("bad rate in '{part}': {e}")))?;
        schedule.push((epoch, lr));
    }
    Ok(schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Blobs,
    Moons,
    Idx,
}

impl DataSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataSource::Blobs => "blobs",
            DataSource::Moons => "moons",
            DataSource::Idx => "idx",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub source: DataSource,
    pub n: usize,
    pub noise: f64,
    pub eval_fraction: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub eval_images: Option<PathBuf>,
    pub eval_labels: Option<PathBuf>,
    /// Cap on loaded IDX samples (0 = no cap); keeps desk runs desk-sized.
    pub limit: usize,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Batchnorm after every dense layer (including the classifier head,
    /// which is what lets the batchnorm scale-factor metric score it).
    pub batchnorm: bool,
}

impl ModelConfig {
    pub fn arch(&self, input_shape: Vec<usize>, classes: usize) -> ArchSpec {
        let mut layers = Vec::new();
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense { out: h });
            if self.batchnorm {
                layers.push(LayerSpec::BatchNorm);
            }
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { out: classes });
        if self.batchnorm {
            layers.push(LayerSpec::BatchNorm);
        }
        layers.push(LayerSpec::Softmax);
        ArchSpec {
            input_shape,
            layers,
            num_classes: classes,
        }
    }
}

/// Epoch budget plus optimizer settings for one training stage.
#[derive(Debug, Clone)]
pub struct StageTrain {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<(usize, f64)>,
    pub bn_momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }

    pub fn parse(s: &str) -> Result<AttackKind> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(HarnessError::Config(format!(
                "unknown attack '{other}' (expected fgsm or pgd)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneSettings {
    pub target_sparsity: f64,
    pub compression: f64,
    pub a_min: f64,
    pub phi: f64,
    pub rounds: usize,
    pub rate_lr: f64,
    pub rate_mode: RateMode,
    pub fine_tune_epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<(usize, f64)>,
}

/// The typed, validated form of a resolved config map.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// The resolved flat map, kept for echoing into the output directory.
    pub raw: BTreeMap<String, String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: StageTrain,
    pub train_attack_epsilon: f64,
    pub train_attack_steps: usize,
    pub eval_kinds: Vec<AttackKind>,
    pub eval_epsilon: f64,
    pub eval_steps: usize,
    pub pool_metrics: Vec<Metric>,
    pub pool_subsets: usize,
    pub pool_shared_fraction: f64,
    pub prune: PruneSettings,
    pub loss: EedLossConfig,
    pub eed: StageTrain,
    /// `None` means `--die off`: the dynamic-inference stage is skipped.
    pub die_mode: Option<DieMode>,
    pub die_a: f64,
    pub die_b: f64,
    pub seed: u64,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn from_map(map: BTreeMap<String, String>) -> Result<ExperimentConfig> {
        let source = match map.get("data.source").map(String::as_str) {
            Some("blobs") => DataSource::Blobs,
            Some("moons") => DataSource::Moons,
            Some("idx") => DataSource::Idx,
            other => {
                return Err(HarnessError::Config(format!(
                    "data.source must be blobs, moons or idx, got {other:?}"
                )))
            }
        };
        let data = DataConfig {
            source,
            n: get(&map, "data.n")?,
            noise: get(&map, "data.noise")?,
            eval_fraction: get(&map, "data.eval_fraction")?,
            images: get_path(&map, "data.images"),
            labels: get_path(&map, "data.labels"),
            eval_images: get_path(&map, "data.eval_images"),
            eval_labels: get_path(&map, "data.eval_labels"),
            limit: get(&map, "data.limit")?,
        };
        if source == DataSource::Idx {
            for (key, path) in [("data.images", &data.images), ("data.labels", &data.labels)] {
                match path {
                    None => {
                        return Err(HarnessError::Config(format!(
                            "{key} is required when data.source = idx"
                        )))
                    }
                    Some(p) if !p.exists() => {
                        return Err(HarnessError::Config(format!(
                            "{key}: file {} does not exist",
                            p.display()
                        )))
                    }
                    _ => {}
                }
            }
            for (key, path) in [
                ("data.eval_images", &data.eval_images),
                ("data.eval_labels", &data.eval_labels),
            ] {
                if let Some(p) = path {
                    if !p.exists() {
                        return Err(HarnessError::Config(format!(
                            "{key}: file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
            if data.eval_images.is_some() != data.eval_labels.is_some() {
                return Err(HarnessError::Config(
                    "data.eval_images and data.eval_labels must be given together".into(),
                ));
            }
        } else {
            if data.n < 2 {
                return Err(HarnessError::Config("data.n must be >= 2".into()));
            }
            if !(0.0..1.0).contains(&data.eval_fraction) || data.eval_fraction <= 0.0 {
                return Err(HarnessError::Config(format!(
                    "data.eval_fraction must lie in (0, 1), got {}",
                    data.eval_fraction
                )));
            }
        }

        let hidden_raw = map.get("model.hidden").map(String::as_str).unwrap_or("");
        let mut hidden = Vec::new();
        for part in hidden_raw.split(',').filter(|p| !p.trim().is_empty()) {
            let h: usize = part.trim().parse().map_err(|e| {
                HarnessError::Config(format!("model.hidden: bad width '{part}': {e}"))
            })?;
            hidden.push(h);
        }
        if hidden.is_empty() {
            return Err(HarnessError::Config(
                "model.hidden needs at least one layer width".into(),
            ));
        }
        let model = ModelConfig {
            hidden,
            batchnorm: get_bool(&map, "model.batchnorm")?,
        };

        let pretrain = StageTrain {
            epochs: get(&map, "pretrain.epochs")?,
            batch_size: get(&map, "pretrain.batch_size")?,
            lr_schedule: parse_lr_schedule("pretrain.lr", &map["pretrain.lr"])?,
            bn_momentum: get(&map, "pretrain.bn_momentum")?,
        };

        let mut eval_kinds = Vec::new();
        for part in map["attack.eval.kinds"].split(',').filter(|p| !p.is_empty()) {
            let kind = AttackKind::parse(part.trim())?;
            if !eval_kinds.contains(&kind) {
                eval_kinds.push(kind);
            }
        }
        if eval_kinds.is_empty() {
            return Err(HarnessError::Config(
                "attack.eval.kinds needs at least one attack".into(),
            ));
        }

        let mut pool_metrics = Vec::new();
        for part in map["pool.metrics"].split(',').filter(|p| !p.is_empty()) {
            let metric = Metric::parse(part.trim())
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            pool_metrics.push(metric);
        }
        if pool_metrics.contains(&Metric::Bnsf) && !model.batchnorm {
            return Err(HarnessError::Config(
                "pool.metrics includes bnsf but model.batchnorm = false".into(),
            ));
        }

        let rate_mode = match map.get("prune.rate_mode").map(String::as_str) {
            Some("learned") => RateMode::Learned,
            Some("uniform") => RateMode::Uniform,
            other => {
                return Err(HarnessError::Config(format!(
                    "prune.rate_mode must be learned or uniform, got {other:?}"
                )))
            }
        };
        let prune = PruneSettings {
            target_sparsity: get(&map, "prune.target_sparsity")?,
            compression: get(&map, "prune.compression")?,
            a_min: get(&map, "prune.a_min")?,
            phi: get(&map, "prune.phi")?,
            rounds: get(&map, "prune.rounds")?,
            rate_lr: get(&map, "prune.rate_lr")?,
            rate_mode,
            fine_tune_epochs: get(&map, "prune.fine_tune_epochs")?,
            batch_size: get(&map, "prune.batch_size")?,
            lr_schedule: parse_lr_schedule("prune.lr", &map["prune.lr"])?,
        };

        let loss = EedLossConfig {
            alpha: get(&map, "loss.alpha")?,
            beta: get(&map, "loss.beta")?,
            omega: get(&map, "loss.omega")?,
            gamma_loss: get(&map, "loss.gamma")?,
            lambda1: get(&map, "loss.lambda1")?,
            lambda2: get(&map, "loss.lambda2")?,
            rd_threshold: get(&map, "loss.rd_threshold")?,
            log_clamp_eps: get(&map, "loss.log_clamp_eps")?,
        };

        let eed = StageTrain {
            epochs: get(&map, "eed.epochs")?,
            batch_size: get(&map, "eed.batch_size")?,
            lr_schedule: parse_lr_schedule("eed.lr", &map["eed.lr"])?,
            bn_momentum: get(&map, "pretrain.bn_momentum")?,
        };

        let die_mode = match map.get("die.mode").map(String::as_str) {
            Some("off") => None,
            Some(s) => Some(
                DieMode::parse(s).map_err(|e| HarnessError::Config(e.to_string()))?,
            ),
            None => return Err(HarnessError::Config("missing key 'die.mode'".into())),
        };

        let cfg = ExperimentConfig {
            data,
            model,
            pretrain,
            train_attack_epsilon: get(&map, "attack.train.epsilon")?,
            train_attack_steps: get(&map, "attack.train.steps")?,
            eval_kinds,
            eval_epsilon: get(&map, "attack.eval.epsilon")?,
            eval_steps: get(&map, "attack.eval.steps")?,
            pool_metrics,
            pool_subsets: get(&map, "pool.subsets")?,
            pool_shared_fraction: get(&map, "pool.shared_fraction")?,
            prune,
            loss,
            eed,
            die_mode,
            die_a: get(&map, "die.a")?,
            die_b: get(&map, "die.b")?,
            seed: get(&map, "seed")?,
            out: PathBuf::from(&map["out"]),
            raw: map,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-checks the derived core configs so bad values die here with
    /// exit code 2 instead of mid-pipeline with exit code 3.
    fn validate(&self) -> Result<()> {
        let config_err = |e: eed_core::Error| HarnessError::Config(e.to_string());
        self.pool_spec().validate().map_err(config_err)?;
        self.prune_config().validate().map_err(config_err)?;
        self.loss.validate().map_err(config_err)?;
        self.pretrain_config().validate().map_err(config_err)?;
        self.eed_train_config().validate().map_err(config_err)?;
        for &kind in &self.eval_kinds {
            self.eval_attack(kind).validate().map_err(config_err)?;
        }
        if !self.die_a.is_finite() || !self.die_b.is_finite() {
            return Err(HarnessError::Config(format!(
                "die.a and die.b must be finite, got {} and {}",
                self.die_a, self.die_b
            )));
        }
        Ok(())
    }

    /// `config.resolved` contents: every effective key, sorted.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.raw {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// PGD used to generate training-time adversarial examples; loops
    /// reseed it per batch, so the seed here is a placeholder.
    pub fn train_attack(&self) -> AttackConfig {
        AttackConfig::pgd(self.train_attack_epsilon, self.train_attack_steps, 0)
    }

    /// Evaluation attack of the given kind, deterministically seeded.
    pub fn eval_attack(&self, kind: AttackKind) -> AttackConfig {
        match kind {
            AttackKind::Fgsm => AttackConfig::fgsm(self.eval_epsilon),
            AttackKind::Pgd => AttackConfig::pgd(
                self.eval_epsilon,
                self.eval_steps,
                rng::derive(self.seed, "eval-attack", 0),
            ),
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr_schedule: self.pretrain.lr_schedule.clone(),
            attack: self.train_attack(),
            bn_momentum: self.pretrain.bn_momentum,
            seed: rng::derive(self.seed, "pretrain", 0),
        }
    }

    pub fn pool_spec(&self) -> PoolSpec {
        PoolSpec {
            num_subsets: self.pool_subsets,
            shared_fraction: self.pool_shared_fraction,
            metrics: self.pool_metrics.clone(),
            seed: rng::derive(self.seed, "pool", 0),
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            target_sparsity: self.prune.target_sparsity,
            sub_model_compression: self.prune.compression,
            a_min: self.prune.a_min,
            phi: self.prune.phi,
            prune_epochs: self.prune.rounds,
            rate_lr: self.prune.rate_lr,
            rate_mode: self.prune.rate_mode,
            fine_tune: TrainConfig {
                epochs: self.prune.fine_tune_epochs,
                batch_size: self.prune.batch_size,
                lr_schedule: self.prune.lr_schedule.clone(),
                attack: self.train_attack(),
                bn_momentum: self.pretrain.bn_momentum,
                seed: rng::derive(self.seed, "prune", 0),
            },
        }
    }

    pub fn eed_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.eed.epochs,
            batch_size: self.eed.batch_size,
            lr_schedule: self.eed.lr_schedule.clone(),
            attack: self.train_attack(),
            bn_momentum: self.eed.bn_momentum,
            seed: rng::derive(self.seed, "eed", 0),
        }
    }

    /// Stopping-rule settings for a team of the given size.
    pub fn die_config(&self, team_size: usize) -> Option<DieConfig> {
        self.die_mode.map(|mode| DieConfig {
            a: self.die_a,
            b: self.die_b,
            max_models: team_size,
            mode,
        })
    }
}

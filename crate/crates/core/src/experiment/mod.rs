//! Experiment orchestration: TOML configs, JSONL metric logs, run summaries,
//! and cross-run comparison tables.
//!
//! A config file needs only a `[dataset]` section; every other key has a
//! default. The fully resolved config is echoed to the output directory, so
//! an echoed file plus the crate version reproduces the run bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{
    generate_synthetic, load_cifar_binary, partition, CifarVariant, InputShape, LabeledDataset,
    PartitionConfig, PartitionScheme,
};
use crate::engine::{
    run_training, RoundRecord, RunOptions, ServerOptKind, ServerOptState, TrainConfig,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ArchConfig, Reduction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

fn d_classes() -> usize {
    8
}
fn d_per_class() -> usize {
    50
}
fn d_dim() -> usize {
    32
}
fn d_spread() -> f64 {
    0.25
}
fn d_holdout() -> usize {
    10
}

/// `[dataset]` — the only required section. Synthetic blobs are the default
/// desk-scale dataset; the CIFAR kinds read the standard binary batches from
/// `data_dir`. `holdout_per_class = 0` evaluates on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_spread")]
    pub spread: f64,
    #[serde(default = "d_holdout")]
    pub holdout_per_class: usize,
    /// CIFAR only: directory holding the binary batch files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// CIFAR only: keep the first k training samples (0 = all).
    #[serde(default)]
    pub train_subset: usize,
    /// CIFAR only: keep the first k eval samples (0 = all).
    #[serde(default)]
    pub eval_subset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Iid,
    Dirichlet,
    Quantity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: SchemeKind,
    /// Dirichlet concentration; required iff scheme = "dirichlet".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Shards per client; required iff scheme = "quantity".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<usize>,
    pub clients: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { scheme: SchemeKind::Iid, alpha: None, gamma: None, clients: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub groups: usize,
    pub reduction: Reduction,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { widths: vec![32, 16], groups: 4, reduction: Reduction::MeanPool }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub iters_per_epoch: usize,
    pub participation: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            iters_per_epoch: t.iters_per_epoch,
            participation: t.participation,
            lr: t.lr,
            lr_decay: t.lr_decay,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub optimizer: ServerOptKind,
    pub beta_momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_size: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        let s = ServerOptState::new(ServerOptKind::FedAvg);
        ServerSection {
            optimizer: ServerOptKind::FedAvg,
            beta_momentum: s.beta_momentum,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            step_size: s.step_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Eval + diagnostics cadence in rounds (0 = final round only).
    pub eval_every: usize,
    pub parallel: bool,
    /// Checkpoint cadence in rounds (0 = none).
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out_dir: PathBuf::from("fedrcl-run"),
            eval_every: 5,
            parallel: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Cross-field consistency; called by `parse`, and again by
    /// `run_experiment` in case the config was built programmatically.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                if d.data_dir.is_some() {
                    return Err(Error::Config(
                        "dataset.data_dir is only meaningful when dataset.kind is a CIFAR \
                         variant"
                            .into(),
                    ));
                }
                if d.holdout_per_class >= d.per_class {
                    return Err(Error::Config(format!(
                        "dataset.holdout_per_class ({}) must be below dataset.per_class ({})",
                        d.holdout_per_class, d.per_class
                    )));
                }
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                if d.data_dir.is_none() {
                    return Err(Error::Config(
                        "dataset.kind = cifar* requires dataset.data_dir".into(),
                    ));
                }
            }
        }
        match self.partition.scheme {
            SchemeKind::Iid => {
                if self.partition.alpha.is_some() || self.partition.gamma.is_some() {
                    return Err(Error::Config(
                        "partition.alpha / partition.gamma are only meaningful with \
                         partition.scheme = dirichlet / quantity"
                            .into(),
                    ));
                }
            }
            SchemeKind::Dirichlet => {
                if self.partition.alpha.is_none() {
                    return Err(Error::Config(
                        "partition.scheme = dirichlet requires partition.alpha".into(),
                    ));
                }
                if self.partition.gamma.is_some() {
                    return Err(Error::Config(
                        "partition.gamma conflicts with partition.scheme = dirichlet".into(),
                    ));
                }
            }
            SchemeKind::Quantity => {
                if self.partition.gamma.is_none() {
                    return Err(Error::Config(
                        "partition.scheme = quantity requires partition.gamma".into(),
                    ));
                }
                if self.partition.alpha.is_some() {
                    return Err(Error::Config(
                        "partition.alpha conflicts with partition.scheme = quantity".into(),
                    ));
                }
            }
        }
        let (input, classes) = match self.dataset.kind {
            DatasetKind::Synthetic => {
                (InputShape::Vector { dim: self.dataset.dim }, self.dataset.classes)
            }
            DatasetKind::Cifar10 => (InputShape::Image { channels: 3, height: 32, width: 32 }, 10),
            DatasetKind::Cifar100 => {
                (InputShape::Image { channels: 3, height: 32, width: 32 }, 100)
            }
        };
        self.arch_for(input, classes).validate()?;
        self.loss_config().validate(self.model.widths.len())?;
        self.train_config().validate(self.partition.clients)?;
        Ok(())
    }

    fn arch_for(&self, input: InputShape, num_classes: usize) -> ArchConfig {
        ArchConfig {
            input,
            stage_widths: self.model.widths.clone(),
            groups: self.model.groups,
            num_classes,
            reduction: self.model.reduction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.train.rounds,
            local_epochs: self.train.local_epochs,
            iters_per_epoch: self.train.iters_per_epoch,
            participation: self.train.participation,
            lr: self.train.lr,
            lr_decay: self.train.lr_decay,
            weight_decay: self.train.weight_decay,
            momentum: self.train.momentum,
            seed: self.run.seed,
        }
    }

    /// The loss config with `levels` resolved: empty means every tap level.
    pub fn loss_config(&self) -> LossConfig {
        let mut loss = self.loss.clone();
        if loss.levels.is_empty() {
            loss.levels = (1..=self.model.widths.len()).collect();
        }
        loss
    }

    pub fn server_state(&self) -> ServerOptState {
        let mut s = ServerOptState::new(self.server.optimizer);
        s.beta_momentum = self.server.beta_momentum;
        s.beta1 = self.server.beta1;
        s.beta2 = self.server.beta2;
        s.eps = self.server.eps;
        s.step_size = self.server.step_size;
        s
    }

    pub fn partition_config(&self) -> PartitionConfig {
        let scheme = match self.partition.scheme {
            SchemeKind::Iid => PartitionScheme::Iid,
            SchemeKind::Dirichlet => PartitionScheme::Dirichlet {
                alpha: self.partition.alpha.expect("validated"),
            },
            SchemeKind::Quantity => PartitionScheme::Quantity {
                gamma: self.partition.gamma.expect("validated"),
            },
        };
        PartitionConfig { scheme, num_clients: self.partition.clients, seed: self.run.seed }
    }

    /// Materialize (train, eval) datasets.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                let d = &self.dataset;
                let all = generate_synthetic(d.classes, d.per_class, d.dim, d.spread, self.run.seed)?;
                if d.holdout_per_class == 0 {
                    return Ok((all.clone(), all));
                }
                let keep = d.per_class - d.holdout_per_class;
                let mut train_ix = Vec::with_capacity(d.classes * keep);
                let mut eval_ix = Vec::with_capacity(d.classes * d.holdout_per_class);
                for class in 0..d.classes {
                    let base = class * d.per_class;
                    train_ix.extend(base..base + keep);
                    eval_ix.extend(base + keep..base + d.per_class);
                }
                Ok((all.subset(&train_ix)?, all.subset(&eval_ix)?))
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let d = &self.dataset;
                let dir = d.data_dir.as_ref().expect("validated");
                let variant = if d.kind == DatasetKind::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let (train_files, test_file): (Vec<&str>, &str) = match variant {
                    CifarVariant::Cifar10 => (
                        vec![
                            "data_batch_1.bin",
                            "data_batch_2.bin",
                            "data_batch_3.bin",
                            "data_batch_4.bin",
                            "data_batch_5.bin",
                        ],
                        "test_batch.bin",
                    ),
                    CifarVariant::Cifar100 => (vec!["train.bin"], "test.bin"),
                };
                let parts: Vec<LabeledDataset> = train_files
                    .iter()
                    .map(|f| load_cifar_binary(&dir.join(f), variant))
                    .collect::<Result<_>>()?;
                let mut train = LabeledDataset::concat(&parts)?;
                let mut eval = load_cifar_binary(&dir.join(test_file), variant)?;
                if d.train_subset > 0 {
                    train = train.truncate(d.train_subset)?;
                }
                if d.eval_subset > 0 {
                    eval = eval.truncate(d.eval_subset)?;
                }
                Ok((train, eval))
            }
        }
    }
}

/// One evaluated round, as logged to metrics.jsonl. Option fields are null
/// when the quantity is undefined for that round's features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub round: usize,
    pub accuracy: f64,
    pub trace_within: f64,
    pub trace_between: f64,
    pub effective_rank: Option<f64>,
    pub vci: Option<f64>,
    pub mean_deviation_bound: Option<f64>,
    pub mean_local_loss: f64,
}

impl MetricsRow {
    /// None when the round carried no evaluation.
    pub fn from_record(rec: &RoundRecord) -> Option<MetricsRow> {
        let accuracy = rec.accuracy?;
        let collapse = rec.collapse.as_ref()?;
        let deviation = rec.deviation.as_ref()?;
        Some(MetricsRow {
            round: rec.round,
            accuracy,
            trace_within: collapse.trace_within,
            trace_between: collapse.trace_between,
            effective_rank: collapse.effective_rank,
            vci: collapse.vci,
            mean_deviation_bound: deviation.mean_finite.is_finite().then_some(deviation.mean_finite),
            mean_local_loss: rec.mean_local_loss(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_round: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub seed: u64,
    pub crate_version: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub out_dir: PathBuf,
}

/// Run one configured experiment. Writes into `run.out_dir`:
/// config.toml (resolved echo), partition.json, metrics.jsonl (streamed and
/// flushed row by row, so a crashed run keeps its partial log), summary.json.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let out_dir = config.run.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.toml"), config.to_toml()?)?;

    let (train_data, eval_data) = config.datasets()?;
    let plan = partition(&train_data, &config.partition_config())?;
    plan.save(&out_dir.join("partition.json"))?;

    let arch = config.arch_for(train_data.samples.input_shape(), train_data.num_classes);
    arch.validate()?;
    let train_cfg = config.train_config();
    let loss_cfg = config.loss_config();
    let mut server = config.server_state();
    let opts = RunOptions {
        eval_every: config.run.eval_every,
        parallel: config.run.parallel,
        checkpoint_dir: (config.run.checkpoint_every > 0)
            .then(|| out_dir.join("checkpoints")),
        checkpoint_every: config.run.checkpoint_every,
        resume_from: None,
    };

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut log = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    run_training(
        &arch,
        &train_data,
        &plan,
        &train_cfg,
        &loss_cfg,
        &mut server,
        Some(&eval_data),
        &opts,
        |rec| {
            if let Some(row) = MetricsRow::from_record(rec) {
                serde_json::to_writer(&mut log, &row)?;
                log.write_all(b"\n")?;
                log.flush()?;
                rows.push(row);
            }
            Ok(())
        },
    )?;

    let last = rows.last().ok_or_else(|| {
        Error::Config("run produced no evaluated rounds; check run.eval_every".into())
    })?;
    let (best_round, best_accuracy) = rows
        .iter()
        .map(|r| (r.round, r.accuracy))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("accuracies are finite"))
        .expect("rows is non-empty");
    let summary = RunSummary {
        final_round: last.round,
        final_accuracy: last.accuracy,
        best_accuracy,
        best_round,
        seed: config.run.seed,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let file = File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &summary)?;
    Ok(ExperimentOutcome { rows, summary, out_dir })
}

/// Parse and schema-check one metrics log: every row must carry exactly the
/// documented fields and rounds must be strictly increasing.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetricsRow = serde_json::from_str(&line).map_err(|e| {
            Error::Schema(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if let Some(prev) = rows.last() {
            let prev: &MetricsRow = prev;
            if row.round <= prev.round {
                return Err(Error::Schema(format!(
                    "{}:{}: round {} does not increase over {}",
                    path.display(),
                    lineno + 1,
                    row.round,
                    prev.round
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Schema(format!("{}: no metric rows", path.display())));
    }
    Ok(rows)
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub final_accuracy: f64,
    /// Round-weighted (trapezoidal) average accuracy over the logged rounds.
    pub auc_accuracy: f64,
    pub final_trace_within: f64,
    pub final_trace_between: f64,
    pub final_effective_rank: Option<f64>,
    pub final_vci: Option<f64>,
}

fn auc(rows: &[MetricsRow]) -> f64 {
    if rows.len() < 2 {
        return rows[0].accuracy;
    }
    let span = (rows.last().unwrap().round - rows[0].round) as f64;
    let mut area = 0.0;
    for pair in rows.windows(2) {
        let dr = (pair[1].round - pair[0].round) as f64;
        area += 0.5 * (pair[0].accuracy + pair[1].accuracy) * dr;
    }
    area / span
}

/// Align runs by round and produce a CSV table (one row per run).
pub fn compare_runs(paths: &[PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::Config("compare needs at least one metrics log".into()));
    }
    let mut all = Vec::with_capacity(paths.len());
    for path in paths {
        all.push((path, read_metrics(path)?));
    }
    let reference: Vec<usize> = all[0].1.iter().map(|r| r.round).collect();
    for (path, rows) in &all {
        let rounds: Vec<usize> = rows.iter().map(|r| r.round).collect();
        if rounds != reference {
            return Err(Error::Schema(format!(
                "{} logs rounds {rounds:?}, but {} logs {reference:?}; runs cannot be aligned",
                path.display(),
                all[0].0.display()
            )));
        }
    }

    let mut writer = csv::Writer::from_writer(Vec::new());
    for (path, rows) in &all {
        let last = rows.last().expect("read_metrics rejects empty logs");
        // every run writes a file literally named metrics.jsonl, so the
        // output directory is the distinguishing name
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        let run = match stem.as_deref() {
            Some("metrics") | None => path
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .or(stem)
                .unwrap_or_else(|| path.display().to_string()),
            Some(_) => stem.unwrap(),
        };
        writer
            .serialize(CompareRow {
                run,
                final_accuracy: last.accuracy,
                auc_accuracy: auc(rows),
                final_trace_within: last.trace_within,
                final_trace_between: last.trace_between,
                final_effective_rank: last.effective_rank,
                final_vci: last.vci,
            })
            .map_err(|e| Error::Schema(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Schema(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Schema(e.to_string()))
}

//! Federated training loop: client sampling, local SGD, aggregation, and
//! server-side optimizers.
//!
//! One round: sample max(1, round(rho*N)) clients without replacement, run E
//! local epochs of SGD from the current global snapshot on each, average the
//! resulting parameter vectors coordinate-wise (summing in ascending client-id
//! order), and fold the averaged vector into the global model through the
//! server optimizer. The round-t learning rate is lr * lr_decay^t. Every
//! random choice is drawn from a substream keyed by (seed, purpose, round,
//! client), so a run is reproducible bit-for-bit regardless of thread count.

pub mod checkpoint;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, PartitionPlan};
use crate::diagnostics::{
    class_statistics, collapse_metrics, deviation_report, CollapseMetrics, DeviationReport,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{forward, grad, init_model, ArchConfig, ModelParams};
use crate::rng::substream;

pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Rows fed through the model at once during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total federated rounds T (rounds are numbered 1..=T).
    pub rounds: usize,
    /// Local epochs E per selected client per round.
    pub local_epochs: usize,
    /// Target SGD iterations per local epoch; the batch size is
    /// ceil(n_i / iters_per_epoch) and a short final batch is kept.
    pub iters_per_epoch: usize,
    /// Fraction rho of clients selected each round.
    pub participation: f64,
    pub lr: f64,
    /// Per-round multiplicative decay: the round-t rate is lr * lr_decay^t.
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Local SGD momentum (0 = plain SGD).
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 50,
            local_epochs: 5,
            iters_per_epoch: 10,
            participation: 0.5,
            lr: 0.1,
            lr_decay: 0.998,
            weight_decay: 1e-3,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.iters_per_epoch == 0 {
            return Err(Error::Config("iters_per_epoch must be >= 1".into()));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must lie in (0, 1], got {}",
                self.participation
            )));
        }
        if num_clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.participation * (num_clients as f64) < 1.0 - 1e-9 {
            return Err(Error::Config(format!(
                "participation {} of {num_clients} clients selects less than one",
                self.participation
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Learning rate applied during round `round` (1-based).
pub fn effective_lr(train: &TrainConfig, round: usize) -> f64 {
    train.lr * train.lr_decay.powi(round as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerOptKind {
    FedAvg,
    FedAvgM,
    FedAdam,
}

/// Server optimizer state. The moment buffers share the model's partitioning
/// and are created lazily (zero-filled) on the first step that needs them.
#[derive(Clone, Debug)]
pub struct ServerOptState {
    pub kind: ServerOptKind,
    /// Momentum coefficient for fedavgm.
    pub beta_momentum: f64,
    /// First/second moment decay for fedadam.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Server step size for fedadam.
    pub step_size: f64,
    pub momentum: Option<ModelParams>,
    pub second_moment: Option<ModelParams>,
}

impl ServerOptState {
    pub fn new(kind: ServerOptKind) -> ServerOptState {
        ServerOptState {
            kind,
            beta_momentum: 0.4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-3,
            step_size: 0.01,
            momentum: None,
            second_moment: None,
        }
    }

    fn ensure_buffers(&mut self, like: &ModelParams) {
        let layout = Arc::clone(like.layout());
        match self.kind {
            ServerOptKind::FedAvg => {}
            ServerOptKind::FedAvgM => {
                self.momentum.get_or_insert_with(|| ModelParams::zeros(layout));
            }
            ServerOptKind::FedAdam => {
                self.momentum.get_or_insert_with(|| ModelParams::zeros(Arc::clone(&layout)));
                self.second_moment.get_or_insert_with(|| ModelParams::zeros(layout));
            }
        }
    }
}

/// Apply one server update given the round's aggregated client parameters.
/// The pseudo-gradient is the ascent direction delta = aggregated - global.
pub fn server_step(
    state: &mut ServerOptState,
    global: &mut ModelParams,
    aggregated: &ModelParams,
) -> Result<()> {
    global.check_same_layout(aggregated)?;
    state.ensure_buffers(global);
    match state.kind {
        ServerOptKind::FedAvg => {
            *global = aggregated.clone();
        }
        ServerOptKind::FedAvgM => {
            let delta = aggregated.delta(global)?;
            let m = state.momentum.as_mut().expect("buffer ensured above");
            m.scale(state.beta_momentum);
            m.axpy(1.0, &delta)?;
            if state.beta_momentum == 0.0 {
                // m == delta, so the step lands on the aggregate; adopt it
                // directly instead of computing global + (aggregated - global),
                // which rounds. beta = 0 is then bit-for-bit plain averaging.
                *global = aggregated.clone();
            } else {
                global.axpy(1.0, m)?;
            }
        }
        ServerOptKind::FedAdam => {
            let delta = aggregated.delta(global)?;
            let m = state.momentum.as_mut().expect("buffer ensured above");
            m.scale(state.beta1);
            m.axpy(1.0 - state.beta1, &delta)?;
            let v = state.second_moment.as_mut().expect("buffer ensured above");
            for (vi, di) in v.values_mut().iter_mut().zip(delta.values()) {
                *vi = state.beta2 * *vi + (1.0 - state.beta2) * di * di;
            }
            let m = state.momentum.as_ref().expect("buffer ensured above");
            let v = state.second_moment.as_ref().expect("buffer ensured above");
            for ((gi, mi), vi) in
                global.values_mut().iter_mut().zip(m.values()).zip(v.values())
            {
                *gi += state.step_size * mi / (vi.sqrt() + state.eps);
            }
        }
    }
    if !global.all_finite() {
        return Err(Error::Numerical("server step produced non-finite parameters".into()));
    }
    Ok(())
}

/// Choose max(1, round(rho * N)) distinct client ids, returned in ascending
/// order. Uniform without replacement from the provided stream.
pub fn sample_clients(num_clients: usize, participation: f64, rng: &mut impl Rng) -> Vec<usize> {
    let want = (participation * num_clients as f64).round() as usize;
    let count = want.clamp(1, num_clients);
    let mut ids = rand::seq::index::sample(rng, num_clients, count).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Total local objective per SGD batch, in order.
    pub loss_trace: Vec<f64>,
}

impl LocalOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("local training runs at least one batch")
    }
}

/// Run E local epochs of SGD from `snapshot` on one client's data. The epoch
/// shuffles come from substream(seed, "client", [round, client_id]); batches
/// are ceil(n / iters_per_epoch) rows with the short remainder kept. Each step
/// takes theta <- theta - eta_t * v with v = momentum * v + grad + wd * theta.
pub fn local_train(
    arch: &ArchConfig,
    snapshot: &ModelParams,
    data: &LabeledDataset,
    train: &TrainConfig,
    loss: &LossConfig,
    round: usize,
    client_id: usize,
) -> Result<LocalOutcome> {
    if snapshot.layout().as_ref() != &arch.layout() {
        return Err(Error::LayoutMismatch(
            "snapshot does not match the architecture's parameter layout".into(),
        ));
    }
    let eta = effective_lr(train, round);
    let n = data.len();
    let batch_size = n.div_ceil(train.iters_per_epoch).max(1);
    let mut rng = substream(train.seed, "client", &[round as u64, client_id as u64]);
    let mut params = snapshot.clone();
    let mut velocity = ModelParams::zeros(Arc::clone(snapshot.layout()));
    let mut trace = Vec::with_capacity(train.local_epochs * n.div_ceil(batch_size));
    let mut order: Vec<usize> = (0..n).collect();

    let context = |e: Error| match e {
        Error::Numerical(msg) => {
            Error::Numerical(format!("round {round}, client {client_id}: {msg}"))
        }
        other => other,
    };

    for _ in 0..train.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch = data.samples.select(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (breakdown, mut g) =
                grad(arch, &params, &batch, &labels, Some(snapshot), loss).map_err(context)?;
            g.axpy(train.weight_decay, &params)?;
            velocity.scale(train.momentum);
            velocity.axpy(1.0, &g)?;
            if eta != 0.0 {
                params.axpy(-eta, &velocity)?;
            }
            if !params.all_finite() {
                return Err(context(Error::Numerical(
                    "parameters diverged during local training".into(),
                )));
            }
            trace.push(breakdown.total);
        }
    }
    Ok(LocalOutcome { params, loss_trace: trace })
}

/// Coordinate-wise mean in iteration order. Callers pass clients in ascending
/// id order so the floating-point sum is reproducible.
pub fn aggregate<'a, I>(params: I) -> Result<ModelParams>
where
    I: IntoIterator<Item = &'a ModelParams>,
{
    let mut iter = params.into_iter();
    let first = iter.next().ok_or_else(|| Error::Config("aggregate of zero clients".into()))?;
    let mut sum = first.clone();
    let mut count = 1usize;
    for p in iter {
        sum.axpy(1.0, p)?;
        count += 1;
    }
    sum.scale(1.0 / count as f64);
    Ok(sum)
}

/// Top-1 accuracy; equal logits break toward the lower class index.
pub fn evaluate(arch: &ArchConfig, params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.samples.select(chunk);
        let stack = forward(arch, params, &batch)?;
        for (row, &i) in stack.probs.outer_iter().zip(chunk) {
            let mut arg = 0;
            let mut best = f64::NEG_INFINITY;
            for (k, &p) in row.iter().enumerate() {
                if p > best {
                    best = p;
                    arg = k;
                }
            }
            if arg == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy plus the final-level features and predictions, gathered in one
/// pass so diagnostics reuse the same forward computation.
fn eval_pass(
    arch: &ArchConfig,
    params: &ModelParams,
    data: &LabeledDataset,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let m = data.len();
    let mut features = Array2::<f64>::zeros((m, arch.embedding_dim()));
    let mut probs = Array2::<f64>::zeros((m, arch.num_classes));
    let indices: Vec<usize> = (0..m).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.samples.select(chunk);
        let stack = forward(arch, params, &batch)?;
        let emb = stack.levels.last().expect("at least one stage");
        for (bi, &i) in chunk.iter().enumerate() {
            features.row_mut(i).assign(&emb.row(bi));
            probs.row_mut(i).assign(&stack.probs.row(bi));
            let row = stack.probs.row(bi);
            let mut arg = 0;
            let mut best = f64::NEG_INFINITY;
            for (k, &p) in row.iter().enumerate() {
                if p > best {
                    best = p;
                    arg = k;
                }
            }
            if arg == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / m as f64, features, probs))
}

/// Deviation-bound distribution over an evaluation set, condensed for records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationSummary {
    /// Mean over samples with a finite bound (NaN when every bound is
    /// infinite).
    pub mean_finite: f64,
    pub min: f64,
    pub fraction_below_one: f64,
    pub infinite_count: usize,
}

impl From<&DeviationReport> for DeviationSummary {
    fn from(report: &DeviationReport) -> Self {
        DeviationSummary {
            mean_finite: report.mean_finite,
            min: report.min,
            fraction_below_one: report.fraction_below_one,
            infinite_count: report.infinite_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    /// Ascending ids of the clients trained this round.
    pub active_clients: Vec<usize>,
    /// Final local batch loss per active client, aligned with
    /// `active_clients`.
    pub client_losses: Vec<f64>,
    pub effective_lr: f64,
    /// Eval-set accuracy; None on rounds without evaluation.
    pub accuracy: Option<f64>,
    pub collapse: Option<CollapseMetrics>,
    pub deviation: Option<DeviationSummary>,
}

impl RoundRecord {
    pub fn mean_local_loss(&self) -> f64 {
        self.client_losses.iter().sum::<f64>() / self.client_losses.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Evaluate (accuracy + diagnostics) every this many rounds; the final
    /// round is always evaluated. 0 means final round only.
    pub eval_every: usize,
    /// Train the round's clients on a rayon pool. Results are identical to
    /// the serial path bit for bit; FEDRCL_MAX_THREADS caps the pool width.
    pub parallel: bool,
    /// Write checkpoints into this directory as round_NNNNN.ckpt.
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint every this many rounds (0 = final round only). Ignored
    /// without a checkpoint_dir.
    pub checkpoint_every: usize,
    /// Resume from a checkpoint: restores the model, server state, and round
    /// counter, then continues with the following round.
    pub resume_from: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            eval_every: 5,
            parallel: false,
            checkpoint_dir: None,
            checkpoint_every: 0,
            resume_from: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub records: Vec<RoundRecord>,
    pub model: ModelParams,
}

fn build_pool(parallel: bool) -> Result<Option<rayon::ThreadPool>> {
    if !parallel {
        return Ok(None);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var("FEDRCL_MAX_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| Error::Config(format!("FEDRCL_MAX_THREADS={raw} is not a number")))?;
        if n == 0 {
            return Err(Error::Config("FEDRCL_MAX_THREADS must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    Ok(Some(builder.build().map_err(|e| Error::Config(e.to_string()))?))
}

/// Run the full federated loop. `on_round` fires after every completed round
/// (before any later round can fail), so callers can stream partial results.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    arch: &ArchConfig,
    data: &LabeledDataset,
    plan: &PartitionPlan,
    train: &TrainConfig,
    loss: &LossConfig,
    server: &mut ServerOptState,
    eval_set: Option<&LabeledDataset>,
    opts: &RunOptions,
    mut on_round: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<TrainingRun> {
    arch.validate()?;
    loss.validate(arch.num_levels())?;
    let num_clients = plan.assignments.len();
    train.validate(num_clients)?;
    if data.num_classes != arch.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model expects {}",
            data.num_classes, arch.num_classes
        )));
    }
    if data.samples.input_shape() != arch.input {
        return Err(Error::Shape("training data does not match the model input shape".into()));
    }
    if let Some(eval) = eval_set {
        if eval.num_classes != arch.num_classes || eval.samples.input_shape() != arch.input {
            return Err(Error::Shape("eval set does not match the model".into()));
        }
    }

    let client_data: Vec<Option<LabeledDataset>> = plan
        .assignments
        .iter()
        .map(|ix| if ix.is_empty() { Ok(None) } else { data.subset(ix).map(Some) })
        .collect::<Result<_>>()?;

    let layout = Arc::new(arch.layout());
    let (start_round, mut global) = match &opts.resume_from {
        Some(path) => {
            let (round, model, state) = load_checkpoint(path)?;
            if model.layout().as_ref() != layout.as_ref() {
                return Err(Error::LayoutMismatch(
                    "checkpoint parameters do not match the architecture".into(),
                ));
            }
            *server = state;
            (round + 1, model)
        }
        None => (1, init_model(arch, train.seed)?),
    };

    let pool = build_pool(opts.parallel)?;
    let mut records = Vec::new();
    for t in start_round..=train.rounds {
        let ids = sample_clients(
            num_clients,
            train.participation,
            &mut substream(train.seed, "sampling", &[t as u64]),
        );
        let run_one = |&id: &usize| -> Result<LocalOutcome> {
            let shard = client_data[id]
                .as_ref()
                .ok_or_else(|| Error::Data(format!("client {id} has no samples")))?;
            local_train(arch, &global, shard, train, loss, t, id)
        };
        let outcomes: Vec<LocalOutcome> = match &pool {
            Some(p) => p.install(|| ids.par_iter().map(run_one).collect::<Result<_>>())?,
            None => ids.iter().map(run_one).collect::<Result<_>>()?,
        };

        let aggregated = aggregate(outcomes.iter().map(|o| &o.params))?;
        server_step(server, &mut global, &aggregated)?;

        let do_eval = eval_set.is_some()
            && (t == train.rounds || (opts.eval_every > 0 && t % opts.eval_every == 0));
        let (accuracy, collapse, deviation) = if do_eval {
            let eval = eval_set.expect("checked above");
            let (acc, features, probs) = eval_pass(arch, &global, eval)?;
            let stats = class_statistics(&features, &probs, &eval.labels)?;
            let report = deviation_report(&features, &eval.labels, &stats)?;
            let metrics = collapse_metrics(&features, &eval.labels)?;
            (Some(acc), Some(metrics), Some(DeviationSummary::from(&report)))
        } else {
            (None, None, None)
        };

        let record = RoundRecord {
            round: t,
            client_losses: outcomes.iter().map(|o| o.final_loss()).collect(),
            active_clients: ids,
            effective_lr: effective_lr(train, t),
            accuracy,
            collapse,
            deviation,
        };
        records.push(record);
        on_round(records.last().expect("just pushed"))?;

        if let Some(dir) = &opts.checkpoint_dir {
            if t == train.rounds || (opts.checkpoint_every > 0 && t % opts.checkpoint_every == 0)
            {
                std::fs::create_dir_all(dir)?;
                save_checkpoint(&dir.join(format!("round_{t:05}.ckpt")), t, &global, server)?;
            }
        }
    }
    Ok(TrainingRun { records, model: global })
}

//! The recursive training protocol: minibatch training with warmup +
//! cosine schedules, the width-halving recursion driver, and the
//! experiment runner that produces accuracy-vs-FLOPs curves.
//!
//! Every training phase restarts its schedule and optimizer from
//! scratch — a coupled wide model never inherits momentum or moment
//! buffers from its parents. Seeds for leaf initialization, coupling
//! noise, and batch shuffling are derived from the root seed and the
//! tree path, so parallel and serial execution of sibling subtrees
//! produce identical results.

use serde::{Deserialize, Serialize};

use crate::budget::{forward_flops, round_epochs, split_epoch_budget, training_flops, epochs_from_alpha};
use crate::checkpoint::{Checkpoint, Lineage};
use crate::coupling::{couple_checkpoint, PaddingMode};
use crate::data::{Dataset, TaskData};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, shuffled_indices};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Precision, Tensor};
use crate::zoo::{Mode, Model, ModelSpec};

// ── configuration ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

/// Hyperparameters of one training phase. The defaults are desk-scale
/// (small synthetic tasks), not a large-scale recipe; every field can
/// be overridden and the full config is recorded in the run record.
/// Missing fields deserialize to the defaults; unknown keys are
/// rejected so config typos surface instead of silently defaulting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    /// AdamW moment decays and denominator epsilon.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: u64,
    pub total_epochs: u64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::AdamW,
            base_lr: 1e-3,
            weight_decay: 0.05,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            warmup_epochs: 2,
            total_epochs: 10,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Field sanity alone — everything except the warmup/total
    /// relation, which recursion drivers override per phase.
    pub fn validate_rates(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.momentum >= 0.0) {
            return Err(Error::InvalidSpec { detail: "rates must be nonnegative".into() });
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidSpec { detail: "betas must lie in [0,1) and eps must be positive".into() });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec { detail: "batch size must be positive".into() });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_rates()?;
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::InvalidSpec {
                detail: format!(
                    "warmup ({}) must be shorter than the run ({} epochs)",
                    self.warmup_epochs, self.total_epochs
                ),
            });
        }
        Ok(())
    }

    /// Copy with the per-phase fields a recursion node overrides.
    fn for_phase(&self, seed: u64, total_epochs: u64) -> TrainConfig {
        let mut c = self.clone();
        c.seed = seed;
        c.total_epochs = total_epochs;
        // A short phase cannot afford the full warmup.
        c.warmup_epochs = self.warmup_epochs.min(total_epochs.saturating_sub(1));
        c
    }
}

/// Learning rate at a global step: linear warmup from 0 to the base
/// rate over the warmup steps, then cosine decay reaching exactly 0 at
/// the final step.
pub fn lr_at_step(base_lr: f64, step: u64, total_steps: u64, warmup_steps: u64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let t = (step - warmup_steps) as f64;
    let span = (total_steps - warmup_steps) as f64 - 1.0;
    if span <= 0.0 {
        return 0.0;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t / span).cos())
}

// ── optimizer ───────────────────────────────────────────────────────

/// Optimizer state. Constructed fresh for every training phase; the
/// `buffers_all_zero` probe exists so restart semantics are testable.
pub struct Optimizer {
    kind: OptimizerKind,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Optimizer {
        let first_moment = model
            .params()
            .iter()
            .map(|p| if p.trainable { vec![0.0; p.tensor.numel()] } else { Vec::new() })
            .collect::<Vec<_>>();
        let second_moment = match kind {
            OptimizerKind::AdamW => first_moment.clone(),
            OptimizerKind::SgdMomentum => vec![Vec::new(); first_moment.len()],
        };
        Optimizer { kind, step_count: 0, first_moment, second_moment }
    }

    pub fn buffers_all_zero(&self) -> bool {
        self.step_count == 0
            && self
                .first_moment
                .iter()
                .chain(&self.second_moment)
                .all(|b| b.iter().all(|&v| v == 0.0))
    }

    /// Apply one update. `param_vars` maps parameter indices to their
    /// tape handles for this step's graph.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &Gradients,
        param_vars: &[(usize, Var)],
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for &(idx, var) in param_vars {
            if !model.params()[idx].trainable {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            let p = &model.params()[idx].tensor;
            let shape = p.shape().to_vec();
            let precision = p.precision();
            let mut updated = p.data().to_vec();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let vel = &mut self.first_moment[idx];
                    for ((w, v), &gi) in updated.iter_mut().zip(vel.iter_mut()).zip(g) {
                        *v = config.momentum * *v + gi;
                        *w -= lr * (*v + config.weight_decay * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let bc1 = 1.0 - config.beta1.powi(t as i32);
                    let bc2 = 1.0 - config.beta2.powi(t as i32);
                    let (m, v) = {
                        let (a, b) = (&mut self.first_moment, &mut self.second_moment);
                        (&mut a[idx], &mut b[idx])
                    };
                    for (((w, mi), vi), &gi) in updated.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
                        *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * (mhat / (vhat.sqrt() + config.eps) + config.weight_decay * *w);
                    }
                }
            }
            model.set_param_tensor(idx, Tensor::new(shape, updated, precision)?)?;
        }
        Ok(())
    }
}

// ── run records ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: u64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub lr_first: f64,
    pub lr_last: f64,
    /// Training cost of this run through the end of this epoch.
    pub cumulative_flops: f64,
}

/// Complete record of one training phase.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub level: usize,
    pub width: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub forward_flops_per_image: f64,
    pub epochs: Vec<EpochStat>,
    pub training_flops: f64,
    pub final_eval_accuracy: Option<f64>,
    pub lineage: Lineage,
}

impl RunRecord {
    pub fn check(&self) -> Result<()> {
        let mut prev = 0.0;
        for (i, e) in self.epochs.iter().enumerate() {
            if e.epoch != i as u64 {
                return Err(Error::State { detail: format!("epoch records not contiguous at {i}") });
            }
            if e.cumulative_flops < prev {
                return Err(Error::State { detail: format!("cumulative FLOPs decreased at epoch {i}") });
            }
            prev = e.cumulative_flops;
        }
        Ok(())
    }
}

// ── evaluation helpers ──────────────────────────────────────────────

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of dataset rows whose top logit matches the label.
pub fn eval_accuracy(model: &mut Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Domain { detail: "cannot evaluate on an empty dataset".into() });
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk, model.precision)?;
        let logits = model.eval_logits(&x)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean cross-entropy of the model over a dataset (eval mode).
pub fn eval_cross_entropy(model: &mut Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Domain { detail: "cannot evaluate on an empty dataset".into() });
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut weighted = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk, model.precision)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, Mode::Eval)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        weighted += tape.value(loss).item()? * chunk.len() as f64;
    }
    Ok(weighted / ds.len() as f64)
}

// ── single-phase training ───────────────────────────────────────────

fn as_training_error(e: Error, epoch: u64, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training {
            epoch,
            batch,
            detail: format!("non-finite values in {op}; the step diverged"),
        },
        other => other,
    }
}

/// Train one model for `config.total_epochs` epochs of minibatch
/// optimization. The schedule and optimizer are constructed here and
/// die here; nothing is inherited across phases. Returns the trained
/// checkpoint and the per-epoch record.
pub fn train(
    mut model: Model,
    data: &TaskData,
    config: &TrainConfig,
    label: &str,
    level: usize,
    mut lineage: Lineage,
) -> Result<(Checkpoint, RunRecord)> {
    config.validate()?;
    if model.precision != config.precision {
        return Err(Error::Incompatible {
            detail: "model precision differs from the training config's".into(),
        });
    }
    if model.spec.input_shape != data.train.input_shape {
        return Err(Error::Incompatible {
            detail: format!(
                "model expects input {:?}, dataset provides {:?}",
                model.spec.input_shape, data.train.input_shape
            ),
        });
    }
    if model.spec.num_classes != data.train.num_classes {
        return Err(Error::Incompatible {
            detail: format!(
                "model has {} classes, dataset has {}",
                model.spec.num_classes, data.train.num_classes
            ),
        });
    }

    let n = data.train.len();
    if n == 0 {
        return Err(Error::Domain { detail: "training split is empty".into() });
    }
    let forward = forward_flops(&model.spec)?;
    let steps_per_epoch = n.div_ceil(config.batch_size) as u64;
    let total_steps = config.total_epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;

    let mut optimizer = Optimizer::new(config.optimizer, &model);
    debug_assert!(optimizer.buffers_all_zero());

    let mut stats: Vec<EpochStat> = Vec::with_capacity(config.total_epochs as usize);
    let mut global_step = 0u64;
    for epoch in 0..config.total_epochs {
        let mut order_rng = rng_from_seed(derive_seed(config.seed, &format!("shuffle/{epoch}")));
        let order = shuffled_indices(&mut order_rng, n);
        let mut loss_weighted = 0.0;
        let mut lr_first = f64::NAN;
        let mut lr_last = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let lr = lr_at_step(config.base_lr, global_step, total_steps, warmup_steps);
            if batch_idx == 0 {
                lr_first = lr;
            }
            lr_last = lr;
            let (x, labels) = data.train.batch(chunk, config.precision)?;
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &x, Mode::Train)
                .map_err(|e| as_training_error(e, epoch, batch_idx))?;
            let loss_var = tape
                .softmax_cross_entropy(out.logits, &labels)
                .map_err(|e| as_training_error(e, epoch, batch_idx))?;
            let loss = tape.value(loss_var).item()?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    detail: format!("loss became {loss}"),
                });
            }
            let grads = tape.backward(loss_var).map_err(|e| as_training_error(e, epoch, batch_idx))?;
            optimizer
                .step(&mut model, &grads, &out.param_vars, lr, config)
                .map_err(|e| as_training_error(e, epoch, batch_idx))?;
            loss_weighted += loss * chunk.len() as f64;
            global_step += 1;
        }
        let eval_acc = eval_accuracy(&mut model, &data.eval, config.batch_size)?;
        stats.push(EpochStat {
            epoch,
            train_loss: loss_weighted / n as f64,
            eval_accuracy: eval_acc,
            lr_first,
            lr_last,
            cumulative_flops: training_flops(forward, (epoch + 1) as f64, n as u64),
        });
    }

    lineage.epochs_trained = config.total_epochs;
    let final_eval_accuracy = stats.last().map(|s| s.eval_accuracy);
    let record = RunRecord {
        label: label.to_string(),
        level,
        width: model.spec.width,
        seed: config.seed,
        config: config.clone(),
        forward_flops_per_image: forward,
        epochs: stats,
        training_flops: training_flops(forward, config.total_epochs as f64, n as u64),
        final_eval_accuracy,
        lineage: lineage.clone(),
    };
    let checkpoint = Checkpoint::from_model(&model, config.seed, config.total_epochs, lineage);
    Ok((checkpoint, record))
}

// ── the recursion driver ────────────────────────────────────────────

/// How a node's epoch budget is divided between its children and its
/// own wide phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Recursive epoch split: narrow = e/(r+2) each, wide = e*r/(r+2).
    EpochSplit,
    /// Level epochs from the FLOPs-budget closed form; the budget is
    /// the cost of `epochs` at the target, and level i receives
    /// epochs_target / r^i.
    FlopsSplit,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::EpochSplit => "epoch_split",
            SplitMode::FlopsSplit => "flops_split",
        }
    }

    pub fn from_str_tag(s: &str) -> Option<SplitMode> {
        match s {
            "epoch_split" => Some(SplitMode::EpochSplit),
            "flops_split" => Some(SplitMode::FlopsSplit),
            _ => None,
        }
    }
}

/// Record tree of one recursion: leaves are scratch-trained narrow
/// models, interior nodes are coupled-then-trained wide models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTree {
    pub record: RunRecord,
    pub children: Vec<RunTree>,
}

impl RunTree {
    pub fn leaves(&self) -> usize {
        if self.children.is_empty() {
            1
        } else {
            self.children.iter().map(RunTree::leaves).sum()
        }
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(RunTree::depth).max().map_or(0, |d| d + 1)
    }

    pub fn flatten(&self) -> Vec<&RunRecord> {
        let mut out = vec![&self.record];
        for c in &self.children {
            out.extend(c.flatten());
        }
        out
    }

    /// Total pipeline cost, aggregated per level as count x per-run
    /// cost. Runs at one level share identical cost by construction,
    /// so this reproduces the planner's sum bit-for-bit.
    pub fn total_flops(&self) -> f64 {
        let mut per_level: Vec<(u64, f64)> = Vec::new();
        self.collect_levels(&mut per_level);
        per_level.iter().map(|(count, flops)| *count as f64 * flops).sum()
    }

    fn collect_levels(&self, acc: &mut Vec<(u64, f64)>) {
        let level = self.record.level;
        if acc.len() <= level {
            acc.resize(level + 1, (0, 0.0));
        }
        acc[level].0 += 1;
        acc[level].1 = self.record.training_flops;
        for c in &self.children {
            c.collect_levels(acc);
        }
    }
}

struct RecursionCtx<'a> {
    data: &'a TaskData,
    base_config: &'a TrainConfig,
    root_seed: u64,
    r: f64,
    padding: PaddingMode,
    mode: SplitMode,
    /// FlopsSplit only: per-level epochs fixed up front.
    level_epochs: Vec<f64>,
}

/// The recursive protocol: train two halved models on derived seeds,
/// couple them into the wide model, then train the wide model with a
/// fully restarted schedule. Recursion bottoms out when the width
/// drops below `min_size`. Returns the target checkpoint and the full
/// record tree.
pub fn rbdc_train(
    spec: &ModelSpec,
    epochs: f64,
    min_size: usize,
    r: f64,
    padding: PaddingMode,
    data: &TaskData,
    config: &TrainConfig,
    mode: SplitMode,
) -> Result<(Checkpoint, RunTree)> {
    spec.validate()?;
    config.validate_rates()?;
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain { detail: format!("training ratio must be positive and finite, got {r}") });
    }
    if !(epochs >= 0.0) || !epochs.is_finite() {
        return Err(Error::Domain { detail: format!("epoch budget must be nonnegative, got {epochs}") });
    }
    if min_size == 0 {
        return Err(Error::Domain { detail: "min_size must be positive".into() });
    }

    // Width chain: level i has width W / 2^i; the last level is the
    // first width below min_size.
    let mut chain = vec![spec.clone()];
    while chain.last().expect("nonempty").width >= min_size {
        let next = chain.last().expect("nonempty").halve()?;
        chain.push(next);
    }
    let steps = chain.len() - 1;

    let level_epochs = match mode {
        SplitMode::EpochSplit => Vec::new(),
        SplitMode::FlopsSplit => {
            let cost = crate::budget::CostModel::from_spec(spec, steps, data.train.len() as u64)?;
            // Budget equals `epochs` at the target model; alpha = 1.
            let target = epochs_from_alpha(1.0, epochs.max(f64::MIN_POSITIVE), r, steps, Some(&cost))?;
            (0..=steps).map(|i| target / r.powi(i as i32)).collect()
        }
    };

    let ctx = RecursionCtx {
        data,
        base_config: config,
        root_seed: config.seed,
        r,
        padding,
        mode,
        level_epochs,
    };
    recurse(&ctx, &chain, 0, epochs, "root")
}

fn recurse(
    ctx: &RecursionCtx<'_>,
    chain: &[ModelSpec],
    level: usize,
    budget: f64,
    path: &str,
) -> Result<(Checkpoint, RunTree)> {
    let spec = &chain[level];
    let is_leaf = level == chain.len() - 1;
    let own_epochs_raw = match (is_leaf, ctx.mode) {
        (true, SplitMode::EpochSplit) => budget,
        (false, SplitMode::EpochSplit) => split_epoch_budget(budget, ctx.r)?.1,
        (_, SplitMode::FlopsSplit) => ctx.level_epochs[level],
    };
    let own_epochs = round_epochs(own_epochs_raw);
    let phase_config = ctx
        .base_config
        .for_phase(derive_seed(ctx.root_seed, &format!("train/{path}")), own_epochs);

    if is_leaf {
        let init_seed = derive_seed(ctx.root_seed, &format!("init/{path}"));
        let model = Model::build(spec, init_seed, ctx.base_config.precision)?;
        let lineage = Lineage::leaf(path, spec.width, init_seed, 0);
        let (ckpt, record) = train(model, ctx.data, &phase_config, path, level, lineage)?;
        return Ok((ckpt, RunTree { record, children: Vec::new() }));
    }

    let child_budget = match ctx.mode {
        SplitMode::EpochSplit => split_epoch_budget(budget, ctx.r)?.0,
        SplitMode::FlopsSplit => 0.0, // unused; levels are fixed up front
    };
    let (left_ckpt, left_tree) = recurse(ctx, chain, level + 1, child_budget, &format!("{path}.L"))?;
    let (right_ckpt, right_tree) = recurse(ctx, chain, level + 1, child_budget, &format!("{path}.R"))?;

    let couple_seed = derive_seed(ctx.root_seed, &format!("couple/{path}"));
    let coupled = couple_checkpoint(&left_ckpt, &right_ckpt, ctx.padding, couple_seed)?;
    let model = coupled.to_model()?;
    let mut lineage = coupled.metadata.lineage.clone();
    lineage.label = path.to_string();
    let (ckpt, record) = train(model, ctx.data, &phase_config, path, level, lineage)?;
    Ok((ckpt, RunTree { record, children: vec![left_tree, right_tree] }))
}

// ── experiments ─────────────────────────────────────────────────────

/// What one experiment point runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlanKind {
    /// Train the target from scratch for a fixed number of epochs.
    Baseline { epochs: u64 },
    /// The recursive protocol under a matched epoch budget.
    Rbdc {
        epochs: f64,
        min_size: usize,
        r: f64,
        padding: PaddingMode,
        mode: SplitMode,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub label: String,
    pub kind: PlanKind,
    pub seeds: Vec<u64>,
}

/// One point of the accuracy-vs-FLOPs curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveRow {
    pub protocol: String,
    pub steps: usize,
    pub r: f64,
    pub normalized_flops: f64,
    pub accuracy: f64,
    pub seed: u64,
}

/// Render curve rows as CSV.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("protocol,steps,r,normalized_flops,accuracy,seed\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            row.protocol, row.steps, row.r, row.normalized_flops, row.accuracy, row.seed
        ));
    }
    out
}

/// Train the target from scratch (the standard protocol).
pub fn baseline_train(
    spec: &ModelSpec,
    epochs: u64,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<(Checkpoint, RunRecord)> {
    let phase = config.for_phase(config.seed, epochs);
    let init_seed = derive_seed(config.seed, "init/root");
    let model = Model::build(spec, init_seed, config.precision)?;
    let lineage = Lineage::leaf("baseline", spec.width, init_seed, 0);
    train(model, data, &phase, "baseline", 0, lineage)
}

/// Execute every (plan, seed) pair as a complete, independent run and
/// collect the curve. Runs are never continued from one another; each
/// point retrains from scratch.
pub fn run_experiment(
    spec: &ModelSpec,
    plans: &[ExperimentPlan],
    data: &TaskData,
    config: &TrainConfig,
    baseline_epochs: u64,
) -> Result<Vec<CurveRow>> {
    if baseline_epochs == 0 {
        return Err(Error::Domain { detail: "baseline epochs must be positive".into() });
    }
    let forward = forward_flops(spec)?;
    let n = data.train.len() as u64;
    let baseline_flops = training_flops(forward, baseline_epochs as f64, n);
    let mut rows = Vec::new();
    for plan in plans {
        for &seed in &plan.seeds {
            let mut run_config = config.clone();
            run_config.seed = seed;
            let (accuracy, total, steps, r) = match plan.kind {
                PlanKind::Baseline { epochs } => {
                    let (_, record) = baseline_train(spec, epochs, data, &run_config)?;
                    let acc = record.final_eval_accuracy.ok_or_else(|| Error::State {
                        detail: "baseline run produced no evaluation".into(),
                    })?;
                    (acc, record.training_flops, 0, 0.0)
                }
                PlanKind::Rbdc { epochs, min_size, r, padding, mode } => {
                    let (_, tree) = rbdc_train(spec, epochs, min_size, r, padding, data, &run_config, mode)?;
                    let acc = tree.record.final_eval_accuracy.ok_or_else(|| Error::State {
                        detail: "recursive run produced no evaluation".into(),
                    })?;
                    (acc, tree.total_flops(), tree.depth(), r)
                }
            };
            rows.push(CurveRow {
                protocol: plan.label.clone(),
                steps,
                r,
                normalized_flops: total / baseline_flops,
                accuracy,
                seed,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::zoo::Family;

    fn mlp_spec(width: usize) -> ModelSpec {
        ModelSpec {
            family: Family::Mlp,
            width,
            depth: 1,
            heads: 0,
            head_dim: 0,
            patch_size: 0,
            input_shape: vec![12],
            num_classes: 4,
            min_width: 2,
        }
    }

    fn tiny_task() -> TaskData {
        gen_synthetic(4, 12, 8, &[12], 3).unwrap()
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            total_epochs: 4,
            warmup_epochs: 1,
            precision: Precision::F64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let base = 1e-3;
        let total = 100;
        let warmup = 10;
        assert_eq!(lr_at_step(base, 0, total, warmup), 0.0);
        assert_eq!(lr_at_step(base, warmup, total, warmup), base);
        let last = lr_at_step(base, total - 1, total, warmup);
        assert!(last <= 1e-3 * base, "final lr {last}");
        assert_eq!(lr_at_step(base, total, total, warmup), 0.0);
        // Monotone rise through warmup.
        for s in 0..warmup {
            assert!(lr_at_step(base, s, total, warmup) < lr_at_step(base, s + 1, total, warmup));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.total_epochs = 2;
        c.warmup_epochs = 2;
        assert!(c.validate().is_err());
        c.total_epochs = 0;
        assert!(c.validate().is_ok(), "0-epoch configs are allowed");
        let mut c = TrainConfig::default();
        c.base_lr = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epoch_run_returns_initialization() {
        let spec = mlp_spec(8);
        let task = tiny_task();
        let mut config = fast_config();
        config.total_epochs = 0;
        config.warmup_epochs = 0;
        let model = Model::build(&spec, 7, Precision::F64).unwrap();
        let reference = Model::build(&spec, 7, Precision::F64).unwrap();
        let (ckpt, record) = train(model, &task, &config, "t", 0, Lineage::leaf("t", 8, 7, 0)).unwrap();
        assert!(record.epochs.is_empty());
        assert_eq!(record.training_flops, 0.0);
        assert!(record.final_eval_accuracy.is_none());
        for (a, b) in ckpt.params.iter().zip(reference.params()) {
            assert!(a.tensor.bits_eq(&b.tensor), "{} changed in a 0-epoch run", a.name);
        }
    }

    #[test]
    fn training_descends_on_the_synthetic_task() {
        let spec = mlp_spec(16);
        let task = gen_synthetic(4, 25, 10, &[12], 3).unwrap();
        let mut config = fast_config();
        config.total_epochs = 10;
        config.warmup_epochs = 2;
        let model = Model::build(&spec, 1, Precision::F64).unwrap();
        let (_, record) = train(model, &task, &config, "t", 0, Lineage::leaf("t", 16, 1, 0)).unwrap();
        let first = record.epochs.first().unwrap().train_loss;
        let last = record.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss failed to descend: {first} -> {last}");
        record.check().unwrap();
    }

    #[test]
    fn fresh_optimizer_buffers_are_zero_and_move_after_a_step() {
        let spec = mlp_spec(8);
        let task = tiny_task();
        let mut model = Model::build(&spec, 2, Precision::F64).unwrap();
        let opt = Optimizer::new(OptimizerKind::AdamW, &model);
        assert!(opt.buffers_all_zero());

        let mut opt = Optimizer::new(OptimizerKind::AdamW, &model);
        let (x, labels) = task.train.batch(&[0, 1, 2, 3], Precision::F64).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, Mode::Train).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        opt.step(&mut model, &grads, &out.param_vars, 1e-3, &fast_config()).unwrap();
        assert!(!opt.buffers_all_zero());
    }

    #[test]
    fn training_is_bit_reproducible_at_64_bit() {
        let spec = mlp_spec(8);
        let task = tiny_task();
        let config = fast_config();
        let run = || {
            let model = Model::build(&spec, 5, Precision::F64).unwrap();
            train(model, &task, &config, "t", 0, Lineage::leaf("t", 8, 5, 0)).unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert!(pa.tensor.bits_eq(&pb.tensor), "{} differs between identical runs", pa.name);
        }
        assert_eq!(
            ra.epochs.last().unwrap().train_loss.to_bits(),
            rb.epochs.last().unwrap().train_loss.to_bits()
        );
    }

    #[test]
    fn base_case_trains_exactly_one_model() {
        let spec = mlp_spec(8);
        let task = tiny_task();
        let (_, tree) = rbdc_train(
            &spec,
            4.0,
            9, // width 8 < 9: base case immediately
            2.0,
            PaddingMode::Zero,
            &task,
            &fast_config(),
            SplitMode::EpochSplit,
        )
        .unwrap();
        assert_eq!(tree.leaves(), 1);
        assert_eq!(tree.depth(), 0);
        assert!(tree.children.is_empty());
        assert_eq!(tree.record.width, 8);
    }

    #[test]
    fn one_step_recursion_uses_the_75_150_split() {
        let spec = mlp_spec(16);
        let task = tiny_task();
        let (ckpt, tree) = rbdc_train(
            &spec,
            300.0 / 25.0, // 12 epochs total: narrow 3, wide 6 at r=2
            16,           // width 16 recurses once; width 8 is the base case
            2.0,
            PaddingMode::Zero,
            &task,
            &TrainConfig { total_epochs: 0, warmup_epochs: 0, ..fast_config() },
            SplitMode::EpochSplit,
        )
        .unwrap();
        assert_eq!(ckpt.spec.width, 16);
        assert_eq!(tree.children.len(), 2);
        assert_eq!(tree.record.config.total_epochs, 6); // 12*2/(2+2)
        for child in &tree.children {
            assert_eq!(child.record.config.total_epochs, 3); // 12/(2+2)
            assert_eq!(child.record.width, 8);
        }
        // Lineage mirrors the tree.
        assert_eq!(ckpt.metadata.lineage.children.len(), 2);
        assert_eq!(ckpt.metadata.lineage.coupling_depth(), 1);
    }

    #[test]
    fn two_step_recursion_has_the_right_shape() {
        let spec = mlp_spec(16);
        let task = tiny_task();
        let (_, tree) = rbdc_train(
            &spec,
            16.0,
            5, // 16 -> 8 -> 4(<5): leaves at width 4
            2.0,
            PaddingMode::Zero,
            &task,
            &TrainConfig { total_epochs: 0, warmup_epochs: 0, ..fast_config() },
            SplitMode::EpochSplit,
        )
        .unwrap();
        assert_eq!(tree.depth(), 2);
        assert_eq!(tree.leaves(), 4);
        let records = tree.flatten();
        assert_eq!(records.len(), 7);
        for level in 0..3 {
            let count = records.iter().filter(|r| r.level == level).count();
            assert_eq!(count, 1 << level, "level {level}");
        }
        let widths: Vec<usize> = records.iter().map(|r| r.width).collect();
        assert_eq!(widths.iter().filter(|&&w| w == 4).count(), 4);
    }

    #[test]
    fn sibling_leaves_differ() {
        let spec = mlp_spec(16);
        let task = tiny_task();
        let (_, tree) = rbdc_train(
            &spec,
            8.0,
            16,
            2.0,
            PaddingMode::Zero,
            &task,
            &fast_config(),
            SplitMode::EpochSplit,
        )
        .unwrap();
        let seeds: Vec<u64> = tree.children.iter().map(|c| c.record.lineage.seed).collect();
        assert_ne!(seeds[0], seeds[1], "sibling leaves must be seeded differently");
    }

    #[test]
    fn wide_phase_restarts_the_schedule() {
        let spec = mlp_spec(16);
        let task = tiny_task();
        let config = TrainConfig { warmup_epochs: 1, ..fast_config() };
        let (_, tree) = rbdc_train(
            &spec,
            12.0,
            16,
            2.0,
            PaddingMode::Zero,
            &task,
            &config,
            SplitMode::EpochSplit,
        )
        .unwrap();
        // The first wide step sits at the very start of a fresh warmup.
        assert_eq!(tree.record.epochs[0].lr_first, 0.0);
        // And the narrow phases ended near zero, so inheritance would show.
        for child in &tree.children {
            let last = child.record.epochs.last().unwrap().lr_last;
            assert!(last < config.base_lr * 0.5, "narrow phase should end decayed, got {last}");
        }
    }

    #[test]
    fn flops_ledger_matches_the_planner_exactly() {
        let spec = mlp_spec(16);
        let task = tiny_task();
        for mode in [SplitMode::EpochSplit, SplitMode::FlopsSplit] {
            let (_, tree) = rbdc_train(
                &spec,
                14.0,
                5,
                2.0,
                PaddingMode::Zero,
                &task,
                &TrainConfig { total_epochs: 0, warmup_epochs: 0, ..fast_config() },
                mode,
            )
            .unwrap();
            let records = tree.flatten();
            let steps = tree.depth();
            let cost =
                crate::budget::CostModel::from_spec(&spec, steps, task.train.len() as u64).unwrap();
            let mut realized = vec![0.0; steps + 1];
            for r in &records {
                realized[r.level] = r.config.total_epochs as f64;
            }
            let planned = crate::budget::pipeline_flops(&cost, &realized).unwrap();
            assert_eq!(
                tree.total_flops().to_bits(),
                planned.to_bits(),
                "{}: ledger must equal the planner bit-for-bit",
                mode.as_str()
            );
        }
    }

    #[test]
    fn experiment_rows_share_flops_across_seeds() {
        let spec = mlp_spec(8);
        let task = tiny_task();
        let plans = vec![ExperimentPlan {
            label: "baseline".into(),
            kind: PlanKind::Baseline { epochs: 2 },
            seeds: vec![1, 2],
        }];
        let rows = run_experiment(&spec, &plans, &task, &fast_config(), 4).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].normalized_flops, rows[1].normalized_flops);
        assert!((rows[0].normalized_flops - 0.5).abs() < 1e-12, "2 epochs over a 4-epoch baseline");
        assert_ne!(rows[0].seed, rows[1].seed);
        let csv = curve_csv(&rows);
        assert!(csv.starts_with("protocol,steps,r,normalized_flops,accuracy,seed\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}

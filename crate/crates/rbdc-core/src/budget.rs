//! FLOPs accounting and epoch-budget planning.
//!
//! Conventions: 1 MAC counts as 2 FLOPs; a training step costs 3x the
//! forward pass; normalization layers and activations count as zero
//! MACs (linear and conv layers dominate). Both conventions are
//! recorded in emitted plans so reports are self-describing.
//!
//! Level indexing: level 0 is the full-width target model; level `i`
//! holds `2^i` models at width `W / 2^i`. A plan covers levels `0..=S`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::{cnn_geometry, head_in_dim, mlp_hidden, vit_patch_tokens, Family, ModelSpec};

pub type Flops = f64;

/// Training-step cost as a multiple of the forward cost.
pub const TRAIN_STEP_FORWARD_MULTIPLE: f64 = 3.0;
/// FLOPs per multiply-accumulate.
pub const FLOPS_PER_MAC: f64 = 2.0;

/// Linear layer cost: one MAC per (input, output, token) triple.
pub fn linear_flops(d_in: usize, d_out: usize, tokens: usize) -> Flops {
    FLOPS_PER_MAC * (d_in * d_out * tokens) as f64
}

/// Conv layer cost: one MAC per kernel tap per output position.
pub fn conv_flops(c_in: usize, c_out: usize, kernel: usize, h_out: usize, w_out: usize) -> Flops {
    FLOPS_PER_MAC * (c_out * c_in * kernel * kernel * h_out * w_out) as f64
}

/// Forward cost of one image through a model of the given spec.
pub fn forward_flops(spec: &ModelSpec) -> Result<Flops> {
    spec.validate()?;
    let classes = spec.num_classes;
    let total = match spec.family {
        Family::Mlp => {
            let w = spec.width;
            let hidden = mlp_hidden(spec);
            let mut f = linear_flops(spec.input_dim(), w, 1);
            f += spec.depth as f64 * (linear_flops(w, hidden, 1) + linear_flops(hidden, w, 1));
            f + linear_flops(head_in_dim(spec), classes, 1)
        }
        Family::MiniCnn => {
            let mut f = 0.0;
            for g in cnn_geometry(spec)? {
                f += conv_flops(g.c_in, g.c_out, g.kernel, g.h_out, g.w_out);
            }
            f + linear_flops(head_in_dim(spec), classes, 1)
        }
        Family::MiniVit => {
            let w = spec.width;
            let p = spec.patch_size;
            let patches = vit_patch_tokens(spec);
            let tokens = patches + 1;
            let hp = spec.input_shape[1] / p;
            let wp = spec.input_shape[2] / p;
            let mut f = conv_flops(spec.input_shape[0], w, p, hp, wp);
            let per_block = linear_flops(w, 3 * w, tokens)          // QKV projection
                + FLOPS_PER_MAC * (tokens * tokens * w) as f64      // attention scores
                + FLOPS_PER_MAC * (tokens * tokens * w) as f64      // weighted value sum
                + linear_flops(w, w, tokens)                        // output projection
                + linear_flops(w, mlp_hidden(spec), tokens)
                + linear_flops(mlp_hidden(spec), w, tokens);
            f += spec.depth as f64 * per_block;
            f + linear_flops(head_in_dim(spec), classes, 1)
        }
    };
    Ok(total)
}

/// Cost of training one model for `epochs` passes over `dataset_size`
/// images: 3 x forward x epochs x images.
pub fn training_flops(forward: Flops, epochs: f64, dataset_size: u64) -> Flops {
    TRAIN_STEP_FORWARD_MULTIPLE * forward * epochs * dataset_size as f64
}

/// Per-level forward cost plus the level's nominal width.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LevelCost {
    pub width: usize,
    pub forward_flops: Flops,
}

/// Everything needed to price a recursion pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostModel {
    /// Indexed by level; entry 0 is the full-width target.
    pub levels: Vec<LevelCost>,
    pub dataset_size: u64,
    /// Recorded convention; always 2 in this crate.
    pub flops_per_mac: f64,
}

impl CostModel {
    pub fn new(levels: Vec<LevelCost>, dataset_size: u64) -> Result<CostModel> {
        let cm = CostModel { levels, dataset_size, flops_per_mac: FLOPS_PER_MAC };
        cm.validate()?;
        Ok(cm)
    }

    /// Derive costs for levels `0..=steps` by repeatedly halving the
    /// spec and pricing each level's forward pass.
    pub fn from_spec(spec: &ModelSpec, steps: usize, dataset_size: u64) -> Result<CostModel> {
        let mut levels = Vec::with_capacity(steps + 1);
        let mut s = spec.clone();
        for level in 0..=steps {
            levels.push(LevelCost { width: s.width, forward_flops: forward_flops(&s)? });
            if level < steps {
                s = s.halve()?;
            }
        }
        CostModel::new(levels, dataset_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Domain { detail: "cost model needs at least level 0".into() });
        }
        if self.dataset_size == 0 {
            return Err(Error::Domain { detail: "dataset size must be positive".into() });
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !(l.forward_flops > 0.0) || !l.forward_flops.is_finite() {
                return Err(Error::Domain { detail: format!("level {i} forward cost must be positive and finite") });
            }
            if i > 0 && l.forward_flops > self.levels[i - 1].forward_flops {
                return Err(Error::Domain {
                    detail: format!("forward cost rises from level {} to {}; narrower must not cost more", i - 1, i),
                });
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Total pipeline cost: level `i` trains `2^i` models.
/// `epochs[i]` is the per-model epoch count at level `i`.
pub fn pipeline_flops(cost: &CostModel, epochs: &[f64]) -> Result<Flops> {
    cost.validate()?;
    if epochs.len() != cost.levels.len() {
        return Err(Error::Domain {
            detail: format!("plan covers {} levels, cost model has {}", epochs.len(), cost.levels.len()),
        });
    }
    let mut total = 0.0;
    for (i, (&e, l)) in epochs.iter().zip(&cost.levels).enumerate() {
        if e < 0.0 {
            return Err(Error::Domain { detail: format!("negative epochs at level {i}") });
        }
        total += (1u64 << i) as f64 * training_flops(l.forward_flops, e, cost.dataset_size);
    }
    Ok(total)
}

/// Pipeline cost divided by the cost of training the target from
/// scratch for `baseline_epochs`.
pub fn normalized_flops(pipeline: Flops, baseline_epochs: f64, cost: &CostModel) -> Result<f64> {
    if !(baseline_epochs > 0.0) {
        return Err(Error::Domain { detail: "baseline epochs must be positive".into() });
    }
    cost.validate()?;
    Ok(pipeline / training_flops(cost.levels[0].forward_flops, baseline_epochs, cost.dataset_size))
}

/// Split one phase's epoch budget between the two narrow runs and the
/// wide run: narrow = epochs/(r+2) each, wide = epochs*r/(r+2), so that
/// 2*narrow + wide = epochs exactly (pre-rounding).
pub fn split_epoch_budget(epochs: f64, r: f64) -> Result<(f64, f64)> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain { detail: format!("training ratio must be positive and finite, got {r}") });
    }
    if epochs < 0.0 {
        return Err(Error::Domain { detail: format!("epoch budget must be nonnegative, got {epochs}") });
    }
    Ok((epochs / (r + 2.0), epochs * r / (r + 2.0)))
}

/// Per-level raw epochs when an epoch budget flows through the
/// recursive narrow/wide rule: every non-leaf level keeps the wide
/// share `e*r/(r+2)` and hands `e/(r+2)` to each child; the leaf level
/// trains its entire remaining budget. Index 0 is the target level.
pub fn epoch_split_schedule(epochs: f64, r: f64, steps: usize) -> Result<Vec<f64>> {
    if !epochs.is_finite() || epochs < 0.0 {
        return Err(Error::Domain { detail: format!("epoch budget must be nonnegative, got {epochs}") });
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut budget = epochs;
    for _ in 0..steps {
        let (narrow, wide) = split_epoch_budget(budget, r)?;
        out.push(wide);
        budget = narrow;
    }
    out.push(budget);
    Ok(out)
}

/// Geometric denominator sum of the budget closed form.
fn level_weighted_cost(cost: &CostModel, r: f64) -> f64 {
    cost.levels
        .iter()
        .enumerate()
        .map(|(i, l)| (2.0 / r).powi(i as i32) * l.forward_flops)
        .sum()
}

/// Target-level epoch count affordable under a total FLOPs budget,
/// given that level `i` gets `epochs_target / r^i` epochs:
/// budget / (3 |D| sum_i (2/r)^i F_i). Pre-rounding.
pub fn epochs_from_flops_budget(budget: Flops, cost: &CostModel, r: f64) -> Result<f64> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::Domain { detail: "FLOPs budget must be positive and finite".into() });
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain { detail: format!("training ratio must be positive and finite, got {r}") });
    }
    cost.validate()?;
    let denom = TRAIN_STEP_FORWARD_MULTIPLE * cost.dataset_size as f64 * level_weighted_cost(cost, r);
    Ok(budget / denom)
}

/// Target-level epochs as a multiple alpha of a baseline run. With a
/// cost model the form is exact:
/// alpha * baseline * F_0 / sum_i (2/r)^i F_i.
/// Without one, the quarter-cost approximation (F_i = F_0 / 4^i) gives
/// alpha * baseline / sum_i (1/(2r))^i.
pub fn epochs_from_alpha(
    alpha: f64,
    baseline_epochs: f64,
    r: f64,
    steps: usize,
    cost: Option<&CostModel>,
) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain { detail: format!("alpha must be positive and finite, got {alpha}") });
    }
    if !(baseline_epochs > 0.0) {
        return Err(Error::Domain { detail: "baseline epochs must be positive".into() });
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain { detail: format!("training ratio must be positive and finite, got {r}") });
    }
    match cost {
        Some(cm) => {
            cm.validate()?;
            if cm.steps() != steps {
                return Err(Error::Domain {
                    detail: format!("cost model covers {} steps, plan asks for {steps}", cm.steps()),
                });
            }
            Ok(alpha * baseline_epochs * cm.levels[0].forward_flops / level_weighted_cost(cm, r))
        }
        None => {
            let denom: f64 = (0..=steps).map(|i| (1.0 / (2.0 * r)).powi(i as i32)).sum();
            Ok(alpha * baseline_epochs / denom)
        }
    }
}

/// Per-level rounding rule: nearest integer, minimum 1.
pub fn round_epochs(raw: f64) -> u64 {
    raw.round().max(1.0) as u64
}

/// One emitted plan row. Rows are listed in training order (deepest
/// level first); `cumulative_flops` accumulates in that order and
/// `normalized` divides it by the baseline cost, so the last row's
/// `normalized` is the whole plan's figure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: usize,
    pub count: u64,
    pub width: usize,
    pub epochs: u64,
    pub epochs_raw: f64,
    pub flops: Flops,
    pub cumulative_flops: Flops,
    pub normalized: f64,
}

/// A complete epoch-budget plan over levels `0..=steps`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub steps: usize,
    pub ratio: f64,
    pub alpha: Option<f64>,
    pub epochs_target_raw: f64,
    pub baseline_epochs: f64,
    pub baseline_flops: Flops,
    pub total_flops: Flops,
    pub normalized_flops: f64,
    pub dataset_size: u64,
    pub flops_per_mac: f64,
    pub train_step_forward_multiple: f64,
    /// Training order: level `steps` first, level 0 last.
    pub rows: Vec<LevelRow>,
}

impl BudgetPlan {
    fn assemble(
        cost: &CostModel,
        r: f64,
        alpha: Option<f64>,
        epochs_target_raw: f64,
        epochs_raw: &[f64],
        baseline_epochs: f64,
    ) -> Result<BudgetPlan> {
        if !(baseline_epochs > 0.0) {
            return Err(Error::Domain { detail: "baseline epochs must be positive".into() });
        }
        let baseline_flops = training_flops(cost.levels[0].forward_flops, baseline_epochs, cost.dataset_size);
        let mut rows = Vec::with_capacity(cost.levels.len());
        let mut cumulative = 0.0;
        for level in (0..cost.levels.len()).rev() {
            let l = cost.levels[level];
            let count = 1u64 << level;
            let epochs = round_epochs(epochs_raw[level]);
            let flops = count as f64 * training_flops(l.forward_flops, epochs as f64, cost.dataset_size);
            cumulative += flops;
            rows.push(LevelRow {
                level,
                count,
                width: l.width,
                epochs,
                epochs_raw: epochs_raw[level],
                flops,
                cumulative_flops: cumulative,
                normalized: cumulative / baseline_flops,
            });
        }
        let total_flops = cumulative;
        Ok(BudgetPlan {
            steps: cost.steps(),
            ratio: r,
            alpha,
            epochs_target_raw,
            baseline_epochs,
            baseline_flops,
            total_flops,
            normalized_flops: total_flops / baseline_flops,
            dataset_size: cost.dataset_size,
            flops_per_mac: cost.flops_per_mac,
            train_step_forward_multiple: TRAIN_STEP_FORWARD_MULTIPLE,
            rows,
        })
    }

    /// Plan from a raw FLOPs budget.
    pub fn from_flops_budget(budget: Flops, cost: &CostModel, r: f64, baseline_epochs: f64) -> Result<BudgetPlan> {
        let target = epochs_from_flops_budget(budget, cost, r)?;
        let epochs: Vec<f64> = (0..cost.levels.len()).map(|i| target / r.powi(i as i32)).collect();
        BudgetPlan::assemble(cost, r, None, target, &epochs, baseline_epochs)
    }

    /// Plan from a baseline multiple (exact alpha form).
    pub fn from_alpha(alpha: f64, baseline_epochs: f64, r: f64, cost: &CostModel) -> Result<BudgetPlan> {
        let target = epochs_from_alpha(alpha, baseline_epochs, r, cost.steps(), Some(cost))?;
        let epochs: Vec<f64> = (0..cost.levels.len()).map(|i| target / r.powi(i as i32)).collect();
        BudgetPlan::assemble(cost, r, Some(alpha), target, &epochs, baseline_epochs)
    }

    /// Plan from explicit per-level epoch counts (level 0 first).
    pub fn from_epochs(cost: &CostModel, epochs: &[f64], r: f64, baseline_epochs: f64) -> Result<BudgetPlan> {
        if epochs.len() != cost.levels.len() {
            return Err(Error::Domain {
                detail: format!("{} epoch entries for {} levels", epochs.len(), cost.levels.len()),
            });
        }
        if let Some(e) = epochs.iter().find(|e| **e < 0.0 || !e.is_finite()) {
            return Err(Error::Domain { detail: format!("invalid epoch count {e}") });
        }
        BudgetPlan::assemble(cost, r, None, epochs[0], epochs, baseline_epochs)
    }

    /// CSV emission, training order, with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,count,width,epochs,flops,cumulative_flops,normalized\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6e},{:.6e},{:.6}\n",
                row.level, row.count, row.width, row.epochs, row.flops, row.cumulative_flops, row.normalized
            ));
        }
        out
    }
}

/// Render a normalized-FLOPs figure the way summary tables quote it:
/// truncated (not rounded) to two decimals, e.g. 0.6150 -> "0.61x".
pub fn normalized_label(normalized: f64) -> String {
    let truncated = (normalized * 100.0).floor() / 100.0;
    format!("{truncated:.2}x")
}

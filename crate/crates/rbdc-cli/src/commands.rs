//! Subcommand implementations.
//!
//! Every command reads its inputs, does the work through `rbdc_core`, writes
//! artifacts atomically (temp file + rename, so a crash never leaves a
//! half-written checkpoint), and prints a short human summary to stdout.
//! Commands return the process exit code; errors bubble up as
//! `rbdc_core::Error` and are mapped to exit codes in `main`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use rbdc_core::budget::{
    epoch_split_schedule, forward_flops, normalized_label, round_epochs, training_flops,
    BudgetPlan, CostModel, LevelCost, TRAIN_STEP_FORWARD_MULTIPLE,
};
use rbdc_core::checkpoint::Checkpoint;
use rbdc_core::coupling::{
    audit_coupling, couple_checkpoint, verify_ensemble_equivalence, CouplingReport, EnsembleMode,
    PaddingMode,
};
use rbdc_core::error::{Error, Result};
use rbdc_core::protocol::{
    baseline_train, curve_csv, rbdc_train, CurveRow, RunTree, SplitMode,
};
use rbdc_core::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use rbdc_core::tensor::Tensor;
use rbdc_core::zoo::ModelSpec;

use crate::config::RunConfigFile;

/// Everything went through and any verification that ran passed.
pub const EXIT_OK: i32 = 0;
/// Bad input: config, flags, or file contents failed validation.
pub const EXIT_INVALID: i32 = 1;
/// A verification ran to completion and did not pass.
pub const EXIT_VERIFY_FAILED: i32 = 2;
/// Training hit a numeric failure (non-finite loss or weights).
pub const EXIT_TRAINING_FAILED: i32 = 3;

/// Map a core error to the exit code contract.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Training { .. } => EXIT_TRAINING_FAILED,
        Error::VerificationRefused { .. } => EXIT_VERIFY_FAILED,
        _ => EXIT_INVALID,
    }
}

// ── atomic artifact writes ──────────────────────────────────────────────────

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::Io { detail: format!("creating `{}`: {}", parent.display(), e) })?;
        }
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .map_err(|e| Error::Io { detail: format!("creating temp file in `{}`: {}", dir.display(), e) })?;
    use std::io::Write;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .map_err(|e| Error::Io { detail: format!("writing `{}`: {}", path.display(), e) })?;
    tmp.persist(path)
        .map_err(|e| Error::Io { detail: format!("renaming into `{}`: {}", path.display(), e.error) })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { detail: e.to_string() })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

// ── shared flag/config plumbing ─────────────────────────────────────────────

/// Flags that override keys of the `plan` section. `None` means "keep the
/// config file's value". A budget flag (`--epochs`/`--alpha`/`--budget-flops`)
/// replaces the whole budget group so the exactly-one rule still applies.
#[derive(Debug, Default, Clone)]
pub struct PlanOverrides {
    pub ratio: Option<f64>,
    pub steps: Option<usize>,
    pub min_size: Option<usize>,
    pub mode: Option<SplitMode>,
    pub padding: Option<PaddingMode>,
    pub epochs: Option<f64>,
    pub alpha: Option<f64>,
    pub budget_flops: Option<f64>,
    pub baseline_epochs: Option<f64>,
    pub seed: Option<u64>,
}

impl PlanOverrides {
    pub fn apply(&self, cfg: &mut RunConfigFile) -> Result<()> {
        let plan = &mut cfg.plan;
        if let Some(r) = self.ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Domain {
                    detail: format!("--ratio must be a positive finite number, got {r}"),
                });
            }
            plan.ratio = r;
        }
        if let Some(s) = self.steps {
            plan.steps = Some(s);
        }
        if let Some(m) = self.min_size {
            plan.min_size = Some(m);
        }
        if let Some(m) = self.mode {
            plan.mode = m;
        }
        if let Some(p) = self.padding {
            plan.padding = p;
        }
        if self.epochs.is_some() || self.alpha.is_some() || self.budget_flops.is_some() {
            plan.epochs = self.epochs;
            plan.alpha = self.alpha;
            plan.budget_flops = self.budget_flops;
        }
        if let Some(b) = self.baseline_epochs {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Domain {
                    detail: format!("--baseline-epochs must be a positive finite number, got {b}"),
                });
            }
            plan.baseline_epochs = b;
        }
        if let Some(s) = self.seed {
            plan.seeds = vec![s];
        }
        Ok(())
    }
}

/// Recursion depth resolved from `steps` / `min_size`, whichever the run
/// specified. `steps == 0` is the plain baseline (no coupling); its
/// `min_size` is set above the width so the trainer would refuse to halve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthPlan {
    pub steps: usize,
    pub min_size: usize,
}

/// Number of halvings a width chain performs before dropping below `min_size`.
fn steps_for_min_size(width: usize, min_size: usize) -> usize {
    let mut w = width;
    let mut steps = 0;
    while w >= min_size && w >= 2 {
        w /= 2;
        steps += 1;
    }
    steps
}

pub fn resolve_depth(width: usize, steps: Option<usize>, min_size: Option<usize>) -> Result<DepthPlan> {
    match (steps, min_size) {
        (Some(0), None) => Ok(DepthPlan { steps: 0, min_size: width + 1 }),
        (Some(s), None) => {
            let min_size = width >> (s - 1);
            if min_size < 2 {
                return Err(Error::Domain {
                    detail: format!("steps: {s} halvings do not fit into width {width}"),
                });
            }
            Ok(DepthPlan { steps: s, min_size })
        }
        (None, Some(m)) => {
            if m < 2 {
                return Err(Error::Domain {
                    detail: format!("min_size must be at least 2, got {m}"),
                });
            }
            Ok(DepthPlan { steps: steps_for_min_size(width, m), min_size: m })
        }
        (Some(s), Some(m)) => {
            let implied = steps_for_min_size(width, m);
            if implied != s {
                return Err(Error::Domain {
                    detail: format!(
                        "steps {s} contradicts min_size {m}, which yields {implied} halvings from width {width}"
                    ),
                });
            }
            Ok(DepthPlan { steps: s, min_size: m })
        }
        (None, None) => Ok(DepthPlan { steps: 1, min_size: width }),
    }
}

/// The per-image forward costs the plan is priced against: either the
/// explicit `forward_costs` list from the config, or costs derived from the
/// model by halving it `steps` times.
fn resolve_cost_model(cfg: &RunConfigFile, depth: Option<DepthPlan>) -> Result<(CostModel, DepthPlan)> {
    let dataset_size = resolve_dataset_size(cfg)?;
    if let Some(costs) = &cfg.plan.forward_costs {
        if costs.is_empty() {
            return Err(Error::Domain {
                detail: "forward_costs needs at least the level-0 cost".into(),
            });
        }
        let steps = costs.len() - 1;
        if let Some(d) = depth {
            if d.steps != steps {
                return Err(Error::Domain {
                    detail: format!(
                        "forward_costs lists {} levels, which contradicts steps {}",
                        costs.len(),
                        d.steps
                    ),
                });
            }
        }
        // Width labels come from the model when one is configured; a pure
        // cost-table plan leaves them at zero.
        let widths: Vec<usize> = match &cfg.model {
            Some(spec) => width_chain(spec, steps).unwrap_or_else(|_| vec![0; costs.len()]),
            None => vec![0; costs.len()],
        };
        let levels = costs
            .iter()
            .zip(widths)
            .map(|(&forward_flops, width)| LevelCost { width, forward_flops })
            .collect();
        let cost = CostModel::new(levels, dataset_size)?;
        Ok((cost, DepthPlan { steps, min_size: depth.map(|d| d.min_size).unwrap_or(0) }))
    } else {
        let spec = cfg.require_model()?;
        let depth = match depth {
            Some(d) => d,
            None => resolve_depth(spec.width, cfg.plan.steps, cfg.plan.min_size)?,
        };
        let cost = CostModel::from_spec(spec, depth.steps, dataset_size)?;
        Ok((cost, depth))
    }
}

fn width_chain(spec: &ModelSpec, steps: usize) -> Result<Vec<usize>> {
    let mut widths = vec![spec.width];
    let mut current = spec.clone();
    for _ in 0..steps {
        current = current.halve()?;
        widths.push(current.width);
    }
    Ok(widths)
}

/// Dataset size for FLOPs pricing: the explicit `dataset_size` key wins;
/// otherwise the configured data source is consulted. Plans that price pure
/// cost tables without any data default to a single image, which leaves all
/// normalized ratios unchanged.
fn resolve_dataset_size(cfg: &RunConfigFile) -> Result<u64> {
    if let Some(n) = cfg.plan.dataset_size {
        if n == 0 {
            return Err(Error::Domain {
                detail: "dataset_size must be positive".into(),
            });
        }
        return Ok(n);
    }
    if cfg.model.is_some() {
        let data = cfg.load_data()?;
        return Ok(data.train.len() as u64);
    }
    Ok(1)
}

/// The epoch budget the run distributes, in baseline-epoch units, plus the
/// key it came from. Exactly one of the three budget keys may be set; with
/// none set the budget defaults to `baseline_epochs` (a FLOPs-matched run).
fn resolve_epoch_budget(cfg: &RunConfigFile, cost: &CostModel) -> Result<(f64, &'static str)> {
    let plan = &cfg.plan;
    match (plan.epochs, plan.alpha, plan.budget_flops) {
        (Some(e), None, None) => {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Domain {
                    detail: format!("epochs must be a positive finite number, got {e}"),
                });
            }
            Ok((e, "epochs"))
        }
        (None, Some(a), None) => {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::Domain {
                    detail: format!("alpha must be a positive finite number, got {a}"),
                });
            }
            Ok((a * plan.baseline_epochs, "alpha"))
        }
        (None, None, Some(f)) => {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::Domain {
                    detail: format!("budget_flops must be a positive finite number, got {f}"),
                });
            }
            let per_epoch = TRAIN_STEP_FORWARD_MULTIPLE
                * cost.levels[0].forward_flops
                * cost.dataset_size as f64;
            Ok((f / per_epoch, "budget_flops"))
        }
        (None, None, None) => Ok((plan.baseline_epochs, "baseline_epochs")),
        _ => Err(Error::Domain {
            detail: "give at most one of epochs, alpha, budget_flops".into(),
        }),
    }
}

fn build_budget_plan(cfg: &RunConfigFile, cost: &CostModel, budget: f64) -> Result<BudgetPlan> {
    let plan = &cfg.plan;
    match plan.mode {
        SplitMode::EpochSplit => {
            let schedule = epoch_split_schedule(budget, plan.ratio, cost.steps())?;
            BudgetPlan::from_epochs(cost, &schedule, plan.ratio, plan.baseline_epochs)
        }
        SplitMode::FlopsSplit => {
            if let Some(f) = plan.budget_flops {
                BudgetPlan::from_flops_budget(f, cost, plan.ratio, plan.baseline_epochs)
            } else {
                let alpha = budget / plan.baseline_epochs;
                BudgetPlan::from_alpha(alpha, plan.baseline_epochs, plan.ratio, cost)
            }
        }
    }
}

// ── plan ────────────────────────────────────────────────────────────────────

pub fn plan(config_path: &Path, overrides: &PlanOverrides, out: Option<&Path>) -> Result<i32> {
    let mut cfg = RunConfigFile::load(config_path)?;
    overrides.apply(&mut cfg)?;

    let (cost, depth) = resolve_cost_model(&cfg, None)?;
    let (budget, budget_source) = resolve_epoch_budget(&cfg, &cost)?;
    let plan = build_budget_plan(&cfg, &cost, budget)?;

    if let Some(dir) = out {
        write_json(&dir.join("plan.json"), &plan)?;
        write_atomic(&dir.join("plan.csv"), plan.to_csv().as_bytes())?;
    }

    println!(
        "plan: {} coupling steps, r = {}, mode = {}, budget {} epochs (from {})",
        depth.steps,
        plan.ratio,
        cfg.plan.mode.as_str(),
        format_sig(budget),
        budget_source
    );
    for row in plan.rows.iter().rev() {
        println!(
            "  level {}: {} model(s) of width {:>4} for {:>3} epochs ({} raw), {:.4e} FLOPs",
            row.level, row.count, row.width, row.epochs, format_sig(row.epochs_raw), row.flops
        );
    }
    println!(
        "total {:.4e} FLOPs = {:.6} of the {}-epoch baseline ({})",
        plan.total_flops,
        plan.normalized_flops,
        format_sig(plan.baseline_epochs),
        normalized_label(plan.normalized_flops)
    );
    if let Some(dir) = out {
        println!("wrote {} and {}", dir.join("plan.json").display(), dir.join("plan.csv").display());
    }
    Ok(EXIT_OK)
}

/// Trim trailing zeros from a float for display (e.g. `90` not `90.000`).
fn format_sig(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        let s = format!("{x:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

// ── train ───────────────────────────────────────────────────────────────────

pub fn train(config_path: &Path, overrides: &PlanOverrides, out: &Path) -> Result<i32> {
    let mut cfg = RunConfigFile::load(config_path)?;
    overrides.apply(&mut cfg)?;

    let spec = cfg.require_model()?.clone();
    let depth = resolve_depth(spec.width, cfg.plan.steps, cfg.plan.min_size)?;
    let data = cfg.load_data()?;
    let cost = CostModel::from_spec(&spec, depth.steps, data.train.len() as u64)?;
    let (budget, budget_source) = resolve_epoch_budget(&cfg, &cost)?;
    let baseline_flops = training_flops(
        forward_flops(&spec)?,
        cfg.plan.baseline_epochs,
        data.train.len() as u64,
    );

    println!(
        "train: {} on {} seed(s), {} coupling steps, budget {} epochs (from {})",
        spec.family.as_str(),
        cfg.plan.seeds.len(),
        depth.steps,
        format_sig(budget),
        budget_source
    );

    let mut rows = Vec::new();
    for &seed in &cfg.plan.seeds {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;

        let (ckpt, tree) = if depth.steps == 0 {
            let epochs = round_epochs(budget);
            let (ckpt, record) = baseline_train(&spec, epochs, &data, &train_cfg)?;
            (ckpt, RunTree { record, children: Vec::new() })
        } else {
            rbdc_train(
                &spec,
                budget,
                depth.min_size,
                cfg.plan.ratio,
                cfg.plan.padding,
                &data,
                &train_cfg,
                cfg.plan.mode,
            )?
        };

        let seed_dir = out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&seed_dir)
            .map_err(|e| Error::Io { detail: format!("creating `{}`: {}", seed_dir.display(), e) })?;
        ckpt.save(&seed_dir.join("target.ckpt"))?;
        write_json(&seed_dir.join("run_tree.json"), &tree)?;

        let accuracy = tree.record.final_eval_accuracy.ok_or(Error::State {
            detail: "run finished without an evaluation pass".into(),
        })?;
        let row = CurveRow {
            protocol: if depth.steps == 0 { "baseline".into() } else { "rbdc".into() },
            steps: depth.steps,
            r: if depth.steps == 0 { 0.0 } else { cfg.plan.ratio },
            normalized_flops: tree.total_flops() / baseline_flops,
            accuracy,
            seed,
        };
        println!(
            "  seed {}: accuracy {:.4}, {:.4e} FLOPs ({:.6} of baseline), wrote {}",
            seed,
            row.accuracy,
            tree.total_flops(),
            row.normalized_flops,
            seed_dir.display()
        );
        rows.push(row);
    }

    write_atomic(&out.join("curve.csv"), curve_csv(&rows).as_bytes())?;
    println!("wrote {}", out.join("curve.csv").display());
    Ok(EXIT_OK)
}

// ── couple ──────────────────────────────────────────────────────────────────

pub fn couple(
    left: &Path,
    right: &Path,
    out: &Path,
    padding: PaddingMode,
    seed: u64,
) -> Result<i32> {
    let c1 = Checkpoint::load(left)?;
    let c2 = Checkpoint::load(right)?;
    let wide = couple_checkpoint(&c1, &c2, padding, seed)?;
    let audits = audit_coupling(&wide, &c1, &c2, padding);
    let pass = audits.iter().all(|a| a.ok());
    let report = CouplingReport {
        mode: "audit_only".into(),
        padding: padding.as_str().into(),
        precision: wide.precision()?.as_str().into(),
        probes: 0,
        tolerance: None,
        max_abs_deviation: 0.0,
        pre_norm_concat_exact: None,
        tensors: audits,
        pass,
    };

    std::fs::create_dir_all(out)
        .map_err(|e| Error::Io { detail: format!("creating `{}`: {}", out.display(), e) })?;
    wide.save(&out.join("wide.ckpt"))?;
    write_json(&out.join("coupling_report.json"), &report)?;

    println!(
        "couple: {} width {} + width {} -> width {} ({} padding), {} tensors audited",
        wide.spec.family.as_str(),
        c1.spec.width,
        c2.spec.width,
        wide.spec.width,
        padding.as_str(),
        report.tensors.len()
    );
    println!("wrote {} and {}", out.join("wide.ckpt").display(), out.join("coupling_report.json").display());
    if pass {
        println!("structure audit: pass");
        Ok(EXIT_OK)
    } else {
        println!("structure audit: FAIL");
        Ok(EXIT_VERIFY_FAILED)
    }
}

// ── verify ──────────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn verify(
    wide: &Path,
    left: &Path,
    right: &Path,
    mode: EnsembleMode,
    padding: PaddingMode,
    probes: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<i32> {
    if probes == 0 {
        return Err(Error::Domain {
            detail: "--probes needs at least one probe input".into(),
        });
    }
    let wide = Checkpoint::load(wide)?;
    let c1 = Checkpoint::load(left)?;
    let c2 = Checkpoint::load(right)?;

    let mut shape = vec![probes];
    shape.extend_from_slice(&wide.spec.input_shape);
    let n: usize = shape.iter().product();
    let mut rng = rng_from_seed(derive_seed(seed, "probes"));
    let probes_tensor = Tensor::new(shape, standard_normal_vec(&mut rng, n), wide.precision()?)?;

    let report = verify_ensemble_equivalence(&wide, &c1, &c2, &probes_tensor, mode, padding)?;

    if let Some(path) = out {
        write_json(path, &report)?;
    }

    let tolerance = match report.tolerance {
        Some(t) => format!("tolerance {t:.1e}"),
        None => "report-only".to_string(),
    };
    println!(
        "verify: mode {}, {} probes, max |wide - ensemble| = {:.3e} ({})",
        report.mode, report.probes, report.max_abs_deviation, tolerance
    );
    if let Some(exact) = report.pre_norm_concat_exact {
        println!("pre-normalization concatenation exact: {exact}");
    }
    let audits_ok = report.audits_ok();
    println!(
        "structure audit over {} tensors: {}",
        report.tensors.len(),
        if audits_ok { "pass" } else { "FAIL" }
    );
    if let Some(path) = out {
        println!("wrote {}", path.display());
    }
    if report.pass {
        println!("verdict: pass");
        Ok(EXIT_OK)
    } else {
        println!("verdict: FAIL");
        Ok(EXIT_VERIFY_FAILED)
    }
}

// ── flops ───────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct FlopsLevel {
    level: usize,
    width: usize,
    forward_flops: f64,
}

#[derive(Debug, Serialize)]
struct FlopsTable {
    family: String,
    width: usize,
    depth: usize,
    levels: Vec<FlopsLevel>,
    dataset_size: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<f64>,
    /// Full training cost of the level-0 model for `epochs`, if given.
    #[serde(skip_serializing_if = "Option::is_none")]
    training_flops: Option<f64>,
}

pub fn flops(
    config_path: &Path,
    steps: Option<usize>,
    epochs: Option<f64>,
    out: Option<&Path>,
) -> Result<i32> {
    let mut cfg = RunConfigFile::load(config_path)?;
    if let Some(s) = steps {
        cfg.plan.steps = Some(s);
        cfg.plan.min_size = None;
    }
    let spec = cfg.require_model()?.clone();
    let depth = resolve_depth(spec.width, cfg.plan.steps, cfg.plan.min_size)?;
    let dataset_size = resolve_dataset_size(&cfg)?;
    let cost = CostModel::from_spec(&spec, depth.steps, dataset_size)?;

    let table = FlopsTable {
        family: spec.family.as_str().into(),
        width: spec.width,
        depth: spec.depth,
        levels: cost
            .levels
            .iter()
            .enumerate()
            .map(|(level, l)| FlopsLevel { level, width: l.width, forward_flops: l.forward_flops })
            .collect(),
        dataset_size,
        epochs,
        training_flops: epochs.map(|e| training_flops(cost.levels[0].forward_flops, e, dataset_size)),
    };

    let text = serde_json::to_string_pretty(&table)
        .map_err(|e| Error::Json { detail: e.to_string() })?;
    println!("{text}");
    if let Some(path) = out {
        write_atomic(path, format!("{text}\n").as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(EXIT_OK)
}

// ── report ──────────────────────────────────────────────────────────────────

pub fn report(inputs: &[PathBuf], out: &Path) -> Result<i32> {
    if inputs.is_empty() {
        return Err(Error::Domain {
            detail: "report needs at least one curve CSV".into(),
        });
    }
    let header = curve_csv(&[]);
    let header = header.trim_end();
    let mut merged = vec![header.to_string()];
    let mut rows = 0usize;
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { detail: format!("reading `{}`: {}", path.display(), e) })?;
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first.trim_end() == header => {}
            other => {
                return Err(Error::Format {
                    record: Some(path.display().to_string()),
                    detail: format!(
                        "expected curve header `{header}`, found `{}`",
                        other.unwrap_or("")
                    ),
                });
            }
        }
        for line in lines {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if line.split(',').count() != header.split(',').count() {
                return Err(Error::Format {
                    record: Some(path.display().to_string()),
                    detail: format!("row `{line}` does not match the curve header"),
                });
            }
            merged.push(line.to_string());
            rows += 1;
        }
    }
    let mut text = merged.join("\n");
    text.push('\n');
    write_atomic(out, text.as_bytes())?;
    println!("report: merged {} rows from {} file(s) into {}", rows, inputs.len(), out.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_default_is_one_coupling_step() {
        let d = resolve_depth(64, None, None).unwrap();
        assert_eq!(d, DepthPlan { steps: 1, min_size: 64 });
    }

    #[test]
    fn depth_zero_steps_means_baseline() {
        let d = resolve_depth(64, Some(0), None).unwrap();
        assert_eq!(d.steps, 0);
        assert!(d.min_size > 64);
    }

    #[test]
    fn depth_from_steps_and_from_min_size_agree() {
        let a = resolve_depth(64, Some(2), None).unwrap();
        let b = resolve_depth(64, None, Some(a.min_size)).unwrap();
        assert_eq!(a.steps, b.steps);
        // And the consistency check accepts the matching pair.
        resolve_depth(64, Some(a.steps), Some(a.min_size)).unwrap();
    }

    #[test]
    fn contradictory_depth_is_rejected() {
        let err = resolve_depth(64, Some(3), Some(64)).unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn too_many_steps_for_width_is_rejected() {
        assert!(resolve_depth(8, Some(4), None).is_err());
        assert!(resolve_depth(8, Some(3), None).is_ok());
    }
}

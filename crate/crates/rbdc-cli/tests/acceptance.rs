//! Acceptance gate: one test per release criterion, each printing a single
//! `criterion N (...): pass|FAIL` line (visible with `--nocapture`). A
//! criterion collects all its sub-checks before concluding, so a failure
//! report names every violated bound at once.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

use rbdc_core::budget::{
    epochs_from_alpha, epochs_from_flops_budget, pipeline_flops, normalized_label,
    split_epoch_budget, training_flops, BudgetPlan, CostModel, LevelCost,
};
use rbdc_core::checkpoint::{Checkpoint, Lineage};
use rbdc_core::coupling::{
    audit_coupling, couple_checkpoint, verify_ensemble_equivalence, CouplingReport, EnsembleMode,
    PaddingMode,
};
use rbdc_core::data::{gen_synthetic, parse_idx, serialize_idx_images, serialize_idx_labels, IdxContent, TaskData};
use rbdc_core::error::Result;
use rbdc_core::protocol::{
    baseline_train, eval_cross_entropy, rbdc_train, OptimizerKind, RunTree, SplitMode, TrainConfig,
};
use rbdc_core::rng::{derive_seed, rng_from_seed, shuffled_indices, standard_normal_vec, Rng64};
use rbdc_core::tape::{Tape, Var};
use rbdc_core::tensor::{Precision, Tensor};
use rbdc_core::zoo::{Family, Model, ModelSpec};

// ── reporting ───────────────────────────────────────────────────────────────

fn conclude(criterion: usize, name: &str, failures: Vec<String>) {
    if failures.is_empty() {
        println!("criterion {criterion} ({name}): pass");
    } else {
        println!("criterion {criterion} ({name}): FAIL");
        panic!("criterion {criterion} ({name}):\n  {}", failures.join("\n  "));
    }
}

fn ensure(failures: &mut Vec<String>, ok: bool, msg: impl Into<String>) {
    if !ok {
        failures.push(msg.into());
    }
}

// ── shared fixtures ─────────────────────────────────────────────────────────

fn spec_for(family: Family) -> ModelSpec {
    match family {
        Family::Mlp => ModelSpec {
            family,
            width: 8,
            depth: 2,
            heads: 0,
            head_dim: 0,
            patch_size: 0,
            input_shape: vec![12],
            num_classes: 4,
            min_width: 4,
        },
        Family::MiniCnn => ModelSpec {
            family,
            width: 4,
            depth: 1,
            heads: 0,
            head_dim: 0,
            patch_size: 0,
            input_shape: vec![1, 8, 8],
            num_classes: 4,
            min_width: 2,
        },
        Family::MiniVit => ModelSpec {
            family,
            width: 8,
            depth: 1,
            heads: 2,
            head_dim: 4,
            patch_size: 4,
            input_shape: vec![1, 8, 8],
            num_classes: 4,
            min_width: 4,
        },
    }
}

fn task_for(spec: &ModelSpec, seed: u64) -> TaskData {
    gen_synthetic(spec.num_classes, 8, 4, &spec.input_shape, seed).unwrap()
}

/// Two independently trained narrow checkpoints (one epoch each).
fn trained_pair(spec: &ModelSpec, precision: Precision) -> (Checkpoint, Checkpoint) {
    let task = task_for(spec, 11);
    let mut cfg = TrainConfig {
        batch_size: 8,
        warmup_epochs: 0,
        total_epochs: 1,
        precision,
        ..TrainConfig::default()
    };
    cfg.seed = 21;
    let (c1, _) = baseline_train(spec, 1, &task, &cfg).unwrap();
    cfg.seed = 42;
    let (c2, _) = baseline_train(spec, 1, &task, &cfg).unwrap();
    (c1, c2)
}

fn probe_batch(spec: &ModelSpec, precision: Precision, count: usize, seed: u64) -> Tensor {
    let mut shape = vec![count];
    shape.extend_from_slice(&spec.input_shape);
    let n: usize = shape.iter().product();
    let mut rng = rng_from_seed(derive_seed(seed, "probes"));
    Tensor::new(shape, standard_normal_vec(&mut rng, n), precision).unwrap()
}

// ── criterion 1 ─────────────────────────────────────────────────────────────

#[test]
fn criterion_1_budget_reproduction() {
    let mut failures = Vec::new();
    let costs = [8.7e9, 2.20e9, 0.56e9, 1.4408e8];
    let cases: [(&[f64], f64); 3] = [
        (&[44.0, 22.0], 0.613),
        (&[42.0, 21.0, 10.0], 0.613),
        (&[42.0, 20.0, 10.0, 5.0], 0.615),
    ];
    for (epochs, expected) in cases {
        let levels = costs[..epochs.len()]
            .iter()
            .map(|&forward_flops| LevelCost { width: 0, forward_flops })
            .collect();
        let cost = CostModel::new(levels, 1).unwrap();
        let plan = BudgetPlan::from_epochs(&cost, epochs, 2.0, 90.0).unwrap();
        ensure(
            &mut failures,
            (plan.normalized_flops - expected).abs() <= 0.005,
            format!("allocation {epochs:?}: normalized {:.6}, want {expected} +/- 0.005", plan.normalized_flops),
        );
        ensure(
            &mut failures,
            normalized_label(plan.normalized_flops) == "0.61x",
            format!("allocation {epochs:?}: label {}, want 0.61x", normalized_label(plan.normalized_flops)),
        );
    }
    // Rival growth schedule: 90 + 74 epochs at the half-width cost, then 14
    // at full width, against the same 90-epoch baseline.
    let rival = training_flops(costs[1], 90.0 + 74.0, 1) + training_flops(costs[0], 14.0, 1);
    let baseline = training_flops(costs[0], 90.0, 1);
    let normalized = rival / baseline;
    ensure(
        &mut failures,
        (normalized - 0.616).abs() <= 0.005,
        format!("rival schedule: normalized {normalized:.6}, want 0.616 +/- 0.005"),
    );
    conclude(1, "budget reproduction", failures);
}

// ── criterion 2 ─────────────────────────────────────────────────────────────

#[test]
fn criterion_2_epoch_split_reproduction() {
    let mut failures = Vec::new();
    let (narrow, wide) = split_epoch_budget(300.0, 2.0).unwrap();
    ensure(
        &mut failures,
        narrow == 75.0 && wide == 150.0,
        format!("split(300, 2) = ({narrow}, {wide}), want (75, 150)"),
    );
    let (narrow, wide) = split_epoch_budget(300.0, 1.0).unwrap();
    ensure(
        &mut failures,
        narrow == 100.0 && wide == 100.0,
        format!("split(300, 1) = ({narrow}, {wide}), want (100, 100)"),
    );
    conclude(2, "epoch-split reproduction", failures);
}

// ── criterion 3 ─────────────────────────────────────────────────────────────

#[test]
fn criterion_3_ensemble_equivalence() {
    let mut failures = Vec::new();
    let bounds = [(Precision::F32, 1e-5), (Precision::F64, 1e-10)];
    let modes = [
        (Family::Mlp, EnsembleMode::Exact),
        (Family::MiniCnn, EnsembleMode::Exact),
        (Family::MiniVit, EnsembleMode::SplitNormDebug),
    ];
    for (family, mode) in modes {
        let spec = spec_for(family);
        for (precision, bound) in bounds {
            let (c1, c2) = trained_pair(&spec, precision);
            let wide = couple_checkpoint(&c1, &c2, PaddingMode::Zero, 5).unwrap();
            let probes = probe_batch(&spec, precision, 128, 3);
            let report =
                verify_ensemble_equivalence(&wide, &c1, &c2, &probes, mode, PaddingMode::Zero)
                    .unwrap();
            let label = format!("{} {} {}", family.as_str(), mode.as_str(), precision.as_str());
            ensure(
                &mut failures,
                report.max_abs_deviation <= bound,
                format!("{label}: deviation {:.3e} > {bound:.0e}", report.max_abs_deviation),
            );
            ensure(&mut failures, report.pass, format!("{label}: report did not pass"));
        }
    }
    // Joint normalization breaks output equality, but the concatenation
    // entering the first norm layer must still be exact.
    let spec = spec_for(Family::MiniVit);
    let (c1, c2) = trained_pair(&spec, Precision::F64);
    let wide = couple_checkpoint(&c1, &c2, PaddingMode::Zero, 5).unwrap();
    let probes = probe_batch(&spec, Precision::F64, 128, 3);
    let report = verify_ensemble_equivalence(
        &wide,
        &c1,
        &c2,
        &probes,
        EnsembleMode::JointNorm,
        PaddingMode::Zero,
    )
    .unwrap();
    ensure(
        &mut failures,
        report.pre_norm_concat_exact == Some(true),
        "mini_vit joint mode: pre-norm concatenation not exact".to_string(),
    );
    conclude(3, "ensemble equivalence", failures);
}

// ── criterion 4 ─────────────────────────────────────────────────────────────

#[test]
fn criterion_4_zero_block_and_diagonal_audits() {
    let mut failures = Vec::new();
    for family in [Family::Mlp, Family::MiniCnn, Family::MiniVit] {
        let spec = spec_for(family);
        let (c1, c2) = trained_pair(&spec, Precision::F64);
        let wide = couple_checkpoint(&c1, &c2, PaddingMode::Zero, 5).unwrap();
        let audits = audit_coupling(&wide, &c1, &c2, PaddingMode::Zero);
        let mut padded = 0usize;
        for audit in &audits {
            ensure(
                &mut failures,
                audit.diagonal_preserved,
                format!("{} {}: diagonal blocks not bit-equal to sources", family.as_str(), audit.name),
            );
            if audit.padding_elements > 0 {
                padded += 1;
                ensure(
                    &mut failures,
                    audit.off_diagonal_zero == Some(true),
                    format!("{} {}: off-diagonal elements not all zero", family.as_str(), audit.name),
                );
            }
        }
        ensure(
            &mut failures,
            padded > 0,
            format!("{}: no padded tensors were audited", family.as_str()),
        );

        // Argument-order symmetry: logit output must be bitwise identical
        // regardless of which parent comes first.
        let ab = couple_checkpoint(&c1, &c2, PaddingMode::Zero, 0).unwrap();
        let ba = couple_checkpoint(&c2, &c1, PaddingMode::Zero, 0).unwrap();
        let probes = probe_batch(&spec, Precision::F64, 16, 9);
        let la = ab.to_model().unwrap().eval_logits(&probes).unwrap();
        let lb = ba.to_model().unwrap().eval_logits(&probes).unwrap();
        ensure(
            &mut failures,
            la.bits_eq(&lb),
            format!("{}: logits depend on coupling argument order", family.as_str()),
        );
    }
    conclude(4, "zero-block and diagonal audits", failures);
}

// ── criterion 5 ─────────────────────────────────────────────────────────────

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

fn normal(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), standard_normal_vec(rng, n), Precision::F64).unwrap()
}

fn normal_off_zero(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> =
        standard_normal_vec(rng, n).into_iter().map(|v| v + 0.05 * v.signum()).collect();
    Tensor::new(shape.to_vec(), data, Precision::F64).unwrap()
}

fn positive(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = standard_normal_vec(rng, n).into_iter().map(|v| 0.5 + v * v).collect();
    Tensor::new(shape.to_vec(), data, Precision::F64).unwrap()
}

/// Central finite-difference check of d(loss)/d(input) for every element of
/// every input; returns the first violated bound as an error string.
fn fd_check(
    label: &str,
    inputs: &[Tensor],
    graph: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> std::result::Result<(), String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = graph(&mut tape, &vars).map_err(|e| format!("{label}: forward failed: {e}"))?;
    if tape.value(loss).numel() != 1 {
        return Err(format!("{label}: loss is not scalar"));
    }
    let grads = tape.backward(loss).map_err(|e| format!("{label}: backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval_at = |which: usize, elem: usize, delta: f64| -> std::result::Result<f64, String> {
        let mut data = inputs[which].data().to_vec();
        data[elem] += delta;
        let bumped = Tensor::new(inputs[which].shape().to_vec(), data, Precision::F64).unwrap();
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, u)| t.leaf(if k == which { bumped.clone() } else { u.clone() }))
            .collect();
        let l = graph(&mut t, &vs).map_err(|e| format!("{label}: bumped forward failed: {e}"))?;
        t.value(l).item().map_err(|e| format!("{label}: {e}"))
    };

    for (which, input) in inputs.iter().enumerate() {
        if analytic[which].is_empty() {
            return Err(format!("{label}: input {which} received no gradient"));
        }
        for elem in 0..input.numel() {
            let plus = eval_at(which, elem, FD_STEP)?;
            let minus = eval_at(which, elem, -FD_STEP)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[which][elem];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > FD_TOL {
                return Err(format!(
                    "{label}: input {which} element {elem}: analytic {a}, numeric {numeric}, rel {rel:.3e}"
                ));
            }
        }
    }
    Ok(())
}

#[test]
fn criterion_5_gradient_correctness() {
    let mut failures = Vec::new();
    let mut cases = 0usize;
    let mut run = |label: String, inputs: Vec<Tensor>, graph: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
        cases += 1;
        if let Err(e) = fd_check(&label, &inputs, graph) {
            failures.push(e);
        }
    };
    let dims = |rng: &mut Rng64, lo: usize, hi: usize| -> usize {
        lo + shuffled_indices(rng, hi - lo + 1)[0]
    };
    let mut rng = rng_from_seed(2024);

    // Dense layers over random shapes.
    for i in 0..3 {
        let (b, d_in, d_out) = (dims(&mut rng, 1, 4), dims(&mut rng, 2, 6), dims(&mut rng, 2, 5));
        let inputs = vec![
            normal(&[b, d_in], &mut rng),
            normal(&[d_out, d_in], &mut rng),
            normal(&[d_out], &mut rng),
            normal(&[b, d_out], &mut rng),
        ];
        run(format!("linear_bias_{i}_{b}x{d_in}x{d_out}"), inputs, &|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        });
    }
    for i in 0..2 {
        let (b, d_in, d_out) = (dims(&mut rng, 2, 4), dims(&mut rng, 2, 6), dims(&mut rng, 2, 5));
        let inputs = vec![
            normal(&[b, d_in], &mut rng),
            normal(&[d_out, d_in], &mut rng),
            normal(&[b, d_out], &mut rng),
        ];
        run(format!("linear_{i}_{b}x{d_in}x{d_out}"), inputs, &|t, v| {
            let y = t.linear(v[0], v[1], None)?;
            let p = t.mul(y, v[2])?;
            t.sum(p)
        });
    }
    {
        let (m, k, n) = (dims(&mut rng, 2, 4), dims(&mut rng, 2, 4), dims(&mut rng, 2, 4));
        let inputs = vec![normal(&[m, k], &mut rng), normal(&[k, n], &mut rng), normal(&[m, n], &mut rng)];
        run(format!("matmul_{m}x{k}x{n}"), inputs, &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let p = t.mul(y, v[2])?;
            t.sum(p)
        });
    }

    // Elementwise ops.
    {
        let (b, d) = (dims(&mut rng, 2, 4), dims(&mut rng, 2, 5));
        let inputs = vec![normal(&[b, d], &mut rng), normal(&[d], &mut rng), normal(&[b, d], &mut rng)];
        run(format!("add_broadcast_{b}x{d}"), inputs, &|t, v| {
            let y = t.add(v[0], v[1])?;
            let p = t.mul(y, v[2])?;
            t.sum(p)
        });
    }
    {
        let d = dims(&mut rng, 3, 8);
        let inputs = vec![normal(&[d], &mut rng), normal(&[d], &mut rng)];
        run(format!("mul_{d}"), inputs, &|t, v| {
            let y = t.mul(v[0], v[1])?;
            t.sum(y)
        });
    }
    {
        let d = dims(&mut rng, 3, 8);
        let inputs = vec![normal(&[d], &mut rng)];
        run(format!("scale_{d}"), inputs, &|t, v| {
            let y = t.scale(v[0], -1.7)?;
            t.sum(y)
        });
    }
    for (name, kinked) in [("relu", true), ("gelu", false)] {
        let (b, d) = (dims(&mut rng, 2, 3), dims(&mut rng, 2, 6));
        let x = if kinked { normal_off_zero(&[b, d], &mut rng) } else { normal(&[b, d], &mut rng) };
        let inputs = vec![x, normal(&[b, d], &mut rng)];
        let graph: &dyn Fn(&mut Tape, &[Var]) -> Result<Var> = if kinked {
            &|t, v| {
                let y = t.relu(v[0])?;
                let p = t.mul(y, v[1])?;
                t.sum(p)
            }
        } else {
            &|t, v| {
                let y = t.gelu(v[0])?;
                let p = t.mul(y, v[1])?;
                t.sum(p)
            }
        };
        run(format!("{name}_{b}x{d}"), inputs, graph);
    }

    // Normalization layers.
    for segments in [1usize, 2] {
        let rows = dims(&mut rng, 2, 3);
        let d = 2 * dims(&mut rng, 2, 3);
        let inputs = vec![
            normal(&[rows, d], &mut rng),
            normal(&[d], &mut rng),
            normal(&[d], &mut rng),
            normal(&[rows, d], &mut rng),
        ];
        run(format!("layer_norm_seg{segments}_{rows}x{d}"), inputs, &move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6, segments)?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        });
    }
    {
        let (b, c, h, w) = (2, dims(&mut rng, 2, 3), 2, 3);
        let mean = Tensor::zeros(&[c], Precision::F64);
        let var = positive(&[c], &mut rng);
        let inputs = vec![
            normal(&[b, c, h, w], &mut rng),
            normal(&[c], &mut rng),
            normal(&[c], &mut rng),
            normal(&[b, c, h, w], &mut rng),
        ];
        run(format!("batch_norm_train_{c}ch"), inputs, &move |t, v| {
            let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], &mean, &var, 0.1, 1e-5)?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        });
        let mean = normal(&[c], &mut rng);
        let var = positive(&[c], &mut rng);
        let inputs = vec![
            normal(&[b, c, h, w], &mut rng),
            normal(&[c], &mut rng),
            normal(&[c], &mut rng),
            normal(&[b, c, h, w], &mut rng),
        ];
        run(format!("batch_norm_eval_{c}ch"), inputs, &move |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        });
    }

    // Attention at several head counts (width divisible by heads).
    for heads in [1usize, 2, 4] {
        let (b, tokens, w) = (dims(&mut rng, 1, 2), dims(&mut rng, 2, 3), 4);
        let inputs = vec![
            normal(&[b, tokens, w], &mut rng),
            normal(&[b, tokens, w], &mut rng),
            normal(&[b, tokens, w], &mut rng),
            normal(&[b, tokens, w], &mut rng),
        ];
        run(format!("attention_h{heads}_{b}x{tokens}x{w}"), inputs, &move |t, v| {
            let y = t.attention(v[0], v[1], v[2], heads)?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        });
    }

    // Convolutions: 3x3 stride 1, 3x3 stride 2, and 1x1.
    for (i, (ksize, stride, pad)) in [(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)].iter().enumerate() {
        let (ksize, stride, pad) = (*ksize, *stride, *pad);
        let (b, cin, cout) = (dims(&mut rng, 1, 2), dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
        let (h, w) = (4, 4);
        let out_h = (h + 2 * pad - ksize) / stride + 1;
        let out_w = (w + 2 * pad - ksize) / stride + 1;
        let inputs = vec![
            normal(&[b, cin, h, w], &mut rng),
            normal(&[cout, cin, ksize, ksize], &mut rng),
            normal(&[cout], &mut rng),
            normal(&[b, cout, out_h, out_w], &mut rng),
        ];
        run(format!("conv2d_{i}_k{ksize}s{stride}"), inputs, &move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        });
    }
    {
        let (b, c) = (dims(&mut rng, 1, 3), dims(&mut rng, 2, 4));
        let inputs = vec![normal(&[b, c, 3, 2], &mut rng), normal(&[b, c], &mut rng)];
        run(format!("global_avg_pool_{b}x{c}"), inputs, &|t, v| {
            let y = t.global_avg_pool(v[0])?;
            let p = t.mul(y, v[1])?;
            t.sum(p)
        });
    }

    // Token plumbing and the loss head.
    {
        let (b, c, h, w) = (2, 3, 2, 2);
        let inputs = vec![normal(&[b, c, h, w], &mut rng), normal(&[b, h * w, c], &mut rng)];
        run("nchw_to_tokens".to_string(), inputs, &|t, v| {
            let y = t.nchw_to_tokens(v[0])?;
            let p = t.mul(y, v[1])?;
            t.sum(p)
        });
    }
    {
        let (b, tokens, d) = (2, 3, 4);
        let inputs = vec![normal(&[b, tokens, d], &mut rng), normal(&[d], &mut rng), normal(&[b, d], &mut rng)];
        run("prepend_select_token".to_string(), inputs, &|t, v| {
            let y = t.prepend_token(v[0], v[1])?;
            let y = t.select_token(y, 0)?;
            let p = t.mul(y, v[2])?;
            t.sum(p)
        });
    }
    for i in 0..2 {
        let (b, classes) = (dims(&mut rng, 2, 4), dims(&mut rng, 2, 5));
        let targets: Vec<usize> = (0..b).map(|k| k % classes).collect();
        let inputs = vec![normal(&[b, classes], &mut rng)];
        run(format!("softmax_cross_entropy_{i}_{b}x{classes}"), inputs, &move |t, v| {
            t.softmax_cross_entropy(v[0], &targets)
        });
    }

    ensure(&mut failures, cases >= 20, format!("only {cases} shapes checked, need at least 20"));
    conclude(5, "gradient correctness", failures);
}

// ── criterion 6 ─────────────────────────────────────────────────────────────

#[test]
fn criterion_6_planner_consistency() {
    let mut failures = Vec::new();

    // Pipeline -> epochs -> pipeline round trip, over several cost decays,
    // ratios, and depths.
    let round_trips: [(usize, f64, f64, f64); 5] = [
        (2, 2.0, 44.0, 0.25),
        (3, 2.0, 42.0, 0.26),
        (4, 2.0, 42.0, 0.25),
        (2, 1.0, 100.0, 0.3),
        (3, 3.0, 60.0, 0.22),
    ];
    for (levels, r, target, decay) in round_trips {
        let costs: Vec<LevelCost> = (0..levels)
            .map(|i| LevelCost { width: 0, forward_flops: 1e9 * decay.powi(i as i32) })
            .collect();
        let cost = CostModel::new(costs, 1000).unwrap();
        let epochs: Vec<f64> = (0..levels).map(|i| target / r.powi(i as i32)).collect();
        let pipeline = pipeline_flops(&cost, &epochs).unwrap();
        let recovered = epochs_from_flops_budget(pipeline, &cost, r).unwrap();
        for (i, &e) in epochs.iter().enumerate() {
            let diff = (recovered / r.powi(i as i32) - e).abs();
            ensure(
                &mut failures,
                diff <= 1.0,
                format!("levels {levels} r {r}: level {i} epochs off by {diff:.3e}"),
            );
        }
    }

    // Exact and approximate allocators coincide when each halving cuts the
    // forward cost to a quarter.
    for (steps, r, alpha) in [(1usize, 2.0, 1.0), (2, 2.0, 0.8), (3, 1.5, 1.2), (4, 3.0, 0.5)] {
        let costs: Vec<LevelCost> = (0..=steps)
            .map(|i| LevelCost { width: 0, forward_flops: 4e9 / 4f64.powi(i as i32) })
            .collect();
        let cost = CostModel::new(costs, 100).unwrap();
        let exact = epochs_from_alpha(alpha, 90.0, r, steps, Some(&cost)).unwrap();
        let approx = epochs_from_alpha(alpha, 90.0, r, steps, None).unwrap();
        ensure(
            &mut failures,
            (exact - approx).abs() <= 1e-12 * exact.abs().max(1.0),
            format!("steps {steps} r {r} alpha {alpha}: exact {exact} vs approx {approx}"),
        );
    }
    conclude(6, "planner consistency", failures);
}

// ── criterion 7 ─────────────────────────────────────────────────────────────

/// Desk-scale statistical run: 8-class synthetic task on 8x8 inputs
/// (flattened for the MLP family), target width 32.
#[test]
fn criterion_7_desk_scale_run() {
    let mut failures = Vec::new();
    let task = gen_synthetic(8, 32, 8, &[64], 101).unwrap();
    let target = ModelSpec {
        family: Family::Mlp,
        width: 32,
        depth: 2,
        heads: 0,
        head_dim: 0,
        patch_size: 0,
        input_shape: vec![64],
        num_classes: 8,
        min_width: 4,
    };
    let config = |seed: u64, epochs: u64| TrainConfig {
        optimizer: OptimizerKind::AdamW,
        base_lr: 1e-2,
        weight_decay: 0.01,
        batch_size: 32,
        warmup_epochs: 1,
        total_epochs: epochs,
        seed,
        precision: Precision::F32,
        ..TrainConfig::default()
    };
    let baseline_epochs = 12u64;

    // RBDC one-step at a FLOPs budget matched to the baseline.
    let mut parity_wins = 0;
    let mut parity_log = Vec::new();
    for seed in 0..3u64 {
        let cfg = config(seed, baseline_epochs);
        let (_, base) = baseline_train(&target, baseline_epochs, &task, &cfg).unwrap();
        let (_, tree) = rbdc_train(
            &target,
            baseline_epochs as f64,
            target.width,
            2.0,
            PaddingMode::Zero,
            &task,
            &cfg,
            SplitMode::FlopsSplit,
        )
        .unwrap();
        let flops_ratio = tree.total_flops() / base.training_flops;
        ensure(
            &mut failures,
            flops_ratio <= 1.0 + 1e-9,
            format!("seed {seed}: pipeline used {flops_ratio:.4}x the baseline budget"),
        );
        let b = base.final_eval_accuracy.unwrap();
        let r = tree.record.final_eval_accuracy.unwrap();
        if r >= b - 0.02 {
            parity_wins += 1;
        }
        parity_log.push(format!("seed {seed}: baseline {b:.4}, recursive {r:.4}"));
    }
    ensure(
        &mut failures,
        parity_wins >= 2,
        format!("accuracy parity held in {parity_wins}/3 seeds, need 2\n  {}", parity_log.join("\n  ")),
    );

    // Educated initialization: the coupled model starts from a lower eval
    // loss than a freshly initialized model of the same width.
    let narrow = ModelSpec { width: 16, ..target.clone() };
    let mut init_wins = 0;
    let mut init_log = Vec::new();
    for seed in 10..15u64 {
        let mut cfg = config(seed, 4);
        cfg.seed = derive_seed(seed, "p1");
        let (c1, _) = baseline_train(&narrow, 4, &task, &cfg).unwrap();
        cfg.seed = derive_seed(seed, "p2");
        let (c2, _) = baseline_train(&narrow, 4, &task, &cfg).unwrap();
        let wide = couple_checkpoint(&c1, &c2, PaddingMode::Zero, seed).unwrap();
        let mut coupled = wide.to_model().unwrap();
        let mut random =
            Model::build(&target, derive_seed(seed, "rand"), Precision::F32).unwrap();
        let ce_coupled = eval_cross_entropy(&mut coupled, &task.eval, 32).unwrap();
        let ce_random = eval_cross_entropy(&mut random, &task.eval, 32).unwrap();
        if ce_coupled < ce_random {
            init_wins += 1;
        }
        init_log.push(format!("seed {seed}: coupled {ce_coupled:.4}, random {ce_random:.4}"));
    }
    ensure(
        &mut failures,
        init_wins >= 4,
        format!("educated init held in {init_wins}/5 seeds, need 4\n  {}", init_log.join("\n  ")),
    );
    conclude(7, "end-to-end desk-scale run", failures);
}

// ── criterion 8 ─────────────────────────────────────────────────────────────

#[test]
fn criterion_8_format_round_trips() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();

    for family in [Family::Mlp, Family::MiniCnn, Family::MiniVit] {
        let spec = spec_for(family);
        for precision in [Precision::F32, Precision::F64] {
            let model = Model::build(&spec, 77, precision).unwrap();
            let ckpt = Checkpoint::from_model(
                &model,
                77,
                0,
                Lineage::leaf("root", spec.width, 77, 0),
            );
            let path = dir.path().join(format!("{}_{}.ckpt", family.as_str(), precision.as_str()));
            ckpt.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            ensure(
                &mut failures,
                loaded.encode().unwrap() == ckpt.encode().unwrap(),
                format!("{} {}: checkpoint not bit-exact after save/load", family.as_str(), precision.as_str()),
            );
        }
    }

    // IDX: labels survive exactly; images within one quantization step.
    let mut rng = rng_from_seed(8);
    let n = 6 * 5 * 4;
    let pixels: Vec<f64> = standard_normal_vec(&mut rng, n)
        .into_iter()
        .map(|v| (v * 0.25 + 0.5).clamp(0.0, 1.0))
        .collect();
    let images = Tensor::new(vec![6, 5, 4], pixels, Precision::F64).unwrap();
    let parsed = parse_idx(&serialize_idx_images(&images).unwrap()).unwrap();
    match parsed.content {
        IdxContent::Images(round) => {
            ensure(&mut failures, round.shape() == images.shape(), "image shape changed".to_string());
            let worst = images
                .data()
                .iter()
                .zip(round.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            ensure(
                &mut failures,
                worst <= 1.0 / 255.0,
                format!("image round trip off by {worst:.6}, bound {:.6}", 1.0 / 255.0),
            );
        }
        IdxContent::Labels(_) => failures.push("image file parsed as labels".to_string()),
    }
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let parsed = parse_idx(&serialize_idx_labels(&labels).unwrap()).unwrap();
    match parsed.content {
        IdxContent::Labels(round) => {
            ensure(&mut failures, round == labels, "labels changed in round trip".to_string());
        }
        IdxContent::Images(_) => failures.push("label file parsed as images".to_string()),
    }
    conclude(8, "format round-trips", failures);
}

// ── criterion 9 ─────────────────────────────────────────────────────────────

fn rbdc_bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbdc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary should launch")
}

fn expect_exit(failures: &mut Vec<String>, out: &Output, code: i32, what: &str) -> bool {
    let ok = out.status.code() == Some(code);
    if !ok {
        failures.push(format!(
            "{what}: exit {:?}, want {code}; stderr: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    ok
}

#[test]
fn criterion_9_cli_contract() {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    let cfg = json!({
        "model": { "family": "mlp", "width": 16, "depth": 1, "input_shape": [8], "num_classes": 4 },
        "train": { "total_epochs": 2, "warmup_epochs": 1, "batch_size": 8, "precision": "f32" },
        "plan": { "epochs": 2.0, "baseline_epochs": 2.0, "seeds": [0] },
        "data": { "source": "synthetic", "per_class_train": 8, "per_class_eval": 4, "seed": 3 }
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    // Exit 0 paths, collecting artifacts as we go.
    let out = rbdc_bin(&["plan", "--config", "run.json", "--out", "plan"], dir);
    if expect_exit(&mut failures, &out, 0, "plan") {
        let text = std::fs::read_to_string(dir.join("plan/plan.json")).unwrap();
        if serde_json::from_str::<BudgetPlan>(&text).is_err() {
            failures.push("plan.json is not a loadable budget plan".to_string());
        }
    }
    let out = rbdc_bin(&["train", "--config", "run.json", "--out", "a", "--steps", "0"], dir);
    expect_exit(&mut failures, &out, 0, "train baseline");
    let out = rbdc_bin(&["train", "--config", "run.json", "--out", "b", "--steps", "0", "--seed", "1"], dir);
    expect_exit(&mut failures, &out, 0, "train second seed");
    for sub in ["a/seed-0", "b/seed-1"] {
        match Checkpoint::load(&dir.join(sub).join("target.ckpt")) {
            Ok(ckpt) => {
                if ckpt.to_model().is_err() {
                    failures.push(format!("{sub}/target.ckpt does not rebuild a model"));
                }
            }
            Err(e) => failures.push(format!("{sub}/target.ckpt not loadable: {e}")),
        }
        let tree = std::fs::read_to_string(dir.join(sub).join("run_tree.json")).unwrap();
        if serde_json::from_str::<RunTree>(&tree).is_err() {
            failures.push(format!("{sub}/run_tree.json is not a loadable run tree"));
        }
    }

    let out = rbdc_bin(
        &["couple", "--left", "a/seed-0/target.ckpt", "--right", "b/seed-1/target.ckpt", "--out", "w"],
        dir,
    );
    if expect_exit(&mut failures, &out, 0, "couple") {
        if Checkpoint::load(&dir.join("w/wide.ckpt")).is_err() {
            failures.push("wide.ckpt not loadable".to_string());
        }
        let report = std::fs::read_to_string(dir.join("w/coupling_report.json")).unwrap();
        if serde_json::from_str::<CouplingReport>(&report).is_err() {
            failures.push("coupling_report.json is not a loadable report".to_string());
        }
    }
    // The coupled artifact feeds verify; its report artifact must re-load.
    let out = rbdc_bin(
        &[
            "verify", "--wide", "w/wide.ckpt", "--left", "a/seed-0/target.ckpt",
            "--right", "b/seed-1/target.ckpt", "--out", "verify.json",
        ],
        dir,
    );
    if expect_exit(&mut failures, &out, 0, "verify") {
        let report = std::fs::read_to_string(dir.join("verify.json")).unwrap();
        match serde_json::from_str::<CouplingReport>(&report) {
            Ok(r) => {
                if !r.pass {
                    failures.push("verify reported exit 0 but pass = false".to_string());
                }
            }
            Err(_) => failures.push("verify.json is not a loadable report".to_string()),
        }
    }
    // Train curves feed report.
    let out = rbdc_bin(&["report", "a/curve.csv", "b/curve.csv", "--out", "merged.csv"], dir);
    if expect_exit(&mut failures, &out, 0, "report") {
        let merged = std::fs::read_to_string(dir.join("merged.csv")).unwrap();
        if merged.lines().count() != 3 {
            failures.push(format!("merged.csv has {} lines, want 3", merged.lines().count()));
        }
    }

    // Exit 1: malformed config (unknown key).
    std::fs::write(dir.join("bad.json"), r#"{ "plan": { "bogus": 1 } }"#).unwrap();
    let out = rbdc_bin(&["plan", "--config", "bad.json"], dir);
    expect_exit(&mut failures, &out, 1, "plan with unknown key");

    // Exit 2: verification refused (the left parent is not a coupling).
    let out = rbdc_bin(
        &[
            "verify", "--wide", "a/seed-0/target.ckpt", "--left", "a/seed-0/target.ckpt",
            "--right", "b/seed-1/target.ckpt",
        ],
        dir,
    );
    expect_exit(&mut failures, &out, 2, "verify unrelated checkpoint");

    // Exit 3: numeric blow-up during training.
    let mut blow = cfg.clone();
    blow["train"]["optimizer"] = json!("sgd_momentum");
    blow["train"]["base_lr"] = json!(1e18);
    blow["train"]["total_epochs"] = json!(6);
    blow["model"]["depth"] = json!(2);
    blow["plan"]["epochs"] = json!(6.0);
    std::fs::write(dir.join("blow.json"), serde_json::to_string_pretty(&blow).unwrap()).unwrap();
    let out = rbdc_bin(&["train", "--config", "blow.json", "--out", "boom", "--steps", "0"], dir);
    expect_exit(&mut failures, &out, 3, "train with diverging step");

    conclude(9, "CLI contract", failures);
}

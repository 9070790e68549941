//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p utuning --test acceptance`; add `-- 3 5` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use utuning::backbone::{Backbone, BackboneConfig};
use utuning::composer::{self, compose, enumerate_ablation_grid, UTuningConfig};
use utuning::error::Result;
use utuning::experiment::{
    finetune_schedule, pretrained_backbone, run_grid, run_transfer, scaling_identity,
    TransferSettings,
};
use utuning::tensor::Tensor;
use utuning::train::{DataSizes, TrainOptions};
use utuning::verify::{
    backbone_stats, count_row, grad_check, gradcheck_suite, max_stats_diff, model_stats,
    run_equivalence, stats_csv, vpt_deep_sweep, zero_init_identity, EquivalenceOptions,
    GradCheckOptions, TunerType, REFERENCE_MILLIONS, REFERENCE_TOLERANCE_M, STATS_HEADER,
};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

fn equivalence() -> Result<Verdict> {
    let started = Instant::now();
    let r = run_equivalence(&EquivalenceOptions::default())?;
    let secs = started.elapsed().as_secs_f64();
    let (pre, pro, ada) = (
        r.max_diff(TunerType::Prefix),
        r.max_diff(TunerType::Prompt),
        r.max_diff(TunerType::Adapter),
    );
    let ok = r.cases.len() == 300
        && r.equivalence_passed()
        && pre < 1e-9
        && pro < 1e-9
        && ada < 1e-12
        && secs < 10.0;
    verdict(
        ok,
        format!(
            "{} cases, max diff prefix {pre:.1e} prompt {pro:.1e} adapter {ada:.1e}, {secs:.2}s",
            r.cases.len()
        ),
    )
}

fn gates() -> Result<Verdict> {
    let r = run_equivalence(&EquivalenceOptions {
        types: vec![TunerType::Prefix, TunerType::Prompt],
        ..Default::default()
    })?;
    let checks: Vec<_> = r.cases.iter().filter_map(|c| c.gate.as_ref()).collect();
    let lo = checks
        .iter()
        .map(|g| g.lambda_min)
        .fold(f64::INFINITY, f64::min);
    let hi = checks
        .iter()
        .map(|g| g.lambda_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let open = checks.iter().all(|g| g.in_open_interval);
    let ok = checks.len() == 200 && open && r.gates_passed() && r.max_gate_error() <= 1e-12;
    verdict(
        ok,
        format!(
            "{} gate checks, lambda in [{lo:.3e}, {hi:.6}], max row rebuild error {:.1e}",
            checks.len(),
            r.max_gate_error()
        ),
    )
}

fn gradients() -> Result<Verdict> {
    let started = Instant::now();
    let opts = GradCheckOptions::default();
    let suite = gradcheck_suite();
    let singles = suite
        .iter()
        .filter(|(n, _)| n.starts_with("single-"))
        .count();
    let has_dual = suite
        .iter()
        .any(|(_, c)| *c == UTuningConfig::default_dual());
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, cfg) in &suite {
        let r = grad_check(name, cfg, &opts)?;
        worst = r.tensors.iter().map(|t| t.rel_err).fold(worst, f64::max);
        if !r.passed {
            failures.push(name.clone());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = singles == 9 && has_dual && failures.is_empty() && secs < 60.0;
    verdict(
        ok,
        format!(
            "{} configs ({singles} single + default dual), max rel err {worst:.1e}, frozen bit-identical after {} AdamW steps, {secs:.1}s{}",
            suite.len(),
            opts.adam_steps,
            if failures.is_empty() { String::new() } else { format!(", failed: {}", failures.join(" ")) }
        ),
    )
}

fn counts() -> Result<Verdict> {
    let bb = BackboneConfig::vitb16(100);
    let mut ok = true;
    let mut parts = Vec::new();
    for ((name, reference), exact) in REFERENCE_MILLIONS.iter().zip([76_900, 169_060]) {
        let cfg = composer::preset(name).expect("reference presets exist");
        let row = count_row("vitb16", &bb, name, &cfg)?;
        let rounded = (row.trainable_m * 100.0).round() / 100.0;
        ok &= row.trainable == exact && (rounded - reference).abs() <= REFERENCE_TOLERANCE_M + 1e-9;
        parts.push(format!(
            "{name} {} ({rounded:.2}M vs {reference:.2}M)",
            row.trainable
        ));
    }
    let sweep = vpt_deep_sweep()?;
    let exact = sweep.iter().filter(|p| p.passed).count();
    ok &= sweep.len() == 27 && exact == 27;
    parts.push(format!("L·n·d sweep {exact}/{}", sweep.len()));
    verdict(ok, parts.join(", "))
}

fn identity() -> Result<Verdict> {
    let bb = Backbone::new(BackboneConfig::desk(), 0)?;
    let mut failed = Vec::new();
    let (mut out_diff, mut stat_diff): (f64, f64) = (0.0, 0.0);
    let grid = enumerate_ablation_grid();
    for entry in &grid {
        let r = zero_init_identity(&bb, &entry.name, &entry.config, 0, 10, 1e-12)?;
        out_diff = out_diff.max(r.max_output_diff);
        stat_diff = stat_diff.max(r.max_stats_diff);
        if !r.passed {
            failed.push(entry.name.clone());
        }
    }
    // Exported statistics of a freshly composed default model.
    let model = compose(&bb, &UTuningConfig::default_dual(), 0)?;
    let c = &bb.config;
    let x = Tensor::randn(
        &[64, c.tokens, c.input_width],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(11),
    );
    let tuned = model_stats(&model, &x)?;
    let frozen = backbone_stats(&bb, &x)?;
    let csv = stats_csv(&tuned);
    let export_ok = csv.lines().next() == Some(STATS_HEADER)
        && csv.lines().count() == 1 + 6 * tuned.len()
        && tuned.len() == frozen.len()
        && max_stats_diff(&tuned, &frozen) < 1e-12;
    let ok = failed.is_empty() && export_ok;
    verdict(
        ok,
        format!(
            "{}/{} configs over 10 batches, max output diff {out_diff:.1e}, max stats diff {stat_diff:.1e}, export {} rows{}",
            grid.len() - failed.len(),
            grid.len(),
            csv.lines().count() - 1,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    )
}

fn transfer() -> Result<Verdict> {
    let started = Instant::now();
    let settings = TransferSettings::default();
    let mut gaps = Vec::new();
    let mut parts = Vec::new();
    for seed in 0..3 {
        let r = run_transfer(seed, &settings)?;
        parts.push(format!(
            "seed {seed}: probe {:.3} dual {:.3}",
            r.probe_acc, r.dual_acc
        ));
        gaps.push(r.gap_points());
    }
    let secs = started.elapsed().as_secs_f64();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let ok = mean >= 10.0 && gaps.iter().all(|&g| g >= 0.0) && secs < 300.0;
    verdict(
        ok,
        format!(
            "mean gap {mean:.1} points ({}), {secs:.0}s",
            parts.join("; ")
        ),
    )
}

fn grid() -> Result<Verdict> {
    let sizes = DataSizes {
        train: 128,
        test: 64,
    };
    let settings = TransferSettings {
        pretrain_epochs: 2,
        sizes: sizes.clone(),
        ..Default::default()
    };
    let opts = TrainOptions::default();
    let task = settings.task(0)?;
    let (bb, _) = pretrained_backbone(&task, &settings, 0, &opts)?;
    let rows = run_grid(
        &bb,
        &task,
        &finetune_schedule(2, settings.base_lr),
        &sizes,
        &opts,
        |_| {},
    );
    let reduced = rows
        .iter()
        .filter(|r| r.loss_reduced && r.error.is_none())
        .count();
    let id = scaling_identity(&bb, 0)?;
    let ok = rows.len() == 25 && reduced == 25 && id.bit_exact && id.max_delta > 0.0;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.loss_reduced)
        .map(|r| r.name.as_str())
        .collect();
    verdict(
        ok,
        format!(
            "{reduced}/{} configs reduced loss in 2 epochs, direct vs channel-wise(1) bit-exact: {} (tuner delta {:.1e}){}",
            rows.len(),
            id.bit_exact,
            id.max_delta,
            if failed.is_empty() { String::new() } else { format!(", not reduced: {}", failed.join(" ")) }
        ),
    )
}

fn broken_gate() -> Result<Verdict> {
    let r = run_equivalence(&EquivalenceOptions {
        break_gate: true,
        ..Default::default()
    })?;
    let failing = r.cases.iter().filter(|c| !c.passed).count();
    let ok = !r.equivalence_passed() && failing > 0;
    verdict(
        ok,
        format!(
            "equivalence fails with the broken gate: {failing}/{} cases over tolerance",
            r.cases.len()
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 8] = [
    (1, "parallel equivalence", equivalence),
    (2, "gate range and row rebuild", gates),
    (3, "gradients and frozen weights", gradients),
    (4, "parameter counts", counts),
    (5, "zero-init identity", identity),
    (6, "dual adapter beats linear probe", transfer),
    (7, "ablation grid smoke", grid),
    (8, "broken gate is detected", broken_gate),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut all_passed = true;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let v = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict {
                passed: false,
                detail: format!("error: {e}"),
            },
            Err(_) => Verdict {
                passed: false,
                detail: "panicked".into(),
            },
        };
        all_passed &= v.passed;
        println!(
            "criterion {id} {name}: {} ({}; {:.1}s)",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            started.elapsed().as_secs_f64()
        );
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

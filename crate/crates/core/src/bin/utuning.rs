use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use utuning::backbone::{Backbone, BackboneConfig};
use utuning::checkpoint;
use utuning::composer::{compose, UTuningConfig};
use utuning::error::{Error, Result};
use utuning::experiment::{self, finetune_schedule, TransferSettings};
use utuning::run_config::RunConfig;
use utuning::tensor::Precision;
use utuning::train::{
    finetune_petl, generate_dataset, linear_probe, pretrain_backbone, pretrain_schedule, DataSizes,
    Split, SyntheticTask, TaskConfig, TrainOptions,
};
use utuning::verify::{self, CaseRecord, EquivalenceOptions, GradCheckOptions, Report};

#[derive(Parser, Debug)]
#[command(
    name = "utuning",
    version,
    about = "Parallel tuner verification and desk-scale experiments"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Arithmetic precision (verification commands require f64).
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,

    /// Directory for reports, metrics and checkpoints [default: out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run config, or a bare tuner config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse()
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Training samples per distribution.
    #[arg(long)]
    train_size: Option<usize>,
    /// Test samples per distribution.
    #[arg(long)]
    test_size: Option<usize>,
    /// Noise std of the synthetic task.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct BackboneSource {
    /// Pretrained backbone file [default: <out>/backbone.utnt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pretrain a backbone first instead of loading one.
    #[arg(long)]
    pretrain: bool,
    /// Epochs of the pretraining run started by --pretrain.
    #[arg(long, default_value_t = 5)]
    pretrain_epochs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Original vs parallel forms of prefix, prompt and adapter tuners.
    VerifyEquivalence {
        /// Comma-separated subset of prefix, prompt, adapter.
        #[arg(long, default_value = "prefix,prompt,adapter")]
        types: String,
        /// Cases per tuner type.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Evaluate λ/β with a deliberately wrong normaliser.
        #[arg(long)]
        break_gate: bool,
    },
    /// Analytic vs central-difference gradients, and frozen-weight checks.
    GradCheck {
        /// Check a single named tuner preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Trainable and frozen parameter counts.
    CountParams {
        /// Backbone preset (desk, vitb16, tiny).
        #[arg(long)]
        backbone: Option<String>,
        /// Override the class count of the backbone preset.
        #[arg(long)]
        classes: Option<usize>,
        /// Count a single named tuner preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train every backbone weight on the pretraining distribution.
    Pretrain {
        /// Backbone preset [default: desk].
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fine-tune one tuner configuration on the shifted task.
    Train {
        #[command(flatten)]
        source: BackboneSource,
        /// Tuner preset [default: default].
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fine-tune all 25 ablation configurations.
    RunGrid {
        #[command(flatten)]
        source: BackboneSource,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-layer, per-site activation statistics as CSV.
    ExportStats {
        /// Model or backbone file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// pretrain-train, pretrain-test, downstream-train or downstream-test.
        #[arg(long, default_value = "downstream-test")]
        split: String,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::VerifyEquivalence { .. } => "verify-equivalence",
            Command::GradCheck { .. } => "grad-check",
            Command::CountParams { .. } => "count-params",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::RunGrid { .. } => "run-grid",
            Command::ExportStats { .. } => "export-stats",
        }
    }
}

struct Ctx {
    seed: u64,
    precision: Precision,
    out: PathBuf,
    run: RunConfig,
    argv: Vec<String>,
    started: Instant,
}

impl Ctx {
    fn report(&self) -> Report {
        Report::new(self.argv.clone())
    }

    fn opts(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            precision: self.precision,
            ..Default::default()
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn require_f64(&self) -> Result<()> {
        if self.precision != Precision::F64 {
            return Err(Error::config("precision", "verification runs in f64 only"));
        }
        Ok(())
    }

    fn settings(&self, backbone: BackboneConfig, data: &DataArgs) -> Result<TransferSettings> {
        let mut s = TransferSettings {
            backbone,
            ..Default::default()
        };
        if let Some(n) = data.noise.or(self.run.noise) {
            if !(n.is_finite() && n >= 0.0) {
                return Err(Error::config("noise", "must be finite and ≥ 0"));
            }
            s.noise = n;
        }
        s.sizes = DataSizes {
            train: data.train_size.unwrap_or(s.sizes.train),
            test: data.test_size.unwrap_or(s.sizes.test),
        };
        if s.sizes.train == 0 || s.sizes.test == 0 {
            return Err(Error::config("train_size", "dataset sizes must be ≥ 1"));
        }
        Ok(s)
    }

    fn backbone_config(&self, cli: Option<&str>, default: &str) -> Result<BackboneConfig> {
        if let Some(name) = cli {
            return BackboneConfig::preset(name).ok_or_else(|| {
                Error::config("backbone", format!("unknown backbone preset `{name}`"))
            });
        }
        match self.run.backbone_config()? {
            Some(c) => Ok(c),
            None => Ok(BackboneConfig::preset(default).expect("built-in preset")),
        }
    }

    fn tuner(&self, cli: Option<&str>) -> Result<Option<(String, UTuningConfig)>> {
        if let Some(name) = cli {
            return utuning::composer::preset(name)
                .map(|c| Some((name.to_string(), c)))
                .ok_or_else(|| Error::config("preset", format!("unknown tuner preset `{name}`")));
        }
        self.run.tuner()
    }

    fn epochs(&self, cli: Option<usize>, default: usize) -> Result<usize> {
        let e = cli.or(self.run.epochs).unwrap_or(default);
        if e == 0 {
            return Err(Error::config("epochs", "must be ≥ 1"));
        }
        Ok(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let started = Instant::now();
    let name = cli.command.name();
    let run = match cli.config.as_deref().map(RunConfig::load).transpose() {
        Ok(r) => r.unwrap_or_default(),
        Err(e) => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            return finish(&out, name, Err(e), argv, started);
        }
    };
    let ctx = Ctx {
        seed: cli.seed.or(run.seed).unwrap_or(0),
        precision: cli.precision.or(run.precision).unwrap_or_default(),
        out: cli
            .out
            .clone()
            .or_else(|| run.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        run,
        argv: argv.clone(),
        started,
    };
    let result = match &cli.command {
        Command::VerifyEquivalence {
            types,
            cases,
            break_gate,
        } => cmd_verify_equivalence(&ctx, types, *cases, *break_gate),
        Command::GradCheck { preset } => cmd_grad_check(&ctx, preset.as_deref()),
        Command::CountParams {
            backbone,
            classes,
            preset,
        } => cmd_count_params(&ctx, backbone.as_deref(), *classes, preset.as_deref()),
        Command::Pretrain {
            backbone,
            epochs,
            data,
        } => cmd_pretrain(&ctx, backbone.as_deref(), *epochs, data),
        Command::Train {
            source,
            preset,
            epochs,
            lr,
            data,
        } => cmd_train(&ctx, source, preset.as_deref(), *epochs, *lr, data),
        Command::RunGrid {
            source,
            epochs,
            lr,
            data,
        } => cmd_run_grid(&ctx, source, *epochs, *lr, data),
        Command::ExportStats {
            checkpoint,
            split,
            batch,
        } => cmd_export_stats(&ctx, checkpoint, split, *batch),
    };
    finish(&ctx.out, name, result, argv, started)
}

/// Writes `<out>/<command>.json` whatever happened and maps the outcome to an exit code.
fn finish(
    out: &Path,
    name: &str,
    result: Result<Report>,
    argv: Vec<String>,
    started: Instant,
) -> ExitCode {
    let (report, code) = match result {
        Ok(r) => {
            let code = if r.passed { 0 } else { 1 };
            (r, code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut r = Report::new(argv);
            r.error = Some(e.to_string());
            (r.finish(started), e.exit_code())
        }
    };
    let path = out.join(format!("{name}.json"));
    let written = fs::create_dir_all(out).and_then(|_| fs::write(&path, report.to_json()));
    if let Err(e) = written {
        eprintln!("error: cannot write report {}: {e}", path.display());
        return ExitCode::from(2);
    }
    println!(
        "{}: {}/{} checks passed, report {}",
        if report.passed { "PASS" } else { "FAIL" },
        report.summary.passed,
        report.summary.total,
        path.display()
    );
    ExitCode::from(code as u8)
}

fn cmd_verify_equivalence(
    ctx: &Ctx,
    types: &str,
    cases: usize,
    break_gate: bool,
) -> Result<Report> {
    ctx.require_f64()?;
    if cases == 0 {
        return Err(Error::config("cases", "must be ≥ 1"));
    }
    let mut opts = EquivalenceOptions {
        types: verify::parse_types(types)?,
        cases,
        seed: ctx.seed,
        break_gate,
        ..Default::default()
    };
    let tol = &ctx.run.tolerance;
    opts.tolerance = tol.equivalence.unwrap_or(opts.tolerance);
    opts.adapter_tolerance = tol.adapter.unwrap_or(opts.adapter_tolerance);
    opts.gate_tolerance = tol.gate.unwrap_or(opts.gate_tolerance);
    let outcome = verify::run_equivalence(&opts)?;
    for &t in &opts.types {
        let tol = if t == verify::TunerType::Adapter {
            opts.adapter_tolerance
        } else {
            opts.tolerance
        };
        println!(
            "{t:<8} {cases} cases  max |diff| {:.3e}  (tolerance {tol:e})",
            outcome.max_diff(t)
        );
    }
    println!(
        "gates    max rebuild error {:.3e}, all λ/β in (0, 1): {}",
        outcome.max_gate_error(),
        outcome
            .cases
            .iter()
            .filter_map(|c| c.gate.as_ref())
            .all(|g| g.in_open_interval)
    );
    for c in outcome.cases.iter().filter(|c| !c.passed).take(5) {
        println!(
            "  failed {}-{:03}: T={} d={} h={} extra={} diff={:.3e}",
            c.kind, c.index, c.tokens, c.width, c.heads, c.extra, c.max_abs_diff
        );
    }
    Ok(outcome.report(ctx.argv.clone(), ctx.started))
}

fn cmd_grad_check(ctx: &Ctx, preset: Option<&str>) -> Result<Report> {
    ctx.require_f64()?;
    let mut opts = GradCheckOptions {
        seed: ctx.seed,
        ..Default::default()
    };
    if let Some(b) = ctx.run.backbone_config()? {
        opts.backbone = b;
    }
    opts.tolerance = ctx.run.tolerance.gradient.unwrap_or(opts.tolerance);
    let configs = match ctx.tuner(preset)? {
        Some(one) => vec![one],
        None => verify::gradcheck_suite(),
    };
    for (_, c) in &configs {
        c.validate(&opts.backbone)?;
    }
    let mut report = ctx.report();
    let mut results = Vec::new();
    for (name, config) in &configs {
        let r = verify::grad_check(name, config, &opts)?;
        let worst = r.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
        println!(
            "{:<26} {:>2} tensors  max rel err {:.2e}  frozen {}  {}",
            r.config,
            r.tensors.len(),
            worst,
            if r.frozen_modified.is_empty() {
                "untouched"
            } else {
                "MODIFIED"
            },
            if r.passed { "ok" } else { "FAIL" }
        );
        for t in r.tensors.iter().filter(|t| !t.passed) {
            println!(
                "    {}: rel err {:.3e}, worst coordinate {} analytic {:.6e} numeric {:.6e}",
                t.name, t.rel_err, t.worst_index, t.analytic, t.numeric
            );
        }
        for rec in r.records() {
            report.push(rec);
        }
        results.push(r);
    }
    report.extra =
        json!({ "tolerance": opts.tolerance, "backbone": opts.backbone, "configs": results });
    Ok(report.finish(ctx.started))
}

fn cmd_count_params(
    ctx: &Ctx,
    backbone: Option<&str>,
    classes: Option<usize>,
    preset: Option<&str>,
) -> Result<Report> {
    let bname = backbone.unwrap_or(if ctx.run.backbone.is_some() {
        "custom"
    } else {
        "vitb16"
    });
    let mut bcfg = ctx.backbone_config(backbone, "vitb16")?;
    if let Some(c) = classes {
        if c == 0 {
            return Err(Error::config("classes", "must be ≥ 1"));
        }
        bcfg.classes = c;
    }
    let mut report = ctx.report();
    let single = ctx.tuner(preset)?;
    let configs: Vec<(String, UTuningConfig)> = match &single {
        Some(one) => vec![one.clone()],
        None => vec![
            ("linear-probe".into(), UTuningConfig::empty()),
            ("vpt-deep".into(), UTuningConfig::vpt_deep(10)),
            ("default-dual".into(), UTuningConfig::default_dual()),
        ],
    };
    let mut rows = Vec::new();
    println!(
        "{:<16} {:>12} {:>10} {:>12} {:>14} {:>10}",
        "config", "trainable", "head", "tuners", "frozen", "M"
    );
    for (name, cfg) in &configs {
        let row = verify::count_row(bname, &bcfg, name, cfg)?;
        println!(
            "{:<16} {:>12} {:>10} {:>12} {:>14} {:>10.3}",
            row.config, row.trainable, row.head, row.tuners, row.frozen, row.trainable_m
        );
        for (g, n) in &row.groups {
            println!("    {g:<28} {n:>12}");
        }
        rows.push(row);
    }
    let mut sweep = Vec::new();
    if single.is_none() {
        let (d, c, l) = (bcfg.width, bcfg.classes, bcfg.layers);
        let head = d * c + c;
        report.push(CaseRecord::below(
            "linear-probe/closed-form",
            "abs_diff",
            rows[0].trainable.abs_diff(head) as f64,
            0.5,
        ));
        report.push(CaseRecord::below(
            "vpt-deep/closed-form",
            "abs_diff",
            rows[1].trainable.abs_diff(l * 10 * d + head) as f64,
            0.5,
        ));
        if bname == "vitb16" && bcfg.classes == 100 {
            for (row, (name, reference)) in rows.iter().zip(verify::REFERENCE_MILLIONS) {
                let rounded = (row.trainable_m * 100.0).round() / 100.0;
                println!(
                    "{name}: {:.3}M (rounded {rounded:.2}M) vs reference {reference:.2}M",
                    row.trainable_m
                );
                report.push(
                    CaseRecord::below(
                        format!("{name}/reference"),
                        "abs_diff_rounded_millions",
                        (rounded - reference).abs(),
                        verify::REFERENCE_TOLERANCE_M + 1e-9,
                    )
                    .with_detail(json!({ "trainable": row.trainable, "reference_m": reference })),
                );
            }
        }
        sweep = verify::vpt_deep_sweep()?;
        for p in &sweep {
            report.push(
                CaseRecord::below(
                    format!("sweep/L{}-n{}-d{}", p.layers, p.prompts, p.width),
                    "abs_diff",
                    p.formula
                        .abs_diff(p.enumerated)
                        .max(p.formula.abs_diff(p.counted)) as f64,
                    0.5,
                )
                .with_detail(serde_json::to_value(p)?),
            );
        }
        println!(
            "L·n·d sweep: {}/{} points exact",
            sweep.iter().filter(|p| p.passed).count(),
            sweep.len()
        );
    }
    report.extra = json!({ "backbone": bcfg, "rows": rows, "sweep": sweep });
    Ok(report.finish(ctx.started))
}

fn pretrain_into(
    ctx: &Ctx,
    settings: &TransferSettings,
    epochs: usize,
    report: &mut Report,
) -> Result<(Backbone, SyntheticTask)> {
    let task = settings.task(ctx.seed)?;
    let mut bb = Backbone::new(settings.backbone.clone(), ctx.seed)?;
    let h = pretrain_backbone(
        &task,
        &mut bb,
        &pretrain_schedule(epochs),
        &settings.sizes,
        &ctx.opts(),
    )?;
    ctx.write("pretrain_metrics.csv", &h.to_csv())?;
    let path = ctx.out.join("backbone.utnt");
    fs::create_dir_all(&ctx.out)?;
    checkpoint::save_backbone(&path, &bb, Some(&task))?;
    println!(
        "pretrained {epochs} epochs: train acc {:.4}, test acc {:.4}, saved {}",
        h.last().train_acc,
        h.last().test_acc,
        path.display()
    );
    report.push(
        CaseRecord::below(
            "pretrain/loss_reduced",
            "final_train_loss",
            h.last().train_loss,
            h.first().train_loss,
        )
        .with_detail(json!({ "first": h.first(), "last": h.last() })),
    );
    Ok((bb, task))
}

fn cmd_pretrain(
    ctx: &Ctx,
    backbone: Option<&str>,
    epochs: Option<usize>,
    data: &DataArgs,
) -> Result<Report> {
    let bcfg = ctx.backbone_config(backbone, "desk")?;
    let epochs = ctx.epochs(epochs, TransferSettings::default().pretrain_epochs)?;
    let settings = ctx.settings(bcfg, data)?;
    let mut report = ctx.report();
    pretrain_into(ctx, &settings, epochs, &mut report)?;
    report.extra = json!({ "settings": settings, "epochs": epochs });
    Ok(report.finish(ctx.started))
}

/// Pretrained backbone (head zeroed) and the task it came from.
fn source_backbone(
    ctx: &Ctx,
    source: &BackboneSource,
    data: &DataArgs,
    report: &mut Report,
) -> Result<(Backbone, SyntheticTask, TransferSettings)> {
    if source.pretrain {
        let settings = ctx.settings(ctx.backbone_config(None, "desk")?, data)?;
        let (mut bb, task) = pretrain_into(ctx, &settings, source.pretrain_epochs, report)?;
        bb.reset_head();
        return Ok((bb, task, settings));
    }
    let path = source
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.out.join("backbone.utnt"));
    if !path.exists() {
        return Err(Error::config(
            "checkpoint",
            format!(
                "no backbone at {}; run `pretrain` first or pass --pretrain",
                path.display()
            ),
        ));
    }
    let ck = checkpoint::load(&path)?;
    let mut bb = ck.backbone()?;
    bb.reset_head();
    let mut settings = ctx.settings(bb.config.clone(), data)?;
    let task = match ck.meta.synthetic_task()? {
        Some(t) if data.noise.is_none() && ctx.run.noise.is_none() => {
            settings.noise = t.config.noise;
            t
        }
        Some(t) => SyntheticTask::new(
            TaskConfig {
                noise: settings.noise,
                ..t.config.clone()
            },
            t.seed,
        )?,
        None => settings.task(ctx.seed)?,
    };
    Ok((bb, task, settings))
}

fn cmd_train(
    ctx: &Ctx,
    source: &BackboneSource,
    preset: Option<&str>,
    epochs: Option<usize>,
    lr: Option<f64>,
    data: &DataArgs,
) -> Result<Report> {
    let (name, config) = ctx
        .tuner(preset)?
        .unwrap_or_else(|| ("default".into(), UTuningConfig::default_dual()));
    let epochs = ctx.epochs(epochs, 50)?;
    let lr = lr.unwrap_or(0.005);
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config("lr", "must be positive"));
    }
    let mut report = ctx.report();
    let (bb, task, settings) = source_backbone(ctx, source, data, &mut report)?;
    config.validate(&bb.config)?;
    let sched = finetune_schedule(epochs, lr);
    let (model, history) = if config.specs.is_empty() {
        linear_probe(&bb, &task, &sched, &settings.sizes, &ctx.opts())?
    } else {
        let mut m = compose(&bb, &config, ctx.seed)?;
        let h = finetune_petl(&mut m, &task, &sched, &settings.sizes, &ctx.opts())?;
        (m, h)
    };
    ctx.write("metrics.csv", &history.to_csv())?;
    let path = ctx.out.join("model.utnt");
    checkpoint::save_model(&path, &model, Some(&task))?;
    let last = history.last();
    println!(
        "{name}: {} trainable params, final train loss {:.4}, test acc {:.4}, saved {}",
        model.count_trainable_params(),
        last.train_loss,
        last.test_acc,
        path.display()
    );
    report.push(CaseRecord::below(
        format!("{name}/frozen_untouched"),
        "frozen_tensors_modified",
        0.0,
        1.0,
    ));
    report.extra = json!({
        "config": name,
        "trainable": model.count_trainable_params(),
        "schedule": sched,
        "final": last,
    });
    Ok(report.finish(ctx.started))
}

fn cmd_run_grid(
    ctx: &Ctx,
    source: &BackboneSource,
    epochs: Option<usize>,
    lr: Option<f64>,
    data: &DataArgs,
) -> Result<Report> {
    let epochs = ctx.epochs(epochs, 50)?;
    let lr = lr.unwrap_or(0.005);
    let mut report = ctx.report();
    let (bb, task, settings) = source_backbone(ctx, source, data, &mut report)?;
    let sched = finetune_schedule(epochs, lr);
    let mut write_err = None;
    let rows = experiment::run_grid(&bb, &task, &sched, &settings.sizes, &ctx.opts(), |row| {
        println!(
            "{:<30} params {:>7}  loss {:.4} -> {:.4}  test acc {:.4}{}",
            row.name,
            row.params,
            row.first_loss,
            row.last_loss,
            row.final_test_acc,
            row.error
                .as_deref()
                .map(|e| format!("  ERROR {e}"))
                .unwrap_or_default()
        );
        if row.error.is_none() {
            if let Err(e) = ctx.write(&format!("grid/{}.csv", row.name), &row.history.to_csv()) {
                write_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    ctx.write("grid_summary.csv", &experiment::grid_summary_csv(&rows))?;
    for r in &rows {
        let mut rec = CaseRecord::below(
            format!("{}/loss_reduced", r.name),
            "final_train_loss",
            r.last_loss,
            r.first_loss,
        );
        rec.passed &= r.error.is_none();
        report.push(rec.with_detail(serde_json::to_value(r)?));
        report.push(CaseRecord::below(
            format!("{}/params_match_count", r.name),
            "abs_diff",
            r.params.abs_diff(r.counted_params) as f64,
            0.5,
        ));
    }
    report.push(CaseRecord::below(
        "summary/rows",
        "missing_rows",
        25usize.abs_diff(rows.len()) as f64,
        0.5,
    ));
    report.extra = json!({ "epochs": epochs, "schedule": sched, "sizes": settings.sizes });
    Ok(report.finish(ctx.started))
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(json!(s.replace('-', "_")))
        .map_err(|_| Error::config("split", format!("unknown split `{s}`")))
}

fn cmd_export_stats(ctx: &Ctx, path: &Path, split: &str, batch: usize) -> Result<Report> {
    let split = parse_split(split)?;
    if batch == 0 {
        return Err(Error::config("batch", "must be ≥ 1"));
    }
    let ck = checkpoint::load(path)?;
    if let Some((name, wanted)) = ctx.run.tuner()? {
        let stored = ck.meta.utuning.clone().unwrap_or_default();
        if stored != wanted {
            return Err(Error::config(
                "utuning",
                format!(
                    "checkpoint {} holds a different tuner config than `{name}`",
                    path.display()
                ),
            ));
        }
    }
    if let Some(b) = ctx.run.backbone_config()? {
        if b != ck.meta.backbone {
            return Err(Error::config(
                "backbone",
                "checkpoint backbone differs from the configured backbone",
            ));
        }
    }
    let model = ck.model()?;
    let task = match ck.meta.synthetic_task()? {
        Some(t) => t,
        None => SyntheticTask::new(TaskConfig::for_backbone(&ck.meta.backbone), ctx.seed)?,
    };
    let data = generate_dataset(&task, split, batch)?;
    let tuned = verify::model_stats(&model, &data.inputs)?;
    let frozen = verify::backbone_stats(&model.backbone, &data.inputs)?;
    let a = ctx.write("stats.csv", &verify::stats_csv(&tuned))?;
    ctx.write("stats_frozen.csv", &verify::stats_csv(&frozen))?;
    let max_diff = verify::max_stats_diff(&tuned, &frozen);
    let var_diff = verify::max_output_variance_diff(&tuned, &frozen);
    println!(
        "{} sites x {} statistics -> {}; max |tuned - frozen| {:.3e}, max output variance change {:.3e}",
        tuned.len(),
        verify::STAT_NAMES.len(),
        a.display(),
        max_diff,
        var_diff
    );
    let expected = model.backbone.config.layers * 5 * verify::STAT_NAMES.len();
    let mut report = ctx.report();
    report.push(CaseRecord::below(
        "rows",
        "abs_diff",
        (tuned.len() * verify::STAT_NAMES.len()).abs_diff(expected) as f64,
        0.5,
    ));
    report.extra = json!({
        "rows": expected,
        "tuners": model.tuner_names().len(),
        "max_stats_diff": max_diff,
        "max_output_variance_diff": var_diff,
        "stats": tuned,
        "frozen_stats": frozen,
    });
    Ok(report.finish(ctx.started))
}

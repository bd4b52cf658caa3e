//! Command-line front end for patch training, evaluation and export.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use tlpatch_core::data::{self, BundleMeta, Dataset, BUNDLE_SCHEMA_VERSION};
use tlpatch_core::detector::{ContextBlobDetector, CLASS_NAMES};
use tlpatch_core::evaluator::{
    collect_samples, compose_eval_image, evaluate_condition, ConditionReport,
};
use tlpatch_core::synthetic::render_dataset;
use tlpatch_core::trainer;
use tlpatch_core::types::{AnnotatedImage, Patch, TargetClassMapping};
use tlpatch_core::{Error, Result};

use settings::Settings;

#[derive(Parser)]
#[command(
    name = "tlpatch",
    version,
    about = "Train and evaluate under-light adversarial patches for traffic-light detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a patch on an annotated dataset and write a patch bundle
    Train(TrainArgs),
    /// Report detection metrics on a dataset, optionally with a patch applied
    Evaluate(EvaluateArgs),
    /// Write patched copies of a dataset for visual inspection
    Apply(ApplyArgs),
    /// Export a print-ready PNG of a trained patch at physical size
    ExportPrint(ExportPrintArgs),
    /// Render a synthetic traffic-light dataset
    RenderSynthetic(RenderSyntheticArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value settings file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Named preset applied before the config file: digital or physical
    #[arg(long, value_name = "NAME")]
    profile: Option<String>,
    /// Single key=value override, highest precedence, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed, shorthand for --set seed=N
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Directory for outputs and the resolved-config echo
    #[arg(long, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training dataset directory
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Evaluation dataset directory
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Patch bundle directory; omit for a clean baseline
    #[arg(long, value_name = "DIR")]
    patch: Option<PathBuf>,
}

#[derive(Args)]
struct ApplyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory to composite onto
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Patch bundle directory
    #[arg(long, value_name = "DIR")]
    patch: PathBuf,
}

#[derive(Args)]
struct ExportPrintArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Patch bundle directory
    #[arg(long, value_name = "DIR")]
    patch: PathBuf,
}

#[derive(Args)]
struct RenderSyntheticArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of scenes, defaults to the scene_count setting
    #[arg(long, value_name = "N")]
    count: Option<usize>,
}

/// On-disk evaluation report. The patched block is present only when a
/// patch was supplied.
#[derive(serde::Serialize)]
struct CliReport {
    clean: ConditionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    patched: Option<ConditionReport>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Apply(args) => cmd_apply(args),
        Command::ExportPrint(args) => cmd_export_print(args),
        Command::RenderSynthetic(args) => cmd_render_synthetic(args),
    }
}

/// Layers profile, config file, --set pairs and --seed, then validates.
fn resolve(common: &CommonArgs) -> Result<Settings> {
    let mut settings = Settings::with_profile(common.profile.as_deref())?;
    if let Some(path) = &common.config {
        settings.load_file(path)?;
    }
    for pair in &common.set {
        settings.apply_set(pair)?;
    }
    if let Some(seed) = common.seed {
        settings.attack.seed = seed;
    }
    settings.validate()?;
    Ok(settings)
}

/// Creates the output directory and echoes the resolved settings into it.
fn write_run_dir(out_dir: &Path, settings: &Settings) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("--out-dir {}: {e}", out_dir.display())))?;
    let path = out_dir.join("resolved.config");
    fs::write(&path, settings.resolved())
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn flag_context(flag: &str, err: Error) -> Error {
    match err {
        Error::Config(m) => Error::Config(format!("{flag}: {m}")),
        Error::Data(m) => Error::Data(format!("{flag}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{flag}: {m}")),
    }
}

fn load_dataset_arg(dir: &Path) -> Result<Dataset> {
    data::load_dataset(dir).map_err(|e| flag_context("--dataset", e))
}

fn load_patch_arg(dir: &Path) -> Result<(Patch, BundleMeta)> {
    data::load_patch_bundle(dir).map_err(|e| flag_context("--patch", e))
}

fn check_mapping_classes(mapping: &TargetClassMapping, class_names: &[String]) -> Result<()> {
    for (from, to) in mapping.iter() {
        if from >= class_names.len() || to >= class_names.len() {
            return Err(Error::config(format!(
                "mapping {from}:{to} references a class id outside the dataset's {} classes",
                class_names.len()
            )));
        }
    }
    Ok(())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let settings = resolve(&args.common)?;
    let dataset = load_dataset_arg(&args.dataset)?;
    let mapping = settings.mapping()?;
    check_mapping_classes(&mapping, &dataset.class_names)?;
    let detector = ContextBlobDetector::new(settings.detector.clone())?;

    let outcome = trainer::train(&dataset.images, &mapping, &detector, &settings.attack)?;

    let out_dir = &args.common.out_dir;
    write_run_dir(out_dir, &settings)?;
    let meta = BundleMeta {
        schema_version: BUNDLE_SCHEMA_VERSION,
        created_unix: unix_now(),
        class_names: dataset.class_names.clone(),
        mapping: mapping.iter().collect(),
        config: settings.attack.clone(),
        train_dataset: args.dataset.display().to_string(),
        patch_sha256: String::new(),
        png_sha256: String::new(),
    };
    data::save_patch_bundle(out_dir, &outcome.patch, meta)?;

    let mut log_lines = String::new();
    for record in &outcome.history {
        log_lines.push_str(&serde_json::to_string(record)?);
        log_lines.push('\n');
    }
    let log_path = out_dir.join("loss_history.ndjson");
    fs::write(&log_path, log_lines).map_err(|e| Error::data(format!("{}: {e}", log_path.display())))?;

    match (outcome.history.first(), outcome.history.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps over {} boxes ({} skipped), loss {:.4} -> {:.4}, bundle in {}",
            outcome.steps,
            outcome.boxes_visited,
            outcome.boxes_skipped,
            first.total,
            last.total,
            out_dir.display()
        ),
        _ => println!(
            "trained 0 steps (no mapped boxes in the dataset), bundle in {}",
            out_dir.display()
        ),
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let settings = resolve(&args.common)?;
    let dataset = load_dataset_arg(&args.dataset)?;
    let mapping = settings.mapping()?;
    check_mapping_classes(&mapping, &dataset.class_names)?;
    let detector = ContextBlobDetector::new(settings.detector.clone())?;

    let clean_samples = collect_samples(&dataset.images, &detector, &mapping, None);
    let clean = evaluate_condition(&clean_samples, &mapping);
    let patched = match &args.patch {
        Some(dir) => {
            let (patch, _) = load_patch_arg(dir)?;
            let samples = collect_samples(
                &dataset.images,
                &detector,
                &mapping,
                Some((&patch, settings.attack.eval_scale)),
            );
            Some(evaluate_condition(&samples, &mapping))
        }
        None => None,
    };

    let out_dir = &args.common.out_dir;
    write_run_dir(out_dir, &settings)?;
    println!(
        "clean:   correct {:.3} flip {:.3} vanish {:.3} fabrication {:.3} mAP {:.3}",
        clean.correct_rate, clean.flip_rate, clean.vanish_rate, clean.fabrication_rate, clean.mean_ap
    );
    if let Some(p) = &patched {
        println!(
            "patched: correct {:.3} flip {:.3} vanish {:.3} fabrication {:.3} mAP {:.3}",
            p.correct_rate, p.flip_rate, p.vanish_rate, p.fabrication_rate, p.mean_ap
        );
    }
    let report = CliReport { clean, patched };
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&report_path, json)
        .map_err(|e| Error::data(format!("{}: {e}", report_path.display())))?;
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_apply(args: ApplyArgs) -> Result<()> {
    let settings = resolve(&args.common)?;
    let dataset = load_dataset_arg(&args.dataset)?;
    let mapping = settings.mapping()?;
    check_mapping_classes(&mapping, &dataset.class_names)?;
    let (patch, _) = load_patch_arg(&args.patch)?;

    let out_dir = &args.common.out_dir;
    write_run_dir(out_dir, &settings)?;
    let images = dataset
        .images
        .iter()
        .map(|image| {
            let pixels = compose_eval_image(image, &patch, &mapping, settings.attack.eval_scale);
            AnnotatedImage::new(image.id.clone(), pixels, image.boxes.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let patched = Dataset {
        class_names: dataset.class_names.clone(),
        images,
    };
    let target = out_dir.join("patched");
    data::save_dataset(&target, &patched)?;
    println!(
        "wrote {} composited images to {}",
        patched.images.len(),
        target.display()
    );
    Ok(())
}

fn cmd_export_print(args: ExportPrintArgs) -> Result<()> {
    let settings = resolve(&args.common)?;
    let (patch, _) = load_patch_arg(&args.patch)?;
    let out_dir = &args.common.out_dir;
    write_run_dir(out_dir, &settings)?;
    let export = data::export_print(
        &patch,
        settings.light_width_m,
        settings.print_scale_factor,
        settings.dpi,
        out_dir,
    )?;
    println!(
        "wrote {} ({} px per side, {} dpi, {:.2} m physical side)",
        export.png_path.display(),
        export.meta.side_px,
        export.meta.dpi,
        export.meta.side_m
    );
    Ok(())
}

fn cmd_render_synthetic(args: RenderSyntheticArgs) -> Result<()> {
    let settings = resolve(&args.common)?;
    let count = args.count.unwrap_or(settings.scene_count);
    if count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let images = render_dataset(&settings.scene, count, settings.attack.seed)?;
    let out_dir = &args.common.out_dir;
    write_run_dir(out_dir, &settings)?;
    let dataset = Dataset {
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        images,
    };
    data::save_dataset(out_dir, &dataset)?;
    println!("rendered {count} scenes into {}", out_dir.display());
    Ok(())
}

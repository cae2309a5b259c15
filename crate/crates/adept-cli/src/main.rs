//! `adept`: coefficient-map extraction, two-stage pretraining, gradient
//! checking, and frozen-probe evaluation from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adept_core::config::{load_run_config, RunConfig};
use adept_core::dct::{
    build_dct_map, energy_compaction_stat, invert_dct_map, read_dct_blob, rgb_to_ycbcr,
    write_dct_blob,
};
use adept_core::gradcheck::{check_loss, run_standard_suites, DEFAULT_STEP};
use adept_core::imageio::load_image_file;
use adept_core::pipeline::{
    load_model, pretrain, probe_random_control, probe_report, PipelineError,
};
use adept_core::seeds;
use adept_core::Tensor;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const ROUNDTRIP_TOL: f64 = 1e-6;

#[derive(Parser)]
#[command(
    name = "adept",
    version,
    about = "Desk-scale human-centric pretraining toolkit",
    long_about = "Desk-scale human-centric pretraining toolkit.\n\n\
        Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or \
        numeric failure.\n\
        ADEPT_THREADS caps kernel parallelism (default: one thread)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract block-DCT coefficient maps from images.
    Dctmap(DctmapArgs),
    /// Run the two-stage pretraining pipeline.
    Pretrain(PretrainArgs),
    /// Finite-difference checks for every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Evaluate a checkpoint with a frozen linear probe.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct DctmapArgs {
    /// Images to process (PNG or binary PPM).
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Output directory for the <name>.f64 / <name>.hdr blob pairs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Patch edge in pixels; must divide both image dimensions.
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Low-frequency fraction for the reported energy-compaction statistic.
    #[arg(long, default_value_t = 0.25)]
    fraction: f64,
    /// Overwrite existing blobs.
    #[arg(long)]
    force: bool,
    /// Re-read each blob and verify the inverse transform against the input.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics (overrides `out` in the
    /// config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite artifacts left by a previous run.
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per op suite.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Tolerance on the worst relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Check a deliberately corrupted rule and expect the harness to flag it.
    #[arg(long)]
    negative_control: bool,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint produced by `adept pretrain`.
    #[arg(long, required_unless_present = "random_control")]
    checkpoint: Option<PathBuf>,
    /// TOML run configuration; must match the checkpoint's architecture.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory to write probe_report.json into (stdout always gets it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// First probe seed; the remaining seeds are consecutive.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of paired probe seeds.
    #[arg(long, default_value_t = 5)]
    num_seeds: usize,
    /// Compare two random encoders instead of a checkpoint (negative control).
    #[arg(long)]
    random_control: bool,
    /// Overwrite an existing probe_report.json.
    #[arg(long)]
    force: bool,
}

/// Config fields that may be overridden from the command line.
#[derive(Args, Clone)]
struct OverrideArgs {
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Strict mode: byte-stable metrics (drops wall-clock times).
    #[arg(long)]
    strict: bool,
    /// Stage-2 feature-noise scale.
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Patch edge in pixels.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
}

impl OverrideArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if self.strict {
            cfg.strict = true;
        }
        if let Some(scale) = self.noise_scale {
            cfg.train.noise_scale = scale;
        }
        if let Some(patch) = self.patch_size {
            cfg.dataset.patch = patch;
        }
        if let Some(n) = self.stage1_epochs {
            cfg.train.stage1_epochs = n;
        }
        if let Some(n) = self.stage2_epochs {
            cfg.train.stage2_epochs = n;
        }
    }
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn validation(err: impl std::fmt::Display) -> CliError {
    CliError::Validation(err.to_string())
}

fn runtime(err: impl std::fmt::Display) -> CliError {
    CliError::Runtime(err.to_string())
}

/// Training/probing errors split into "bad input" and "failed at runtime".
fn pipeline_error(err: PipelineError) -> CliError {
    match err {
        PipelineError::Config(e) => validation(e),
        PipelineError::Checkpoint(e) => validation(e),
        PipelineError::Probe { .. } => validation(err),
        other => runtime(other),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => load_run_config(p).map_err(validation),
        None => Ok(RunConfig::default()),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Validation(format!(
            "refusing to overwrite {} (pass --force to replace it)",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_dctmap(args: &DctmapArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out).map_err(runtime)?;
    for path in &args.images {
        let img = load_image_file(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let map = build_dct_map(&img, args.patch)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let stat = energy_compaction_stat(&map, args.fraction)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;

        let stem = args.out.join(
            path.file_stem()
                .ok_or_else(|| CliError::Validation(format!("{}: no file name", path.display())))?,
        );
        refuse_overwrite(&stem.with_extension("f64"), args.force)?;
        write_dct_blob(&map, &stem).map_err(runtime)?;
        println!(
            "{}: grid {}x{} patch {} energy_compaction_{} = {}",
            path.display(),
            map.grid_h,
            map.grid_w,
            map.patch,
            args.fraction,
            stat
        );

        if args.check {
            let reread = read_dct_blob(&stem).map_err(runtime)?;
            let inverted = invert_dct_map(&reread).map_err(runtime)?;
            let reference = rgb_to_ycbcr(&img);
            let mut worst = 0.0f64;
            for c in 0..3 {
                for (a, b) in inverted.plane(c).iter().zip(reference.plane(c)) {
                    worst = worst.max((a - b).abs());
                }
            }
            println!("  roundtrip_max_err = {worst:.3e}");
            if worst >= ROUNDTRIP_TOL {
                return Err(CliError::Runtime(format!(
                    "{}: inverse transform error {worst:.3e} exceeds {ROUNDTRIP_TOL:.0e}",
                    path.display()
                )));
            }
        }
    }
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.overrides.apply(&mut cfg);
    cfg.validate().map_err(validation)?;

    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Validation("no output directory: pass --out or set `out` in the config".into())
        })?;
    for artifact in [
        "config_resolved.toml",
        "metrics.jsonl",
        "checkpoint_stage1.ckpt",
        "checkpoint_final.ckpt",
    ] {
        refuse_overwrite(&out.join(artifact), args.force)?;
    }
    std::fs::create_dir_all(&out).map_err(runtime)?;
    std::fs::write(out.join("config_resolved.toml"), cfg.to_toml_string()).map_err(runtime)?;

    let outcome = pretrain(&cfg, Some(&out)).map_err(pipeline_error)?;
    for report in [&outcome.stage1, &outcome.stage2] {
        match report.epochs.last() {
            Some(m) => println!(
                "stage {}: {} epochs, final total {} (l_ctr {}, l_de {})",
                report.stage,
                report.epochs.len(),
                m.total,
                m.l_ctr,
                m.l_de
            ),
            None => println!("stage {}: 0 epochs", report.stage),
        }
    }
    println!("wrote {}", out.join("checkpoint_final.ckpt").display());
    Ok(())
}

/// A loss whose graph deliberately treats one factor as constant: the value
/// is x*x but the reported derivative is x, so finite differences must flag
/// the mismatch.
fn corrupted_loss(x: &Tensor) -> adept_core::tensor::Result<Tensor> {
    Ok(x.mul(&x.detach())?.sum())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.negative_control {
        let x0: Vec<f64> = (0..8)
            .map(|i| {
                let h = seeds::derive(args.seed, &[0xC0117, i]);
                let mag = 0.25 + (h % 1000) as f64 / 1000.0;
                if h & 1 == 0 { mag } else { -mag }
            })
            .collect();
        let report = check_loss(&corrupted_loss, &x0, &[8], args.step).map_err(runtime)?;
        if report.max_rel_err > 1e-2 {
            println!(
                "negative control: corrupted rule detected (max_rel_err {:.3e})",
                report.max_rel_err
            );
            return Ok(());
        }
        return Err(CliError::Runtime(format!(
            "negative control escaped detection (max_rel_err {:.3e})",
            report.max_rel_err
        )));
    }

    let reports = run_standard_suites(args.instances, args.step, args.seed).map_err(runtime)?;
    let mut failures = Vec::new();
    for r in &reports {
        println!(
            "{:<24} max_rel_err {:.3e}  ({} instances)",
            r.name, r.max_rel_err, r.instances
        );
        if !(r.max_rel_err.is_finite() && r.max_rel_err <= args.tol) {
            failures.push(r.name);
        }
    }
    if failures.is_empty() {
        println!("gradcheck: {} suites within {:.0e}", reports.len(), args.tol);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradcheck: {} of {} suites exceed {:.0e}: {}",
            failures.len(),
            reports.len(),
            args.tol,
            failures.join(", ")
        )))
    }
}

fn cmd_probe(args: &ProbeArgs) -> Result<(), CliError> {
    if args.num_seeds == 0 {
        return Err(CliError::Validation("--num-seeds must be at least 1".into()));
    }
    let cfg = load_config(args.config.as_deref())?;
    cfg.validate().map_err(validation)?;
    let seed_list: Vec<u64> = (0..args.num_seeds as u64).map(|i| args.seed + i).collect();

    let report = if args.random_control {
        probe_random_control(&cfg, &seed_list).map_err(pipeline_error)?
    } else {
        let path = args.checkpoint.as_ref().expect("clap enforces --checkpoint");
        if !path.exists() {
            return Err(CliError::Validation(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
        let (model, _stats) = load_model(path, &cfg).map_err(pipeline_error)?;
        probe_report(&cfg, &model.image_enc, &seed_list).map_err(pipeline_error)?
    };

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(format!("report encoding: {e}")))?;
    println!("{json}");
    if let Some(dir) = &args.out {
        let path = dir.join("probe_report.json");
        refuse_overwrite(&path, args.force)?;
        std::fs::create_dir_all(dir).map_err(runtime)?;
        std::fs::write(&path, format!("{json}\n")).map_err(runtime)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Dctmap(args) => cmd_dctmap(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Probe(args) => cmd_probe(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("adept: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

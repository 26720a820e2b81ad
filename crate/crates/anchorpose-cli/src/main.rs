//! Command-line front end: anchor tables, rotation fitting, center voting,
//! batch evaluation, and the synthetic benchmark.
//!
//! Exit codes: 0 success, 1 configuration error (flags, config files),
//! 2 data error (input files, degenerate inputs), 3 internal error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use anchorpose::anchors::{covering_radius, generate, AnchorGroupKind};
use anchorpose::bench::{emit_report, run_bench, BenchConfig, BenchError};
use anchorpose::fit::{fit_anchored, fit_direct, FitConfig, FitResult};
use anchorpose::losses::ObjectModel;
use anchorpose::metrics::{evaluate, pair_records, PoseRecord};
use anchorpose::models::load_ply;
use anchorpose::rng::substream;
use anchorpose::so3::{random_rotation, UnitQuaternion};
use anchorpose::voting::{ransac_vote, FieldFile, RansacConfig};

#[derive(Debug)]
enum CliError {
    /// Bad flags or config files. Exit 1.
    Config(String),
    /// Bad or degenerate input data. Exit 2.
    Data(String),
    /// Everything else. Exit 3.
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Internal(m) => write!(f, "internal: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "anchorpose",
    version,
    about = "Anchor-based rotation and translation estimation tools"
)]
struct Cli {
    /// Worker threads for parallel sections (0 = one per core). Results do
    /// not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Base seed for all randomized steps.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Subcommand-specific JSON config file (fit, vote, bench).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (or directory for `bench`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or verify anchor groups.
    Anchors {
        #[command(subcommand)]
        action: AnchorsAction,
    },
    /// Fit a rotation to a posed model by anchored or direct descent.
    Fit(FitArgs),
    /// Recover a center from a direction field by voting.
    Vote(VoteArgs),
    /// Score pose estimates against ground truth.
    Eval(EvalArgs),
    /// Run the synthetic end-to-end benchmark.
    Bench,
}

#[derive(Subcommand)]
enum AnchorsAction {
    /// Print an anchor group as JSON.
    Dump {
        /// tetra12, octa24, or icosa60.
        #[arg(long, value_parser = parse_kind)]
        group: AnchorGroupKind,
    },
    /// Re-derive and check a group's invariants.
    Verify {
        #[arg(long, value_parser = parse_kind)]
        group: AnchorGroupKind,
        /// Monte-Carlo samples for the covering radius (minimum 100000).
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

#[derive(Args)]
struct FitArgs {
    /// ASCII PLY model file.
    #[arg(long, conflicts_with = "shape")]
    model: Option<PathBuf>,
    /// JSON synthetic-shape spec file.
    #[arg(long)]
    shape: Option<PathBuf>,
    /// Override the model's symmetry flag.
    #[arg(long)]
    symmetric: Option<bool>,
    /// Target rotation "w,x,y,z"; random (from --seed) when omitted.
    #[arg(long, value_parser = parse_quat)]
    target: Option<UnitQuaternion>,
    /// Anchor group for the anchored fitter; omit for a direct descent.
    #[arg(long, value_parser = parse_kind)]
    group: Option<AnchorGroupKind>,
    /// Start rotation "w,x,y,z" for the direct fitter; random when omitted.
    #[arg(long, value_parser = parse_quat, conflicts_with = "group")]
    start: Option<UnitQuaternion>,
}

#[derive(Args)]
struct VoteArgs {
    /// Direction-field JSON file ({"points": [[x,y,z]...], "dirs": ...}).
    #[arg(long)]
    field: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON array of estimated pose records.
    #[arg(long)]
    estimates: PathBuf,
    /// JSON array of ground-truth pose records, same order.
    #[arg(long)]
    truths: PathBuf,
    /// Model PLY file; repeat for several objects.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Accuracy threshold as a fraction of each model's diameter.
    #[arg(long, default_value_t = 0.1)]
    add_frac: f64,
    /// Integration horizon for the error curve, meters.
    #[arg(long, default_value_t = 0.1)]
    auc_max: f64,
    #[arg(long, default_value_t = 100)]
    curve_points: usize,
}

fn parse_kind(s: &str) -> Result<AnchorGroupKind, String> {
    AnchorGroupKind::from_str(s)
}

fn parse_quat(s: &str) -> Result<UnitQuaternion, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected \"w,x,y,z\", got {} fields", parts.len()));
    }
    let mut c = [0.0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        c[i] = p
            .parse()
            .map_err(|e| format!("component {i} ({p:?}): {e}"))?;
    }
    UnitQuaternion::new_normalize(c[0], c[1], c[2], c[3]).map_err(|e| e.to_string())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))
}

/// Loads a JSON config file, or the default when no file was given.
fn load_config<T: Default + serde::de::DeserializeOwned>(
    path: Option<&PathBuf>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("parsing {}: {e}", p.display())))
        }
    }
}

fn emit(out: Option<&PathBuf>, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serializing output: {e}")))?;
    match out {
        None => {
            println!("{text}");
            Ok(())
        }
        Some(path) => fs::write(path, format!("{text}\n"))
            .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display()))),
    }
}

#[derive(Serialize)]
struct AnchorDump {
    kind: AnchorGroupKind,
    count: usize,
    min_pairwise_angle_rad: f64,
    covering_radius_rad: f64,
    quats_wxyz: Vec<[f64; 4]>,
}

fn cmd_anchors_dump(group: AnchorGroupKind, out: Option<&PathBuf>) -> Result<(), CliError> {
    let set = generate(group);
    emit(
        out,
        &AnchorDump {
            kind: set.kind(),
            count: set.len(),
            min_pairwise_angle_rad: set.min_pairwise_angle(),
            covering_radius_rad: set.covering_radius(),
            quats_wxyz: set.quats().iter().map(|q| q.wxyz()).collect(),
        },
    )
}

fn cmd_anchors_verify(group: AnchorGroupKind, samples: usize, seed: u64) -> Result<(), CliError> {
    if samples < 100_000 {
        return Err(CliError::Config(format!(
            "at least 100000 samples required for a trustworthy estimate, got {samples}"
        )));
    }
    // generate() itself asserts closure under composition and canonical
    // ordering; reaching this point means those hold.
    let set = generate(group);
    println!("ok: {} members, identity at index 0", set.len());

    let expected = match group {
        AnchorGroupKind::Tetra12 => 2.0 * std::f64::consts::PI / 3.0,
        AnchorGroupKind::Octa24 => std::f64::consts::FRAC_PI_2,
        AnchorGroupKind::Icosa60 => 2.0 * std::f64::consts::PI / 5.0,
    };
    let min_angle = set.min_pairwise_angle();
    if (min_angle - expected).abs() > 1e-9 {
        return Err(CliError::Internal(format!(
            "min pairwise angle {min_angle} differs from expected {expected}"
        )));
    }
    println!("ok: min pairwise angle {min_angle:.9} rad");

    let mut rng = substream(seed, "cli-anchor-verify", 0);
    let cover = covering_radius(&set, samples, &mut rng);
    if cover < min_angle / 2.0 - 0.05 || cover > std::f64::consts::PI {
        return Err(CliError::Internal(format!(
            "covering radius {cover} inconsistent with packing bound {}",
            min_angle / 2.0
        )));
    }
    println!("ok: covering radius ~{cover:.4} rad ({samples} samples)");
    Ok(())
}

#[derive(Serialize)]
struct FitOutput {
    target_wxyz: [f64; 4],
    mode: &'static str,
    group: Option<AnchorGroupKind>,
    selected_index: Option<usize>,
    per_anchor_normalized_loss: Option<Vec<f64>>,
    result: FitResult,
}

fn load_fit_model(args: &FitArgs) -> Result<ObjectModel, CliError> {
    match (&args.model, &args.shape) {
        (Some(path), None) => {
            load_ply(path, args.symmetric).map_err(|e| CliError::Data(e.to_string()))
        }
        (None, Some(path)) => {
            let text = read_file(path)?;
            let spec = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("parsing {}: {e}", path.display())))?;
            anchorpose::models::generate(&spec).map_err(|e| CliError::Data(e.to_string()))
        }
        _ => Err(CliError::Config(
            "exactly one of --model or --shape is required".into(),
        )),
    }
}

fn cmd_fit(
    args: &FitArgs,
    config: Option<&PathBuf>,
    out: Option<&PathBuf>,
    seed: u64,
) -> Result<(), CliError> {
    let model = load_fit_model(args)?;
    let fit_config: FitConfig = load_config(config)?;
    let target = args
        .target
        .unwrap_or_else(|| random_rotation(&mut substream(seed, "cli-fit-target", 0)));

    let output = match args.group {
        Some(kind) => {
            let set = generate(kind);
            let fit = fit_anchored(&model, &target, &set, &fit_config)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            FitOutput {
                target_wxyz: target.wxyz(),
                mode: "anchored",
                group: Some(kind),
                selected_index: Some(fit.selected_index),
                per_anchor_normalized_loss: Some(
                    fit.per_anchor.iter().map(|r| r.normalized_loss).collect(),
                ),
                result: fit.selected().clone(),
            }
        }
        None => {
            let start = args
                .start
                .unwrap_or_else(|| random_rotation(&mut substream(seed, "cli-fit-start", 0)));
            let result = fit_direct(&model, &target, &start, &fit_config)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            FitOutput {
                target_wxyz: target.wxyz(),
                mode: "direct",
                group: None,
                selected_index: None,
                per_anchor_normalized_loss: None,
                result,
            }
        }
    };
    emit(out, &output)
}

fn cmd_vote(
    args: &VoteArgs,
    config: Option<&PathBuf>,
    out: Option<&PathBuf>,
    seed: u64,
) -> Result<(), CliError> {
    let text = read_file(&args.field)?;
    let file: FieldFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("parsing {}: {e}", args.field.display())))?;
    let field = file
        .into_field()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut ransac: RansacConfig = load_config(config)?;
    ransac.seed = seed;
    let result = ransac_vote(&field, &ransac).map_err(|e| CliError::Data(e.to_string()))?;
    emit(out, &result)
}

fn cmd_eval(args: &EvalArgs, out: Option<&PathBuf>) -> Result<(), CliError> {
    let mut models = std::collections::BTreeMap::new();
    for path in &args.models {
        let model = load_ply(path, None).map_err(|e| CliError::Data(e.to_string()))?;
        models.insert(model.id().to_string(), model);
    }
    let estimates: Vec<PoseRecord> = serde_json::from_str(&read_file(&args.estimates)?)
        .map_err(|e| CliError::Data(format!("parsing {}: {e}", args.estimates.display())))?;
    let truths: Vec<PoseRecord> = serde_json::from_str(&read_file(&args.truths)?)
        .map_err(|e| CliError::Data(format!("parsing {}: {e}", args.truths.display())))?;
    let pairs = pair_records(&estimates, &truths).map_err(|e| CliError::Data(e.to_string()))?;
    let report = evaluate(
        &models,
        &pairs,
        args.add_frac,
        args.auc_max,
        args.curve_points,
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    emit(out, &report)
}

fn cmd_bench(config: Option<&PathBuf>, out: Option<&PathBuf>, seed: u64) -> Result<(), CliError> {
    let mut bench_config: BenchConfig = load_config(config)?;
    bench_config.seed = seed;
    let report = run_bench(&bench_config).map_err(|e| match e {
        BenchError::BadConfig { .. } => CliError::Config(e.to_string()),
        BenchError::Model(_) | BenchError::Io { .. } | BenchError::NoSuccessfulInstances => {
            CliError::Data(e.to_string())
        }
        other => CliError::Internal(other.to_string()),
    })?;
    let dir = out.cloned().unwrap_or_else(|| PathBuf::from("bench-out"));
    emit_report(&report, &dir).map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string(&report.aggregate).map_err(|e| CliError::Internal(e.to_string()))?
    );
    eprintln!("report written to {}", dir.display());
    Ok(())
}

fn run() -> Result<(), CliError> {
    let cli = Cli::try_parse().map_err(|e| {
        // Let clap print its own rich message for --help / --version.
        if e.use_stderr() {
            CliError::Config(e.to_string())
        } else {
            e.print().ok();
            std::process::exit(0);
        }
    })?;

    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }

    match &cli.command {
        Command::Anchors { action } => match action {
            AnchorsAction::Dump { group } => cmd_anchors_dump(*group, cli.out.as_ref()),
            AnchorsAction::Verify { group, samples } => {
                cmd_anchors_verify(*group, *samples, cli.seed)
            }
        },
        Command::Fit(args) => cmd_fit(args, cli.config.as_ref(), cli.out.as_ref(), cli.seed),
        Command::Vote(args) => cmd_vote(args, cli.config.as_ref(), cli.out.as_ref(), cli.seed),
        Command::Eval(args) => cmd_eval(args, cli.out.as_ref()),
        Command::Bench => cmd_bench(cli.config.as_ref(), cli.out.as_ref(), cli.seed),
    }
}

/// Restores the default SIGPIPE behavior so `anchorpose ... | head` dies
/// quietly instead of panicking when the pipe closes.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    match run() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

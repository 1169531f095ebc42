//! `brokengeo`: register images with broken geodesics, apply and invert the
//! resulting transforms, measure path lengths, generate synthetic
//! deformations and score registrations.
//!
//! Exit codes: 0 success, 2 malformed input or contract violation,
//! 3 grid mismatch, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use brokengeo::eval::{evaluate_pair, transfer_labels};
use brokengeo::field::{warp, DisplacementTransform, Interpolation, Provenance};
use brokengeo::geodesic::{path_metric, run_broken_geodesic, DriverConfig};
use brokengeo::metaimage;
use brokengeo::report::{load_geodesic, read_report, save_run, write_atomic};
use brokengeo::svf::{inverse_transform, ExpConfig};
use brokengeo::synth::{make_pair, metric_vs_degree, phantom, sweep_csv, warp_labels_truth, SynthSpec};
use brokengeo::{Error, Grid, Result};

#[derive(Parser)]
#[command(name = "brokengeo", version, about = "Large diffeomorphic registration by broken geodesics")]
struct Cli {
    /// Worker threads for per-voxel kernels and sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Warp an image or transfer a label map through a transform.
    Apply(ApplyArgs),
    /// Write the inverse of a velocity field or of a whole run.
    Invert(InvertArgs),
    /// Print the path length of a run.
    Metric(MetricArgs),
    /// Generate a synthetic pair, or sweep degrees and seeds.
    Synth(SynthArgs),
    /// Score a registration run.
    Evaluate(EvaluateArgs),
    /// Write the built-in test image and its tissue labels.
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Driver configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    image: PathBuf,
    /// Displacement field (`.mhd`/`.mha`) or a run's `report.json`.
    #[arg(long)]
    transform: PathBuf,
    #[arg(long, default_value = "linear")]
    scheme: Interpolation,
    /// Treat the image as integer labels and use nearest-neighbour transfer.
    #[arg(long)]
    labels: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    /// Velocity field, or a run's `report.json` to invert the whole path.
    #[arg(long)]
    svf: PathBuf,
    /// JSON holding `min_scalings`/`max_step_norm`; other keys are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long)]
    report: PathBuf,
    /// Manifest location (default: `metric_manifest.json` beside the report).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    image: PathBuf,
    /// `SynthSpec` JSON; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Labels of `image`; their ground-truth warp is written too.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Register pairs over `--degrees` × `--seeds` and write `sweep.csv`.
    #[arg(long)]
    sweep: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    degrees: Vec<u32>,
    /// Number of seeds for the sweep, starting at the `SynthSpec` seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Driver configuration for the sweep.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// `report.json` of the forward run.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    labels_moving: Option<PathBuf>,
    #[arg(long)]
    labels_fixed: Option<PathBuf>,
    /// Driver configuration for the backward run (default: the report's).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PhantomArgs {
    /// Grid size, e.g. `128x128` or `64x64x64`.
    #[arg(long, default_value = "128x128")]
    dims: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    version: String,
    wall_seconds: f64,
    exit_status: i32,
}

/// What a command did, gathered as it runs so a manifest can be written even
/// when it fails part way.
struct Run {
    command: &'static str,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
}

impl Run {
    fn new(command: &'static str, manifest: Option<PathBuf>) -> Self {
        Run { command, config: Value::Null, inputs: Vec::new(), outputs: Vec::new(), manifest }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn wrote(&mut self, files: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(files);
    }

    fn finish(&self, started: Instant, exit_status: i32) -> Result<()> {
        let Some(path) = &self.manifest else {
            return Ok(());
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let show = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect();
        let m = RunManifest {
            command: self.command.to_string(),
            config: self.config.clone(),
            inputs: show(&self.inputs),
            outputs: show(&self.outputs),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_seconds: started.elapsed().as_secs_f64(),
            exit_status,
        };
        write_atomic(path, serde_json::to_string_pretty(&m)?.as_bytes())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DimensionMismatch(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>, run: &mut Run) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            run.input(p);
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", p.display())))
        }
    }
}

/// `out.mhd` → `out.manifest.json`.
fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(['x', 'X'])
        .map(|t| t.trim().parse::<usize>().map_err(|_| Error::contract(format!("bad dims '{s}'"))))
        .collect()
}

fn load_transform(path: &Path, grid: &Grid) -> Result<DisplacementTransform> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(load_geodesic(path, grid)?.composed)
    } else {
        let d = metaimage::read_field(path)?;
        grid.ensure_same(d.grid(), "transform")?;
        Ok(DisplacementTransform::from_displacement(d, Provenance::External))
    }
}

fn cmd_register(a: &RegisterArgs, run: &mut Run) -> Result<()> {
    run.input(&a.moving);
    run.input(&a.fixed);
    let cfg: DriverConfig = read_json(a.config.as_deref(), run)?;
    cfg.validate()?;
    run.config = serde_json::to_value(&cfg)?;
    let moving = metaimage::read_image(&a.moving)?;
    let fixed = metaimage::read_image(&a.fixed)?;
    let g = run_broken_geodesic(&moving, &fixed, &cfg)?;
    let (_, files) = save_run(&a.out, &g, &cfg)?;
    run.wrote(files);
    let warped = warp(&moving, &g.composed, Interpolation::Linear)?;
    run.wrote(metaimage::write_image(a.out.join("warped.mhd"), &warped)?);
    log::info!("{} legs, metric {}", g.n_legs(), path_metric(&g));
    Ok(())
}

fn cmd_apply(a: &ApplyArgs, run: &mut Run) -> Result<()> {
    run.input(&a.image);
    run.input(&a.transform);
    run.config = json!({ "scheme": a.scheme, "labels": a.labels });
    if a.labels {
        let labels = metaimage::read_labels(&a.image)?;
        let t = load_transform(&a.transform, labels.grid())?;
        run.wrote(metaimage::write_labels(&a.out, &transfer_labels(&labels, &t)?)?);
    } else {
        let img = metaimage::read_image(&a.image)?;
        let t = load_transform(&a.transform, img.grid())?;
        run.wrote(metaimage::write_image(&a.out, &warp(&img, &t, a.scheme)?)?);
    }
    Ok(())
}

fn cmd_invert(a: &InvertArgs, run: &mut Run) -> Result<()> {
    run.input(&a.svf);
    let exp_cfg: ExpConfig = read_json(a.config.as_deref(), run)?;
    exp_cfg.validate()?;
    run.config = serde_json::to_value(&exp_cfg)?;
    let inv = if a.svf.extension().is_some_and(|e| e == "json") {
        let report = read_report(&a.svf)?;
        let base = a.svf.parent().unwrap_or(Path::new("."));
        let Some(first) = report.legs.first() else {
            return Err(Error::contract("report has no legs; its grid is unknown"));
        };
        let grid = metaimage::read_field(base.join(first))?.grid().clone();
        load_geodesic(&a.svf, &grid)?.inverse(&exp_cfg)?
    } else {
        inverse_transform(&metaimage::read_field(&a.svf)?, &exp_cfg)?
    };
    run.wrote(metaimage::write_field(&a.out, inv.displacement())?);
    Ok(())
}

fn cmd_metric(a: &MetricArgs, run: &mut Run) -> Result<f64> {
    run.input(&a.report);
    let report = read_report(&a.report)?;
    run.config = serde_json::to_value(&report.config)?;
    let base = a.report.parent().unwrap_or(Path::new("."));
    let mut total = 0.0;
    for leg in &report.legs {
        let p = base.join(leg);
        total += brokengeo::v_norm(&metaimage::read_field(&p)?);
        run.input(&p);
    }
    Ok(total)
}

fn cmd_synth(a: &SynthArgs, run: &mut Run) -> Result<()> {
    run.input(&a.image);
    let spec: SynthSpec = read_json(a.spec.as_deref(), run)?;
    let img = metaimage::read_image(&a.image)?;
    fs::create_dir_all(&a.out)?;
    if a.sweep {
        let cfg: DriverConfig = read_json(a.config.as_deref(), run)?;
        cfg.validate()?;
        run.config = json!({ "spec": spec, "driver": cfg, "degrees": a.degrees, "seeds": a.seeds });
        let seeds: Vec<u64> = (0..a.seeds).map(|i| spec.seed + i).collect();
        let rows = metric_vs_degree(&img, &spec, &a.degrees, &seeds, &cfg)?;
        let path = a.out.join("sweep.csv");
        write_atomic(&path, sweep_csv(&rows).as_bytes())?;
        run.wrote([path]);
        return Ok(());
    }
    run.config = serde_json::to_value(&spec)?;
    let pair = make_pair(&img, &spec)?;
    run.wrote(metaimage::write_image(a.out.join("moving.mhd"), &pair.moving)?);
    run.wrote(metaimage::write_image(a.out.join("fixed.mhd"), &pair.fixed)?);
    run.wrote(metaimage::write_field(a.out.join("svf.mhd"), &pair.svf)?);
    run.wrote(metaimage::write_field(a.out.join("truth.mhd"), pair.truth.displacement())?);
    if let Some(lp) = &a.labels {
        run.input(lp);
        let labels = metaimage::read_labels(lp)?;
        img.grid().ensure_same(labels.grid(), "synth labels")?;
        run.wrote(metaimage::write_labels(a.out.join("moving_labels.mhd"), &labels)?);
        run.wrote(metaimage::write_labels(a.out.join("fixed_labels.mhd"), &warp_labels_truth(&labels, &pair)?)?);
    }
    let spec_path = a.out.join("spec.json");
    write_atomic(&spec_path, serde_json::to_string_pretty(&spec)?.as_bytes())?;
    run.wrote([spec_path]);
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, run: &mut Run) -> Result<()> {
    run.input(&a.moving);
    run.input(&a.fixed);
    run.input(&a.report);
    let moving = metaimage::read_image(&a.moving)?;
    let fixed = metaimage::read_image(&a.fixed)?;
    moving.grid().ensure_same(fixed.grid(), "evaluate images")?;
    let report = read_report(&a.report)?;
    let cfg = match &a.config {
        Some(_) => read_json(a.config.as_deref(), run)?,
        None => report.config.clone(),
    };
    cfg.validate()?;
    run.config = serde_json::to_value(&cfg)?;
    let g = load_geodesic(&a.report, moving.grid())?;
    let mut read_labels = |p: &Option<PathBuf>| -> Result<Option<_>> {
        p.as_ref()
            .map(|p| {
                run.input(p);
                metaimage::read_labels(p)
            })
            .transpose()
    };
    let lm = read_labels(&a.labels_moving)?;
    let lf = read_labels(&a.labels_fixed)?;
    let r = evaluate_pair(&moving, &fixed, lm.as_ref(), lf.as_ref(), &g, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&a.out, serde_json::to_string_pretty(&r)?.as_bytes())?;
    run.wrote([a.out.clone()]);
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs, run: &mut Run) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    run.config = json!({ "dims": dims });
    let grid = Grid::unit(&dims)?;
    let (img, labels) = phantom(&grid);
    fs::create_dir_all(&a.out)?;
    run.wrote(metaimage::write_image(a.out.join("phantom.mhd"), &img)?);
    run.wrote(metaimage::write_labels(a.out.join("phantom_labels.mhd"), &labels)?);
    Ok(())
}

fn dispatch(cli: &Cli, run: &mut Run) -> Result<()> {
    match &cli.command {
        Command::Register(a) => cmd_register(a, run),
        Command::Apply(a) => cmd_apply(a, run),
        Command::Invert(a) => cmd_invert(a, run),
        Command::Metric(a) => {
            let m = cmd_metric(a, run)?;
            println!("{m}");
            Ok(())
        }
        Command::Synth(a) => cmd_synth(a, run),
        Command::Evaluate(a) => cmd_evaluate(a, run),
        Command::Phantom(a) => cmd_phantom(a, run),
    }
}

fn new_run(cmd: &Command) -> Run {
    match cmd {
        Command::Register(a) => Run::new("register", Some(a.out.join("manifest.json"))),
        Command::Apply(a) => Run::new("apply", Some(sibling_manifest(&a.out))),
        Command::Invert(a) => Run::new("invert", Some(sibling_manifest(&a.out))),
        Command::Metric(a) => {
            let default = a.report.parent().unwrap_or(Path::new(".")).join("metric_manifest.json");
            Run::new("metric", Some(a.manifest.clone().unwrap_or(default)))
        }
        Command::Synth(a) => Run::new("synth", Some(a.out.join("manifest.json"))),
        Command::Evaluate(a) => Run::new("evaluate", Some(sibling_manifest(&a.out))),
        Command::Phantom(a) => Run::new("phantom", Some(a.out.join("manifest.json"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("brokengeo: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("brokengeo: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let started = Instant::now();
    let mut run = new_run(&cli.command);
    let result = dispatch(&cli, &mut run);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("brokengeo {}: {e}", run.command);
            exit_code(e)
        }
    };
    if let Err(e) = run.finish(started, code as i32) {
        eprintln!("brokengeo {}: cannot write manifest: {e}", run.command);
        return ExitCode::from(if code == 0 { 2 } else { code });
    }
    ExitCode::from(code)
}

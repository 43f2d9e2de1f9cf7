use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use apc::clients::http::{HttpSettings, HttpVision, HttpVlm};
use apc::clients::oracle::OracleOptions;
use apc::clients::{Caches, Clients, ReplayStore, Session};
use apc::eval::{aggregate, DEFAULT_BUCKET_DEG};
use apc::pipeline::{abstract_image, Mode, PipelineConfig};
use apc::prompt::Task;
use apc::render::{assign_colors, backward_shift, normalize_layout, render_cubes, render_empty, RenderError};
use apc::runner::{benchmark_ref, read_results, run_to_dir, Backend, RunManifest, RunOptions, MANIFEST_FILE};
use apc::synth::{gen_task, probe_sweep, Benchmark, SynthSettings, AZIMUTHS};
use apc::{load_scene, save_scene, transform_scene, CameraModel, RgbImage};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_CONFIG: u8 = 1;
const EXIT_ITEM_FAILURES: u8 = 2;

#[derive(Parser)]
#[command(name = "apc", version, about = "Perspective-aware spatial question answering and its benchmarks")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Items evaluated in parallel.
    #[arg(long, global = true, default_value_t = 4)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pipeline configuration (JSON, same fields as the manifest's `pipeline`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Leftright,
    Closer,
    Visibility,
    Facing,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Leftright => Task::LeftRight,
            TaskArg::Closer => Task::Closer,
            TaskArg::Visibility => Task::Visibility,
            TaskArg::Facing => Task::Facing,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Visual,
    Numerical,
    Direct,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Visual => Mode::Visual,
            ModeArg::Numerical => Mode::Numerical,
            ModeArg::Direct => Mode::Direct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    /// Analytic stand-ins built from each synthetic scene.
    Oracle,
    /// Oracle services with an answerer that ignores the stated perspective.
    Egocentric,
    /// Remote VLM and vision services configured through the environment.
    Http,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "oracle")]
    backend: BackendArg,
    /// Answer every call from a recorded run directory.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark.
    Gen {
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// Evaluate a benchmark file.
    Run {
        #[arg(long)]
        bench: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate and evaluate the angular-offset sweep.
    Probe {
        #[arg(long, value_enum, default_value = "leftright")]
        task: TaskArg,
        #[arg(long, default_value_t = AZIMUTHS)]
        sweep: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render a scene file from a reference object's perspective.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long = "ref")]
        reference: String,
        /// Move the viewpoint back so objects beside and behind show up.
        #[arg(long)]
        shift: bool,
    },
    /// Build the camera-frame abstraction of an image with the HTTP services.
    Abstract {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        /// Vertical field of view of the image in degrees.
        #[arg(long)]
        vfov: Option<f64>,
    },
    /// Summarize a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BUCKET_DEG)]
        bucket: f64,
    },
}

/// Failure with a stable code, printed as `error[CODE]: message`.
struct Failure {
    code: &'static str,
    message: String,
    exit: u8,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: "E_CONFIG",
            message: message.into(),
            exit: EXIT_CONFIG,
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: "E_IO",
            message: message.into(),
            exit: EXIT_CONFIG,
        }
    }

    fn backend(message: impl Into<String>) -> Self {
        Self {
            code: "E_BACKEND",
            message: message.into(),
            exit: EXIT_CONFIG,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error[{}]: {}", f.code, f.message);
            ExitCode::from(f.exit)
        }
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let config: PipelineConfig =
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    config
        .render
        .validate()
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn http_clients() -> Result<(Clients, BTreeMap<String, String>), Failure> {
    let settings = HttpSettings::default();
    let vlm = HttpVlm::from_env(&settings).map_err(|e| Failure::backend(e.to_string()))?;
    let vision = HttpVision::from_env(&settings).map_err(|e| Failure::backend(e.to_string()))?;
    let mut endpoints = BTreeMap::new();
    endpoints.insert("vlm".to_string(), vlm.endpoint());
    endpoints.insert("vision".to_string(), vision.base_url().to_string());
    let vlm = Arc::new(vlm);
    let vision = Arc::new(vision);
    Ok((
        Clients {
            vlm: vlm.clone(),
            judge: vlm,
            detector: vision.clone(),
            segmenter: vision.clone(),
            depth: vision.clone(),
            orient: vision,
        },
        endpoints,
    ))
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    match &cli.command {
        Command::Gen { task } => {
            let dir = out_dir(&cli, "bench");
            let items = gen_task((*task).into(), cli.seed);
            let bench = Benchmark {
                task: Some((*task).into()),
                seed: Some(cli.seed),
                settings: Some(SynthSettings::default()),
                items,
            };
            std::fs::create_dir_all(&dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
            let path = dir.join("benchmark.json");
            bench.save(&path).map_err(|e| Failure::io(e.to_string()))?;
            println!("wrote {} items to {}", bench.items.len(), path.display());
            Ok(0)
        }
        Command::Run { bench, run } => {
            let benchmark = Benchmark::load(bench).map_err(|e| Failure::config(format!("{}: {e}", bench.display())))?;
            let base = bench.parent().map(Path::to_path_buf).unwrap_or_default();
            let bref = benchmark_ref(bench, benchmark.items.len()).map_err(|e| Failure::io(e.to_string()))?;
            let mut manifest_extra = |m: &mut RunManifest| {
                m.benchmark = Some(bref.clone());
                m.synth = benchmark.settings;
            };
            evaluate(&cli, "run", &benchmark.items, base, run, &mut manifest_extra)
        }
        Command::Probe { task, sweep, run } => {
            if *sweep != AZIMUTHS {
                return Err(Failure::config(format!("only a {AZIMUTHS}-azimuth sweep is supported, got {sweep}")));
            }
            let items = probe_sweep((*task).into(), cli.seed);
            let mut manifest_extra = |m: &mut RunManifest| m.synth = Some(SynthSettings::default());
            evaluate(&cli, "probe", &items, PathBuf::from("."), run, &mut manifest_extra)
        }
        Command::Render {
            scene,
            reference,
            shift,
        } => {
            let config = load_config(cli.config.as_deref())?;
            let text = std::fs::read_to_string(scene).map_err(|e| Failure::io(format!("{}: {e}", scene.display())))?;
            let scene = load_scene(&text).map_err(|e| Failure::config(e.to_string()))?;
            let mut viewer = transform_scene(&scene, reference).map_err(|e| Failure::config(e.to_string()))?;
            if *shift {
                viewer = backward_shift(&viewer, config.render.margin).map_err(|e| Failure::config(e.to_string()))?;
            }
            let colors = assign_colors(&viewer).map_err(|e| Failure::config(e.to_string()))?;
            let rendered = match normalize_layout(&viewer, &config.render) {
                Ok(n) => render_cubes(&n, &colors, &config.render),
                Err(RenderError::NothingVisible) => render_empty(&colors, &config.render),
                Err(e) => Err(e),
            }
            .map_err(|e| Failure::config(e.to_string()))?;
            let dir = out_dir(&cli, ".");
            std::fs::create_dir_all(&dir).map_err(|e| Failure::io(e.to_string()))?;
            let path = dir.join("render.png");
            std::fs::write(&path, rendered.image.to_png()).map_err(|e| Failure::io(e.to_string()))?;
            print!("{}", colors.legend());
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::Abstract { image, question, vfov } => {
            let config = load_config(cli.config.as_deref())?;
            let img = RgbImage::load(image).map_err(|e| Failure::io(format!("{}: {e}", image.display())))?;
            let camera = CameraModel::from_vertical_fov(img.width(), img.height(), vfov.unwrap_or(config.default_vfov_deg))
                .map_err(|e| Failure::config(e.to_string()))?;
            let (clients, _) = http_clients()?;
            let caches = Caches::default();
            let mut session = Session::live(&clients, &caches).with_deadline(config.deadline());
            match abstract_image(&mut session, Arc::new(img), &camera, question, &config) {
                Ok(scene) => {
                    println!("{}", save_scene(&scene));
                    Ok(0)
                }
                Err(e) => {
                    eprintln!("error[E_ITEM]: {}: {e}", e.kind());
                    Ok(EXIT_ITEM_FAILURES)
                }
            }
        }
        Command::Report { results, bucket } => {
            let records = read_results(results).map_err(|e| Failure::config(format!("{}: {e}", results.display())))?;
            let report = aggregate(&records, *bucket).map_err(|e| Failure::config(e.to_string()))?;
            print!("{}", report.to_table());
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir).map_err(|e| Failure::io(e.to_string()))?;
                std::fs::write(dir.join("curve.csv"), report.to_csv()).map_err(|e| Failure::io(e.to_string()))?;
            }
            Ok(0)
        }
    }
}

fn evaluate(
    cli: &Cli,
    command: &str,
    items: &[apc::synth::BenchmarkItem],
    base_dir: PathBuf,
    run: &RunArgs,
    extra: &mut dyn FnMut(&mut RunManifest),
) -> Result<u8, Failure> {
    let mut pipeline = load_config(cli.config.as_deref())?;
    if let Some(m) = run.mode {
        pipeline.mode = m.into();
    }
    let mut endpoints = BTreeMap::new();
    let mut recorded = None;
    let backend = match (&run.replay, run.backend) {
        (Some(dir), _) => {
            let store = ReplayStore::load_dir(dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
            recorded = Some(
                RunManifest::load(&dir.join(MANIFEST_FILE)).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?,
            );
            Backend::Replay(Arc::new(store))
        }
        (None, BackendArg::Oracle) => Backend::Oracle(OracleOptions::default()),
        (None, BackendArg::Egocentric) => Backend::Oracle(OracleOptions {
            egocentric: true,
            ..OracleOptions::default()
        }),
        (None, BackendArg::Http) => {
            let (clients, e) = http_clients()?;
            endpoints = e;
            Backend::Live(clients)
        }
    };
    let mut manifest = RunManifest::new(command, backend.name(), cli.seed, cli.jobs, pipeline.clone());
    manifest.endpoints = endpoints;
    extra(&mut manifest);
    let options = RunOptions {
        pipeline,
        jobs: cli.jobs,
        base_dir,
        blobs: None,
    };
    let dir = out_dir(cli, "run");
    let output = run_to_dir(&dir, items, &backend, options, manifest, recorded.as_ref())
        .map_err(|e| Failure::io(e.to_string()))?;
    if let Some(report) = output.report() {
        print!("{}", report.to_table());
    }
    let failures = output.failures();
    if failures > 0 {
        eprintln!("error[E_ITEMS]: {failures} item(s) failed; see {}", dir.join("results.jsonl").display());
        return Ok(EXIT_ITEM_FAILURES);
    }
    Ok(0)
}

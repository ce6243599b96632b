use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use hyperinr::checkpoint::load_hyperinr;
use hyperinr::config::ExperimentConfig;
use hyperinr::pipeline::{self, Layout};
use hyperinr::tasks::{format_metrics_table, Engine};
use hyperinr::Error;
use hyperinr_service::ServiceState;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "hyperinr", version, about = "HyperINR pipeline: data, teacher, distillation, evaluation, rendering")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all steps.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides teacher and distillation epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Worker threads for rendering and evaluation.
    #[arg(long, global = true)]
    device_threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the analytic training fields.
    GenData,
    /// Trains the CoordNet teacher on the training fields.
    TrainTeacher,
    /// Evaluates the teacher at the distillation parameters.
    BuildDistill,
    /// Distills HyperINR from the teacher fields.
    Distill,
    /// Writes a metrics table against ground truth and LERP.
    Eval {
        /// Parameter vector in native units, comma separated; repeatable.
        #[arg(long = "theta", value_parser = parse_theta)]
        thetas: Vec<Theta>,
    },
    /// Renders a stored field, or one engine at θ.
    Render {
        #[arg(long, conflicts_with = "engine")]
        field: Option<PathBuf>,
        #[arg(long, value_parser = parse_engine)]
        engine: Option<Engine>,
        #[arg(long, value_parser = parse_theta)]
        theta: Option<Theta>,
        #[arg(long)]
        size: Option<usize>,
        /// .png or .ppm
        #[arg(long)]
        image: PathBuf,
    },
    /// Bakes a shadow volume of the occluder scene for one light direction.
    BakeShadows {
        #[arg(long)]
        light_polar: f64,
        #[arg(long)]
        light_azimuth: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Runs gen-data through eval.
    Run,
    /// Serves the exploration API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training data directory for the LERP engine.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Static UI bundle served under `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

/// Comma-separated parameter vector in native units.
#[derive(Clone, Debug)]
struct Theta(Vec<f64>);

fn parse_theta(s: &str) -> Result<Theta, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Theta)
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    match s {
        "hyperinr" => Ok(Engine::Hyperinr),
        "lerp" => Ok(Engine::Lerp),
        "reference" => Ok(Engine::Reference),
        _ => Err(format!("unknown engine {s:?} (hyperinr, lerp, reference)")),
    }
}

enum Failure {
    Config(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            e => Failure::Run(e),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let path = common.config.as_ref().ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    apply_overrides(&mut cfg, common)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, common: &Common) -> Result<(), Failure> {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.teacher.epochs = epochs;
        cfg.hyper.epochs = epochs;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

fn serve(
    common: &Common,
    port: u16,
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    ui_dir: Option<PathBuf>,
) -> Result<(), Failure> {
    let layout = Layout::new(&common.out);
    let checkpoint = checkpoint.or_else(|| existing(layout.hyperinr()));
    let dataset = dataset.or_else(|| existing(layout.data()));
    let (model, embedded) = match &checkpoint {
        Some(p) => {
            let (m, cfg) = load_hyperinr(p)?;
            (Some(m), cfg)
        }
        None => (None, None),
    };
    let cfg = match (&common.config, embedded) {
        (Some(_), _) => load_config(common)?,
        (None, Some(mut cfg)) => {
            apply_overrides(&mut cfg, common)?;
            cfg
        }
        (None, None) => return Err(Failure::Config("serve needs --config or a checkpoint with an embedded config".into())),
    };
    let training = dataset.as_deref().map(pipeline::load_training_set).transpose()?;
    let mut state = ServiceState::new(cfg, model, training)?;
    if let Some(dir) = ui_dir {
        state = state.with_ui_dir(dir);
    }
    let addr = SocketAddr::from((Ipv4Addr::UNSPECIFIED, port));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Run(Error::Config(e.to_string())))?;
    runtime
        .block_on(hyperinr_service::serve(Arc::new(state), addr))
        .map_err(|e| Failure::Run(Error::Io {
            path: PathBuf::from(addr.to_string()),
            source: e,
        }))
}

fn print_report(name: &str, report: &hyperinr::training::TrainReport) {
    if let Some(last) = report.epochs.last() {
        let psnr = last.probe_psnr.map(|p| format!(", probe PSNR {p:.2} dB")).unwrap_or_default();
        println!("{name}: {} epochs, final loss {:.6}{psnr}", report.epochs.len(), last.loss);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.common.device_threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    let common = &cli.common;
    let layout = Layout::new(&common.out);
    match cli.command {
        Command::GenData => {
            let set = pipeline::gen_data(&load_config(common)?, &layout)?;
            println!("wrote {} fields to {}", set.len(), layout.data().display());
        }
        Command::TrainTeacher => print_report("teacher", &pipeline::train_teacher_step(&load_config(common)?, &layout)?),
        Command::BuildDistill => {
            let set = pipeline::build_distill_step(&load_config(common)?, &layout)?;
            println!("wrote {} teacher fields to {}", set.len(), layout.distill().display());
        }
        Command::Distill => print_report("hyperinr", &pipeline::distill_step(&load_config(common)?, &layout)?),
        Command::Eval { thetas } => {
            let cfg = load_config(common)?;
            let thetas = if thetas.is_empty() {
                cfg.eval.thetas.clone()
            } else {
                thetas.into_iter().map(|t| t.0).collect()
            };
            let rows = pipeline::eval_step(&cfg, &layout, &thetas)?;
            print!("{}", format_metrics_table(&rows));
        }
        Command::Render {
            field,
            engine,
            theta,
            size,
            image,
        } => {
            let theta = theta.map(|t| t.0);
            let mut cfg = load_config(common)?;
            if let Some(s) = size {
                cfg.scene.size = s;
            }
            cfg.validate()?;
            match (field, engine) {
                (Some(f), _) => pipeline::render_field_file(&cfg, &f, theta.as_deref(), &image)?,
                (None, Some(e)) => {
                    let theta = theta.ok_or_else(|| Failure::Config("--engine needs --theta".into()))?;
                    pipeline::render_engine(&cfg, &layout, e, &theta, &image)?
                }
                (None, None) => return Err(Failure::Config("render needs --field or --engine".into())),
            }
            println!("wrote {}", image.display());
        }
        Command::BakeShadows {
            light_polar,
            light_azimuth,
            output,
        } => {
            let cfg = load_config(common)?;
            let path = output.unwrap_or_else(|| layout.root.join(format!("shadow_{light_polar}_{light_azimuth}.raw")));
            pipeline::bake_shadows(&cfg, light_polar, light_azimuth, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Run => {
            let rows = pipeline::run_all(&load_config(common)?, &layout)?;
            print!("{}", format_metrics_table(&rows));
        }
        Command::Serve {
            port,
            checkpoint,
            dataset,
            ui_dir,
        } => serve(common, port, checkpoint, dataset, ui_dir)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(e @ Error::Divergence { .. })) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

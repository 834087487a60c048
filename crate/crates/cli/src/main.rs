use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use dragtext_core::backend::{BackendRegistry, BackendSelection, DiffusionBackend};
use dragtext_core::drag::{Endpoints, NullObserver};
use dragtext_core::embedmanip::render_interpolation;
use dragtext_core::io::{
    decode_image, encode_mask_png, encode_png, prepare_inputs, run_session, strip, ConfigOverrides, PointSpace,
    PointsSpec, SessionResult,
};
use dragtext_core::scene::synthetic_scene;
use dragtext_core::{DragConfig, DragError, ErrorClass, Method, SessionInputs, TextEmbedding};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "dragtext", version, about = "Point-based drag editing with text-embedding optimisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one drag session and write the edited image, trajectory and metrics.
    Drag {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sweep one knob over a list of values, one full run per value.
    Ablate {
        #[command(flatten)]
        session: SessionArgs,
        /// Knob and comma-separated values, e.g. `--sweep lambda-text 0,0.1,1,10`.
        #[arg(long, num_args = 2, value_names = ["KNOB", "VALUES"], required = true)]
        sweep: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render joint latent/text interpolations of a finished drag run.
    Interp {
        /// Output directory of a previous `drag` run.
        #[arg(long)]
        run_dir: PathBuf,
        /// Comma-separated blend weights; values outside [0, 1] extrapolate.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        omegas: Vec<f64>,
        /// Defaults to `<run-dir>/interp`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a seeded synthetic image, mask, points file and prompt.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SessionArgs {
    #[arg(long)]
    image: PathBuf,
    /// Single-channel PNG at image resolution; nonzero pixels are editable.
    #[arg(long)]
    mask: PathBuf,
    /// Points JSON: `{"pairs":[{"handle":[r,c],"target":[r,c]}]}` in image pixels.
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, value_parser = parse_method, default_value = "dragdiffusion")]
    method: Method,
    #[arg(long)]
    lambda_text: Option<f64>,
    #[arg(long)]
    eta_text: Option<f64>,
    #[arg(long)]
    unet_block: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `toy` or `adapter:<name>`.
    #[arg(long, default_value = "toy")]
    backend: String,
    /// Skip text-embedding optimisation entirely.
    #[arg(long)]
    no_text_opt: bool,
    /// JSON file of further config overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Knob {
    LambdaText,
    UnetBlock,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: DragError| e.to_string())
}

/// What `interp` needs to rebuild the backend of a finished run.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    backend: String,
    seed: u64,
    prompt: String,
    config: DragConfig,
}

#[derive(Debug)]
enum CliError {
    Drag(DragError),
    Io(PathBuf, std::io::Error),
}

impl From<DragError> for CliError {
    fn from(e: DragError) -> Self {
        Self::Drag(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Drag(e) => match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Backend => 3,
                ErrorClass::Cancelled => 4,
                ErrorClass::Io => 1,
            },
            Self::Io(..) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Drag(e) => match e.field_path() {
                Some(field) => write!(f, "{e} (field {field})"),
                None => write!(f, "{e}"),
            },
            Self::Io(path, e) => write!(f, "{}: {e}", path.display()),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    Ok(serde_json::from_slice(&read(path)?).map_err(DragError::from)?)
}

fn build_backend(name: &str, seed: u64) -> Result<Arc<dyn DiffusionBackend>, CliError> {
    let selection: BackendSelection = name.parse()?;
    Ok(BackendRegistry::new().build(&selection, seed)?)
}

struct Prepared {
    backend: Arc<dyn DiffusionBackend>,
    inputs: SessionInputs,
    text: TextEmbedding,
}

impl SessionArgs {
    fn config(&self) -> Result<DragConfig, CliError> {
        let mut overrides: ConfigOverrides = match &self.config {
            Some(path) => read_json(path)?,
            None => ConfigOverrides::default(),
        };
        overrides.method = Some(self.method);
        if self.lambda_text.is_some() {
            overrides.lambda_text = self.lambda_text;
        }
        if self.eta_text.is_some() {
            overrides.lr_text = self.eta_text;
        }
        if self.unet_block.is_some() {
            overrides.unet_block = self.unet_block;
        }
        if self.no_text_opt {
            overrides.text_optimization = Some(false);
        }
        Ok(overrides.resolve())
    }

    fn prepare(&self, config: DragConfig) -> Result<Prepared, CliError> {
        let backend = build_backend(&self.backend, self.seed)?;
        let image = decode_image(&read(&self.image)?)?;
        let points: PointsSpec = read_json(&self.points)?;
        let inputs = prepare_inputs(backend.as_ref(), image, &read(&self.mask)?, &points, config)?;
        let text = backend.encode_text(&self.prompt);
        Ok(Prepared { backend, inputs, text })
    }
}

fn run(prepared: &Prepared) -> Result<SessionResult, CliError> {
    Ok(run_session(prepared.backend.as_ref(), &prepared.inputs, &prepared.text, &mut NullObserver)?)
}

fn cmd_drag(session: &SessionArgs, out_dir: &Path) -> Result<(), CliError> {
    let config = session.config()?;
    let prepared = session.prepare(config.clone())?;
    let result = run(&prepared)?;
    let files = result.files()?;
    create_dir(out_dir)?;
    write(out_dir, "edited.png", &files.image_png)?;
    write(out_dir, "trajectory.jsonl", &files.trajectory_jsonl)?;
    write(out_dir, "metrics.json", &files.metrics_json)?;
    write(out_dir, "endpoints.json", &files.endpoints_json)?;
    let info = RunInfo {
        backend: session.backend.clone(),
        seed: session.seed,
        prompt: session.prompt.clone(),
        config,
    };
    write(out_dir, "run.json", &serde_json::to_vec_pretty(&info).map_err(DragError::from)?)?;
    println!(
        "iterations {} md {:.4} perceptual {:.4} product {:.4}",
        result.outcome.log.len(),
        result.metrics.md,
        result.metrics.perceptual,
        result.metrics.product
    );
    Ok(())
}

fn usage_error(message: String) -> ! {
    Cli::command().error(ErrorKind::InvalidValue, message).exit()
}

fn parse_sweep(sweep: &[String]) -> (Knob, Vec<f64>) {
    let knob = Knob::from_str(&sweep[0], true)
        .unwrap_or_else(|_| usage_error(format!("unknown sweep knob {:?}; use lambda-text or unet-block", sweep[0])));
    let values: Vec<f64> = sweep[1]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap_or_else(|_| usage_error(format!("sweep value {s:?} is not a number"))))
        .collect();
    if values.is_empty() {
        usage_error("sweep value list is empty".into());
    }
    (knob, values)
}

#[derive(Serialize)]
struct AblationRow {
    knob: &'static str,
    value: f64,
    iterations: usize,
    md: f64,
    perceptual: f64,
    text_drift: f64,
}

fn cmd_ablate(session: &SessionArgs, sweep: &[String], out_dir: &Path) -> Result<(), CliError> {
    let (knob, values) = parse_sweep(sweep);
    let base = session.config()?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut config = base.clone();
        let name = match knob {
            Knob::LambdaText => {
                config.lambda_text = value;
                "lambda_text"
            }
            Knob::UnetBlock => {
                if value.fract() != 0.0 || !(0.0..=255.0).contains(&value) {
                    return Err(DragError::bad_config("unet_block", format!("{value} is not a block index")).into());
                }
                config.unet_block = value as u8;
                "unet_block"
            }
        };
        let prepared = session.prepare(config)?;
        let result = run(&prepared)?;
        rows.push(AblationRow {
            knob: name,
            value,
            iterations: result.outcome.log.len(),
            md: result.metrics.md,
            perceptual: result.metrics.perceptual,
            text_drift: result.outcome.endpoints.dragged_text.masked_l1_to(&prepared.text),
        });
    }
    create_dir(out_dir)?;
    let path = out_dir.join("ablation.csv");
    let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::Io(path.clone(), e.into()))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| CliError::Io(path.clone(), e.into()))?;
    }
    writer.flush().map_err(|e| CliError::Io(path.clone(), e))?;
    print!("{}", fs::read_to_string(&path).map_err(|e| CliError::Io(path.clone(), e))?);
    Ok(())
}

fn cmd_interp(run_dir: &Path, omegas: &[f64], out_dir: Option<&Path>) -> Result<(), CliError> {
    let info: RunInfo = read_json(&run_dir.join("run.json"))?;
    let endpoints: Endpoints = read_json(&run_dir.join("endpoints.json"))?;
    let backend = build_backend(&info.backend, info.seed)?;
    let images = render_interpolation(backend.as_ref(), &endpoints, omegas)?;
    let out_dir = out_dir.map_or_else(|| run_dir.join("interp"), Path::to_path_buf);
    create_dir(&out_dir)?;
    for (omega, image) in omegas.iter().zip(&images) {
        write(&out_dir, &format!("omega_{omega}.png"), &encode_png(image))?;
    }
    write(&out_dir, "strip.png", &encode_png(&strip(&images)?))?;
    println!("wrote {} images and strip.png to {}", images.len(), out_dir.display());
    Ok(())
}

fn cmd_synth(seed: u64, size: usize, pairs: usize, out_dir: &Path) -> Result<(), CliError> {
    if size < 8 || pairs == 0 {
        usage_error("synthetic scenes need --size >= 8 and --pairs >= 1".into());
    }
    let scene = synthetic_scene(seed, size, pairs);
    create_dir(out_dir)?;
    write(out_dir, "image.png", &encode_png(&scene.image))?;
    write(out_dir, "mask.png", &encode_mask_png(&scene.mask, 1))?;
    let mut points = PointsSpec::from_point_set(&scene.points);
    points.space = PointSpace::Image;
    write(out_dir, "points.json", &serde_json::to_vec_pretty(&points).map_err(DragError::from)?)?;
    write(out_dir, "prompt.txt", scene.prompt.as_bytes())?;
    println!("{}", scene.prompt);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Drag { session, out_dir } => cmd_drag(session, out_dir),
        Command::Ablate { session, sweep, out_dir } => cmd_ablate(session, sweep, out_dir),
        Command::Interp { run_dir, omegas, out_dir } => cmd_interp(run_dir, omegas, out_dir.as_deref()),
        Command::Synth { seed, size, pairs, out_dir } => cmd_synth(*seed, *size, *pairs, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

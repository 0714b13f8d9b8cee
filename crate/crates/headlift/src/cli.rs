//! Command-line entry points.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use headlift_core::eval::{
    EvalProtocol, Evaluator, ModelPredictor, OracleModel, Predictor, ProtocolName,
};
use headlift_core::fixtures::FixtureConfig;
use headlift_core::gaussian::{build_template, Camera, DEFAULT_CAMERA_DISTANCE};
use headlift_core::model::{Model, ModelInput, TrainPhase};

use crate::calibrate::{calibrate, OverfitSetup};
use crate::checkpoint::{load_model, Checkpoint};
use crate::error::{format_err, Error, Result};
use crate::formats::{self, CameraJson, TemplateJson};
use crate::manifest::{load_dataset, write_fixtures};
use crate::run::{run_training, ModelSpec, TrainFile};
use crate::service::{router, AppState, Engine, DEFAULT_CAPACITY};
use crate::tables::{table_csv, table_json};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_EMPTY_FOREGROUND: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "headlift",
    version,
    about = "Single-image head lifting onto Gaussian splats"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhaseArg {
    Base,
    Refiner,
    Edit,
}

impl From<PhaseArg> for TrainPhase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Base => TrainPhase::Base,
            PhaseArg::Refiner => TrainPhase::Refiner,
            PhaseArg::Edit => TrainPhase::Edit,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolArg {
    Novel,
    Extreme,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TemplateFormat {
    Json,
    Bin,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one phase from a JSON config.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct a head and render a horizontal orbit.
    Reconstruct {
        /// An image, or a directory of frames processed one by one.
        #[arg(long)]
        image: PathBuf,
        /// Foreground mask PNG (single images only); otherwise the alpha
        /// channel or the chroma key decides.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, env = "HEADLIFT_CHECKPOINT")]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        orbit: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        pitch: f64,
        #[arg(long, default_value_t = DEFAULT_CAMERA_DISTANCE)]
        distance: f64,
        /// Render size; defaults to the model's input size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        no_refine: bool,
    },
    /// One render per decoder depth, cross-attention enabled up to that layer.
    VizDecoder {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, env = "HEADLIFT_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "HEADLIFT_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        capacity: usize,
    },
    /// Run an evaluation protocol and write JSON and CSV tables.
    Eval {
        #[arg(long, env = "HEADLIFT_CHECKPOINT", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "novel")]
        protocol: ProtocolArg,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth against itself (pipeline sanity check).
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        no_refine: bool,
    },
    /// Write the procedural fixture dataset.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        per_kind: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3000)]
        gaussians: usize,
    },
    /// Run the single-scene overfit reference seeds and write the threshold.
    Calibrate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0)]
        acceptance_seed: u64,
    },
    /// Write the template point set and its patch assignment.
    ExportTemplate {
        /// Model preset whose template to export.
        #[arg(long, default_value = "desk")]
        model: String,
        #[arg(long, value_enum, default_value = "json")]
        format: TemplateFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors classified by exit code.
pub enum Failure {
    Config(String),
    EmptyForeground(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(headlift_core::Error::EmptyInput(m)) => Failure::EmptyForeground(m),
            e if e.is_config() => Failure::Config(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::EmptyForeground(m)) => {
            eprintln!("error: empty foreground: {m}");
            ExitCode::from(EXIT_EMPTY_FOREGROUND)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train { phase, config } => {
            let file = TrainFile::read(&config).map_err(|e| match e {
                Error::Io { .. } | Error::Json { .. } => Failure::Config(e.to_string()),
                e => e.into(),
            })?;
            let out = run_training(phase.into(), &file)?;
            println!(
                "trained {} steps; final checkpoint {}",
                out.state.step,
                out.final_checkpoint.display()
            );
            Ok(())
        }
        Command::Reconstruct {
            image,
            mask,
            checkpoint,
            orbit,
            frames,
            pitch,
            distance,
            size,
            no_refine,
        } => {
            let (model, _) = load_model(&checkpoint)?;
            let opts = OrbitOptions {
                frames,
                pitch,
                distance,
                size: size.unwrap_or(model.config.preprocess.size),
                refine: !no_refine,
            };
            opts.validate()?;
            if image.is_dir() {
                if mask.is_some() {
                    return Err(Failure::Config(
                        "--mask applies to single images only".into(),
                    ));
                }
                for frame in image_files(&image)? {
                    let stem = frame
                        .file_stem()
                        .map_or_else(|| "frame".into(), |s| s.to_string_lossy().into_owned());
                    reconstruct_orbit(&model, &frame, None, &orbit.join(stem), &opts)?;
                }
            } else {
                reconstruct_orbit(&model, &image, mask.as_deref(), &orbit, &opts)?;
            }
            Ok(())
        }
        Command::VizDecoder {
            image,
            mask,
            checkpoint,
            out,
        } => {
            let (model, _) = load_model(&checkpoint)?;
            let written = visualize(&model, &image, mask.as_deref(), &out)?;
            println!("wrote {} layer renders to {}", written.len(), out.display());
            Ok(())
        }
        Command::Serve {
            checkpoint,
            host,
            port,
            capacity,
        } => serve(checkpoint, &host, port, capacity).map_err(Failure::from),
        Command::Eval {
            checkpoint,
            dataset,
            protocol,
            out,
            oracle,
            no_refine,
        } => {
            let scenes = load_dataset(&dataset)?;
            let name = match protocol {
                ProtocolArg::Novel => ProtocolName::Novel,
                ProtocolArg::Extreme => ProtocolName::Extreme,
            };
            let proto = EvalProtocol::build(name, &scenes);
            let evaluator = Evaluator::builtin().map_err(Error::from)?;
            let model;
            let model_predictor;
            let oracle_model;
            let predictor: &dyn Predictor = match (&checkpoint, oracle) {
                (_, true) => {
                    let pre = match &checkpoint {
                        Some(c) => Checkpoint::load(c)?.model.preprocess,
                        None => ModelSpec::default().resolve()?.preprocess,
                    };
                    oracle_model = OracleModel { preprocess: pre };
                    &oracle_model
                }
                (Some(c), false) => {
                    model = load_model(c)?.0;
                    model_predictor = ModelPredictor {
                        model: &model,
                        refine: !no_refine,
                    };
                    &model_predictor
                }
                (None, false) => return Err(Failure::Config("--checkpoint is required".into())),
            };
            let table = evaluator
                .run_protocol(predictor, &scenes, &proto)
                .map_err(Error::from)?;
            formats::write_json(&out.join("metrics.json"), &table_json(&table))?;
            formats::write_bytes(&out.join("metrics.csv"), table_csv(&table).as_bytes())?;
            let a = &table.aggregate;
            println!(
                "{:?}: {} pairs, psnr {}, ssim {:.4}, feature distance {:.4}, identity {}",
                name,
                a.pairs,
                a.psnr,
                a.ssim,
                a.feature_distance,
                a.identity.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            Ok(())
        }
        Command::Fixtures {
            out,
            seed,
            per_kind,
            size,
            gaussians,
        } => {
            let cfg = FixtureConfig {
                size,
                gaussians,
                ..Default::default()
            };
            let path = write_fixtures(&out, seed, per_kind, &cfg)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Calibrate {
            out,
            steps,
            seeds,
            acceptance_seed,
        } => {
            if seeds.contains(&acceptance_seed) {
                return Err(Failure::Config(
                    "the acceptance seed must not be a calibration seed".into(),
                ));
            }
            let setup = OverfitSetup {
                steps,
                ..Default::default()
            };
            let cal = calibrate(&setup, &seeds, acceptance_seed)?;
            for r in &cal.runs {
                println!(
                    "seed {}: held-out psnr {:.3} dB (initial {:.3})",
                    r.seed, r.held_out_psnr, r.initial_psnr
                );
            }
            println!("threshold {:.3} dB", cal.threshold);
            formats::write_json(&out, &cal)?;
            Ok(())
        }
        Command::ExportTemplate { model, format, out } => {
            let cfg = ModelSpec::Preset(model).resolve()?;
            let t = build_template(cfg.num_patches, cfg.template_seed).map_err(Error::from)?;
            match format {
                TemplateFormat::Json => formats::write_json(&out, &TemplateJson::from(&t))?,
                TemplateFormat::Bin => {
                    formats::write_bytes(&out, &formats::encode_template_bin(&t))?
                }
            }
            println!(
                "{} vertices in {} patches",
                t.num_vertices(),
                t.num_patches()
            );
            Ok(())
        }
    }
}

pub struct OrbitOptions {
    pub frames: usize,
    pub pitch: f64,
    pub distance: f64,
    pub size: usize,
    pub refine: bool,
}

impl OrbitOptions {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(format_err!("--frames must be at least 1"));
        }
        if !(self.distance > 0.0) || self.size == 0 || !(-89.0..=89.0).contains(&self.pitch) {
            return Err(format_err!(
                "orbit needs a positive distance and size and |pitch| <= 89"
            ));
        }
        Ok(())
    }

    /// Evenly spaced yaws starting frontal.
    pub fn cameras(&self) -> Vec<Camera> {
        (0..self.frames)
            .map(|i| {
                let yaw = 360.0 * i as f64 / self.frames as f64;
                Camera::orbit(yaw, self.pitch, self.distance, self.size, self.size)
            })
            .collect()
    }
}

fn read_input(
    image: &Path,
    mask: Option<&Path>,
) -> Result<(
    headlift_core::image::Image,
    Option<headlift_core::image::Mask>,
)> {
    let (img, alpha) = formats::read_image(image)?;
    let mask = match mask {
        Some(p) => Some(formats::read_mask(p)?),
        None => alpha,
    };
    Ok((img, mask))
}

/// Write `frame_NNN.png` and `frame_NNN.json` per orbit camera.
pub fn reconstruct_orbit(
    model: &Model,
    image: &Path,
    mask: Option<&Path>,
    out: &Path,
    opts: &OrbitOptions,
) -> Result<Vec<PathBuf>> {
    let (img, mask) = read_input(image, mask)?;
    let id = image.display().to_string();
    let input = model.lift_input(&img, mask.as_ref(), &id)?;
    let cloud = model.reconstruct(&input)?;
    let mut written = Vec::new();
    for (i, cam) in opts.cameras().iter().enumerate() {
        let r = model.render(&cloud, cam, opts.refine)?;
        let png = out.join(format!("frame_{i:03}.png"));
        formats::write_png(&png, &r.image)?;
        formats::write_json(
            &out.join(format!("frame_{i:03}.json")),
            &CameraJson::from(cam),
        )?;
        written.push(png);
    }
    Ok(written)
}

/// Write `layer_N.png` for `N = 0..=K`.
pub fn visualize(
    model: &Model,
    image: &Path,
    mask: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (img, mask) = read_input(image, mask)?;
    let input = model.lift_input(&img, mask.as_ref(), &image.display().to_string())?;
    let renders = model.visualize_all(ModelInput::Lift(&input), &model.probe_camera())?;
    let mut written = Vec::new();
    for (i, r) in renders.iter().enumerate() {
        let p = out.join(format!("layer_{i}.png"));
        formats::write_png(&p, &r.image)?;
        written.push(p);
    }
    Ok(written)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(format_err!("no PNG frames in {}", dir.display()));
    }
    Ok(files)
}

fn serve(checkpoint: PathBuf, host: &str, port: u16, capacity: usize) -> Result<()> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| format_err!("bad listen address {host}:{port}: {e}"))?;
    let rt =
        tokio::runtime::Runtime::new().map_err(|e| format_err!("cannot start runtime: {e}"))?;
    rt.block_on(async move {
        let state = AppState::new(capacity);
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| format_err!("cannot bind {addr}: {e}"))?;
        eprintln!(
            "listening on http://{addr}; loading {}",
            checkpoint.display()
        );
        let loader = state.clone();
        tokio::task::spawn_blocking(move || match load_model(&checkpoint) {
            Ok((model, id)) => {
                loader.install(Engine::new(model, id.clone()));
                eprintln!("checkpoint {id} loaded");
            }
            Err(e) => eprintln!("error: checkpoint failed to load: {e}"),
        });
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| format_err!("server error: {e}"))
    })
}

//! `facegrid` command-line tool.
//!
//! Every subcommand accepts `--seed`, `--tensor` and `--out`. Without
//! `--tensor` the synthetic tensor for `--seed` is used. JSON results go to
//! `--out` when given and to stdout otherwise. Exit status is 0 on success,
//! 2 on invalid input and 1 on any other failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "facegrid", version, about = "Face model fitting, grid codec and evaluation tools")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for the synthetic tensor and any random generation.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Face tensor blob (FT3D); defaults to the synthetic tensor for --seed.
    #[arg(long, global = true)]
    pub tensor: Option<PathBuf>,
    /// Output path; JSON results go to stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic face tensor for --seed as an FT3D blob.
    GenTensor,
    /// Fit face parameters to 68 landmarks.
    Fit {
        /// Landmarks JSON (`{"landmarks": [[x, y], ...]}`).
        #[arg(long)]
        landmarks: PathBuf,
        /// Initial FaceParams JSON; defaults to a box-aligned mean face.
        #[arg(long)]
        init: Option<PathBuf>,
        /// FitConfig JSON; missing fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Single-face loss between two FaceParams+landmarks JSON objects.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Training epoch, 1-based.
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        epoch: i64,
    },
    /// AP, AP50 and AP75 of predicted boxes against ground truth boxes.
    EvalDet {
        /// Array of boxes (`x0,y0,x1,y1,score`) or decoded detections.
        #[arg(long)]
        pred: PathBuf,
        /// Array of boxes (`x0,y0,x1,y1`).
        #[arg(long)]
        gt: PathBuf,
        /// Image side in pixels, used to place decoded detections.
        #[arg(long, default_value_t = 288.0)]
        image_size: f64,
        /// Drop faces smaller than this fraction of the image first.
        #[arg(long)]
        min_face: Option<f64>,
    },
    /// Landmark NME and CED area under the curve.
    EvalLm {
        /// Landmarks JSON object or array of them.
        #[arg(long)]
        pred: PathBuf,
        /// Landmarks JSON object or array of them.
        #[arg(long)]
        gt: PathBuf,
        /// Normalizing box, or one box per face.
        #[arg(long)]
        bbox: PathBuf,
        #[arg(long, default_value_t = 0.08)]
        cutoff: f64,
    },
    /// Expression metric of predicted weights against active blendshapes.
    EvalExpr {
        /// FaceParams JSON.
        #[arg(long)]
        params: PathBuf,
        /// 1-based active blendshape indices, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        active: Vec<usize>,
    },
    /// Random multi-face scene; writes the scene JSON and optionally its grid.
    SynthScene {
        #[arg(long, default_value_t = 5)]
        faces: usize,
        #[arg(long, default_value_t = 288.0)]
        image_size: f64,
        /// Also write the encoded ground truth grid (GRD1) here.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Fit every face in a scene and write the encoded grid (GRD1) to --out.
    WeakGt {
        /// Scene JSON from synth-scene, or an array of landmarks objects.
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long, default_value_t = 288.0)]
        image_size: f64,
        /// Also write per-face fit results as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode a grid (GRD1) into detections.
    Decode {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Apply non-maximum suppression at this IoU.
        #[arg(long)]
        nms: Option<f64>,
        #[arg(long, default_value_t = 288.0)]
        image_size: f64,
    },
    /// Map face parameters onto a target rig.
    Retarget {
        /// FaceParams JSON, an array of them, or decoded detections.
        #[arg(long)]
        params: PathBuf,
        /// RigMapping JSON; defaults to one-to-one `bs01`..`bs46`.
        #[arg(long)]
        mapping: Option<PathBuf>,
    },
    /// Fit a landmark sequence frame by frame, warm-starting each fit.
    Track {
        /// Array of landmarks objects, one per frame.
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        margin: f64,
    },
}

/// True when the failure stems from bad input rather than the environment.
fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<facegrid::Error>() {
            e.is_validation()
        } else {
            cause.is::<serde_json::Error>() || cause.is::<commands::InputError>()
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

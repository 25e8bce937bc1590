use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use facegrid::detection_eval::{filter_small_faces, nms_indices, summarize, EvalBox};
use facegrid::fitting::{default_init, fit_params, FitConfig, FitResult};
use facegrid::grid_codec::{CodecConfig, DetectionBox, GridCodec};
use facegrid::io::{load_face_tensor, load_grid_tensor, read_json, save_face_tensor, save_grid_tensor, write_json};
use facegrid::landmark_metrics::{ced_auc, expression_metric, nme};
use facegrid::loss::{sfn_loss, FaceSample, LossSchedule};
use facegrid::morphable_model::{generate_synthetic_tensor, FaceParams, FaceTensor, Landmarks2D};
use facegrid::retarget::{map_to_rig, track_next_bbox, RigMapping};
use facegrid::scene::{synth_scene, weak_gt_generate};
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, Common};

/// Bad command-line input caught by the tool itself.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredBoxes {
    Boxes(Vec<EvalBox>),
    Detections(Vec<DetectionBox>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RetargetInput {
    One(FaceParams),
    Many(Vec<FaceParams>),
    Detections(Vec<DetectionBox>),
}

#[derive(Serialize, Deserialize)]
struct SceneFaceJson {
    params: FaceParams,
    #[serde(flatten)]
    landmarks: Landmarks2D,
    bbox: EvalBox,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    image_size: f64,
    faces: Vec<SceneFaceJson>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FacesInput {
    Scene(SceneJson),
    List(Vec<Landmarks2D>),
}

#[derive(Serialize)]
struct LandmarkScores {
    nme: f64,
    auc: f64,
}

#[derive(Serialize)]
struct ExpressionScore {
    metric: f64,
}

#[derive(Serialize)]
struct TrackFrame {
    frame: usize,
    /// Search box derived from the previous frame; absent on the first.
    search_box: Option<EvalBox>,
    fit: FitResult,
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path).with_context(|| format!("reading {}", path.display()))
}

fn tensor(common: &Common) -> Result<FaceTensor> {
    match &common.tensor {
        Some(path) => load_face_tensor(path).with_context(|| format!("reading tensor {}", path.display())),
        None => Ok(generate_synthetic_tensor(common.seed)),
    }
}

fn emit<T: Serialize>(common: &Common, value: &T) -> Result<()> {
    match &common.out {
        Some(path) => write_json(path, value).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn required_out(common: &Common, what: &str) -> Result<PathBuf> {
    common.out.clone().ok_or_else(|| input_error(format!("--out is required to write {what}")))
}

fn codec_config(image_size: f64) -> Result<CodecConfig> {
    let cfg = CodecConfig { image_size, ..CodecConfig::default() };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::GenTensor => {
            let out = required_out(common, "the tensor blob")?;
            save_face_tensor(&out, &generate_synthetic_tensor(common.seed))
                .with_context(|| format!("writing {}", out.display()))
        }
        Command::Fit { landmarks, init, config } => {
            let t = tensor(common)?;
            let observed: Landmarks2D = load(landmarks)?;
            let init = match init {
                Some(p) => load(p)?,
                None => default_init(&t, &observed),
            };
            let cfg: FitConfig = match config {
                Some(p) => load(p)?,
                None => FitConfig::default(),
            };
            emit(common, &fit_params(&t, &observed, &init, &cfg)?)
        }
        Command::Loss { pred, gt, epoch } => {
            let schedule = LossSchedule::new(*epoch)?;
            let pred: FaceSample = load(pred)?;
            let gt: FaceSample = load(gt)?;
            emit(common, &sfn_loss(&pred, &gt, &schedule))
        }
        Command::EvalDet { pred, gt, image_size, min_face } => {
            let preds = match load::<PredBoxes>(pred)? {
                PredBoxes::Boxes(b) => b,
                PredBoxes::Detections(d) => d.iter().map(|d| d.geometry.to_eval_box(*image_size, d.objectness)).collect(),
            };
            let gts: Vec<EvalBox> = load(gt)?;
            for b in preds.iter().chain(&gts) {
                b.validate()?;
            }
            let (preds, gts) = match min_face {
                Some(frac) => filter_small_faces(&preds, &gts, *image_size, *image_size, *frac),
                None => (preds, gts),
            };
            emit(common, &summarize(&preds, &gts))
        }
        Command::EvalLm { pred, gt, bbox, cutoff } => {
            let pred = load::<OneOrMany<Landmarks2D>>(pred)?.into_vec();
            let gt = load::<OneOrMany<Landmarks2D>>(gt)?.into_vec();
            let boxes = load::<OneOrMany<EvalBox>>(bbox)?.into_vec();
            if pred.len() != gt.len() || pred.is_empty() {
                return Err(input_error(format!("{} predicted faces against {} ground truth faces", pred.len(), gt.len())));
            }
            if boxes.len() != 1 && boxes.len() != gt.len() {
                return Err(input_error(format!("{} boxes for {} faces", boxes.len(), gt.len())));
            }
            let errors = pred
                .iter()
                .zip(&gt)
                .enumerate()
                .map(|(i, (p, g))| nme(p, g, &boxes[i.min(boxes.len() - 1)]))
                .collect::<facegrid::Result<Vec<f64>>>()?;
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            emit(common, &LandmarkScores { nme: mean, auc: ced_auc(&errors, *cutoff)? })
        }
        Command::EvalExpr { params, active } => {
            let params: FaceParams = load(params)?;
            emit(common, &ExpressionScore { metric: expression_metric(&params.expression, active)? })
        }
        Command::SynthScene { faces, image_size, grid } => {
            let t = tensor(common)?;
            let scene = synth_scene(&t, *faces, common.seed, *image_size)?;
            if let Some(path) = grid {
                save_grid_tensor(path, &scene.grid).with_context(|| format!("writing {}", path.display()))?;
            }
            let json = SceneJson {
                image_size: scene.image_size,
                faces: scene
                    .faces
                    .into_iter()
                    .map(|f| SceneFaceJson { params: f.params, landmarks: f.landmarks, bbox: f.bbox })
                    .collect(),
            };
            emit(common, &json)
        }
        Command::WeakGt { landmarks, image_size, report } => {
            let out = required_out(common, "the grid")?;
            let t = tensor(common)?;
            let faces = match load::<FacesInput>(landmarks)? {
                FacesInput::Scene(s) => s.faces.into_iter().map(|f| f.landmarks).collect(),
                FacesInput::List(l) => l,
            };
            let weak = weak_gt_generate(&faces, &t, &FitConfig::default(), &codec_config(*image_size)?)?;
            save_grid_tensor(&out, &weak.grid).with_context(|| format!("writing {}", out.display()))?;
            if let Some(path) = report {
                write_json(path, &weak.fits).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(())
        }
        Command::Decode { grid, threshold, nms, image_size } => {
            let t = tensor(common)?;
            let grid = load_grid_tensor(grid).with_context(|| format!("reading grid {}", grid.display()))?;
            let codec = GridCodec::new(&t, codec_config(*image_size)?)?;
            let mut dets = codec.decode_grid(&grid, *threshold);
            if let Some(iou) = nms {
                let boxes: Vec<EvalBox> = dets.iter().map(|d| d.geometry.to_eval_box(*image_size, d.objectness)).collect();
                dets = nms_indices(&boxes, *iou).into_iter().map(|i| dets[i].clone()).collect();
            }
            emit(common, &dets)
        }
        Command::Retarget { params, mapping } => {
            let mapping = match mapping {
                Some(p) => load(p)?,
                None => RigMapping::identity(),
            };
            match load::<RetargetInput>(params)? {
                RetargetInput::One(p) => emit(common, &map_to_rig(&p, &mapping)?),
                RetargetInput::Many(ps) => {
                    let poses = ps.iter().map(|p| map_to_rig(p, &mapping)).collect::<facegrid::Result<Vec<_>>>()?;
                    emit(common, &poses)
                }
                RetargetInput::Detections(ds) => {
                    let poses = ds.iter().map(|d| map_to_rig(&d.params, &mapping)).collect::<facegrid::Result<Vec<_>>>()?;
                    emit(common, &poses)
                }
            }
        }
        Command::Track { landmarks, margin } => {
            let t = tensor(common)?;
            let frames = load::<OneOrMany<Landmarks2D>>(landmarks)?.into_vec();
            let cfg = FitConfig::default();
            let mut out = Vec::with_capacity(frames.len());
            let mut prev: Option<(Landmarks2D, FaceParams)> = None;
            for (frame, observed) in frames.iter().enumerate() {
                let (search_box, init) = match &prev {
                    Some((lm, params)) => (Some(track_next_bbox(lm, *margin)?), params.clone()),
                    None => (None, default_init(&t, observed)),
                };
                let fit = fit_params(&t, observed, &init, &cfg)?;
                prev = Some((observed.clone(), fit.params.clone()));
                out.push(TrackFrame { frame, search_box, fit });
            }
            emit(common, &out)
        }
    }
}

//! Synthetic multi-face scenes and weakly supervised grid ground truth.
//!
//! A scene places up to 20 non-overlapping faces on a square image, each
//! rendered as projected landmarks with a square face box. Ground truth for
//! the grid is produced the same way a real pipeline would: fit each face's
//! landmarks independently, then encode the fitted parameters into the
//! responsible grid slots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection_eval::EvalBox;
use crate::error::{Error, Result};
use crate::fitting::{default_init, fit_params, FitConfig, FitResult};
use crate::grid_codec::{
    to_box_frame, BoxGeometry, CodecConfig, FaceTarget, GridCodec, GridGroundTruth, GridTensor,
    GRID_SIZE,
};
use crate::morphable_model::{
    project_landmarks, ExpressionWeights, FaceParams, FaceTensor, IdentityWeights, Landmarks2D,
    Pose, Quaternion, NUM_FREE_EXPRESSION, NUM_IDENTITY,
};

pub const MAX_FACES: usize = 20;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Face box padding on each side, as a fraction of the larger landmark extent.
pub const FACE_BOX_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFace {
    /// Parameters in the pixel frame.
    pub params: FaceParams,
    pub landmarks: Landmarks2D,
    pub bbox: EvalBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_size: f64,
    pub faces: Vec<SceneFace>,
    /// Ground truth encoded from the generating parameters.
    pub ground_truth: GridGroundTruth,
    pub grid: GridTensor,
}

/// Square face box in cell units, centered on the landmark bounds.
pub fn face_box(landmarks: &Landmarks2D, image_size: f64) -> BoxGeometry {
    let (x0, y0, x1, y1) = landmarks.bounds();
    let cell = image_size / GRID_SIZE as f64;
    let side = (x1 - x0).max(y1 - y0) * (1.0 + 2.0 * FACE_BOX_MARGIN) / cell;
    BoxGeometry {
        bx: (x0 + x1) / 2.0 / cell,
        by: (y0 + y1) / 2.0 / cell,
        bw: side,
        bh: side,
    }
}

/// Random identity, expression and head rotation with unit focal and zero
/// translation. Yaw within ±30°, pitch and roll within ±20°.
pub fn random_face_params<R: Rng>(rng: &mut R) -> FaceParams {
    let mut w_id: Vec<f64> = (0..NUM_IDENTITY).map(|_| rng.random_range(-0.5..0.5)).collect();
    w_id[0] = 1.0 + rng.random_range(-0.1..0.1);
    let w_free: Vec<f64> = (0..NUM_FREE_EXPRESSION)
        .map(|_| rng.random_range(0.002..0.02))
        .collect();
    let yaw = rng.random_range(-30f64..30.0).to_radians();
    let pitch = rng.random_range(-20f64..20.0).to_radians();
    let roll = rng.random_range(-20f64..20.0).to_radians();
    let rotation = Quaternion::from_axis_angle([0.0, 0.0, 1.0], roll)
        .unwrap()
        .mul(&Quaternion::from_axis_angle([0.0, 1.0, 0.0], yaw).unwrap())
        .mul(&Quaternion::from_axis_angle([1.0, 0.0, 0.0], pitch).unwrap());
    FaceParams {
        identity: IdentityWeights::new(w_id).expect("finite identity"),
        expression: ExpressionWeights::new(w_free).expect("46 small weights stay on the simplex"),
        pose: Pose {
            rotation,
            translation: [0.0; 3],
            focal: 1.0,
        },
    }
}

/// Places `params` so its face box has side `side_px` and center `center_px`.
fn place_face(tensor: &FaceTensor, params: &FaceParams, center_px: [f64; 2], side_px: f64) -> FaceParams {
    let unit = project_landmarks(tensor, params);
    let (x0, y0, x1, y1) = unit.bounds();
    let extent = (x1 - x0).max(y1 - y0);
    let f = side_px / ((1.0 + 2.0 * FACE_BOX_MARGIN) * extent);
    let c0 = [(x0 + x1) / 2.0, (y0 + y1) / 2.0];
    let mut placed = params.clone();
    placed.pose.focal = f;
    placed.pose.translation = [center_px[0] / f - c0[0], center_px[1] / f - c0[1], 0.0];
    placed
}

/// Deterministic scene of `n_faces` faces on an `image_size` square image.
///
/// Faces occupy distinct grid cells and their boxes never overlap. Box sides
/// shrink as the face count grows and never drop below 2% of the image.
pub fn synth_scene(tensor: &FaceTensor, n_faces: usize, seed: u64, image_size: f64) -> Result<Scene> {
    if !(1..=MAX_FACES).contains(&n_faces) {
        return Err(Error::invalid(format!(
            "scenes hold 1 to {MAX_FACES} faces, got {n_faces}"
        )));
    }
    let codec = GridCodec::new(
        tensor,
        CodecConfig {
            image_size,
            ..CodecConfig::default()
        },
    )?;
    let cell_px = codec.config().cell_pixels();
    let grid = GRID_SIZE as f64;
    let max_side = (6.0 / (n_faces as f64).sqrt()).clamp(1.0, 3.0);
    let min_side = (0.6 * max_side).max(0.02 * grid);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<BoxGeometry> = Vec::with_capacity(n_faces);
    let mut faces = Vec::with_capacity(n_faces);
    let mut targets = Vec::with_capacity(n_faces);
    for face in 0..n_faces {
        let mut attempts = 0;
        let geom = loop {
            if attempts == MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Placement {
                    face,
                    attempts,
                });
            }
            attempts += 1;
            let side = rng.random_range(min_side..=max_side);
            let half = side / 2.0;
            let g = BoxGeometry {
                bx: rng.random_range(half..grid - half),
                by: rng.random_range(half..grid - half),
                bw: side,
                bh: side,
            };
            let clear = placed.iter().all(|o| {
                let gap = (g.bx - o.bx).abs().max((g.by - o.by).abs());
                gap >= (g.bw + o.bw) / 2.0 && g.cell() != o.cell()
            });
            if clear {
                break g;
            }
        };
        placed.push(geom);

        let shape = random_face_params(&mut rng);
        let params = place_face(
            tensor,
            &shape,
            [geom.bx * cell_px, geom.by * cell_px],
            geom.bw * cell_px,
        );
        let landmarks = project_landmarks(tensor, &params);
        let geometry = face_box(&landmarks, image_size);
        targets.push(FaceTarget {
            geometry,
            params: to_box_frame(&params, &geometry, image_size),
        });
        faces.push(SceneFace {
            bbox: geometry.to_eval_box(image_size, 1.0),
            params,
            landmarks,
        });
    }

    let (ground_truth, grid) = codec.encode_gt(&targets)?;
    Ok(Scene {
        image_size,
        faces,
        ground_truth,
        grid,
    })
}

#[derive(Debug, Clone)]
pub struct WeakGroundTruth {
    pub ground_truth: GridGroundTruth,
    pub grid: GridTensor,
    /// Per-face fits in the pixel frame, in input order.
    pub fits: Vec<FitResult>,
}

impl WeakGroundTruth {
    pub fn per_face_rmse(&self) -> Vec<f64> {
        self.fits.iter().map(|f| f.final_rmse).collect()
    }
}

/// Fits every face independently and encodes the results into grid targets.
pub fn weak_gt_generate(
    faces: &[Landmarks2D],
    tensor: &FaceTensor,
    cfg: &FitConfig,
    codec_cfg: &CodecConfig,
) -> Result<WeakGroundTruth> {
    let codec = GridCodec::new(tensor, *codec_cfg)?;
    let mut fits = Vec::with_capacity(faces.len());
    let mut targets = Vec::with_capacity(faces.len());
    for landmarks in faces {
        let init = default_init(tensor, landmarks);
        let fit = fit_params(tensor, landmarks, &init, cfg)?;
        let geometry = face_box(landmarks, codec_cfg.image_size);
        targets.push(FaceTarget {
            geometry,
            params: to_box_frame(&fit.params, &geometry, codec_cfg.image_size),
        });
        fits.push(fit);
    }
    let (ground_truth, grid) = codec.encode_gt(&targets)?;
    Ok(WeakGroundTruth {
        ground_truth,
        grid,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable_model::generate_synthetic_tensor;

    #[test]
    fn face_count_limits() {
        let t = generate_synthetic_tensor(4);
        assert!(synth_scene(&t, 0, 1, 288.0).is_err());
        assert!(synth_scene(&t, 21, 1, 288.0).is_err());
        let one = synth_scene(&t, 1, 1, 288.0).unwrap();
        assert_eq!(one.ground_truth.len(), 1);
    }

    #[test]
    fn scenes_are_deterministic() {
        let t = generate_synthetic_tensor(4);
        let a = synth_scene(&t, 5, 77, 288.0).unwrap();
        let b = synth_scene(&t, 5, 77, 288.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boxes_do_not_overlap_and_are_large_enough() {
        let t = generate_synthetic_tensor(4);
        let s = synth_scene(&t, 20, 3, 288.0).unwrap();
        for (i, a) in s.faces.iter().enumerate() {
            assert!(a.bbox.width() >= 0.02 * 288.0);
            for b in &s.faces[i + 1..] {
                assert!(crate::detection_eval::iou(&a.bbox, &b.bbox) < 1e-9);
            }
        }
    }

    #[test]
    fn empty_scene_gives_empty_ground_truth() {
        let t = generate_synthetic_tensor(4);
        let w = weak_gt_generate(&[], &t, &FitConfig::default(), &CodecConfig::default()).unwrap();
        assert!(w.ground_truth.is_empty());
    }
}

//! Training losses: the single-face loss and its grid-wide sum.
//!
//! Parameter terms are mean absolute errors weighted by `τ = 10 / epoch`, so
//! early epochs trust the fitted parameters and later ones trust the 2D
//! landmarks:
//!
//! ```text
//! total = τ · (L1(w_id) + L1(w_exp) + L1(q)) + RMSE(landmarks)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_codec::{
    sigmoid, slot, GridCodec, GridGroundTruth, GridTensor, GRID_SIZE, NUM_ANCHORS, NUM_CELLS,
};
use crate::morphable_model::{FaceParams, Landmarks2D, NUM_LANDMARKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSchedule {
    epoch: u32,
}

impl LossSchedule {
    pub fn new(epoch: i64) -> Result<Self> {
        if epoch < 1 || epoch > u32::MAX as i64 {
            return Err(Error::invalid(format!("epoch must be >= 1, got {epoch}")));
        }
        Ok(Self { epoch: epoch as u32 })
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }
}

/// Decay weight of the parameter terms: `10 / epoch`.
pub fn tau(schedule: &LossSchedule) -> f64 {
    10.0 / schedule.epoch as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id_l1: f64,
    pub exp_l1: f64,
    pub rot_l1: f64,
    pub landmark_rmse: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(tau: f64, id_l1: f64, exp_l1: f64, rot_l1: f64, landmark_rmse: f64) -> Self {
        Self {
            id_l1,
            exp_l1,
            rot_l1,
            landmark_rmse,
            total: tau * (id_l1 + exp_l1 + rot_l1) + landmark_rmse,
        }
    }
}

/// Face parameters together with their landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSample {
    #[serde(flatten)]
    pub params: FaceParams,
    #[serde(flatten)]
    pub landmarks: Landmarks2D,
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn sum_sq_point_dist(a: &Landmarks2D, b: &Landmarks2D) -> f64 {
    a.points()
        .iter()
        .zip(b.points())
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum()
}

/// `(id, exp, rot)` mean absolute differences; quaternions are compared in
/// their canonical `w >= 0` form.
fn param_terms(pred: &FaceParams, gt: &FaceParams) -> (f64, f64, f64) {
    (
        mean_abs_diff(pred.identity.as_slice(), gt.identity.as_slice()),
        mean_abs_diff(pred.expression.free(), gt.expression.free()),
        mean_abs_diff(&pred.pose.rotation.as_array(), &gt.pose.rotation.as_array()),
    )
}

/// Single-face loss.
pub fn sfn_loss(pred: &FaceSample, gt: &FaceSample, schedule: &LossSchedule) -> LossBreakdown {
    let (id, exp, rot) = param_terms(&pred.params, &gt.params);
    let rmse = (sum_sq_point_dist(&pred.landmarks, &gt.landmarks) / NUM_LANDMARKS as f64).sqrt();
    LossBreakdown::assemble(tau(schedule), id, exp, rot, rmse)
}

/// Grid loss: the parameter terms summed over responsible slots, the landmark
/// term pooled over them under one square root, plus the box and objectness
/// errors reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridLoss {
    #[serde(flatten)]
    pub terms: LossBreakdown,
    /// Squared error of `σ(t_x), σ(t_y), t_w, t_h` over responsible slots.
    pub box_sse: f64,
    /// Squared error of `σ(t_o)` against the indicator over all 405 slots.
    pub objectness_sse: f64,
}

pub fn grid_loss(
    codec: &GridCodec<'_>,
    pred: &GridTensor,
    gt: &GridGroundTruth,
    schedule: &LossSchedule,
) -> Result<GridLoss> {
    let (mut id, mut exp, mut rot, mut lm_sq) = (0.0, 0.0, 0.0, 0.0);
    let mut box_sse = 0.0;
    for e in gt.entries() {
        if e.cell >= NUM_CELLS || e.anchor >= NUM_ANCHORS {
            return Err(Error::invalid(format!(
                "ground truth references cell {} anchor {} outside the grid",
                e.cell, e.anchor
            )));
        }
        let raw = pred.slot(e.cell, e.anchor);
        let at = (e.cell % GRID_SIZE, e.cell / GRID_SIZE);
        let decoded = codec.decode_slot(raw, at, &codec.config().priors[e.anchor]);
        let (a, b, c) = param_terms(&decoded.params, &e.target.params);
        id += a;
        exp += b;
        rot += c;
        lm_sq += sum_sq_point_dist(&decoded.landmarks, &e.target.landmarks);

        box_sse += (sigmoid(raw[slot::TX]) - sigmoid(e.raw[slot::TX])).powi(2)
            + (sigmoid(raw[slot::TY]) - sigmoid(e.raw[slot::TY])).powi(2)
            + (raw[slot::TW] - e.raw[slot::TW]).powi(2)
            + (raw[slot::TH] - e.raw[slot::TH]).powi(2);
    }

    let mut objectness_sse = 0.0;
    for cell in 0..NUM_CELLS {
        for k in 0..NUM_ANCHORS {
            let target = if gt.indicator(cell, k) { 1.0 } else { 0.0 };
            objectness_sse += (sigmoid(pred.slot(cell, k)[slot::TO]) - target).powi(2);
        }
    }

    let rmse = (lm_sq / NUM_LANDMARKS as f64).sqrt();
    Ok(GridLoss {
        terms: LossBreakdown::assemble(tau(schedule), id, exp, rot, rmse),
        box_sse,
        objectness_sse,
    })
}

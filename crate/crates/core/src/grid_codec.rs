//! Encoder and decoder between raw grid predictions and face detections.
//!
//! The image is split into a 9x9 grid with 5 anchor priors per cell. Each
//! (cell, anchor) slot carries 109 raw values:
//!
//! | offset    | meaning                                   | decode              |
//! |-----------|-------------------------------------------|---------------------|
//! | 0, 1      | `t_x`, `t_y`                              | `σ(t) + c`          |
//! | 2, 3      | `t_w`, `t_h`                              | `p · eᵗ`            |
//! | 4         | `t_o`                                     | `σ(t)`              |
//! | 5..55     | identity weights                          | raw                 |
//! | 55..101   | 46 free expression weights                | `σ(t)`              |
//! | 101..105  | quaternion (w, x, y, z)                   | normalized          |
//! | 105..108  | translation; `t_z` is forced to 0         | raw                 |
//! | 108       | focal                                     | `σ(t)` mapped to `[f_min, f_max]` |
//!
//! Per-slot face parameters live in a box-normalized frame: their projection
//! gives landmarks relative to the box center in units of the box size, which
//! [`landmark_denorm`] maps back to pixels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection_eval::EvalBox;
use crate::error::{Error, Result};
use crate::morphable_model::{
    project_landmarks, ExpressionWeights, FaceParams, FaceTensor, IdentityWeights, Landmarks2D,
    Pose, Quaternion,
};

pub const GRID_SIZE: usize = 9;
pub const NUM_CELLS: usize = GRID_SIZE * GRID_SIZE;
pub const NUM_ANCHORS: usize = 5;
pub const NUM_SLOTS: usize = NUM_CELLS * NUM_ANCHORS;
pub const SLOT_LEN: usize = 109;

/// Logit clamping margin used when encoding.
pub const LOGIT_EPS: f64 = 1e-7;

/// Offsets inside one 109-value slot.
pub mod slot {
    use std::ops::Range;

    pub const TX: usize = 0;
    pub const TY: usize = 1;
    pub const TW: usize = 2;
    pub const TH: usize = 3;
    pub const TO: usize = 4;
    pub const IDENTITY: Range<usize> = 5..55;
    pub const EXPRESSION: Range<usize> = 55..101;
    pub const ROTATION: Range<usize> = 101..105;
    pub const TRANSLATION: Range<usize> = 105..108;
    pub const FOCAL: usize = 108;
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid with the argument clamped to `[ε, 1 - ε]`.
#[inline]
pub fn logit_clamped(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

/// Box prior dimensions in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrior {
    pub p_w: f64,
    pub p_h: f64,
}

impl AnchorPrior {
    pub fn new(p_w: f64, p_h: f64) -> Result<Self> {
        if !(p_w.is_finite() && p_w > 0.0 && p_h.is_finite() && p_h > 0.0) {
            return Err(Error::invalid(format!("anchor prior must be positive, got ({p_w}, {p_h})")));
        }
        Ok(Self { p_w, p_h })
    }

    /// IoU of two boxes sharing a center.
    pub fn shape_iou(&self, w: f64, h: f64) -> f64 {
        let inter = self.p_w.min(w) * self.p_h.min(h);
        inter / (self.p_w * self.p_h + w * h - inter)
    }
}

pub const DEFAULT_ANCHORS: [AnchorPrior; NUM_ANCHORS] = [
    AnchorPrior { p_w: 1.0, p_h: 1.4 },
    AnchorPrior { p_w: 1.6, p_h: 2.2 },
    AnchorPrior { p_w: 2.4, p_h: 3.2 },
    AnchorPrior { p_w: 3.4, p_h: 4.6 },
    AnchorPrior { p_w: 5.0, p_h: 6.6 },
];

/// Raw predictions, laid out as (row, column, anchor, value).
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    raw: Vec<f64>,
}

impl GridTensor {
    pub const SHAPE: [usize; 4] = [GRID_SIZE, GRID_SIZE, NUM_ANCHORS, SLOT_LEN];
    pub const LEN: usize = NUM_SLOTS * SLOT_LEN;

    pub fn zeros() -> Self {
        Self {
            raw: vec![0.0; Self::LEN],
        }
    }

    pub fn from_values(raw: Vec<f64>) -> Result<Self> {
        if raw.len() != Self::LEN {
            return Err(Error::invalid(format!(
                "grid tensor needs {} values, got {}",
                Self::LEN,
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid tensor entries must be finite"));
        }
        Ok(Self { raw })
    }

    pub fn values(&self) -> &[f64] {
        &self.raw
    }

    /// Slot of anchor `anchor` in cell `cell = row * 9 + col`.
    pub fn slot(&self, cell: usize, anchor: usize) -> &[f64] {
        let start = (cell * NUM_ANCHORS + anchor) * SLOT_LEN;
        &self.raw[start..start + SLOT_LEN]
    }

    pub fn slot_mut(&mut self, cell: usize, anchor: usize) -> &mut [f64] {
        let start = (cell * NUM_ANCHORS + anchor) * SLOT_LEN;
        &mut self.raw[start..start + SLOT_LEN]
    }
}

/// Box center and size in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub bx: f64,
    pub by: f64,
    pub bw: f64,
    pub bh: f64,
}

impl BoxGeometry {
    /// Cell `(col, row)` containing the center.
    pub fn cell(&self) -> (usize, usize) {
        let c = |v: f64| (v.floor().max(0.0) as usize).min(GRID_SIZE - 1);
        (c(self.bx), c(self.by))
    }

    pub fn to_eval_box(&self, image_size: f64, score: f64) -> EvalBox {
        let s = image_size / GRID_SIZE as f64;
        EvalBox {
            x0: (self.bx - self.bw / 2.0) * s,
            y0: (self.by - self.bh / 2.0) * s,
            x1: (self.bx + self.bw / 2.0) * s,
            y1: (self.by + self.bh / 2.0) * s,
            score,
        }
    }
}

/// A decoded slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DetectionRepr", try_from = "DetectionRepr")]
pub struct DetectionBox {
    pub geometry: BoxGeometry,
    pub objectness: f64,
    /// Face parameters in the box-normalized frame.
    pub params: FaceParams,
    /// Landmarks in pixels.
    pub landmarks: Landmarks2D,
}

#[derive(Serialize, Deserialize)]
struct DetectionRepr {
    bx: f64,
    by: f64,
    bw: f64,
    bh: f64,
    obj: f64,
    params: FaceParams,
    landmarks: Vec<[f64; 2]>,
}

impl From<DetectionBox> for DetectionRepr {
    fn from(d: DetectionBox) -> Self {
        Self {
            bx: d.geometry.bx,
            by: d.geometry.by,
            bw: d.geometry.bw,
            bh: d.geometry.bh,
            obj: d.objectness,
            params: d.params,
            landmarks: d.landmarks.points().to_vec(),
        }
    }
}

impl TryFrom<DetectionRepr> for DetectionBox {
    type Error = Error;
    fn try_from(r: DetectionRepr) -> Result<Self> {
        Ok(Self {
            geometry: BoxGeometry {
                bx: r.bx,
                by: r.by,
                bw: r.bw,
                bh: r.bh,
            },
            objectness: r.obj,
            params: r.params,
            landmarks: Landmarks2D::new(r.landmarks)?,
        })
    }
}

/// One responsible (cell, anchor) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub cell: usize,
    pub anchor: usize,
    /// Encoded raw slot.
    pub raw: Vec<f64>,
    /// The slot decoded again: box, clamped parameters and landmarks.
    pub target: DetectionBox,
}

/// Training targets with the responsibility indicator over all 405 slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridGroundTruth {
    entries: Vec<GtEntry>,
}

impl GridGroundTruth {
    pub fn new(entries: Vec<GtEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.cell >= NUM_CELLS || e.anchor >= NUM_ANCHORS {
                return Err(Error::invalid(format!(
                    "ground-truth slot (cell {}, anchor {}) outside the 9x9x5 grid",
                    e.cell, e.anchor
                )));
            }
            if e.raw.len() != SLOT_LEN {
                return Err(Error::invalid("ground-truth slot must have 109 values"));
            }
            if let Some(j) = entries[..i]
                .iter()
                .position(|o| o.cell == e.cell && o.anchor == e.anchor)
            {
                return Err(Error::SlotCollision {
                    cell: e.cell,
                    anchor: e.anchor,
                    first: j,
                    second: i,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[GtEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn indicator(&self, cell: usize, anchor: usize) -> bool {
        self.entry(cell, anchor).is_some()
    }

    pub fn entry(&self, cell: usize, anchor: usize) -> Option<&GtEntry> {
        self.entries.iter().find(|e| e.cell == cell && e.anchor == anchor)
    }
}

/// A face to encode: its box and its box-normalized parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTarget {
    pub geometry: BoxGeometry,
    pub params: FaceParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub priors: [AnchorPrior; NUM_ANCHORS],
    /// Decoded focal range `[f_min, f_max]`.
    pub focal_range: (f64, f64),
    /// Side of the square input image in pixels.
    pub image_size: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            priors: DEFAULT_ANCHORS,
            focal_range: (0.2, 5.0),
            image_size: 288.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        for p in &self.priors {
            AnchorPrior::new(p.p_w, p.p_h)?;
        }
        let (lo, hi) = self.focal_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
            return Err(Error::invalid(format!("bad focal range [{lo}, {hi}]")));
        }
        if !(self.image_size.is_finite() && self.image_size > 0.0) {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(())
    }

    pub fn cell_pixels(&self) -> f64 {
        self.image_size / GRID_SIZE as f64
    }
}

/// `lm = b + b_size * lm̂` per axis, then cell units to pixels.
pub fn landmark_denorm(geom: &BoxGeometry, normalized: &Landmarks2D, image_size: f64) -> Landmarks2D {
    let s = image_size / GRID_SIZE as f64;
    normalized.map(|p| [(geom.bx + geom.bw * p[0]) * s, (geom.by + geom.bh * p[1]) * s])
}

/// Inverse of [`landmark_denorm`].
pub fn landmark_normalize(geom: &BoxGeometry, pixels: &Landmarks2D, image_size: f64) -> Landmarks2D {
    let s = image_size / GRID_SIZE as f64;
    pixels.map(|p| [(p[0] / s - geom.bx) / geom.bw, (p[1] / s - geom.by) / geom.bh])
}

/// Re-expresses pixel-frame parameters in the frame of `geom`.
///
/// Exact when the box is square (`bw == bh`); the x scale is used otherwise.
pub fn to_box_frame(params: &FaceParams, geom: &BoxGeometry, image_size: f64) -> FaceParams {
    let s = image_size / GRID_SIZE as f64;
    let f = params.pose.focal;
    let t = params.pose.translation;
    let mut out = params.clone();
    out.pose.focal = f / (s * geom.bw);
    out.pose.translation = [t[0] - geom.bx * s / f, t[1] - geom.by * s / f, 0.0];
    out
}

/// Inverse of [`to_box_frame`].
pub fn from_box_frame(params: &FaceParams, geom: &BoxGeometry, image_size: f64) -> FaceParams {
    let s = image_size / GRID_SIZE as f64;
    let f = params.pose.focal * s * geom.bw;
    let t = params.pose.translation;
    let mut out = params.clone();
    out.pose.focal = f;
    out.pose.translation = [t[0] + geom.bx * s / f, t[1] + geom.by * s / f, 0.0];
    out
}

pub struct GridCodec<'a> {
    tensor: &'a FaceTensor,
    config: CodecConfig,
}

impl<'a> GridCodec<'a> {
    pub fn new(tensor: &'a FaceTensor, config: CodecConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { tensor, config })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn tensor(&self) -> &FaceTensor {
        self.tensor
    }

    /// Decodes one slot of cell `(col, row)` against `prior`.
    pub fn decode_slot(&self, raw: &[f64], cell: (usize, usize), prior: &AnchorPrior) -> DetectionBox {
        assert_eq!(raw.len(), SLOT_LEN, "slot must hold {SLOT_LEN} values");
        let geometry = BoxGeometry {
            bx: sigmoid(raw[slot::TX]) + cell.0 as f64,
            by: sigmoid(raw[slot::TY]) + cell.1 as f64,
            bw: prior.p_w * raw[slot::TW].exp(),
            bh: prior.p_h * raw[slot::TH].exp(),
        };
        let objectness = sigmoid(raw[slot::TO]);

        let identity = IdentityWeights::from_slice_unchecked(&raw[slot::IDENTITY]);
        let mut w_free: Vec<f64> = raw[slot::EXPRESSION].iter().map(|&t| sigmoid(t)).collect();
        // independent sigmoids can leave the simplex; rescale like the fitter does
        let sum: f64 = w_free.iter().sum();
        if sum > 1.0 {
            w_free.iter_mut().for_each(|w| *w /= sum);
        }
        let q = &raw[slot::ROTATION];
        let rotation = Quaternion::from_array([q[0], q[1], q[2], q[3]])
            .unwrap_or_else(|_| Quaternion::identity());
        let t = &raw[slot::TRANSLATION];
        let (f_min, f_max) = self.config.focal_range;
        let focal = f_min + (f_max - f_min) * sigmoid(raw[slot::FOCAL]);

        let params = FaceParams {
            identity,
            expression: ExpressionWeights::from_slice_unchecked(&w_free),
            pose: Pose {
                rotation,
                translation: [t[0], t[1], 0.0],
                focal,
            },
        };
        let normalized = project_landmarks(self.tensor, &params);
        let landmarks = landmark_denorm(&geometry, &normalized, self.config.image_size);
        DetectionBox {
            geometry,
            objectness,
            params,
            landmarks,
        }
    }

    /// Anchor with the highest co-centered IoU; ties go to the lower index.
    pub fn best_anchor(&self, bw: f64, bh: f64) -> usize {
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (k, p) in self.config.priors.iter().enumerate() {
            let iou = p.shape_iou(bw, bh);
            if iou > best_iou {
                best = k;
                best_iou = iou;
            }
        }
        best
    }

    /// Encodes one face into a raw slot for the given cell and anchor.
    pub fn encode_slot(&self, face: &FaceTarget, cell: (usize, usize), anchor: usize) -> Vec<f64> {
        let g = &face.geometry;
        let prior = &self.config.priors[anchor];
        let mut raw = vec![0.0; SLOT_LEN];
        raw[slot::TX] = logit_clamped(g.bx - cell.0 as f64, LOGIT_EPS);
        raw[slot::TY] = logit_clamped(g.by - cell.1 as f64, LOGIT_EPS);
        raw[slot::TW] = (g.bw / prior.p_w).ln();
        raw[slot::TH] = (g.bh / prior.p_h).ln();
        raw[slot::TO] = logit_clamped(1.0, LOGIT_EPS);
        raw[slot::IDENTITY].copy_from_slice(face.params.identity.as_slice());
        for (dst, &w) in raw[slot::EXPRESSION].iter_mut().zip(face.params.expression.free()) {
            *dst = logit_clamped(w, LOGIT_EPS);
        }
        raw[slot::ROTATION].copy_from_slice(&face.params.pose.rotation.as_array());
        let t = face.params.pose.translation;
        raw[slot::TRANSLATION].copy_from_slice(&[t[0], t[1], 0.0]);
        let (f_min, f_max) = self.config.focal_range;
        raw[slot::FOCAL] = logit_clamped((face.params.pose.focal - f_min) / (f_max - f_min), LOGIT_EPS);
        raw
    }

    /// Assigns each face to the cell holding its center and its best prior,
    /// and writes the encoded slots into a grid whose other slots have
    /// objectness `ε`.
    pub fn encode_gt(&self, faces: &[FaceTarget]) -> Result<(GridGroundTruth, GridTensor)> {
        let mut grid = GridTensor::zeros();
        let empty_obj = logit_clamped(0.0, LOGIT_EPS);
        for cell in 0..NUM_CELLS {
            for k in 0..NUM_ANCHORS {
                grid.slot_mut(cell, k)[slot::TO] = empty_obj;
            }
        }

        let mut entries: Vec<GtEntry> = Vec::with_capacity(faces.len());
        let mut owners: Vec<usize> = Vec::with_capacity(faces.len());
        for (i, face) in faces.iter().enumerate() {
            let g = &face.geometry;
            let limit = GRID_SIZE as f64;
            if !(g.bx >= 0.0 && g.bx < limit && g.by >= 0.0 && g.by < limit) {
                return Err(Error::invalid(format!(
                    "face {i} center ({}, {}) lies outside the grid",
                    g.bx, g.by
                )));
            }
            if !(g.bw > 0.0 && g.bh > 0.0 && g.bw.is_finite() && g.bh.is_finite()) {
                return Err(Error::invalid(format!("face {i} has a degenerate box")));
            }
            let (col, row) = g.cell();
            let cell = row * GRID_SIZE + col;
            let anchor = self.best_anchor(g.bw, g.bh);
            if let Some(j) = entries.iter().position(|e| e.cell == cell && e.anchor == anchor) {
                return Err(Error::SlotCollision {
                    cell,
                    anchor,
                    first: owners[j],
                    second: i,
                });
            }
            let raw = self.encode_slot(face, (col, row), anchor);
            grid.slot_mut(cell, anchor).copy_from_slice(&raw);
            let target = self.decode_slot(&raw, (col, row), &self.config.priors[anchor]);
            entries.push(GtEntry {
                cell,
                anchor,
                raw,
                target,
            });
            owners.push(i);
        }
        Ok((GridGroundTruth::new(entries)?, grid))
    }

    /// Decodes every slot and keeps those with objectness above `threshold`,
    /// most confident first.
    pub fn decode_grid(&self, grid: &GridTensor, threshold: f64) -> Vec<DetectionBox> {
        let mut boxes: Vec<DetectionBox> = (0..NUM_SLOTS)
            .into_par_iter()
            .filter_map(|s| {
                let (cell, anchor) = (s / NUM_ANCHORS, s % NUM_ANCHORS);
                let raw = grid.slot(cell, anchor);
                if sigmoid(raw[slot::TO]) <= threshold {
                    return None;
                }
                let at = (cell % GRID_SIZE, cell / GRID_SIZE);
                Some(self.decode_slot(raw, at, &self.config.priors[anchor]))
            })
            .collect();
        boxes.sort_by(|a, b| b.objectness.total_cmp(&a.objectness));
        boxes
    }
}

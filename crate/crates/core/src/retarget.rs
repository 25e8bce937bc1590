//! Transfer of expression and head pose onto a character rig, and
//! landmark-driven face tracking between frames.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::detection_eval::EvalBox;
use crate::error::{Error, Result};
use crate::morphable_model::{FaceParams, Landmarks2D, Quaternion, NUM_FREE_EXPRESSION};

pub const DEFAULT_TRACK_MARGIN: f64 = 0.1;

fn unit_gain() -> f64 {
    1.0
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}

fn yes() -> bool {
    true
}

/// One source blendshape driving one target blendshape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigEntry {
    /// 1-based index into the 46 free expression coefficients.
    pub source: usize,
    pub target: String,
    #[serde(default = "unit_gain")]
    pub gain: f64,
    #[serde(default = "unit_interval")]
    pub clamp: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigMapping {
    pub entries: Vec<RigEntry>,
    #[serde(default = "yes")]
    pub pass_pose: bool,
}

impl RigMapping {
    /// Every source blendshape `i` drives target `bs{i:02}` one to one.
    pub fn identity() -> Self {
        Self {
            entries: (1..=NUM_FREE_EXPRESSION)
                .map(|i| RigEntry {
                    source: i,
                    target: format!("bs{i:02}"),
                    gain: 1.0,
                    clamp: [0.0, 1.0],
                })
                .collect(),
            pass_pose: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut sources = HashSet::new();
        let mut targets = HashSet::new();
        for e in &self.entries {
            if !(1..=NUM_FREE_EXPRESSION).contains(&e.source) {
                return Err(Error::invalid(format!("source blendshape {} outside 1..=46", e.source)));
            }
            if !sources.insert(e.source) {
                return Err(Error::invalid(format!("source blendshape {} mapped twice", e.source)));
            }
            if !targets.insert(e.target.as_str()) {
                return Err(Error::invalid(format!("target blendshape '{}' mapped twice", e.target)));
            }
            if !e.gain.is_finite() {
                return Err(Error::invalid(format!("gain for '{}' is not finite", e.target)));
            }
            let [lo, hi] = e.clamp;
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(format!(
                    "clamp [{lo}, {hi}] for '{}' is not inside [0, 1]",
                    e.target
                )));
            }
        }
        Ok(())
    }
}

/// Target rig state for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigPose {
    pub weights: BTreeMap<String, f64>,
    pub rotation: Quaternion,
}

/// Drives the rig from expression and rotation only; identity, translation
/// and focal never reach the character.
pub fn map_to_rig(params: &FaceParams, mapping: &RigMapping) -> Result<RigPose> {
    mapping.validate()?;
    let w = params.expression.free();
    let weights = mapping
        .entries
        .iter()
        .map(|e| {
            let [lo, hi] = e.clamp;
            (e.target.clone(), (e.gain * w[e.source - 1]).clamp(lo, hi))
        })
        .collect();
    let rotation = if mapping.pass_pose {
        params.pose.rotation
    } else {
        Quaternion::identity()
    };
    Ok(RigPose { weights, rotation })
}

/// Search box for the next frame: the landmark bounds padded on every side by
/// `margin * max(w, h)`.
pub fn track_next_bbox(prev: &Landmarks2D, margin: f64) -> Result<EvalBox> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::invalid(format!("margin must be non-negative, got {margin}")));
    }
    let (x0, y0, x1, y1) = prev.bounds();
    let pad = margin * (x1 - x0).max(y1 - y0);
    EvalBox::new(x0 - pad, y0 - pad, x1 + pad, y1 + pad, 1.0)
        .map_err(|_| Error::invalid("landmarks are degenerate; cannot derive a tracking box"))
}

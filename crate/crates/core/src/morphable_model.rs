//! Reduced multilinear face model and weak-perspective landmark projection.
//!
//! The model is a rank-3 tensor over (vertex coordinate, identity basis,
//! expression basis). Contracting it with identity weights and a full
//! expression vector yields the 68 landmark vertices in model space; a
//! rotation, a 2D translation and a focal scale then place them in the image:
//!
//! ```text
//! p = f * (R * X + t)_xy
//! ```
//!
//! Expression weights are stored as the 46 free blendshape coefficients. The
//! neutral weight is implied so the full 47-vector always lies on the simplex.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;
/// Rows of the tensor: 68 vertices times (x, y, z).
pub const MESH_ROWS: usize = NUM_LANDMARKS * 3;
pub const NUM_IDENTITY: usize = 50;
/// Blendshapes including the neutral one at index 0.
pub const NUM_BLENDSHAPES: usize = 47;
pub const NUM_FREE_EXPRESSION: usize = NUM_BLENDSHAPES - 1;

/// Half-extent of the synthetic neutral face in model units.
pub const NEUTRAL_EXTENT: f64 = 1.0;
/// Per-entry bound of identity basis `i >= 1` is `IDENTITY_AMPLITUDE / (1 + i)`.
pub const IDENTITY_AMPLITUDE: f64 = 0.3;
/// Per-entry bound of an expression offset on identity basis `i` is
/// `EXPRESSION_AMPLITUDE / (1 + i)`.
pub const EXPRESSION_AMPLITUDE: f64 = 0.25;

const UNIT_TOL: f64 = 1e-9;
const SIMPLEX_TOL: f64 = 1e-12;

/// Reduced face tensor, 204 x 50 x 47, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTensor {
    values: Vec<f64>,
}

impl FaceTensor {
    pub const SHAPE: [usize; 3] = [MESH_ROWS, NUM_IDENTITY, NUM_BLENDSHAPES];
    pub const LEN: usize = MESH_ROWS * NUM_IDENTITY * NUM_BLENDSHAPES;

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::LEN {
            return Err(Error::invalid(format!(
                "face tensor needs {} values, got {}",
                Self::LEN,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("face tensor entry {pos} is not finite")));
        }
        Ok(Self { values })
    }

    /// A tensor with every entry equal to `c`.
    pub fn constant(c: f64) -> Self {
        Self {
            values: vec![c; Self::LEN],
        }
    }

    #[inline]
    pub fn index(row: usize, id: usize, exp: usize) -> usize {
        (row * NUM_IDENTITY + id) * NUM_BLENDSHAPES + exp
    }

    #[inline]
    pub fn get(&self, row: usize, id: usize, exp: usize) -> f64 {
        self.values[Self::index(row, id, exp)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Contracts the expression axis: `out[row][id] = sum_j T[row,id,j] * w[j]`.
    pub fn contract_expression(&self, w_full: &[f64; NUM_BLENDSHAPES]) -> Vec<f64> {
        self.values
            .chunks_exact(NUM_BLENDSHAPES)
            .map(|fiber| fiber.iter().zip(w_full).map(|(t, w)| t * w).sum())
            .collect()
    }

    /// Contracts the identity axis: `out[row][j] = sum_i T[row,i,j] * w_id[i]`.
    pub fn contract_identity(&self, w_id: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; MESH_ROWS * NUM_BLENDSHAPES];
        for (row, slab) in self
            .values
            .chunks_exact(NUM_IDENTITY * NUM_BLENDSHAPES)
            .enumerate()
        {
            let dst = &mut out[row * NUM_BLENDSHAPES..(row + 1) * NUM_BLENDSHAPES];
            for (fiber, &w) in slab.chunks_exact(NUM_BLENDSHAPES).zip(w_id) {
                if w == 0.0 {
                    continue;
                }
                for (d, t) in dst.iter_mut().zip(fiber) {
                    *d += t * w;
                }
            }
        }
        out
    }
}

/// Identity (shape PCA) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityWeights(Vec<f64>);

impl IdentityWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() != NUM_IDENTITY {
            return Err(Error::invalid(format!(
                "identity weights need {NUM_IDENTITY} entries, got {}",
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("identity weights must be finite"));
        }
        Ok(Self(w))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; NUM_IDENTITY])
    }

    /// The mean face: unit weight on the first basis.
    pub fn mean() -> Self {
        let mut w = vec![0.0; NUM_IDENTITY];
        w[0] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn from_slice_unchecked(w: &[f64]) -> Self {
        Self(w.to_vec())
    }
}

/// The 46 free blendshape coefficients; the neutral weight is `1 - sum`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionWeights(Vec<f64>);

impl ExpressionWeights {
    pub fn new(w_free: Vec<f64>) -> Result<Self> {
        if w_free.len() != NUM_FREE_EXPRESSION {
            return Err(Error::invalid(format!(
                "expression weights need {NUM_FREE_EXPRESSION} entries, got {}",
                w_free.len()
            )));
        }
        if let Some(i) = w_free
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::invalid(format!(
                "expression weight {i} = {} outside [0, 1]",
                w_free[i]
            )));
        }
        let sum: f64 = w_free.iter().sum();
        if sum > 1.0 + SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "expression weights sum to {sum}, must be at most 1"
            )));
        }
        Ok(Self(w_free))
    }

    pub fn neutral() -> Self {
        Self(vec![0.0; NUM_FREE_EXPRESSION])
    }

    pub fn free(&self) -> &[f64] {
        &self.0
    }

    pub fn neutral_weight(&self) -> f64 {
        1.0 - self.0.iter().sum::<f64>()
    }

    /// The full 47-vector `(w0, w_free)`, summing to one.
    pub fn full(&self) -> [f64; NUM_BLENDSHAPES] {
        full_expression(&self.0)
    }

    pub(crate) fn from_slice_unchecked(w: &[f64]) -> Self {
        Self(w.to_vec())
    }
}

pub(crate) fn full_expression(w_free: &[f64]) -> [f64; NUM_BLENDSHAPES] {
    let mut full = [0.0; NUM_BLENDSHAPES];
    full[1..].copy_from_slice(w_free);
    full[0] = 1.0 - w_free.iter().sum::<f64>();
    full
}

/// Unit rotation quaternion stored as (w, x, y, z) with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion([f64; 4]);

impl TryFrom<[f64; 4]> for Quaternion {
    type Error = Error;
    fn try_from(q: [f64; 4]) -> Result<Self> {
        Self::from_array(q)
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        q.0
    }
}

impl Quaternion {
    /// Normalizes and sign-canonicalizes the given components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_array([w, x, y, z])
    }

    pub fn from_array(q: [f64; 4]) -> Result<Self> {
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("quaternion components must be finite"));
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::invalid("zero-norm quaternion"));
        }
        Ok(Self::canonical(q.map(|v| v / norm)))
    }

    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0])
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-12 {
            return Err(Error::invalid("zero rotation axis"));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self::from_array([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n])
    }

    fn canonical(q: [f64; 4]) -> Self {
        if q[0] < 0.0 {
            Self(q.map(|v| -v))
        } else {
            Self(q)
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let [aw, ax, ay, az] = self.0;
        let [bw, bx, by, bz] = rhs.0;
        let q = [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::canonical(q.map(|v| v / norm))
    }

    /// Rotation angle in radians between two orientations, in `[0, pi]`.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        2.0 * dot.abs().min(1.0).acos()
    }
}

pub type Matrix3 = [[f64; 3]; 3];

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quaternion) -> Matrix3 {
    rotation_from_ambient(&q.0)
}

/// Rotation matrix of `q / |q|` for any nonzero 4-vector.
///
/// The fitter differentiates through this map, so it must stay valid off the
/// unit sphere.
pub(crate) fn rotation_from_ambient(q: &[f64; 4]) -> Matrix3 {
    let h = homogeneous_rotation(q);
    let n = q.iter().map(|v| v * v).sum::<f64>();
    h.map(|row| row.map(|v| v / n))
}

pub(crate) fn homogeneous_rotation(q: &[f64; 4]) -> Matrix3 {
    let [w, x, y, z] = *q;
    [
        [
            w * w + x * x - y * y - z * z,
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            w * w - x * x + y * y - z * z,
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            w * w - x * x - y * y + z * z,
        ],
    ]
}

/// Derivatives of `rotation_from_ambient` with respect to (w, x, y, z).
pub(crate) fn rotation_derivatives(q: &[f64; 4]) -> [Matrix3; 4] {
    let [w, x, y, z] = *q;
    let n = q.iter().map(|v| v * v).sum::<f64>();
    let h = homogeneous_rotation(q);
    let dh = [
        [[w, -z, y], [z, w, -x], [-y, x, w]],
        [[x, y, z], [y, -x, -w], [z, w, -x]],
        [[-y, x, w], [x, y, z], [-w, z, -y]],
        [[-z, -w, x], [w, -z, y], [x, y, z]],
    ];
    let mut out = [[[0.0; 3]; 3]; 4];
    for m in 0..4 {
        for r in 0..3 {
            for c in 0..3 {
                out[m][r][c] = 2.0 * dh[m][r][c] / n - h[r][c] * 2.0 * q[m] / (n * n);
            }
        }
    }
    out
}

/// Head pose: rotation, translation (model units, `t_z` held at zero) and
/// focal scale (model units to pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: [f64; 3],
    pub focal: f64,
}

impl Pose {
    pub fn new(rotation: Quaternion, translation_xy: [f64; 2], focal: f64) -> Result<Self> {
        let pose = Self {
            rotation,
            translation: [translation_xy[0], translation_xy[1], 0.0],
            focal,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::invalid(format!("focal must be positive, got {}", self.focal)));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        if self.translation[2] != 0.0 {
            return Err(Error::invalid("t_z is unobservable and must be 0"));
        }
        Ok(())
    }
}

/// Full parameter set of one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FaceParamsRepr", into = "FaceParamsRepr")]
pub struct FaceParams {
    pub identity: IdentityWeights,
    pub expression: ExpressionWeights,
    pub pose: Pose,
}

impl FaceParams {
    /// Mean identity, neutral expression, no rotation, zero translation.
    pub fn neutral(focal: f64) -> Self {
        Self {
            identity: IdentityWeights::mean(),
            expression: ExpressionWeights::neutral(),
            pose: Pose {
                rotation: Quaternion::identity(),
                translation: [0.0; 3],
                focal,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        IdentityWeights::new(self.identity.0.clone())?;
        ExpressionWeights::new(self.expression.0.clone())?;
        let q = self.pose.rotation.0;
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL || q[0] < 0.0 {
            return Err(Error::invalid("rotation quaternion is not canonical unit"));
        }
        self.pose.validate()
    }
}

#[derive(Serialize, Deserialize)]
struct FaceParamsRepr {
    w_id: Vec<f64>,
    w_exp: Vec<f64>,
    quat: [f64; 4],
    t: [f64; 3],
    f: f64,
}

impl TryFrom<FaceParamsRepr> for FaceParams {
    type Error = Error;

    fn try_from(r: FaceParamsRepr) -> Result<Self> {
        let params = FaceParams {
            identity: IdentityWeights::new(r.w_id)?,
            expression: ExpressionWeights::new(r.w_exp)?,
            pose: Pose {
                rotation: Quaternion::from_array(r.quat)?,
                translation: r.t,
                focal: r.f,
            },
        };
        params.pose.validate()?;
        Ok(params)
    }
}

impl From<FaceParams> for FaceParamsRepr {
    fn from(p: FaceParams) -> Self {
        Self {
            w_id: p.identity.0,
            w_exp: p.expression.0,
            quat: p.pose.rotation.0,
            t: p.pose.translation,
            f: p.pose.focal,
        }
    }
}

/// 68 image-space points: origin top-left, x rightward, y downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LandmarksRepr", into = "LandmarksRepr")]
pub struct Landmarks2D {
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct LandmarksRepr {
    landmarks: Vec<[f64; 2]>,
}

impl TryFrom<LandmarksRepr> for Landmarks2D {
    type Error = Error;
    fn try_from(r: LandmarksRepr) -> Result<Self> {
        Landmarks2D::new(r.landmarks)
    }
}

impl From<Landmarks2D> for LandmarksRepr {
    fn from(l: Landmarks2D) -> Self {
        Self { landmarks: l.points }
    }
}

impl Landmarks2D {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::invalid(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("landmark coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Axis-aligned bounds as `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])),
        )
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }

    /// Root mean squared point distance to `other`.
    pub fn rmse(&self, other: &Landmarks2D) -> f64 {
        let sum: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum();
        (sum / self.points.len() as f64).sqrt()
    }
}

/// Landmark vertices for the given identity and expression, as 68 (x, y, z).
pub fn synth_landmark_mesh(
    tensor: &FaceTensor,
    id: &IdentityWeights,
    exp: &ExpressionWeights,
) -> Vec<[f64; 3]> {
    mesh_from_weights(tensor, id.as_slice(), &exp.full())
}

pub(crate) fn mesh_from_weights(
    tensor: &FaceTensor,
    w_id: &[f64],
    w_full: &[f64; NUM_BLENDSHAPES],
) -> Vec<[f64; 3]> {
    let per_id = tensor.contract_expression(w_full);
    mesh_from_contracted(&per_id, w_id)
}

/// Finishes the contraction given `per_id[row][i]` from `contract_expression`.
pub(crate) fn mesh_from_contracted(per_id: &[f64], w_id: &[f64]) -> Vec<[f64; 3]> {
    let rows: Vec<f64> = per_id
        .chunks_exact(NUM_IDENTITY)
        .map(|r| r.iter().zip(w_id).map(|(a, w)| a * w).sum())
        .collect();
    rows.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub(crate) fn rotate(r: &Matrix3, x: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2],
        r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2],
        r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2],
    ]
}

/// Weak-perspective projection of an already synthesized mesh.
pub fn project_mesh(mesh: &[[f64; 3]], pose: &Pose) -> Landmarks2D {
    let r = quat_to_matrix(&pose.rotation);
    let t = pose.translation;
    let f = pose.focal;
    let points = mesh
        .iter()
        .map(|x| {
            let y = rotate(&r, x);
            [f * (y[0] + t[0]), f * (y[1] + t[1])]
        })
        .collect();
    Landmarks2D { points }
}

/// 2D landmarks of a face: `f * (R * X + t)_xy` per vertex.
pub fn project_landmarks(tensor: &FaceTensor, params: &FaceParams) -> Landmarks2D {
    let mesh = synth_landmark_mesh(tensor, &params.identity, &params.expression);
    project_mesh(&mesh, &params.pose)
}

/// Facial regions of the 68-point layout; expression bases act on one each.
const REGIONS: [std::ops::Range<usize>; 6] = [0..17, 17..27, 27..36, 36..42, 42..48, 48..68];

fn neutral_layout() -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    // jaw, from the right temple under the chin to the left temple
    for k in 0..17 {
        let a = PI * k as f64 / 16.0;
        let x = -0.75 * a.cos();
        let y = -0.05 + 0.8 * a.sin();
        let z = -0.35 * (1.0 - a.sin());
        pts.push([x, y, z]);
    }
    // brows
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let s = k as f64 / 4.0;
            let x = if side < 0.0 { -0.62 + 0.5 * s } else { 0.12 + 0.5 * s };
            let arch = (PI * s).sin();
            pts.push([x, -0.38 - 0.06 * arch, 0.12 + 0.03 * arch]);
        }
    }
    // nose bridge and tip
    for k in 0..4 {
        let s = k as f64 / 3.0;
        pts.push([0.0, -0.25 + 0.38 * s, 0.2 + 0.2 * s]);
    }
    for k in 0..5 {
        let s = k as f64 / 4.0 - 0.5;
        pts.push([0.32 * s, 0.2 - 0.04 * (1.0 - 4.0 * s * s), 0.3 - 0.1 * s.abs()]);
    }
    // eyes
    for cx in [-0.32, 0.32] {
        for k in 0..6 {
            let a = PI - 2.0 * PI * k as f64 / 6.0;
            pts.push([cx + 0.12 * a.cos(), -0.2 - 0.05 * a.sin(), 0.1]);
        }
    }
    // outer then inner lip contour
    for k in 0..12 {
        let a = PI - 2.0 * PI * k as f64 / 12.0;
        pts.push([0.28 * a.cos(), 0.45 - 0.1 * a.sin(), 0.18 + 0.04 * a.sin().abs()]);
    }
    for k in 0..8 {
        let a = PI - 2.0 * PI * k as f64 / 8.0;
        pts.push([0.18 * a.cos(), 0.45 - 0.04 * a.sin(), 0.2]);
    }
    pts
}

/// Deterministic stand-in for a captured face tensor.
///
/// Identity basis 0 is a neutral face within `[-NEUTRAL_EXTENT, NEUTRAL_EXTENT]`;
/// bases `i >= 1` are random shape offsets bounded by
/// `IDENTITY_AMPLITUDE / (1 + i)`. Expression slice `j >= 1` adds a region
/// localized offset to slice 0, bounded by `EXPRESSION_AMPLITUDE / (1 + i)`.
pub fn generate_synthetic_tensor(seed: u64) -> FaceTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; FaceTensor::LEN];

    let mut neutral: Vec<f64> = neutral_layout().into_iter().flatten().collect();
    for v in &mut neutral {
        *v = (*v + rng.random_range(-0.01..0.01)).clamp(-NEUTRAL_EXTENT, NEUTRAL_EXTENT);
    }

    // identity shape offsets, slice j = 0
    for row in 0..MESH_ROWS {
        values[FaceTensor::index(row, 0, 0)] = neutral[row];
    }
    for id in 1..NUM_IDENTITY {
        let amp = IDENTITY_AMPLITUDE / (1 + id) as f64;
        for row in 0..MESH_ROWS {
            values[FaceTensor::index(row, id, 0)] = amp * rng.random_range(-1.0..1.0);
        }
    }

    // expression offsets on the mean identity, each confined to one region
    let mut offsets = vec![[0.0; MESH_ROWS]; NUM_BLENDSHAPES];
    for offset in offsets.iter_mut().skip(1) {
        let region = &REGIONS[rng.random_range(0..REGIONS.len())];
        let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let strength = rng.random_range(0.3..1.0);
        for v in region.clone() {
            for c in 0..3 {
                let jitter = rng.random_range(-0.3..0.3);
                offset[3 * v + c] =
                    (EXPRESSION_AMPLITUDE * strength * (0.7 * dir[c] + jitter))
                        .clamp(-EXPRESSION_AMPLITUDE, EXPRESSION_AMPLITUDE);
            }
        }
    }

    for id in 0..NUM_IDENTITY {
        let decay = 1.0 / (1 + id) as f64;
        for (exp, offset) in offsets.iter().enumerate().skip(1) {
            // identity-dependent variation of each expression
            let gain = if id == 0 { 1.0 } else { rng.random_range(-1.0..1.0) };
            for row in 0..MESH_ROWS {
                let base = values[FaceTensor::index(row, id, 0)];
                values[FaceTensor::index(row, id, exp)] = base + decay * gain * offset[row];
            }
        }
    }

    FaceTensor { values }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(seed: u64) -> FaceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_id: Vec<f64> = (0..NUM_IDENTITY).map(|_| rng.random_range(-1.0..1.0)).collect();
        w_id[0] = 1.0;
        let w_free: Vec<f64> = (0..NUM_FREE_EXPRESSION)
            .map(|_| rng.random_range(0.0..0.02))
            .collect();
        let q = Quaternion::new(1.0, rng.random_range(-0.2..0.2), 0.1, -0.05).unwrap();
        FaceParams {
            identity: IdentityWeights::new(w_id).unwrap(),
            expression: ExpressionWeights::new(w_free).unwrap(),
            pose: Pose::new(q, [0.3, -0.2], 80.0).unwrap(),
        }
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let a = generate_synthetic_tensor(42);
        let b = generate_synthetic_tensor(42);
        let c = generate_synthetic_tensor(43);
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn generator_respects_bounds() {
        let t = generate_synthetic_tensor(42);
        assert_eq!(t.values().len(), 204 * 50 * 47);
        for row in 0..MESH_ROWS {
            for id in 0..NUM_IDENTITY {
                let base = t.get(row, id, 0);
                assert!(base.is_finite());
                let base_bound = if id == 0 {
                    NEUTRAL_EXTENT
                } else {
                    IDENTITY_AMPLITUDE / (1 + id) as f64
                };
                assert!(base.abs() <= base_bound, "row {row} id {id}: {base}");
                let exp_bound = EXPRESSION_AMPLITUDE / (1 + id) as f64 + 1e-15;
                for exp in 1..NUM_BLENDSHAPES {
                    let off = t.get(row, id, exp) - base;
                    assert!(off.is_finite() && off.abs() <= exp_bound);
                }
            }
        }
    }

    #[test]
    fn constant_tensor_mesh() {
        let c = 0.7;
        let t = FaceTensor::constant(c);
        let w_id: Vec<f64> = (0..NUM_IDENTITY).map(|i| 0.01 * i as f64 - 0.2).collect();
        let s: f64 = w_id.iter().sum();
        let mut w_free = vec![0.0; NUM_FREE_EXPRESSION];
        w_free[3] = 0.4;
        w_free[10] = 0.25;
        let mesh = synth_landmark_mesh(
            &t,
            &IdentityWeights::new(w_id).unwrap(),
            &ExpressionWeights::new(w_free).unwrap(),
        );
        for v in mesh.iter().flatten() {
            assert!((v - c * s).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_identity_gives_zero_mesh() {
        let t = generate_synthetic_tensor(42);
        let mesh = synth_landmark_mesh(&t, &IdentityWeights::zeros(), &ExpressionWeights::neutral());
        assert!(mesh.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn mesh_matches_triple_loop() {
        let t = generate_synthetic_tensor(42);
        let p = random_params(5);
        let mesh = synth_landmark_mesh(&t, &p.identity, &p.expression);
        let w_full = p.expression.full();
        for row in 0..MESH_ROWS {
            let mut acc = 0.0;
            for i in 0..NUM_IDENTITY {
                for j in 0..NUM_BLENDSHAPES {
                    acc += t.get(row, i, j) * p.identity.as_slice()[i] * w_full[j];
                }
            }
            let got = mesh[row / 3][row % 3];
            assert!((got - acc).abs() <= 1e-12 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn identity_quaternion_is_identity_matrix() {
        let r = quat_to_matrix(&Quaternion::identity());
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_turn_about_x() {
        let h = 0.5f64.sqrt();
        let r = quat_to_matrix(&Quaternion::new(h, h, 0.0, 0.0).unwrap());
        let y = rotate(&r, &[0.0, 1.0, 0.0]);
        assert!((y[0]).abs() < 1e-15 && (y[1]).abs() < 1e-15 && (y[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(Quaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn negated_quaternion_same_rotation() {
        let q = [0.3, -0.5, 0.2, 0.7];
        let a = rotation_from_ambient(&q);
        let b = rotation_from_ambient(&q.map(|v| -v));
        assert_eq!(a, b);
    }

    #[test]
    fn single_vertex_identity_projection() {
        let pose = Pose::new(Quaternion::identity(), [0.0, 0.0], 1.0).unwrap();
        let lm = project_mesh(&[[2.0, 3.0, 5.0]], &pose);
        assert_eq!(lm.points()[0], [2.0, 3.0]);
    }

    #[test]
    fn projection_linear_in_focal_and_equivariant_in_translation() {
        let t = generate_synthetic_tensor(42);
        let p = random_params(9);
        let base = project_landmarks(&t, &p);

        let mut doubled = p.clone();
        doubled.pose.focal *= 2.0;
        let lm2 = project_landmarks(&t, &doubled);
        for (a, b) in base.points().iter().zip(lm2.points()) {
            assert!((2.0 * a[0] - b[0]).abs() < 1e-10 && (2.0 * a[1] - b[1]).abs() < 1e-10);
        }

        let mut shifted = p.clone();
        shifted.pose.translation[0] += 0.5;
        shifted.pose.translation[1] -= 0.25;
        let lm3 = project_landmarks(&t, &shifted);
        let f = p.pose.focal;
        for (a, b) in base.points().iter().zip(lm3.points()) {
            assert!((b[0] - a[0] - 0.5 * f).abs() < 1e-9);
            assert!((b[1] - a[1] + 0.25 * f).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_ignores_tz() {
        let t = generate_synthetic_tensor(42);
        let p = random_params(3);
        let mut q = p.clone();
        q.pose.translation[2] = 123.0;
        assert_eq!(project_landmarks(&t, &p), project_landmarks(&t, &q));
    }

    #[test]
    fn expression_weights_validation() {
        assert!(ExpressionWeights::new(vec![0.0; 45]).is_err());
        let mut w = vec![0.0; 46];
        w[0] = -0.1;
        assert!(ExpressionWeights::new(w).is_err());
        assert!(ExpressionWeights::new(vec![0.03; 46]).is_err());
        let ok = ExpressionWeights::new(vec![0.02; 46]).unwrap();
        assert!((ok.full().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn params_json_shape() {
        let p = random_params(1);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["w_id"].as_array().unwrap().len(), 50);
        assert_eq!(v["w_exp"].as_array().unwrap().len(), 46);
        assert_eq!(v["quat"].as_array().unwrap().len(), 4);
        assert_eq!(v["t"].as_array().unwrap().len(), 3);
        assert!(v["f"].is_f64());
        let back: FaceParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}

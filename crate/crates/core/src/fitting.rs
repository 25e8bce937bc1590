//! Face parameter recovery from 2D landmarks.
//!
//! Levenberg-Marquardt over the ambient parameter vector, with feasibility
//! restored by projection after every trial step: expression weights are
//! clamped to the simplex, identity weights to a box, the quaternion is
//! renormalized and the focal kept positive.
//!
//! Damping is Marquardt-style (scaled by the diagonal of `JᵀJ`) except that
//! the quaternion and in-plane translation blocks share one averaged scale per
//! block. That keeps the iteration equivariant under image-plane rotation of
//! the observations, not just under translation and uniform scaling.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphable_model::{
    full_expression, mesh_from_contracted, rotate, rotation_derivatives, rotation_from_ambient,
    ExpressionWeights, FaceParams, FaceTensor, IdentityWeights, Landmarks2D, Pose, Quaternion,
    MESH_ROWS, NUM_BLENDSHAPES, NUM_FREE_EXPRESSION, NUM_IDENTITY, NUM_LANDMARKS,
};

/// Length of the flat parameter vector and width of the Jacobian.
pub const NUM_PARAMS: usize = 104;
pub const NUM_RESIDUALS: usize = 2 * NUM_LANDMARKS;

/// Column layout of [`ParamVector`] and [`jacobian`].
pub mod layout {
    use std::ops::Range;

    pub const IDENTITY: Range<usize> = 0..50;
    pub const EXPRESSION: Range<usize> = 50..96;
    /// Ambient quaternion (w, x, y, z).
    pub const ROTATION: Range<usize> = 96..100;
    pub const TX: usize = 100;
    pub const TY: usize = 101;
    pub const FOCAL: usize = 102;
    /// Reserved; the projection does not depend on it.
    pub const TZ: usize = 103;
}

/// Columns actually optimized (everything but `t_z`).
const ACTIVE: usize = NUM_PARAMS - 1;
const MIN_FOCAL: f64 = 1e-6;
const MAX_DAMPING: f64 = 1e16;

/// Flat parameter vector in [`layout`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector(pub [f64; NUM_PARAMS]);

impl ParamVector {
    pub fn from_params(p: &FaceParams) -> Self {
        let mut v = [0.0; NUM_PARAMS];
        v[layout::IDENTITY].copy_from_slice(p.identity.as_slice());
        v[layout::EXPRESSION].copy_from_slice(p.expression.free());
        v[layout::ROTATION].copy_from_slice(&p.pose.rotation.as_array());
        v[layout::TX] = p.pose.translation[0];
        v[layout::TY] = p.pose.translation[1];
        v[layout::FOCAL] = p.pose.focal;
        v[layout::TZ] = p.pose.translation[2];
        Self(v)
    }

    fn slice(&self, r: Range<usize>) -> &[f64] {
        &self.0[r]
    }

    fn quat(&self) -> [f64; 4] {
        let q = self.slice(layout::ROTATION);
        [q[0], q[1], q[2], q[3]]
    }

    /// Projects onto the feasible set and converts back to typed parameters.
    pub fn to_params(&self, w_id_bound: f64) -> FaceParams {
        let v = project_feasible(self, w_id_bound);
        FaceParams {
            identity: IdentityWeights::from_slice_unchecked(v.slice(layout::IDENTITY)),
            expression: ExpressionWeights::from_slice_unchecked(v.slice(layout::EXPRESSION)),
            pose: Pose {
                rotation: Quaternion::from_array(v.quat()).unwrap_or_else(|_| Quaternion::identity()),
                translation: [v.0[layout::TX], v.0[layout::TY], 0.0],
                focal: v.0[layout::FOCAL],
            },
        }
    }
}

fn project_feasible(v: &ParamVector, w_id_bound: f64) -> ParamVector {
    let mut out = *v;
    for w in &mut out.0[layout::IDENTITY] {
        *w = if w.is_finite() { w.clamp(-w_id_bound, w_id_bound) } else { 0.0 };
    }
    let exp = &mut out.0[layout::EXPRESSION];
    for w in exp.iter_mut() {
        *w = if w.is_finite() { w.clamp(0.0, 1.0) } else { 0.0 };
    }
    let sum: f64 = exp.iter().sum();
    if sum > 1.0 {
        for w in exp.iter_mut() {
            *w /= sum;
        }
        // guard against the rescaled sum landing a rounding step above one
        let resum: f64 = exp.iter().sum();
        if resum > 1.0 {
            let i = exp.iter().enumerate().fold(0, |best, (i, w)| if *w > exp[best] { i } else { best });
            exp[i] = (exp[i] - (resum - 1.0)).max(0.0);
        }
    }
    let q = out.quat();
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = if norm.is_finite() && norm > 1e-12 {
        let s = if q[0] < 0.0 { -1.0 / norm } else { 1.0 / norm };
        q.map(|c| c * s)
    } else {
        [1.0, 0.0, 0.0, 0.0]
    };
    out.0[layout::ROTATION].copy_from_slice(&q);
    for i in [layout::TX, layout::TY] {
        if !out.0[i].is_finite() {
            out.0[i] = 0.0;
        }
    }
    let f = out.0[layout::FOCAL];
    out.0[layout::FOCAL] = if f.is_finite() { f.max(MIN_FOCAL) } else { MIN_FOCAL };
    out.0[layout::TZ] = 0.0;
    out
}

/// Fitter settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Initial Levenberg-Marquardt damping.
    pub damping_init: f64,
    /// Squared step norm below which the fit stops.
    pub tol_step: f64,
    /// Absolute squared-residual level, and relative decrease, that count as converged.
    pub tol_residual: f64,
    pub w_id_bound: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            damping_init: 1e-3,
            tol_step: 1e-10,
            tol_residual: 1e-12,
            w_id_bound: 3.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        for (name, v) in [
            ("damping_init", self.damping_init),
            ("tol_step", self.tol_step),
            ("tol_residual", self.tol_residual),
            ("w_id_bound", self.w_id_bound),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FaceParams,
    /// Root mean squared landmark distance in pixels.
    pub final_rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared residuals after init and after every accepted step.
    #[serde(skip)]
    pub accepted_costs: Vec<f64>,
}

/// Interleaved `(x, y)` differences `projected - observed`, length 136.
pub fn residuals(tensor: &FaceTensor, params: &FaceParams, observed: &Landmarks2D) -> Vec<f64> {
    residuals_at(tensor, &ParamVector::from_params(params), observed)
}

/// Residuals at an arbitrary (possibly infeasible) parameter vector.
///
/// The rotation is that of `q / |q|`, so the map is smooth in the ambient
/// quaternion.
pub fn residuals_at(tensor: &FaceTensor, theta: &ParamVector, observed: &Landmarks2D) -> Vec<f64> {
    let w_full = full_expression(theta.slice(layout::EXPRESSION));
    let per_id = tensor.contract_expression(&w_full);
    let mesh = mesh_from_contracted(&per_id, theta.slice(layout::IDENTITY));
    let r = rotation_from_ambient(&theta.quat());
    let (tx, ty, f) = (theta.0[layout::TX], theta.0[layout::TY], theta.0[layout::FOCAL]);
    let mut out = Vec::with_capacity(NUM_RESIDUALS);
    for (x, obs) in mesh.iter().zip(observed.points()) {
        let y = rotate(&r, x);
        out.push(f * (y[0] + tx) - obs[0]);
        out.push(f * (y[1] + ty) - obs[1]);
    }
    out
}

/// Analytic 136 x 104 Jacobian of [`residuals`] in [`layout`] column order.
pub fn jacobian(tensor: &FaceTensor, params: &FaceParams) -> DMatrix<f64> {
    jacobian_at(tensor, &ParamVector::from_params(params))
}

pub fn jacobian_at(tensor: &FaceTensor, theta: &ParamVector) -> DMatrix<f64> {
    let w_id = theta.slice(layout::IDENTITY);
    let w_full = full_expression(theta.slice(layout::EXPRESSION));
    // per_id[row][i] = sum_j T w_full[j]; per_exp[row][j] = sum_i T w_id[i]
    let per_id = tensor.contract_expression(&w_full);
    let per_exp = tensor.contract_identity(w_id);
    let mesh = mesh_from_contracted(&per_id, w_id);
    let q = theta.quat();
    let r = rotation_from_ambient(&q);
    let dr = rotation_derivatives(&q);
    let (tx, ty, f) = (theta.0[layout::TX], theta.0[layout::TY], theta.0[layout::FOCAL]);

    let mut jac = DMatrix::zeros(NUM_RESIDUALS, NUM_PARAMS);
    for (p, x) in mesh.iter().enumerate() {
        let rx = rotate(&r, x);
        let t = [tx, ty];
        for c in 0..2 {
            let row = 2 * p + c;
            let rr = r[c];
            for i in 0..NUM_IDENTITY {
                let d: f64 = (0..3).map(|k| rr[k] * per_id[(3 * p + k) * NUM_IDENTITY + i]).sum();
                jac[(row, layout::IDENTITY.start + i)] = f * d;
            }
            for k in 0..NUM_FREE_EXPRESSION {
                let d: f64 = (0..3)
                    .map(|a| {
                        let base = (3 * p + a) * NUM_BLENDSHAPES;
                        rr[a] * (per_exp[base + k + 1] - per_exp[base])
                    })
                    .sum();
                jac[(row, layout::EXPRESSION.start + k)] = f * d;
            }
            for (m, dm) in dr.iter().enumerate() {
                let d: f64 = (0..3).map(|a| dm[c][a] * x[a]).sum();
                jac[(row, layout::ROTATION.start + m)] = f * d;
            }
            jac[(row, if c == 0 { layout::TX } else { layout::TY })] = f;
            jac[(row, layout::FOCAL)] = rx[c] + t[c];
        }
    }
    debug_assert_eq!(per_id.len(), MESH_ROWS * NUM_IDENTITY);
    jac
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn rmse_of(cost: f64) -> f64 {
    (cost / NUM_LANDMARKS as f64).sqrt()
}

/// Mean identity, neutral expression, no rotation, with focal and translation
/// chosen so the model's bounding box lands on the observed one.
pub fn default_init(tensor: &FaceTensor, observed: &Landmarks2D) -> FaceParams {
    let mut init = FaceParams::neutral(1.0);
    let model = crate::morphable_model::project_landmarks(tensor, &init);
    let (mx0, my0, mx1, my1) = model.bounds();
    let (ox0, _, ox1, _) = observed.bounds();
    let model_width = mx1 - mx0;
    let obs_width = ox1 - ox0;
    let f = if model_width > 0.0 && obs_width > 0.0 && obs_width.is_finite() {
        obs_width / model_width
    } else {
        1.0
    };
    let mc = [(mx0 + mx1) / 2.0, (my0 + my1) / 2.0];
    let oc = observed.centroid();
    let oc = if oc.iter().all(|v| v.is_finite()) { oc } else { [0.0, 0.0] };
    init.pose.focal = f;
    init.pose.translation = [oc[0] / f - mc[0], oc[1] / f - mc[1], 0.0];
    init
}

/// Projected Levenberg-Marquardt fit of all face parameters to `observed`.
pub fn fit_params(
    tensor: &FaceTensor,
    observed: &Landmarks2D,
    init: &FaceParams,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    init.validate()?;

    let mut theta = project_feasible(&ParamVector::from_params(init), cfg.w_id_bound);
    let mut r = residuals_at(tensor, &theta, observed);
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(Error::invalid("non-finite residual at initial parameters"));
    }

    let mut accepted_costs = vec![cost];
    let mut lambda = cfg.damping_init;
    let mut iterations = 0;
    let mut converged = cost <= cfg.tol_residual;

    let mut normal = NormalEquations::build(tensor, &theta, &r);
    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let Some(step) = constrained_step(&normal, &theta, lambda, cfg.w_id_bound) else {
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                break;
            }
            continue;
        };

        let trial = take_step(&theta, &step, cfg.w_id_bound);
        let (a, b) = (to_chart(&trial), to_chart(&theta));
        let step_sq: f64 = a.0.iter().zip(&b.0).map(|(a, b)| (a - b) * (a - b)).sum();
        let small_step = step_sq <= cfg.tol_step;

        let trial_r = residuals_at(tensor, &trial, observed);
        let trial_cost = cost_of(&trial_r);
        if trial_cost.is_finite() && trial_cost < cost {
            let decrease = cost - trial_cost;
            let prev = cost;
            theta = trial;
            r = trial_r;
            cost = trial_cost;
            accepted_costs.push(cost);
            lambda = (lambda / 10.0).max(1e-15);
            if cost <= cfg.tol_residual || decrease <= cfg.tol_residual * prev || small_step {
                converged = true;
            } else {
                normal = NormalEquations::build(tensor, &theta, &r);
            }
        } else {
            if small_step {
                converged = true;
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                break;
            }
        }
    }

    Ok(FitResult {
        params: theta.to_params(cfg.w_id_bound),
        final_rmse: rmse_of(cost),
        iterations,
        converged,
        accepted_costs,
    })
}

/// Steps are taken with the translation held as the pixel offset `f * t`.
/// In that chart no Jacobian column depends on the offset, so shifting the
/// observation and the init together yields the same iterates.
fn to_chart(theta: &ParamVector) -> ParamVector {
    let mut out = *theta;
    let f = theta.0[layout::FOCAL];
    out.0[layout::TX] *= f;
    out.0[layout::TY] *= f;
    out
}

/// Applies a chart step and maps back onto the feasible set.
fn take_step(theta: &ParamVector, step: &[f64], w_id_bound: f64) -> ParamVector {
    let mut chart = to_chart(theta);
    for (v, s) in chart.0.iter_mut().zip(step) {
        *v += s;
    }
    let mut out = project_feasible(&chart, w_id_bound);
    let f = out.0[layout::FOCAL];
    out.0[layout::TX] /= f;
    out.0[layout::TY] /= f;
    out
}

/// Lower and upper bound of every box-constrained coordinate.
fn bounds_of(i: usize, w_id_bound: f64) -> Option<(f64, f64)> {
    if layout::IDENTITY.contains(&i) {
        Some((-w_id_bound, w_id_bound))
    } else if layout::EXPRESSION.contains(&i) {
        Some((0.0, 1.0))
    } else {
        None
    }
}

/// Damped step in which every bounded coordinate the step would push through
/// its bound lands exactly on it instead; the remaining coordinates are
/// re-solved around those moves. Coordinates already on a bound and pushed
/// outward do not move.
fn constrained_step(normal: &NormalEquations, theta: &ParamVector, lambda: f64, w_id_bound: f64) -> Option<Vec<f64>> {
    let mut fixed: Vec<Option<f64>> = vec![None; ACTIVE];
    for (i, slot) in fixed.iter_mut().enumerate() {
        if let Some((lo, hi)) = bounds_of(i, w_id_bound) {
            let (w, g) = (theta.0[i], normal.gradient[i]);
            if (w <= lo && g > 0.0) || (w >= hi && g < 0.0) {
                *slot = Some(0.0);
            }
        }
    }
    for _ in 0..ACTIVE {
        let step = normal.solve(lambda, &fixed)?;
        let mut changed = false;
        for i in 0..ACTIVE {
            if fixed[i].is_some() {
                continue;
            }
            if let Some((lo, hi)) = bounds_of(i, w_id_bound) {
                let next = theta.0[i] + step[i];
                if next < lo {
                    fixed[i] = Some(lo - theta.0[i]);
                    changed = true;
                } else if next > hi {
                    fixed[i] = Some(hi - theta.0[i]);
                    changed = true;
                }
            }
        }
        if !changed {
            return Some(step);
        }
    }
    None
}

/// `JᵀJ` and `Jᵀr` over the optimized columns, plus the damping scale.
struct NormalEquations {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    scale: Vec<f64>,
}

impl NormalEquations {
    fn build(tensor: &FaceTensor, theta: &ParamVector, r: &[f64]) -> Self {
        let mut jac = jacobian_at(tensor, theta).columns(0, ACTIVE).into_owned();
        // move the translation and focal columns into the pixel-offset chart
        let (tx, ty, f) = (theta.0[layout::TX], theta.0[layout::TY], theta.0[layout::FOCAL]);
        for row in 0..NUM_RESIDUALS {
            let (jx, jy) = (jac[(row, layout::TX)], jac[(row, layout::TY)]);
            jac[(row, layout::FOCAL)] -= (jx * tx + jy * ty) / f;
            jac[(row, layout::TX)] = jx / f;
            jac[(row, layout::TY)] = jy / f;
        }
        let rv = DVector::from_column_slice(r);
        let hessian = jac.tr_mul(&jac);
        let gradient = jac.tr_mul(&rv);

        let mut scale: Vec<f64> = (0..ACTIVE).map(|i| hessian[(i, i)]).collect();
        for block in [layout::ROTATION, layout::TX..layout::TY + 1] {
            let mean = scale[block.clone()].iter().sum::<f64>() / block.len() as f64;
            scale[block].iter_mut().for_each(|s| *s = mean);
        }
        let floor = scale.iter().cloned().fold(0.0, f64::max) * 1e-12;
        for s in &mut scale {
            *s = s.max(floor).max(1e-300);
        }
        Self {
            hessian,
            gradient,
            scale,
        }
    }

    /// Damped step with the `fixed` coordinates set to the given values.
    fn solve(&self, lambda: f64, fixed: &[Option<f64>]) -> Option<Vec<f64>> {
        let mut a = self.hessian.clone();
        let mut rhs = -&self.gradient;
        for (i, s) in self.scale.iter().enumerate() {
            a[(i, i)] += lambda * s;
        }
        for (i, v) in fixed.iter().enumerate() {
            let Some(v) = *v else { continue };
            for row in 0..ACTIVE {
                rhs[row] -= a[(row, i)] * v;
            }
            a.row_mut(i).fill(0.0);
            a.column_mut(i).fill(0.0);
            a[(i, i)] = 1.0;
            rhs[i] = v;
        }
        let chol = a.cholesky()?;
        let step = chol.solve(&rhs);
        if step.iter().all(|v| v.is_finite()) {
            Some(step.iter().copied().collect())
        } else {
            None
        }
    }
}

//! Seeded generators and brute-force reference implementations shared by the
//! integration and acceptance tests. The references deliberately avoid the
//! library's own helpers.
#![allow(dead_code)]

use facegrid::detection_eval::EvalBox;
use facegrid::fitting::{ParamVector, NUM_PARAMS};
use facegrid::grid_codec::{CodecConfig, GridGroundTruth, GridTensor, NUM_ANCHORS, NUM_CELLS};
use facegrid::loss::FaceSample;
use facegrid::morphable_model::{
    ExpressionWeights, FaceParams, FaceTensor, IdentityWeights, Landmarks2D, Pose, Quaternion,
};
use facegrid::scene::random_face_params;
use rand::Rng;

pub const FACES: usize = 68;

// ---------------------------------------------------------------- generators

/// Pixel-frame face with a random shape, pose, focal in [40, 120] and center
/// in [60, 240] px.
pub fn random_pixel_params<R: Rng>(rng: &mut R) -> FaceParams {
    let mut p = random_face_params(rng);
    let f = rng.random_range(40.0..120.0);
    let c = [rng.random_range(60.0..240.0), rng.random_range(60.0..240.0)];
    p.pose.focal = f;
    p.pose.translation = [c[0] / f, c[1] / f, 0.0];
    p
}

pub fn random_quaternion<R: Rng>(rng: &mut R) -> Quaternion {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if (0.01..=1.0).contains(&n2) {
            return Quaternion::from_array(q).unwrap();
        }
    }
}

/// Random expression weights with `Σ <= 1`, occasionally containing exact
/// zeros.
pub fn random_expression<R: Rng>(rng: &mut R) -> ExpressionWeights {
    let budget = rng.random_range(0.0..1.0);
    let raw: Vec<f64> = (0..46)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    let sum: f64 = raw.iter().sum::<f64>().max(1e-12);
    ExpressionWeights::new(raw.iter().map(|w| w * budget / sum).collect()).unwrap()
}

pub fn random_identity<R: Rng>(rng: &mut R, amplitude: f64) -> IdentityWeights {
    IdentityWeights::new((0..50).map(|_| rng.random_range(-amplitude..amplitude)).collect()).unwrap()
}

/// Rotation of up to `max_deg` degrees about a random axis.
pub fn small_rotation<R: Rng>(rng: &mut R, max_deg: f64) -> Quaternion {
    let axis: [f64; 3] = loop {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if a.iter().map(|v| v * v).sum::<f64>() > 1e-3 {
            break a;
        }
    };
    Quaternion::from_axis_angle(axis, rng.random_range(-max_deg..max_deg).to_radians()).unwrap()
}

/// The perturbation used by the round-trip criteria: rotation within 10°,
/// weights within ±0.1 (projected back onto their constraints), focal ×1.2.
pub fn perturbed_init<R: Rng>(rng: &mut R, truth: &FaceParams) -> FaceParams {
    let mut v = ParamVector::from_params(truth).0;
    for w in &mut v[0..96] {
        *w += rng.random_range(-0.1..0.1);
    }
    let q = small_rotation(rng, 10.0).mul(&truth.pose.rotation).as_array();
    v[96..100].copy_from_slice(&q);
    v[102] *= 1.2;
    ParamVector(v).to_params(3.0)
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> EvalBox {
    let x0 = rng.random_range(0.0..extent);
    let y0 = rng.random_range(0.0..extent);
    let w = rng.random_range(1.0..extent / 3.0);
    let h = rng.random_range(1.0..extent / 3.0);
    EvalBox::new(x0, y0, x0 + w, y0 + h, rng.random_range(0.0..1.0)).unwrap()
}

// ------------------------------------------------------------ model oracles

/// Rotation matrix via Rodrigues' formula on the quaternion's axis and angle.
pub fn rodrigues(q: &Quaternion) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q.as_array();
    let s = (x * x + y * y + z * z).sqrt();
    if s < 1e-300 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let theta = 2.0 * s.atan2(w);
    let k = [x / s, y / s, z / s];
    let (c, sn) = (theta.cos(), theta.sin());
    let cross = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            r[i][j] = eye * c + sn * cross[i][j] + (1.0 - c) * k[i] * k[j];
        }
    }
    r
}

/// Projection by explicit summation over every tensor entry.
pub fn naive_project(tensor: &FaceTensor, p: &FaceParams) -> Vec<[f64; 2]> {
    let w_id = p.identity.as_slice();
    let free = p.expression.free();
    let mut w_full = vec![1.0 - free.iter().sum::<f64>()];
    w_full.extend_from_slice(free);
    let r = rodrigues(&p.pose.rotation);
    let mut out = Vec::with_capacity(FACES);
    for v in 0..FACES {
        let mut x = [0.0; 3];
        for (axis, xa) in x.iter_mut().enumerate() {
            let row = 3 * v + axis;
            for (i, wi) in w_id.iter().enumerate() {
                for (j, wj) in w_full.iter().enumerate() {
                    *xa += tensor.get(row, i, j) * wi * wj;
                }
            }
        }
        let mut pt = [0.0; 2];
        for a in 0..2 {
            let rx: f64 = (0..3).map(|c| r[a][c] * x[c]).sum();
            pt[a] = p.pose.focal * (rx + p.pose.translation[a]);
        }
        out.push(pt);
    }
    out
}

pub fn naive_residuals(tensor: &FaceTensor, p: &FaceParams, observed: &Landmarks2D) -> Vec<f64> {
    let proj = naive_project(tensor, p);
    let mut r = Vec::with_capacity(2 * FACES);
    for (a, b) in proj.iter().zip(observed.points()) {
        r.push(a[0] - b[0]);
        r.push(a[1] - b[1]);
    }
    r
}

pub fn max_point_gap(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs()))
        .fold(0.0, f64::max)
}

/// Central finite differences of a residual function, one column per
/// parameter.
pub fn fd_jacobian(f: impl Fn(&[f64; NUM_PARAMS]) -> Vec<f64>, theta: &[f64; NUM_PARAMS]) -> Vec<Vec<f64>> {
    (0..NUM_PARAMS)
        .map(|k| {
            let h = 1e-6 * theta[k].abs().max(1.0);
            let mut plus = *theta;
            let mut minus = *theta;
            plus[k] += h;
            minus[k] -= h;
            let (rp, rm) = (f(&plus), f(&minus));
            rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

// ---------------------------------------------------------- metric oracles

/// IoU by counting cell midpoints of an `n` x `n` raster over both boxes.
pub fn raster_iou(a: &EvalBox, b: &EvalBox, n: usize) -> f64 {
    let x0 = a.x0.min(b.x0);
    let y0 = a.y0.min(b.y0);
    let dx = (a.x1.max(b.x1) - x0) / n as f64;
    let dy = (a.y1.max(b.y1) - y0) / n as f64;
    let inside = |bx: &EvalBox, x: f64, y: f64| bx.x0 <= x && x < bx.x1 && bx.y0 <= y && y < bx.y1;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        let x = x0 + (i as f64 + 0.5) * dx;
        for j in 0..n {
            let y = y0 + (j as f64 + 0.5) * dy;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

pub fn plain_iou(a: &EvalBox, b: &EvalBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let area = |e: &EvalBox| (e.x1 - e.x0) * (e.y1 - e.y0);
    inter / (area(a) + area(b) - inter)
}

/// Stable descending-score order by selection.
fn ranked(boxes: &[EvalBox]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..boxes.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if boxes[left[k]].score > boxes[left[best]].score {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Full pairwise IoU table, then a sweep that suppresses everything a kept
/// box overlaps beyond the threshold.
pub fn nms_reference(boxes: &[EvalBox], threshold: f64) -> Vec<EvalBox> {
    let order = ranked(boxes);
    let n = order.len();
    let table: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| order.iter().map(|&j| plain_iou(&boxes[i], &boxes[j])).collect())
        .collect();
    let mut suppressed = vec![false; n];
    let mut kept = Vec::new();
    for a in 0..n {
        if suppressed[a] {
            continue;
        }
        kept.push(boxes[order[a]]);
        for b in a + 1..n {
            if table[a][b] > threshold {
                suppressed[b] = true;
            }
        }
    }
    kept
}

/// AP from first principles: greedy matching in rank order, then for each of
/// the 101 recall levels the best precision at any rank reaching it.
pub fn ap_reference(preds: &[EvalBox], gts: &[EvalBox], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut taken = vec![false; gts.len()];
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for i in ranked(preds) {
        let mut best: Option<usize> = None;
        for j in 0..gts.len() {
            let o = plain_iou(&preds[i], &gts[j]);
            if !taken[j] && o >= threshold && best.is_none_or(|b| o > plain_iou(&preds[i], &gts[b])) {
                best = Some(j);
            }
        }
        seen += 1;
        if let Some(j) = best {
            taken[j] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / seen as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        total += points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    total / 101.0
}

/// CED AUC by midpoint sampling of the empirical CDF.
pub fn ced_reference(errors: &[f64], cutoff: f64, samples: usize) -> f64 {
    let n = errors.len() as f64;
    let dx = cutoff / samples as f64;
    let mut sum = 0.0;
    for k in 0..samples {
        let x = (k as f64 + 0.5) * dx;
        sum += errors.iter().filter(|&&e| e <= x).count() as f64 / n;
    }
    sum / samples as f64
}

pub fn nme_reference(pred: &Landmarks2D, gt: &Landmarks2D, bbox: &EvalBox) -> f64 {
    let mut total = 0.0;
    for k in 0..FACES {
        let a = pred.points()[k];
        let b = gt.points()[k];
        total += ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt();
    }
    total / FACES as f64 / ((bbox.x1 - bbox.x0) * (bbox.y1 - bbox.y0)).sqrt()
}

// ------------------------------------------------------------ loss oracles

/// `(id, exp, rot, squared landmark distance sum)` with explicit loops.
fn loss_terms(p: &FaceParams, pl: &[[f64; 2]], g: &FaceParams, gl: &[[f64; 2]]) -> [f64; 4] {
    let mut id = 0.0;
    for i in 0..50 {
        id += (p.identity.as_slice()[i] - g.identity.as_slice()[i]).abs();
    }
    let mut exp = 0.0;
    for i in 0..46 {
        exp += (p.expression.free()[i] - g.expression.free()[i]).abs();
    }
    let canon = |q: [f64; 4]| if q[0] < 0.0 { q.map(|c| -c) } else { q };
    let (qa, qb) = (canon(p.pose.rotation.as_array()), canon(g.pose.rotation.as_array()));
    let mut rot = 0.0;
    for i in 0..4 {
        rot += (qa[i] - qb[i]).abs();
    }
    let mut sq = 0.0;
    for k in 0..FACES {
        let dx = pl[k][0] - gl[k][0];
        let dy = pl[k][1] - gl[k][1];
        sq += dx * dx + dy * dy;
    }
    [id / 50.0, exp / 46.0, rot / 4.0, sq]
}

/// Total single-face loss at `epoch`.
pub fn sfn_reference(pred: &FaceSample, gt: &FaceSample, epoch: u32) -> f64 {
    let t = loss_terms(&pred.params, pred.landmarks.points(), &gt.params, gt.landmarks.points());
    10.0 / epoch as f64 * (t[0] + t[1] + t[2]) + (t[3] / FACES as f64).sqrt()
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Decodes one raw slot into `(params, pixel landmarks)` without the codec.
pub fn decode_reference(
    tensor: &FaceTensor,
    cfg: &CodecConfig,
    raw: &[f64],
    col: usize,
    row: usize,
    anchor: usize,
) -> (FaceParams, Vec<[f64; 2]>) {
    let bx = logistic(raw[0]) + col as f64;
    let by = logistic(raw[1]) + row as f64;
    let bw = cfg.priors[anchor].p_w * raw[2].exp();
    let bh = cfg.priors[anchor].p_h * raw[3].exp();
    let mut w_free: Vec<f64> = raw[55..101].iter().map(|&t| logistic(t)).collect();
    let s: f64 = w_free.iter().sum();
    if s > 1.0 {
        for w in &mut w_free {
            *w /= s;
        }
    }
    let (f0, f1) = cfg.focal_range;
    let q = [raw[101], raw[102], raw[103], raw[104]];
    let params = FaceParams {
        identity: IdentityWeights::new(raw[5..55].to_vec()).unwrap(),
        expression: ExpressionWeights::new(w_free).unwrap(),
        pose: Pose {
            rotation: Quaternion::from_array(q).unwrap(),
            translation: [raw[105], raw[106], 0.0],
            focal: f0 + (f1 - f0) * logistic(raw[108]),
        },
    };
    let cell = cfg.image_size / 9.0;
    let lm = naive_project(tensor, &params)
        .into_iter()
        .map(|p| [(bx + bw * p[0]) * cell, (by + bh * p[1]) * cell])
        .collect();
    (params, lm)
}

/// Grid loss components `[total, box_sse, objectness_sse]` from a scan over
/// all 405 slots.
#[allow(clippy::needless_range_loop)]
pub fn grid_loss_reference(
    tensor: &FaceTensor,
    cfg: &CodecConfig,
    pred: &GridTensor,
    gt: &GridGroundTruth,
    epoch: u32,
) -> [f64; 3] {
    let (mut params_sum, mut sq, mut box_sse, mut obj_sse) = (0.0, 0.0, 0.0, 0.0);
    for cell in 0..NUM_CELLS {
        let (col, row) = (cell % 9, cell / 9);
        for k in 0..NUM_ANCHORS {
            let raw = pred.slot(cell, k);
            let target = match gt.entry(cell, k) {
                Some(e) => e,
                None => {
                    obj_sse += logistic(raw[4]).powi(2);
                    continue;
                }
            };
            obj_sse += (logistic(raw[4]) - 1.0).powi(2);
            let (p, pl) = decode_reference(tensor, cfg, raw, col, row, k);
            let (g, gl) = decode_reference(tensor, cfg, &target.raw, col, row, k);
            let t = loss_terms(&p, &pl, &g, &gl);
            params_sum += t[0] + t[1] + t[2];
            sq += t[3];
            for c in 0..2 {
                box_sse += (logistic(raw[c]) - logistic(target.raw[c])).powi(2);
            }
            for c in 2..4 {
                box_sse += (raw[c] - target.raw[c]).powi(2);
            }
        }
    }
    let total = 10.0 / epoch as f64 * params_sum + (sq / FACES as f64).sqrt();
    [total, box_sse, obj_sse]
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

//! Landmark and expression accuracy metrics.

use crate::detection_eval::EvalBox;
use crate::error::{Error, Result};
use crate::morphable_model::{ExpressionWeights, Landmarks2D, NUM_FREE_EXPRESSION};

/// Default CED integration limit.
pub const DEFAULT_CED_CUTOFF: f64 = 0.08;

fn mean_point_distance(pred: &Landmarks2D, gt: &Landmarks2D) -> f64 {
    let n = pred.points().len() as f64;
    pred.points()
        .iter()
        .zip(gt.points())
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n
}

/// Mean landmark distance over `sqrt(w * h)` of the box, as a fraction.
pub fn nme(pred: &Landmarks2D, gt: &Landmarks2D, bbox: &EvalBox) -> Result<f64> {
    bbox.validate()?;
    Ok(mean_point_distance(pred, gt) / bbox.area().sqrt())
}

/// Mean landmark distance over the box diagonal, the usual CED input.
pub fn nme_diagonal(pred: &Landmarks2D, gt: &Landmarks2D, bbox: &EvalBox) -> Result<f64> {
    bbox.validate()?;
    Ok(mean_point_distance(pred, gt) / bbox.width().hypot(bbox.height()))
}

/// Area under the cumulative error distribution on `[0, cutoff]`, divided by
/// `cutoff`.
///
/// The curve is the empirical fraction of errors `<= x`. It is piecewise
/// constant, so the trapezoid rule over its breakpoints is exact.
pub fn ced_auc(errors: &[f64], cutoff: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("CED needs at least one error"));
    }
    if !(cutoff.is_finite() && cutoff > 0.0) {
        return Err(Error::invalid(format!("CED cutoff must be positive, got {cutoff}")));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::invalid("CED errors must not be NaN"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;

    // breakpoints (x, F(x)) with a vertical segment at each jump
    let mut area = 0.0;
    let mut x_prev = 0.0;
    let mut f_prev = sorted.iter().filter(|&&e| e <= 0.0).count() as f64 / n;
    for (i, &e) in sorted.iter().enumerate() {
        if e <= 0.0 {
            continue;
        }
        let x = e.min(cutoff);
        area += f_prev * (x - x_prev);
        x_prev = x;
        if e >= cutoff {
            break;
        }
        f_prev = (i + 1) as f64 / n;
    }
    if x_prev < cutoff {
        area += f_prev * (cutoff - x_prev);
    }
    Ok((area / cutoff).clamp(0.0, 1.0))
}

/// Mean of `|1 - w|` over the active blendshapes (1-based indices into the
/// 46 free coefficients).
pub fn expression_metric(pred: &ExpressionWeights, active_indices: &[usize]) -> Result<f64> {
    if active_indices.is_empty() {
        return Err(Error::invalid("expression metric needs at least one active index"));
    }
    let w = pred.free();
    let mut sum = 0.0;
    for &i in active_indices {
        if !(1..=NUM_FREE_EXPRESSION).contains(&i) {
            return Err(Error::invalid(format!("blendshape index {i} outside 1..=46")));
        }
        sum += (1.0 - w[i - 1]).abs();
    }
    Ok(sum / active_indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_landmarks() -> Landmarks2D {
        Landmarks2D::new((0..68).map(|i| [(i % 10) as f64 * 3.0, (i / 10) as f64 * 4.0]).collect())
            .unwrap()
    }

    #[test]
    fn nme_cases() {
        let gt = grid_landmarks();
        let bbox = EvalBox::new(0.0, 0.0, 100.0, 100.0, 1.0).unwrap();
        assert_eq!(nme(&gt, &gt, &bbox).unwrap(), 0.0);
        let shifted = gt.map(|p| [p[0] + 3.0, p[1] + 4.0]);
        assert!((nme(&shifted, &gt, &bbox).unwrap() - 0.05).abs() < 1e-12);
        let bad = EvalBox { x1: 0.0, ..bbox };
        assert!(nme(&gt, &gt, &bad).is_err());
    }

    #[test]
    fn ced_extremes() {
        assert_eq!(ced_auc(&[0.0, 0.0, 0.0], 0.08).unwrap(), 1.0);
        assert_eq!(ced_auc(&[0.1, 0.2], 0.08).unwrap(), 0.0);
        assert!(ced_auc(&[], 0.08).is_err());
        assert!(ced_auc(&[0.1], 0.0).is_err());
    }

    #[test]
    fn ced_step_integral() {
        // F = 0 on [0, .02), 1/3 on [.02, .04), 2/3 on [.04, .06), 1 after
        let auc = ced_auc(&[0.02, 0.04, 0.06], 0.08).unwrap();
        let expected = (0.02 / 3.0 + 0.02 * 2.0 / 3.0 + 0.02) / 0.08;
        assert!((auc - expected).abs() < 1e-15);
    }

    #[test]
    fn expression_metric_cases() {
        let mut w = vec![0.0; 46];
        w[4] = 0.6;
        let e = ExpressionWeights::new(w).unwrap();
        assert!((expression_metric(&e, &[5]).unwrap() - 0.4).abs() < 1e-15);
        assert!(expression_metric(&e, &[]).is_err());
        assert!(expression_metric(&e, &[0]).is_err());
        assert!(expression_metric(&e, &[47]).is_err());

        let mut w = vec![0.0; 46];
        w[0] = 1.0;
        let one = ExpressionWeights::new(w).unwrap();
        assert_eq!(expression_metric(&one, &[1]).unwrap(), 0.0);
    }
}

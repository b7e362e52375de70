use crate::error::{Error, Result};

fn check(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<usize> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::Shape(format!(
            "metric inputs differ in size: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    match mask.iter().filter(|m| **m).count() {
        0 => Err(Error::InvalidArgument("empty validity mask".into())),
        n => Ok(n),
    }
}

/// Mean absolute disparity error over valid pixels. A prediction offset by
/// a constant `c` everywhere scores `|c|`.
pub fn epe(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let n = check(pred, gt, mask)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, g), _)| (p - g).abs())
        .sum();
    Ok(total / n as f64)
}

/// Percentage of valid pixels whose error exceeds `threshold` pixels. A
/// constant offset scores 100 when it exceeds the threshold and 0 otherwise.
pub fn bad_n(pred: &[f64], gt: &[f64], mask: &[bool], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad-pixel threshold must be positive, got {threshold}"
        )));
    }
    let n = check(pred, gt, mask)?;
    let bad = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|((p, g), m)| **m && (*p - *g).abs() > threshold)
        .count();
    Ok(100.0 * bad as f64 / n as f64)
}

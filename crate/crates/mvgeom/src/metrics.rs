//! Desk-scale evaluation: relative-rotation camera pose accuracy and
//! reprojection-based multi-view consistency.

use crate::error::{MvError, Result};
use crate::grid::FeatureGrid;
use nalgebra::Matrix3;

const ROTATION_TOL: f64 = 1e-9;

/// Generated rotations paired with externally estimated ones; estimates may
/// be missing per frame, or the whole reconstruction may have failed.
#[derive(Debug, Clone)]
pub struct PoseSequencePair {
    pub generated: Vec<Matrix3<f64>>,
    pub estimated: Vec<Option<Matrix3<f64>>>,
    pub reconstruction_failed: bool,
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > ROTATION_TOL {
        return Err(MvError::domain(format!("matrix is not a rotation (|R'R - I| = {dev:.3e})")));
    }
    if (r.determinant() - 1.0).abs() > ROTATION_TOL {
        return Err(MvError::domain("matrix determinant != +1".to_string()));
    }
    Ok(())
}

/// Angle of the relative rotation between two rotation matrices:
/// `acos((tr(Ra Rb^T) - 1) / 2)`, with the trace argument clamped to [-1, 1]
/// against floating-point drift.
pub fn rotation_angle(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> Result<f64> {
    check_rotation(ra)?;
    check_rotation(rb)?;
    let arg = ((ra * rb.transpose()).trace() - 1.0) / 2.0;
    Ok(arg.clamp(-1.0, 1.0).acos())
}

/// Mean per-frame accuracy `a_j = 1 - theta_j / pi`. Frames whose estimate is
/// missing score 0; a failed reconstruction scores 0 outright.
pub fn camera_pose_accuracy(pair: &PoseSequencePair) -> Result<f64> {
    if pair.reconstruction_failed {
        return Ok(0.0);
    }
    if pair.generated.len() != pair.estimated.len() {
        return Err(MvError::domain(format!(
            "{} generated rotations but {} estimates",
            pair.generated.len(),
            pair.estimated.len()
        )));
    }
    if pair.generated.is_empty() {
        return Err(MvError::domain("pose sequence is empty".to_string()));
    }
    let mut total = 0.0;
    for (gen, est) in pair.generated.iter().zip(&pair.estimated) {
        if let Some(est) = est {
            let theta = rotation_angle(est, gen)?;
            total += 1.0 - theta / std::f64::consts::PI;
        }
    }
    Ok(total / pair.generated.len() as f64)
}

/// Outcome of the masked reprojection error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskedError {
    Mse(f64),
    /// The mask selected no cells.
    NotApplicable,
}

/// Mean squared error over mask=1 cells between rendered frames and their
/// ground-truth counterparts. Masks are C=1 and broadcast across channels.
pub fn masked_reprojection_error(
    frames: &[FeatureGrid],
    ground_truth: &[FeatureGrid],
    masks: &[FeatureGrid],
) -> Result<MaskedError> {
    if frames.len() != ground_truth.len() || frames.len() != masks.len() {
        return Err(MvError::domain(format!(
            "frame count mismatch: {} frames, {} references, {} masks",
            frames.len(),
            ground_truth.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((frame, gt), mask) in frames.iter().zip(ground_truth).zip(masks) {
        if !frame.same_shape(gt) {
            return Err(MvError::domain("frame and reference dimensions differ".to_string()));
        }
        if mask.channels() != 1
            || mask.height() != frame.height()
            || mask.width() != frame.width()
        {
            return Err(MvError::domain("mask must be C=1 at frame resolution".to_string()));
        }
        for r in 0..frame.height() {
            for c in 0..frame.width() {
                if mask.get(r, c, 0) == 0.0 {
                    continue;
                }
                for ch in 0..frame.channels() {
                    let d = frame.get(r, c, ch) - gt.get(r, c, ch);
                    total += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        Ok(MaskedError::NotApplicable)
    } else {
        Ok(MaskedError::Mse(total / count as f64))
    }
}

//! Pinhole camera model, rigid poses, projection and unprojection.
//!
//! Extrinsics use the **camera-to-world** convention throughout: a point
//! `p_cam` in camera coordinates maps to world coordinates as
//! `p_world = R * p_cam + T`. Many codebases use the inverse (world-to-camera)
//! convention; every geometric operation in this crate assumes camera-to-world.
//!
//! The camera frame is x-right, y-down, z-forward. Pixel centers sit at
//! integer coordinates, `(u, v) in {0..W-1} x {0..H-1}`.

use crate::error::{MvError, Result};
use nalgebra::{Matrix3, Vector3};
use std::fmt::Write as _;
use std::path::Path;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Focal lengths, principal point and image size, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(MvError::domain(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(MvError::domain(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }
}

/// Rigid camera-to-world transform: `p_world = rotation * p_cam + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        validate_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera-space -> world-space.
    pub fn transform(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// World-space -> camera-space.
    pub fn inverse_transform(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// `self` after `other`: maps `other`'s camera frame through `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose { rotation: rt, translation: -(rt * self.translation) }
    }
}

fn validate_rotation(r: &Matrix3<f64>) -> Result<()> {
    let gram = r.transpose() * r;
    let dev = (gram - Matrix3::identity()).abs().max();
    if dev > ORTHONORMAL_TOL {
        return Err(MvError::domain(format!(
            "rotation is not orthonormal (max |R'R - I| = {dev:.3e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(MvError::domain(format!("rotation determinant {det} != +1")));
    }
    Ok(())
}

/// A full camera: intrinsics plus a camera-to-world rigid pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub pose: RigidPose,
}

impl CameraPose {
    pub fn new(intrinsics: Intrinsics, pose: RigidPose) -> Self {
        Self { intrinsics, pose }
    }

    /// Lift pixel `(u, v)` at camera depth `depth` to a world-space point:
    /// `R * (depth * K^-1 [u, v, 1]^T) + T`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(MvError::domain(format!("unproject requires depth > 0, got {depth}")));
        }
        let k = &self.intrinsics;
        if !(0.0..=(k.width as f64 - 1.0)).contains(&u)
            || !(0.0..=(k.height as f64 - 1.0)).contains(&v)
        {
            return Err(MvError::domain(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                k.width, k.height
            )));
        }
        Ok(self.pose.transform(&self.ray_point(u, v, depth)))
    }

    /// Camera-space point on the ray through pixel `(u, v)` at depth `depth`.
    /// No bounds check; used for ray generation.
    pub fn ray_point(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new(depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth)
    }

    /// Unit-free ray direction in world space for pixel `(u, v)`; the
    /// camera-space z component is 1, so the ray parameter equals camera depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = self.ray_point(u, v, 1.0);
        (*self.pose.translation(), self.pose.rotation() * dir_cam)
    }

    /// Project a world point; returns `(u, v, z)` with `z` the camera depth,
    /// or `None` when the point is at or behind the camera plane (caller must
    /// cull).
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let q = self.pose.inverse_transform(p);
        if q.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = k.fx * q.x / q.z + k.cx;
        let v = k.fy * q.y / q.z + k.cy;
        Some((u, v, q.z))
    }
}

/// Reads a trajectory file: one camera per line,
/// `fx fy cx cy w h r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2`,
/// whitespace-separated decimal text. Lines whose first token is `missing`
/// are returned as `None` (used by pose-evaluation inputs); `#` lines and
/// blank lines are skipped.
pub fn read_trajectory_with_missing(path: &Path) -> Result<Vec<Option<CameraPose>>> {
    let text = std::fs::read_to_string(path)?;
    parse_trajectory(&text)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<CameraPose>> {
    read_trajectory_with_missing(path)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.ok_or_else(|| MvError::format(format!("camera {i} marked missing in trajectory")))
        })
        .collect()
}

pub fn parse_trajectory(text: &str) -> Result<Vec<Option<CameraPose>>> {
    let mut cams = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks[0] == "missing" {
            cams.push(None);
            continue;
        }
        if toks.len() != 18 {
            return Err(MvError::format(format!(
                "trajectory line {}: expected 18 fields, got {}",
                lineno + 1,
                toks.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            toks[i].parse::<f64>().map_err(|e| {
                MvError::format(format!("trajectory line {}: field {i}: {e}", lineno + 1))
            })
        };
        let (fx, fy, cx, cy) = (num(0)?, num(1)?, num(2)?, num(3)?);
        let (w, h) = (num(4)? as u32, num(5)? as u32);
        let r = Matrix3::new(
            num(6)?,
            num(7)?,
            num(8)?,
            num(9)?,
            num(10)?,
            num(11)?,
            num(12)?,
            num(13)?,
            num(14)?,
        );
        let t = Vector3::new(num(15)?, num(16)?, num(17)?);
        let intr = Intrinsics::new(fx, fy, cx, cy, w, h)?;
        cams.push(Some(CameraPose::new(intr, RigidPose::new(r, t)?)));
    }
    Ok(cams)
}

pub fn format_trajectory(cams: &[CameraPose]) -> String {
    let mut out = String::new();
    for cam in cams {
        let k = &cam.intrinsics;
        let r = cam.pose.rotation();
        let t = cam.pose.translation();
        let _ = write!(out, "{} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(out, " {}", r[(i, j)]);
            }
        }
        let _ = writeln!(out, " {} {} {}", t.x, t.y, t.z);
    }
    out
}

pub fn write_trajectory(cams: &[CameraPose], path: &Path) -> Result<()> {
    std::fs::write(path, format_trajectory(cams))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam_identity() -> CameraPose {
        CameraPose::new(Intrinsics::centered(32.0, 32, 32).unwrap(), RigidPose::identity())
    }

    #[test]
    fn unproject_principal_ray() {
        let cam = cam_identity();
        let k = cam.intrinsics;
        let p = cam.unproject(k.cx, k.cy, 1.0).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn unproject_translation_offset() {
        let pose = RigidPose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let cam = CameraPose::new(Intrinsics::centered(32.0, 32, 32).unwrap(), pose);
        let k = cam.intrinsics;
        let p = cam.unproject(k.cx, k.cy, 1.0).unwrap();
        assert!((p - Vector3::new(1.0, 2.0, 4.0)).norm() < 1e-15);
    }

    #[test]
    fn unproject_rejects_nonpositive_depth() {
        let cam = cam_identity();
        assert!(cam.unproject(3.0, 3.0, 0.0).is_err());
        assert!(cam.unproject(3.0, 3.0, -1.0).is_err());
    }

    #[test]
    fn project_principal_point() {
        let cam = cam_identity();
        let (u, v, z) = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((u - cam.intrinsics.cx).abs() < 1e-15);
        assert!((v - cam.intrinsics.cy).abs() < 1e-15);
        assert!((z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn project_behind_camera_is_culled() {
        let cam = cam_identity();
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
        assert!(cam.project(&Vector3::new(0.5, 0.5, 0.0)).is_none());
    }

    #[test]
    fn rotation_validation_rejects_scaled_matrix() {
        let r = Matrix3::identity() * 1.001;
        assert!(RigidPose::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn rotation_validation_rejects_reflection() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(RigidPose::new(r, Vector3::zeros()).is_err());
    }

    fn arb_rotation() -> impl Strategy<Value = Matrix3<f64>> {
        (0.0..std::f64::consts::TAU, 0.0..std::f64::consts::TAU, 0.0..std::f64::consts::TAU)
            .prop_map(|(a, b, c)| {
                let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), a);
                let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), b);
                let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), c);
                (rz * ry * rx).into_inner()
            })
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(
            r in arb_rotation(),
            tx in -3.0..3.0f64, ty in -3.0..3.0f64, tz in -3.0..3.0f64,
            u in 0.0..31.0f64, v in 0.0..31.0f64,
            depth in 0.05..20.0f64,
        ) {
            let pose = RigidPose::new(r, Vector3::new(tx, ty, tz)).unwrap();
            let cam = CameraPose::new(Intrinsics::new(40.0, 37.0, 15.2, 16.1, 32, 32).unwrap(), pose);
            let p = cam.unproject(u, v, depth).unwrap();
            let (u2, v2, z2) = cam.project(&p).unwrap();
            prop_assert!((u2 - u).abs() < 1e-9);
            prop_assert!((v2 - v).abs() < 1e-9);
            prop_assert!((z2 - depth).abs() < 1e-9);
        }

        #[test]
        fn unproject_is_linear_in_depth(
            u in 0.0..31.0f64, v in 0.0..31.0f64,
            d in 0.1..5.0f64, s in 0.5..4.0f64,
        ) {
            let cam = cam_identity();
            let origin = *cam.pose.translation();
            let p1 = cam.unproject(u, v, d).unwrap();
            let p2 = cam.unproject(u, v, s * d).unwrap();
            // both lie on the same ray from the camera center
            let a = p1 - origin;
            let b = p2 - origin;
            prop_assert!((b - a * s).norm() < 1e-12);
        }

        #[test]
        fn pose_compose_inverse_is_identity(r in arb_rotation(), tx in -5.0..5.0f64, ty in -5.0..5.0f64, tz in -5.0..5.0f64) {
            let pose = RigidPose::new(r, Vector3::new(tx, ty, tz)).unwrap();
            let id = pose.compose(&pose.inverse());
            prop_assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!(id.translation().norm() < 1e-9);
        }
    }

    #[test]
    fn trajectory_roundtrip() {
        let cams = vec![
            cam_identity(),
            CameraPose::new(
                Intrinsics::new(40.0, 37.5, 15.25, 16.125, 32, 24).unwrap(),
                RigidPose::from_translation(Vector3::new(0.125, -2.5, 3.0)),
            ),
        ];
        let text = format_trajectory(&cams);
        let back = parse_trajectory(&text).unwrap();
        assert_eq!(back.len(), 2);
        for (orig, read) in cams.iter().zip(back.iter()) {
            let read = read.as_ref().unwrap();
            assert_eq!(orig, read);
        }
    }

    #[test]
    fn trajectory_missing_sentinel() {
        let text = "missing\n";
        let cams = parse_trajectory(text).unwrap();
        assert_eq!(cams.len(), 1);
        assert!(cams[0].is_none());
    }

    #[test]
    fn trajectory_rejects_short_line() {
        assert!(parse_trajectory("1 2 3\n").is_err());
    }
}

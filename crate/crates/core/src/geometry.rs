//! Camera models, projection/back-projection and depth-gradient confidence.
//!
//! Conventions, fixed once for the whole engine:
//! - poses are world→camera rigid transforms; the camera looks down +Z,
//!   +X right, +Y down;
//! - pixel centers sit at integer coordinates, so the ray of pixel (u,v)
//!   passes through (u,v) exactly and round trips are exact;
//! - depth is the camera-frame Z coordinate, not ray length.

use crate::error::EvoError;
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, EvoError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(EvoError::Invalid(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(EvoError::Invalid(format!(
                "principal point ({cx},{cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Symmetric intrinsics from a horizontal field of view in degrees.
    pub fn from_hfov_deg(hfov_deg: f64, width: usize, height: usize) -> Result<Self, EvoError> {
        if !(0.0 < hfov_deg && hfov_deg < 180.0) {
            return Err(EvoError::Invalid(format!("hfov {hfov_deg} out of (0,180)")));
        }
        let f = width as f64 / (2.0 * (hfov_deg.to_radians() / 2.0).tan());
        Self::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    /// Intrinsics rescaled to a different image size.
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// World→camera rigid transform. Serialized via [`CameraJson`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// 3x3 orthonormal rotation, world→camera.
    pub rotation: Matrix3<f64>,
    /// Translation in meters, world→camera: `p_cam = R p_world + t`.
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, EvoError> {
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity()).norm();
        if dev > ORTHONORMAL_TOL * 10.0 {
            return Err(EvoError::Invalid(format!("rotation not orthonormal, |R^T R - I| = {dev:.3e}")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(EvoError::Invalid(format!("rotation determinant {det} != +1")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Composition: apply `self` first, then `next` (both world→camera maps
    /// reinterpreted as rigid transforms).
    pub fn compose(&self, next: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: next.rotation * self.rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }

    /// Look-at pose: camera at `eye`, +Z toward `target`, image-up opposite
    /// `up`. Falls back to a fixed lateral axis when the view direction is
    /// parallel to `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, EvoError> {
        let forward = target - eye;
        let n = forward.norm();
        if n < 1e-12 {
            return Err(EvoError::Invalid("look_at: eye coincides with target".into()));
        }
        let z = forward / n;
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            let alt = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
            x = z.cross(&alt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        CameraPose::new(rotation, translation)
    }
}

/// Per-pixel metric depth along camera +Z. Invalid pixels are NaN.
/// Held in f64 so analytic ground truth stays exact; the EVDM file format
/// stores f32.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![f64::NAN; width * height] }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self { width, height, values: vec![depth; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    /// Valid means finite and strictly positive.
    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let v = self.get(x, y);
        v.is_finite() && v > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite() && **v > 0.0).count()
    }

    /// Raw little-endian file: magic "EVDM", u32 width, u32 height, then
    /// width*height f32 row-major with NaN marking invalid pixels.
    /// Disparity maps reuse the container with a trailing flag byte 0x01;
    /// plain depth files have no trailing byte.
    pub fn write_evdm(&self, path: &Path) -> Result<(), EvoError> {
        self.write_evdm_kind(path, false)
    }

    pub fn write_evdm_kind(&self, path: &Path, disparity: bool) -> Result<(), EvoError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"EVDM")?;
        f.write_all(&(self.width as u32).to_le_bytes())?;
        f.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
        if disparity {
            f.write_all(&[1u8])?;
        }
        Ok(())
    }

    /// Returns the map and whether the trailing disparity flag byte was present.
    pub fn read_evdm(path: &Path) -> Result<(Self, bool), EvoError> {
        let mut f = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[0..4] != b"EVDM" {
            return Err(EvoError::Format(format!("{}: missing EVDM magic", path.display())));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = width * height * 4;
        let disparity = match bytes.len() - 12 {
            n if n == payload => false,
            n if n == payload + 1 && bytes[12 + payload] == 1 => true,
            _ => {
                return Err(EvoError::Format(format!(
                    "{}: payload size {} does not match {}x{}",
                    path.display(),
                    bytes.len() - 12,
                    width,
                    height
                )))
            }
        };
        let values = bytes[12..12 + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((Self { width, height, values }, disparity))
    }
}

/// Per-pixel confidence in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl ConfidenceMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Successful pinhole projection of a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDepth {
    pub pixel: Vector2<f64>,
    /// Camera-frame Z in meters.
    pub depth: f64,
}

/// Projects a world point. Returns `None` when the point is at or behind the
/// camera plane (Z <= 0) — a documented outcome, not a fault.
pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics, pose: &CameraPose) -> Option<PixelDepth> {
    let pc = pose.world_to_camera(point);
    if pc.z <= 0.0 {
        return None;
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    Some(PixelDepth { pixel: Vector2::new(u, v), depth: pc.z })
}

/// A back-projected point together with its source pixel.
#[derive(Debug, Clone, Copy)]
pub struct BackProjected {
    pub position: Vector3<f64>,
    pub pixel: (usize, usize),
}

/// Lifts every valid pixel of a depth map into world space.
pub fn back_project(d: &DepthMap, k: &CameraIntrinsics, pose: &CameraPose) -> Vec<BackProjected> {
    let mut out = Vec::with_capacity(d.valid_count());
    for y in 0..d.height {
        for x in 0..d.width {
            if !d.is_valid(x, y) {
                continue;
            }
            let z = d.get(x, y);
            out.push(BackProjected {
                position: back_project_pixel(x as f64, y as f64, z, k, pose),
                pixel: (x, y),
            });
        }
    }
    out
}

/// Lifts one pixel with known depth through the inverse camera model.
pub fn back_project_pixel(u: f64, v: f64, depth: f64, k: &CameraIntrinsics, pose: &CameraPose) -> Vector3<f64> {
    let xc = (u - k.cx) / k.fx * depth;
    let yc = (v - k.cy) / k.fy * depth;
    pose.camera_to_world(&Vector3::new(xc, yc, depth))
}

/// Confidence from local depth gradient magnitude: `exp(-|∇d| / sigma)`.
///
/// Gradients use central differences on interior pixels and forward/backward
/// differences at borders; a difference is taken only across valid neighbors,
/// and a pixel with no valid neighbor along an axis contributes zero gradient
/// on that axis. Invalid pixels get confidence 0.
pub fn depth_confidence(d: &DepthMap, sigma: f64) -> ConfidenceMap {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut values = vec![0.0f32; d.width * d.height];
    for y in 0..d.height {
        for x in 0..d.width {
            if !d.is_valid(x, y) {
                continue;
            }
            let gx = axis_gradient(d, x, y, true);
            let gy = axis_gradient(d, x, y, false);
            let g = (gx * gx + gy * gy).sqrt();
            values[y * d.width + x] = (-g / sigma).exp() as f32;
        }
    }
    ConfidenceMap { width: d.width, height: d.height, values }
}

fn axis_gradient(d: &DepthMap, x: usize, y: usize, horizontal: bool) -> f64 {
    let (limit, pos) = if horizontal { (d.width, x) } else { (d.height, y) };
    let fetch = |p: usize| -> Option<f64> {
        let (xx, yy) = if horizontal { (p, y) } else { (x, p) };
        d.is_valid(xx, yy).then(|| d.get(xx, yy))
    };
    let center = fetch(pos).expect("caller checks validity");
    let prev = (pos > 0).then(|| fetch(pos - 1)).flatten();
    let next = (pos + 1 < limit).then(|| fetch(pos + 1)).flatten();
    match (prev, next) {
        (Some(p), Some(n)) => (n - p) / 2.0,
        (Some(p), None) => center - p,
        (None, Some(n)) => n - center,
        (None, None) => 0.0,
    }
}

/// Serializable camera (intrinsics + pose) for sidecar JSON files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub intrinsics: CameraIntrinsics,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraJson {
    pub fn pack(k: &CameraIntrinsics, pose: &CameraPose) -> Self {
        let r = &pose.rotation;
        Self {
            intrinsics: *k,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
        }
    }

    pub fn unpack(&self) -> Result<(CameraIntrinsics, CameraPose), EvoError> {
        let r = Matrix3::new(
            self.rotation[0][0], self.rotation[0][1], self.rotation[0][2],
            self.rotation[1][0], self.rotation[1][1], self.rotation[1][2],
            self.rotation[2][0], self.rotation[2][1], self.rotation[2][2],
        );
        let pose = CameraPose::new(r, Vector3::new(self.translation[0], self.translation[1], self.translation[2]))?;
        Ok((self.intrinsics, pose))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn project_on_axis() {
        let k = test_camera();
        let p = project(&Vector3::new(0.0, 0.0, 2.0), &k, &CameraPose::identity()).unwrap();
        assert_eq!(p.pixel, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth, 2.0);
    }

    #[test]
    fn project_off_axis() {
        let k = test_camera();
        let p = project(&Vector3::new(0.02, 0.0, 2.0), &k, &CameraPose::identity()).unwrap();
        assert!((p.pixel.x - 51.0).abs() < 1e-12, "u={}", p.pixel.x);
        assert_eq!(p.pixel.y, 50.0);
    }

    #[test]
    fn project_behind_camera() {
        let k = test_camera();
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &k, &CameraPose::identity()).is_none());
        assert!(project(&Vector3::new(0.0, 0.0, 0.0), &k, &CameraPose::identity()).is_none());
    }

    #[test]
    fn back_project_single_pixel() {
        let k = test_camera();
        let mut d = DepthMap::invalid(100, 100);
        d.set(50, 50, 2.0);
        let pts = back_project(&d, &k, &CameraPose::identity());
        assert_eq!(pts.len(), 1);
        assert!((pts[0].position - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn back_project_translated_camera() {
        // world→camera t = (0,0,1) puts the camera center at (0,0,-1).
        let k = test_camera();
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let mut d = DepthMap::invalid(100, 100);
        d.set(50, 50, 2.0);
        let pts = back_project(&d, &k, &pose);
        assert!((pts[0].position - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn back_project_constant_sheet() {
        let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap();
        let d = DepthMap::constant(3, 3, 1.5);
        let pose = CameraPose::identity();
        let pts = back_project(&d, &k, &pose);
        assert_eq!(pts.len(), 9);
        for p in &pts {
            let cam = pose.world_to_camera(&p.position);
            assert!((cam.z - 1.5).abs() < 1e-12);
        }
    }

    fn random_pose(rng: &mut impl Rng) -> CameraPose {
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let t = Vector3::new(rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0);
        CameraPose::new(rot.into_inner(), t).unwrap()
    }

    #[test]
    fn round_trip_random_poses() {
        let mut rng = crate::rng::seeded_rng(11, "geom-roundtrip");
        let k = CameraIntrinsics::new(320.0, 300.0, 160.5, 120.25, 320, 240).unwrap();
        for _ in 0..2000 {
            let pose = random_pose(&mut rng);
            let u = rng.gen::<f64>() * 319.0;
            let v = rng.gen::<f64>() * 239.0;
            let z = 0.2 + rng.gen::<f64>() * 10.0;
            let world = back_project_pixel(u, v, z, &k, &pose);
            let p = project(&world, &k, &pose).expect("in front by construction");
            assert!((p.pixel.x - u).abs() < 1e-6 && (p.pixel.y - v).abs() < 1e-6);
            assert!((p.depth - z).abs() / z < 1e-9);
        }
    }

    #[test]
    fn pose_composition_matches_point_transform() {
        // Back-projecting through a pose pre-composed with a rigid motion M,
        // then applying M to the points, equals back-projecting the original
        // pose: M(backproject(a∘M)) = backproject(a).
        let mut rng = crate::rng::seeded_rng(12, "geom-compose");
        let k = test_camera();
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let m = random_pose(&mut rng);
            let composed = m.compose(&a); // p ↦ a(m(p))
            let direct = back_project_pixel(30.0, 70.0, 2.0, &k, &a);
            let via_motion = m.world_to_camera(&back_project_pixel(30.0, 70.0, 2.0, &k, &composed));
            assert!((direct - via_motion).norm() < 1e-9, "diff {}", (direct - via_motion).norm());
        }
    }

    #[test]
    fn confidence_constant_depth_is_one() {
        let d = DepthMap::constant(4, 4, 2.0);
        let c = depth_confidence(&d, 0.5);
        assert!(c.values.iter().all(|v| (*v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn confidence_step_edge_hand_computed() {
        // 3x3, columns 0..1 at depth 1, column 2 at depth 2.
        // Hand evaluation of the stencil, sigma = 0.5:
        //   (1,1): gx = (d(2,1)-d(0,1))/2 = 0.5, gy = 0 → exp(-0.5/0.5) = exp(-1)
        //   (0,1): forward diff = 0 → conf 1
        //   (2,1): backward diff = 2-1 = 1 → exp(-2)
        let mut d = DepthMap::constant(3, 3, 1.0);
        for y in 0..3 {
            d.set(2, y, 2.0);
        }
        let c = depth_confidence(&d, 0.5);
        assert!((c.get(1, 1) as f64 - (-1.0f64).exp()).abs() < 1e-7, "center {}", c.get(1, 1));
        assert!((c.get(0, 1) as f64 - 1.0).abs() < 1e-7);
        assert!((c.get(2, 1) as f64 - (-2.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn confidence_isolated_valid_pixel_is_one() {
        let mut d = DepthMap::invalid(3, 3);
        d.set(1, 1, 4.0);
        let c = depth_confidence(&d, 0.5);
        assert_eq!(c.get(1, 1), 1.0);
        assert_eq!(c.get(0, 0), 0.0);
    }

    #[test]
    fn confidence_monotone_in_gradient() {
        // Larger step → smaller confidence at the edge pixel.
        let mut small = DepthMap::constant(3, 1, 1.0);
        small.set(2, 0, 1.2);
        let mut large = DepthMap::constant(3, 1, 1.0);
        large.set(2, 0, 2.5);
        let cs = depth_confidence(&small, 0.5);
        let cl = depth_confidence(&large, 0.5);
        assert!(cl.get(1, 0) < cs.get(1, 0));
    }

    #[test]
    fn evdm_round_trip() {
        let mut d = DepthMap::invalid(7, 5);
        d.set(3, 2, 1.25);
        d.set(0, 0, 9.5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.evdm");
        d.write_evdm(&p).unwrap();
        let (back, disp) = DepthMap::read_evdm(&p).unwrap();
        assert!(!disp);
        assert_eq!(back.width, 7);
        assert_eq!(back.get(3, 2), 1.25);
        assert!(back.get(1, 1).is_nan());

        let p2 = dir.path().join("d2.evdm");
        d.write_evdm_kind(&p2, true).unwrap();
        let (_, disp2) = DepthMap::read_evdm(&p2).unwrap();
        assert!(disp2);
    }

    #[test]
    fn camera_json_round_trip() {
        let k = test_camera();
        let pose = CameraPose::look_at(Vector3::new(1.0, 2.0, -3.0), Vector3::zeros(), Vector3::y()).unwrap();
        let packed = CameraJson::pack(&k, &pose);
        let text = serde_json::to_string(&packed).unwrap();
        let unpacked: CameraJson = serde_json::from_str(&text).unwrap();
        let (k2, pose2) = unpacked.unpack().unwrap();
        assert_eq!(k, k2);
        assert!((pose.rotation - pose2.rotation).norm() < 1e-15);
    }

    #[test]
    fn look_at_keeps_world_up_upwards_in_image() {
        // Camera behind the scene on -Z looking at origin, world up +Y:
        // a point above the target must project above the principal point
        // (smaller v, since +Y_cam points down).
        let k = test_camera();
        let pose = CameraPose::look_at(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), Vector3::y()).unwrap();
        let above = project(&Vector3::new(0.0, 0.5, 0.0), &k, &pose).unwrap();
        assert!(above.pixel.y < 50.0, "v={}", above.pixel.y);
    }
}

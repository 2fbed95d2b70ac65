//! Synthetic-scene oracle harness: parametric analytic scenes with exact
//! ray-cast ground truth, blue-noise surface sampling, and the evaluation
//! routines (coverage, chamfer, watertightness) that make the whole pipeline
//! verifiable offline.

use crate::error::EvoError;
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap};
use crate::imagebuf::ImageRgb;
use crate::meshing::TexturedMesh;
use crate::rng::seeded_rng;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Axis-aligned box of full side lengths `dimensions`, optionally yawed.
    Box,
    Sphere,
    /// Two-sided rectangle in the local XY plane (dimensions.x by dimensions.y).
    Plane,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { color: [f32; 3] },
    /// 3D checker over local coordinates.
    Checker { scale: f64, color_a: [f32; 3], color_b: [f32; 3] },
    /// Linear blend along a local axis (0=x,1=y,2=z), normalized by extent.
    Gradient { axis: usize, from: [f32; 3], to: [f32; 3] },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Primitive {
    #[serde(flatten)]
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    /// Rotation about world +Y, degrees.
    #[serde(default)]
    pub yaw_deg: f64,
    /// Rotation about local +X applied before yaw, degrees. A plane pitched
    /// by 90 becomes horizontal.
    #[serde(default)]
    pub pitch_deg: f64,
    /// Full extents in meters (sphere uses dimensions[0] as diameter).
    pub dimensions: [f64; 3],
    pub texture: Texture,
}

impl Primitive {
    fn rotation(&self) -> Matrix3<f64> {
        yaw_matrix(self.yaw_deg) * pitch_matrix(self.pitch_deg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedCameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub hfov_deg: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub seed_camera: SeedCameraSpec,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), EvoError> {
        if self.primitives.is_empty() {
            return Err(EvoError::Invalid("scene needs at least one primitive".into()));
        }
        for p in &self.primitives {
            let c = Vector3::from(p.center);
            if c.norm() > 10.0 {
                return Err(EvoError::Invalid(format!("primitive outside the 10 m region: {:?}", p.center)));
            }
            let used_dims = match p.kind {
                PrimitiveKind::Box => 3,
                PrimitiveKind::Sphere => 1,
                PrimitiveKind::Plane => 2,
            };
            if p.dimensions.iter().take(used_dims).any(|d| !(*d > 0.0)) {
                return Err(EvoError::Invalid("primitive dimensions must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn seed_camera(&self) -> Result<(CameraIntrinsics, CameraPose), EvoError> {
        let s = &self.seed_camera;
        let k = CameraIntrinsics::from_hfov_deg(s.hfov_deg, s.width, s.height)?;
        let pose = CameraPose::look_at(Vector3::from(s.eye), Vector3::from(s.target), Vector3::y())?;
        Ok((k, pose))
    }

    pub fn load(path: &Path) -> Result<Self, EvoError> {
        let spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| EvoError::Format(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvoError> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }
}

fn yaw_matrix(yaw_deg: f64) -> Matrix3<f64> {
    let a = yaw_deg.to_radians();
    Matrix3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos())
}

fn pitch_matrix(pitch_deg: f64) -> Matrix3<f64> {
    let a = pitch_deg.to_radians();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, a.cos(), -a.sin(), 0.0, a.sin(), a.cos())
}

struct LocalHit {
    t: f64,
    local: Vector3<f64>,
}

/// Nearest positive intersection in the primitive's local frame.
fn intersect_local(kind: &PrimitiveKind, dims: &[f64; 3], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<LocalHit> {
    match kind {
        PrimitiveKind::Box => {
            let half = Vector3::new(dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0);
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let ta = (-half[a] - o[a]) / d[a];
                let tb = (half[a] - o[a]) / d[a];
                let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
            if t0 > t1 {
                return None;
            }
            let t = if t0 > 1e-9 { t0 } else if t1 > 1e-9 { t1 } else { return None };
            Some(LocalHit { t, local: o + d * t })
        }
        PrimitiveKind::Sphere => {
            let r = dims[0] / 2.0;
            let b = 2.0 * o.dot(d);
            let c = o.dot(o) - r * r;
            let a = d.dot(d);
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t_near = (-b - sq) / (2.0 * a);
            let t_far = (-b + sq) / (2.0 * a);
            let t = if t_near > 1e-9 { t_near } else if t_far > 1e-9 { t_far } else { return None };
            Some(LocalHit { t, local: o + d * t })
        }
        PrimitiveKind::Plane => {
            if d.z.abs() < 1e-15 {
                return None;
            }
            let t = -o.z / d.z;
            if t <= 1e-9 {
                return None;
            }
            let p = o + d * t;
            if p.x.abs() > dims[0] / 2.0 || p.y.abs() > dims[1] / 2.0 {
                return None;
            }
            Some(LocalHit { t, local: p })
        }
    }
}

fn texture_color(tex: &Texture, local: &Vector3<f64>, dims: &[f64; 3]) -> [f32; 3] {
    match tex {
        Texture::Solid { color } => *color,
        Texture::Checker { scale, color_a, color_b } => {
            let parity = ((local.x / scale).floor() as i64
                + (local.y / scale).floor() as i64
                + (local.z / scale).floor() as i64)
                .rem_euclid(2);
            if parity == 0 {
                *color_a
            } else {
                *color_b
            }
        }
        Texture::Gradient { axis, from, to } => {
            let a = (*axis).min(2);
            let extent = dims[a].max(1e-9);
            let t = ((local[a] / extent) + 0.5).clamp(0.0, 1.0) as f32;
            [
                from[0] * (1.0 - t) + to[0] * t,
                from[1] * (1.0 - t) + to[1] * t,
                from[2] * (1.0 - t) + to[2] * t,
            ]
        }
    }
}

/// Exact analytic ray cast of the scene from the given camera: RGB frame and
/// z-depth map. Misses keep the black background and an invalid depth.
pub fn render_gt(spec: &SceneSpec, k: &CameraIntrinsics, pose: &CameraPose, width: usize, height: usize) -> (ImageRgb, DepthMap) {
    let cam_center = pose.camera_center();
    let rot_t = pose.rotation.transpose();
    let prims: Vec<(Matrix3<f64>, Vector3<f64>, &Primitive)> = spec
        .primitives
        .iter()
        .map(|p| (p.rotation().transpose(), Vector3::from(p.center), p))
        .collect();
    let rows: Vec<(Vec<[f32; 3]>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut colors = vec![[0.0f32; 3]; width];
            let mut depths = vec![f64::NAN; width];
            for x in 0..width {
                let dir_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let dir = rot_t * dir_cam;
                let mut best: Option<(f64, [f32; 3])> = None;
                for (to_local, center, prim) in &prims {
                    let lo = to_local * (cam_center - center);
                    let ld = to_local * dir;
                    if let Some(hit) = intersect_local(&prim.kind, &prim.dimensions, &lo, &ld) {
                        if best.map_or(true, |(t, _)| hit.t < t) {
                            best = Some((hit.t, texture_color(&prim.texture, &hit.local, &prim.dimensions)));
                        }
                    }
                }
                if let Some((t, c)) = best {
                    colors[x] = c;
                    depths[x] = t; // dir has unit camera z, so t is depth
                }
            }
            (colors, depths)
        })
        .collect();
    let mut img = ImageRgb::new(width, height);
    let mut depth = DepthMap::invalid(width, height);
    for (y, (colors, depths)) in rows.into_iter().enumerate() {
        for x in 0..width {
            img.set_pixel(x, y, colors[x]);
            depth.set(x, y, depths[x]);
        }
    }
    (img, depth)
}

// --- surface sampling --------------------------------------------------------

fn primitive_area(p: &Primitive) -> f64 {
    let [dx, dy, dz] = p.dimensions;
    match p.kind {
        PrimitiveKind::Box => 2.0 * (dx * dy + dy * dz + dx * dz),
        PrimitiveKind::Sphere => std::f64::consts::PI * dx * dx, // 4π r², r = dx/2
        PrimitiveKind::Plane => dx * dy,
    }
}

fn sample_primitive_surface(p: &Primitive, rng: &mut impl Rng) -> Vector3<f64> {
    let [dx, dy, dz] = p.dimensions;
    let local = match p.kind {
        PrimitiveKind::Box => {
            // Pick a face weighted by its area, then a point on it.
            let areas = [dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen::<f64>() * total;
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.gen::<f64>() - 0.5;
            let v = rng.gen::<f64>() - 0.5;
            match face {
                0 => Vector3::new(-dx / 2.0, u * dy, v * dz),
                1 => Vector3::new(dx / 2.0, u * dy, v * dz),
                2 => Vector3::new(u * dx, -dy / 2.0, v * dz),
                3 => Vector3::new(u * dx, dy / 2.0, v * dz),
                4 => Vector3::new(u * dx, v * dy, -dz / 2.0),
                _ => Vector3::new(u * dx, v * dy, dz / 2.0),
            }
        }
        PrimitiveKind::Sphere => {
            let r = dx / 2.0;
            // Gaussian direction (Box-Muller) → uniform on the sphere.
            loop {
                let v = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng));
                let n = v.norm();
                if n > 1e-9 {
                    break v * (r / n);
                }
            }
        }
        PrimitiveKind::Plane => Vector3::new((rng.gen::<f64>() - 0.5) * dx, (rng.gen::<f64>() - 0.5) * dy, 0.0),
    };
    p.rotation() * local + Vector3::from(p.center)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Blue-noise surface sampling by dart throwing over area-weighted candidate
/// points: candidates closer than the Poisson radius to an accepted sample
/// are rejected. The radius shrinks when the target count cannot be reached.
pub fn sample_surface_poisson(spec: &SceneSpec, count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = seeded_rng(seed, &format!("poisson-{}", spec.name));
    let total_area: f64 = spec.primitives.iter().map(primitive_area).sum();
    let mut radius = 0.7 * (total_area / count as f64).sqrt();
    let areas: Vec<f64> = spec.primitives.iter().map(primitive_area).collect();

    let mut accepted: Vec<Vector3<f64>> = Vec::with_capacity(count);
    for _round in 0..6 {
        // Cell size >= radius so a 3^3 neighborhood covers the rejection ball.
        let cell = radius.max(1e-9);
        let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<usize>> = std::collections::HashMap::new();
        let key = |p: &Vector3<f64>| {
            (
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
            )
        };
        for (i, p) in accepted.iter().enumerate() {
            grid.entry(key(p)).or_default().push(i);
        }
        let mut attempts = 0usize;
        let budget = count * 30;
        while accepted.len() < count && attempts < budget {
            attempts += 1;
            // Area-weighted primitive choice.
            let mut pick = rng.gen::<f64>() * total_area;
            let mut pi = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    pi = i;
                    break;
                }
                pick -= a;
            }
            let candidate = sample_primitive_surface(&spec.primitives[pi], &mut rng);
            let (kx, ky, kz) = key(&candidate);
            let mut clear = true;
            'scan: for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if let Some(ids) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                            for i in ids {
                                if (accepted[*i] - candidate).norm() < radius {
                                    clear = false;
                                    break 'scan;
                                }
                            }
                        }
                    }
                }
            }
            if clear {
                grid.entry((kx, ky, kz)).or_default().push(accepted.len());
                accepted.push(candidate);
            }
        }
        if accepted.len() >= count {
            break;
        }
        radius *= 0.7;
    }
    accepted
}

/// Area-weighted samples on a triangle mesh.
pub fn sample_mesh_surface(mesh: &TexturedMesh, count: usize, seed: u64) -> Vec<Vector3<f64>> {
    if mesh.is_empty() {
        return Vec::new();
    }
    let mut rng = seeded_rng(seed, "mesh-sampling");
    let areas: Vec<f64> = mesh.triangles.iter().map(|t| mesh.triangle_area(t)).collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    // Cumulative table for O(log n) picks.
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cumulative.push(acc);
    }
    (0..count)
        .map(|_| {
            let pick = rng.gen::<f64>() * total;
            let ti = cumulative.partition_point(|c| *c < pick).min(areas.len() - 1);
            let t = mesh.triangles[ti];
            let (a, b, c) = (
                mesh.vertices[t[0] as usize],
                mesh.vertices[t[1] as usize],
                mesh.vertices[t[2] as usize],
            );
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            a + (b - a) * u + (c - a) * v
        })
        .collect()
}

/// Mean nearest-neighbor distance from each point of `from` to `to`.
/// Parallel per-point distances, sequential sum, so the result is stable.
pub fn mean_nn_distance(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    if from.is_empty() || to.is_empty() {
        return f64::INFINITY;
    }
    let dists: Vec<f64> = from
        .par_iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            for q in to {
                let d = (p - q).norm_squared();
                if d < best {
                    best = d;
                }
            }
            best.sqrt()
        })
        .collect();
    dists.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric chamfer distance between two sample sets.
pub fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    (mean_nn_distance(a, b) + mean_nn_distance(b, a)) / 2.0
}

/// Fraction of reference samples lying within `tolerance` of the
/// reconstruction samples.
pub fn coverage_fraction(reference: &[Vector3<f64>], reconstruction: &[Vector3<f64>], tolerance: f64) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    if reconstruction.is_empty() {
        return 0.0;
    }
    let tol2 = tolerance * tolerance;
    let hits: Vec<bool> = reference
        .par_iter()
        .map(|p| reconstruction.iter().any(|q| (p - q).norm_squared() <= tol2))
        .collect();
    hits.iter().filter(|h| **h).count() as f64 / reference.len() as f64
}

// --- default scene suite ---------------------------------------------------------

fn solid(color: [f32; 3]) -> Texture {
    Texture::Solid { color }
}

fn checker(scale: f64) -> Texture {
    Texture::Checker { scale, color_a: [0.9, 0.9, 0.85], color_b: [0.15, 0.2, 0.3] }
}

fn boxp(center: [f64; 3], dims: [f64; 3], texture: Texture) -> Primitive {
    Primitive { kind: PrimitiveKind::Box, center, yaw_deg: 0.0, pitch_deg: 0.0, dimensions: dims, texture }
}

fn camera_at(eye: [f64; 3], target: [f64; 3]) -> SeedCameraSpec {
    SeedCameraSpec { eye, target, hfov_deg: 60.0, width: 192, height: 192 }
}

/// The eight named benchmark scenes.
pub fn default_suite() -> Vec<SceneSpec> {
    let mut scenes = Vec::new();

    scenes.push(SceneSpec {
        name: "single_box".into(),
        primitives: vec![boxp([0.0, 0.0, 3.0], [1.0, 0.8, 1.0], checker(0.25))],
        seed_camera: camera_at([0.0, 0.45, 0.0], [0.0, 0.0, 3.0]),
        rng_seed: 11,
    });

    // Five slabs forming a box with an open top.
    let wall = 0.12;
    scenes.push(SceneSpec {
        name: "open_box".into(),
        primitives: vec![
            boxp([0.0, -0.45, 3.0], [1.2, wall, 1.2], solid([0.7, 0.5, 0.3])),
            boxp([-0.6, 0.0, 3.0], [wall, 1.0, 1.2], solid([0.8, 0.3, 0.3])),
            boxp([0.6, 0.0, 3.0], [wall, 1.0, 1.2], solid([0.3, 0.8, 0.3])),
            boxp([0.0, 0.0, 2.4], [1.2, 1.0, wall], checker(0.2)),
            boxp([0.0, 0.0, 3.6], [1.2, 1.0, wall], solid([0.3, 0.3, 0.8])),
        ],
        seed_camera: camera_at([0.0, 0.8, 0.2], [0.0, 0.0, 3.0]),
        rng_seed: 12,
    });

    scenes.push(SceneSpec {
        name: "two_box_occluder".into(),
        primitives: vec![
            boxp([0.0, 0.0, 2.5], [1.0, 1.0, 1.0], checker(0.25)),
            boxp([0.1, 0.1, 4.2], [1.6, 1.6, 1.2], solid([0.2, 0.45, 0.75])),
        ],
        seed_camera: camera_at([0.0, 0.5, 0.0], [0.0, 0.0, 2.8]),
        rng_seed: 13,
    });

    scenes.push(SceneSpec {
        name: "sphere".into(),
        primitives: vec![Primitive {
            kind: PrimitiveKind::Sphere,
            center: [0.0, 0.0, 3.0],
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            dimensions: [1.2, 1.2, 1.2],
            texture: Texture::Gradient { axis: 1, from: [0.9, 0.4, 0.2], to: [0.2, 0.4, 0.9] },
        }],
        seed_camera: camera_at([0.0, 0.4, 0.6], [0.0, 0.0, 3.0]),
        rng_seed: 14,
    });

    scenes.push(SceneSpec {
        name: "box_and_sphere".into(),
        primitives: vec![
            boxp([-0.5, -0.1, 3.0], [0.8, 0.8, 0.8], checker(0.2)),
            Primitive {
                kind: PrimitiveKind::Sphere,
                center: [0.55, 0.0, 3.2],
                yaw_deg: 0.0,
                pitch_deg: 0.0,
                dimensions: [0.9, 0.9, 0.9],
                texture: solid([0.85, 0.7, 0.2]),
            },
        ],
        seed_camera: camera_at([0.0, 0.5, 0.4], [0.0, 0.0, 3.1]),
        rng_seed: 15,
    });

    scenes.push(SceneSpec {
        name: "three_wall_room".into(),
        primitives: vec![
            boxp([0.0, 0.0, 4.0], [2.4, 1.4, wall], checker(0.3)),
            boxp([-1.2, 0.0, 3.3], [wall, 1.4, 1.4], solid([0.75, 0.3, 0.3])),
            boxp([1.2, 0.0, 3.3], [wall, 1.4, 1.4], solid([0.3, 0.75, 0.3])),
            boxp([0.0, -0.7, 3.3], [2.4, wall, 1.4], solid([0.55, 0.5, 0.45])),
        ],
        seed_camera: camera_at([0.0, 0.2, 0.8], [0.0, 0.0, 3.6]),
        rng_seed: 16,
    });

    scenes.push(SceneSpec {
        name: "staircase".into(),
        primitives: vec![
            boxp([0.0, -0.45, 2.8], [1.2, 0.3, 0.5], solid([0.8, 0.75, 0.7])),
            boxp([0.0, -0.15, 3.2], [1.2, 0.3, 0.5], solid([0.65, 0.6, 0.55])),
            boxp([0.0, 0.15, 3.6], [1.2, 0.3, 0.5], solid([0.5, 0.45, 0.4])),
        ],
        seed_camera: camera_at([0.0, 0.6, 0.6], [0.0, -0.1, 3.2]),
        rng_seed: 17,
    });

    scenes.push(SceneSpec {
        name: "ground_plane_box".into(),
        primitives: vec![
            // Plane pitched flat to serve as the textured ground.
            Primitive {
                kind: PrimitiveKind::Plane,
                center: [0.0, -0.5, 3.0],
                yaw_deg: 0.0,
                pitch_deg: 90.0,
                dimensions: [3.5, 3.5, 0.0],
                texture: checker(0.4),
            },
            boxp([0.0, -0.1, 3.0], [0.8, 0.8, 0.8], solid([0.7, 0.25, 0.2])),
        ],
        seed_camera: camera_at([0.0, 0.7, 0.6], [0.0, -0.1, 3.0]),
        rng_seed: 18,
    });

    scenes
}

/// Writes the suite under `dir` as one JSON per scene.
pub fn write_suite(dir: &Path) -> Result<Vec<std::path::PathBuf>, EvoError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for scene in default_suite() {
        let path = dir.join(format!("{}.json", scene.name));
        scene.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Evaluation of run artifacts against the analytic reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scene: String,
    pub coverage_per_iteration: Vec<f64>,
    pub chamfer: f64,
    pub mesh_watertight: bool,
    pub loss_curves: Vec<Vec<f64>>,
}

/// Computes coverage/chamfer of a final mesh against the scene's analytic
/// surface and packages the per-iteration coverages and loss curves recorded
/// by the pipeline.
pub fn evaluate_mesh(
    spec: &SceneSpec,
    mesh: &TexturedMesh,
    coverage_per_iteration: Vec<f64>,
    loss_curves: Vec<Vec<f64>>,
    sample_seed: u64,
) -> EvaluationReport {
    let reference = sample_surface_poisson(spec, 10_000, sample_seed);
    let reconstruction = sample_mesh_surface(mesh, 10_000, sample_seed);
    EvaluationReport {
        scene: spec.name.clone(),
        coverage_per_iteration,
        chamfer: chamfer_distance(&reference, &reconstruction),
        mesh_watertight: mesh.is_watertight(),
        loss_curves,
    }
}

/// Ground-truth self-consistency: back-projected GT depth lies on a primitive
/// surface. Used by tests and the acceptance suite.
pub fn surface_distance(spec: &SceneSpec, p: &Vector3<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for prim in &spec.primitives {
        let to_local = prim.rotation().transpose();
        let local = to_local * (p - Vector3::from(prim.center));
        let [dx, dy, dz] = prim.dimensions;
        let d = match prim.kind {
            PrimitiveKind::Box => {
                let q = Vector3::new(local.x.abs() - dx / 2.0, local.y.abs() - dy / 2.0, local.z.abs() - dz / 2.0);
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                (outside + inside).abs()
            }
            PrimitiveKind::Sphere => (local.norm() - dx / 2.0).abs(),
            PrimitiveKind::Plane => {
                let clamped = Vector3::new(
                    local.x.clamp(-dx / 2.0, dx / 2.0),
                    local.y.clamp(-dy / 2.0, dy / 2.0),
                    0.0,
                );
                (local - clamped).norm()
            }
        };
        best = best.min(d);
    }
    best
}

/// Convenience: renders the seed view of a scene.
pub fn render_seed_view(spec: &SceneSpec) -> Result<(ImageRgb, DepthMap, CameraIntrinsics, CameraPose), EvoError> {
    let (k, pose) = spec.seed_camera()?;
    let (img, depth) = render_gt(spec, &k, &pose, k.width, k.height);
    Ok((img, depth, k, pose))
}

//! Stage B front half — the three-state voxel grid.
//!
//! The prior cloud is voxelized into Observed voxels, free space is carved
//! along camera rays (ray visibility), and the grid is cut into overlapping
//! cubic patches for the structure completer.
//!
//! State encoding: Unknown=0, Free=1, Observed=2. Carving only ever upgrades
//! Unknown→Free, so any view order (or parallel schedule) yields the same grid.

use crate::error::EvoError;
use crate::geometry::{project, CameraIntrinsics, CameraPose, DepthMap};
use crate::prior::{nearest_pixel, ConfidencePointCloud};
use nalgebra::Vector3;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum VoxelState {
    Unknown = 0,
    Free = 1,
    Observed = 2,
}

impl TryFrom<u8> for VoxelState {
    type Error = EvoError;
    fn try_from(v: u8) -> Result<Self, EvoError> {
        match v {
            0 => Ok(VoxelState::Unknown),
            1 => Ok(VoxelState::Free),
            2 => Ok(VoxelState::Observed),
            _ => Err(EvoError::Format(format!("invalid voxel state byte {v}"))),
        }
    }
}

/// Dense S^3 grid of [`VoxelState`], x-fastest storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub s: usize,
    /// World position of the min corner.
    pub origin: Vector3<f64>,
    /// Meters per voxel.
    pub pitch: f64,
    states: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(s: usize, origin: Vector3<f64>, pitch: f64) -> Result<Self, EvoError> {
        if s < 1 {
            return Err(EvoError::Invalid("grid resolution must be >= 1".into()));
        }
        if !(pitch > 0.0) {
            return Err(EvoError::Invalid(format!("pitch must be positive, got {pitch}")));
        }
        Ok(Self { s, origin, pitch, states: vec![VoxelState::Unknown as u8; s * s * s] })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + y * self.s + z * self.s * self.s
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> VoxelState {
        match self.states[self.index(x, y, z)] {
            0 => VoxelState::Unknown,
            1 => VoxelState::Free,
            _ => VoxelState::Observed,
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, state: VoxelState) {
        let i = self.index(x, y, z);
        self.states[i] = state as u8;
    }

    pub fn raw_states(&self) -> &[u8] {
        &self.states
    }

    /// World-space center of voxel (x,y,z).
    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (x as f64 + 0.5) * self.pitch,
                (y as f64 + 0.5) * self.pitch,
                (z as f64 + 0.5) * self.pitch,
            )
    }

    /// Voxel containing a world point, or None outside the grid.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<(usize, usize, usize)> {
        let rel = (p - self.origin) / self.pitch;
        let (x, y, z) = (rel.x.floor(), rel.y.floor(), rel.z.floor());
        let s = self.s as f64;
        if x < 0.0 || y < 0.0 || z < 0.0 || x >= s || y >= s || z >= s {
            return None;
        }
        Some((x as usize, y as usize, z as usize))
    }

    pub fn count(&self, state: VoxelState) -> usize {
        let b = state as u8;
        self.states.iter().filter(|v| **v == b).count()
    }

    /// File format: magic "EVOG", u32 S, f64 origin[3], f64 pitch, then S^3
    /// state bytes in x-fastest order, all little-endian.
    pub fn write_evog(&self, path: &Path) -> Result<(), EvoError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"EVOG")?;
        f.write_all(&(self.s as u32).to_le_bytes())?;
        for c in [self.origin.x, self.origin.y, self.origin.z] {
            f.write_all(&c.to_le_bytes())?;
        }
        f.write_all(&self.pitch.to_le_bytes())?;
        f.write_all(&self.states)?;
        Ok(())
    }

    pub fn read_evog(path: &Path) -> Result<Self, EvoError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 40 || &bytes[0..4] != b"EVOG" {
            return Err(EvoError::Format(format!("{}: missing EVOG magic", path.display())));
        }
        let s = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let origin = Vector3::new(f64_at(8), f64_at(16), f64_at(24));
        let pitch = f64_at(32);
        let body = &bytes[40..];
        if body.len() != s * s * s {
            return Err(EvoError::Format(format!("{}: expected {} state bytes, found {}", path.display(), s * s * s, body.len())));
        }
        for b in body {
            VoxelState::try_from(*b)?;
        }
        Ok(Self { s, origin, pitch, states: body.to_vec() })
    }
}

/// Cubic bounds enclosing the [1st, 99th] percentile of the cloud per axis,
/// expanded by `margin` (fraction of the side) and centered. Returns
/// (origin, pitch) for a grid of resolution `s`.
pub fn fit_bounds(cloud: &ConfidencePointCloud, s: usize, margin: f64) -> Result<(Vector3<f64>, f64), EvoError> {
    if cloud.is_empty() {
        return Err(EvoError::NoPrior);
    }
    if s < 2 {
        return Err(EvoError::Invalid("grid resolution must be >= 2".into()));
    }
    if margin < 0.0 {
        return Err(EvoError::Invalid("margin must be non-negative".into()));
    }
    let mut lo = Vector3::zeros();
    let mut hi = Vector3::zeros();
    for axis in 0..3 {
        let mut vals: Vec<f64> = cloud.points.iter().map(|p| p.position[axis]).collect();
        vals.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        lo[axis] = percentile_nearest_rank(&vals, 1.0);
        hi[axis] = percentile_nearest_rank(&vals, 99.0);
    }
    let extent = hi - lo;
    let side = extent.max().max(1e-6) * (1.0 + margin);
    let center = (lo + hi) / 2.0;
    let origin = center - Vector3::repeat(side / 2.0);
    Ok((origin, side / s as f64))
}

/// Nearest-rank percentile on a sorted slice: value at ceil(q/100 * n),
/// 1-based, clamped.
fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Marks every voxel containing at least one point as Observed. Points
/// outside the bounds are skipped; the skip count is returned.
pub fn voxelize(cloud: &ConfidencePointCloud, origin: Vector3<f64>, pitch: f64, s: usize) -> Result<(OccupancyGrid, usize), EvoError> {
    let mut grid = OccupancyGrid::new(s, origin, pitch)?;
    let mut skipped = 0usize;
    for p in &cloud.points {
        match grid.voxel_of(&p.position) {
            Some((x, y, z)) => grid.set(x, y, z, VoxelState::Observed),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("voxelize: {skipped} points outside grid bounds ignored");
    }
    Ok((grid, skipped))
}

/// A posed view used for carving and crop extraction.
#[derive(Debug, Clone)]
pub struct CarveView {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// The carving predicate: voxel center projects onto a valid pixel of the
/// view strictly in front of the observed depth by more than `epsilon`.
/// Both the DDA fast path and the exhaustive oracle in the test suite apply
/// exactly this test, so they can only differ by traversal coverage.
#[inline]
pub fn carve_test(center: &Vector3<f64>, view: &CarveView, depth: &DepthMap, epsilon: f64) -> bool {
    let Some(pd) = project(center, &view.intrinsics, &view.pose) else {
        return false;
    };
    let Some((x, y)) = nearest_pixel(pd.pixel.x, pd.pixel.y, depth.width, depth.height) else {
        return false;
    };
    if !depth.is_valid(x, y) {
        return false;
    }
    pd.depth < depth.get(x, y) - epsilon
}

/// Carves free space by ray visibility: for every view and valid pixel, the
/// voxels traversed by the pixel ray are tested with [`carve_test`] and
/// Unknown voxels that pass become Free. Observed voxels are never demoted.
///
/// Traversal uses exact 3D DDA stepping. The enumeration is complete as long
/// as the pixel footprint at the far end of the carved range stays below one
/// voxel pitch (z_max < pitch * fx / sqrt(2) for square pixels); the built-in
/// benchmark configurations keep a wide margin.
pub fn carve_free_space(
    grid: &OccupancyGrid,
    views: &[CarveView],
    depths: &[DepthMap],
    epsilon: f64,
) -> OccupancyGrid {
    assert_eq!(views.len(), depths.len(), "one depth map per view");
    let n = grid.s * grid.s * grid.s;
    let freed = views
        .par_iter()
        .zip(depths)
        .map(|(view, depth)| carve_one_view(grid, view, depth, epsilon))
        .reduce(
            || vec![0u64; n.div_ceil(64)],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x |= y;
                }
                a
            },
        );
    let mut out = grid.clone();
    for i in 0..n {
        if out.states[i] == VoxelState::Unknown as u8 && freed[i / 64] >> (i % 64) & 1 == 1 {
            out.states[i] = VoxelState::Free as u8;
        }
    }
    out
}

fn carve_one_view(grid: &OccupancyGrid, view: &CarveView, depth: &DepthMap, epsilon: f64) -> Vec<u64> {
    let n = grid.s * grid.s * grid.s;
    let mut freed = vec![0u64; n.div_ceil(64)];
    let origin = view.pose.camera_center();
    let k = &view.intrinsics;
    let rot_t = view.pose.rotation.transpose();
    // Depth budget margin covers the half-pixel offset between a voxel center
    // and the pixel ray that must visit it.
    let z_margin = 3.0 * grid.pitch;
    for py in 0..depth.height {
        for px in 0..depth.width {
            if !depth.is_valid(px, py) {
                continue;
            }
            let d = depth.get(px, py);
            // Ray direction with unit camera-frame z, so t equals camera depth.
            let dir_cam = Vector3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0);
            let dir = rot_t * dir_cam;
            walk_ray(grid, &origin, &dir, d - epsilon + z_margin, |x, y, z| {
                let i = grid.index(x, y, z);
                if grid.states[i] != VoxelState::Unknown as u8 || freed[i / 64] >> (i % 64) & 1 == 1 {
                    return;
                }
                if carve_test(&grid.voxel_center(x, y, z), view, depth, epsilon) {
                    freed[i / 64] |= 1 << (i % 64);
                }
            });
        }
    }
    freed
}

/// Amanatides–Woo voxel traversal of `origin + t*dir` for t in (0, t_stop],
/// clipped to the grid, visiting each traversed voxel once.
fn walk_ray<F: FnMut(usize, usize, usize)>(
    grid: &OccupancyGrid,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_stop: f64,
    mut visit: F,
) {
    crate::dda::walk_cells(&grid.origin, grid.pitch, [grid.s; 3], origin, dir, t_stop, |cell, _| {
        visit(cell[0], cell[1], cell[2]);
        true
    });
}

/// Pixel-space crop of a patch in one view.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PatchCrop {
    pub view_index: usize,
    /// Inclusive min pixel.
    pub x0: usize,
    pub y0: usize,
    /// Exclusive max pixel.
    pub x1: usize,
    pub y1: usize,
}

impl PatchCrop {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
    /// Intrinsics of the cropped image (principal point shifted).
    pub fn intrinsics(&self, full: &CameraIntrinsics) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: full.fx,
            fy: full.fy,
            cx: full.cx - self.x0 as f64,
            cy: full.cy - self.y0 as f64,
            width: self.width(),
            height: self.height(),
        }
    }
}

/// One P^3 sub-block of the grid with the image crops that look at it.
#[derive(Debug, Clone)]
pub struct Patch {
    /// Min-corner voxel index of the patch.
    pub min_corner: [usize; 3],
    /// P^3 state bytes, x-fastest within the patch.
    pub states: Vec<u8>,
    pub crops: Vec<PatchCrop>,
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patch_size: usize,
    pub overlap: usize,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn stride(&self) -> usize {
        self.patch_size - self.overlap
    }
}

/// Per-axis patch min-corners: multiples of the stride with a final corner
/// clamped to S-P so the grid is fully covered.
pub fn patch_corners(s: usize, p: usize, overlap: usize) -> Result<Vec<usize>, EvoError> {
    if p > s {
        return Err(EvoError::Invalid(format!("patch size {p} exceeds grid {s}")));
    }
    if overlap >= p {
        return Err(EvoError::Invalid(format!("overlap {overlap} must be < patch size {p}")));
    }
    let stride = p - overlap;
    let mut corners = Vec::new();
    let mut c = 0usize;
    loop {
        corners.push(c.min(s - p));
        if c + p >= s {
            break;
        }
        c += stride;
    }
    corners.dedup();
    Ok(corners)
}

/// Decomposes the grid into overlapping P^3 patches and attaches, per view,
/// the pixel bounding box of the patch's 8 projected world corners (clamped
/// to the image, dropped when empty or fully behind the camera). A patch with
/// corners on both sides of the camera plane keeps the full image, since a
/// projected bounding box is meaningless there.
pub fn decompose_patches(
    grid: &OccupancyGrid,
    p: usize,
    overlap: usize,
    views: &[CarveView],
) -> Result<PatchSet, EvoError> {
    let corners = patch_corners(grid.s, p, overlap)?;
    let mut patches = Vec::with_capacity(corners.len().pow(3));
    for &cz in &corners {
        for &cy in &corners {
            for &cx in &corners {
                let mut states = vec![0u8; p * p * p];
                for z in 0..p {
                    for y in 0..p {
                        let src = grid.index(cx, cy + y, cz + z);
                        let dst = y * p + z * p * p;
                        states[dst..dst + p].copy_from_slice(&grid.states[src..src + p]);
                    }
                }
                let crops = views
                    .iter()
                    .enumerate()
                    .filter_map(|(vi, view)| patch_crop(grid, [cx, cy, cz], p, vi, view))
                    .collect();
                patches.push(Patch { min_corner: [cx, cy, cz], states, crops });
            }
        }
    }
    Ok(PatchSet { patch_size: p, overlap, patches })
}

fn patch_crop(grid: &OccupancyGrid, min_corner: [usize; 3], p: usize, view_index: usize, view: &CarveView) -> Option<PatchCrop> {
    let lo = grid.origin
        + Vector3::new(
            min_corner[0] as f64 * grid.pitch,
            min_corner[1] as f64 * grid.pitch,
            min_corner[2] as f64 * grid.pitch,
        );
    let side = p as f64 * grid.pitch;
    let mut in_front = 0;
    let (mut u0, mut v0) = (f64::INFINITY, f64::INFINITY);
    let (mut u1, mut v1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..8 {
        let corner = lo + Vector3::new(((i >> 0) & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64) * side;
        if let Some(pd) = project(&corner, &view.intrinsics, &view.pose) {
            in_front += 1;
            u0 = u0.min(pd.pixel.x);
            v0 = v0.min(pd.pixel.y);
            u1 = u1.max(pd.pixel.x);
            v1 = v1.max(pd.pixel.y);
        }
    }
    let (w, h) = (view.intrinsics.width, view.intrinsics.height);
    if in_front == 0 {
        return None;
    }
    if in_front < 8 {
        // Mixed front/behind: the projected box wraps around; keep everything.
        return Some(PatchCrop { view_index, x0: 0, y0: 0, x1: w, y1: h });
    }
    let x0 = u0.floor().max(0.0) as usize;
    let y0 = v0.floor().max(0.0) as usize;
    let x1 = (u1.ceil() + 1.0).min(w as f64) as usize;
    let y1 = (v1.ceil() + 1.0).min(h as f64) as usize;
    if x0 >= x1.min(w) || y0 >= y1.min(h) {
        return None;
    }
    Some(PatchCrop { view_index, x0, y0, x1: x1.min(w), y1: y1.min(h) })
}

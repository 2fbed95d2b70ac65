//! Stage B generative half — structure completion under the observed-voxel
//! re-injection constraint, per-voxel appearance, patch blending and the
//! multi-view test-time optimization.
//!
//! The completer is a pluggable backend. Whatever it returns, the host
//! enforces the constraint that every Observed voxel stays occupied (a
//! violation is a contract error) and that carved Free space never becomes
//! occupied (masked after fusion).

use crate::error::{BackendError, EvoError};
use crate::geometry::{depth_confidence, project, CameraIntrinsics, CameraPose, DepthMap};
use crate::imagebuf::ImageRgb;
use crate::occupancy::{OccupancyGrid, Patch, PatchSet, VoxelState};
use crate::prior::nearest_pixel;
use crate::rendering::{photometric_grad, photometric_loss, render, render_backward, FrameF64, LossWeights};
use nalgebra::Vector3;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Explicit splat attributes per occupied voxel — the desk-scale stand-in for
/// a learned structured latent, decodable to a splat set and a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLatent {
    pub s: usize,
    pub origin: Vector3<f64>,
    pub pitch: f64,
    pub indices: Vec<[u32; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub scales: Vec<f64>,
}

impl SceneLatent {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn voxel_center(&self, i: usize) -> Vector3<f64> {
        let [x, y, z] = self.indices[i];
        self.origin
            + Vector3::new(
                (x as f64 + 0.5) * self.pitch,
                (y as f64 + 0.5) * self.pitch,
                (z as f64 + 0.5) * self.pitch,
            )
    }

    /// Occupied-voxel field for the mesher.
    pub fn occupancy_field(&self) -> Vec<bool> {
        let mut field = vec![false; self.s * self.s * self.s];
        for [x, y, z] in &self.indices {
            field[*x as usize + *y as usize * self.s + *z as usize * self.s * self.s] = true;
        }
        field
    }

    pub fn validate(&self) -> Result<(), EvoError> {
        let n = self.len();
        if self.colors.len() != n || self.opacities.len() != n || self.scales.len() != n {
            return Err(EvoError::Invalid("latent attribute arrays out of sync".into()));
        }
        for i in 0..n {
            let [x, y, z] = self.indices[i];
            if x as usize >= self.s || y as usize >= self.s || z as usize >= self.s {
                return Err(EvoError::Invalid(format!("latent voxel {i} outside grid")));
            }
            let c = self.colors[i];
            let finite = c.iter().all(|v| v.is_finite())
                && self.opacities[i].is_finite()
                && self.scales[i].is_finite();
            if !finite || !(self.opacities[i] > 0.0 && self.opacities[i] <= 1.0) {
                return Err(EvoError::Invalid(format!("latent voxel {i} has invalid attributes")));
            }
        }
        Ok(())
    }

    /// Sidecar pair: JSON header + packed binary records
    /// (u32 x,y,z then f64 r,g,b,opacity,scale — little endian).
    pub fn save(&self, json_path: &Path, bin_path: &Path) -> Result<(), EvoError> {
        let header = serde_json::json!({
            "s": self.s,
            "origin": [self.origin.x, self.origin.y, self.origin.z],
            "pitch": self.pitch,
            "count": self.len(),
            "bin": bin_path.file_name().and_then(|n| n.to_str()).unwrap_or("latent.bin"),
        });
        std::fs::write(json_path, serde_json::to_string_pretty(&header).unwrap())?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
        for i in 0..self.len() {
            for v in self.indices[i] {
                f.write_all(&v.to_le_bytes())?;
            }
            for v in self.colors[i] {
                f.write_all(&v.to_le_bytes())?;
            }
            f.write_all(&self.opacities[i].to_le_bytes())?;
            f.write_all(&self.scales[i].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(json_path: &Path, bin_path: &Path) -> Result<Self, EvoError> {
        let header: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json_path)?)
            .map_err(|e| EvoError::Format(format!("latent header: {e}")))?;
        let s = header["s"].as_u64().ok_or_else(|| EvoError::Format("latent header missing s".into()))? as usize;
        let o = &header["origin"];
        let origin = Vector3::new(
            o[0].as_f64().unwrap_or(0.0),
            o[1].as_f64().unwrap_or(0.0),
            o[2].as_f64().unwrap_or(0.0),
        );
        let pitch = header["pitch"].as_f64().ok_or_else(|| EvoError::Format("latent header missing pitch".into()))?;
        let count = header["count"].as_u64().unwrap_or(0) as usize;
        let mut bytes = Vec::new();
        std::fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
        let record = 12 + 8 * 5;
        if bytes.len() != count * record {
            return Err(EvoError::Format(format!("latent bin: expected {} bytes, got {}", count * record, bytes.len())));
        }
        let mut latent = SceneLatent {
            s,
            origin,
            pitch,
            indices: Vec::with_capacity(count),
            colors: Vec::with_capacity(count),
            opacities: Vec::with_capacity(count),
            scales: Vec::with_capacity(count),
        };
        for i in 0..count {
            let r = &bytes[i * record..(i + 1) * record];
            let u32_at = |o: usize| u32::from_le_bytes(r[o..o + 4].try_into().unwrap());
            let f64_at = |o: usize| f64::from_le_bytes(r[o..o + 8].try_into().unwrap());
            latent.indices.push([u32_at(0), u32_at(4), u32_at(8)]);
            latent.colors.push([f64_at(12), f64_at(20), f64_at(28)]);
            latent.opacities.push(f64_at(36));
            latent.scales.push(f64_at(44));
        }
        Ok(latent)
    }
}

/// One cropped view attached to a completion request.
#[derive(Debug, Clone)]
pub struct CropPayload {
    pub view_index: usize,
    pub rgb: ImageRgb,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// Patch-completion request: three-state patch, the clamp mask of Observed
/// voxels the backend must keep occupied, and the image crops that look at
/// the patch.
#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub patch_size: usize,
    pub min_corner: [usize; 3],
    pub world_origin: Vector3<f64>,
    pub pitch: f64,
    pub states: Vec<u8>,
    pub clamp_mask: Vec<bool>,
    pub crops: Vec<CropPayload>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelAttributes {
    pub color: [f64; 3],
    pub opacity: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct CompletionResponse {
    /// Completed binary occupancy for the patch, P^3 x-fastest.
    pub occupancy: Vec<bool>,
    /// Optional per-voxel attributes, parallel to `occupancy`.
    pub attributes: Option<Vec<Option<VoxelAttributes>>>,
}

/// The structure-completion backend boundary.
pub trait SceneCompleter: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

/// Full view data the host slices crops from.
#[derive(Debug, Clone)]
pub struct CompletionViewData<'a> {
    pub image: &'a ImageRgb,
    pub depth: &'a DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

fn crop_image(img: &ImageRgb, x0: usize, y0: usize, x1: usize, y1: usize) -> ImageRgb {
    let mut out = ImageRgb::new(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            out.set_pixel(x - x0, y - y0, img.pixel(x, y));
        }
    }
    out
}

fn crop_depth(d: &DepthMap, x0: usize, y0: usize, x1: usize, y1: usize) -> DepthMap {
    let mut out = DepthMap::invalid(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            out.set(x - x0, y - y0, d.get(x, y));
        }
    }
    out
}

/// Builds the wire-level request for one patch.
pub fn build_request(grid: &OccupancyGrid, patch: &Patch, patch_size: usize, views: &[CompletionViewData]) -> CompletionRequest {
    let clamp_mask = patch.states.iter().map(|s| *s == VoxelState::Observed as u8).collect();
    let world_origin = grid.origin
        + Vector3::new(
            patch.min_corner[0] as f64 * grid.pitch,
            patch.min_corner[1] as f64 * grid.pitch,
            patch.min_corner[2] as f64 * grid.pitch,
        );
    let crops = patch
        .crops
        .iter()
        .filter(|c| c.view_index < views.len())
        .map(|c| {
            let view = &views[c.view_index];
            CropPayload {
                view_index: c.view_index,
                rgb: crop_image(view.image, c.x0, c.y0, c.x1, c.y1),
                depth: crop_depth(view.depth, c.x0, c.y0, c.x1, c.y1),
                intrinsics: c.intrinsics(&view.intrinsics),
                pose: view.pose,
            }
        })
        .collect();
    CompletionRequest {
        patch_size,
        min_corner: patch.min_corner,
        world_origin,
        pitch: grid.pitch,
        states: patch.states.clone(),
        clamp_mask,
        crops,
    }
}

/// Runs the completer over every patch, verifies the re-injection contract,
/// and fuses the patch results into a completed grid by majority vote over
/// overlapping patches (ties occupied). Observed voxels are preserved and
/// Free voxels are never made occupied. Returns the completed grid (occupied
/// voxels marked Observed) and the raw patch responses for attribute blending.
pub fn complete_structure(
    grid: &OccupancyGrid,
    patches: &PatchSet,
    views: &[CompletionViewData],
    backend: &dyn SceneCompleter,
) -> Result<(OccupancyGrid, Vec<CompletionResponse>), EvoError> {
    let p = patches.patch_size;
    let mut responses = Vec::with_capacity(patches.patches.len());
    for (pi, patch) in patches.patches.iter().enumerate() {
        let request = build_request(grid, patch, p, views);
        let response = backend
            .complete(&request)
            .map_err(|e| EvoError::Backend(annotate_patch(e, pi)))?;
        if response.occupancy.len() != p * p * p {
            return Err(EvoError::Backend(BackendError::Contract(format!(
                "patch {pi}: occupancy has {} entries, expected {}",
                response.occupancy.len(),
                p * p * p
            ))));
        }
        if let Some(attrs) = &response.attributes {
            if attrs.len() != p * p * p {
                return Err(EvoError::Backend(BackendError::Contract(format!(
                    "patch {pi}: attribute array has {} entries, expected {}",
                    attrs.len(),
                    p * p * p
                ))));
            }
        }
        for (li, clamped) in request.clamp_mask.iter().enumerate() {
            if *clamped && !response.occupancy[li] {
                return Err(EvoError::Backend(BackendError::Contract(format!(
                    "patch {pi}: observed voxel at local index {li} was emptied by the backend"
                ))));
            }
        }
        responses.push(response);
    }

    // Majority fusion.
    let n = grid.s * grid.s * grid.s;
    let mut votes = vec![0u16; n];
    let mut covers = vec![0u16; n];
    for (patch, response) in patches.patches.iter().zip(&responses) {
        for lz in 0..p {
            for ly in 0..p {
                for lx in 0..p {
                    let gi = grid.index(patch.min_corner[0] + lx, patch.min_corner[1] + ly, patch.min_corner[2] + lz);
                    covers[gi] += 1;
                    if response.occupancy[lx + ly * p + lz * p * p] {
                        votes[gi] += 1;
                    }
                }
            }
        }
    }
    let mut out = grid.clone();
    for i in 0..n {
        let state = grid.raw_states()[i];
        if state == VoxelState::Free as u8 {
            continue; // carved free space is immovable
        }
        let occupied = state == VoxelState::Observed as u8
            || (covers[i] > 0 && 2 * votes[i] >= covers[i]);
        let (x, y, z) = (i % grid.s, (i / grid.s) % grid.s, i / (grid.s * grid.s));
        out.set(x, y, z, if occupied { VoxelState::Observed } else { VoxelState::Unknown });
    }
    Ok((out, responses))
}

fn annotate_patch(e: BackendError, patch: usize) -> BackendError {
    match e {
        BackendError::Transport { attempts, detail } => BackendError::Transport {
            attempts,
            detail: format!("patch {patch}: {detail}"),
        },
        BackendError::Contract(msg) => BackendError::Contract(format!("patch {patch}: {msg}")),
        BackendError::Other(msg) => BackendError::Other(format!("patch {patch}: {msg}")),
    }
}

// --- built-in deterministic completer ------------------------------------------

/// Deterministic local completer: geodesic morphological closing of the
/// Observed set within the Unknown domain (Free voxels immovable), then
/// view-projected colors for the occupied voxels.
///
/// Dilation turns an Unknown voxel on when a 6-neighbor is on. Erosion turns
/// an added voxel off when a 6-neighbor inside the domain (or out of grid) is
/// off; Free neighbors count as boundary and do not erode. Observed voxels
/// are re-injected unconditionally.
#[derive(Debug, Clone)]
pub struct OracleCompleter {
    pub radius: usize,
}

impl Default for OracleCompleter {
    fn default() -> Self {
        Self { radius: 2 }
    }
}

const NEIGHBORS6: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

impl SceneCompleter for OracleCompleter {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let p = request.patch_size;
        let n = p * p * p;
        if request.states.len() != n {
            return Err(BackendError::Other(format!("patch states have {} entries, expected {n}", request.states.len())));
        }
        let idx = |x: usize, y: usize, z: usize| x + y * p + z * p * p;
        let mut on: Vec<bool> = request.states.iter().map(|s| *s == VoxelState::Observed as u8).collect();

        // Geodesic dilation restricted to Unknown voxels.
        for _ in 0..self.radius {
            let prev = on.clone();
            for z in 0..p {
                for y in 0..p {
                    for x in 0..p {
                        let i = idx(x, y, z);
                        if prev[i] || request.states[i] != VoxelState::Unknown as u8 {
                            continue;
                        }
                        let lit = NEIGHBORS6.iter().any(|d| {
                            let (nx, ny, nz) = (x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]);
                            nx >= 0
                                && ny >= 0
                                && nz >= 0
                                && (nx as usize) < p
                                && (ny as usize) < p
                                && (nz as usize) < p
                                && prev[idx(nx as usize, ny as usize, nz as usize)]
                        });
                        if lit {
                            on[i] = true;
                        }
                    }
                }
            }
        }
        // Erosion: off neighbors inside the domain erode, Free neighbors do not.
        for _ in 0..self.radius {
            let prev = on.clone();
            for z in 0..p {
                for y in 0..p {
                    for x in 0..p {
                        let i = idx(x, y, z);
                        if !prev[i] {
                            continue;
                        }
                        let eroded = NEIGHBORS6.iter().any(|d| {
                            let (nx, ny, nz) = (x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]);
                            if nx < 0 || ny < 0 || nz < 0 || nx as usize >= p || ny as usize >= p || nz as usize >= p {
                                return true; // out of patch counts as off
                            }
                            let ni = idx(nx as usize, ny as usize, nz as usize);
                            !prev[ni] && request.states[ni] != VoxelState::Free as u8
                        });
                        if eroded {
                            on[i] = false;
                        }
                    }
                }
            }
        }
        // Re-inject the observed set.
        for (i, s) in request.states.iter().enumerate() {
            if *s == VoxelState::Observed as u8 {
                on[i] = true;
            }
        }

        // Appearance: confidence-weighted average over crops that pass the
        // depth-visibility test; gray 0.5 when no crop sees the voxel.
        let confidences: Vec<_> = request.crops.iter().map(|c| depth_confidence(&c.depth, 0.5)).collect();
        let mut attributes = vec![None; n];
        for z in 0..p {
            for y in 0..p {
                for x in 0..p {
                    let i = idx(x, y, z);
                    if !on[i] {
                        continue;
                    }
                    let center = request.world_origin
                        + Vector3::new(
                            (x as f64 + 0.5) * request.pitch,
                            (y as f64 + 0.5) * request.pitch,
                            (z as f64 + 0.5) * request.pitch,
                        );
                    let mut acc = [0.0f64; 3];
                    let mut wsum = 0.0f64;
                    for (crop, conf) in request.crops.iter().zip(&confidences) {
                        let Some(pd) = project(&center, &crop.intrinsics, &crop.pose) else { continue };
                        let Some((px, py)) = nearest_pixel(pd.pixel.x, pd.pixel.y, crop.depth.width, crop.depth.height) else {
                            continue;
                        };
                        if !crop.depth.is_valid(px, py) {
                            continue;
                        }
                        if (pd.depth - crop.depth.get(px, py)).abs() > 2.0 * request.pitch {
                            continue;
                        }
                        let w = conf.get(px, py).max(1e-4) as f64;
                        let rgb = crop.rgb.sample_bilinear(pd.pixel.x, pd.pixel.y);
                        for c in 0..3 {
                            acc[c] += w * rgb[c] as f64;
                        }
                        wsum += w;
                    }
                    let color = if wsum > 0.0 {
                        [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]
                    } else {
                        [0.5; 3]
                    };
                    attributes[i] = Some(VoxelAttributes { color, opacity: 1.0, scale: request.pitch });
                }
            }
        }
        Ok(CompletionResponse { occupancy: on, attributes: Some(attributes) })
    }
}

// --- blending -------------------------------------------------------------------

/// Triangle hat window over a patch axis: 0 at the border, 1 at the core.
#[inline]
fn hat(local: usize, p: usize) -> f64 {
    let s = (local as f64 + 0.5) / p as f64;
    1.0 - (2.0 * s - 1.0).abs()
}

/// Blends per-voxel attributes from overlapping patches with normalized
/// trilinear hat weights, producing the scene latent over the completed grid.
pub fn blend_patch_latents(
    completed: &OccupancyGrid,
    patches: &PatchSet,
    responses: &[CompletionResponse],
) -> SceneLatent {
    let p = patches.patch_size;
    let n = completed.s * completed.s * completed.s;
    let mut wsum = vec![0.0f64; n];
    let mut color = vec![[0.0f64; 3]; n];
    let mut opacity = vec![0.0f64; n];
    let mut scale = vec![0.0f64; n];
    for (patch, response) in patches.patches.iter().zip(responses) {
        let Some(attrs) = &response.attributes else { continue };
        for lz in 0..p {
            for ly in 0..p {
                for lx in 0..p {
                    let Some(attr) = &attrs[lx + ly * p + lz * p * p] else { continue };
                    let gi = completed.index(patch.min_corner[0] + lx, patch.min_corner[1] + ly, patch.min_corner[2] + lz);
                    let w = hat(lx, p) * hat(ly, p) * hat(lz, p);
                    wsum[gi] += w;
                    for c in 0..3 {
                        color[gi][c] += w * attr.color[c];
                    }
                    opacity[gi] += w * attr.opacity;
                    scale[gi] += w * attr.scale;
                }
            }
        }
    }
    let mut latent = SceneLatent {
        s: completed.s,
        origin: completed.origin,
        pitch: completed.pitch,
        indices: Vec::new(),
        colors: Vec::new(),
        opacities: Vec::new(),
        scales: Vec::new(),
    };
    for z in 0..completed.s {
        for y in 0..completed.s {
            for x in 0..completed.s {
                if completed.get(x, y, z) != VoxelState::Observed {
                    continue;
                }
                let gi = completed.index(x, y, z);
                latent.indices.push([x as u32, y as u32, z as u32]);
                if wsum[gi] > 0.0 {
                    let w = wsum[gi];
                    latent.colors.push([color[gi][0] / w, color[gi][1] / w, color[gi][2] / w]);
                    latent.opacities.push((opacity[gi] / w).clamp(1e-4, 1.0));
                    latent.scales.push(scale[gi] / w);
                } else {
                    latent.colors.push([0.5; 3]);
                    latent.opacities.push(1.0);
                    latent.scales.push(completed.pitch);
                }
            }
        }
    }
    latent
}

/// Carries optimized appearance from the previous iteration's latent into a
/// freshly built one by nearest-voxel transfer.
pub fn transfer_latent_appearance(prev: &SceneLatent, next: &mut SceneLatent) {
    let lookup: HashMap<[u32; 3], usize> = prev.indices.iter().enumerate().map(|(i, idx)| (*idx, i)).collect();
    for i in 0..next.len() {
        let center = next.voxel_center(i);
        let rel = (center - prev.origin) / prev.pitch;
        let (x, y, z) = (rel.x.floor(), rel.y.floor(), rel.z.floor());
        if x < 0.0 || y < 0.0 || z < 0.0 {
            continue;
        }
        let key = [x as u32, y as u32, z as u32];
        if key.iter().any(|v| *v as usize >= prev.s) {
            continue;
        }
        if let Some(pi) = lookup.get(&key) {
            next.colors[i] = prev.colors[*pi];
            next.opacities[i] = prev.opacities[*pi];
        }
    }
}

// --- test-time optimization ------------------------------------------------------

/// A posed target view for the photometric refinement.
#[derive(Debug, Clone)]
pub struct TtoView<'a> {
    pub image: &'a ImageRgb,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TtoConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub optimize_opacity: bool,
    /// Optimization render width; height follows each view's aspect ratio.
    pub render_size: usize,
}

impl Default for TtoConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            learning_rate: 1.0,
            weights: LossWeights::default(),
            optimize_opacity: false,
            render_size: 256,
        }
    }
}

/// Gradient descent on per-voxel color (optionally opacity) against all
/// views, with halving-on-increase line search so the recorded loss sequence
/// is non-increasing. Returns the refined latent and the loss trace
/// (initial loss first, then one entry per step).
pub fn test_time_optimize(
    latent: &SceneLatent,
    views: &[TtoView],
    cfg: &TtoConfig,
) -> Result<(SceneLatent, Vec<f64>), EvoError> {
    if views.is_empty() {
        return Err(EvoError::NoViews);
    }
    if cfg.weights.lpips != 0.0 {
        return Err(EvoError::Config("perceptual loss requires a remote loss backend; weight must be 0 natively".into()));
    }
    // Pre-scale the targets and cameras to the optimization resolution.
    struct Prepared {
        target: FrameF64,
        k: CameraIntrinsics,
        pose: CameraPose,
        width: usize,
        height: usize,
    }
    let prepared: Vec<Prepared> = views
        .iter()
        .map(|v| {
            let (w0, h0) = (v.image.width, v.image.height);
            let rw = cfg.render_size.min(w0).max(8);
            let rh = ((h0 as f64 * rw as f64 / w0 as f64).round() as usize).max(8);
            Prepared {
                target: FrameF64::from_image(&v.image.resize_bilinear(rw, rh)),
                k: v.intrinsics.scaled_to(rw, rh),
                pose: v.pose,
                width: rw,
                height: rh,
            }
        })
        .collect();

    let loss_of = |lat: &SceneLatent, step: usize| -> Result<f64, EvoError> {
        let mut total = 0.0f64;
        for (vi, pv) in prepared.iter().enumerate() {
            let frame = render(lat, &pv.k, &pv.pose, pv.width, pv.height)?;
            let l = photometric_loss(&[frame.rgb], &[pv.target.clone()], &cfg.weights)?;
            if !l.is_finite() {
                return Err(EvoError::NumericAbort { step, view: vi });
            }
            total += l;
        }
        Ok(total)
    };

    let mut current = latent.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut loss_now = loss_of(&current, 0)?;
    losses.push(loss_now);

    for step in 0..cfg.steps {
        // Accumulate gradients over all views at the current point.
        let mut d_color = vec![[0.0f64; 3]; current.len()];
        let mut d_opacity = vec![0.0f64; current.len()];
        for (vi, pv) in prepared.iter().enumerate() {
            let frame = render(&current, &pv.k, &pv.pose, pv.width, pv.height)?;
            let l = photometric_loss(&[frame.rgb.clone()], &[pv.target.clone()], &cfg.weights)?;
            if !l.is_finite() {
                return Err(EvoError::NumericAbort { step, view: vi });
            }
            let d_rgb = photometric_grad(&frame.rgb, &pv.target, &cfg.weights)?;
            let grads = render_backward(&current, &pv.k, &pv.pose, pv.width, pv.height, &d_rgb);
            for i in 0..current.len() {
                for c in 0..3 {
                    d_color[i][c] += grads.d_color[i][c];
                }
                d_opacity[i] += grads.d_opacity[i];
            }
        }

        // Halving-on-increase line search.
        let mut lr = cfg.learning_rate;
        let mut accepted = false;
        for _ in 0..24 {
            let mut trial = current.clone();
            for i in 0..trial.len() {
                for c in 0..3 {
                    trial.colors[i][c] = (trial.colors[i][c] - lr * d_color[i][c]).clamp(0.0, 1.0);
                }
                if cfg.optimize_opacity {
                    trial.opacities[i] = (trial.opacities[i] - lr * d_opacity[i]).clamp(1e-4, 1.0);
                }
            }
            let trial_loss = loss_of(&trial, step + 1)?;
            if trial_loss <= loss_now {
                current = trial;
                loss_now = trial_loss;
                accepted = true;
                break;
            }
            lr /= 2.0;
        }
        losses.push(loss_now);
        if !accepted {
            break; // no descent direction at any step size; stop early
        }
    }
    Ok((current, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::{decompose_patches, CarveView};

    fn grid_with(s: usize, observed: &[(usize, usize, usize)], free: &[(usize, usize, usize)]) -> OccupancyGrid {
        let mut g = OccupancyGrid::new(s, Vector3::zeros(), 0.1).unwrap();
        for (x, y, z) in observed {
            g.set(*x, *y, *z, VoxelState::Observed);
        }
        for (x, y, z) in free {
            g.set(*x, *y, *z, VoxelState::Free);
        }
        g
    }

    fn run_oracle(grid: &OccupancyGrid, p: usize, overlap: usize) -> (OccupancyGrid, Vec<CompletionResponse>) {
        let patches = decompose_patches(grid, p, overlap, &[]).unwrap();
        complete_structure(grid, &patches, &[], &OracleCompleter::default()).unwrap()
    }

    fn solid_cube(s: usize, lo: usize, hi: usize) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for z in lo..=hi {
            for y in lo..=hi {
                for x in lo..=hi {
                    v.push((x, y, z));
                }
            }
        }
        let _ = s;
        v
    }

    #[test]
    fn solid_cube_unchanged_by_closing() {
        let cube = solid_cube(12, 4, 7);
        let grid = grid_with(12, &cube, &[]);
        let (done, _) = run_oracle(&grid, 12, 0);
        let occupied: Vec<_> = (0..12usize.pow(3))
            .filter(|i| done.raw_states()[*i] == VoxelState::Observed as u8)
            .collect();
        assert_eq!(occupied.len(), cube.len(), "closing is identity on solids");
    }

    #[test]
    fn interior_hole_filled() {
        let mut cube = solid_cube(12, 4, 7);
        cube.retain(|c| *c != (5, 5, 5));
        let grid = grid_with(12, &cube, &[]);
        let (done, _) = run_oracle(&grid, 12, 0);
        assert_eq!(done.get(5, 5, 5), VoxelState::Observed, "interior hole must close");
    }

    #[test]
    fn notch_adjacent_to_free_not_filled() {
        // Slab with a notch voxel that carving already confirmed empty.
        // Hand enumeration of the 6-neighborhood: the notch is Free, so both
        // dilation and the final result must leave it off.
        let mut slab = Vec::new();
        for z in 4..=5 {
            for y in 2..=9 {
                for x in 2..=9 {
                    if (x, y, z) != (5, 5, 4) {
                        slab.push((x, y, z));
                    }
                }
            }
        }
        let grid = grid_with(12, &slab, &[(5, 5, 4)]);
        let (done, _) = run_oracle(&grid, 12, 0);
        assert_eq!(done.get(5, 5, 4), VoxelState::Free, "free voxels are immovable");
    }

    #[test]
    fn open_box_closes_and_preserves_observed() {
        // 6x6x6 shell missing its top face; the standalone oracle output is
        // the reference the patched path must reproduce exactly (single patch).
        let mut shell = Vec::new();
        let (lo, hi) = (3usize, 8usize);
        for z in lo..=hi {
            for y in lo..=hi {
                for x in lo..=hi {
                    let boundary = x == lo || x == hi || y == lo || y == hi || z == lo || z == hi;
                    let top = y == hi;
                    if boundary && !top {
                        shell.push((x, y, z));
                    }
                }
            }
        }
        let grid = grid_with(14, &shell, &[]);
        let (done, _) = run_oracle(&grid, 14, 0);
        // The opening is spanned: every top-face cell of the shell is occupied.
        for z in lo..=hi {
            for x in lo..=hi {
                assert_eq!(done.get(x, hi, z), VoxelState::Observed, "lid cell ({x},{},{z})", hi);
            }
        }
        // All original observed cells survive.
        for (x, y, z) in &shell {
            assert_eq!(done.get(*x, *y, *z), VoxelState::Observed);
        }
    }

    #[test]
    fn zero_unknown_grid_is_identity_for_any_backend() {
        // Every non-observed voxel is Free → nothing may change.
        let mut grid = OccupancyGrid::new(6, Vector3::zeros(), 0.1).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    grid.set(x, y, z, if x == 3 { VoxelState::Observed } else { VoxelState::Free });
                }
            }
        }
        struct GreedyBackend;
        impl SceneCompleter for GreedyBackend {
            fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
                // Tries to claim everything.
                Ok(CompletionResponse { occupancy: vec![true; req.states.len()], attributes: None })
            }
        }
        let patches = decompose_patches(&grid, 6, 0, &[]).unwrap();
        let (done, _) = complete_structure(&grid, &patches, &[], &GreedyBackend).unwrap();
        assert_eq!(done.count(VoxelState::Observed), grid.count(VoxelState::Observed));
        assert_eq!(done.count(VoxelState::Free), grid.count(VoxelState::Free));
    }

    #[test]
    fn clamp_violation_raises_contract_error() {
        struct AdversarialBackend;
        impl SceneCompleter for AdversarialBackend {
            fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
                Ok(CompletionResponse { occupancy: vec![false; req.states.len()], attributes: None })
            }
        }
        let grid = grid_with(6, &[(2, 2, 2)], &[]);
        let patches = decompose_patches(&grid, 6, 0, &[]).unwrap();
        let err = complete_structure(&grid, &patches, &[], &AdversarialBackend).unwrap_err();
        assert!(err.is_contract(), "expected contract error, got {err:?}");
    }

    #[test]
    fn patched_completion_matches_standalone_oracle_on_full_patch() {
        let mut shell = solid_cube(10, 3, 6);
        shell.retain(|(x, y, z)| *x == 3 || *x == 6 || *y == 3 || *y == 6 || *z == 3 || *z == 6);
        let grid = grid_with(10, &shell, &[]);
        // Single patch equals running the oracle on the whole grid.
        let (through_host, _) = run_oracle(&grid, 10, 0);
        let request = CompletionRequest {
            patch_size: 10,
            min_corner: [0, 0, 0],
            world_origin: grid.origin,
            pitch: grid.pitch,
            states: grid.raw_states().to_vec(),
            clamp_mask: grid.raw_states().iter().map(|s| *s == VoxelState::Observed as u8).collect(),
            crops: vec![],
        };
        let standalone = OracleCompleter::default().complete(&request).unwrap();
        for i in 0..10usize.pow(3) {
            let host_on = through_host.raw_states()[i] == VoxelState::Observed as u8;
            assert_eq!(host_on, standalone.occupancy[i], "voxel {i}");
        }
    }

    #[test]
    fn blend_single_patch_copies_attributes() {
        let grid = grid_with(6, &[(1, 2, 3)], &[]);
        let patches = decompose_patches(&grid, 6, 0, &[]).unwrap();
        let (done, responses) = complete_structure(&grid, &patches, &[], &OracleCompleter::default()).unwrap();
        let latent = blend_patch_latents(&done, &patches, &responses);
        assert_eq!(latent.len(), done.count(VoxelState::Observed));
        let i = latent.indices.iter().position(|v| *v == [1, 2, 3]).unwrap();
        assert_eq!(latent.colors[i], [0.5; 3], "no crops → gray");
        assert_eq!(latent.opacities[i], 1.0);
        assert_eq!(latent.scales[i], grid.pitch);
    }

    #[test]
    fn blend_symmetric_overlap_averages_colors() {
        // Two 4-wide patches overlapping by 2 on a 6 grid; a voxel at the
        // exact center of the overlap gets equal hat weights.
        let grid = grid_with(6, &[(3, 1, 1)], &[]);
        let patches = decompose_patches(&grid, 4, 2, &[]).unwrap();
        // Voxel (3,1,1): local x=3 in patch at corner 0 and local x=1 in
        // patch at corner 2 → hat(3,4)=hat(1,4) → symmetric.
        let mut responses = Vec::new();
        for patch in &patches.patches {
            let p = patches.patch_size;
            let n = p * p * p;
            let mut attrs = vec![None; n];
            let mut occ = vec![false; n];
            let [cx, cy, cz] = patch.min_corner;
            if (cx..cx + p).contains(&3) && (cy..cy + p).contains(&1) && (cz..cz + p).contains(&1) {
                let li = (3 - cx) + (1 - cy) * p + (1 - cz) * p * p;
                occ[li] = true;
                let color = if cx == 0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
                attrs[li] = Some(VoxelAttributes { color, opacity: 1.0, scale: 0.1 });
            }
            // Keep the clamp satisfied everywhere observed.
            for (i, s) in patch.states.iter().enumerate() {
                if *s == VoxelState::Observed as u8 {
                    occ[i] = true;
                }
            }
            responses.push(CompletionResponse { occupancy: occ, attributes: Some(attrs) });
        }
        let mut done = grid.clone();
        done.set(3, 1, 1, VoxelState::Observed);
        let latent = blend_patch_latents(&done, &patches, &responses);
        let i = latent.indices.iter().position(|v| *v == [3, 1, 1]).unwrap();
        let c = latent.colors[i];
        let contributing: Vec<_> = patches
            .patches
            .iter()
            .filter(|p| p.min_corner[0] <= 3 && 3 < p.min_corner[0] + 4)
            .collect();
        assert_eq!(contributing.len(), 2);
        assert!((c[0] - 0.5).abs() < 1e-9 && (c[2] - 0.5).abs() < 1e-9, "blend {c:?}");
    }

    #[test]
    fn hat_weight_normalization_covers_grid() {
        // Exhaustive weight-sum sweep over a layered patch layout: after
        // normalization every covered voxel's weights sum to 1 within 1e-9.
        let s = 24;
        let (p, overlap) = (12, 8);
        let corners = crate::occupancy::patch_corners(s, p, overlap).unwrap();
        for v in 0..s {
            let mut total = 0.0f64;
            let mut raw = Vec::new();
            for c in &corners {
                if (*c..*c + p).contains(&v) {
                    raw.push(hat(v - c, p));
                }
            }
            assert!(!raw.is_empty(), "voxel {v} uncovered");
            let sum: f64 = raw.iter().sum();
            assert!(sum > 0.0, "voxel {v} has zero raw weight");
            for w in &raw {
                total += w / sum;
            }
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn latent_save_load_round_trip() {
        let latent = SceneLatent {
            s: 4,
            origin: Vector3::new(0.25, -0.5, 1.0),
            pitch: 0.125,
            indices: vec![[0, 1, 2], [3, 3, 3]],
            colors: vec![[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]],
            opacities: vec![1.0, 0.5],
            scales: vec![0.125, 0.25],
        };
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("latent.json");
        let b = dir.path().join("latent.bin");
        latent.save(&j, &b).unwrap();
        let back = SceneLatent::load(&j, &b).unwrap();
        assert_eq!(latent, back);
    }

    fn tto_target_views(color: [f32; 3]) -> (ImageRgb, CameraIntrinsics, CameraPose) {
        let img = ImageRgb::filled(32, 32, color);
        let k = CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
        (img, k, CameraPose::identity())
    }

    #[test]
    fn tto_converged_latent_is_unchanged() {
        // Latent already matches the views: black everywhere except where the
        // latent splat renders; use the render itself as the target.
        let latent = SceneLatent {
            s: 2,
            origin: Vector3::new(-0.1, -0.1, 1.9),
            pitch: 0.1,
            indices: vec![[1, 1, 1]],
            colors: vec![[0.3, 0.6, 0.9]],
            opacities: vec![1.0],
            scales: vec![0.1],
        };
        let (_, k, pose) = tto_target_views([0.0; 3]);
        let frame = render(&latent, &k, &pose, 32, 32).unwrap();
        let target = frame.rgb.to_image();
        let views = [TtoView { image: &target, intrinsics: k, pose }];
        let cfg = TtoConfig { steps: 3, render_size: 32, ..Default::default() };
        let (out, losses) = test_time_optimize(&latent, &views, &cfg).unwrap();
        assert!(losses[0] < 1e-8, "already at the global minimum");
        for (a, b) in out.colors.iter().zip(&latent.colors) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tto_single_voxel_converges_toward_target_color() {
        // Red splat, blue target. The L1 gradient direction per channel is
        // sign(render - target) scaled by compositing weight: positive in R,
        // negative in B — descent moves red → blue.
        let latent = SceneLatent {
            s: 2,
            origin: Vector3::new(-0.1, -0.1, 1.9),
            pitch: 0.1,
            indices: vec![[1, 1, 1]],
            colors: vec![[1.0, 0.0, 0.0]],
            opacities: vec![1.0],
            scales: vec![0.4],
        };
        let (k, pose) = (CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap(), CameraPose::identity());
        // Target: what the latent would render if it were blue.
        let mut blue = latent.clone();
        blue.colors[0] = [0.05, 0.05, 0.95];
        let target = render(&blue, &k, &pose, 32, 32).unwrap().rgb.to_image();
        let views = [TtoView { image: &target, intrinsics: k, pose }];
        let cfg = TtoConfig { steps: 200, learning_rate: 0.1, render_size: 32, ..Default::default() };
        let (out, losses) = test_time_optimize(&latent, &views, &cfg).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12), "loss must not increase");
        let final_render = render(&out, &k, &pose, 32, 32).unwrap();
        let l1 = crate::rendering::loss_l1(&final_render.rgb, &FrameF64::from_image(&target)).unwrap();
        assert!(l1 < 0.05, "final per-pixel L1 {l1}");
        assert!(out.colors[0][2] > out.colors[0][0], "blue must dominate after descent: {:?}", out.colors[0]);
    }

    #[test]
    fn tto_rejects_lpips_weight_natively() {
        let latent = SceneLatent {
            s: 1,
            origin: Vector3::zeros(),
            pitch: 0.1,
            indices: vec![[0, 0, 0]],
            colors: vec![[0.5; 3]],
            opacities: vec![1.0],
            scales: vec![0.1],
        };
        let (img, k, pose) = tto_target_views([0.5; 3]);
        let views = [TtoView { image: &img, intrinsics: k, pose }];
        let cfg = TtoConfig {
            weights: LossWeights { l1: 1.0, lpips: 1.0, ssim: 1.0 },
            ..Default::default()
        };
        assert!(test_time_optimize(&latent, &views, &cfg).is_err());
    }

    #[test]
    fn transfer_appearance_by_nearest_voxel() {
        let prev = SceneLatent {
            s: 4,
            origin: Vector3::zeros(),
            pitch: 0.1,
            indices: vec![[1, 1, 1]],
            colors: vec![[0.9, 0.1, 0.2]],
            opacities: vec![0.8],
            scales: vec![0.1],
        };
        // New grid shifted slightly; voxel (0,0,0) of the new grid has its
        // center inside prev voxel (1,1,1).
        let mut next = SceneLatent {
            s: 4,
            origin: Vector3::new(0.1, 0.1, 0.1),
            pitch: 0.1,
            indices: vec![[0, 0, 0], [2, 2, 2]],
            colors: vec![[0.5; 3], [0.5; 3]],
            opacities: vec![1.0, 1.0],
            scales: vec![0.1, 0.1],
        };
        transfer_latent_appearance(&prev, &mut next);
        assert_eq!(next.colors[0], [0.9, 0.1, 0.2]);
        assert_eq!(next.opacities[0], 0.8);
        assert_eq!(next.colors[1], [0.5; 3], "no previous voxel there");
    }

    #[test]
    fn completion_view_data_crops_feed_oracle_colors() {
        // A frontal wall of observed voxels and one checker-textured view:
        // oracle colors must come from the image.
        let s = 4;
        let mut grid = OccupancyGrid::new(s, Vector3::new(-0.2, -0.2, 1.9), 0.1).unwrap();
        for y in 0..s {
            for x in 0..s {
                grid.set(x, y, 2, VoxelState::Observed);
            }
        }
        let k = CameraIntrinsics::new(60.0, 60.0, 15.5, 15.5, 32, 32).unwrap();
        let pose = CameraPose::identity();
        let mut img = ImageRgb::filled(32, 32, [0.0, 0.0, 0.0]);
        for y in 0..32 {
            for x in 0..32 {
                if x >= 16 {
                    img.set_pixel(x, y, [1.0, 0.0, 0.0]);
                }
            }
        }
        // Depth of each wall voxel center from the camera: z ≈ 2.15.
        let depth = DepthMap::constant(32, 32, 2.15);
        let views = [CompletionViewData { image: &img, depth: &depth, intrinsics: k, pose }];
        let carve_views = [CarveView { intrinsics: k, pose }];
        let patches = decompose_patches(&grid, s, 0, &carve_views).unwrap();
        let (done, responses) = complete_structure(&grid, &patches, &views, &OracleCompleter::default()).unwrap();
        let latent = blend_patch_latents(&done, &patches, &responses);
        // Wall voxel on the +x side should be red, -x side black.
        let right = latent.indices.iter().position(|v| *v == [3, 2, 2]).unwrap();
        let left = latent.indices.iter().position(|v| *v == [0, 2, 2]).unwrap();
        assert!(latent.colors[right][0] > 0.9, "{:?}", latent.colors[right]);
        assert!(latent.colors[left][0] < 0.1, "{:?}", latent.colors[left]);
    }
}

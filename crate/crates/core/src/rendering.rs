//! The differentiable rendering operator and the photometric losses, plus
//! depth/disparity rendering for view-synthesis conditioning.
//!
//! Occupied voxels are splatted as isotropic 2D Gaussians (screen radius from
//! scale/depth, 3-sigma cutoff), depth-sorted and alpha-composited. Pixel
//! values are affine in voxel colors with the per-splat compositing weight as
//! coefficient, which gives the closed-form color gradient used by test-time
//! optimization. All compositing and loss math runs in f64 so analytic
//! gradients survive comparison against central finite differences.

use crate::completion::SceneLatent;
use crate::error::EvoError;
use crate::geometry::{project, CameraIntrinsics, CameraPose, DepthMap};
use crate::imagebuf::ImageRgb;
use crate::meshing::TexturedMesh;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

/// Alpha below the composite threshold marks a pixel as background.
pub const ALPHA_VALID_THRESHOLD: f64 = 1e-4;

/// Float image plane used by the renderer and the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameF64 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl FrameF64 {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn from_image(img: &ImageRgb) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect(),
        }
    }

    pub fn to_image(&self) -> ImageRgb {
        ImageRgb {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect(),
        }
    }
}

/// Rendered RGBA-D frame.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub rgb: FrameF64,
    pub alpha: Vec<f64>,
    /// Per-pixel alpha-weighted mean splat depth; NaN where alpha ~ 0.
    pub depth: DepthMap,
}

/// Per-splat screen-space footprint shared by the forward and backward passes.
struct SplatScreen {
    center: Vector2<f64>,
    depth: f64,
    /// Screen-space standard deviation in pixels.
    sigma: f64,
    color: [f64; 3],
    opacity: f64,
    index: u32,
}

fn prepare_splats(latent: &SceneLatent, k: &CameraIntrinsics, pose: &CameraPose) -> Vec<SplatScreen> {
    let f_mean = (k.fx + k.fy) / 2.0;
    let mut out = Vec::with_capacity(latent.len());
    for i in 0..latent.len() {
        let center = latent.voxel_center(i);
        let Some(pd) = project(&center, k, pose) else { continue };
        let sigma = (f_mean * latent.scales[i] / pd.depth / 2.0).max(0.3);
        out.push(SplatScreen {
            center: pd.pixel,
            depth: pd.depth,
            sigma,
            color: latent.colors[i],
            opacity: latent.opacities[i],
            index: i as u32,
        });
    }
    out
}

/// Per-pixel lists of splat references, gathered from the 3-sigma bounding
/// boxes. Entries keep the splat order deterministic via the voxel index.
fn bin_splats(splats: &[SplatScreen], width: usize, height: usize) -> Vec<Vec<u32>> {
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); width * height];
    for (si, s) in splats.iter().enumerate() {
        let r = 3.0 * s.sigma;
        let x0 = (s.center.x - r).floor().max(0.0) as usize;
        let x1 = (s.center.x + r).ceil().min(width as f64 - 1.0) as usize;
        let y0 = (s.center.y - r).floor().max(0.0) as usize;
        let y1 = (s.center.y + r).ceil().min(height as f64 - 1.0) as usize;
        if s.center.x + r < 0.0 || s.center.y + r < 0.0 || x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                bins[y * width + x].push(si as u32);
            }
        }
    }
    bins
}

/// Splat contribution at a pixel: `opacity * exp(-d^2 / (2 sigma^2))`,
/// zero outside the 3-sigma cutoff. Opacity is at most 1, so alpha is too;
/// the reverse-scan opacity gradient never divides by (1 - alpha).
#[inline]
fn splat_alpha(s: &SplatScreen, px: f64, py: f64) -> f64 {
    let dx = px - s.center.x;
    let dy = py - s.center.y;
    let d2 = dx * dx + dy * dy;
    let cutoff = 9.0 * s.sigma * s.sigma;
    if d2 > cutoff {
        return 0.0;
    }
    s.opacity * (-d2 / (2.0 * s.sigma * s.sigma)).exp()
}

/// Renders the latent as depth-sorted alpha-composited Gaussian splats over a
/// black background. Deterministic: depth ties break by voxel index.
pub fn render(latent: &SceneLatent, k: &CameraIntrinsics, pose: &CameraPose, width: usize, height: usize) -> Result<RenderedFrame, EvoError> {
    if width == 0 || height == 0 {
        return Err(EvoError::Invalid("render target has zero size".into()));
    }
    let splats = prepare_splats(latent, k, pose);
    let bins = bin_splats(&splats, width, height);

    let mut rgb = FrameF64::new(width, height);
    let mut alpha = vec![0.0f64; width * height];
    let mut depth = DepthMap::invalid(width, height);

    let pixels: Vec<([f64; 3], f64, f64)> = (0..width * height)
        .into_par_iter()
        .map(|pi| {
            let px = (pi % width) as f64;
            let py = (pi / width) as f64;
            let mut order: Vec<u32> = bins[pi].clone();
            order.sort_unstable_by(|a, b| {
                let (sa, sb) = (&splats[*a as usize], &splats[*b as usize]);
                sa.depth.partial_cmp(&sb.depth).unwrap().then(sa.index.cmp(&sb.index))
            });
            let mut t = 1.0f64;
            let mut color = [0.0f64; 3];
            let mut depth_acc = 0.0f64;
            for si in &order {
                let s = &splats[*si as usize];
                let a = splat_alpha(s, px, py);
                if a <= 0.0 {
                    continue;
                }
                let w = a * t;
                for c in 0..3 {
                    color[c] += w * s.color[c];
                }
                depth_acc += w * s.depth;
                t *= 1.0 - a;
            }
            let acc_alpha = 1.0 - t;
            let d = if acc_alpha > ALPHA_VALID_THRESHOLD { depth_acc / acc_alpha } else { f64::NAN };
            (color, acc_alpha, d)
        })
        .collect();
    for (pi, (c, a, d)) in pixels.into_iter().enumerate() {
        rgb.data[pi] = c;
        alpha[pi] = a;
        depth.values[pi] = d;
    }
    Ok(RenderedFrame { rgb, alpha, depth })
}

/// Gradients of a scalar loss with respect to latent attributes, given the
/// upstream per-pixel gradient dL/d(rgb).
pub struct RenderGrads {
    pub d_color: Vec<[f64; 3]>,
    pub d_opacity: Vec<f64>,
}

/// Backward pass of [`render`]: accumulates dL/d(color_i) and dL/d(opacity_i)
/// through the alpha compositing. Colors are affine in the output, so the
/// color gradient is the accumulated compositing weight; the opacity gradient
/// follows the transmittance recurrence in a reverse scan. The pixel loop is
/// sequential so accumulation order is fixed.
pub fn render_backward(
    latent: &SceneLatent,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    width: usize,
    height: usize,
    d_rgb: &[[f64; 3]],
) -> RenderGrads {
    assert_eq!(d_rgb.len(), width * height);
    let splats = prepare_splats(latent, k, pose);
    let bins = bin_splats(&splats, width, height);
    let mut d_color = vec![[0.0f64; 3]; latent.len()];
    let mut d_opacity = vec![0.0f64; latent.len()];

    let mut order: Vec<u32> = Vec::new();
    let mut entries: Vec<(usize, f64, f64)> = Vec::new(); // (splat idx, alpha, gaussian weight)
    for pi in 0..width * height {
        if bins[pi].is_empty() {
            continue;
        }
        let g = d_rgb[pi];
        if g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0 {
            continue;
        }
        let px = (pi % width) as f64;
        let py = (pi / width) as f64;
        order.clear();
        order.extend_from_slice(&bins[pi]);
        order.sort_unstable_by(|a, b| {
            let (sa, sb) = (&splats[*a as usize], &splats[*b as usize]);
            sa.depth.partial_cmp(&sb.depth).unwrap().then(sa.index.cmp(&sb.index))
        });
        entries.clear();
        for si in &order {
            let s = &splats[*si as usize];
            let a = splat_alpha(s, px, py);
            if a > 0.0 {
                let gauss = a / s.opacity; // d(alpha)/d(opacity)
                entries.push((*si as usize, a, gauss));
            }
        }
        // Forward transmittances.
        let mut t = 1.0f64;
        let mut trans = Vec::with_capacity(entries.len() + 1);
        trans.push(t);
        for (_, a, _) in &entries {
            t *= 1.0 - a;
            trans.push(t);
        }
        // Color gradient: dL/dc_i = w_i * g, with w_i = a_i * T_i.
        for (j, (si, a, _)) in entries.iter().enumerate() {
            let w = a * trans[j];
            let voxel = splats[*si].index as usize;
            for c in 0..3 {
                d_color[voxel][c] += w * g[c];
            }
        }
        // Opacity gradient by reverse scan through T_{i+1} = T_i (1 - a_i).
        let mut g_t_next = 0.0f64;
        for (j, (si, a, gauss)) in entries.iter().enumerate().rev() {
            let s = &splats[*si];
            let t_i = trans[j];
            let g_dot_c: f64 = (0..3).map(|c| g[c] * s.color[c]).sum();
            let direct = g_dot_c * t_i;
            let indirect = -t_i * g_t_next;
            let d_alpha = direct + indirect;
            d_opacity[s.index as usize] += d_alpha * gauss;
            g_t_next = g_dot_c * a + g_t_next * (1.0 - a);
        }
    }
    RenderGrads { d_color, d_opacity }
}

// --- disparity ---------------------------------------------------------------

/// Normalized inverse depth; raw inverse depth preserved alongside.
/// Background (invalid) pixels are 0 in the normalized map.
#[derive(Debug, Clone)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl DisparityMap {
    pub fn to_depth_container(&self) -> DepthMap {
        DepthMap { width: self.width, height: self.height, values: self.normalized.clone() }
    }
}

/// Inverse depth normalized to [0,1] over valid pixels. A constant-disparity
/// map normalizes to 1.0 by convention; invalid pixels become 0.
pub fn to_disparity(d: &DepthMap) -> Result<DisparityMap, EvoError> {
    let mut raw = vec![f64::NAN; d.values.len()];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut any = false;
    for (i, v) in d.values.iter().enumerate() {
        if v.is_finite() && *v > 0.0 {
            let r = 1.0 / v;
            raw[i] = r;
            lo = lo.min(r);
            hi = hi.max(r);
            any = true;
        }
    }
    if !any {
        return Err(EvoError::Invalid("disparity requires at least one valid pixel".into()));
    }
    let range = hi - lo;
    let normalized = raw
        .iter()
        .map(|r| {
            if !r.is_finite() {
                0.0
            } else if range <= 0.0 {
                1.0
            } else {
                (r - lo) / range
            }
        })
        .collect();
    Ok(DisparityMap { width: d.width, height: d.height, raw, normalized })
}

// --- mesh depth rendering -----------------------------------------------------

/// Uniform-grid triangle index for ray casting.
pub struct TriGrid<'a> {
    mesh: &'a TexturedMesh,
    origin: Vector3<f64>,
    pitch: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> TriGrid<'a> {
    pub fn build(mesh: &'a TexturedMesh) -> Option<Self> {
        if mesh.triangles.is_empty() {
            return None;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &mesh.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let extent = hi - lo;
        let max_extent = extent.max().max(1e-9);
        let n = ((mesh.triangles.len() as f64).cbrt().ceil() as usize).clamp(4, 96);
        let pitch = max_extent / n as f64 * 1.0001;
        let dims = [
            ((extent.x / pitch).ceil() as usize).max(1),
            ((extent.y / pitch).ceil() as usize).max(1),
            ((extent.z / pitch).ceil() as usize).max(1),
        ];
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for (ti, tri) in mesh.triangles.iter().enumerate() {
            let (a, b, c) = (
                mesh.vertices[tri[0] as usize],
                mesh.vertices[tri[1] as usize],
                mesh.vertices[tri[2] as usize],
            );
            let tlo = a.inf(&b).inf(&c);
            let thi = a.sup(&b).sup(&c);
            let cell_of = |p: &Vector3<f64>, axis: usize| -> usize {
                (((p[axis] - lo[axis]) / pitch).floor() as isize).clamp(0, dims[axis] as isize - 1) as usize
            };
            for z in cell_of(&tlo, 2)..=cell_of(&thi, 2) {
                for y in cell_of(&tlo, 1)..=cell_of(&thi, 1) {
                    for x in cell_of(&tlo, 0)..=cell_of(&thi, 0) {
                        cells[x + y * dims[0] + z * dims[0] * dims[1]].push(ti as u32);
                    }
                }
            }
        }
        Some(Self { mesh, origin: lo, pitch, dims, cells })
    }

    /// Nearest intersection parameter t along `origin + t*dir`, t > 1e-9.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best = f64::INFINITY;
        crate::dda::walk_cells(&self.origin, self.pitch, self.dims, origin, dir, f64::INFINITY, |cell, t_exit| {
            let idx = cell[0] + cell[1] * self.dims[0] + cell[2] * self.dims[0] * self.dims[1];
            for ti in &self.cells[idx] {
                let tri = &self.mesh.triangles[*ti as usize];
                if let Some(t) = ray_triangle(
                    origin,
                    dir,
                    &self.mesh.vertices[tri[0] as usize],
                    &self.mesh.vertices[tri[1] as usize],
                    &self.mesh.vertices[tri[2] as usize],
                ) {
                    if t < best {
                        best = t;
                    }
                }
            }
            // Stop once a hit is known to precede every remaining cell.
            best > t_exit
        });
        best.is_finite().then_some(best)
    }
}

/// Möller–Trumbore, double-sided, returns the ray parameter.
pub fn ray_triangle(o: &Vector3<f64>, d: &Vector3<f64>, v0: &Vector3<f64>, v1: &Vector3<f64>, v2: &Vector3<f64>) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let pvec = d.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = o - v0;
    let u = tvec.dot(&pvec) * inv_det;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = d.dot(&qvec) * inv_det;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    (t > 1e-9).then_some(t)
}

/// Per-pixel nearest ray–triangle intersection depth. Misses are invalid.
pub fn render_depth(mesh: &TexturedMesh, k: &CameraIntrinsics, pose: &CameraPose, width: usize, height: usize) -> DepthMap {
    let mut out = DepthMap::invalid(width, height);
    let Some(grid) = TriGrid::build(mesh) else {
        return out;
    };
    let cam_center = pose.camera_center();
    let rot_t = pose.rotation.transpose();
    let rows: Vec<Vec<f64>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![f64::NAN; width];
            for (x, slot) in row.iter_mut().enumerate() {
                // Unit camera-frame z so the ray parameter equals depth.
                let dir_cam = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let dir = rot_t * dir_cam;
                if let Some(t) = grid.raycast(&cam_center, &dir) {
                    *slot = t;
                }
            }
            row
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        out.values[y * width..(y + 1) * width].copy_from_slice(&row);
    }
    out
}

// --- losses -------------------------------------------------------------------

/// Mean absolute difference over pixels and channels.
pub fn loss_l1(a: &FrameF64, b: &FrameF64) -> Result<f64, EvoError> {
    check_sizes(a, b)?;
    let mut acc = 0.0f64;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            acc += (pa[c] - pb[c]).abs();
        }
    }
    Ok(acc / (a.data.len() as f64 * 3.0))
}

/// dL1/da. sign(0) contributes 0.
pub fn loss_l1_grad(a: &FrameF64, b: &FrameF64) -> Result<Vec<[f64; 3]>, EvoError> {
    check_sizes(a, b)?;
    let n = a.data.len() as f64 * 3.0;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(pa, pb)| {
            let mut g = [0.0f64; 3];
            for c in 0..3 {
                let d = pa[c] - pb[c];
                g[c] = if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 };
            }
            g
        })
        .collect())
}

fn check_sizes(a: &FrameF64, b: &FrameF64) -> Result<(), EvoError> {
    if a.width != b.width || a.height != b.height {
        return Err(EvoError::Invalid(format!(
            "image size mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Separable Gaussian window with border renormalization: near the border
/// the kernel is cropped and rescaled to sum to one, which keeps constant
/// images exactly constant and the statistics well defined on tiny frames.
struct Window {
    taps: Vec<f64>,
    radius: usize,
}

impl Window {
    fn gaussian() -> Self {
        let radius = SSIM_WINDOW / 2;
        let taps: Vec<f64> = (0..SSIM_WINDOW)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        Self { taps: taps.into_iter().map(|t| t / sum).collect(), radius }
    }

    /// 1-D blur along a line of `n` samples with stride `stride`.
    fn blur_line(&self, src: &[f64], dst: &mut [f64], n: usize, offset: usize, stride: usize, transpose: bool) {
        // Precompute in-range weight sums per position? n is small; direct loop.
        for p in 0..n {
            let lo = p.saturating_sub(self.radius);
            let hi = (p + self.radius).min(n - 1);
            if transpose {
                // out[q] = sum_p taps(q-p)/N(p) * in[p]  — scatter form gathered.
                let mut acc = 0.0;
                for q in lo..=hi {
                    let nlo = q.saturating_sub(self.radius);
                    let nhi = (q + self.radius).min(n - 1);
                    let norm: f64 = self.taps[self.radius + nlo - q + 0..].iter().take(nhi - nlo + 1).sum();
                    let tap = self.taps[self.radius + p - q];
                    acc += tap / norm * src[offset + q * stride];
                }
                dst[offset + p * stride] = acc;
            } else {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for q in lo..=hi {
                    let tap = self.taps[self.radius + q - p];
                    acc += tap * src[offset + q * stride];
                    norm += tap;
                }
                dst[offset + p * stride] = acc / norm;
            }
        }
    }

    fn blur_plane(&self, src: &[f64], width: usize, height: usize, transpose: bool) -> Vec<f64> {
        let mut tmp = vec![0.0f64; src.len()];
        let mut out = vec![0.0f64; src.len()];
        for y in 0..height {
            self.blur_line(src, &mut tmp, width, y * width, 1, transpose);
        }
        for x in 0..width {
            self.blur_line(&tmp, &mut out, height, x, width, transpose);
        }
        out
    }
}

fn channel_plane(f: &FrameF64, c: usize) -> Vec<f64> {
    f.data.iter().map(|p| p[c]).collect()
}

/// Mean SSIM over an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
/// dynamic range 1, averaged over the three channels.
pub fn loss_ssim(a: &FrameF64, b: &FrameF64) -> Result<f64, EvoError> {
    check_sizes(a, b)?;
    let w = Window::gaussian();
    let mut total = 0.0f64;
    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        total += ssim_channel(&w, &x, &y, a.width, a.height).0;
    }
    Ok(total / 3.0)
}

fn ssim_channel(w: &Window, x: &[f64], y: &[f64], width: usize, height: usize) -> (f64, Vec<f64>) {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_x = w.blur_plane(x, width, height, false);
    let mu_y = w.blur_plane(y, width, height, false);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let e_xx = w.blur_plane(&xx, width, height, false);
    let e_yy = w.blur_plane(&yy, width, height, false);
    let e_xy = w.blur_plane(&xy, width, height, false);
    let n = x.len();
    let mut ssim_map = vec![0.0f64; n];
    let mut acc = 0.0f64;
    for i in 0..n {
        let sx = e_xx[i] - mu_x[i] * mu_x[i];
        let sy = e_yy[i] - mu_y[i] * mu_y[i];
        let sxy = e_xy[i] - mu_x[i] * mu_y[i];
        let a1 = 2.0 * mu_x[i] * mu_y[i] + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1;
        let b2 = sx + sy + c2;
        let s = (a1 * a2) / (b1 * b2);
        ssim_map[i] = s;
        acc += s;
    }
    (acc / n as f64, ssim_map)
}

/// Analytic gradient of mean SSIM with respect to the first image.
pub fn loss_ssim_grad(a: &FrameF64, b: &FrameF64) -> Result<Vec<[f64; 3]>, EvoError> {
    check_sizes(a, b)?;
    let w = Window::gaussian();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (width, height) = (a.width, a.height);
    let n = a.data.len();
    let mut grads = vec![[0.0f64; 3]; n];
    for c in 0..3 {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let mu_x = w.blur_plane(&x, width, height, false);
        let mu_y = w.blur_plane(&y, width, height, false);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let e_xx = w.blur_plane(&xx, width, height, false);
        let e_yy = w.blur_plane(&yy, width, height, false);
        let e_xy = w.blur_plane(&xy, width, height, false);

        // Coefficient maps of dS/dmu_x, dS/dsigma_x2, dS/dsigma_xy.
        let mut d_mu = vec![0.0f64; n];
        let mut d_sx = vec![0.0f64; n];
        let mut d_sxy = vec![0.0f64; n];
        for i in 0..n {
            let sx = e_xx[i] - mu_x[i] * mu_x[i];
            let sy = e_yy[i] - mu_y[i] * mu_y[i];
            let sxy = e_xy[i] - mu_x[i] * mu_y[i];
            let a1 = 2.0 * mu_x[i] * mu_y[i] + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1;
            let b2 = sx + sy + c2;
            d_mu[i] = 2.0 * a2 * (mu_y[i] * b1 - mu_x[i] * a1) / (b1 * b1 * b2);
            d_sx[i] = -a1 * a2 / (b1 * b2 * b2);
            d_sxy[i] = 2.0 * a1 / (b1 * b2);
        }
        // sigma_x^2 = E[x^2] - mu_x^2 and sigma_xy = E[xy] - mu_x mu_y, where
        // E and mu share the window. Chain rule through the blurs:
        //   dL/dx = W^T[d_mu] + 2x ∘ W^T[d_sx] - 2 W^T[d_sx ∘ mu_x]
        //         + y ∘ W^T[d_sxy] - W^T[d_sxy ∘ mu_y], all / n.
        let wt_mu = w.blur_plane(&d_mu, width, height, true);
        let wt_sx = w.blur_plane(&d_sx, width, height, true);
        let sx_mux: Vec<f64> = d_sx.iter().zip(&mu_x).map(|(a, b)| a * b).collect();
        let wt_sx_mux = w.blur_plane(&sx_mux, width, height, true);
        let wt_sxy = w.blur_plane(&d_sxy, width, height, true);
        let sxy_muy: Vec<f64> = d_sxy.iter().zip(&mu_y).map(|(a, b)| a * b).collect();
        let wt_sxy_muy = w.blur_plane(&sxy_muy, width, height, true);
        for i in 0..n {
            grads[i][c] = (wt_mu[i] + 2.0 * x[i] * wt_sx[i] - 2.0 * wt_sx_mux[i] + y[i] * wt_sxy[i]
                - wt_sxy_muy[i])
                / (n as f64 * 3.0);
        }
    }
    Ok(grads)
}

/// Photometric loss weights (lambda1: L1, lambda2: perceptual — remote
/// backends only, lambda3: 1-SSIM).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub lpips: f64,
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, lpips: 0.0, ssim: 1.0 }
    }
}

/// Multi-view reconstruction loss: sum over views of
/// `l1_weight * L1 + ssim_weight * (1 - SSIM)`. The perceptual term requires
/// a remote loss backend and must be zero on the native path.
pub fn photometric_loss(frames: &[FrameF64], targets: &[FrameF64], weights: &LossWeights) -> Result<f64, EvoError> {
    if weights.lpips != 0.0 {
        return Err(EvoError::Config("perceptual loss weight must be 0 on the native path".into()));
    }
    if frames.len() != targets.len() {
        return Err(EvoError::Invalid("frame/target count mismatch".into()));
    }
    let mut total = 0.0;
    for (f, t) in frames.iter().zip(targets) {
        total += weights.l1 * loss_l1(f, t)? + weights.ssim * (1.0 - loss_ssim(f, t)?);
    }
    Ok(total)
}

/// Per-pixel gradient of `l1_weight * L1 + ssim_weight * (1 - SSIM)` for one view.
pub fn photometric_grad(frame: &FrameF64, target: &FrameF64, weights: &LossWeights) -> Result<Vec<[f64; 3]>, EvoError> {
    let gl1 = loss_l1_grad(frame, target)?;
    let gss = loss_ssim_grad(frame, target)?;
    Ok(gl1
        .iter()
        .zip(&gss)
        .map(|(a, s)| {
            let mut g = [0.0f64; 3];
            for c in 0..3 {
                g[c] = weights.l1 * a[c] - weights.ssim * s[c];
            }
            g
        })
        .collect())
}

//! Mesh extraction and texturing: Marching Cubes over the completed
//! occupancy, multi-view texture baking, and GLB/OBJ export.
//!
//! The field handed to Marching Cubes is `0.5*(binary + boxfilter3(binary))`:
//! occupied samples stay above the 0.5 iso-level and empty samples below, so
//! thin sheets and isolated voxels survive, while the smoothed term modulates
//! crossing positions enough to suppress terracing. Because binary values are
//! 0/1 and the box filter divides by 27, no sample can ever equal the
//! iso-level exactly, so crossings are strictly interior to lattice edges.
//!
//! Each cell's surface is built by pairing face crossings into segments
//! (ambiguous faces resolved by the asymptotic decider on the bilinear
//! saddle value, a face-local rule both neighbors compute identically),
//! walking the segments into closed loops, and fanning each loop around its
//! centroid. Shared faces therefore produce identical segment sets on both
//! sides, which makes closed digitized solids watertight.

use crate::error::EvoError;
use crate::geometry::{project, CameraIntrinsics, CameraPose, DepthMap};
use crate::imagebuf::ImageRgb;
use crate::prior::nearest_pixel;
use nalgebra::Vector3;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct TexturedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TexturedMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<(), EvoError> {
        let n = self.vertices.len() as u32;
        if self.colors.len() != self.vertices.len() {
            return Err(EvoError::Invalid("mesh colors out of sync with vertices".into()));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != self.vertices.len() {
                return Err(EvoError::Invalid("mesh normals out of sync with vertices".into()));
            }
        }
        for v in &self.vertices {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(EvoError::Invalid("non-finite vertex".into()));
            }
        }
        for t in &self.triangles {
            if t.iter().any(|i| *i >= n) {
                return Err(EvoError::Invalid(format!("triangle index out of range: {t:?}")));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: &[u32; 3]) -> f64 {
        let a = self.vertices[t[0] as usize];
        let b = self.vertices[t[1] as usize];
        let c = self.vertices[t[2] as usize];
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    /// Map of undirected edge → incident triangle count.
    pub fn edge_counts(&self) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge borders exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_counts().values().all(|c| *c == 2)
    }

    /// Area-weighted vertex normals.
    pub fn compute_normals(&mut self) {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let a = self.vertices[t[0] as usize];
            let b = self.vertices[t[1] as usize];
            let c = self.vertices[t[2] as usize];
            let n = (b - a).cross(&(c - a));
            for i in t {
                normals[*i as usize] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-15 {
                *n /= len;
            }
        }
        self.normals = Some(normals);
    }
}

// --- marching cubes -------------------------------------------------------------

const ISO: f64 = 0.5;

/// Corner i sits at offset (i&1, i>>1&1, i>>2&1).
/// Canonical cube edges as corner pairs.
const EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7), // x
    (0, 2), (1, 3), (4, 6), (5, 7), // y
    (0, 4), (1, 5), (2, 6), (3, 7), // z
];

/// Faces as cyclic corner quadruples with the edge id between consecutive
/// corners (last edge closes the cycle).
const FACES: [([usize; 4], [usize; 4]); 6] = [
    ([0, 2, 6, 4], [4, 10, 6, 8]),  // x = 0
    ([1, 3, 7, 5], [5, 11, 7, 9]),  // x = 1
    ([0, 1, 5, 4], [0, 9, 2, 8]),   // y = 0
    ([2, 3, 7, 6], [1, 11, 3, 10]), // y = 1
    ([0, 1, 3, 2], [0, 5, 1, 4]),   // z = 0
    ([4, 5, 7, 6], [2, 7, 3, 6]),   // z = 1
];

/// Guarded smoothing: `0.5*(binary + mean of the 3^3 neighborhood)` with
/// out-of-grid treated as empty. Occupied samples stay > 0.5 and empty ones
/// < 0.5, and no value can equal the iso-level exactly.
pub fn smoothed_field(s: usize, occupied: &[bool]) -> Vec<f64> {
    assert_eq!(occupied.len(), s * s * s);
    let at = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= s as i64 || y >= s as i64 || z >= s as i64 {
            0.0
        } else if occupied[x as usize + y as usize * s + z as usize * s * s] {
            1.0
        } else {
            0.0
        }
    };
    let mut out = vec![0.0f64; s * s * s];
    for z in 0..s as i64 {
        for y in 0..s as i64 {
            for x in 0..s as i64 {
                let mut acc = 0.0;
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            acc += at(x + dx, y + dy, z + dz);
                        }
                    }
                }
                out[x as usize + y as usize * s + z as usize * s * s] =
                    0.5 * (at(x, y, z) + acc / 27.0);
            }
        }
    }
    out
}

/// Trilinear gradient of the 8 corner values at local point (u,v,w).
fn trilinear_gradient(f: &[f64; 8], u: f64, v: f64, w: f64) -> Vector3<f64> {
    let lerp2 = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    // d/du: difference along x of bilinear interpolations in (v,w).
    let fx0 = lerp2(lerp2(f[0], f[2], v), lerp2(f[4], f[6], v), w);
    let fx1 = lerp2(lerp2(f[1], f[3], v), lerp2(f[5], f[7], v), w);
    let fy0 = lerp2(lerp2(f[0], f[1], u), lerp2(f[4], f[5], u), w);
    let fy1 = lerp2(lerp2(f[2], f[3], u), lerp2(f[6], f[7], u), w);
    let fz0 = lerp2(lerp2(f[0], f[1], u), lerp2(f[2], f[3], u), v);
    let fz1 = lerp2(lerp2(f[4], f[5], u), lerp2(f[6], f[7], u), v);
    Vector3::new(fx1 - fx0, fy1 - fy0, fz1 - fz0)
}

/// Extracts the iso-surface of the occupied field at level 0.5. Vertices lie
/// on lattice edges (lattice points are voxel centers). Closed digitized
/// solids that stay off the grid boundary produce watertight meshes.
pub fn marching_cubes(s: usize, origin: Vector3<f64>, pitch: f64, occupied: &[bool]) -> TexturedMesh {
    let mut mesh = TexturedMesh::default();
    if s < 2 {
        return mesh;
    }
    let field = smoothed_field(s, occupied);
    let lattice = |x: usize, y: usize, z: usize| field[x + y * s + z * s * s];
    let world = |x: usize, y: usize, z: usize| {
        origin + Vector3::new((x as f64 + 0.5) * pitch, (y as f64 + 0.5) * pitch, (z as f64 + 0.5) * pitch)
    };
    // Global vertex per crossed lattice edge: (min lattice point, axis).
    let mut edge_vertices: HashMap<(u32, u32, u32, u8), u32> = HashMap::new();

    for cz in 0..s - 1 {
        for cy in 0..s - 1 {
            for cx in 0..s - 1 {
                let mut f = [0.0f64; 8];
                let mut config = 0usize;
                for (i, fv) in f.iter_mut().enumerate() {
                    let (dx, dy, dz) = (i & 1, (i >> 1) & 1, (i >> 2) & 1);
                    *fv = lattice(cx + dx, cy + dy, cz + dz);
                    if *fv > ISO {
                        config |= 1 << i;
                    }
                }
                if config == 0 || config == 0xFF {
                    continue;
                }
                emit_cell(&mut mesh, &mut edge_vertices, cx, cy, cz, &f, config, &world);
            }
        }
    }
    mesh.colors = vec![[0.5; 3]; mesh.vertices.len()];
    mesh.compute_normals();
    mesh
}

#[allow(clippy::too_many_arguments)]
fn emit_cell<W: Fn(usize, usize, usize) -> Vector3<f64>>(
    mesh: &mut TexturedMesh,
    edge_vertices: &mut HashMap<(u32, u32, u32, u8), u32>,
    cx: usize,
    cy: usize,
    cz: usize,
    f: &[f64; 8],
    config: usize,
    world: &W,
) {
    let inside = |c: usize| config >> c & 1 == 1;
    let crossed = |e: usize| inside(EDGES[e].0) != inside(EDGES[e].1);

    // Pair face crossings into segments.
    let mut segments: Vec<(usize, usize)> = Vec::with_capacity(8);
    for (corners, edges) in &FACES {
        let cross: Vec<usize> = edges.iter().copied().filter(|e| crossed(*e)).collect();
        match cross.len() {
            0 => {}
            2 => segments.push((cross[0], cross[1])),
            4 => {
                // Alternating corners; decide whether the inside diagonal is
                // connected via the bilinear saddle value.
                let (f0, f1, f2, f3) = (f[corners[0]], f[corners[1]], f[corners[2]], f[corners[3]]);
                let denom = f0 + f2 - f1 - f3;
                let inside_pair_connected = if denom.abs() < 1e-300 {
                    false
                } else {
                    let saddle = (f0 * f2 - f1 * f3) / denom;
                    let inside0 = inside(corners[0]);
                    // saddle > iso joins the above-iso diagonal.
                    if inside0 {
                        saddle > ISO
                    } else {
                        // inside pair is corners[1], corners[3]
                        saddle > ISO
                    }
                };
                // Edges in cyclic order: E0..E3; wrapping corner a_i pairs
                // (E_{i-1}, E_i).
                let wrap = |i: usize| (edges[(i + 3) % 4], edges[i]);
                let inside0 = inside(corners[0]);
                // Wrap the corners that the contours cut off: the connected
                // diagonal keeps its corners joined, so segments wrap the
                // other diagonal.
                let (a, b) = if inside_pair_connected == inside0 {
                    // wrap corners 1 and 3
                    (wrap(1), wrap(3))
                } else {
                    // wrap corners 0 and 2
                    (wrap(0), wrap(2))
                };
                segments.push(a);
                segments.push(b);
            }
            _ => unreachable!("a face has 0, 2 or 4 crossings"),
        }
    }
    if segments.is_empty() {
        return;
    }

    // Each crossed edge belongs to exactly two segments; walk closed loops.
    let mut incidence: [[Option<usize>; 2]; 12] = [[None; 2]; 12];
    for (si, (a, b)) in segments.iter().enumerate() {
        for e in [*a, *b] {
            if incidence[e][0].is_none() {
                incidence[e][0] = Some(si);
            } else {
                debug_assert!(incidence[e][1].is_none());
                incidence[e][1] = Some(si);
            }
        }
    }
    let mut seg_used = vec![false; segments.len()];
    let corner_lattice = |c: usize| -> (u32, u32, u32) {
        ((cx + (c & 1)) as u32, (cy + ((c >> 1) & 1)) as u32, (cz + ((c >> 2) & 1)) as u32)
    };
    for start in 0..segments.len() {
        if seg_used[start] {
            continue;
        }
        // Walk the loop as a sequence of crossed edges.
        let mut loop_edges: Vec<usize> = Vec::with_capacity(8);
        let mut seg = start;
        let mut edge = segments[start].0;
        loop {
            seg_used[seg] = true;
            loop_edges.push(edge);
            let (a, b) = segments[seg];
            let next_edge = if a == edge { b } else { a };
            let [s0, s1] = incidence[next_edge];
            let next_seg = if s0 == Some(seg) { s1 } else { s0 }.expect("crossed edge has two segments");
            if next_seg == start && next_edge == segments[start].0 {
                loop_edges.push(next_edge);
                break;
            }
            if seg_used[next_seg] {
                loop_edges.push(next_edge);
                break;
            }
            seg = next_seg;
            edge = next_edge;
        }
        // The walk records edges; the closing edge duplicates the start.
        if loop_edges.len() > 1 && loop_edges.first() == loop_edges.last() {
            loop_edges.pop();
        }
        if loop_edges.len() < 3 {
            continue;
        }

        // Vertex positions (and global ids) for the loop edges.
        let mut ids: Vec<u32> = Vec::with_capacity(loop_edges.len());
        let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(loop_edges.len());
        let mut local = Vec::with_capacity(loop_edges.len());
        for e in &loop_edges {
            let (ca, cb) = EDGES[*e];
            let la = corner_lattice(ca);
            let lb = corner_lattice(cb);
            let axis = if *e < 4 { 0u8 } else if *e < 8 { 1 } else { 2 };
            let key = (la.0.min(lb.0), la.1.min(lb.1), la.2.min(lb.2), axis);
            let t = (ISO - f[ca]) / (f[cb] - f[ca]);
            let pa = world(la.0 as usize, la.1 as usize, la.2 as usize);
            let pb = world(lb.0 as usize, lb.1 as usize, lb.2 as usize);
            let pos = pa + (pb - pa) * t;
            let id = *edge_vertices.entry(key).or_insert_with(|| {
                mesh.vertices.push(pos);
                (mesh.vertices.len() - 1) as u32
            });
            ids.push(id);
            positions.push(pos);
            // Local (u,v,w) within the cell for the gradient probe.
            let oa = Vector3::new((ca & 1) as f64, ((ca >> 1) & 1) as f64, ((ca >> 2) & 1) as f64);
            let ob = Vector3::new((cb & 1) as f64, ((cb >> 1) & 1) as f64, ((cb >> 2) & 1) as f64);
            local.push(oa + (ob - oa) * t);
        }

        // Orient the loop so triangle normals point outward (field decreases
        // outward, so outward is the negated trilinear gradient).
        let centroid_local: Vector3<f64> = local.iter().sum::<Vector3<f64>>() / local.len() as f64;
        let outward = -trilinear_gradient(f, centroid_local.x, centroid_local.y, centroid_local.z);
        let mut newell = Vector3::zeros();
        for i in 0..positions.len() {
            let a = positions[i];
            let b = positions[(i + 1) % positions.len()];
            newell += Vector3::new(
                (a.y - b.y) * (a.z + b.z),
                (a.z - b.z) * (a.x + b.x),
                (a.x - b.x) * (a.y + b.y),
            );
        }
        if newell.dot(&outward) < 0.0 {
            ids.reverse();
            positions.reverse();
        }

        // Centroid fan keeps the triangulation non-degenerate for non-convex loops.
        let centroid: Vector3<f64> = positions.iter().sum::<Vector3<f64>>() / positions.len() as f64;
        mesh.vertices.push(centroid);
        let cid = (mesh.vertices.len() - 1) as u32;
        for i in 0..ids.len() {
            let a = ids[i];
            let b = ids[(i + 1) % ids.len()];
            if a != b {
                mesh.triangles.push([cid, a, b]);
            }
        }
    }
}

// --- texture baking --------------------------------------------------------------

/// A posed observation used for baking, with its recency weight.
#[derive(Debug, Clone)]
pub struct BakeView<'a> {
    pub image: &'a ImageRgb,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    /// 1.0 for synthesized iterations, 0.7 for the seed image.
    pub recency_weight: f64,
}

/// Bakes per-vertex colors from every view that passes the depth-visibility
/// test (projected depth within `visibility_tolerance` — canonically 2*pitch
/// — of the rendered mesh depth), weighted by cos(view angle to the vertex
/// normal) times the recency weight. Vertices seen by no view are filled by
/// iterative neighbor averaging (Jacobi relaxation of the Laplace equation
/// with the seen vertices as boundary).
pub fn bake_textures(
    mesh: &TexturedMesh,
    views: &[BakeView],
    mesh_depths: &[DepthMap],
    visibility_tolerance: f64,
) -> Result<TexturedMesh, EvoError> {
    if views.is_empty() {
        return Err(EvoError::NoViews);
    }
    assert_eq!(views.len(), mesh_depths.len());
    let mut out = mesh.clone();
    if out.normals.is_none() {
        out.compute_normals();
    }
    let normals = out.normals.clone().unwrap();
    let tol = visibility_tolerance;
    let mut seen = vec![false; out.vertices.len()];
    for (vi, vertex) in out.vertices.iter().enumerate() {
        let mut acc = [0.0f64; 3];
        let mut wsum = 0.0f64;
        for (view, depth) in views.iter().zip(mesh_depths) {
            let Some(pd) = project(vertex, &view.intrinsics, &view.pose) else { continue };
            let Some((px, py)) = nearest_pixel(pd.pixel.x, pd.pixel.y, depth.width, depth.height) else { continue };
            if !depth.is_valid(px, py) || (pd.depth - depth.get(px, py)).abs() > tol {
                continue;
            }
            let to_cam = (view.pose.camera_center() - vertex).normalize();
            let cos = normals[vi].dot(&to_cam);
            if cos <= 0.0 {
                continue;
            }
            let w = cos * view.recency_weight;
            let rgb = view.image.sample_bilinear(pd.pixel.x, pd.pixel.y);
            for c in 0..3 {
                acc[c] += w * rgb[c] as f64;
            }
            wsum += w;
        }
        if wsum > 0.0 {
            out.colors[vi] = [(acc[0] / wsum) as f32, (acc[1] / wsum) as f32, (acc[2] / wsum) as f32];
            seen[vi] = true;
        }
    }
    fill_unseen_by_neighbor_averaging(&mut out, &seen);
    Ok(out)
}

/// Jacobi relaxation: unseen vertices converge to the average of their mesh
/// neighbors with seen vertices as Dirichlet boundary. Components with no
/// seen vertex stay mid-gray.
pub fn fill_unseen_by_neighbor_averaging(mesh: &mut TexturedMesh, seen: &[bool]) {
    let n = mesh.vertices.len();
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    for t in &mesh.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            if !adjacency[a as usize].contains(&b) {
                adjacency[a as usize].push(b);
            }
            if !adjacency[b as usize].contains(&a) {
                adjacency[b as usize].push(a);
            }
        }
    }
    let mut colors: Vec<[f64; 3]> = mesh
        .colors
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if seen[i] {
                [c[0] as f64, c[1] as f64, c[2] as f64]
            } else {
                [0.5; 3]
            }
        })
        .collect();
    for _ in 0..4096 {
        let mut max_delta = 0.0f64;
        let prev = colors.clone();
        for i in 0..n {
            if seen[i] || adjacency[i].is_empty() {
                continue;
            }
            let mut acc = [0.0f64; 3];
            for nb in &adjacency[i] {
                for c in 0..3 {
                    acc[c] += prev[*nb as usize][c];
                }
            }
            let k = adjacency[i].len() as f64;
            for c in 0..3 {
                let v = acc[c] / k;
                max_delta = max_delta.max((v - colors[i][c]).abs());
                colors[i][c] = v;
            }
        }
        if max_delta < 1e-10 {
            break;
        }
    }
    for (i, c) in colors.iter().enumerate() {
        if !seen[i] {
            mesh.colors[i] = [c[0] as f32, c[1] as f32, c[2] as f32];
        }
    }
}

// --- GLB export ------------------------------------------------------------------

const GLB_MAGIC: u32 = 0x4654_6C67; // "glTF"
const CHUNK_JSON: u32 = 0x4E4F_534A; // "JSON"
const CHUNK_BIN: u32 = 0x004E_4942; // "BIN\0"

fn pad4(buf: &mut Vec<u8>, fill: u8) {
    while buf.len() % 4 != 0 {
        buf.push(fill);
    }
}

/// Serializes the mesh as a binary glTF 2.0 container with POSITION, NORMAL,
/// COLOR_0 (float vec3) and u32 indices in a single primitive.
pub fn export_glb(mesh: &TexturedMesh) -> Result<Vec<u8>, EvoError> {
    mesh.validate()?;
    if mesh.is_empty() {
        return Err(EvoError::Invalid("refusing to export an empty mesh".into()));
    }
    let mut mesh = mesh.clone();
    if mesh.normals.is_none() {
        mesh.compute_normals();
    }
    let normals = mesh.normals.as_ref().unwrap();

    let mut bin: Vec<u8> = Vec::new();
    let mut views = Vec::new();
    let mut push_section = |bin: &mut Vec<u8>, bytes: &[u8], target: u32| -> usize {
        let offset = bin.len();
        bin.extend_from_slice(bytes);
        pad4(bin, 0);
        views.push(serde_json::json!({
            "buffer": 0,
            "byteOffset": offset,
            "byteLength": bytes.len(),
            "target": target,
        }));
        views.len() - 1
    };

    let mut positions = Vec::with_capacity(mesh.vertices.len() * 12);
    let (mut pmin, mut pmax) = ([f32::INFINITY; 3], [f32::NEG_INFINITY; 3]);
    for v in &mesh.vertices {
        for (c, val) in [v.x, v.y, v.z].into_iter().enumerate() {
            let f = val as f32;
            positions.extend_from_slice(&f.to_le_bytes());
            pmin[c] = pmin[c].min(f);
            pmax[c] = pmax[c].max(f);
        }
    }
    let mut normal_bytes = Vec::with_capacity(mesh.vertices.len() * 12);
    for n in normals {
        for val in [n.x, n.y, n.z] {
            normal_bytes.extend_from_slice(&(val as f32).to_le_bytes());
        }
    }
    let mut color_bytes = Vec::with_capacity(mesh.vertices.len() * 12);
    for c in &mesh.colors {
        for val in c {
            color_bytes.extend_from_slice(&val.to_le_bytes());
        }
    }
    let mut index_bytes = Vec::with_capacity(mesh.triangles.len() * 12);
    for t in &mesh.triangles {
        for i in t {
            index_bytes.extend_from_slice(&i.to_le_bytes());
        }
    }
    let pos_view = push_section(&mut bin, &positions, 34962);
    let nrm_view = push_section(&mut bin, &normal_bytes, 34962);
    let col_view = push_section(&mut bin, &color_bytes, 34962);
    let idx_view = push_section(&mut bin, &index_bytes, 34963);

    let vcount = mesh.vertices.len();
    let json = serde_json::json!({
        "asset": { "version": "2.0", "generator": "evoscene" },
        "scene": 0,
        "scenes": [ { "nodes": [0] } ],
        "nodes": [ { "mesh": 0 } ],
        "meshes": [ {
            "primitives": [ {
                "attributes": { "POSITION": 0, "NORMAL": 1, "COLOR_0": 2 },
                "indices": 3,
                "mode": 4
            } ]
        } ],
        "accessors": [
            { "bufferView": pos_view, "componentType": 5126, "count": vcount, "type": "VEC3",
              "min": pmin, "max": pmax },
            { "bufferView": nrm_view, "componentType": 5126, "count": vcount, "type": "VEC3" },
            { "bufferView": col_view, "componentType": 5126, "count": vcount, "type": "VEC3" },
            { "bufferView": idx_view, "componentType": 5125, "count": mesh.triangles.len() * 3, "type": "SCALAR" }
        ],
        "bufferViews": views,
        "buffers": [ { "byteLength": bin.len() } ],
    });
    let mut json_bytes = serde_json::to_vec(&json).expect("static structure");
    pad4(&mut json_bytes, b' ');

    let total = 12 + 8 + json_bytes.len() + 8 + bin.len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&GLB_MAGIC.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.extend_from_slice(&(json_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&CHUNK_JSON.to_le_bytes());
    out.extend_from_slice(&json_bytes);
    out.extend_from_slice(&(bin.len() as u32).to_le_bytes());
    out.extend_from_slice(&CHUNK_BIN.to_le_bytes());
    out.extend_from_slice(&bin);
    Ok(out)
}

/// Minimal GLB reader for the container written by [`export_glb`]; used for
/// round-trip verification and checkpoint re-export.
pub fn import_glb(bytes: &[u8]) -> Result<TexturedMesh, EvoError> {
    let err = |m: &str| EvoError::Format(format!("glb: {m}"));
    if bytes.len() < 12 {
        return Err(err("truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(0) != GLB_MAGIC {
        return Err(err("bad magic"));
    }
    if u32_at(4) != 2 {
        return Err(err("unsupported version"));
    }
    let total = u32_at(8) as usize;
    if total != bytes.len() {
        return Err(err("length field does not match file size"));
    }
    let mut offset = 12;
    let mut json: Option<serde_json::Value> = None;
    let mut bin: Option<&[u8]> = None;
    while offset + 8 <= bytes.len() {
        let len = u32_at(offset) as usize;
        let kind = u32_at(offset + 4);
        let body = &bytes[offset + 8..offset + 8 + len];
        if len % 4 != 0 {
            return Err(err("chunk length not 4-aligned"));
        }
        match kind {
            CHUNK_JSON => json = Some(serde_json::from_slice(body).map_err(|e| err(&format!("json chunk: {e}")))?),
            CHUNK_BIN => bin = Some(body),
            _ => {}
        }
        offset += 8 + len;
    }
    let json = json.ok_or_else(|| err("missing JSON chunk"))?;
    let bin = bin.ok_or_else(|| err("missing BIN chunk"))?;
    let prim = &json["meshes"][0]["primitives"][0];
    let accessor_data = |index: u64| -> Result<(&serde_json::Value, &[u8]), EvoError> {
        let acc = &json["accessors"][index as usize];
        let view = &json["bufferViews"][acc["bufferView"].as_u64().ok_or_else(|| err("accessor without view"))? as usize];
        let off = view["byteOffset"].as_u64().unwrap_or(0) as usize;
        let len = view["byteLength"].as_u64().ok_or_else(|| err("view without length"))? as usize;
        Ok((acc, &bin[off..off + len]))
    };
    let read_vec3 = |index: u64| -> Result<Vec<[f32; 3]>, EvoError> {
        let (acc, data) = accessor_data(index)?;
        let count = acc["count"].as_u64().unwrap_or(0) as usize;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let b = &data[i * 12..i * 12 + 12];
            out.push([
                f32::from_le_bytes(b[0..4].try_into().unwrap()),
                f32::from_le_bytes(b[4..8].try_into().unwrap()),
                f32::from_le_bytes(b[8..12].try_into().unwrap()),
            ]);
        }
        Ok(out)
    };
    let attrs = &prim["attributes"];
    let positions = read_vec3(attrs["POSITION"].as_u64().ok_or_else(|| err("missing POSITION"))?)?;
    let colors = match attrs.get("COLOR_0").and_then(|v| v.as_u64()) {
        Some(i) => read_vec3(i)?,
        None => vec![[0.5; 3]; positions.len()],
    };
    let normals = match attrs.get("NORMAL").and_then(|v| v.as_u64()) {
        Some(i) => Some(read_vec3(i)?),
        None => None,
    };
    let (idx_acc, idx_data) = accessor_data(prim["indices"].as_u64().ok_or_else(|| err("missing indices"))?)?;
    let icount = idx_acc["count"].as_u64().unwrap_or(0) as usize;
    let mut triangles = Vec::with_capacity(icount / 3);
    for t in 0..icount / 3 {
        let b = &idx_data[t * 12..t * 12 + 12];
        triangles.push([
            u32::from_le_bytes(b[0..4].try_into().unwrap()),
            u32::from_le_bytes(b[4..8].try_into().unwrap()),
            u32::from_le_bytes(b[8..12].try_into().unwrap()),
        ]);
    }
    Ok(TexturedMesh {
        vertices: positions.iter().map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect(),
        triangles,
        colors,
        normals: normals.map(|ns| ns.iter().map(|n| Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64)).collect()),
    })
}

/// Debug OBJ with per-vertex colors carried in an extension comment block.
pub fn export_obj(mesh: &TexturedMesh, path: &Path) -> Result<(), EvoError> {
    mesh.validate()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# evoscene mesh: {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len())?;
    writeln!(f, "# extension: vertex colors listed as '# vc <index> <r> <g> <b>'")?;
    for v in &mesh.vertices {
        writeln!(f, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for (i, c) in mesh.colors.iter().enumerate() {
        writeln!(f, "# vc {} {} {} {}", i + 1, c[0], c[1], c[2])?;
    }
    for t in &mesh.triangles {
        writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

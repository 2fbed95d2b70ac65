//! Stage A — the confidence-weighted point-cloud prior.
//!
//! Candidates back-projected from per-view depth maps are kept only when
//! enough views agree on their depth (multi-view geometric voting), then
//! merged into the accumulated prior by spatial binning that keeps the
//! highest-confidence point per bin.

use crate::error::EvoError;
use crate::geometry::{back_project, depth_confidence, project, CameraIntrinsics, CameraPose, DepthMap};
use crate::imagebuf::ImageRgb;
use nalgebra::Vector3;
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// One point of the spatial prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorPoint {
    pub position: Vector3<f64>,
    pub color: [f32; 3],
    pub confidence: f32,
    /// Number of views that voted for the point (>= 1).
    pub support_count: u16,
    /// Id of the view the point was back-projected from.
    pub source_view: u32,
}

/// The accumulating spatial prior.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfidencePointCloud {
    pub points: Vec<PriorPoint>,
}

impl ConfidencePointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Confidence-weighted centroid. `None` for an empty cloud.
    pub fn weighted_centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let mut acc = Vector3::zeros();
        let mut w = 0.0f64;
        for p in &self.points {
            let c = p.confidence.max(1e-6) as f64;
            acc += p.position * c;
            w += c;
        }
        Some(acc / w)
    }

    /// Number of occupied bins at the given bin size (used by growth metrics).
    pub fn occupied_bins(&self, bin_size: f64) -> usize {
        let mut bins: Vec<(i64, i64, i64)> = self.points.iter().map(|p| bin_index(&p.position, bin_size)).collect();
        bins.sort_unstable();
        bins.dedup();
        bins.len()
    }
}

/// Cross-view voting parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct VotingConfig {
    /// Depth agreement tolerance in meters.
    pub depth_tolerance: f64,
    /// Minimum number of voting views (the source view votes too).
    pub min_support: usize,
    /// A view where the candidate sits behind the stored surface by more than
    /// this margin abstains — occlusion, not contradiction.
    pub occlusion_margin: f64,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self { depth_tolerance: 0.1, min_support: 3, occlusion_margin: 0.1 }
    }
}

/// A posed view the voting filter can project into.
#[derive(Debug, Clone)]
pub struct VotingView {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// A candidate point prior to filtering.
#[derive(Debug, Clone, Copy)]
pub struct CandidatePoint {
    pub position: Vector3<f64>,
    pub color: [f32; 3],
    pub confidence: f32,
    pub source_view: u32,
}

/// Multi-view geometric voting: a candidate gains a vote from view `k` when
/// it projects inside the image onto a valid depth pixel and the projected
/// depth agrees with the stored depth within `depth_tolerance`. Candidates
/// with at least `min_support` votes survive, carrying `support_count` =
/// votes. Views where the candidate is occluded abstain.
pub fn multi_view_filter(
    candidates: &[CandidatePoint],
    views: &[VotingView],
    depths: &[DepthMap],
    cfg: &VotingConfig,
) -> Result<ConfidencePointCloud, EvoError> {
    if views.is_empty() {
        return Err(EvoError::NoViews);
    }
    assert_eq!(views.len(), depths.len(), "one depth map per view");
    let votes: Vec<usize> = candidates
        .par_iter()
        .map(|cand| {
            let mut votes = 0usize;
            for (view, depth) in views.iter().zip(depths) {
                if let Some(v) = vote(cand, view, depth, cfg) {
                    if v {
                        votes += 1;
                    }
                }
            }
            votes
        })
        .collect();
    let points = candidates
        .iter()
        .zip(&votes)
        .filter(|(_, v)| **v >= cfg.min_support)
        .map(|(c, v)| PriorPoint {
            position: c.position,
            color: c.color,
            confidence: c.confidence,
            support_count: (*v).min(u16::MAX as usize) as u16,
            source_view: c.source_view,
        })
        .collect();
    Ok(ConfidencePointCloud { points })
}

/// `Some(true)` = vote, `Some(false)` = saw it and disagreed, `None` = abstain
/// (outside image, invalid depth, behind camera, or occluded).
fn vote(cand: &CandidatePoint, view: &VotingView, depth: &DepthMap, cfg: &VotingConfig) -> Option<bool> {
    let proj = project(&cand.position, &view.intrinsics, &view.pose)?;
    let (x, y) = nearest_pixel(proj.pixel.x, proj.pixel.y, depth.width, depth.height)?;
    if !depth.is_valid(x, y) {
        return None;
    }
    let stored = depth.get(x, y);
    let delta = proj.depth - stored;
    if delta.abs() <= cfg.depth_tolerance {
        Some(true)
    } else if delta > cfg.occlusion_margin {
        None
    } else {
        Some(false)
    }
}

/// Rounds continuous pixel coordinates to the nearest pixel center, rejecting
/// coordinates that land outside the image.
pub fn nearest_pixel(u: f64, v: f64, width: usize, height: usize) -> Option<(usize, usize)> {
    let x = u.round();
    let y = v.round();
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

#[inline]
fn bin_index(p: &Vector3<f64>, bin_size: f64) -> (i64, i64, i64) {
    (
        (p.x / bin_size).floor() as i64,
        (p.y / bin_size).floor() as i64,
        (p.z / bin_size).floor() as i64,
    )
}

/// Merges two clouds by spatial binning anchored at the world origin. Exactly
/// one point survives per occupied bin: highest confidence wins, ties go to
/// higher support_count, then to insertion order (prev before new).
pub fn merge_point_clouds(
    prev: &ConfidencePointCloud,
    new: &ConfidencePointCloud,
    bin_size: f64,
) -> ConfidencePointCloud {
    assert!(bin_size > 0.0, "bin_size must be positive");
    let mut best: HashMap<(i64, i64, i64), PriorPoint> = HashMap::new();
    let mut order: Vec<(i64, i64, i64)> = Vec::new();
    for p in prev.points.iter().chain(new.points.iter()) {
        let key = bin_index(&p.position, bin_size);
        match best.get_mut(&key) {
            None => {
                best.insert(key, *p);
                order.push(key);
            }
            Some(cur) => {
                let better = p.confidence > cur.confidence
                    || (p.confidence == cur.confidence && p.support_count > cur.support_count);
                if better {
                    *cur = *p;
                }
            }
        }
    }
    // Canonical serialization pass: first-occupancy order keeps the result
    // independent of hash-map iteration order.
    let points = order.into_iter().map(|k| best[&k]).collect();
    ConfidencePointCloud { points }
}

/// Builds the initial prior from a single posed RGB-D estimate: one point per
/// valid depth pixel, confidence from the depth gradient, color sampled from
/// the image, support 1.
pub fn initial_prior_from_depth(
    image: &ImageRgb,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    confidence_sigma: f64,
    view_id: u32,
) -> ConfidencePointCloud {
    assert_eq!((image.width, image.height), (depth.width, depth.height), "image/depth size mismatch");
    let conf = depth_confidence(depth, confidence_sigma);
    let points = back_project(depth, k, pose)
        .into_iter()
        .map(|bp| {
            let (x, y) = bp.pixel;
            PriorPoint {
                position: bp.position,
                color: image.pixel(x, y),
                confidence: conf.get(x, y),
                support_count: 1,
                source_view: view_id,
            }
        })
        .collect();
    ConfidencePointCloud { points }
}

/// Candidate list from one posed view (color + confidence attached), ready
/// for [`multi_view_filter`].
pub fn candidates_from_view(
    image: &ImageRgb,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    confidence_sigma: f64,
    view_id: u32,
) -> Vec<CandidatePoint> {
    initial_prior_from_depth(image, depth, k, pose, confidence_sigma, view_id)
        .points
        .into_iter()
        .map(|p| CandidatePoint {
            position: p.position,
            color: p.color,
            confidence: p.confidence,
            source_view: p.source_view,
        })
        .collect()
}

// --- PLY io -----------------------------------------------------------------

/// Binary little-endian PLY with properties
/// x,y,z,red,green,blue,confidence(float32),support(uint16).
pub fn write_ply(cloud: &ConfidencePointCloud, path: &Path) -> Result<(), EvoError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        f,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property float confidence\nproperty ushort support\nend_header\n",
        cloud.points.len()
    )?;
    for p in &cloud.points {
        for v in [p.position.x as f32, p.position.y as f32, p.position.z as f32] {
            f.write_all(&v.to_le_bytes())?;
        }
        for c in p.color {
            f.write_all(&[(c.clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
        f.write_all(&p.confidence.to_le_bytes())?;
        f.write_all(&p.support_count.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<ConfidencePointCloud, EvoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| EvoError::Format("ply: missing end_header".into()))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| EvoError::Format("ply: non-utf8 header".into()))?;
    if !header.starts_with("ply\n") || !header.contains("format binary_little_endian 1.0") {
        return Err(EvoError::Format("ply: not binary little-endian".into()));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or_else(|| EvoError::Format("ply: missing vertex element".into()))?
        .trim()
        .parse()
        .map_err(|_| EvoError::Format("ply: bad vertex count".into()))?;
    let record = 12 + 3 + 4 + 2;
    let body = &bytes[header_end..];
    if body.len() < count * record {
        return Err(EvoError::Format("ply: truncated body".into()));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let r = &body[i * record..(i + 1) * record];
        let fx = f32::from_le_bytes(r[0..4].try_into().unwrap());
        let fy = f32::from_le_bytes(r[4..8].try_into().unwrap());
        let fz = f32::from_le_bytes(r[8..12].try_into().unwrap());
        points.push(PriorPoint {
            position: Vector3::new(fx as f64, fy as f64, fz as f64),
            color: [r[12] as f32 / 255.0, r[13] as f32 / 255.0, r[14] as f32 / 255.0],
            confidence: f32::from_le_bytes(r[15..19].try_into().unwrap()),
            support_count: u16::from_le_bytes(r[19..21].try_into().unwrap()),
            source_view: 0,
        });
    }
    Ok(ConfidencePointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::back_project_pixel;
    use proptest::prelude::*;

    fn cam(width: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(width as f64, width as f64, (width as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0, width, width).unwrap()
    }

    /// Four cameras on a small arc all looking at a frontal wall at z = 3.
    fn wall_views(n: usize) -> (Vec<VotingView>, Vec<DepthMap>) {
        let k = cam(64);
        let mut views = Vec::new();
        let mut depths = Vec::new();
        for i in 0..n {
            let angle = (i as f64 - (n as f64 - 1.0) / 2.0) * 0.08;
            let eye = Vector3::new(3.0 * angle.sin(), 0.0, 3.0 - 3.0 * angle.cos());
            let pose = CameraPose::look_at(eye, Vector3::new(0.0, 0.0, 3.0), Vector3::y()).unwrap();
            // Analytic depth of the plane z=3 seen from this camera.
            let mut d = DepthMap::invalid(64, 64);
            for y in 0..64 {
                for x in 0..64 {
                    // Ray through pixel: find t where world z = 3.
                    let origin = pose.camera_center();
                    let pt = back_project_pixel(x as f64, y as f64, 1.0, &k, &pose);
                    let dir = pt - origin;
                    if dir.z.abs() < 1e-12 {
                        continue;
                    }
                    let t = (3.0 - origin.z) / dir.z;
                    if t <= 0.0 {
                        continue;
                    }
                    let world = origin + dir * t;
                    let camz = pose.world_to_camera(&world).z;
                    d.set(x, y, camz as f32);
                }
            }
            views.push(VotingView { intrinsics: k, pose });
            depths.push(d);
        }
        (views, depths)
    }

    #[test]
    fn consistent_wall_point_gets_full_support() {
        let (views, depths) = wall_views(4);
        let cand = CandidatePoint {
            position: Vector3::new(0.1, 0.05, 3.0),
            color: [0.5; 3],
            confidence: 0.9,
            source_view: 0,
        };
        let cfg = VotingConfig { depth_tolerance: 0.1, min_support: 3, occlusion_margin: 0.1 };
        let out = multi_view_filter(&[cand], &views, &depths, &cfg).unwrap();
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.points[0].support_count, 4);
    }

    #[test]
    fn offset_point_is_removed() {
        let (views, depths) = wall_views(4);
        let cand = CandidatePoint {
            position: Vector3::new(0.1, 0.05, 2.5), // 0.5 m off the wall
            color: [0.5; 3],
            confidence: 0.9,
            source_view: 0,
        };
        let cfg = VotingConfig::default();
        let out = multi_view_filter(&[cand], &views, &depths, &cfg).unwrap();
        assert!(out.points.is_empty());
    }

    #[test]
    fn empty_views_is_an_error() {
        let cfg = VotingConfig::default();
        assert!(matches!(multi_view_filter(&[], &[], &[], &cfg), Err(EvoError::NoViews)));
    }

    #[test]
    fn empty_candidates_give_empty_cloud() {
        let (views, depths) = wall_views(3);
        let out = multi_view_filter(&[], &views, &depths, &VotingConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    /// Two-box occlusion: a point on the far wall is hidden from two of four
    /// cameras by a near slab. The occluded views abstain, so support comes
    /// from the two views that do see it.
    #[test]
    fn occluded_views_abstain() {
        let k = cam(64);
        let far_point = Vector3::new(0.0, 0.0, 4.0);
        let mut views = Vec::new();
        let mut depths = Vec::new();
        // Views 0,1: unobstructed wall at z=4. Views 2,3: a near surface at
        // z=2 occludes the central region (depth map reports 2 there).
        for i in 0..4 {
            let eye = Vector3::new(0.2 * i as f64 - 0.3, 0.0, 0.0);
            let pose = CameraPose::look_at(eye, Vector3::new(eye.x, 0.0, 4.0), Vector3::y()).unwrap();
            let depth_value = if i < 2 { 4.0 } else { 2.0 };
            depths.push(DepthMap::constant(64, 64, depth_value));
            views.push(VotingView { intrinsics: k, pose });
        }
        let cand = CandidatePoint { position: far_point, color: [0.5; 3], confidence: 0.8, source_view: 0 };
        let cfg = VotingConfig { depth_tolerance: 0.1, min_support: 2, occlusion_margin: 0.1 };
        let out = multi_view_filter(&[cand], &views, &depths, &cfg).unwrap();
        assert_eq!(out.points.len(), 1, "occluded views must abstain, not veto");
        assert_eq!(out.points[0].support_count, 2);
    }

    #[test]
    fn merge_keeps_highest_confidence_in_bin() {
        let a = ConfidencePointCloud {
            points: vec![PriorPoint {
                position: Vector3::new(0.01, 0.01, 0.01),
                color: [1.0, 0.0, 0.0],
                confidence: 0.9,
                support_count: 1,
                source_view: 0,
            }],
        };
        let b = ConfidencePointCloud {
            points: vec![PriorPoint {
                position: Vector3::new(0.03, 0.01, 0.01), // 2 cm away, same 5 cm bin
                color: [0.0, 1.0, 0.0],
                confidence: 0.4,
                support_count: 5,
                source_view: 1,
            }],
        };
        let merged = merge_point_clouds(&a, &b, 0.05);
        assert_eq!(merged.points.len(), 1);
        assert_eq!(merged.points[0].color, [1.0, 0.0, 0.0]);
        assert_eq!(merged.points[0].confidence, 0.9);
    }

    #[test]
    fn merge_keeps_distant_points() {
        let p = |x: f64| PriorPoint {
            position: Vector3::new(x, 0.0, 0.0),
            color: [0.5; 3],
            confidence: 0.5,
            support_count: 1,
            source_view: 0,
        };
        let merged = merge_point_clouds(
            &ConfidencePointCloud { points: vec![p(0.0)] },
            &ConfidencePointCloud { points: vec![p(1.0)] },
            0.05,
        );
        assert_eq!(merged.points.len(), 2);
    }

    #[test]
    fn merge_bin_boundary_uses_floor() {
        // x = 0.05 with bin 0.05 lands in bin 1, x = 0.049999 in bin 0.
        let p = |x: f64| PriorPoint {
            position: Vector3::new(x, 0.0, 0.0),
            color: [0.5; 3],
            confidence: 0.5,
            support_count: 1,
            source_view: 0,
        };
        let merged = merge_point_clouds(
            &ConfidencePointCloud { points: vec![p(0.05)] },
            &ConfidencePointCloud { points: vec![p(0.0499)] },
            0.05,
        );
        assert_eq!(merged.points.len(), 2, "exact boundary belongs to the upper bin");
    }

    #[test]
    fn merge_tie_breaks_by_support_then_order() {
        let mk = |conf: f32, support: u16, view: u32| PriorPoint {
            position: Vector3::new(0.01, 0.0, 0.0),
            color: [view as f32, 0.0, 0.0],
            confidence: conf,
            support_count: support,
            source_view: view,
        };
        let merged = merge_point_clouds(
            &ConfidencePointCloud { points: vec![mk(0.5, 2, 0)] },
            &ConfidencePointCloud { points: vec![mk(0.5, 4, 1)] },
            0.05,
        );
        assert_eq!(merged.points[0].source_view, 1, "higher support wins the tie");
        let merged2 = merge_point_clouds(
            &ConfidencePointCloud { points: vec![mk(0.5, 2, 0)] },
            &ConfidencePointCloud { points: vec![mk(0.5, 2, 1)] },
            0.05,
        );
        assert_eq!(merged2.points[0].source_view, 0, "equal scores keep the earlier point");
    }

    #[test]
    fn initial_prior_passes_colors_and_skips_invalid() {
        let k = cam(4);
        let mut img = ImageRgb::new(4, 4);
        img.set_pixel(1, 1, [0.2, 0.4, 0.6]);
        let mut d = DepthMap::constant(4, 4, 2.0);
        d.set(3, 3, f32::NAN); // masked sky pixel
        let cloud = initial_prior_from_depth(&img, &d, &k, &CameraPose::identity(), 0.5, 7);
        assert_eq!(cloud.len(), 15);
        let p = cloud
            .points
            .iter()
            .find(|p| p.color == [0.2, 0.4, 0.6])
            .expect("colored pixel present");
        assert_eq!(p.source_view, 7);
        assert_eq!(p.support_count, 1);
    }

    #[test]
    fn ply_round_trip() {
        let cloud = ConfidencePointCloud {
            points: vec![
                PriorPoint {
                    position: Vector3::new(1.5, -2.25, 0.125),
                    color: [1.0, 0.0, 0.5019608],
                    confidence: 0.75,
                    support_count: 3,
                    source_view: 2,
                },
                PriorPoint {
                    position: Vector3::new(0.0, 0.0, 9.0),
                    color: [0.0, 0.0, 0.0],
                    confidence: 1.0,
                    support_count: 1,
                    source_view: 0,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        write_ply(&cloud, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points.len(), 2);
        assert_eq!(back.points[0].confidence, 0.75);
        assert_eq!(back.points[0].support_count, 3);
        assert!((back.points[0].position - cloud.points[0].position).norm() < 1e-6);
    }

    proptest! {
        /// Raising min_support never adds points; output is a subset of input.
        #[test]
        fn filter_monotone_in_min_support(seed in 0u64..50) {
            let (views, depths) = wall_views(4);
            let mut rng = crate::rng::seeded_rng(seed, "prop-filter");
            use rand::Rng;
            let candidates: Vec<CandidatePoint> = (0..40)
                .map(|i| CandidatePoint {
                    position: Vector3::new(
                        rng.gen::<f64>() * 0.8 - 0.4,
                        rng.gen::<f64>() * 0.8 - 0.4,
                        2.8 + rng.gen::<f64>() * 0.4,
                    ),
                    color: [0.5; 3],
                    confidence: rng.gen::<f32>(),
                    source_view: i % 4,
                })
                .collect();
            let mut prev_len = usize::MAX;
            for support in 1..=4 {
                let cfg = VotingConfig { depth_tolerance: 0.1, min_support: support, occlusion_margin: 0.1 };
                let out = multi_view_filter(&candidates, &views, &depths, &cfg).unwrap();
                prop_assert!(out.points.len() <= prev_len);
                prop_assert!(out.points.len() <= candidates.len());
                prev_len = out.points.len();
            }
        }

        /// Merge is idempotent: merging a merged cloud with itself is a fixed point.
        #[test]
        fn merge_idempotent(seed in 0u64..50) {
            let mut rng = crate::rng::seeded_rng(seed, "prop-merge");
            use rand::Rng;
            let points: Vec<PriorPoint> = (0..60)
                .map(|i| PriorPoint {
                    position: Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
                    color: [0.5; 3],
                    confidence: rng.gen::<f32>(),
                    support_count: 1 + (i % 4) as u16,
                    source_view: 0,
                })
                .collect();
            let cloud = ConfidencePointCloud { points };
            let once = merge_point_clouds(&cloud, &ConfidencePointCloud::default(), 0.05);
            let twice = merge_point_clouds(&once, &once, 0.05);
            prop_assert_eq!(once, twice);
        }
    }
}

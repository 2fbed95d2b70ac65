//! The self-evolution orchestrator: Stage A (spatial prior) → Stage B
//! (occupancy completion + photometric refinement) → Stage C (trajectory
//! view synthesis), iterated with accumulating views, with per-stage
//! checkpoints and deterministic metrics.

use crate::backends::{
    default_prompt, validate_synthesis, DepthEstimator, DepthRequest, SynthesisRequest, ViewSynthesizer,
    DEFAULT_CONDITIONING_STRENGTH,
};
use crate::completion::{
    blend_patch_latents, complete_structure, test_time_optimize, transfer_latent_appearance, CompletionViewData,
    SceneCompleter, SceneLatent, TtoConfig, TtoView,
};
use crate::error::EvoError;
use crate::geometry::{CameraIntrinsics, CameraJson, CameraPose, DepthMap};
use crate::imagebuf::ImageRgb;
use crate::meshing::{bake_textures, export_glb, marching_cubes, BakeView, TexturedMesh};
use crate::metrics::{MetricRecord, RunReport};
use crate::occupancy::{carve_free_space, decompose_patches, fit_bounds, voxelize, CarveView, OccupancyGrid, VoxelState};
use crate::prior::{
    candidates_from_view, initial_prior_from_depth, merge_point_clouds, multi_view_filter, read_ply, write_ply,
    ConfidencePointCloud, VotingConfig, VotingView,
};
use crate::rendering::{render_depth, to_disparity, DisparityMap};
use crate::synthbench::{coverage_fraction, sample_mesh_surface, sample_surface_poisson, SceneSpec};
use crate::trajectory::{export_trajectory, iteration_schedule, orbital_trajectory, OrbitSpec, ScheduleConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// One posed observation in the accumulated view set.
#[derive(Debug, Clone)]
pub struct ViewEntry {
    pub id: u32,
    pub image: ImageRgb,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub iteration_of_origin: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ViewSet {
    pub entries: Vec<ViewEntry>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    fn next_id(&self) -> u32 {
        self.entries.iter().map(|e| e.id + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Voxel resolution S.
    pub grid_resolution: usize,
    pub patch_size: usize,
    pub patch_overlap: usize,
    /// Self-evolution iterations T.
    pub iterations: usize,
    /// Frames per synthesized orbit N.
    pub frames_per_orbit: usize,
    /// Synthesized frame side length in pixels.
    pub view_size: usize,
    pub voting: VotingConfig,
    /// Merge bin size in meters.
    pub bin_size: f64,
    /// Carving epsilon in units of voxel pitch.
    pub carve_epsilon_pitch: f64,
    /// Fractional expansion of the fitted bounds.
    pub bounds_margin: f64,
    /// Depth-gradient confidence scale, meters.
    pub confidence_sigma: f64,
    /// Morphological closing radius of the built-in completer.
    pub completer_radius: usize,
    pub tto: TtoConfig,
    /// Cap on views used by test-time optimization (0 = all views).
    pub tto_max_views: usize,
    /// Bake visibility tolerance in pitches.
    pub bake_visibility_pitch: f64,
    /// Recency weight of the seed image during baking.
    pub seed_recency_weight: f64,
    /// Fallback horizontal FOV when the depth backend returns no intrinsics.
    pub fallback_hfov_deg: f64,
    /// Carve with all accumulated views (true) or only the newest iteration's.
    pub carve_with_all_views: bool,
    pub schedule: ScheduleConfig,
    /// Global run seed.
    pub seed: u64,
    /// Reference-surface samples for coverage/chamfer.
    pub eval_samples: usize,
}

impl PipelineConfig {
    /// The published defaults: S=128, P=64, 48-voxel overlap, T=3, N=121
    /// frames at 1024², ±45° azimuth, 0.1 m voting tolerance, 3-view
    /// support, 5 cm merge bins, 5 optimization steps at learning rate 1.
    pub fn paper() -> Self {
        Self {
            grid_resolution: 128,
            patch_size: 64,
            patch_overlap: 48,
            iterations: 3,
            frames_per_orbit: 121,
            view_size: 1024,
            voting: VotingConfig { depth_tolerance: 0.1, min_support: 3, occlusion_margin: 0.1 },
            bin_size: 0.05,
            carve_epsilon_pitch: 1.0,
            bounds_margin: 0.05,
            confidence_sigma: 0.5,
            completer_radius: 2,
            tto: TtoConfig {
                steps: 5,
                learning_rate: 1.0,
                weights: crate::rendering::LossWeights { l1: 1.0, lpips: 0.0, ssim: 1.0 },
                optimize_opacity: false,
                render_size: 256,
            },
            tto_max_views: 0,
            bake_visibility_pitch: 2.0,
            seed_recency_weight: 0.7,
            fallback_hfov_deg: 60.0,
            carve_with_all_views: true,
            schedule: ScheduleConfig::default(),
            seed: 0,
        eval_samples: 10_000,
        }
    }

    /// Laptop-scale defaults used by the offline benchmark runs: the same
    /// structure at reduced resolution.
    pub fn desk() -> Self {
        Self {
            grid_resolution: 40,
            patch_size: 20,
            patch_overlap: 8,
            frames_per_orbit: 11,
            view_size: 160,
            tto: TtoConfig {
                steps: 4,
                learning_rate: 1.0,
                weights: crate::rendering::LossWeights { l1: 1.0, lpips: 0.0, ssim: 1.0 },
                optimize_opacity: false,
                render_size: 96,
            },
            tto_max_views: 9,
            eval_samples: 4000,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), EvoError> {
        if self.iterations < 1 {
            return Err(EvoError::Config("iterations must be >= 1".into()));
        }
        if self.patch_size > self.grid_resolution {
            return Err(EvoError::Config("patch size exceeds grid resolution".into()));
        }
        if self.patch_overlap >= self.patch_size {
            return Err(EvoError::Config("patch overlap must be smaller than the patch size".into()));
        }
        if self.frames_per_orbit < 2 {
            return Err(EvoError::Config("an orbit needs at least 2 frames".into()));
        }
        if self.tto.weights.lpips != 0.0 {
            return Err(EvoError::Config(
                "perceptual loss weight must be 0 natively (remote loss backends only)".into(),
            ));
        }
        Ok(())
    }
}

/// The three pluggable services.
pub struct PipelineBackends<'a> {
    pub depth: &'a dyn DepthEstimator,
    pub completer: &'a dyn SceneCompleter,
    pub synthesizer: &'a dyn ViewSynthesizer,
}

/// Reference scene with cached surface samples for coverage metrics.
pub struct ReferenceScene {
    pub spec: SceneSpec,
    pub samples: Vec<nalgebra::Vector3<f64>>,
}

impl ReferenceScene {
    pub fn new(spec: SceneSpec, sample_count: usize, seed: u64) -> Self {
        let samples = sample_surface_poisson(&spec, sample_count, seed);
        Self { spec, samples }
    }
}

/// The loop's full state at iteration t.
#[derive(Debug, Clone, Default)]
pub struct IterationState {
    pub t: usize,
    pub views: ViewSet,
    pub prior: ConfidencePointCloud,
    pub grid: Option<OccupancyGrid>,
    pub latent: Option<SceneLatent>,
    pub mesh: Option<TexturedMesh>,
    pub records: Vec<MetricRecord>,
    pub tto_losses: Vec<Vec<f64>>,
    pub coverage: Vec<f64>,
}

/// Snaps positions to f32 so the in-memory prior matches its PLY checkpoint
/// bit for bit (resume equivalence).
fn snap_prior(mut cloud: ConfidencePointCloud) -> ConfidencePointCloud {
    for p in &mut cloud.points {
        p.position.x = p.position.x as f32 as f64;
        p.position.y = p.position.y as f32 as f64;
        p.position.z = p.position.z as f32 as f64;
    }
    cloud
}

/// Runs one full A→B→C cycle on the given state. Stage C is skipped on the
/// final iteration. Each stage checkpoints before the next starts.
pub fn run_iteration(
    state: IterationState,
    cfg: &PipelineConfig,
    backends: &PipelineBackends,
    checkpoint: Option<&CheckpointCtx>,
    reference: Option<&ReferenceScene>,
) -> Result<IterationState, EvoError> {
    let mut state = state;
    let t = state.t + 1;
    if state.views.is_empty() {
        return Err(EvoError::NoViews);
    }

    // --- Stage A: spatial prior -------------------------------------------------
    let clock = Instant::now();
    let mut record_a = MetricRecord::new(t, "A");
    let depths: Vec<DepthMap> = state
        .views
        .entries
        .iter()
        .map(|e| {
            let resp = backends.depth.estimate(&DepthRequest {
                image: &e.image,
                view_id: format!("view-{}", e.id),
                camera_hint: Some((e.intrinsics, e.pose)),
            })?;
            Ok(resp.depth)
        })
        .collect::<Result<_, EvoError>>()?;

    let fresh = if state.views.len() == 1 {
        // Single view: the Eq.-1 initialization path, no cross-view voting.
        let e = &state.views.entries[0];
        record_a.set("candidates", depths[0].valid_count() as f64);
        initial_prior_from_depth(&e.image, &depths[0], &e.intrinsics, &e.pose, cfg.confidence_sigma, e.id)
    } else {
        let mut candidates = Vec::new();
        for (e, d) in state.views.entries.iter().zip(&depths) {
            candidates.extend(candidates_from_view(&e.image, d, &e.intrinsics, &e.pose, cfg.confidence_sigma, e.id));
        }
        record_a.set("candidates", candidates.len() as f64);
        let votes_cfg = VotingConfig {
            min_support: cfg.voting.min_support.min(state.views.len()),
            ..cfg.voting
        };
        let views: Vec<VotingView> = state
            .views
            .entries
            .iter()
            .map(|e| VotingView { intrinsics: e.intrinsics, pose: e.pose })
            .collect();
        multi_view_filter(&candidates, &views, &depths, &votes_cfg)?
    };
    record_a.set("retained", fresh.len() as f64);
    let prior = snap_prior(merge_point_clouds(&state.prior, &fresh, cfg.bin_size));
    record_a.set("merged_points", prior.len() as f64);
    record_a.set("occupied_bins", prior.occupied_bins(cfg.bin_size) as f64);
    record_a.wall_ms = Some(clock.elapsed().as_secs_f64() * 1000.0);
    state.prior = prior;
    state.records.push(record_a);
    if let Some(ckpt) = checkpoint {
        ckpt.write_stage_a(t, &state.prior)?;
    }

    // --- Stage B: occupancy completion + refinement ------------------------------
    let clock = Instant::now();
    let mut record_b = MetricRecord::new(t, "B");
    let (origin, pitch) = fit_bounds(&state.prior, cfg.grid_resolution, cfg.bounds_margin)?;
    let (grid, skipped) = voxelize(&state.prior, origin, pitch, cfg.grid_resolution)?;
    record_b.set("voxelize_skipped", skipped as f64);
    record_b.set("observed", grid.count(VoxelState::Observed) as f64);

    let carve_entries: Vec<usize> = state
        .views
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| cfg.carve_with_all_views || e.iteration_of_origin + 1 >= t)
        .map(|(i, _)| i)
        .collect();
    let carve_views: Vec<CarveView> = carve_entries
        .iter()
        .map(|i| CarveView {
            intrinsics: state.views.entries[*i].intrinsics,
            pose: state.views.entries[*i].pose,
        })
        .collect();
    let carve_depths: Vec<DepthMap> = carve_entries.iter().map(|i| depths[*i].clone()).collect();
    let carved = carve_free_space(&grid, &carve_views, &carve_depths, cfg.carve_epsilon_pitch * pitch);
    record_b.set("free", carved.count(VoxelState::Free) as f64);
    record_b.set("unknown", carved.count(VoxelState::Unknown) as f64);

    let all_carve_views: Vec<CarveView> = state
        .views
        .entries
        .iter()
        .map(|e| CarveView { intrinsics: e.intrinsics, pose: e.pose })
        .collect();
    let patches = decompose_patches(&carved, cfg.patch_size, cfg.patch_overlap, &all_carve_views)?;
    record_b.set("patches", patches.patches.len() as f64);
    let view_data: Vec<CompletionViewData> = state
        .views
        .entries
        .iter()
        .zip(&depths)
        .map(|(e, d)| CompletionViewData { image: &e.image, depth: d, intrinsics: e.intrinsics, pose: e.pose })
        .collect();
    let (completed, responses) = complete_structure(&carved, &patches, &view_data, backends.completer)?;
    record_b.set("completed_occupied", completed.count(VoxelState::Observed) as f64);

    let mut latent = blend_patch_latents(&completed, &patches, &responses);
    if let Some(prev) = &state.latent {
        transfer_latent_appearance(prev, &mut latent);
    }

    // Test-time photometric optimization against a deterministic view subset.
    let tto_indices: Vec<usize> = if cfg.tto_max_views == 0 || state.views.len() <= cfg.tto_max_views {
        (0..state.views.len()).collect()
    } else {
        let stride = state.views.len().div_ceil(cfg.tto_max_views);
        (0..state.views.len()).step_by(stride).collect()
    };
    let tto_views: Vec<TtoView> = tto_indices
        .iter()
        .map(|i| {
            let e = &state.views.entries[*i];
            TtoView { image: &e.image, intrinsics: e.intrinsics, pose: e.pose }
        })
        .collect();
    let (latent, losses) = test_time_optimize(&latent, &tto_views, &cfg.tto)?;
    record_b.set("tto_views", tto_views.len() as f64);
    record_b.set("tto_loss_initial", losses.first().copied().unwrap_or(f64::NAN));
    record_b.set("tto_loss_final", losses.last().copied().unwrap_or(f64::NAN));
    state.tto_losses.push(losses);

    let mesh = marching_cubes(latent.s, latent.origin, latent.pitch, &latent.occupancy_field());
    record_b.set("mesh_vertices", mesh.vertices.len() as f64);
    record_b.set("mesh_triangles", mesh.triangles.len() as f64);
    if let Some(reference) = reference {
        let samples = sample_mesh_surface(&mesh, cfg.eval_samples, cfg.seed);
        let coverage = coverage_fraction(&reference.samples, &samples, 2.0 * pitch);
        record_b.set("coverage", coverage);
        state.coverage.push(coverage);
    }
    record_b.wall_ms = Some(clock.elapsed().as_secs_f64() * 1000.0);
    state.records.push(record_b);
    state.grid = Some(completed.clone());
    state.latent = Some(latent);
    state.mesh = Some(mesh);
    if let Some(ckpt) = checkpoint {
        ckpt.write_stage_b(t, &completed, state.latent.as_ref().unwrap())?;
    }

    // --- Stage C: trajectory-conditioned view synthesis ---------------------------
    let clock = Instant::now();
    let mut record_c = MetricRecord::new(t, "C");
    let mut new_views: Vec<ViewEntry> = Vec::new();
    if t == 1 {
        // The seed view belongs to the first iteration's checkpoint.
        new_views.push(state.views.entries[0].clone());
    }
    if t < cfg.iterations {
        let center = state.prior.weighted_centroid().ok_or(EvoError::NoPrior)?;
        let seed_entry = &state.views.entries[0];
        let orbit = OrbitSpec {
            center,
            seed_position: seed_entry.pose.camera_center(),
            azimuth_range_deg: iteration_schedule(t, &cfg.schedule),
            frame_count: cfg.frames_per_orbit,
        };
        let poses = orbital_trajectory(&orbit)?;
        let traj = export_trajectory(&orbit, &poses);
        let frame_k = seed_entry.intrinsics.scaled_to(cfg.view_size, cfg.view_size);
        let mesh = state.mesh.as_ref().expect("stage B ran");
        let disparities: Vec<DisparityMap> = poses
            .iter()
            .map(|pose| {
                let depth = render_depth(mesh, &frame_k, pose, cfg.view_size, cfg.view_size);
                to_disparity(&depth).unwrap_or_else(|_| {
                    log::warn!("iteration {t}: empty mesh depth render; zero disparity conditioning");
                    DisparityMap {
                        width: cfg.view_size,
                        height: cfg.view_size,
                        raw: vec![0.0; cfg.view_size * cfg.view_size],
                        normalized: vec![0.0; cfg.view_size * cfg.view_size],
                    }
                })
            })
            .collect();
        let request = SynthesisRequest {
            seed_image: &seed_entry.image,
            disparity: &disparities,
            trajectory: &traj,
            intrinsics: frame_k,
            width: cfg.view_size,
            height: cfg.view_size,
            prompt: default_prompt(""),
            inject_first_frame: true,
            conditioning_strength: DEFAULT_CONDITIONING_STRENGTH,
        };
        let response = backends.synthesizer.synthesize(&request)?;
        validate_synthesis(&request, &response)?;
        let mut next_id = state.views.next_id();
        for (frame, pose) in response.frames.into_iter().zip(&poses) {
            let mut frame = frame;
            frame.quantize_u8();
            new_views.push(ViewEntry {
                id: next_id,
                image: frame,
                intrinsics: frame_k,
                pose: *pose,
                iteration_of_origin: t,
            });
            next_id += 1;
        }
        record_c.set("frames_added", cfg.frames_per_orbit as f64);
        record_c.set("azimuth_to", orbit.azimuth_range_deg.1);
    } else {
        record_c.set("frames_added", 0.0);
        record_c.set("skipped_final", 1.0);
    }
    record_c.wall_ms = Some(clock.elapsed().as_secs_f64() * 1000.0);
    state.records.push(record_c);
    for v in new_views.iter().skip(if t == 1 { 1 } else { 0 }) {
        state.views.entries.push(v.clone());
    }
    state.t = t;
    if let Some(ckpt) = checkpoint {
        let iter_records: Vec<MetricRecord> = state.records.iter().filter(|r| r.iteration == t).cloned().collect();
        ckpt.write_stage_c(
            t,
            &new_views,
            &IterationMetrics {
                records: iter_records,
                tto_losses: state.tto_losses.last().cloned().unwrap_or_default(),
                coverage: state.coverage.last().copied(),
            },
        )?;
        ckpt.finalize(t)?;
    }
    Ok(state)
}

/// Per-iteration checkpoint payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub records: Vec<MetricRecord>,
    pub tto_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ViewSidecar {
    id: u32,
    iteration_of_origin: usize,
    camera: CameraJson,
}

/// Checkpoint directory manager:
/// `iter_{t}/{prior.ply, grid.evog, latent.json+bin, views/*.png+json,
/// metrics.json, checksum}`.
pub struct CheckpointCtx {
    pub run_dir: PathBuf,
}

impl CheckpointCtx {
    pub fn new(run_dir: &Path) -> Result<Self, EvoError> {
        std::fs::create_dir_all(run_dir)?;
        Ok(Self { run_dir: run_dir.to_path_buf() })
    }

    pub fn iter_dir(&self, t: usize) -> PathBuf {
        self.run_dir.join(format!("iter_{t}"))
    }

    pub fn write_stage_a(&self, t: usize, prior: &ConfidencePointCloud) -> Result<(), EvoError> {
        let dir = self.iter_dir(t);
        std::fs::create_dir_all(&dir)?;
        write_ply(prior, &dir.join("prior.ply"))
    }

    pub fn write_stage_b(&self, t: usize, grid: &OccupancyGrid, latent: &SceneLatent) -> Result<(), EvoError> {
        let dir = self.iter_dir(t);
        std::fs::create_dir_all(&dir)?;
        grid.write_evog(&dir.join("grid.evog"))?;
        latent.save(&dir.join("latent.json"), &dir.join("latent.bin"))
    }

    pub fn write_stage_c(&self, t: usize, new_views: &[ViewEntry], metrics: &IterationMetrics) -> Result<(), EvoError> {
        let dir = self.iter_dir(t);
        let views_dir = dir.join("views");
        std::fs::create_dir_all(&views_dir)?;
        for v in new_views {
            v.image.save_png(&views_dir.join(format!("view_{:05}.png", v.id)))?;
            let sidecar = ViewSidecar {
                id: v.id,
                iteration_of_origin: v.iteration_of_origin,
                camera: CameraJson::pack(&v.intrinsics, &v.pose),
            };
            std::fs::write(
                views_dir.join(format!("view_{:05}.json", v.id)),
                serde_json::to_string_pretty(&sidecar).unwrap(),
            )?;
        }
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(metrics).unwrap())?;
        Ok(())
    }

    /// Hashes every file in the iteration directory into `checksum`,
    /// completing the checkpoint.
    pub fn finalize(&self, t: usize) -> Result<(), EvoError> {
        let dir = self.iter_dir(t);
        let mut lines = Vec::new();
        for rel in list_files(&dir)? {
            if rel == Path::new("checksum") {
                continue;
            }
            let bytes = std::fs::read(dir.join(&rel))?;
            let digest = Sha256::digest(&bytes);
            lines.push(format!("{:x}  {}", digest, rel.display()));
        }
        lines.sort();
        std::fs::write(dir.join("checksum"), lines.join("\n") + "\n")?;
        Ok(())
    }

    /// Verifies a checkpoint's checksum file. Any mismatch or missing file
    /// is an integrity error.
    pub fn verify(&self, t: usize) -> Result<(), EvoError> {
        let dir = self.iter_dir(t);
        let text = std::fs::read_to_string(dir.join("checksum"))
            .map_err(|_| EvoError::Checkpoint(format!("iter_{t}: missing checksum")))?;
        for line in text.lines() {
            let Some((hash, name)) = line.split_once("  ") else {
                return Err(EvoError::Checkpoint(format!("iter_{t}: malformed checksum line")));
            };
            let bytes = std::fs::read(dir.join(name))
                .map_err(|_| EvoError::Checkpoint(format!("iter_{t}: missing file {name}")))?;
            let digest = format!("{:x}", Sha256::digest(&bytes));
            if digest != hash {
                return Err(EvoError::Checkpoint(format!("iter_{t}: {name} hash mismatch")));
            }
        }
        Ok(())
    }

    /// Largest iteration with a valid checkpoint.
    pub fn latest_complete(&self) -> Option<usize> {
        let mut best = None;
        for t in 1..=512 {
            if self.iter_dir(t).join("checksum").exists() {
                if self.verify(t).is_ok() {
                    best = Some(t);
                }
            } else if !self.iter_dir(t).exists() {
                break;
            }
        }
        best
    }

    /// Rebuilds the loop state from checkpoints 1..=t.
    pub fn load_state(&self, t: usize) -> Result<IterationState, EvoError> {
        self.verify(t)?;
        let mut views = ViewSet::default();
        let mut records = Vec::new();
        let mut tto_losses = Vec::new();
        let mut coverage = Vec::new();
        for i in 1..=t {
            let dir = self.iter_dir(i);
            let views_dir = dir.join("views");
            if views_dir.exists() {
                let mut names: Vec<PathBuf> = std::fs::read_dir(&views_dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "json"))
                    .collect();
                names.sort();
                for sidecar_path in names {
                    let sidecar: ViewSidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
                        .map_err(|e| EvoError::Checkpoint(format!("bad view sidecar: {e}")))?;
                    let (intrinsics, pose) = sidecar.camera.unpack()?;
                    let image = ImageRgb::load_png(&sidecar_path.with_extension("png"))?;
                    views.entries.push(ViewEntry {
                        id: sidecar.id,
                        image,
                        intrinsics,
                        pose,
                        iteration_of_origin: sidecar.iteration_of_origin,
                    });
                }
            }
            let metrics: IterationMetrics = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json"))?)
                .map_err(|e| EvoError::Checkpoint(format!("bad metrics.json: {e}")))?;
            records.extend(metrics.records);
            tto_losses.push(metrics.tto_losses);
            coverage.extend(metrics.coverage);
        }
        views.entries.sort_by_key(|e| e.id);
        let dir = self.iter_dir(t);
        let prior = read_ply(&dir.join("prior.ply"))?;
        let grid = OccupancyGrid::read_evog(&dir.join("grid.evog"))?;
        let latent = SceneLatent::load(&dir.join("latent.json"), &dir.join("latent.bin"))?;
        let mesh = marching_cubes(latent.s, latent.origin, latent.pitch, &latent.occupancy_field());
        Ok(IterationState {
            t,
            views,
            prior,
            grid: Some(grid),
            latent: Some(latent),
            mesh: Some(mesh),
            records,
            tto_losses,
            coverage,
        })
    }
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>, EvoError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Final artifacts of a run.
pub struct RunArtifacts {
    pub state: IterationState,
    pub mesh: TexturedMesh,
    pub report: RunReport,
    pub glb: Vec<u8>,
}

/// Initializes the view set from the seed image via the depth backend
/// (camera fallback: configured FOV, identity pose), runs T iterations,
/// extracts and bakes the final mesh, and writes `scene.glb`, `report.json`
/// and the final latent when an output directory is given.
pub fn run(
    cfg: &PipelineConfig,
    seed_image: ImageRgb,
    backends: &PipelineBackends,
    out_dir: Option<&Path>,
    reference: Option<&ReferenceScene>,
) -> Result<RunArtifacts, EvoError> {
    cfg.validate()?;
    let state = initialize_state(cfg, seed_image, backends)?;
    let checkpoint = match out_dir {
        Some(dir) => Some(CheckpointCtx::new(dir)?),
        None => None,
    };
    let mut state = state;
    for _ in 0..cfg.iterations {
        state = run_iteration(state, cfg, backends, checkpoint.as_ref(), reference)?;
    }
    finalize_run(cfg, state, out_dir, reference)
}

/// Resumes from the latest valid checkpoint in `out_dir` and completes the
/// run. Fails when no checkpoint verifies.
pub fn resume(
    cfg: &PipelineConfig,
    out_dir: &Path,
    backends: &PipelineBackends,
    reference: Option<&ReferenceScene>,
) -> Result<RunArtifacts, EvoError> {
    cfg.validate()?;
    let checkpoint = CheckpointCtx::new(out_dir)?;
    let t = checkpoint
        .latest_complete()
        .ok_or_else(|| EvoError::Checkpoint("no valid checkpoint to resume from".into()))?;
    let mut state = checkpoint.load_state(t)?;
    while state.t < cfg.iterations {
        state = run_iteration(state, cfg, backends, Some(&checkpoint), reference)?;
    }
    finalize_run(cfg, state, Some(out_dir), reference)
}

fn initialize_state(
    cfg: &PipelineConfig,
    mut seed_image: ImageRgb,
    backends: &PipelineBackends,
) -> Result<IterationState, EvoError> {
    seed_image.quantize_u8();
    let resp = backends.depth.estimate(&DepthRequest {
        image: &seed_image,
        view_id: "seed".into(),
        camera_hint: None,
    })?;
    let intrinsics = match resp.intrinsics {
        Some(k) => k.scaled_to(seed_image.width, seed_image.height),
        None => CameraIntrinsics::from_hfov_deg(cfg.fallback_hfov_deg, seed_image.width, seed_image.height)?,
    };
    let pose = resp.pose.unwrap_or_else(CameraPose::identity);
    let views = ViewSet {
        entries: vec![ViewEntry { id: 0, image: seed_image, intrinsics, pose, iteration_of_origin: 0 }],
    };
    Ok(IterationState { views, ..Default::default() })
}

fn finalize_run(
    cfg: &PipelineConfig,
    state: IterationState,
    out_dir: Option<&Path>,
    reference: Option<&ReferenceScene>,
) -> Result<RunArtifacts, EvoError> {
    let latent = state.latent.as_ref().ok_or(EvoError::NoPrior)?;
    let raw_mesh = state.mesh.clone().ok_or(EvoError::NoPrior)?;

    let bake_views: Vec<BakeView> = state
        .views
        .entries
        .iter()
        .map(|e| BakeView {
            image: &e.image,
            intrinsics: e.intrinsics,
            pose: e.pose,
            recency_weight: if e.iteration_of_origin == 0 { cfg.seed_recency_weight } else { 1.0 },
        })
        .collect();
    let mesh_depths: Vec<DepthMap> = state
        .views
        .entries
        .iter()
        .map(|e| render_depth(&raw_mesh, &e.intrinsics, &e.pose, e.intrinsics.width, e.intrinsics.height))
        .collect();
    let mesh = if raw_mesh.is_empty() {
        raw_mesh.clone()
    } else {
        bake_textures(&raw_mesh, &bake_views, &mesh_depths, cfg.bake_visibility_pitch * latent.pitch)?
    };

    let chamfer = reference.map(|r| {
        let samples = sample_mesh_surface(&mesh, cfg.eval_samples, cfg.seed);
        crate::synthbench::chamfer_distance(&r.samples, &samples)
    });
    let report = RunReport {
        iterations: cfg.iterations,
        seed: cfg.seed,
        records: state.records.iter().map(|r| r.deterministic()).collect(),
        coverage_per_iteration: if state.coverage.is_empty() { None } else { Some(state.coverage.clone()) },
        chamfer,
        mesh_watertight: Some(mesh.is_watertight()),
        final_point_count: state.prior.len(),
        final_voxel_count: latent.len(),
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
    };
    let glb = if mesh.is_empty() { Vec::new() } else { export_glb(&mesh)? };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        if !glb.is_empty() {
            std::fs::write(dir.join("scene.glb"), &glb)?;
        }
        latent.save(&dir.join("latent.json"), &dir.join("latent.bin"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok(RunArtifacts { state, mesh, report, glb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{OracleDepth, OracleSynthesizer};
    use crate::completion::OracleCompleter;
    use crate::synthbench::default_suite;

    fn tiny_cfg(iterations: usize) -> PipelineConfig {
        PipelineConfig {
            grid_resolution: 24,
            patch_size: 12,
            patch_overlap: 4,
            iterations,
            frames_per_orbit: 5,
            view_size: 96,
            eval_samples: 1200,
            tto: TtoConfig {
                steps: 2,
                learning_rate: 1.0,
                weights: crate::rendering::LossWeights { l1: 1.0, lpips: 0.0, ssim: 1.0 },
                optimize_opacity: false,
                render_size: 64,
            },
            tto_max_views: 4,
            ..PipelineConfig::desk()
        }
    }

    fn scene_backends(scene: &SceneSpec) -> (OracleDepth, OracleCompleter, OracleSynthesizer) {
        (
            OracleDepth::new(scene.clone()),
            OracleCompleter::default(),
            OracleSynthesizer::new(scene.clone()),
        )
    }

    fn seed_image(scene: &SceneSpec, size: usize) -> ImageRgb {
        let (k, pose) = scene.seed_camera().unwrap();
        let k = k.scaled_to(size, size);
        crate::synthbench::render_gt(scene, &k, &pose, size, size).0
    }

    #[test]
    fn single_iteration_runs_stage_a_and_b_only() {
        let scene = &default_suite()[0];
        let (d, c, s) = scene_backends(scene);
        let backends = PipelineBackends { depth: &d, completer: &c, synthesizer: &s };
        let cfg = tiny_cfg(1);
        let art = run(&cfg, seed_image(scene, 96), &backends, None, None).unwrap();
        assert_eq!(art.state.t, 1);
        assert_eq!(art.state.views.len(), 1, "no synthesis on the final iteration");
        let stages: Vec<&str> = art.state.records.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(stages, vec!["A", "B", "C"]);
        assert_eq!(art.state.records[2].values.get("frames_added"), Some(&0.0));
        assert!(!art.mesh.is_empty());
    }

    #[test]
    fn view_count_grows_by_n_per_synthesising_iteration() {
        let scene = &default_suite()[0];
        let (d, c, s) = scene_backends(scene);
        let backends = PipelineBackends { depth: &d, completer: &c, synthesizer: &s };
        let cfg = tiny_cfg(3);
        let art = run(&cfg, seed_image(scene, 96), &backends, None, None).unwrap();
        // |V| grows 1 → 1+N → 1+2N; the final iteration adds none.
        assert_eq!(art.state.views.len(), 1 + 2 * cfg.frames_per_orbit);
    }

    #[test]
    fn checkpoints_resume_to_identical_artifacts() {
        let scene = &default_suite()[0];
        let (d, c, s) = scene_backends(scene);
        let backends = PipelineBackends { depth: &d, completer: &c, synthesizer: &s };
        let cfg = tiny_cfg(2);
        let dir_full = tempfile::tempdir().unwrap();
        let full = run(&cfg, seed_image(scene, 96), &backends, Some(dir_full.path()), None).unwrap();

        // Interrupted run: execute only iteration 1 with checkpoints, then resume.
        let dir_half = tempfile::tempdir().unwrap();
        let ckpt = CheckpointCtx::new(dir_half.path()).unwrap();
        let state = initialize_state(&cfg, seed_image(scene, 96), &backends).unwrap();
        let _ = run_iteration(state, &cfg, &backends, Some(&ckpt), None).unwrap();
        let resumed = resume(&cfg, dir_half.path(), &backends, None).unwrap();

        let report_full = serde_json::to_string(&full.report).unwrap();
        let report_resumed = serde_json::to_string(&resumed.report).unwrap();
        // Wall times are stripped from reports, so equality is byte-level.
        assert_eq!(report_full, report_resumed);
        assert_eq!(full.glb, resumed.glb, "resumed GLB must be byte-identical");
    }

    #[test]
    fn corrupted_checkpoint_refuses_resume() {
        let scene = &default_suite()[0];
        let (d, c, s) = scene_backends(scene);
        let backends = PipelineBackends { depth: &d, completer: &c, synthesizer: &s };
        let cfg = tiny_cfg(2);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = CheckpointCtx::new(dir.path()).unwrap();
        let state = initialize_state(&cfg, seed_image(scene, 96), &backends).unwrap();
        let _ = run_iteration(state, &cfg, &backends, Some(&ckpt), None).unwrap();
        // Flip a byte in the prior.
        let ply = dir.path().join("iter_1").join("prior.ply");
        let mut bytes = std::fs::read(&ply).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&ply, bytes).unwrap();
        match resume(&cfg, dir.path(), &backends, None) {
            Err(EvoError::Checkpoint(_)) => {}
            Err(other) => panic!("expected checkpoint error, got {other:?}"),
            Ok(_) => panic!("resume must refuse a corrupted checkpoint"),
        }
    }

    #[test]
    fn coverage_is_recorded_per_iteration() {
        let scene = &default_suite()[0];
        let (d, c, s) = scene_backends(scene);
        let backends = PipelineBackends { depth: &d, completer: &c, synthesizer: &s };
        let cfg = tiny_cfg(2);
        let reference = ReferenceScene::new(scene.clone(), cfg.eval_samples, cfg.seed);
        let art = run(&cfg, seed_image(scene, 96), &backends, None, Some(&reference)).unwrap();
        assert_eq!(art.state.coverage.len(), 2);
        assert!(art.report.coverage_per_iteration.is_some());
        assert!(art.report.chamfer.is_some());
        for c in &art.state.coverage {
            assert!((0.0..=1.0).contains(c));
        }
    }
}

//! Three-stage training, batch gradients, checkpoints and view rendering.
//!
//! Stage 1 fits the density network to LiDAR rays, stage 2 fits the color
//! network to camera rays with density frozen, stage 3 trains both jointly.
//! The occupancy grid learns from the LiDAR batches of stages 1 and 3 and
//! (with `sampler = "ogm"`) chooses where every ray is sampled.
//!
//! Randomness is derived from `(seed, purpose, counter, chunk)`, never from a
//! running generator, and per-chunk results are reduced in chunk order. Runs
//! are therefore bit-reproducible for a given seed whatever the thread count,
//! and a checkpoint only needs the iteration and pool counters to resume.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::{depth_metrics, mssim, psnr, DepthEvalMask, EvalReport, ImageMetrics};
use crate::field::{FieldConfig, FieldModel, ParamSet, PathGrads};
use crate::geometry::{camera_ray, lidar_ray, sample_subpixel_gt, CameraIntrinsics, Pose, Ray, WorldCube};
use crate::io_util::write_atomic;
use crate::loss::{sight_loss, SightTarget, opacity_loss, color_loss, total_loss, LossBreakdown, LossSchedule, ScheduleConfig};
use crate::ogm::{OccupancyGrid, OgmConfig};
use crate::raster::{ColorImage, DepthMap};
use crate::render::{sample_points, spacings, weights_backward, weights_unchecked, RaySampler, UniformSampler};
use crate::scenedata::{SceneDataset, Split};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Purposes of the derived random streams.
mod stream_tag {
    pub const INIT: u64 = 1;
    pub const LIDAR_POOL: u64 = 2;
    pub const CAMERA_POOL: u64 = 3;
    pub const LIDAR_SAMPLES: u64 = 4;
    pub const CAMERA_SAMPLES: u64 = 5;
    pub const RENDER: u64 = 6;
}

/// Independent generator for `(seed, tag, a, b)`.
pub fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, tag, a, b].into_iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Half stratified, half importance-sampled from the occupancy grid.
    Ogm,
    /// Stratified-uniform only.
    Uniform,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ogm" => Ok(SamplerKind::Ogm),
            "uniform" => Ok(SamplerKind::Uniform),
            _ => Err(Error::Config(format!("unknown sampler '{s}' (expected ogm or uniform)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub stage3_iters: u64,
    pub lidar_batch: usize,
    pub camera_batch: usize,
    /// Occupancy-grid step cadence, in iterations of stages 1 and 3.
    pub ogm_every: u64,
    pub sampler: SamplerKind,
    pub samples_per_ray: usize,
    /// Camera samples whose rendering weight is below this are skipped by the
    /// color network (their contribution is bounded by the threshold).
    pub color_weight_threshold: f64,
    /// Rays per work unit; also the granularity of the ordered reduction.
    pub chunk_rays: usize,
    /// Process work units one after another on the calling thread.
    pub deterministic: bool,
    pub field: FieldConfig,
    pub ogm: OgmConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1_iters: 2500,
            stage2_iters: 2500,
            stage3_iters: 10_000,
            lidar_batch: 1024,
            camera_batch: 1024,
            ogm_every: 10,
            sampler: SamplerKind::Ogm,
            samples_per_ray: 128,
            color_weight_threshold: 1e-4,
            chunk_rays: 64,
            deterministic: false,
            field: FieldConfig::default(),
            ogm: OgmConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lidar_batch >= 1 && self.camera_batch >= 1 && self.chunk_rays >= 1,
            Config,
            "batch sizes and chunk size must be positive"
        );
        ensure!(self.ogm_every >= 1, Config, "ogm_every must be positive");
        ensure!(
            self.stage1_iters + self.stage2_iters + self.stage3_iters >= 1,
            Config,
            "the schedule has no iterations"
        );
        ensure!(
            self.samples_per_ray >= 2 && self.samples_per_ray % 2 == 0,
            Config,
            "samples_per_ray must be even and at least 2, got {}",
            self.samples_per_ray
        );
        ensure!(
            self.color_weight_threshold >= 0.0 && self.color_weight_threshold < 1.0,
            Config,
            "color_weight_threshold must be in [0, 1)"
        );
        // Checkpoint headers store integers as signed 64-bit.
        ensure!(self.seed <= i64::MAX as u64, Config, "seed must be below 2^63");
        self.field.validate()?;
        self.ogm.validate()?;
        Ok(())
    }

    pub fn total_iters(&self) -> u64 {
        self.stage1_iters + self.stage2_iters + self.stage3_iters
    }

    /// ε decays over the iterations that carry LiDAR supervision.
    pub fn lidar_iters(&self) -> u64 {
        self.stage1_iters + self.stage3_iters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Sigma = 1,
    Color = 2,
    Joint = 3,
}

impl Stage {
    pub fn uses_lidar(self) -> bool {
        self != Stage::Color
    }

    pub fn uses_camera(self) -> bool {
        self != Stage::Sigma
    }

    fn params(self) -> ParamSet {
        match self {
            Stage::Sigma => ParamSet::Sigma,
            Stage::Color => ParamSet::Color,
            Stage::Joint => ParamSet::Both,
        }
    }
}

/// Sensor data in world-cube coordinates, ready for training.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub meta: SceneMeta,
    pub lidar_rays: Vec<Ray>,
    pub cameras: Vec<TrainCamera>,
}

/// Normalization shared by training and rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub world_cube: WorldCube,
    /// Ray bounds in world-cube units.
    pub near: f64,
    pub far: f64,
    /// Metric intrinsics of the first training camera.
    pub reference_intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone)]
pub struct TrainCamera {
    /// Camera-to-world in world-cube coordinates.
    pub pose: Pose,
    /// Intrinsics with ray bounds in world-cube units.
    pub intrinsics: CameraIntrinsics,
    pub image: ColorImage,
}

impl TrainCamera {
    fn pixels(&self) -> usize {
        self.image.width * self.image.height
    }
}

impl TrainingData {
    /// Normalizes the training split. LiDAR returns outside the world cube or
    /// the camera ray bounds are dropped.
    pub fn prepare(dataset: &SceneDataset) -> Result<Self> {
        dataset.validate()?;
        let cube = dataset.world_cube()?;
        let s = cube.scale_factor;
        let train: Vec<_> = dataset.frames(Split::Train).collect();
        let near = train.iter().map(|f| f.intrinsics.near).fold(f64::INFINITY, f64::min) * s;
        let far = train.iter().map(|f| f.intrinsics.far).fold(0.0, f64::max) * s;
        let cameras = train
            .iter()
            .map(|f| TrainCamera {
                pose: cube.apply_pose(&f.pose),
                intrinsics: f.intrinsics.scaled_bounds(s),
                image: f.image.clone(),
            })
            .collect();
        let mut lidar_rays = Vec::new();
        let mut dropped = 0usize;
        for scan in &dataset.scans {
            let pose = cube.apply_pose(&scan.pose);
            for p in &scan.points {
                let local = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) * s;
                let Ok(ray) = lidar_ray(&pose, &local) else {
                    dropped += 1;
                    continue;
                };
                let z = ray.gt_depth.unwrap_or(0.0);
                if z > near && z < far && WorldCube::contains(&ray.at(z)) {
                    lidar_rays.push(ray);
                } else {
                    dropped += 1;
                }
            }
        }
        info!(
            "training data: {} LiDAR rays ({dropped} outside the region of interest), {} cameras",
            lidar_rays.len(),
            train.len()
        );
        Ok(Self {
            meta: SceneMeta {
                world_cube: cube,
                near,
                far,
                reference_intrinsics: train[0].intrinsics,
            },
            lidar_rays,
            cameras,
        })
    }

    pub fn camera_ray_count(&self) -> usize {
        self.cameras.iter().map(TrainCamera::pixels).sum()
    }
}

/// Position in an epoch-wise shuffled ray pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PoolCursor {
    pub epoch: u64,
    pub cursor: u64,
}

/// Cached permutation (and camera jitter) of one epoch.
#[derive(Debug, Clone, Default)]
struct EpochCache {
    key: Option<(u64, usize)>,
    order: Vec<u32>,
    jitter: Vec<[f64; 2]>,
}

impl EpochCache {
    fn ensure(&mut self, seed: u64, tag: u64, epoch: u64, len: usize, with_jitter: bool) {
        if self.key == Some((epoch, len)) {
            return;
        }
        let mut rng = derived_rng(seed, tag, epoch, 0);
        self.order = (0..len as u32).collect();
        self.order.shuffle(&mut rng);
        self.jitter = if with_jitter {
            (0..len).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
        } else {
            Vec::new()
        };
        self.key = Some((epoch, len));
    }
}

/// Draws `count` pool entries without replacement within an epoch; the next
/// epoch is reshuffled from its own stream. Returns `(index, jitter)` pairs.
fn draw(
    pos: &mut PoolCursor,
    cache: &mut EpochCache,
    seed: u64,
    tag: u64,
    len: usize,
    count: usize,
    with_jitter: bool,
) -> Vec<(usize, [f64; 2])> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if pos.cursor as usize >= len {
            pos.epoch += 1;
            pos.cursor = 0;
        }
        cache.ensure(seed, tag, pos.epoch, len, with_jitter);
        let k = pos.cursor as usize;
        let jitter = if with_jitter { cache.jitter[k] } else { [0.0; 2] };
        out.push((cache.order[k] as usize, jitter));
        pos.cursor += 1;
    }
    out
}

/// Iteration counters; together with the parameters they fully determine
/// the rest of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Progress {
    /// Completed iterations over all stages.
    pub iteration: u64,
    /// Completed iterations that carried LiDAR supervision.
    pub lidar_iteration: u64,
    pub lidar_pool: PoolCursor,
    pub camera_pool: PoolCursor,
    /// Iterations accumulated into the occupancy grid since its last step.
    pub ogm_pending: u64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: u8,
    /// 1-based over the whole schedule.
    pub iteration: u64,
    /// 1-based within the stage.
    pub stage_iteration: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opacity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color: Option<f64>,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub ogm_steps: u64,
    pub wall_time_s: f64,
}

/// Loss sums and gradients of a group of LiDAR rays.
#[derive(Debug, Clone)]
pub struct LidarChunk {
    pub sight: f64,
    pub opacity: f64,
    pub points: Vec<[f64; 3]>,
    pub grads: PathGrads,
}

/// Loss sum and gradients of a group of camera rays.
#[derive(Debug, Clone)]
pub struct CameraChunk {
    pub color: f64,
    /// Points that went through the color network.
    pub points: Vec<[f64; 3]>,
    pub grads: PathGrads,
}

/// Sample distances for each ray.
pub fn sample_rays(
    sampler: &(dyn RaySampler + Sync),
    rays: &[Ray],
    near: f64,
    far: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    rays.iter()
        .map(|r| sampler.sample_ray(r, near, far, count, rng))
        .collect()
}

/// LiDAR objective over `rays` with fixed samples. Loss values are sums over
/// rays; the gradient is of `scale · (λ₁·Σ L_sight + Σ L_opacity)` with
/// respect to the density path only.
#[allow(clippy::too_many_arguments)]
pub fn lidar_chunk_gradients(
    model: &FieldModel,
    rays: &[Ray],
    samples: &[Vec<f64>],
    far: f64,
    lambda1: f64,
    epsilon: f64,
    sight_target: SightTarget,
    scale: f64,
) -> Result<LidarChunk> {
    let mut points = Vec::with_capacity(samples.iter().map(Vec::len).sum());
    for (ray, t) in rays.iter().zip(samples) {
        points.extend(sample_points(ray, t));
    }
    let tape = model.sigma_forward_batch(&points);
    let sigma = tape.sigma();
    let mut d_sigma = vec![0.0; points.len()];
    let (mut sight, mut opacity) = (0.0, 0.0);
    let mut off = 0;
    for (ray, t) in rays.iter().zip(samples) {
        let z = ray
            .gt_depth
            .ok_or_else(|| Error::Contract("LiDAR ray without a measured range".into()))?;
        let n = t.len();
        let delta = spacings(t, far)?;
        let (w, trans) = weights_unchecked(&sigma[off..off + n], &delta);
        let (ls, g_sight) = sight_loss(sight_target, &w, t, far, z, epsilon)?;
        let (lo, g_opacity) = opacity_loss(&w);
        sight += ls;
        opacity += lo;
        let d_w: Vec<f64> = g_sight.iter().map(|g| scale * (lambda1 * g + g_opacity)).collect();
        d_sigma[off..off + n].copy_from_slice(&weights_backward(&delta, &w, &trans, &d_w));
        off += n;
    }
    let grads = model.sigma_backward_batch(&tape, &d_sigma);
    Ok(LidarChunk {
        sight,
        opacity,
        points,
        grads,
    })
}

/// Camera objective over `rays` with fixed samples. Density is evaluated
/// without a tape, so nothing reaches the density path. The color sum is
/// over rays; the gradient is of `scale · λ₂ · Σ L_color`.
pub fn camera_chunk_gradients(
    model: &FieldModel,
    rays: &[Ray],
    samples: &[Vec<f64>],
    far: f64,
    lambda2: f64,
    scale: f64,
    weight_threshold: f64,
) -> Result<CameraChunk> {
    let mut all = Vec::with_capacity(samples.iter().map(Vec::len).sum());
    for (ray, t) in rays.iter().zip(samples) {
        all.extend(sample_points(ray, t));
    }
    let sigma = model.sigma_infer(&all);
    let mut kept_points = Vec::new();
    let mut kept_dirs = Vec::new();
    let mut kept_w = Vec::new();
    let mut ray_spans = Vec::with_capacity(rays.len());
    let mut off = 0;
    for (ray, t) in rays.iter().zip(samples) {
        let n = t.len();
        let delta = spacings(t, far)?;
        let (w, _) = weights_unchecked(&sigma[off..off + n], &delta);
        let start = kept_points.len();
        let d = [ray.direction.x, ray.direction.y, ray.direction.z];
        for (i, &wi) in w.iter().enumerate() {
            if wi >= weight_threshold && wi > 0.0 {
                kept_points.push(all[off + i]);
                kept_dirs.push(d);
                kept_w.push(wi);
            }
        }
        ray_spans.push(start..kept_points.len());
        off += n;
    }
    let tape = model.color_forward_batch(&kept_points, &kept_dirs)?;
    let colors = tape.colors();
    let mut d_color = vec![0.0; colors.len()];
    let mut total = 0.0;
    for (ray, span) in rays.iter().zip(ray_spans) {
        let gt = ray
            .gt_color
            .ok_or_else(|| Error::Contract("camera ray without a ground-truth color".into()))?;
        let mut pred = [0.0; 3];
        for k in span.clone() {
            for c in 0..3 {
                pred[c] += kept_w[k] * colors[3 * k + c];
            }
        }
        let (l, g) = color_loss(&pred, &gt);
        total += l;
        for k in span {
            for c in 0..3 {
                d_color[3 * k + c] = scale * lambda2 * g[c] * kept_w[k];
            }
        }
    }
    let grads = if kept_points.is_empty() {
        PathGrads {
            mlp: vec![0.0; model.color_mlp.params.len()],
            features: Vec::new(),
        }
    } else {
        model.color_backward_batch(&tape, &d_color)
    };
    Ok(CameraChunk {
        color: total,
        points: kept_points,
        grads,
    })
}

/// Full training state: parameters, occupancy grid and counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub meta: SceneMeta,
    pub model: FieldModel,
    pub ogm: OccupancyGrid,
    pub progress: Progress,
    lidar_cache: EpochCache,
    camera_cache: EpochCache,
}

impl TrainState {
    pub fn new(config: TrainConfig, meta: SceneMeta) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, stream_tag::INIT, 0, 0);
        let model = FieldModel::new(config.field, &mut rng)?;
        let ogm = OccupancyGrid::new(config.ogm)?;
        let state = Self {
            config,
            meta,
            model,
            ogm,
            progress: Progress::default(),
            lidar_cache: EpochCache::default(),
            camera_cache: EpochCache::default(),
        };
        state.schedule()?;
        Ok(state)
    }

    /// λ₁ / λ₂ / ε at the current LiDAR iteration.
    pub fn schedule(&self) -> Result<LossSchedule> {
        let mut s = LossSchedule::new(
            self.config.schedule,
            self.meta.near,
            self.meta.far,
            self.config.ogm.cell_size(),
            self.config.lidar_iters(),
        )?;
        s.iteration = self.progress.lidar_iteration;
        Ok(s)
    }

    /// Stage of the next iteration, `None` when the schedule is complete.
    pub fn current_stage(&self) -> Option<Stage> {
        let c = &self.config;
        let i = self.progress.iteration;
        if i < c.stage1_iters {
            Some(Stage::Sigma)
        } else if i < c.stage1_iters + c.stage2_iters {
            Some(Stage::Color)
        } else if i < c.total_iters() {
            Some(Stage::Joint)
        } else {
            None
        }
    }

    fn stage_bounds(&self, stage: Stage) -> (u64, u64) {
        let c = &self.config;
        match stage {
            Stage::Sigma => (0, c.stage1_iters),
            Stage::Color => (c.stage1_iters, c.stage1_iters + c.stage2_iters),
            Stage::Joint => (c.stage1_iters + c.stage2_iters, c.total_iters()),
        }
    }

    fn sampler(&self) -> &(dyn RaySampler + Sync) {
        match self.config.sampler {
            SamplerKind::Ogm => &self.ogm,
            SamplerKind::Uniform => &UniformSampler,
        }
    }

    fn map_chunks<T, F>(&self, n_rays: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, std::ops::Range<usize>) -> Result<T> + Sync,
    {
        let size = self.config.chunk_rays;
        let ranges: Vec<_> = (0..n_rays.div_ceil(size))
            .map(|k| k * size..((k + 1) * size).min(n_rays))
            .collect();
        if self.config.deterministic {
            ranges.into_iter().enumerate().map(|(k, r)| f(k, r)).collect()
        } else {
            ranges.into_par_iter().enumerate().map(|(k, r)| f(k, r)).collect()
        }
    }

    fn lidar_pass(&mut self, data: &TrainingData, schedule: &LossSchedule) -> Result<(f64, f64)> {
        ensure!(!data.lidar_rays.is_empty(), Config, "no LiDAR rays available for training");
        let c = self.config;
        let picks = draw(
            &mut self.progress.lidar_pool,
            &mut self.lidar_cache,
            c.seed,
            stream_tag::LIDAR_POOL,
            data.lidar_rays.len(),
            c.lidar_batch,
            false,
        );
        let rays: Vec<Ray> = picks.iter().map(|&(i, _)| data.lidar_rays[i]).collect();
        let (lambda1, epsilon) = (schedule.lambda1(), schedule.epsilon());
        let sight_target = c.schedule.sight_target;
        let scale = 1.0 / rays.len() as f64;
        let it = self.progress.iteration;
        let (near, far) = (self.meta.near, self.meta.far);
        let chunks = self.map_chunks(rays.len(), |k, range| {
            let mut rng = derived_rng(c.seed, stream_tag::LIDAR_SAMPLES, it, k as u64);
            let rays = &rays[range];
            let samples = sample_rays(self.sampler(), rays, near, far, c.samples_per_ray, &mut rng)?;
            let out = lidar_chunk_gradients(&self.model, rays, &samples, far, lambda1, epsilon, sight_target, scale)?;
            Ok((out, samples))
        })?;
        let (mut sight, mut opacity) = (0.0, 0.0);
        let mut offset = 0;
        for (chunk, samples) in chunks {
            sight += chunk.sight;
            opacity += chunk.opacity;
            self.model.accumulate_sigma(&chunk.points, &chunk.grads);
            self.ogm.accumulate(&rays[offset..offset + samples.len()], &samples)?;
            offset += samples.len();
        }
        Ok((sight * scale, opacity * scale))
    }

    fn camera_rays(&mut self, data: &TrainingData) -> Result<Vec<Ray>> {
        let total = data.camera_ray_count();
        ensure!(total > 0, Config, "no training camera rays available");
        let c = self.config;
        let picks = draw(
            &mut self.progress.camera_pool,
            &mut self.camera_cache,
            c.seed,
            stream_tag::CAMERA_POOL,
            total,
            c.camera_batch,
            true,
        );
        picks
            .into_iter()
            .map(|(mut idx, [jx, jy])| {
                let cam = data
                    .cameras
                    .iter()
                    .find(|cam| {
                        let hit = idx < cam.pixels();
                        if !hit {
                            idx -= cam.pixels();
                        }
                        hit
                    })
                    .expect("pool index within the camera pixel count");
                let (px, py) = (idx % cam.image.width, idx / cam.image.width);
                let (u, v) = (px as f64 + jx, py as f64 + jy);
                let ray = camera_ray(&cam.pose, &cam.intrinsics, u, v)?;
                Ok(ray.with_color(sample_subpixel_gt(&cam.image, u, v)?))
            })
            .collect()
    }

    fn camera_pass(&mut self, data: &TrainingData, schedule: &LossSchedule) -> Result<f64> {
        let rays = self.camera_rays(data)?;
        let c = self.config;
        let lambda2 = schedule.lambda2();
        let scale = 1.0 / rays.len() as f64;
        let it = self.progress.iteration;
        let (near, far) = (self.meta.near, self.meta.far);
        let chunks = self.map_chunks(rays.len(), |k, range| {
            let mut rng = derived_rng(c.seed, stream_tag::CAMERA_SAMPLES, it, k as u64);
            let rays = &rays[range];
            let samples = sample_rays(self.sampler(), rays, near, far, c.samples_per_ray, &mut rng)?;
            camera_chunk_gradients(
                &self.model,
                rays,
                &samples,
                far,
                lambda2,
                scale,
                c.color_weight_threshold,
            )
        })?;
        let mut color = 0.0;
        for chunk in chunks {
            color += chunk.color;
            self.model.accumulate_color(&chunk.points, &chunk.grads);
        }
        Ok(color * scale)
    }

    fn assert_decoupled(&self, which: ParamSet) -> Result<()> {
        let blocks = self.model.blocks();
        let idle = match which {
            ParamSet::Sigma => FieldModel::SIGMA_BLOCKS,
            ParamSet::Color => FieldModel::COLOR_BLOCKS,
            ParamSet::Both => return Ok(()),
        };
        ensure!(
            idle.iter().all(|&b| !blocks[b].has_gradient()),
            Contract,
            "{which:?} parameters received gradient from the other sensor"
        );
        Ok(())
    }

    /// Runs the next iteration of the schedule.
    pub fn step(&mut self, data: &TrainingData) -> Result<IterationRecord> {
        let stage = self
            .current_stage()
            .ok_or_else(|| Error::Contract("training schedule already complete".into()))?;
        ensure!(
            data.meta == self.meta,
            Contract,
            "training data was normalized differently from this state"
        );
        let started = Instant::now();
        let schedule = self.schedule()?;
        let spot_check = self.progress.iteration % 500 == 0;

        let mut camera_term = None;
        if stage.uses_camera() {
            camera_term = Some(self.camera_pass(data, &schedule)?);
            if spot_check {
                self.assert_decoupled(ParamSet::Sigma)?;
            }
        }
        let mut lidar_terms = None;
        if stage.uses_lidar() {
            if spot_check && stage == Stage::Sigma {
                self.assert_decoupled(ParamSet::Color)?;
            }
            lidar_terms = Some(self.lidar_pass(data, &schedule)?);
            if spot_check && stage == Stage::Sigma {
                self.assert_decoupled(ParamSet::Color)?;
            }
        }
        let breakdown: LossBreakdown = total_loss(lidar_terms, camera_term, &schedule);
        self.model.apply_gradients(stage.params());

        let (start, end) = self.stage_bounds(stage);
        self.progress.iteration += 1;
        if stage.uses_lidar() {
            self.progress.lidar_iteration += 1;
            self.progress.ogm_pending += 1;
            let stage_done = self.progress.iteration == end;
            if self.progress.ogm_pending == self.config.ogm_every || stage_done {
                // The stage boundary flushes a partial accumulation.
                self.ogm.step();
                self.progress.ogm_pending = 0;
            }
        }
        if self.progress.iteration % 100 == 0 || self.current_stage() != Some(stage) {
            self.model.check_finite()?;
        }
        ensure!(
            breakdown.total.is_finite(),
            NonFinite,
            "loss is {} at iteration {}",
            breakdown.total,
            self.progress.iteration
        );
        Ok(IterationRecord {
            stage: stage as u8,
            iteration: self.progress.iteration,
            stage_iteration: self.progress.iteration - start,
            sight: breakdown.sight,
            opacity: breakdown.opacity,
            color: breakdown.color,
            total: breakdown.total,
            lambda1: breakdown.lambda1,
            lambda2: breakdown.lambda2,
            epsilon: breakdown.epsilon,
            ogm_steps: self.ogm.steps,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs (or resumes) `stage` to its end. Stages must run in order.
    pub fn run_stage(
        &mut self,
        stage: Stage,
        data: &TrainingData,
        log: &mut dyn FnMut(&IterationRecord) -> Result<()>,
    ) -> Result<()> {
        let (start, end) = self.stage_bounds(stage);
        let i = self.progress.iteration;
        ensure!(
            (start..end).contains(&i) || (start == end && i == start),
            Contract,
            "cannot run stage {} at iteration {i} (stage covers {start}..{end})",
            stage as u8
        );
        while self.progress.iteration < end {
            let rec = self.step(data)?;
            if rec.iteration % 250 == 0 || rec.iteration == end {
                debug!(
                    "stage {} iteration {} total {:.5}",
                    rec.stage, rec.iteration, rec.total
                );
            }
            log(&rec)?;
        }
        Ok(())
    }

    pub fn run_stage1(&mut self, data: &TrainingData, log: &mut dyn FnMut(&IterationRecord) -> Result<()>) -> Result<()> {
        self.run_stage(Stage::Sigma, data, log)
    }

    pub fn run_stage2(&mut self, data: &TrainingData, log: &mut dyn FnMut(&IterationRecord) -> Result<()>) -> Result<()> {
        self.run_stage(Stage::Color, data, log)
    }

    pub fn run_stage3(&mut self, data: &TrainingData, log: &mut dyn FnMut(&IterationRecord) -> Result<()>) -> Result<()> {
        self.run_stage(Stage::Joint, data, log)
    }

    // -----------------------------------------------------------------------
    // Checkpoints

    /// Layout: magic `FFCK`, `u32` version, `u64` header length, a TOML
    /// header (config, normalization, counters), then every parameter block
    /// (`u64` length, `u64` optimizer step, values, first and second moments)
    /// and the occupancy grid (`u64` cells, log-odds, pending gradient), all
    /// little-endian `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config,
            meta: self.meta,
            progress: self.progress,
            ogm_steps: self.ogm.steps,
        };
        let text = toml::to_string(&header)
            .map_err(|e| Error::Config(format!("cannot serialize checkpoint header: {e}")))?;
        let blocks = self.model.blocks();
        write_atomic(path, |w| {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(text.len() as u64).to_le_bytes())?;
            w.write_all(text.as_bytes())?;
            for b in blocks {
                w.write_all(&(b.len() as u64).to_le_bytes())?;
                w.write_all(&b.step.to_le_bytes())?;
                for arr in [&b.value, &b.m, &b.v] {
                    write_f64s(w, arr)?;
                }
            }
            w.write_all(&(self.ogm.logodds.len() as u64).to_le_bytes())?;
            write_f64s(w, &self.ogm.logodds)?;
            write_f64s(w, &self.ogm.buffer)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Version {
                path: path.into(),
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.into(),
                expected: CHECKPOINT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, 0, "checkpoint header is not UTF-8"))?;
        let header: CheckpointHeader =
            toml::from_str(text).map_err(|e| Error::format(path, 0, format!("bad checkpoint header: {e}")))?;
        let mut state = TrainState::new(header.config, header.meta)?;
        for (i, b) in state.model.blocks_mut().into_iter().enumerate() {
            let n = r.u64()? as usize;
            if n != b.len() {
                return Err(Error::format(
                    path,
                    0,
                    format!("parameter block {i} has {n} entries, config implies {}", b.len()),
                ));
            }
            b.step = r.u64()?;
            for arr in [&mut b.value, &mut b.m, &mut b.v] {
                r.f64s(arr)?;
            }
        }
        let cells = r.u64()? as usize;
        if cells != state.ogm.logodds.len() {
            return Err(Error::format(path, 0, format!("occupancy grid has {cells} cells")));
        }
        r.f64s(&mut state.ogm.logodds)?;
        r.f64s(&mut state.ogm.buffer)?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, 0, "trailing bytes after checkpoint payload"));
        }
        state.ogm.steps = header.ogm_steps;
        state.progress = header.progress;
        state.model.check_finite()?;
        Ok(state)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    meta: SceneMeta,
    progress: Progress,
    ogm_steps: u64,
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, 0, format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, out: &mut [f64]) -> Result<()> {
        let raw = self.take(out.len() * 8)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rendering and evaluation

/// Rendering options for full views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub color_weight_threshold: f64,
    pub deterministic: bool,
}

impl RenderOptions {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            samples_per_ray: c.samples_per_ray,
            sampler: c.sampler,
            seed: c.seed,
            color_weight_threshold: c.color_weight_threshold,
            deterministic: c.deterministic,
        }
    }
}

/// Renders a color image and a metric range map for a metric camera pose,
/// one ray per pixel center.
pub fn render_view(
    state: &TrainState,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    opts: &RenderOptions,
) -> Result<(ColorImage, DepthMap)> {
    intrinsics.validate()?;
    ensure!(
        opts.samples_per_ray >= 2 && opts.samples_per_ray % 2 == 0,
        Config,
        "samples_per_ray must be even and at least 2"
    );
    let cube = state.meta.world_cube;
    let s = cube.scale_factor;
    let pose_n = cube.apply_pose(pose);
    let intr_n = intrinsics.scaled_bounds(s);
    let (near, far) = (intr_n.near, intr_n.far);
    let sampler: &(dyn RaySampler + Sync) = match opts.sampler {
        SamplerKind::Ogm => &state.ogm,
        SamplerKind::Uniform => &UniformSampler,
    };
    let (w, h) = (intrinsics.width, intrinsics.height);
    let render_row = |y: usize| -> Result<Vec<([f64; 3], f32)>> {
        let mut rng = derived_rng(opts.seed, stream_tag::RENDER, y as u64, 0);
        let rays = (0..w)
            .map(|x| camera_ray(&pose_n, &intr_n, x as f64, y as f64))
            .collect::<Result<Vec<_>>>()?;
        let samples = sample_rays(sampler, &rays, near, far, opts.samples_per_ray, &mut rng)?;
        let mut all = Vec::with_capacity(w * opts.samples_per_ray);
        for (ray, t) in rays.iter().zip(&samples) {
            all.extend(sample_points(ray, t));
        }
        let sigma = state.model.sigma_infer(&all);
        let mut kept_points = Vec::new();
        let mut kept_dirs = Vec::new();
        let mut kept_w = Vec::new();
        let mut spans = Vec::with_capacity(w);
        let mut depths = Vec::with_capacity(w);
        let mut off = 0;
        for (ray, t) in rays.iter().zip(&samples) {
            let n = t.len();
            let delta = spacings(t, far)?;
            let (wts, _) = weights_unchecked(&sigma[off..off + n], &delta);
            depths.push(wts.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / s);
            let start = kept_points.len();
            let d = [ray.direction.x, ray.direction.y, ray.direction.z];
            for (i, &wi) in wts.iter().enumerate() {
                if wi >= opts.color_weight_threshold && wi > 0.0 {
                    kept_points.push(all[off + i]);
                    kept_dirs.push(d);
                    kept_w.push(wi);
                }
            }
            spans.push(start..kept_points.len());
            off += n;
        }
        let colors = if kept_points.is_empty() {
            Vec::new()
        } else {
            state.model.color_infer(&kept_points, &kept_dirs)?
        };
        Ok(spans
            .into_iter()
            .zip(depths)
            .map(|(span, d)| {
                let mut c = [0.0; 3];
                for k in span {
                    for ch in 0..3 {
                        c[ch] += kept_w[k] * colors[3 * k + ch];
                    }
                }
                (c, d as f32)
            })
            .collect())
    };
    let rows: Vec<_> = if opts.deterministic {
        (0..h).map(render_row).collect::<Result<_>>()?
    } else {
        (0..h).into_par_iter().map(render_row).collect::<Result<_>>()?
    };
    let mut image = ColorImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d)) in row.into_iter().enumerate() {
            image.set(x, y, c);
            depth.set(x, y, d);
        }
    }
    Ok((image, depth))
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of image rows removed from the top before depth evaluation.
    pub top_crop: f64,
    /// Ground-truth ranges beyond this (metres) are ignored.
    pub max_depth: Option<f64>,
    /// Score depth only where the dataset marks the surface as reachable by
    /// a LiDAR beam (when it provides such a mask).
    pub lidar_mask: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_crop: 1.0 / 3.0,
            max_depth: None,
            lidar_mask: true,
        }
    }
}

/// Rendered views of the test split, kept for writing to disk.
pub struct EvaluatedView {
    pub index: usize,
    pub image: ColorImage,
    pub depth: DepthMap,
}

/// Renders every test frame and scores it against the dataset.
pub fn evaluate(
    state: &TrainState,
    dataset: &SceneDataset,
    eval: &EvalConfig,
    opts: &RenderOptions,
) -> Result<(EvalReport, Vec<EvaluatedView>)> {
    let test: Vec<(usize, _)> = dataset
        .cameras
        .iter()
        .enumerate()
        .filter(|(_, f)| f.split == Split::Test)
        .collect();
    ensure!(!test.is_empty(), Config, "dataset has no test frames");
    let mut images = Vec::with_capacity(test.len());
    let mut views = Vec::with_capacity(test.len());
    for (index, frame) in test {
        let (image, depth) = render_view(state, &frame.pose, &frame.intrinsics, opts)?;
        let depth_m = match &frame.depth {
            Some(gt) => {
                let mut mask = DepthEvalMask::from_ground_truth(gt, eval.top_crop, eval.max_depth)?;
                if let (true, Some(keep)) = (eval.lidar_mask, &frame.lidar_mask) {
                    mask = mask.restrict(keep)?;
                }
                Some(depth_metrics(&depth, gt, &mask)?)
            }
            None => None,
        };
        images.push(ImageMetrics {
            name: format!("cam_{index:03}"),
            psnr: psnr(&image, &frame.image)?,
            mssim: mssim(&image, &frame.image)?,
            depth: depth_m,
        });
        views.push(EvaluatedView { index, image, depth });
    }
    Ok((EvalReport { images }, views))
}

//! Synthetic scenes, simulated sensors and the on-disk dataset format.
//!
//! A scene is a handful of analytic primitives (spheres, axis-aligned boxes,
//! a ground plane) with Lambert-shaded albedos. The reference raytracer is the
//! ground-truth oracle for camera images, dense depth maps and LiDAR returns.
//!
//! On disk a dataset is a directory holding `manifest.toml`, PNG images, PFM
//! depth maps (range along the pixel ray, `0` = no hit) and point clouds
//! (`u64` LE count, then `count` LE `f32` xyz triples in the sensor frame).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{camera_ray, compute_world_cube, CameraIntrinsics, Pose, Ray, WorldCube};
use crate::io_util::write_atomic_bytes;
use crate::raster::{ColorImage, DepthMap, PixelMask};

pub const MANIFEST_NAME: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;
const HIT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
    /// Infinite horizontal plane `y = height`.
    GroundPlane { height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    #[serde(default = "default_true")]
    pub lambert: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Direction towards the light (normalized on use).
    pub light_direction: [f64; 3],
    /// Fraction of the albedo visible on surfaces facing away from the light.
    pub ambient: f64,
}

/// Result of tracing one ray against the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceResult {
    pub color: [f64; 3],
    /// Range along the (unit) ray direction, `None` on a miss.
    pub depth: Option<f64>,
}

impl TraceResult {
    pub fn hit(&self) -> bool {
        self.depth.is_some()
    }
}

fn finite3(v: &[f64; 3]) -> bool {
    v.iter().all(|c| c.is_finite())
}

impl Shape {
    fn validate(&self) -> Result<()> {
        match self {
            Shape::Sphere { center, radius } => ensure!(
                finite3(center) && radius.is_finite() && *radius > 0.0,
                Validation,
                "sphere needs a finite center and positive radius"
            ),
            Shape::Box { min, max } => ensure!(
                finite3(min) && finite3(max) && (0..3).all(|i| min[i] < max[i]),
                Validation,
                "box needs finite corners with min < max"
            ),
            Shape::GroundPlane { height } => {
                ensure!(height.is_finite(), Validation, "ground plane height must be finite")
            }
        }
        Ok(())
    }

    /// Nearest positive intersection distance and outward normal.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(center);
                let oc = o - c;
                let b = oc.dot(d);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [-b - s, -b + s].into_iter().find(|&t| t > HIT_EPSILON)?;
                Some((t, (o + d * t - c) / radius))
            }
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis0 = 0;
                let mut axis1 = 0;
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (min[a] - o[a]) / d[a];
                    let tb = (max[a] - o[a]) / d[a];
                    let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                    if lo > t0 {
                        t0 = lo;
                        axis0 = a;
                    }
                    if hi < t1 {
                        t1 = hi;
                        axis1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis, entering) = if t0 > HIT_EPSILON {
                    (t0, axis0, true)
                } else if t1 > HIT_EPSILON {
                    (t1, axis1, false)
                } else {
                    return None;
                };
                let mut n = Vector3::zeros();
                // Entering faces oppose the direction; exiting faces follow it.
                n[axis] = if entering { -d[axis].signum() } else { d[axis].signum() };
                Some((t, n))
            }
            Shape::GroundPlane { height } => {
                if d.y == 0.0 {
                    return None;
                }
                let t = (height - o.y) / d.y;
                (t > HIT_EPSILON).then(|| {
                    let side = if o.y >= height { 1.0 } else { -1.0 };
                    (t, Vector3::new(0.0, side, 0.0))
                })
            }
        }
    }
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.primitives.is_empty(), Validation, "a scene needs at least one primitive");
        for p in &self.primitives {
            p.shape.validate()?;
            ensure!(
                p.albedo.iter().all(|c| (0.0..=1.0).contains(c)),
                Validation,
                "albedo {:?} outside [0, 1]",
                p.albedo
            );
        }
        ensure!(
            self.background.iter().all(|c| (0.0..=1.0).contains(c)),
            Validation,
            "background color outside [0, 1]"
        );
        ensure!(
            (0.0..=1.0).contains(&self.ambient),
            Validation,
            "ambient term must be in [0, 1]"
        );
        ensure!(
            Vector3::from(self.light_direction).norm() > 0.0 && finite3(&self.light_direction),
            Validation,
            "light direction must be a finite nonzero vector"
        );
        Ok(())
    }

    fn shade(&self, prim: &Primitive, normal: &Vector3<f64>) -> [f64; 3] {
        if !prim.lambert {
            return prim.albedo;
        }
        let l = Vector3::from(self.light_direction).normalize();
        let k = self.ambient + (1.0 - self.ambient) * normal.dot(&l).max(0.0);
        prim.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }
}

/// Analytic nearest intersection against all primitives. The ray direction
/// is normalized here, so `depth` is always a metric range.
pub fn raytrace_reference(scene: &SyntheticScene, ray: &Ray) -> TraceResult {
    let d = ray.direction.normalize();
    let nearest = scene
        .primitives
        .iter()
        .filter_map(|p| p.shape.intersect(&ray.origin, &d).map(|(t, n)| (t, n, p)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match nearest {
        Some((t, n, prim)) => TraceResult {
            color: scene.shade(prim, &n),
            depth: Some(t),
        },
        None => TraceResult {
            color: scene.background,
            depth: None,
        },
    }
}

/// Rotating multi-beam scanner. The sensor frame is x forward, y left, z up;
/// channels are spread evenly in elevation, steps evenly in azimuth over a
/// full turn starting at azimuth 0 (straight ahead).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub channels: usize,
    pub azimuth_steps: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.channels >= 1 && self.azimuth_steps >= 1,
            Validation,
            "LiDAR needs at least one channel and one azimuth step"
        );
        ensure!(
            self.elevation_min_deg <= self.elevation_max_deg && self.max_range > 0.0,
            Validation,
            "invalid LiDAR field of view or range"
        );
        Ok(())
    }

    fn elevation(&self, channel: usize) -> f64 {
        let f = if self.channels == 1 {
            0.0
        } else {
            channel as f64 / (self.channels - 1) as f64
        };
        (self.elevation_min_deg + f * (self.elevation_max_deg - self.elevation_min_deg)).to_radians()
    }
}

/// Simulates one sweep; returns hit points in the sensor frame, channel-major.
/// Misses and returns beyond `max_range` are omitted.
pub fn simulate_lidar(scene: &SyntheticScene, pose: &Pose, beams: &BeamConfig) -> Result<Vec<[f64; 3]>> {
    beams.validate()?;
    let mut points = Vec::new();
    for ch in 0..beams.channels {
        let el = beams.elevation(ch);
        for step in 0..beams.azimuth_steps {
            let az = std::f64::consts::TAU * step as f64 / beams.azimuth_steps as f64;
            let local = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let ray = Ray {
                origin: pose.translation,
                direction: pose.rotation * local,
                sensor: crate::geometry::Sensor::Lidar,
                gt_color: None,
                gt_depth: None,
            };
            if let Some(r) = raytrace_reference(scene, &ray).depth {
                if r <= beams.max_range {
                    let p = local * r;
                    points.push([p.x, p.y, p.z]);
                }
            }
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub split: Split,
    pub image: ColorImage,
    pub depth: Option<DepthMap>,
    /// Pixels whose ground-truth surface some LiDAR beam can reach.
    pub lidar_mask: Option<PixelMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub pose: Pose,
    /// Returns in the sensor frame.
    pub points: Vec<[f32; 3]>,
}

/// A loaded dataset in metric world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<CameraFrame>,
    pub scans: Vec<LidarScan>,
    pub world_cube: Option<WorldCube>,
}

impl SceneDataset {
    pub fn frames(&self, split: Split) -> impl Iterator<Item = &CameraFrame> {
        self.cameras.iter().filter(move |f| f.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.frames(Split::Train).next().is_some(),
            Config,
            "dataset has no training camera frame"
        );
        ensure!(!self.scans.is_empty(), Config, "dataset has no LiDAR scan");
        for f in &self.cameras {
            f.intrinsics.validate()?;
            ensure!(
                f.image.width == f.intrinsics.width && f.image.height == f.intrinsics.height,
                Validation,
                "image is {}x{} but intrinsics say {}x{}",
                f.image.width,
                f.image.height,
                f.intrinsics.width,
                f.intrinsics.height
            );
            if let Some(m) = &f.lidar_mask {
                ensure!(
                    m.width == f.intrinsics.width && m.height == f.intrinsics.height,
                    Validation,
                    "LiDAR mask is {}x{} but intrinsics say {}x{}",
                    m.width,
                    m.height,
                    f.intrinsics.width,
                    f.intrinsics.height
                );
            }
        }
        Ok(())
    }

    /// The stored world cube, or one computed from every camera frustum with
    /// the LiDAR origins as extra positions.
    pub fn world_cube(&self) -> Result<WorldCube> {
        if let Some(c) = self.world_cube {
            return Ok(c);
        }
        let poses: Vec<Pose> = self.cameras.iter().map(|f| f.pose).collect();
        let intr: Vec<CameraIntrinsics> = self.cameras.iter().map(|f| f.intrinsics).collect();
        let lidar: Vec<Pose> = self.scans.iter().map(|s| s.pose).collect();
        Ok(compute_world_cube(&poses, &intr, &lidar)?.with_margin(CUBE_MARGIN))
    }
}

/// Fraction of slack left around the tight region of interest.
pub const CUBE_MARGIN: f64 = 0.01;

/// Camera placement in a scene description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    pub split: Split,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

impl CameraSpec {
    pub fn pose(&self) -> Result<Pose> {
        Pose::look_at(self.eye.into(), self.target.into(), self.up.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    /// Sensor-to-world pose, 3×4 row-major.
    pub pose: [f64; 12],
    pub beams: BeamConfig,
}

/// Everything needed to generate a dataset: geometry plus sensor rigs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene: SyntheticScene,
    pub cameras: Vec<CameraSpec>,
    pub lidar: Vec<LidarSpec>,
}

pub const PRESETS: &[&str] = &["desk-kitti"];

/// Named scene presets.
pub fn preset(name: &str) -> Result<SceneSpec> {
    match name {
        "desk-kitti" => Ok(desk_kitti()),
        _ => Err(Error::Config(format!(
            "unknown scene preset '{name}' (available: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Street-like toy scene: y up, driving direction +z, ground at y = 0.
/// Two forward-stepped training cameras, three laterally offset
/// (stereo-like) test cameras plus one in between, and two 32-beam scans
/// taken from the training positions.
fn desk_kitti() -> SceneSpec {
    let prim = |shape, albedo| Primitive {
        shape,
        albedo,
        lambert: true,
    };
    let boxed = |min, max, albedo| prim(Shape::Box { min, max }, albedo);
    let scene = SyntheticScene {
        primitives: vec![
            prim(Shape::GroundPlane { height: 0.0 }, [0.45, 0.42, 0.38]),
            boxed([-3.5, 0.0, 5.0], [-1.5, 1.5, 7.0], [0.80, 0.25, 0.20]),
            boxed([2.0, 0.0, 9.0], [4.5, 2.5, 11.5], [0.20, 0.35, 0.80]),
            boxed([-6.0, 0.0, 16.0], [-1.0, 4.0, 19.0], [0.30, 0.70, 0.30]),
            prim(
                Shape::Sphere {
                    center: [0.8, 1.0, 6.5],
                    radius: 1.0,
                },
                [0.90, 0.80, 0.20],
            ),
            prim(
                Shape::Sphere {
                    center: [5.5, 2.0, 15.0],
                    radius: 2.0,
                },
                [0.60, 0.30, 0.70],
            ),
            // Backdrop so that every camera pixel has a surface within range.
            boxed([-20.0, 0.0, 22.0], [20.0, 14.0, 23.0], [0.60, 0.60, 0.55]),
        ],
        background: [0.55, 0.70, 0.90],
        light_direction: [0.3, 1.0, -0.5],
        ambient: 0.35,
    };
    let intrinsics = CameraIntrinsics {
        fx: 220.0,
        fy: 220.0,
        cx: 160.0,
        cy: 88.0,
        width: 320,
        height: 176,
        near: 0.5,
        far: 32.0,
    };
    let cam = |x: f64, z: f64, split| CameraSpec {
        eye: [x, 1.6, z],
        target: [x, 1.0, z + 10.0],
        up: default_up(),
        intrinsics,
        split,
    };
    // Image right is world -x, so a rightward stereo baseline is -x.
    let baseline = 0.54;
    let cameras = vec![
        cam(0.0, 0.0, Split::Train),
        cam(0.0, 0.5, Split::Train),
        cam(-baseline, 0.0, Split::Test),
        cam(-baseline, 0.25, Split::Test),
        cam(-baseline, 0.5, Split::Test),
        cam(0.0, 0.25, Split::Test),
    ];
    let beams = BeamConfig {
        channels: 32,
        azimuth_steps: 360,
        elevation_min_deg: -30.0,
        elevation_max_deg: 25.0,
        max_range: 80.0,
    };
    // Sensor x (forward) → world +z, y (left) → world +x, z (up) → world +y.
    let scan = |z: f64| LidarSpec {
        pose: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.73, 1.0, 0.0, 0.0, z],
        beams,
    };
    SceneSpec {
        scene,
        cameras,
        lidar: vec![scan(0.0), scan(0.5)],
    }
}

/// Color image and dense range map for one camera, one ray per pixel center.
pub fn render_reference_view(
    scene: &SyntheticScene,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<(ColorImage, DepthMap)> {
    intr.validate()?;
    let mut image = ColorImage::new(intr.width, intr.height);
    let mut depth = DepthMap::new(intr.width, intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = camera_ray(pose, intr, x as f64, y as f64)?;
            let hit = raytrace_reference(scene, &ray);
            image.set(x, y, hit.color);
            depth.set(x, y, hit.depth.map_or(DepthMap::NO_HIT, |d| d as f32));
        }
    }
    // Stored images are 8-bit; keep the in-memory copy identical to disk.
    Ok((ColorImage::from_rgb8(&image.to_rgb8()), depth))
}

/// Elevation slack (degrees) when testing whether a direction lies inside a
/// scanner's vertical field of view.
const FOV_SLACK_DEG: f64 = 0.5;

/// Whether `point` (on a scene surface) is the first hit of a ray from some
/// scanner's origin, inside that scanner's elevation range and max range.
/// Beam discretization in azimuth/elevation is ignored.
pub fn lidar_can_see(scene: &SyntheticScene, lidar: &[(Pose, BeamConfig)], point: &Vector3<f64>) -> bool {
    lidar.iter().any(|(pose, beams)| {
        let v = point - pose.translation;
        let range = v.norm();
        if range == 0.0 || range > beams.max_range {
            return false;
        }
        let dir = v / range;
        let elevation = (pose.rotation.transpose() * dir).z.clamp(-1.0, 1.0).asin().to_degrees();
        if elevation < beams.elevation_min_deg - FOV_SLACK_DEG || elevation > beams.elevation_max_deg + FOV_SLACK_DEG {
            return false;
        }
        let ray = Ray {
            origin: pose.translation,
            direction: dir,
            sensor: crate::geometry::Sensor::Lidar,
            gt_color: None,
            gt_depth: None,
        };
        raytrace_reference(scene, &ray)
            .depth
            .is_some_and(|hit| (hit - range).abs() <= 1e-3 * (1.0 + range))
    })
}

/// Per-pixel [`lidar_can_see`] for the surfaces seen by one camera. Pixels
/// whose ray misses the scene are unset.
pub fn lidar_visibility_mask(
    scene: &SyntheticScene,
    lidar: &[(Pose, BeamConfig)],
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<PixelMask> {
    intr.validate()?;
    let mut mask = PixelMask::new(intr.width, intr.height);
    for y in 0..intr.height {
        for x in 0..intr.width {
            let ray = camera_ray(pose, intr, x as f64, y as f64)?;
            if let Some(d) = raytrace_reference(scene, &ray).depth {
                mask.set(x, y, lidar_can_see(scene, lidar, &(ray.origin + ray.direction * d)));
            }
        }
    }
    Ok(mask)
}

/// Renders every camera and simulates every scan of `spec`.
pub fn generate_dataset(spec: &SceneSpec) -> Result<SceneDataset> {
    spec.scene.validate()?;
    let lidar = spec
        .lidar
        .iter()
        .map(|l| Ok((Pose::from_rows_3x4(&l.pose)?, l.beams)))
        .collect::<Result<Vec<_>>>()?;
    let mut cameras = Vec::with_capacity(spec.cameras.len());
    for c in &spec.cameras {
        let pose = c.pose()?;
        let (image, depth) = render_reference_view(&spec.scene, &pose, &c.intrinsics)?;
        let lidar_mask = lidar_visibility_mask(&spec.scene, &lidar, &pose, &c.intrinsics)?;
        cameras.push(CameraFrame {
            pose,
            intrinsics: c.intrinsics,
            split: c.split,
            image,
            depth: Some(depth),
            lidar_mask: Some(lidar_mask),
        });
    }
    let mut scans = Vec::with_capacity(spec.lidar.len());
    for l in &spec.lidar {
        let pose = Pose::from_rows_3x4(&l.pose)?;
        let points = simulate_lidar(&spec.scene, &pose, &l.beams)?
            .into_iter()
            .map(|p| p.map(|c| c as f32))
            .collect();
        scans.push(LidarScan { pose, points });
    }
    let mut ds = SceneDataset {
        cameras,
        scans,
        world_cube: None,
    };
    ds.validate()?;
    ds.world_cube = Some(ds.world_cube()?);
    Ok(ds)
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    world_cube: Option<WorldCube>,
    #[serde(default)]
    cameras: Vec<CameraEntry>,
    #[serde(default)]
    lidar: Vec<LidarEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    /// 8-bit grayscale PNG, nonzero where a LiDAR beam can reach the surface.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lidar_mask: Option<String>,
    split: Split,
    pose: [f64; 12],
    intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LidarEntry {
    points: String,
    pose: [f64; 12],
}

/// 1-based line number of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses TOML text into `T`, reporting the line of any error.
pub fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        Error::format(path, line, e.message().to_string())
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_png(path: &Path, image: &ColorImage) -> Result<()> {
    let mut bytes = Vec::new();
    image
        .to_rgb8()
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?;
    write_atomic_bytes(path, &bytes)
}

pub fn read_png(path: &Path) -> Result<ColorImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Image {
            path: path.into(),
            message: e.to_string(),
        }
    })?;
    Ok(ColorImage::from_rgb8(&img.to_rgb8()))
}

pub fn write_mask_png(path: &Path, mask: &PixelMask) -> Result<()> {
    let pixels = mask.data.iter().map(|&on| if on { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, pixels)
        .ok_or_else(|| Error::Contract("mask size does not match its data".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?;
    write_atomic_bytes(path, &bytes)
}

pub fn read_mask_png(path: &Path) -> Result<PixelMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            message: e.to_string(),
        })?
        .to_luma8();
    Ok(PixelMask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.pixels().map(|p| p.0[0] != 0).collect(),
    })
}

/// Single-channel little-endian PFM (scale `-1.0`, rows bottom to top).
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut bytes = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            bytes.extend_from_slice(&depth.get(x, y).to_le_bytes());
        }
    }
    write_atomic_bytes(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Three newline-terminated header lines.
    let mut fields = Vec::with_capacity(3);
    let mut pos = 0;
    for line in 1..=3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, line, "truncated PFM header"))?;
        let text = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::format(path, line, "PFM header is not text"))?;
        fields.push(text.trim().to_string());
        pos += end + 1;
    }
    if fields[0] != "Pf" {
        return Err(Error::format(path, 1, format!("expected 'Pf', found '{}'", fields[0])));
    }
    let dims: Vec<usize> = fields[1]
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, 2, "bad PFM dimensions"))?;
    if dims.len() != 2 {
        return Err(Error::format(path, 2, "expected 'width height'"));
    }
    let scale: f64 = fields[2]
        .parse()
        .map_err(|_| Error::format(path, 3, "bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(Error::format(path, 3, "only little-endian PFM (negative scale) is supported"));
    }
    let (w, h) = (dims[0], dims[1]);
    let body = &bytes[pos..];
    if body.len() != w * h * 4 {
        return Err(Error::format(
            path,
            4,
            format!("expected {} bytes of samples, found {}", w * h * 4, body.len()),
        ));
    }
    let mut depth = DepthMap::new(w, h);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let (x, row) = (i % w, i / w);
        depth.set(x, h - 1 - row, f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(depth)
}

pub fn write_point_cloud(path: &Path, points: &[[f32; 3]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + points.len() * 12);
    bytes.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for c in p {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    write_atomic_bytes(path, &bytes)
}

pub fn read_point_cloud(path: &Path) -> Result<Vec<[f32; 3]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(path, 0, "point cloud shorter than its 8-byte header"));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if Some(body.len()) != count.checked_mul(12) {
        return Err(Error::format(
            path,
            0,
            format!("header announces {count} points but body holds {} bytes", body.len()),
        ));
    }
    Ok(body
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[k..k + 4].try_into().unwrap());
            [f(0), f(4), f(8)]
        })
        .collect())
}

/// Writes `dataset` under `dir`; returns the manifest path.
pub fn write_dataset(dataset: &SceneDataset, dir: &Path) -> Result<PathBuf> {
    let mut manifest = ManifestFile {
        version: MANIFEST_VERSION,
        world_cube: dataset.world_cube,
        cameras: Vec::new(),
        lidar: Vec::new(),
    };
    for (i, f) in dataset.cameras.iter().enumerate() {
        let image = format!("images/cam_{i:03}.png");
        write_png(&dir.join(&image), &f.image)?;
        let depth = match &f.depth {
            Some(d) => {
                let rel = format!("depth/cam_{i:03}.pfm");
                write_pfm(&dir.join(&rel), d)?;
                Some(rel)
            }
            None => None,
        };
        let lidar_mask = match &f.lidar_mask {
            Some(m) => {
                let rel = format!("masks/cam_{i:03}.png");
                write_mask_png(&dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        manifest.cameras.push(CameraEntry {
            image,
            depth,
            lidar_mask,
            split: f.split,
            pose: f.pose.to_rows_3x4(),
            intrinsics: f.intrinsics,
        });
    }
    for (i, s) in dataset.scans.iter().enumerate() {
        let points = format!("lidar/scan_{i:03}.bin");
        write_point_cloud(&dir.join(&points), &s.points)?;
        manifest.lidar.push(LidarEntry {
            points,
            pose: s.pose.to_rows_3x4(),
        });
    }
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join(MANIFEST_NAME);
    write_atomic_bytes(&path, text.as_bytes())?;
    Ok(path)
}

/// Loads a dataset from its manifest file or the directory containing it.
pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = read_text(&manifest_path)?;
    let manifest: ManifestFile = parse_toml(&manifest_path, &text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            path: manifest_path,
            expected: MANIFEST_VERSION.to_string(),
            found: manifest.version.to_string(),
        });
    }
    let entry_line = |needle: &str| text.find(needle).map_or(0, |o| line_of(&text, o));
    let pose_of = |rows: &[f64; 12], what: &str| {
        Pose::from_rows_3x4(rows)
            .map_err(|e| Error::format(&manifest_path, entry_line(what), format!("bad pose for {what}: {e}")))
    };
    let mut cameras = Vec::with_capacity(manifest.cameras.len());
    for c in &manifest.cameras {
        let image = read_png(&root.join(&c.image))?;
        let depth = c.depth.as_ref().map(|d| read_pfm(&root.join(d))).transpose()?;
        let lidar_mask = c.lidar_mask.as_ref().map(|m| read_mask_png(&root.join(m))).transpose()?;
        c.intrinsics
            .validate()
            .map_err(|e| Error::format(&manifest_path, entry_line(&c.image), e.to_string()))?;
        cameras.push(CameraFrame {
            pose: pose_of(&c.pose, &c.image)?,
            intrinsics: c.intrinsics,
            split: c.split,
            image,
            depth,
            lidar_mask,
        });
    }
    let mut scans = Vec::with_capacity(manifest.lidar.len());
    for l in &manifest.lidar {
        scans.push(LidarScan {
            pose: pose_of(&l.pose, &l.points)?,
            points: read_point_cloud(&root.join(&l.points))?,
        });
    }
    Ok(SceneDataset {
        cameras,
        scans,
        world_cube: manifest.world_cube,
    })
}

/// Parses a scene description (TOML) for custom datasets.
pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = read_text(path)?;
    let spec: SceneSpec = parse_toml(path, &text)?;
    spec.scene.validate()?;
    Ok(spec)
}

pub fn write_scene_spec(path: &Path, spec: &SceneSpec) -> Result<()> {
    let text =
        toml::to_string_pretty(spec).map_err(|e| Error::Config(format!("cannot serialize scene: {e}")))?;
    write_atomic_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{lidar_ray, Sensor};

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray {
            origin: o.into(),
            direction: Vector3::from(d).normalize(),
            sensor: Sensor::Camera,
            gt_color: None,
            gt_depth: None,
        }
    }

    fn single(shape: Shape) -> SyntheticScene {
        SyntheticScene {
            primitives: vec![Primitive {
                shape,
                albedo: [0.5, 0.5, 0.5],
                lambert: false,
            }],
            background: [0.1, 0.2, 0.3],
            light_direction: [0.0, 1.0, 0.0],
            ambient: 0.2,
        }
    }

    #[test]
    fn sphere_hit_range() {
        let s = single(Shape::Sphere {
            center: [0.0, 0.0, 5.0],
            radius: 1.0,
        });
        let r = raytrace_reference(&s, &ray([0.0; 3], [0.0, 0.0, 1.0]));
        assert!((r.depth.unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(r.color, [0.5; 3]);
    }

    #[test]
    fn miss_returns_background() {
        let s = single(Shape::Sphere {
            center: [0.0, 0.0, 5.0],
            radius: 1.0,
        });
        let r = raytrace_reference(&s, &ray([0.0; 3], [0.0, 1.0, 0.0]));
        assert!(!r.hit());
        assert_eq!(r.color, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn ground_plane_hit() {
        let s = single(Shape::GroundPlane { height: 0.0 });
        let r = raytrace_reference(&s, &ray([0.0, 1.0, 0.0], [0.0, -1.0, 0.0]));
        assert!((r.depth.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_faces_and_inside() {
        let s = single(Shape::Box {
            min: [-1.0, -1.0, 4.0],
            max: [1.0, 1.0, 6.0],
        });
        let r = raytrace_reference(&s, &ray([0.0; 3], [0.0, 0.0, 1.0]));
        assert!((r.depth.unwrap() - 4.0).abs() < 1e-12);
        let inside = raytrace_reference(&s, &ray([0.0, 0.0, 5.0], [1.0, 0.0, 0.0]));
        assert!((inside.depth.unwrap() - 1.0).abs() < 1e-12);
        assert!(!raytrace_reference(&s, &ray([0.0, 3.0, 0.0], [0.0, 0.0, 1.0])).hit());
    }

    #[test]
    fn lambert_shading_follows_normal() {
        let mut s = single(Shape::GroundPlane { height: 0.0 });
        s.primitives[0].lambert = true;
        let lit = raytrace_reference(&s, &ray([0.0, 1.0, 0.0], [0.0, -1.0, 0.0]));
        assert!((lit.color[0] - 0.5).abs() < 1e-12);
        s.light_direction = [1.0, 0.0, 0.0];
        let grazing = raytrace_reference(&s, &ray([0.0, 1.0, 0.0], [0.0, -1.0, 0.0]));
        assert!((grazing.color[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn downward_beam_hits_ground() {
        let s = single(Shape::GroundPlane { height: 0.0 });
        let beams = BeamConfig {
            channels: 1,
            azimuth_steps: 1,
            elevation_min_deg: -90.0,
            elevation_max_deg: -90.0,
            max_range: 10.0,
        };
        let rig = Pose::from_rows_3x4(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.73, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let pts = simulate_lidar(&s, &rig, &beams).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0][2] + 1.73).abs() < 1e-9);
        assert!(pts[0][0].abs() < 1e-9 && pts[0][1].abs() < 1e-9);
    }

    #[test]
    fn lidar_visibility_respects_occlusion_fov_and_range() {
        let mut scene = single(Shape::GroundPlane { height: 0.0 });
        scene.primitives.push(Primitive {
            shape: Shape::Box {
                min: [-1.0, 0.0, 4.0],
                max: [1.0, 3.0, 6.0],
            },
            albedo: [0.5; 3],
            lambert: false,
        });
        let beams = BeamConfig {
            channels: 8,
            azimuth_steps: 8,
            elevation_min_deg: -60.0,
            elevation_max_deg: 10.0,
            max_range: 20.0,
        };
        // Sensor x forward = world +z, z up = world +y, 1.73 above the ground.
        let rig = Pose::from_rows_3x4(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.73, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let lidar = [(rig, beams)];
        let see = |p: [f64; 3]| lidar_can_see(&scene, &lidar, &Vector3::from(p));
        assert!(see([0.0, 0.0, 2.0]));
        assert!(see([0.0, 1.0, 4.0]), "front face of the box");
        assert!(!see([0.0, 0.0, 10.0]), "ground behind the box");
        assert!(see([5.0, 0.0, 10.0]), "ground beside the box");
        assert!(!see([0.0, 3.0, 5.0]), "box top is above the field of view");
        assert!(!see([0.0, 0.0, 30.0]), "beyond max range");
        assert!(!see([0.0, 0.0, 0.5]), "below the field of view");
    }

    #[test]
    fn mask_png_round_trip() {
        let mut m = PixelMask::new(3, 2);
        m.set(0, 0, true);
        m.set(2, 1, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        write_mask_png(&path, &m).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), m);
    }

    #[test]
    fn preset_contract() {
        let spec = preset("desk-kitti").unwrap();
        assert_eq!(spec.cameras.len(), 6);
        assert_eq!(spec.cameras.iter().filter(|c| c.split == Split::Train).count(), 2);
        assert_eq!(spec.lidar.len(), 2);
        assert!(preset("nope").is_err());
        for l in &spec.lidar {
            Pose::from_rows_3x4(&l.pose).unwrap();
        }
    }

    #[test]
    fn lidar_points_round_trip_through_rays() {
        let spec = preset("desk-kitti").unwrap();
        let pose = Pose::from_rows_3x4(&spec.lidar[0].pose).unwrap();
        let beams = BeamConfig {
            channels: 4,
            azimuth_steps: 24,
            ..spec.lidar[0].beams
        };
        let pts = simulate_lidar(&spec.scene, &pose, &beams).unwrap();
        assert!(!pts.is_empty() && pts.len() <= 4 * 24);
        assert_eq!(pts, simulate_lidar(&spec.scene, &pose, &beams).unwrap());
        for p in &pts {
            let r = lidar_ray(&pose, &Vector3::from(*p)).unwrap();
            let world = r.at(r.gt_depth.unwrap());
            let again = raytrace_reference(&spec.scene, &r);
            assert!((again.depth.unwrap() - r.gt_depth.unwrap()).abs() < 1e-5);
            assert!((world - pose.transform_point(&Vector3::from(*p))).norm() < 1e-9);
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = SyntheticScene {
            primitives: vec![],
            background: [0.2, 0.4, 0.6],
            light_direction: [0.0, 1.0, 0.0],
            ambient: 0.3,
        };
        assert!(scene.validate().is_err());
        let intr = CameraIntrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 4.0,
            cy: 3.0,
            width: 8,
            height: 6,
            near: 0.1,
            far: 10.0,
        };
        let (img, depth) = render_reference_view(&scene, &Pose::identity(), &intr).unwrap();
        let q = ColorImage::from_rgb8(&ColorImage::filled(1, 1, [0.2, 0.4, 0.6]).to_rgb8()).get(0, 0);
        assert!((0..6).all(|y| (0..8).all(|x| img.get(x, y) == q)));
        assert!(depth.data.iter().all(|&d| d == DepthMap::NO_HIT));
    }

    #[test]
    fn pixel_depth_equals_trace_of_camera_ray() {
        let spec = preset("desk-kitti").unwrap();
        let mut c = spec.cameras[0];
        c.intrinsics = CameraIntrinsics {
            width: 32,
            height: 18,
            fx: 22.0,
            fy: 22.0,
            cx: 16.0,
            cy: 9.0,
            ..c.intrinsics
        };
        let pose = c.pose().unwrap();
        let (_, depth) = render_reference_view(&spec.scene, &pose, &c.intrinsics).unwrap();
        let (_, again) = render_reference_view(&spec.scene, &pose, &c.intrinsics).unwrap();
        assert_eq!(depth, again);
        for (x, y) in [(0, 0), (5, 7), (16, 9), (31, 17)] {
            let r = camera_ray(&pose, &c.intrinsics, x as f64, y as f64).unwrap();
            let d = raytrace_reference(&spec.scene, &r).depth.unwrap();
            assert_eq!(depth.get(x, y), d as f32);
        }
    }

    fn tiny_dataset() -> SceneDataset {
        let mut spec = preset("desk-kitti").unwrap();
        for c in &mut spec.cameras {
            c.intrinsics = CameraIntrinsics {
                width: 16,
                height: 9,
                fx: 11.0,
                fy: 11.0,
                cx: 8.0,
                cy: 4.5,
                ..c.intrinsics
            };
        }
        for l in &mut spec.lidar {
            l.beams.channels = 3;
            l.beams.azimuth_steps = 12;
        }
        generate_dataset(&spec).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back, ds);
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_image_error_names_path() {
        let ds = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("images/cam_003.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("cam_003.png"), "{err}");
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_NAME);
        std::fs::write(&p, "version = 1\n\n[[cameras]]\nimage = 3\n").unwrap();
        match load_dataset(&p).unwrap_err() {
            Error::Format { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&p, "version = 7\n").unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::Version { .. }));
    }

    #[test]
    fn empty_point_cloud_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        std::fs::write(&p, 0u64.to_le_bytes()).unwrap();
        assert!(read_point_cloud(&p).unwrap().is_empty());
        std::fs::write(&p, 2u64.to_le_bytes()).unwrap();
        assert!(read_point_cloud(&p).is_err());
    }

    #[test]
    fn pfm_layout_is_bottom_to_top() {
        let mut d = DepthMap::new(2, 2);
        d.set(0, 0, 1.0);
        d.set(1, 0, 2.0);
        d.set(0, 1, 3.0);
        d.set(1, 1, 4.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &d).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &3.0f32.to_le_bytes());
        assert_eq!(read_pfm(&p).unwrap(), d);
    }

    #[test]
    fn scene_spec_toml_round_trip() {
        let spec = preset("desk-kitti").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.toml");
        write_scene_spec(&p, &spec).unwrap();
        assert_eq!(load_scene_spec(&p).unwrap(), spec);
    }
}

//! Sensor poses, world-cube normalization and ray generation.
//!
//! Camera poses are camera-to-world transforms in the computer-vision
//! convention: local `+x` right, `+y` down, `+z` along the optical axis.
//! Poses authored in the OpenGL convention (camera looking down local `-z`,
//! `+y` up) are converted with [`Pose::from_opengl`], which flips the local
//! `y` and `z` axes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::raster::ColorImage;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Rigid sensor-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()),
            Validation,
            "pose contains non-finite entries"
        );
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        ensure!(
            off <= ORTHONORMAL_TOL,
            Validation,
            "rotation is not orthonormal (max |RᵀR - I| = {off:e})"
        );
        let det = self.rotation.determinant();
        ensure!(
            (det - 1.0).abs() <= ORTHONORMAL_TOL,
            Validation,
            "rotation determinant is {det}, expected +1"
        );
        Ok(())
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn from_rows_3x4(m: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }

    pub fn to_rows_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// Convert an OpenGL-convention camera pose to the local convention used here.
    pub fn from_opengl(gl: &Pose) -> Pose {
        Pose {
            rotation: gl.rotation * axis_flip(),
            translation: gl.translation,
        }
    }

    pub fn to_opengl(&self) -> Pose {
        Pose {
            rotation: self.rotation * axis_flip(),
            translation: self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera-to-world pose located at `eye`, looking at `target`, with `up`
    /// giving the approximate world up direction (image rows run against it).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Validation("look_at target coincides with eye".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Validation("look_at up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        Self::new(Matrix3::from_columns(&[right, down, forward]), eye)
    }
}

fn axis_flip() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

/// Pinhole intrinsics plus the user-chosen ray bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fx > 0.0 && self.fy > 0.0,
            Validation,
            "focal lengths must be positive (fx={}, fy={})",
            self.fx,
            self.fy
        );
        ensure!(
            self.width >= 1 && self.height >= 1,
            Validation,
            "image size must be at least 1x1"
        );
        ensure!(
            self.near > 0.0 && self.near < self.far && self.far.is_finite(),
            Validation,
            "degenerate ray bounds: near={} far={}",
            self.near,
            self.far
        );
        Ok(())
    }

    /// Same camera with its ray bounds multiplied by `scale`.
    pub fn scaled_bounds(&self, scale: f64) -> Self {
        Self {
            near: self.near * scale,
            far: self.far * scale,
            ..*self
        }
    }

    fn local_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Shift-and-scale that maps metric coordinates into the `[-1, 1]³` world cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldCube {
    pub translation_offset: [f64; 3],
    pub scale_factor: f64,
}

impl WorldCube {
    pub fn identity() -> Self {
        Self {
            translation_offset: [0.0; 3],
            scale_factor: 1.0,
        }
    }

    fn offset(&self) -> Vector3<f64> {
        Vector3::from(self.translation_offset)
    }

    /// Shrink the cube mapping so the tight region occupies `1 - margin` of it.
    pub fn with_margin(&self, margin: f64) -> Self {
        Self {
            scale_factor: self.scale_factor * (1.0 - margin),
            ..*self
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.offset()) * self.scale_factor
    }

    pub fn invert_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p / self.scale_factor + self.offset()
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: pose.rotation,
            translation: self.apply_point(&pose.translation),
        }
    }

    pub fn invert_pose(&self, pose: &Pose) -> Pose {
        Pose {
            rotation: pose.rotation,
            translation: self.invert_point(&pose.translation),
        }
    }

    pub fn contains(p: &Vector3<f64>) -> bool {
        p.iter().all(|c| c.abs() <= 1.0)
    }
}

/// The 8 corners of a camera's view frustum: the four image-corner rays cut
/// by the planes at depth `near` and `far` along the optical axis. Together
/// with the camera center they bound every ray point with `t <= far`.
pub fn frustum_corners(pose: &Pose, intr: &CameraIntrinsics) -> [Vector3<f64>; 8] {
    let w = intr.width as f64;
    let h = intr.height as f64;
    let mut out = [Vector3::zeros(); 8];
    let mut k = 0;
    for &t in &[intr.near, intr.far] {
        for &(u, v) in &[(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            out[k] = pose.translation + pose.rotation * intr.local_direction(u, v) * t;
            k += 1;
        }
    }
    out
}

/// Computes the world cube enclosing every pose and the view frustum of each
/// camera pose. `intrinsics` pairs with `poses` one-to-one (or holds a single
/// shared record). `extra_poses` are additional sensor positions (e.g. LiDAR)
/// included in the offset average and the bound, without a frustum. LiDAR
/// point clouds never take part.
pub fn compute_world_cube(
    poses: &[Pose],
    intrinsics: &[CameraIntrinsics],
    extra_poses: &[Pose],
) -> Result<WorldCube> {
    ensure!(!poses.is_empty(), Validation, "at least one camera pose is required");
    ensure!(
        intrinsics.len() == poses.len() || intrinsics.len() == 1,
        Validation,
        "got {} intrinsics records for {} poses",
        intrinsics.len(),
        poses.len()
    );
    for intr in intrinsics {
        intr.validate()?;
    }

    let all_positions: Vec<Vector3<f64>> = poses
        .iter()
        .chain(extra_poses)
        .map(|p| p.translation)
        .collect();
    let offset = all_positions.iter().sum::<Vector3<f64>>() / all_positions.len() as f64;

    let mut extent: f64 = 0.0;
    let mut grow = |p: &Vector3<f64>| {
        extent = extent.max((p - offset).abs().max());
    };
    all_positions.iter().for_each(&mut grow);
    for (i, pose) in poses.iter().enumerate() {
        let intr = &intrinsics[if intrinsics.len() == 1 { 0 } else { i }];
        frustum_corners(pose, intr).iter().for_each(&mut grow);
    }
    ensure!(
        extent > 0.0 && extent.is_finite(),
        Validation,
        "degenerate region of interest (extent {extent})"
    );
    Ok(WorldCube {
        translation_offset: offset.into(),
        scale_factor: 1.0 / extent,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensor {
    Camera,
    Lidar,
}

/// A ray `o + t·d` with optional supervision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub sensor: Sensor,
    pub gt_color: Option<[f64; 3]>,
    pub gt_depth: Option<f64>,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    pub fn with_color(mut self, rgb: [f64; 3]) -> Self {
        self.gt_color = Some(rgb);
        self
    }
}

/// Ray through the (possibly fractional) pixel `(u, v)`.
pub fn camera_ray(pose: &Pose, intr: &CameraIntrinsics, u: f64, v: f64) -> Result<Ray> {
    ensure!(
        u >= 0.0 && u < intr.width as f64 && v >= 0.0 && v < intr.height as f64,
        Validation,
        "pixel ({u}, {v}) outside {}x{} image",
        intr.width,
        intr.height
    );
    let direction = (pose.rotation * intr.local_direction(u, v)).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction,
        sensor: Sensor::Camera,
        gt_color: None,
        gt_depth: None,
    })
}

/// Ray from the LiDAR origin through a return measured in the sensor frame.
pub fn lidar_ray(pose: &Pose, point_local: &Vector3<f64>) -> Result<Ray> {
    let origin = pose.translation;
    let end = pose.transform_point(point_local);
    let offset = end - origin;
    let range = offset.norm();
    ensure!(
        range > 0.0 && range.is_finite(),
        Validation,
        "LiDAR return at the sensor origin"
    );
    Ok(Ray {
        origin,
        direction: offset / range,
        sensor: Sensor::Lidar,
        gt_color: None,
        gt_depth: Some(range),
    })
}

/// Ground-truth color at a fractional pixel by bilinear interpolation.
pub fn sample_subpixel_gt(image: &ColorImage, u: f64, v: f64) -> Result<[f64; 3]> {
    image.sample_bilinear(u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn symmetric_intr(far: f64) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            near: 0.1,
            far,
        }
    }

    fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    #[test]
    fn single_camera_cube_matches_enumeration() {
        // fx = cx = cy, so the far corners sit at (±4, ±4, 4).
        let intr = symmetric_intr(4.0);
        let wc = compute_world_cube(&[Pose::identity()], &[intr], &[]).unwrap();
        assert_eq!(wc.translation_offset, [0.0; 3]);
        assert_relative_eq!(wc.scale_factor, 0.25, epsilon = 1e-12);
        for c in frustum_corners(&Pose::identity(), &intr).iter().skip(4) {
            let q = wc.apply_point(c);
            assert_relative_eq!(q.abs().max(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_poses_have_zero_offset() {
        let intr = symmetric_intr(3.0);
        let a = Pose::from_translation(Vector3::new(1.0, -2.0, 0.5));
        let b = Pose::from_translation(Vector3::new(-1.0, 2.0, -0.5));
        let wc = compute_world_cube(&[a, b], &[intr], &[]).unwrap();
        for c in wc.translation_offset {
            assert!(c.abs() < 1e-15);
        }
    }

    #[test]
    fn tight_scaling_touches_the_boundary() {
        let intr = symmetric_intr(7.0);
        let poses = [
            Pose::new(rot(Vector3::y(), 0.3), Vector3::new(0.5, 0.1, 0.0)).unwrap(),
            Pose::new(rot(Vector3::x(), -0.2), Vector3::new(-0.4, 0.0, 1.0)).unwrap(),
        ];
        let lidar = [Pose::from_translation(Vector3::new(0.0, 0.2, 0.3))];
        let wc = compute_world_cube(&poses, &[intr], &lidar).unwrap();
        let mut max = 0.0f64;
        for p in &poses {
            for c in frustum_corners(p, &intr) {
                max = max.max(wc.apply_point(&c).abs().max());
            }
            max = max.max(wc.apply_point(&p.translation).abs().max());
        }
        assert!(max <= 1.0 + 1e-12);
        assert_relative_eq!(max, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_bounds_are_rejected() {
        let mut intr = symmetric_intr(3.0);
        intr.near = 5.0;
        assert!(matches!(
            compute_world_cube(&[Pose::identity()], &[intr], &[]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let intr = symmetric_intr(3.0);
        let r = camera_ray(&Pose::identity(), &intr, intr.cx, intr.cy).unwrap();
        assert_relative_eq!(r.direction, Vector3::z(), epsilon = 1e-15);
    }

    #[test]
    fn off_axis_pixel_direction() {
        let intr = CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 200,
            height: 100,
            near: 0.1,
            far: 1.0,
        };
        let r = camera_ray(&Pose::identity(), &intr, 150.0, 50.0).unwrap();
        let expected = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert_relative_eq!(r.direction, expected, epsilon = 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let intr = symmetric_intr(3.0);
        assert!(camera_ray(&Pose::identity(), &intr, 100.0, 0.0).is_err());
        assert!(camera_ray(&Pose::identity(), &intr, -0.5, 0.0).is_err());
    }

    #[test]
    fn lidar_rays() {
        let r = lidar_ray(&Pose::identity(), &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(r.origin, Vector3::zeros());
        assert_relative_eq!(r.direction, Vector3::z());
        assert_relative_eq!(r.gt_depth.unwrap(), 5.0);

        let shifted = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let r = lidar_ray(&shifted, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(r.origin, Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(r.direction, Vector3::z());
        assert_relative_eq!(r.gt_depth.unwrap(), 5.0);

        assert!(lidar_ray(&Pose::identity(), &Vector3::zeros()).is_err());
    }

    #[test]
    fn lidar_depth_scales_with_cube() {
        let wc = WorldCube {
            translation_offset: [3.0, -1.0, 2.0],
            scale_factor: 0.125,
        };
        let pose = Pose::new(rot(Vector3::z(), 0.7), Vector3::new(4.0, 1.0, 0.0)).unwrap();
        let p = Vector3::new(2.0, 6.0, -3.0);
        let cube_pose = wc.apply_pose(&pose);
        let r = lidar_ray(&cube_pose, &(p * wc.scale_factor)).unwrap();
        assert_relative_eq!(r.gt_depth.unwrap(), p.norm() * 0.125, epsilon = 1e-12);
        // The cube-space ray endpoint maps back to the metric world point.
        let world_end = wc.invert_point(&r.at(r.gt_depth.unwrap()));
        assert_relative_eq!(world_end, pose.transform_point(&p), epsilon = 1e-12);
    }

    #[test]
    fn opengl_conversion_flips_view_axis() {
        let gl = Pose::identity();
        let cv = Pose::from_opengl(&gl);
        // OpenGL cameras look down -z.
        assert_relative_eq!(cv.rotation * Vector3::z(), -Vector3::z());
        assert_relative_eq!(cv.to_opengl().rotation, gl.rotation);
        cv.validate().unwrap();
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.1));
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
    }

    proptest! {
        #[test]
        fn world_cube_round_trip(
            ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in 0.1..1.0f64, ang in -3.0..3.0f64,
            tx in -50.0..50.0f64, ty in -50.0..50.0f64, tz in -50.0..50.0f64,
            ox in -10.0..10.0f64, s in 0.01..2.0f64,
        ) {
            let pose = Pose::new(rot(Vector3::new(ax, ay, az), ang), Vector3::new(tx, ty, tz)).unwrap();
            let wc = WorldCube { translation_offset: [ox, -ox, 2.0 * ox], scale_factor: s };
            let back = wc.invert_pose(&wc.apply_pose(&pose));
            prop_assert!((back.translation - pose.translation).abs().max() < 1e-6);
            prop_assert!((back.rotation - pose.rotation).abs().max() < 1e-6);
        }

        #[test]
        fn camera_rays_are_unit_and_inside_frustum(
            u in 0.0..100.0f64, v in 0.0..100.0f64, ang in -3.0..3.0f64,
        ) {
            let intr = symmetric_intr(6.0);
            let pose = Pose::new(rot(Vector3::new(0.3, 1.0, -0.2), ang), Vector3::new(0.2, 0.1, -0.3)).unwrap();
            let wc = compute_world_cube(&[pose], &[intr], &[]).unwrap();
            let r = camera_ray(&pose, &intr, u, v).unwrap();
            prop_assert!((r.direction.norm() - 1.0).abs() < 1e-6);
            for t in [intr.near, intr.far] {
                prop_assert!(wc.apply_point(&r.at(t)).abs().max() <= 1.0 + 1e-9);
            }
        }
    }
}

//! Differentiable occupancy grid map.
//!
//! The grid stores one log-odds value per cell. Instead of the classical
//! per-cell update `l ← l + S(k, z) - l₀`, the cells are treated as
//! parameters: every sample `β` along a LiDAR ray contributes the gradient
//!
//! ```text
//! g(β, z) =  l_free            if β < z - δ       (free space)
//!           -l_occ             if z - δ < β < z + δ (occupied band)
//!            0                 otherwise
//! ```
//!
//! to the interpolated log-odds at `β`, which trilinear interpolation scatters
//! back onto the 8 surrounding cells. A plain gradient step `γ ← γ - α ∇`
//! then realizes the inverse sensor model.
//!
//! The same grid drives ray sampling: half the samples are stratified, the
//! other half are drawn by inverse-CDF sampling from the rescaled occupancy
//! `max(0, 2p - 1)` seen by the stratified half.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::field::sigmoid;
use crate::geometry::Ray;
use crate::render::{stratified_uniform, RaySampler};

/// Below this total rescaled weight the importance half falls back to
/// stratified sampling.
pub const FALLBACK_WEIGHT: f64 = 1e-6;

pub const EXPORT_MAGIC: &[u8; 4] = b"OGM1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OgmConfig {
    pub resolution: usize,
    pub prior_logodds: f64,
    pub l_free: f64,
    pub l_occ: f64,
    /// Half-width of the occupied band around the return, in world-cube
    /// units. `None` means two grid cells.
    pub band_half_width: Option<f64>,
    pub learning_rate: f64,
    pub logodds_limit: f64,
}

impl Default for OgmConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            prior_logodds: 0.0,
            l_free: 1.0,
            l_occ: 4.0,
            band_half_width: None,
            learning_rate: 0.05,
            logodds_limit: 15.0,
        }
    }
}

impl OgmConfig {
    pub fn cell_size(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn band(&self) -> f64 {
        self.band_half_width.unwrap_or(2.0 * self.cell_size())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.resolution >= 2, Config, "occupancy grid resolution must be >= 2");
        ensure!(
            self.l_free >= 0.0 && self.l_occ >= 0.0,
            Config,
            "l_free and l_occ must be non-negative"
        );
        ensure!(self.band() > 0.0, Config, "band half-width must be positive");
        ensure!(self.learning_rate > 0.0, Config, "learning rate must be positive");
        ensure!(
            self.logodds_limit > self.prior_logodds.abs(),
            Config,
            "log-odds limit must exceed |prior|"
        );
        Ok(())
    }
}

/// `g(β, z)`: the gradient of the (implicit) map objective with respect to
/// the log-odds interpolated at sample distance `beta`, for a return at `z`.
/// The step function is 1 only for strictly positive arguments.
pub fn ogm_gradient(beta: f64, z: f64, cfg: &OgmConfig) -> f64 {
    let step = |s: f64| if s > 0.0 { 1.0 } else { 0.0 };
    let band = cfg.band();
    cfg.l_free * step((z - band) - beta)
        - cfg.l_occ * step(beta - (z - band)) * step((z + band) - beta)
}

/// Occupancy probability of a log-odds value.
pub fn occupancy_prob(l: f64) -> f64 {
    sigmoid(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub config: OgmConfig,
    /// Log-odds per cell, x fastest.
    pub logodds: Vec<f64>,
    /// Gradient accumulated since the last [`step`](Self::step).
    pub buffer: Vec<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellWeight {
    pub index: usize,
    pub weight: f64,
}

impl OccupancyGrid {
    pub fn new(config: OgmConfig) -> Result<Self> {
        config.validate()?;
        let n = config.resolution.pow(3);
        Ok(Self {
            config,
            logodds: vec![config.prior_logodds; n],
            buffer: vec![0.0; n],
            steps: 0,
        })
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.config.resolution;
        i + n * (j + n * k)
    }

    /// Center of cell `(i, j, k)` in world-cube coordinates.
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let h = self.config.cell_size();
        [i, j, k].map(|c| -1.0 + (c as f64 + 0.5) * h)
    }

    /// The 8 cells whose centers surround `x`, with trilinear weights. The
    /// flag reports whether `x` lay outside the cube and was clamped.
    pub fn corners(&self, x: &[f64; 3]) -> ([CellWeight; 8], bool) {
        let n = self.config.resolution;
        let mut clamped = false;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if !(-1.0..=1.0).contains(&x[a]) {
                clamped = true;
            }
            let c = ((x[a] + 1.0) * 0.5 * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let c = if c.is_nan() { 0.0 } else { c };
            let i = (c.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = c - i as f64;
        }
        let mut out = [CellWeight {
            index: 0,
            weight: 0.0,
        }; 8];
        for (corner, slot) in out.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                if (corner >> a) & 1 == 1 {
                    ijk[a] = base[a] + 1;
                    w *= frac[a];
                } else {
                    ijk[a] = base[a];
                    w *= 1.0 - frac[a];
                }
            }
            *slot = CellWeight {
                index: self.index(ijk[0], ijk[1], ijk[2]),
                weight: w,
            };
        }
        (out, clamped)
    }

    /// Trilinearly interpolated log-odds at `x`.
    pub fn interp_logodds(&self, x: &[f64; 3]) -> f64 {
        let (cells, _) = self.corners(x);
        cells.iter().map(|c| c.weight * self.logodds[c.index]).sum()
    }

    /// Scatters `grad` (with respect to the interpolated value at `x`) onto
    /// the accumulation buffer.
    pub fn interp_backward(&mut self, x: &[f64; 3], grad: f64) {
        let (cells, _) = self.corners(x);
        for c in cells {
            self.buffer[c.index] += c.weight * grad;
        }
    }

    pub fn occupancy_at(&self, x: &[f64; 3]) -> f64 {
        occupancy_prob(self.interp_logodds(x))
    }

    /// Accumulates the sensor-model gradient for every sample of one ray.
    pub fn accumulate_ray(&mut self, ray: &Ray, t: &[f64]) -> Result<()> {
        let z = ray
            .gt_depth
            .ok_or_else(|| Error::Contract("occupancy update needs a ray with gt_depth".into()))?;
        for &beta in t {
            let g = ogm_gradient(beta, z, &self.config);
            if g != 0.0 {
                let p = ray.at(beta);
                self.interp_backward(&[p.x, p.y, p.z], g);
            }
        }
        Ok(())
    }

    /// Accumulates a batch; `samples[i]` holds the distances used for `rays[i]`.
    pub fn accumulate(&mut self, rays: &[Ray], samples: &[Vec<f64>]) -> Result<()> {
        ensure!(
            rays.len() == samples.len(),
            Contract,
            "{} rays but {} sample lists",
            rays.len(),
            samples.len()
        );
        if let Some(i) = rays.iter().position(|r| r.gt_depth.is_none()) {
            return Err(Error::Contract(format!("ray {i} has no gt_depth")));
        }
        for (ray, t) in rays.iter().zip(samples) {
            self.accumulate_ray(ray, t)?;
        }
        Ok(())
    }

    pub fn has_pending(&self) -> bool {
        self.buffer.iter().any(|&g| g != 0.0)
    }

    /// `γ ← clamp(γ - α·buffer)`, then clears the buffer.
    pub fn step(&mut self) {
        let alpha = self.config.learning_rate;
        let lim = self.config.logodds_limit;
        for (l, g) in self.logodds.iter_mut().zip(self.buffer.iter_mut()) {
            if *g != 0.0 {
                *l = (*l - alpha * *g).clamp(-lim, lim);
                *g = 0.0;
            }
        }
        self.steps += 1;
    }

    /// Both halves of the occupancy-guided sample set, each ascending:
    /// the stratified half and the importance half.
    pub fn sample_ray_parts<R: Rng + ?Sized>(
        &self,
        ray: &Ray,
        near: f64,
        far: f64,
        count: usize,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure!(
            near < far && near.is_finite() && far.is_finite(),
            Validation,
            "degenerate ray bounds near={near} far={far}"
        );
        ensure!(
            count >= 2 && count % 2 == 0,
            Validation,
            "sample count must be even and >= 2, got {count}"
        );
        let half = count / 2;
        let uniform = stratified_uniform(near, far, half, rng);
        let weights: Vec<f64> = uniform
            .iter()
            .map(|&t| {
                let p = ray.at(t);
                (2.0 * self.occupancy_at(&[p.x, p.y, p.z]) - 1.0).max(0.0)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut extra = if total < FALLBACK_WEIGHT {
            stratified_uniform(near, far, half, rng)
        } else {
            let step = (far - near) / half as f64;
            let edges: Vec<f64> = (0..=half).map(|j| near + j as f64 * step).collect();
            sample_piecewise_constant(&edges, &weights, half, rng)
        };
        extra.sort_by(f64::total_cmp);
        Ok((uniform, extra))
    }

    /// Occupancy-guided samples: `count / 2` stratified plus `count / 2`
    /// importance samples, merged and sorted.
    pub fn sample_ray<R: Rng + ?Sized>(
        &self,
        ray: &Ray,
        near: f64,
        far: f64,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let (mut t, extra) = self.sample_ray_parts(ray, near, far, count, rng)?;
        t.extend(extra);
        t.sort_by(f64::total_cmp);
        Ok(t)
    }

    /// Writes the map as the `OGM1` export: magic, three little-endian u32
    /// dimensions, then `N³` little-endian f32 log-odds, x fastest.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 4 * self.logodds.len());
        bytes.extend_from_slice(EXPORT_MAGIC);
        for _ in 0..3 {
            bytes.extend_from_slice(&(self.config.resolution as u32).to_le_bytes());
        }
        for &l in &self.logodds {
            bytes.extend_from_slice(&(l as f32).to_le_bytes());
        }
        crate::io_util::write_atomic(path, |f| f.write_all(&bytes))
    }

    /// Reads an `OGM1` export back as `(dims, values)`.
    pub fn read_export(path: &Path) -> Result<([u32; 3], Vec<f32>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != EXPORT_MAGIC {
            return Err(Error::Version {
                path: path.into(),
                expected: "OGM1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let dims = [dim(0), dim(1), dim(2)];
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        if bytes.len() != 16 + 4 * n {
            return Err(Error::format(path, 0, format!("expected {n} values")));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, values))
    }
}

impl RaySampler for OccupancyGrid {
    fn sample_ray(
        &self,
        ray: &Ray,
        near: f64,
        far: f64,
        count: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<f64>> {
        OccupancyGrid::sample_ray(self, ray, near, far, count, rng)
    }
}

/// Inverse-CDF sampling of a piecewise-constant density with bins
/// `[edges[j], edges[j+1])` and unnormalized mass `weights[j]` per unit length.
pub fn sample_piecewise_constant<R: Rng + ?Sized>(
    edges: &[f64],
    weights: &[f64],
    count: usize,
    rng: &mut R,
) -> Vec<f64> {
    debug_assert_eq!(edges.len(), weights.len() + 1);
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for (j, w) in weights.iter().enumerate() {
        acc += w * (edges[j + 1] - edges[j]);
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            // first bin whose upper cdf exceeds u
            let j = cdf[1..].partition_point(|&c| c <= u).min(weights.len() - 1);
            let mass = cdf[j + 1] - cdf[j];
            let frac = if mass > 0.0 { (u - cdf[j]) / mass } else { 0.5 };
            edges[j] + frac.clamp(0.0, 1.0) * (edges[j + 1] - edges[j])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Sensor;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize) -> OgmConfig {
        OgmConfig {
            resolution: n,
            ..OgmConfig::default()
        }
    }

    fn ray(o: [f64; 3], d: [f64; 3], depth: Option<f64>) -> Ray {
        Ray {
            origin: Vector3::from(o),
            direction: Vector3::from(d).normalize(),
            sensor: Sensor::Lidar,
            gt_color: None,
            gt_depth: depth,
        }
    }

    #[test]
    fn cell_center_returns_cell_value() {
        let mut g = OccupancyGrid::new(cfg(8)).unwrap();
        let idx = g.index(3, 5, 2);
        g.logodds[idx] = 2.5;
        assert!((g.interp_logodds(&g.cell_center(3, 5, 2)) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn midpoint_of_eight_cells_is_their_mean() {
        let mut g = OccupancyGrid::new(cfg(8)).unwrap();
        let idx = g.index(4, 4, 4);
        g.logodds[idx] = 8.0;
        let a = g.cell_center(3, 3, 3);
        let b = g.cell_center(4, 4, 4);
        let mid = [0, 1, 2].map(|k| 0.5 * (a[k] + b[k]));
        assert!((g.interp_logodds(&mid) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_field_is_reproduced_exactly() {
        let n = 16;
        let mut g = OccupancyGrid::new(cfg(n)).unwrap();
        let field = |p: [f64; 3]| 2.0 * p[0] + 3.0 * p[1] - p[2];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let idx = g.index(i, j, k);
                    g.logodds[idx] = field(g.cell_center(i, j, k));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Exact between the outermost cell centers.
        let lim = 1.0 - g.config.cell_size() / 2.0;
        for _ in 0..100 {
            let p = [0; 3].map(|_| rng.random_range(-lim..lim));
            assert!((g.interp_logodds(&p) - field(p)).abs() < 1e-6);
        }
    }

    #[test]
    fn outside_points_clamp_to_boundary() {
        let mut g = OccupancyGrid::new(cfg(4)).unwrap();
        let idx = g.index(3, 0, 0);
        g.logodds[idx] = 1.0;
        let (_, clamped) = g.corners(&[1.7, -1.5, -3.0]);
        assert!(clamped);
        assert!((g.interp_logodds(&[1.7, -1.5, -3.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probability_values() {
        assert_eq!(occupancy_prob(0.0), 0.5);
        assert!((occupancy_prob(3f64.ln()) - 0.75).abs() < 1e-15);
        for l in [-7.0, -0.3, 0.0, 1.2, 11.0] {
            assert!((occupancy_prob(l) + occupancy_prob(-l) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sensor_model_gradient() {
        let c = OgmConfig {
            band_half_width: Some(0.05),
            ..OgmConfig::default()
        };
        assert_eq!(ogm_gradient(0.30, 0.5, &c), c.l_free);
        assert_eq!(ogm_gradient(0.52, 0.5, &c), -c.l_occ);
        assert_eq!(ogm_gradient(0.60, 0.5, &c), 0.0);
        // exactly at z - δ both step functions vanish
        let edge = 0.5 - 0.05;
        assert_eq!(ogm_gradient(edge, 0.5, &c), 0.0);
    }

    #[test]
    fn empty_batch_leaves_buffer_alone() {
        let mut g = OccupancyGrid::new(cfg(8)).unwrap();
        g.accumulate(&[], &[]).unwrap();
        assert!(!g.has_pending());
    }

    #[test]
    fn sample_at_cell_center_lands_on_one_cell() {
        let mut g = OccupancyGrid::new(cfg(8)).unwrap();
        let c = g.cell_center(2, 4, 4);
        let r = ray([-1.0, c[1], c[2]], [1.0, 0.0, 0.0], Some(1.5));
        let beta = c[0] + 1.0;
        g.accumulate_ray(&r, &[beta]).unwrap();
        let idx = g.index(2, 4, 4);
        assert!((g.buffer[idx] - g.config.l_free).abs() < 1e-12);
        let others: f64 = g.buffer.iter().map(|v| v.abs()).sum::<f64>() - g.buffer[idx].abs();
        assert!(others < 1e-12);
    }

    #[test]
    fn gradient_signs_along_a_ray() {
        let mut g = OccupancyGrid::new(cfg(16)).unwrap();
        let h = g.config.cell_size();
        let y = g.cell_center(0, 7, 7)[1];
        let r = ray([-1.0, y, y], [1.0, 0.0, 0.0], Some(1.0));
        let t: Vec<f64> = (0..16).map(|i| (i as f64 + 0.5) * h).collect();
        g.accumulate_ray(&r, &t).unwrap();
        let band = g.config.band();
        for (i, &beta) in t.iter().enumerate() {
            let v = g.buffer[g.index(i, 7, 7)];
            let expected = ogm_gradient(beta, 1.0, &g.config);
            assert_eq!(v.signum(), expected.signum(), "cell {i}, beta {beta}");
            if beta < 1.0 - band {
                assert!(v > 0.0);
            } else if beta < 1.0 + band {
                assert!(v < 0.0);
            }
        }
    }

    #[test]
    fn missing_depth_is_a_contract_error() {
        let mut g = OccupancyGrid::new(cfg(8)).unwrap();
        let r = ray([0.0; 3], [1.0, 0.0, 0.0], None);
        assert!(matches!(g.accumulate(&[r], &[vec![0.2]]), Err(Error::Contract(_))));
    }

    #[test]
    fn one_step_by_hand() {
        let mut g = OccupancyGrid::new(OgmConfig {
            learning_rate: 0.1,
            l_free: 1.0,
            ..cfg(8)
        })
        .unwrap();
        let c = g.cell_center(1, 1, 1);
        let r = ray([-1.0, c[1], c[2]], [1.0, 0.0, 0.0], Some(1.9));
        g.accumulate_ray(&r, &[c[0] + 1.0]).unwrap();
        g.step();
        let idx = g.index(1, 1, 1);
        assert!((g.logodds[idx] - (-0.1)).abs() < 1e-12);
        assert!(!g.has_pending());
    }

    #[test]
    fn zero_buffer_step_is_identity() {
        let mut g = OccupancyGrid::new(cfg(8)).unwrap();
        g.logodds[5] = 0.7;
        let before = g.logodds.clone();
        g.step();
        assert_eq!(g.logodds, before);
    }

    #[test]
    fn unknown_grid_falls_back_to_stratified() {
        let g = OccupancyGrid::new(cfg(8)).unwrap();
        let r = ray([0.0; 3], [0.0, 0.0, 1.0], None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, extra) = g.sample_ray_parts(&r, 0.1, 0.9, 16, &mut rng).unwrap();
        let step = 0.8 / 8.0;
        for (j, t) in extra.iter().enumerate() {
            assert!(*t >= 0.1 + j as f64 * step && *t < 0.1 + (j + 1) as f64 * step);
        }
        assert_eq!(u.len(), 8);
        let all = g.sample_ray(&r, 0.1, 0.9, 16, &mut rng).unwrap();
        assert_eq!(all.len(), 16);
        assert!(all.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn odd_or_degenerate_requests_are_rejected() {
        let g = OccupancyGrid::new(cfg(8)).unwrap();
        let r = ray([0.0; 3], [0.0, 0.0, 1.0], None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(g.sample_ray(&r, 0.1, 0.9, 15, &mut rng).is_err());
        assert!(g.sample_ray(&r, 0.9, 0.1, 16, &mut rng).is_err());
    }

    #[test]
    fn export_layout() {
        let mut g = OccupancyGrid::new(cfg(4)).unwrap();
        let idx = g.index(1, 2, 3);
        g.logodds[idx] = -2.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ogm");
        g.export(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"OGM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 16 + 4 * 64);
        let off = 16 + 4 * (1 + 4 * (2 + 4 * 3));
        assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), -2.5);
        let (dims, vals) = OccupancyGrid::read_export(&path).unwrap();
        assert_eq!(dims, [4, 4, 4]);
        assert_eq!(vals[idx], -2.5);
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::optim::ParamBlock;

/// Spatial hash primes (one per axis, the first is 1 for coherence along x).
const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub base_resolution: usize,
    pub growth_factor: f64,
    /// Table entries start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        let levels = 8;
        Self {
            levels,
            features_per_level: 2,
            table_size_log2: 17,
            base_resolution: 16,
            growth_factor: Self::growth_for(16, 512, levels),
            init_range: 1e-4,
        }
    }
}

impl HashGridConfig {
    /// Growth factor that takes `base` to `finest` in `levels` levels.
    pub fn growth_for(base: usize, finest: usize, levels: usize) -> f64 {
        if levels <= 1 {
            return 2.0;
        }
        ((finest as f64 / base as f64).ln() / (levels - 1) as f64).exp()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels >= 1, Config, "hash grid needs at least one level");
        ensure!(self.features_per_level >= 1, Config, "features_per_level must be >= 1");
        ensure!(
            (1..=30).contains(&self.table_size_log2),
            Config,
            "table_size_log2 must be in 1..=30"
        );
        ensure!(self.base_resolution >= 1, Config, "base_resolution must be >= 1");
        ensure!(self.growth_factor > 1.0, Config, "growth_factor must exceed 1");
        ensure!(self.init_range >= 0.0, Config, "init_range must be >= 0");
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1 << self.table_size_log2
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor() as usize
    }
}

/// One of the 8 grid vertices surrounding a point at some level: the offset
/// of its feature vector in the parameter block and its trilinear weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelCorner {
    pub offset: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
struct Level {
    resolution: usize,
    offset: usize,
    entries: usize,
    dense: bool,
}

/// Multi-resolution hash grid over the world cube `[-1, 1]³`.
#[derive(Debug, Clone)]
pub struct HashGrid {
    config: HashGridConfig,
    levels: Vec<Level>,
    pub params: ParamBlock,
}

impl HashGrid {
    pub fn new<R: Rng + ?Sized>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let f = config.features_per_level;
        let mut levels = Vec::with_capacity(config.levels);
        let mut offset = 0;
        for l in 0..config.levels {
            let resolution = config.level_resolution(l).max(1);
            let dense_entries = (resolution + 1).pow(3);
            let dense = dense_entries <= config.table_size();
            let entries = if dense { dense_entries } else { config.table_size() };
            levels.push(Level {
                resolution,
                offset,
                entries,
                dense,
            });
            offset += entries * f;
        }
        let r = config.init_range;
        let value = (0..offset)
            .map(|_| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 })
            .collect();
        Ok(Self {
            config,
            levels,
            params: ParamBlock::new(value, true),
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Map `x ∈ [-1, 1]³` to `[0, 1]³`, clamping; the flag reports clamping.
    fn normalize(x: &[f64; 3]) -> ([f64; 3], bool) {
        let mut clamped = false;
        let mut u = [0.0; 3];
        for k in 0..3 {
            let v = (x[k] + 1.0) * 0.5;
            if !(0.0..=1.0).contains(&v) {
                clamped = true;
            }
            u[k] = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        }
        (u, clamped)
    }

    fn corners_of(&self, level: &Level, u: &[f64; 3]) -> [LevelCorner; 8] {
        let res = level.resolution;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..3 {
            let p = u[k] * res as f64;
            let i = (p.floor() as usize).min(res - 1);
            base[k] = i;
            frac[k] = p - i as f64;
        }
        let f = self.config.features_per_level;
        let stride = res + 1;
        let mut out = [LevelCorner {
            offset: 0,
            weight: 0.0,
        }; 8];
        for (c, corner) in out.iter_mut().enumerate() {
            let mut weight = 1.0;
            let mut vertex = [0usize; 3];
            for k in 0..3 {
                if (c >> k) & 1 == 1 {
                    vertex[k] = base[k] + 1;
                    weight *= frac[k];
                } else {
                    vertex[k] = base[k];
                    weight *= 1.0 - frac[k];
                }
            }
            let index = if level.dense {
                vertex[0] + stride * (vertex[1] + stride * vertex[2])
            } else {
                let h = (vertex[0] as u64).wrapping_mul(PRIMES[0])
                    ^ (vertex[1] as u64).wrapping_mul(PRIMES[1])
                    ^ (vertex[2] as u64).wrapping_mul(PRIMES[2]);
                (h as usize) & (level.entries - 1)
            };
            *corner = LevelCorner {
                offset: level.offset + index * f,
                weight,
            };
        }
        out
    }

    /// The 8 weighted table entries a point touches at `level`.
    pub fn level_corners(&self, level: usize, x: &[f64; 3]) -> [LevelCorner; 8] {
        let (u, _) = Self::normalize(x);
        self.corners_of(&self.levels[level], &u)
    }

    /// Writes `levels × features_per_level` features into `out`. Returns
    /// `true` when `x` was outside the cube and had to be clamped.
    pub fn encode(&self, x: &[f64; 3], out: &mut [f64]) -> bool {
        let f = self.config.features_per_level;
        debug_assert_eq!(out.len(), self.output_dim());
        let (u, clamped) = Self::normalize(x);
        let table = &self.params.value;
        for (level, dst) in self.levels.iter().zip(out.chunks_exact_mut(f)) {
            dst.iter_mut().for_each(|d| *d = 0.0);
            for corner in self.corners_of(level, &u) {
                let entry = &table[corner.offset..corner.offset + f];
                for (d, e) in dst.iter_mut().zip(entry) {
                    *d += corner.weight * e;
                }
            }
        }
        clamped
    }

    /// Scatters `upstream = ∂L/∂features` into `grad` (same layout as the
    /// parameter block) with the trilinear weights used by [`encode`](Self::encode).
    pub fn backward(&self, x: &[f64; 3], upstream: &[f64], grad: &mut [f64]) {
        let f = self.config.features_per_level;
        let (u, _) = Self::normalize(x);
        for (level, up) in self.levels.iter().zip(upstream.chunks_exact(f)) {
            if up.iter().all(|&g| g == 0.0) {
                continue;
            }
            for corner in self.corners_of(level, &u) {
                let dst = &mut grad[corner.offset..corner.offset + f];
                for (d, g) in dst.iter_mut().zip(up) {
                    *d += corner.weight * g;
                }
            }
        }
    }
}

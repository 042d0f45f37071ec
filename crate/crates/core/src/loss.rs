//! Training objectives.
//!
//! LiDAR rays are penalized by a line-of-sight term (L1 distance between the
//! rendering weights and a truncated-Gaussian target around the return) and
//! an opacity term (`|1 - Σw|`). Camera rays are penalized by the L1 color
//! error. The total is `λ₁·L_sight + L_opacity + λ₂·L_color`, with every term
//! averaged over its batch; only `λ₁` (and the target width `ε`) decay.
//!
//! A rendering weight `w_i` is the probability that the ray terminates in
//! `[t_i, t_{i+1})`. The default line-of-sight target is the matching
//! quantity: the truncated-Gaussian mass of that interval. Evaluating the
//! Gaussian at the sample positions instead ([`SightTarget::Sample`]) gives
//! every sample similar mass whatever its spacing, which cannot be matched
//! when samples are non-uniform (as with occupancy-guided sampling) and
//! leaves the fitted opacity well below 1.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Discretization of the truncated-Gaussian line-of-sight target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SightTarget {
    /// Gaussian mass over each sample's interval `[t_i, t_{i+1})`.
    Interval,
    /// Gaussian density at each sample position.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lambda1_initial: f64,
    /// Multiplicative decay of λ₁ per `lambda1_decay_every` LiDAR iterations.
    pub lambda1_decay: f64,
    pub lambda1_decay_every: f64,
    pub lambda1_floor: f64,
    pub lambda2: f64,
    /// ε at the first LiDAR iteration as a fraction of `far - near`.
    pub epsilon_start_fraction: f64,
    /// Final ε in occupancy-grid cells.
    pub epsilon_end_cells: f64,
    pub sight_target: SightTarget,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda1_initial: 1000.0,
            lambda1_decay: 0.25,
            lambda1_decay_every: 2500.0,
            lambda1_floor: 10.0,
            lambda2: 1.0,
            epsilon_start_fraction: 0.2,
            epsilon_end_cells: 2.0,
            sight_target: SightTarget::Interval,
        }
    }
}

/// λ₁, λ₂ and ε as deterministic functions of the LiDAR iteration counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub config: ScheduleConfig,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Iterations over which ε decays linearly.
    pub epsilon_decay_iters: u64,
    /// Counts iterations that included a LiDAR batch.
    pub iteration: u64,
}

impl LossSchedule {
    pub fn new(
        config: ScheduleConfig,
        near: f64,
        far: f64,
        ogm_cell: f64,
        epsilon_decay_iters: u64,
    ) -> Result<Self> {
        let epsilon_start = config.epsilon_start_fraction * (far - near);
        let epsilon_end = config.epsilon_end_cells * ogm_cell;
        let s = Self {
            config,
            epsilon_start,
            epsilon_end: epsilon_end.min(epsilon_start),
            epsilon_decay_iters: epsilon_decay_iters.max(1),
            iteration: 0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        ensure!(
            c.lambda1_initial > 0.0 && c.lambda2 > 0.0 && c.lambda1_floor > 0.0,
            Config,
            "loss weights must be positive"
        );
        ensure!(
            c.lambda1_decay > 0.0 && c.lambda1_decay <= 1.0 && c.lambda1_decay_every > 0.0,
            Config,
            "lambda1 decay must be in (0, 1] with a positive period"
        );
        ensure!(
            self.epsilon_start > 0.0 && self.epsilon_end > 0.0,
            Config,
            "epsilon must stay positive"
        );
        Ok(())
    }

    pub fn lambda1(&self) -> f64 {
        let c = &self.config;
        let decayed = c.lambda1_initial * c.lambda1_decay.powf(self.iteration as f64 / c.lambda1_decay_every);
        decayed.max(c.lambda1_floor.min(c.lambda1_initial))
    }

    pub fn lambda2(&self) -> f64 {
        self.config.lambda2
    }

    pub fn epsilon(&self) -> f64 {
        let f = (self.iteration as f64 / self.epsilon_decay_iters as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }

    pub fn advance(&mut self) {
        self.iteration += 1;
    }
}

/// Target weights: a Gaussian of standard deviation `ε/3` around `z_star`,
/// truncated to `|t - z*| <= ε` and normalized to sum to 1. When no sample
/// lies inside the band, the nearest sample takes all the mass.
pub fn los_target(t: &[f64], z_star: f64, epsilon: f64) -> Result<Vec<f64>> {
    ensure!(epsilon > 0.0, Validation, "epsilon must be positive, got {epsilon}");
    let std = epsilon / 3.0;
    let mut target: Vec<f64> = t
        .iter()
        .map(|&ti| {
            let d = ti - z_star;
            if d.abs() <= epsilon {
                (-0.5 * (d / std).powi(2)).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = target.iter().sum();
    if total > 0.0 {
        target.iter_mut().for_each(|w| *w /= total);
    } else if !t.is_empty() {
        let nearest = t
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - z_star).abs().total_cmp(&(b.1 - z_star).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        target[nearest] = 1.0;
    }
    Ok(target)
}

/// Target weights: the mass of a Gaussian with standard deviation `ε/3`
/// around `z_star`, truncated to `|t - z*| <= ε`, over each interval
/// `[t_i, t_{i+1})` (the last one ending at `far`), normalized to sum to 1.
/// When no interval meets the band, the nearest sample takes all the mass.
pub fn los_target_intervals(t: &[f64], far: f64, z_star: f64, epsilon: f64) -> Result<Vec<f64>> {
    ensure!(epsilon > 0.0, Validation, "epsilon must be positive, got {epsilon}");
    let std = epsilon / 3.0;
    let (lo, hi) = (z_star - epsilon, z_star + epsilon);
    let cdf = |x: f64| 0.5 * (1.0 + libm::erf((x.clamp(lo, hi) - z_star) / (std * std::f64::consts::SQRT_2)));
    let mut target: Vec<f64> = (0..t.len())
        .map(|i| {
            let end = t.get(i + 1).copied().unwrap_or(far);
            (cdf(end) - cdf(t[i])).max(0.0)
        })
        .collect();
    let total: f64 = target.iter().sum();
    if total > 0.0 {
        target.iter_mut().for_each(|w| *w /= total);
    } else {
        target = nearest_only(t, z_star);
    }
    Ok(target)
}

fn nearest_only(t: &[f64], z_star: f64) -> Vec<f64> {
    let mut target = vec![0.0; t.len()];
    if let Some((i, _)) = t
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - z_star).abs().total_cmp(&(b.1 - z_star).abs()))
    {
        target[i] = 1.0;
    }
    target
}

/// Line-of-sight loss `Σ|w_i - w*_i|` and its (sub)gradient in `w`, with
/// the per-sample target of [`los_target`].
pub fn los_loss(weights: &[f64], t: &[f64], z_star: f64, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    ensure!(
        weights.len() == t.len(),
        Validation,
        "{} weights for {} samples",
        weights.len(),
        t.len()
    );
    let target = los_target(t, z_star, epsilon)?;
    Ok(l1_to_target(weights, &target))
}

/// `Σ|w_i - w*_i|` and its (sub)gradient for a given target.
pub fn l1_to_target(weights: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = weights
        .iter()
        .zip(target)
        .map(|(w, ws)| {
            loss += (w - ws).abs();
            sign(w - ws)
        })
        .collect();
    (loss, grad)
}

/// Line-of-sight loss with the configured target discretization.
pub fn sight_loss(
    kind: SightTarget,
    weights: &[f64],
    t: &[f64],
    far: f64,
    z_star: f64,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    ensure!(
        weights.len() == t.len(),
        Validation,
        "{} weights for {} samples",
        weights.len(),
        t.len()
    );
    let target = match kind {
        SightTarget::Interval => los_target_intervals(t, far, z_star, epsilon)?,
        SightTarget::Sample => los_target(t, z_star, epsilon)?,
    };
    Ok(l1_to_target(weights, &target))
}

/// `|1 - Σw|` and its gradient (identical for every weight).
pub fn opacity_loss(weights: &[f64]) -> (f64, f64) {
    let residual = 1.0 - weights.iter().sum::<f64>();
    (residual.abs(), -sign(residual))
}

/// `Σ_c |pred_c - gt_c|` and its gradient in `pred`.
pub fn color_loss(pred: &[f64; 3], gt: &[f64; 3]) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    for c in 0..3 {
        let d = pred[c] - gt[c];
        loss += d.abs();
        grad[c] = sign(d);
    }
    (loss, grad)
}

/// Batch-averaged loss terms and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sight: Option<f64>,
    pub opacity: Option<f64>,
    pub color: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub total: f64,
}

/// LiDAR terms are `(sight, opacity)` means, camera term is the color mean;
/// either side may be absent for single-sensor stages.
pub fn total_loss(
    lidar_terms: Option<(f64, f64)>,
    camera_term: Option<f64>,
    schedule: &LossSchedule,
) -> LossBreakdown {
    let lambda1 = schedule.lambda1();
    let lambda2 = schedule.lambda2();
    let mut total = 0.0;
    if let Some((s, o)) = lidar_terms {
        total += lambda1 * s + o;
    }
    if let Some(c) = camera_term {
        total += lambda2 * c;
    }
    LossBreakdown {
        sight: lidar_terms.map(|t| t.0),
        opacity: lidar_terms.map(|t| t.1),
        color: camera_term,
        lambda1,
        lambda2,
        epsilon: schedule.epsilon(),
        total,
    }
}

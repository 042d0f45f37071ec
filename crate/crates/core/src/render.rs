//! Quadrature of the volume-rendering integral along a ray.
//!
//! With `a_i = σ_i δ_i`, transmittance `T_i = exp(-Σ_{j<i} a_j)` and weight
//! `w_i = T_i (1 - exp(-a_i))`, the rendered color is `Σ w_i c_i` and the
//! termination depth is `Σ w_i t_i`. The last spacing reaches the far bound.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::field::FieldModel;
use crate::geometry::{Ray, Sensor};

/// Accumulated weight below which a ray is reported as having no surface.
pub const NO_SURFACE_WEIGHT: f64 = 1e-10;

/// Samples along one ray and the quantities derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySampleSet {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub weights: Vec<f64>,
    pub color: Option<Vec<[f64; 3]>>,
}

impl RaySampleSet {
    /// Build from ascending sample distances and densities; computes spacings
    /// (the last one reaching `far`) and weights.
    pub fn from_samples(t: Vec<f64>, sigma: Vec<f64>, far: f64) -> Result<Self> {
        let delta = spacings(&t, far)?;
        let weights = compute_weights(&sigma, &delta)?;
        Ok(Self {
            t,
            delta,
            sigma,
            weights,
            color: None,
        })
    }

    pub fn accumulated_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn has_surface(&self) -> bool {
        self.accumulated_weight() > NO_SURFACE_WEIGHT
    }
}

/// `δ_i = t_{i+1} - t_i`, with `δ_N = far - t_N`.
pub fn spacings(t: &[f64], far: f64) -> Result<Vec<f64>> {
    let mut delta = Vec::with_capacity(t.len());
    for w in t.windows(2) {
        ensure!(w[1] >= w[0], Validation, "sample distances are not ascending");
        delta.push(w[1] - w[0]);
    }
    if let Some(&last) = t.last() {
        ensure!(last <= far, Validation, "last sample {last} lies beyond far bound {far}");
        delta.push(far - last);
    }
    Ok(delta)
}

fn check_inputs(sigma: &[f64], delta: &[f64]) -> Result<()> {
    ensure!(
        sigma.len() == delta.len(),
        Validation,
        "sigma has {} entries but delta has {}",
        sigma.len(),
        delta.len()
    );
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Validation(format!("negative or NaN density {s}")));
    }
    if let Some(d) = delta.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Validation(format!("negative or NaN spacing {d}")));
    }
    Ok(())
}

/// Per-sample rendering weights.
pub fn compute_weights(sigma: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    check_inputs(sigma, delta)?;
    Ok(weights_unchecked(sigma, delta).0)
}

/// Weights and the transmittance in front of each sample.
pub(crate) fn weights_unchecked(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut optical_depth = 0.0f64;
    for (s, d) in sigma.iter().zip(delta) {
        let t_i = (-optical_depth).exp();
        let a = s * d;
        trans.push(t_i);
        // T_i (1 - e^{-a}) with expm1 for accuracy at small a
        weights.push(-t_i * (-a).exp_m1());
        optical_depth += a;
    }
    (weights, trans)
}

/// `∂L/∂σ_k` given `∂L/∂w_i`:
/// `δ_k [ g_k (T_k - w_k) - Σ_{i>k} g_i w_i ]`.
pub fn weights_backward(
    delta: &[f64],
    weights: &[f64],
    transmittance: &[f64],
    d_weights: &[f64],
) -> Vec<f64> {
    let n = weights.len();
    let mut d_sigma = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        d_sigma[k] = delta[k] * (d_weights[k] * (transmittance[k] - weights[k]) - suffix);
        suffix += d_weights[k] * weights[k];
    }
    d_sigma
}

pub fn render_color(samples: &RaySampleSet) -> Result<[f64; 3]> {
    let colors = samples
        .color
        .as_ref()
        .ok_or_else(|| Error::Contract("render_color needs per-sample colors".into()))?;
    ensure!(
        colors.len() == samples.weights.len(),
        Contract,
        "{} colors for {} weights",
        colors.len(),
        samples.weights.len()
    );
    let mut out = [0.0; 3];
    for (w, c) in samples.weights.iter().zip(colors) {
        for k in 0..3 {
            out[k] += w * c[k];
        }
    }
    Ok(out)
}

/// Expected termination distance `Σ w_i t_i`; `0` when the ray carries no
/// weight (see [`RaySampleSet::has_surface`]).
pub fn render_depth(samples: &RaySampleSet) -> f64 {
    samples.weights.iter().zip(&samples.t).map(|(w, t)| w * t).sum()
}

/// Chooses sample distances along a ray.
pub trait RaySampler {
    fn sample_ray(
        &self,
        ray: &Ray,
        near: f64,
        far: f64,
        count: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<f64>>;
}

/// `count` stratified-uniform samples over `[near, far]`, ascending.
pub fn stratified_uniform<R: Rng + ?Sized>(near: f64, far: f64, count: usize, rng: &mut R) -> Vec<f64> {
    let step = (far - near) / count as f64;
    (0..count)
        .map(|j| near + (j as f64 + rng.random::<f64>()) * step)
        .collect()
}

/// Stratified sampling with no occupancy guidance.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSampler;

impl RaySampler for UniformSampler {
    fn sample_ray(
        &self,
        _ray: &Ray,
        near: f64,
        far: f64,
        count: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<f64>> {
        ensure!(
            near < far && near.is_finite() && far.is_finite(),
            Validation,
            "degenerate ray bounds near={near} far={far}"
        );
        Ok(stratified_uniform(near, far, count, rng))
    }
}

/// Result of rendering one ray through the model.
#[derive(Debug, Clone)]
pub struct RenderedRay {
    pub samples: RaySampleSet,
    pub color: Option<[f64; 3]>,
    pub depth: f64,
}

impl RenderedRay {
    pub fn weights(&self) -> &[f64] {
        &self.samples.weights
    }
}

/// Sample points for a ray, as plain arrays for the batched model API.
pub(crate) fn sample_points(ray: &Ray, t: &[f64]) -> Vec<[f64; 3]> {
    t.iter()
        .map(|&ti| {
            let p: Vector3<f64> = ray.at(ti);
            [p.x, p.y, p.z]
        })
        .collect()
}

/// Renders a single ray. LiDAR rays evaluate only the density network;
/// camera rays evaluate density and then color.
pub fn render_ray(
    model: &FieldModel,
    sampler: &dyn RaySampler,
    ray: &Ray,
    near: f64,
    far: f64,
    samples_per_ray: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<RenderedRay> {
    let t = sampler.sample_ray(ray, near, far, samples_per_ray, rng)?;
    let points = sample_points(ray, &t);
    let sigma = model.sigma_infer(&points);
    let mut samples = RaySampleSet::from_samples(t, sigma, far)?;
    let color = match ray.sensor {
        Sensor::Lidar => None,
        Sensor::Camera => {
            let d = [ray.direction.x, ray.direction.y, ray.direction.z];
            let dirs = vec![d; points.len()];
            let c = model.color_infer(&points, &dirs)?;
            samples.color = Some(c.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
            Some(render_color(&samples)?)
        }
    };
    let depth = render_depth(&samples);
    Ok(RenderedRay {
        samples,
        color,
        depth,
    })
}

//! The decoupled density (sigma) and color networks.
//!
//! Each network owns its own hash grid; nothing is shared between the two
//! paths. Forward and backward passes are hand-derived and work on row-major
//! batches so the dense layers run as matrix products.

use log::warn;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{sh_encode_into, sh_len, HashGrid, HashGridConfig, MAX_SH_DEGREE};
use crate::error::{ensure, Error, Result};
use crate::optim::{AdamConfig, ParamBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    input: usize,
    output: usize,
    activation: Activation,
    w_offset: usize,
    b_offset: usize,
}

/// Intermediate values of a batched forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct MlpTape {
    rows: usize,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Fully connected network with per-layer activations. Weights are stored
/// `input × output` row-major, followed by the bias, in one parameter block.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    pub params: ParamBlock,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`; hidden layers use ReLU.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output_activation: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut layers = Vec::new();
        let mut value = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (input, output) = (pair[0], pair[1]);
            let last = i + 2 == widths.len();
            let activation = if last { output_activation } else { Activation::Relu };
            // He-uniform for rectified hidden layers, Glorot-uniform for the head.
            let bound = if last {
                (6.0 / (input + output) as f64).sqrt()
            } else {
                (6.0 / input as f64).sqrt()
            };
            let w_offset = value.len();
            value.extend((0..input * output).map(|_| rng.random_range(-bound..bound)));
            let b_offset = value.len();
            value.extend(std::iter::repeat_n(0.0, output));
            layers.push(Layer {
                input,
                output,
                activation,
                w_offset,
                b_offset,
            });
        }
        Self {
            layers,
            params: ParamBlock::new(value, false),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.output)
            .collect()
    }

    fn dense(&self, layer: &Layer, x: &[f64], rows: usize) -> Vec<f64> {
        let w = &self.params.value[layer.w_offset..layer.w_offset + layer.input * layer.output];
        let b = &self.params.value[layer.b_offset..layer.b_offset + layer.output];
        let mut z = Vec::with_capacity(rows * layer.output);
        for _ in 0..rows {
            z.extend_from_slice(b);
        }
        // SAFETY: slices are sized rows×input, input×output and rows×output.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                layer.input,
                layer.output,
                1.0,
                x.as_ptr(),
                layer.input as isize,
                1,
                w.as_ptr(),
                layer.output as isize,
                1,
                1.0,
                z.as_mut_ptr(),
                layer.output as isize,
                1,
            );
        }
        z
    }

    /// Forward pass without recording intermediates.
    pub fn infer(&self, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.input_dim());
        let mut cur: Vec<f64> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { cur.as_slice() };
            let mut z = self.dense(layer, input, rows);
            z.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            cur = z;
        }
        cur
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> MlpTape {
        debug_assert_eq!(x.len(), rows * self.input_dim());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { post[i - 1].as_slice() };
            let z = self.dense(layer, input, rows);
            let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        MlpTape { rows, pre, post }
    }

    /// Accumulates parameter gradients into `grad` (parameter-block sized)
    /// and returns `∂L/∂input` when `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &[f64],
        tape: &MlpTape,
        d_out: &[f64],
        grad: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let rows = tape.rows;
        let mut upstream = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[i];
            let a = &tape.post[i];
            for ((u, &zv), &av) in upstream.iter_mut().zip(z).zip(a) {
                *u *= layer.activation.derivative(zv, av);
            }
            let input = if i == 0 { x } else { tape.post[i - 1].as_slice() };
            let (w_grad, rest) = grad[layer.w_offset..].split_at_mut(layer.input * layer.output);
            let b_grad = &mut rest[..layer.output];
            debug_assert_eq!(layer.b_offset, layer.w_offset + layer.input * layer.output);
            // dW += Xᵀ · dZ
            unsafe {
                matrixmultiply::dgemm(
                    layer.input,
                    rows,
                    layer.output,
                    1.0,
                    input.as_ptr(),
                    1,
                    layer.input as isize,
                    upstream.as_ptr(),
                    layer.output as isize,
                    1,
                    1.0,
                    w_grad.as_mut_ptr(),
                    layer.output as isize,
                    1,
                );
            }
            for row in upstream.chunks_exact(layer.output) {
                for (b, u) in b_grad.iter_mut().zip(row) {
                    *b += u;
                }
            }
            if i == 0 && !want_input_grad {
                return None;
            }
            // dX = dZ · Wᵀ
            let w = &self.params.value[layer.w_offset..layer.w_offset + layer.input * layer.output];
            let mut dx = vec![0.0; rows * layer.input];
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    layer.output,
                    layer.input,
                    1.0,
                    upstream.as_ptr(),
                    layer.output as isize,
                    1,
                    w.as_ptr(),
                    1,
                    layer.output as isize,
                    0.0,
                    dx.as_mut_ptr(),
                    layer.input as isize,
                    1,
                );
            }
            upstream = dx;
        }
        Some(upstream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub sigma_grid: HashGridConfig,
    pub color_grid: HashGridConfig,
    pub sigma_hidden: usize,
    pub color_hidden: usize,
    pub sh_degree: usize,
    pub lr_hash: f64,
    pub lr_mlp: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            sigma_grid: HashGridConfig::default(),
            color_grid: HashGridConfig::default(),
            sigma_hidden: 64,
            color_hidden: 64,
            sh_degree: 4,
            lr_hash: 1e-2,
            lr_mlp: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_epsilon: 1e-8,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.sigma_grid.validate()?;
        self.color_grid.validate()?;
        ensure!(
            self.sigma_hidden >= 1 && self.color_hidden >= 1,
            Config,
            "hidden widths must be positive"
        );
        ensure!(
            (1..=MAX_SH_DEGREE).contains(&self.sh_degree),
            Config,
            "sh_degree must be in 1..={MAX_SH_DEGREE}"
        );
        ensure!(
            self.lr_hash > 0.0 && self.lr_mlp > 0.0,
            Config,
            "learning rates must be positive"
        );
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Which parameter set an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSet {
    Sigma,
    Color,
    Both,
}

impl ParamSet {
    fn includes_sigma(self) -> bool {
        matches!(self, ParamSet::Sigma | ParamSet::Both)
    }

    fn includes_color(self) -> bool {
        matches!(self, ParamSet::Color | ParamSet::Both)
    }
}

/// Recorded sigma-path forward pass over a batch of points.
#[derive(Debug, Clone)]
pub struct SigmaTape {
    features: Vec<f64>,
    mlp: MlpTape,
}

impl SigmaTape {
    pub fn sigma(&self) -> &[f64] {
        self.mlp.output()
    }
}

/// Recorded color-path forward pass over a batch of points.
#[derive(Debug, Clone)]
pub struct ColorTape {
    inputs: Vec<f64>,
    mlp: MlpTape,
}

impl ColorTape {
    /// Row-major `rows × 3` colors.
    pub fn colors(&self) -> &[f64] {
        self.mlp.output()
    }
}

/// Gradient contribution of one batch, held apart from the model so batches
/// can be processed independently and merged in a fixed order.
#[derive(Debug, Clone)]
pub struct PathGrads {
    pub mlp: Vec<f64>,
    /// `∂L/∂features`, one encoding-width row per point.
    pub features: Vec<f64>,
}

/// The full decoupled model: `sigma_grid → sigma_mlp → σ` and
/// `[color_grid ‖ SH(d)] → color_mlp → c`.
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub config: FieldConfig,
    pub sigma_grid: HashGrid,
    pub sigma_mlp: Mlp,
    pub color_grid: HashGrid,
    pub color_mlp: Mlp,
}

impl FieldModel {
    pub fn new<R: Rng + ?Sized>(config: FieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let sigma_grid = HashGrid::new(config.sigma_grid, rng)?;
        let sigma_mlp = Mlp::new(
            &[sigma_grid.output_dim(), config.sigma_hidden, 1],
            Activation::Softplus,
            rng,
        );
        let color_grid = HashGrid::new(config.color_grid, rng)?;
        let color_in = color_grid.output_dim() + sh_len(config.sh_degree);
        let color_mlp = Mlp::new(
            &[color_in, config.color_hidden, config.color_hidden, 3],
            Activation::Sigmoid,
            rng,
        );
        Ok(Self {
            config,
            sigma_grid,
            sigma_mlp,
            color_grid,
            color_mlp,
        })
    }

    /// Every parameter block in a fixed order: sigma grid, sigma MLP, color
    /// grid, color MLP.
    pub fn blocks(&self) -> [&ParamBlock; 4] {
        [
            &self.sigma_grid.params,
            &self.sigma_mlp.params,
            &self.color_grid.params,
            &self.color_mlp.params,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut ParamBlock; 4] {
        [
            &mut self.sigma_grid.params,
            &mut self.sigma_mlp.params,
            &mut self.color_grid.params,
            &mut self.color_mlp.params,
        ]
    }

    /// Indices into [`blocks`](Self::blocks) that belong to the sigma path.
    pub const SIGMA_BLOCKS: [usize; 2] = [0, 1];
    pub const COLOR_BLOCKS: [usize; 2] = [2, 3];

    fn encode_points(grid: &HashGrid, xs: &[[f64; 3]]) -> (Vec<f64>, usize) {
        let dim = grid.output_dim();
        let mut feats = vec![0.0; xs.len() * dim];
        let mut clamped = 0;
        for (x, row) in xs.iter().zip(feats.chunks_exact_mut(dim)) {
            clamped += grid.encode(x, row) as usize;
        }
        (feats, clamped)
    }

    /// Densities without recording anything for backward.
    pub fn sigma_infer(&self, xs: &[[f64; 3]]) -> Vec<f64> {
        let (feats, _) = Self::encode_points(&self.sigma_grid, xs);
        self.sigma_mlp.infer(&feats, xs.len())
    }

    pub fn sigma_forward_batch(&self, xs: &[[f64; 3]]) -> SigmaTape {
        let (features, _) = Self::encode_points(&self.sigma_grid, xs);
        let mlp = self.sigma_mlp.forward(&features, xs.len());
        SigmaTape { features, mlp }
    }

    pub fn sigma_backward_batch(&self, tape: &SigmaTape, d_sigma: &[f64]) -> PathGrads {
        let mut mlp = vec![0.0; self.sigma_mlp.params.len()];
        let features = self
            .sigma_mlp
            .backward(&tape.features, &tape.mlp, d_sigma, &mut mlp, true)
            .unwrap_or_default();
        PathGrads { mlp, features }
    }

    fn color_inputs(&self, xs: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<Vec<f64>> {
        let gdim = self.color_grid.output_dim();
        let sdim = sh_len(self.config.sh_degree);
        let width = gdim + sdim;
        let mut inputs = vec![0.0; xs.len() * width];
        for ((x, d), row) in xs.iter().zip(dirs).zip(inputs.chunks_exact_mut(width)) {
            let (g, s) = row.split_at_mut(gdim);
            self.color_grid.encode(x, g);
            sh_encode_into(&Vector3::from(*d), self.config.sh_degree, s)?;
        }
        Ok(inputs)
    }

    pub fn color_infer(&self, xs: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<Vec<f64>> {
        let inputs = self.color_inputs(xs, dirs)?;
        Ok(self.color_mlp.infer(&inputs, xs.len()))
    }

    pub fn color_forward_batch(&self, xs: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<ColorTape> {
        let inputs = self.color_inputs(xs, dirs)?;
        let mlp = self.color_mlp.forward(&inputs, xs.len());
        Ok(ColorTape { inputs, mlp })
    }

    /// `d_color` is row-major `rows × 3`. The returned feature gradient holds
    /// only the hash-grid part of the input (the SH encoding is fixed).
    pub fn color_backward_batch(&self, tape: &ColorTape, d_color: &[f64]) -> PathGrads {
        let mut mlp = vec![0.0; self.color_mlp.params.len()];
        let d_in = self
            .color_mlp
            .backward(&tape.inputs, &tape.mlp, d_color, &mut mlp, true)
            .unwrap_or_default();
        let width = self.color_mlp.input_dim();
        let gdim = self.color_grid.output_dim();
        let features = d_in
            .chunks_exact(width)
            .flat_map(|row| row[..gdim].iter().copied())
            .collect();
        PathGrads { mlp, features }
    }

    /// Adds a sigma-path batch gradient to the model's accumulators.
    pub fn accumulate_sigma(&mut self, xs: &[[f64; 3]], grads: &PathGrads) {
        self.sigma_mlp.params.add_grad(&grads.mlp);
        let dim = self.sigma_grid.output_dim();
        let grid = &mut self.sigma_grid;
        let mut buf = std::mem::take(&mut grid.params.grad);
        for (x, up) in xs.iter().zip(grads.features.chunks_exact(dim)) {
            grid.backward(x, up, &mut buf);
        }
        grid.params.grad = buf;
    }

    pub fn accumulate_color(&mut self, xs: &[[f64; 3]], grads: &PathGrads) {
        self.color_mlp.params.add_grad(&grads.mlp);
        let dim = self.color_grid.output_dim();
        let grid = &mut self.color_grid;
        let mut buf = std::mem::take(&mut grid.params.grad);
        for (x, up) in xs.iter().zip(grads.features.chunks_exact(dim)) {
            grid.backward(x, up, &mut buf);
        }
        grid.params.grad = buf;
    }

    /// Density at one point. With `track_gradients` the forward pass is
    /// recorded (and discarded); the value is identical either way.
    pub fn sigma_forward(&self, x: &Vector3<f64>, track_gradients: bool) -> Result<f64> {
        let p = [[x.x, x.y, x.z]];
        let s = if track_gradients {
            self.sigma_forward_batch(&p).sigma()[0]
        } else {
            self.sigma_infer(&p)[0]
        };
        ensure!(s.is_finite(), NonFinite, "sigma at {x:?} is {s}");
        Ok(s)
    }

    pub fn color_forward(&self, x: &Vector3<f64>, d: &Vector3<f64>) -> Result<[f64; 3]> {
        let c = self.color_infer(&[[x.x, x.y, x.z]], &[[d.x, d.y, d.z]])?;
        ensure!(
            c.iter().all(|v| v.is_finite()),
            NonFinite,
            "color at {x:?} is {c:?}"
        );
        Ok([c[0], c[1], c[2]])
    }

    /// Adam step on the selected parameter set; the other set is not touched.
    /// Returns whether anything was updated.
    pub fn apply_gradients(&mut self, which: ParamSet) -> bool {
        let hash = self.config.adam(self.config.lr_hash);
        let mlp = self.config.adam(self.config.lr_mlp);
        let mut stepped = false;
        if which.includes_sigma() {
            stepped |= self.sigma_grid.params.adam_step(&hash);
            stepped |= self.sigma_mlp.params.adam_step(&mlp);
        }
        if which.includes_color() {
            stepped |= self.color_grid.params.adam_step(&hash);
            stepped |= self.color_mlp.params.adam_step(&mlp);
        }
        if !stepped {
            warn!("optimizer step requested for {which:?} with no accumulated gradient");
        }
        stepped
    }

    pub fn zero_grad(&mut self) {
        for b in self.blocks_mut() {
            b.zero_grad();
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        const NAMES: [&str; 4] = ["sigma grid", "sigma mlp", "color grid", "color mlp"];
        for (name, block) in NAMES.iter().zip(self.blocks()) {
            if let Some(i) = block.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{name} parameter {i} is {} after {} optimizer steps",
                    block.value[i], block.step
                )));
            }
        }
        Ok(())
    }
}

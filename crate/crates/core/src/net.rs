//! Value network `v̂(s, w)`: a fully connected and a convolutional variant,
//! with hand-written forward and reverse passes.
//!
//! Activations are laid out per sample as `channels x height x width`,
//! matching [`crate::env::write_egocentric`].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIDDEN_UNITS: usize = 32;
pub const FC_HIDDEN_LAYERS: usize = 3;
pub const CONV_FILTERS: usize = 32;
pub const CONV_LAYERS: usize = 4;
pub const KERNEL: usize = 3;
/// Convolutions followed by 2x2 average pooling.
pub const POOLED_CONV_LAYERS: usize = 2;

/// Samples per internal forward chunk; bounds activation memory.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Fc,
    Cnn,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(Architecture::Fc),
            "cnn" => Ok(Architecture::Cnn),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Fc => "fc",
            Architecture::Cnn => "cnn",
        })
    }
}

/// Network input: the agent-centered belief, plus an optional constant
/// time-to-go plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub width: usize,
    pub height: usize,
    pub flux_channels: usize,
    #[serde(default)]
    pub time_channel: bool,
    /// Belief entries are multiplied by the number of hypotheses.
    #[serde(default)]
    pub scaled_belief: bool,
}

impl InputGeometry {
    pub fn channels(&self) -> usize {
        self.flux_channels + self.time_channel as usize
    }

    pub fn len(&self) -> usize {
        self.channels() * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out, in]` for dense layers, `[out, in, k, k]` for convolutions.
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub episodes: usize,
    pub seed: u64,
}

/// Parameters of one value network; this is also the checkpoint format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub architecture: Architecture,
    pub env_geometry: InputGeometry,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub training_meta: TrainingMeta,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Stage {
    Dense {
        layer: usize,
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    /// 3x3, stride 1, zero padding, followed by ReLU.
    Conv {
        layer: usize,
        in_c: usize,
        out_c: usize,
        h: usize,
        w: usize,
    },
    /// 2x2 average pooling, stride 2, trailing odd row/column dropped.
    Pool { c: usize, h: usize, w: usize },
}

impl Stage {
    fn out_len(&self) -> usize {
        match *self {
            Stage::Dense { outputs, .. } => outputs,
            Stage::Conv { out_c, h, w, .. } => out_c * h * w,
            Stage::Pool { c, h, w } => c * (h / 2) * (w / 2),
        }
    }
}

fn plan(arch: Architecture, geo: InputGeometry) -> Result<Vec<Stage>> {
    if geo.is_empty() {
        return Err(Error::Config("network input is empty".into()));
    }
    let mut stages = Vec::new();
    match arch {
        Architecture::Fc => {
            let mut inputs = geo.len();
            for layer in 0..FC_HIDDEN_LAYERS {
                stages.push(Stage::Dense {
                    layer,
                    inputs,
                    outputs: HIDDEN_UNITS,
                    relu: true,
                });
                inputs = HIDDEN_UNITS;
            }
            stages.push(Stage::Dense {
                layer: FC_HIDDEN_LAYERS,
                inputs,
                outputs: 1,
                relu: false,
            });
        }
        Architecture::Cnn => {
            if geo.width < 4 || geo.height < 4 {
                return Err(Error::Config(format!(
                    "convolutional network needs at least 4x4 input, got {}x{}",
                    geo.width, geo.height
                )));
            }
            let (mut c, mut h, mut w) = (geo.channels(), geo.height, geo.width);
            for layer in 0..CONV_LAYERS {
                stages.push(Stage::Conv {
                    layer,
                    in_c: c,
                    out_c: CONV_FILTERS,
                    h,
                    w,
                });
                c = CONV_FILTERS;
                if layer < POOLED_CONV_LAYERS {
                    stages.push(Stage::Pool { c, h, w });
                    h /= 2;
                    w /= 2;
                }
            }
            stages.push(Stage::Dense {
                layer: CONV_LAYERS,
                inputs: c * h * w,
                outputs: 1,
                relu: false,
            });
        }
    }
    Ok(stages)
}

fn layer_shapes(stages: &[Stage]) -> Vec<Vec<usize>> {
    stages
        .iter()
        .filter_map(|s| match *s {
            Stage::Dense { inputs, outputs, .. } => Some(vec![outputs, inputs]),
            Stage::Conv { in_c, out_c, .. } => Some(vec![out_c, in_c, KERNEL, KERNEL]),
            Stage::Pool { .. } => None,
        })
        .collect()
}

/// `C = A·B + beta·C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, a_strides) < a.len() && last(k, n, b_strides) < b.len());
    }
    assert!(last(m, n, c_strides) < c.len());
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Unfolds a `c x h x w` image into `(c·9) x (h·w)` patches.
fn im2col(input: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((ci * KERNEL + ky) * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &input[(ci * h + sy as usize) * w..][..w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    out.fill(0.0);
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((ci * KERNEL + ky) * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut out[(ci * h + sy as usize) * w..][..w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

fn avg_pool(input: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for y in 0..oh {
            let r0 = &input[(ci * h + 2 * y) * w..][..w];
            let r1 = &input[(ci * h + 2 * y + 1) * w..][..w];
            for x in 0..ow {
                out[(ci * oh + y) * ow + x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
}

fn avg_pool_backward(grad_out: &[f64], c: usize, h: usize, w: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    grad_in.fill(0.0);
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad_out[(ci * oh + y) * ow + x];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    grad_in[(ci * h + 2 * y + dy) * w + 2 * x + dx] = g;
                }
            }
        }
    }
}

/// Parameter-shaped gradient (or optimizer state).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &NetworkWeights) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }
}

impl NetworkWeights {
    /// Hidden layers drawn from `U(-1/√fan_in, 1/√fan_in)`; the output layer is exactly zero.
    pub fn initialize<R: Rng + ?Sized>(arch: Architecture, geometry: InputGeometry, rng: &mut R) -> Result<Self> {
        let stages = plan(arch, geometry)?;
        let shapes = layer_shapes(&stages);
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let fan_in: usize = shape[1..].iter().product();
                let n: usize = shape.iter().product();
                let out = shape[0];
                if i == last {
                    Layer {
                        shape,
                        weights: vec![0.0; n],
                        bias: vec![0.0; out],
                    }
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut draw = || rng.gen_range(-bound..bound);
                    let weights = (0..n).map(|_| draw()).collect();
                    let bias = (0..out).map(|_| draw()).collect();
                    Layer { shape, weights, bias }
                }
            })
            .collect();
        Ok(Self {
            architecture: arch,
            env_geometry: geometry,
            layers,
            training_meta: TrainingMeta::default(),
        })
    }

    pub fn zeros(arch: Architecture, geometry: InputGeometry) -> Result<Self> {
        let layers = layer_shapes(&plan(arch, geometry)?)
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                let out = shape[0];
                Layer {
                    shape,
                    weights: vec![0.0; n],
                    bias: vec![0.0; out],
                }
            })
            .collect();
        Ok(Self {
            architecture: arch,
            env_geometry: geometry,
            layers,
            training_meta: TrainingMeta::default(),
        })
    }

    pub fn input_len(&self) -> usize {
        self.env_geometry.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks layer shapes against the architecture and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        let expected = layer_shapes(&plan(self.architecture, self.env_geometry)?);
        if expected.len() != self.layers.len() {
            return Err(Error::Checkpoint(format!(
                "{} architecture needs {} layers, found {}",
                self.architecture,
                expected.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, shape)) in self.layers.iter().zip(&expected).enumerate() {
            if &layer.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: shape {:?}, expected {shape:?}",
                    layer.shape
                )));
            }
            let n: usize = shape.iter().product();
            if layer.weights.len() != n || layer.bias.len() != shape[0] {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: {} weights and {} biases, expected {n} and {}",
                    layer.weights.len(),
                    layer.bias.len(),
                    shape[0]
                )));
            }
            let bad = layer
                .weights
                .iter()
                .chain(&layer.bias)
                .position(|v| !v.is_finite());
            if let Some(offset) = bad {
                return Err(Error::Checkpoint(format!("layer {i}: non-finite value at offset {offset}")));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &[f64], batch: usize) -> Result<()> {
        if inputs.len() != batch * self.input_len() {
            return Err(Error::Contract(format!(
                "expected {batch} inputs of length {}, got {} values",
                self.input_len(),
                inputs.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        Ok(self.forward_batch(input, 1)?[0])
    }

    /// Values of `batch` inputs stored back to back.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_inputs(inputs, batch)?;
        let stages = plan(self.architecture, self.env_geometry)?;
        let d = self.input_len();
        let mut out = Vec::with_capacity(batch);
        for chunk in inputs.chunks(CHUNK * d) {
            let acts = self.activations(&stages, chunk, chunk.len() / d);
            out.extend_from_slice(acts.last().map(Vec::as_slice).unwrap_or_default());
        }
        Ok(out)
    }

    /// Output of every stage, input first.
    fn activations(&self, stages: &[Stage], inputs: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut acts = vec![inputs.to_vec()];
        let mut col = Vec::new();
        for stage in stages {
            let x = acts.last().expect("input present");
            let mut y = vec![0.0; batch * stage.out_len()];
            match *stage {
                Stage::Dense {
                    layer,
                    inputs,
                    outputs,
                    relu,
                } => {
                    let l = &self.layers[layer];
                    for row in y.chunks_mut(outputs) {
                        row.copy_from_slice(&l.bias);
                    }
                    // Y[b, o] += X[b, i] W[o, i]
                    gemm(batch, inputs, outputs, x, (inputs, 1), &l.weights, (1, inputs), 1.0, &mut y, (outputs, 1));
                    if relu {
                        y.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
                Stage::Conv {
                    layer,
                    in_c,
                    out_c,
                    h,
                    w,
                } => {
                    let l = &self.layers[layer];
                    let (hw, kk) = (h * w, in_c * KERNEL * KERNEL);
                    col.resize(kk * hw, 0.0);
                    for b in 0..batch {
                        im2col(&x[b * in_c * hw..][..in_c * hw], in_c, h, w, &mut col);
                        let yb = &mut y[b * out_c * hw..][..out_c * hw];
                        for (o, row) in yb.chunks_mut(hw).enumerate() {
                            row.fill(l.bias[o]);
                        }
                        gemm(out_c, kk, hw, &l.weights, (kk, 1), &col, (hw, 1), 1.0, yb, (hw, 1));
                    }
                    y.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                Stage::Pool { c, h, w } => {
                    let (n_in, n_out) = (c * h * w, stage.out_len());
                    for b in 0..batch {
                        avg_pool(&x[b * n_in..][..n_in], c, h, w, &mut y[b * n_out..][..n_out]);
                    }
                }
            }
            acts.push(y);
        }
        acts
    }

    /// Gradient of `½ (v̂(input) - target)²` with respect to every parameter.
    pub fn gradient(&self, input: &[f64], target: f64) -> Result<Gradients> {
        Ok(self.batch_gradient(input, &[target])?.0)
    }

    /// Mean over the batch of the per-sample squared-residual gradient, and the
    /// mean squared residual `mean (v̂ - target)²`.
    pub fn batch_gradient(&self, inputs: &[f64], targets: &[f64]) -> Result<(Gradients, f64)> {
        let batch = targets.len();
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        self.check_inputs(inputs, batch)?;
        let stages = plan(self.architecture, self.env_geometry)?;
        let d = self.input_len();
        let mut grads = Gradients::zeros_like(self);
        let mut sq = 0.0;
        for (chunk, chunk_targets) in inputs.chunks(CHUNK * d).zip(targets.chunks(CHUNK)) {
            let n = chunk_targets.len();
            let acts = self.activations(&stages, chunk, n);
            let values = acts.last().expect("output present");
            let mut delta: Vec<f64> = values
                .iter()
                .zip(chunk_targets)
                .map(|(v, t)| {
                    sq += (v - t) * (v - t);
                    (v - t) / batch as f64
                })
                .collect();
            self.backward(&stages, &acts, n, &mut delta, &mut grads);
        }
        Ok((grads, sq / batch as f64))
    }

    /// Accumulates parameter gradients given `delta = dL/d(output)` per sample.
    fn backward(&self, stages: &[Stage], acts: &[Vec<f64>], batch: usize, delta: &mut Vec<f64>, grads: &mut Gradients) {
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for (s, stage) in stages.iter().enumerate().rev() {
            let x = &acts[s];
            let y = &acts[s + 1];
            let need_input_grad = s > 0;
            match *stage {
                Stage::Dense {
                    layer,
                    inputs,
                    outputs,
                    relu,
                } => {
                    if relu {
                        delta.iter_mut().zip(y).for_each(|(d, &v)| {
                            if v <= 0.0 {
                                *d = 0.0
                            }
                        });
                    }
                    let g = &mut grads.layers[layer];
                    // dW[o, i] += Σ_b delta[b, o] X[b, i]
                    gemm(outputs, batch, inputs, delta, (1, outputs), x, (inputs, 1), 1.0, &mut g.weights, (inputs, 1));
                    for row in delta.chunks(outputs) {
                        g.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                    }
                    if need_input_grad {
                        let mut dx = vec![0.0; batch * inputs];
                        let w = &self.layers[layer].weights;
                        gemm(batch, outputs, inputs, delta, (outputs, 1), w, (inputs, 1), 0.0, &mut dx, (inputs, 1));
                        *delta = dx;
                    }
                }
                Stage::Conv {
                    layer,
                    in_c,
                    out_c,
                    h,
                    w,
                } => {
                    delta.iter_mut().zip(y).for_each(|(d, &v)| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    let (hw, kk) = (h * w, in_c * KERNEL * KERNEL);
                    col.resize(kk * hw, 0.0);
                    dcol.resize(kk * hw, 0.0);
                    let mut dx = if need_input_grad { vec![0.0; batch * in_c * hw] } else { Vec::new() };
                    let wts = &self.layers[layer].weights;
                    for b in 0..batch {
                        let db = &delta[b * out_c * hw..][..out_c * hw];
                        im2col(&x[b * in_c * hw..][..in_c * hw], in_c, h, w, &mut col);
                        let g = &mut grads.layers[layer];
                        gemm(out_c, hw, kk, db, (hw, 1), &col, (1, hw), 1.0, &mut g.weights, (kk, 1));
                        for (o, row) in db.chunks(hw).enumerate() {
                            g.bias[o] += row.iter().sum::<f64>();
                        }
                        if need_input_grad {
                            gemm(kk, out_c, hw, wts, (1, kk), db, (hw, 1), 0.0, &mut dcol, (hw, 1));
                            col2im(&dcol, in_c, h, w, &mut dx[b * in_c * hw..][..in_c * hw]);
                        }
                    }
                    *delta = dx;
                }
                Stage::Pool { c, h, w } => {
                    let (n_in, n_out) = (c * h * w, stage.out_len());
                    let mut dx = vec![0.0; batch * n_in];
                    for b in 0..batch {
                        avg_pool_backward(&delta[b * n_out..][..n_out], c, h, w, &mut dx[b * n_in..][..n_in]);
                    }
                    *delta = dx;
                }
            }
        }
    }

    pub fn apply_update(&mut self, step: &Gradients, learning_rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(&step.layers) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= learning_rate * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= learning_rate * d);
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let net: NetworkWeights = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        net.validate()?;
        Ok(net)
    }

    /// Loads a checkpoint and checks its architecture tag.
    pub fn load_expecting(path: impl AsRef<Path>, arch: Architecture) -> Result<Self> {
        let net = Self::load_checkpoint(path)?;
        if net.architecture != arch {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} network, expected {arch}",
                net.architecture
            )));
        }
        Ok(net)
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut NetworkWeights, grad: &Gradients) {
        if self.momentum == 0.0 {
            net.apply_update(grad, self.learning_rate);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        for (vl, gl) in v.layers.iter_mut().zip(&grad.layers) {
            for (a, b) in vl.weights.iter_mut().zip(&gl.weights) {
                *a = self.momentum * *a + b;
            }
            for (a, b) in vl.bias.iter_mut().zip(&gl.bias) {
                *a = self.momentum * *a + b;
            }
        }
        net.apply_update(v, self.learning_rate);
    }
}

/// Adam with the usual bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Option<Gradients>,
    second: Option<Gradients>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: None,
            second: None,
        }
    }

    pub fn step(&mut self, net: &mut NetworkWeights, grad: &Gradients) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let m = self.first.get_or_insert_with(|| Gradients::zeros_like(net));
        let v = self.second.get_or_insert_with(|| Gradients::zeros_like(net));
        let lr = self.learning_rate * (1.0 - b2.powf(self.steps as f64)).sqrt() / (1.0 - b1.powf(self.steps as f64));
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + self.eps);
            }
        };
        for (((layer, ml), vl), gl) in net.layers.iter_mut().zip(&mut m.layers).zip(&mut v.layers).zip(&grad.layers) {
            update(&mut layer.weights, &mut ml.weights, &mut vl.weights, &gl.weights);
            update(&mut layer.bias, &mut ml.bias, &mut vl.bias, &gl.bias);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(learning_rate, momentum)),
            OptimizerKind::Adam => Self::Adam(Adam::new(learning_rate)),
        }
    }

    pub fn step(&mut self, net: &mut NetworkWeights, grad: &Gradients) {
        match self {
            Self::Sgd(o) => o.step(net, grad),
            Self::Adam(o) => o.step(net, grad),
        }
    }
}

/// One plain SGD step on the batch mean of `½ (v̂ - target)²`.
pub fn sgd_step(
    net: &NetworkWeights,
    inputs: &[f64],
    targets: &[f64],
    learning_rate: f64,
) -> Result<NetworkWeights> {
    let (grad, _) = net.batch_gradient(inputs, targets)?;
    if !grad.is_finite() {
        return Err(Error::Divergence {
            episode: net.training_meta.episodes,
            reason: "non-finite gradient".into(),
        });
    }
    let mut next = net.clone();
    next.apply_update(&grad, learning_rate);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geo(width: usize, height: usize, flux: usize) -> InputGeometry {
        InputGeometry {
            width,
            height,
            flux_channels: flux,
            time_channel: false,
            scaled_belief: false,
        }
    }

    fn randomized(arch: Architecture, g: InputGeometry, seed: u64) -> NetworkWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = NetworkWeights::initialize(arch, g, &mut rng).unwrap();
        let last = net.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.5..0.5));
        last.bias[0] = 0.1;
        net
    }

    fn random_input(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn architectures_have_expected_shapes() {
        let g = geo(21, 21, 5);
        let fc = NetworkWeights::zeros(Architecture::Fc, g).unwrap();
        let shapes: Vec<_> = fc.layers.iter().map(|l| l.shape.clone()).collect();
        assert_eq!(shapes, vec![vec![32, 2205], vec![32, 32], vec![32, 32], vec![1, 32]]);
        let cnn = NetworkWeights::zeros(Architecture::Cnn, g).unwrap();
        let shapes: Vec<_> = cnn.layers.iter().map(|l| l.shape.clone()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![32, 5, 3, 3],
                vec![32, 32, 3, 3],
                vec![32, 32, 3, 3],
                vec![32, 32, 3, 3],
                // 21 -> 10 -> 5 after the two pools
                vec![1, 800],
            ]
        );
        assert!(NetworkWeights::zeros(Architecture::Cnn, geo(1, 1, 1)).is_err());
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let g = geo(5, 5, 2);
        for arch in [Architecture::Fc, Architecture::Cnn] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let net = NetworkWeights::initialize(arch, g, &mut rng).unwrap();
            for seed in 0..5 {
                assert_eq!(net.forward(&random_input(g.len(), seed)).unwrap(), 0.0);
            }
            let zeros = NetworkWeights::zeros(arch, g).unwrap();
            assert_eq!(zeros.forward(&random_input(g.len(), 9)).unwrap(), 0.0);
        }
    }

    #[test]
    fn output_layer_scaling_scales_value() {
        let g = geo(5, 5, 2);
        for arch in [Architecture::Fc, Architecture::Cnn] {
            let net = randomized(arch, g, 3);
            let x = random_input(g.len(), 4);
            let v = net.forward(&x).unwrap();
            let mut scaled = net.clone();
            let last = scaled.layers.last_mut().unwrap();
            last.weights.iter_mut().chain(last.bias.iter_mut()).for_each(|w| *w *= 2.5);
            assert!((scaled.forward(&x).unwrap() - 2.5 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_fc_forward() {
        // Input of length 1; one live unit per hidden layer, the rest zero.
        let g = geo(1, 1, 1);
        let mut net = NetworkWeights::zeros(Architecture::Fc, g).unwrap();
        net.layers[0].weights[0] = 2.0; // h1 = relu(2x - 1)
        net.layers[0].bias[0] = -1.0;
        net.layers[1].weights[0] = -3.0; // h2 = relu(-3 h1 + 4)
        net.layers[1].bias[0] = 4.0;
        net.layers[2].weights[0] = 0.5; // h3 = relu(0.5 h2)
        net.layers[3].weights[0] = 2.0; // v = 2 h3 + 0.25
        net.layers[3].bias[0] = 0.25;
        // x = 1.5: h1 = 2, h2 = relu(-2) = 0, h3 = 0, v = 0.25
        assert_eq!(net.forward(&[1.5]).unwrap(), 0.25);
        // x = 1: h1 = 1, h2 = 1, h3 = 0.5, v = 1.25
        assert_eq!(net.forward(&[1.0]).unwrap(), 1.25);
        // x = 0: h1 = 0, h2 = 4, h3 = 2, v = 4.25
        assert_eq!(net.forward(&[0.0]).unwrap(), 4.25);
    }

    #[test]
    fn batch_forward_matches_single() {
        let g = geo(9, 9, 2);
        for arch in [Architecture::Fc, Architecture::Cnn] {
            let net = randomized(arch, g, 5);
            let n = 150;
            let xs = random_input(n * g.len(), 6);
            let batch = net.forward_batch(&xs, n).unwrap();
            for (i, v) in batch.iter().enumerate() {
                let single = net.forward(&xs[i * g.len()..(i + 1) * g.len()]).unwrap();
                assert!((single - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let net = NetworkWeights::zeros(Architecture::Fc, geo(3, 3, 1)).unwrap();
        assert!(matches!(net.forward(&[0.0; 8]), Err(Error::Contract(_))));
        assert!(net.batch_gradient(&[0.0; 9], &[]).is_err());
    }

    fn loss(net: &NetworkWeights, x: &[f64], target: f64) -> f64 {
        let v = net.forward(x).unwrap();
        0.5 * (v - target) * (v - target)
    }

    fn check_against_finite_differences(arch: Architecture, g: InputGeometry, seed: u64) {
        let net = randomized(arch, g, seed);
        let x = random_input(g.len(), seed + 100);
        let target = 0.7;
        let grad = net.gradient(&x, target).unwrap();
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for (li, layer) in net.layers.iter().enumerate() {
            let n_w = layer.weights.len();
            for p in 0..n_w + layer.bias.len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let (pv, mv) = if p < n_w {
                    (&mut plus.layers[li].weights[p], &mut minus.layers[li].weights[p])
                } else {
                    (&mut plus.layers[li].bias[p - n_w], &mut minus.layers[li].bias[p - n_w])
                };
                *pv += step;
                *mv -= step;
                let numeric = (loss(&plus, &x, target) - loss(&minus, &x, target)) / (2.0 * step);
                let analytic = if p < n_w {
                    grad.layers[li].weights[p]
                } else {
                    grad.layers[li].bias[p - n_w]
                };
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-5, "{arch}: worst relative error {worst}");
    }

    #[test]
    fn fc_gradient_matches_central_differences() {
        check_against_finite_differences(Architecture::Fc, geo(3, 3, 2), 11);
    }

    #[test]
    fn cnn_gradient_matches_central_differences() {
        // Odd 5x5 input exercises the truncating pool.
        check_against_finite_differences(Architecture::Cnn, geo(5, 5, 2), 12);
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let g = geo(5, 5, 1);
        let net = randomized(Architecture::Cnn, g, 2);
        let x = random_input(g.len(), 3);
        let v = net.forward(&x).unwrap();
        let grad = net.gradient(&x, v).unwrap();
        assert!(grad.values().all(|&d| d == 0.0));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let g = geo(1, 1, 1);
        let mut net = NetworkWeights::zeros(Architecture::Fc, g).unwrap();
        net.layers[0].weights[0] = 1.0;
        net.layers[0].bias[0] = -5.0; // dead for x = 1
        net.layers[0].weights[1] = 1.0; // live unit
        net.layers[1].weights[0] = 1.0;
        net.layers[1].weights[1] = 1.0;
        net.layers[2].weights[0] = 1.0;
        net.layers[3].weights[0] = 1.0;
        let grad = net.gradient(&[1.0], 10.0).unwrap();
        assert_eq!(grad.layers[0].weights[0], 0.0);
        assert_eq!(grad.layers[0].bias[0], 0.0);
        assert!(grad.layers[0].weights[1] != 0.0);
    }

    #[test]
    fn pooling_keeps_constant_planes() {
        let (c, h, w) = (2, 7, 5);
        let input = vec![3.25; c * h * w];
        let mut out = vec![0.0; c * 3 * 2];
        avg_pool(&input, c, h, w, &mut out);
        assert!(out.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 4, 5);
        let x = random_input(c * h * w, 1);
        let y = random_input(c * 9 * h * w, 2);
        let mut col = vec![0.0; c * 9 * h * w];
        im2col(&x, c, h, w, &mut col);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_rate_keeps_weights() {
        let g = geo(3, 3, 1);
        let net = randomized(Architecture::Fc, g, 8);
        let x = random_input(g.len(), 1);
        assert_eq!(sgd_step(&net, &x, &[2.0], 0.0).unwrap(), net);
    }

    #[test]
    fn sgd_single_sample_linear_step() {
        // Only the output bias is free: v = b, loss ½(b - t)², gradient b - t.
        let g = geo(1, 1, 1);
        let mut net = NetworkWeights::zeros(Architecture::Fc, g).unwrap();
        net.layers[3].bias[0] = 1.0;
        let next = sgd_step(&net, &[0.3], &[3.0], 0.1).unwrap();
        assert!((next.layers[3].bias[0] - (1.0 - 0.1 * (1.0 - 3.0))).abs() < 1e-15);
        // With one live path v = w·x the step is w - lr (w x - t) x.
        let mut lin = NetworkWeights::zeros(Architecture::Fc, g).unwrap();
        lin.layers[0].weights[0] = 1.0;
        lin.layers[1].weights[0] = 1.0;
        lin.layers[2].weights[0] = 1.0;
        lin.layers[3].weights[0] = 0.5;
        let x = 2.0;
        let next = sgd_step(&lin, &[x], &[4.0], 0.05).unwrap();
        let expected = 0.5 - 0.05 * (0.5 * x - 4.0) * x;
        assert!((next.layers[3].weights[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn sgd_descends_on_frozen_batch() {
        let g = geo(5, 5, 2);
        for arch in [Architecture::Fc, Architecture::Cnn] {
            let mut net = randomized(arch, g, 21);
            let n = 16;
            let xs = random_input(n * g.len(), 22).iter().map(|v| v.abs()).collect::<Vec<_>>();
            let targets = random_input(n, 23);
            let mut prev = f64::INFINITY;
            for _ in 0..100 {
                let (grad, l) = net.batch_gradient(&xs, &targets).unwrap();
                assert!(l <= prev + 1e-12, "{arch}: loss rose {prev} -> {l}");
                prev = l;
                net.apply_update(&grad, 0.01);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let net = randomized(Architecture::Fc, geo(3, 3, 1), 31);
        let xs = random_input(4 * geo(3, 3, 1).len(), 32);
        let (grad, _) = net.batch_gradient(&xs, &[1.0, -1.0, 2.0, 0.5]).unwrap();
        let mut stepped = net.clone();
        Adam::new(0.01).step(&mut stepped, &grad);
        for ((a, b), g) in net.layers.iter().zip(&stepped.layers).zip(&grad.layers) {
            for ((w0, w1), gw) in a.weights.iter().zip(&b.weights).zip(&g.weights) {
                let expected = -0.01 * gw / (gw.abs() + 1e-8 / 0.001f64.sqrt());
                assert!((w1 - w0 - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_descends_on_frozen_batch() {
        let g = geo(5, 5, 2);
        for arch in [Architecture::Fc, Architecture::Cnn] {
            let mut net = randomized(arch, g, 41);
            let xs = random_input(16 * g.len(), 42);
            let targets: Vec<f64> = random_input(16, 43).iter().map(|t| 50.0 * t).collect();
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, 0.0);
            let (_, first) = net.batch_gradient(&xs, &targets).unwrap();
            for _ in 0..300 {
                let (grad, _) = net.batch_gradient(&xs, &targets).unwrap();
                opt.step(&mut net, &grad);
            }
            let (_, last) = net.batch_gradient(&xs, &targets).unwrap();
            assert!(last < 0.5 * first, "{arch}: {first} -> {last}");
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let g = geo(1, 1, 1);
        let net = NetworkWeights::zeros(Architecture::Fc, g).unwrap();
        assert!(matches!(
            sgd_step(&net, &[1.0], &[f64::NAN], 0.1),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = geo(5, 5, 2);
        for arch in [Architecture::Fc, Architecture::Cnn] {
            let mut net = randomized(arch, g, 31);
            net.layers[0].weights[0] = 0.1 + 0.2;
            net.layers[0].weights[1] = 1e-300;
            net.training_meta = TrainingMeta { episodes: 12, seed: 99 };
            let path = dir.path().join(format!("{arch}.json"));
            net.save_checkpoint(&path).unwrap();
            let back = NetworkWeights::load_expecting(&path, arch).unwrap();
            assert_eq!(back, net);
            let x = random_input(g.len(), 32);
            assert_eq!(back.forward(&x).unwrap().to_bits(), net.forward(&x).unwrap().to_bits());
            let other = if arch == Architecture::Fc { Architecture::Cnn } else { Architecture::Fc };
            assert!(matches!(
                NetworkWeights::load_expecting(&path, other),
                Err(Error::Checkpoint(_))
            ));
            let text = std::fs::read_to_string(&path).unwrap();
            for key in ["\"architecture\"", "\"env_geometry\"", "\"layers\"", "\"training_meta\""] {
                assert!(text.contains(key));
            }
        }
    }

    #[test]
    fn malformed_checkpoints_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let net = randomized(Architecture::Fc, geo(3, 3, 1), 1);
        let path = dir.path().join("net.json");
        net.save_checkpoint(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated = dir.path().join("truncated.json");
        std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
        assert!(matches!(
            NetworkWeights::load_checkpoint(&truncated),
            Err(Error::Checkpoint(_))
        ));
        let mut short = net.clone();
        short.layers[1].weights.pop();
        let bad = dir.path().join("short.json");
        std::fs::write(&bad, serde_json::to_string(&short).unwrap()).unwrap();
        let err = NetworkWeights::load_checkpoint(&bad).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }
}

//! Lmser networks: a stack of tied (or untied) layers run as a folded
//! autoencoder whose paired neurons may fuse bottom-up and top-down signals.
//!
//! Perception runs on a tape. Pass 0 goes bottom-up with every top-down
//! signal at zero. Each reflection is a top-down pass followed by a
//! bottom-up pass. A final top-down pass emits the reconstruction through a
//! sigmoid. With neuron sharing a hidden neuron outputs `act(y + u)`;
//! without it the two streams keep separate activations. The top coding
//! layer is linear; when supervised, its first `n_classes` units are logits
//! and the next `style_units` carry style.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, DenseLayer, Layer, LayerVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpecs {
    /// Neuron counts from the input layer to the top coding layer.
    Dense { sizes: Vec<usize> },
    /// Input `[c, h, w]` followed by one conv layer per channel count.
    Conv {
        input: [usize; 3],
        channels: Vec<usize>,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

impl LayerSpecs {
    /// The MNIST conv stack: 3×3 kernels, stride 2, padding 1.
    pub fn mnist_conv(channels: Vec<usize>) -> Self {
        LayerSpecs::Conv {
            input: [1, 28, 28],
            channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmserConfig {
    pub layers: LayerSpecs,
    pub weight_sharing: bool,
    pub neuron_sharing: bool,
    pub supervised: bool,
    pub n_classes: usize,
    pub style_units: usize,
    pub reflections: usize,
    pub hidden_activation: Activation,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl LmserConfig {
    /// Fully shared, unsupervised, one reflection, ReLU.
    pub fn new(layers: LayerSpecs) -> Self {
        Self {
            layers,
            weight_sharing: true,
            neuron_sharing: true,
            supervised: false,
            n_classes: 10,
            style_units: 0,
            reflections: 1,
            hidden_activation: Activation::Relu,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    /// Range of top-code columns perturbed and swept as style.
    pub fn style_range(&self) -> Range<usize> {
        let start = if self.supervised { self.n_classes } else { 0 };
        start..start + self.style_units
    }
}

/// The variant grid compared in the experiments, plus the plain
/// feedforward classifier used as the attack baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ae,
    LmserUnN,
    LmserUn,
    LmserSup,
    Fcn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ae,
        Variant::LmserUnN,
        Variant::LmserUn,
        Variant::LmserSup,
        Variant::Fcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ae => "ae",
            Variant::LmserUnN => "lmser-un-n",
            Variant::LmserUn => "lmser-un",
            Variant::LmserSup => "lmser-sup",
            Variant::Fcn => "fcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Config for this variant over `layers`.
    pub fn config(self, layers: LayerSpecs) -> LmserConfig {
        let mut cfg = LmserConfig::new(layers);
        match self {
            Variant::Ae => {
                cfg.weight_sharing = false;
                cfg.neuron_sharing = false;
            }
            Variant::LmserUnN => cfg.neuron_sharing = false,
            Variant::LmserUn => {}
            Variant::LmserSup => cfg.supervised = true,
            Variant::Fcn => {
                cfg.weight_sharing = false;
                cfg.neuron_sharing = false;
                cfg.supervised = true;
                cfg.reflections = 0;
            }
        }
        cfg
    }

    /// Weight of the reconstruction term in the training objective.
    pub fn recon_weight(self) -> f32 {
        if self == Variant::Fcn {
            0.0
        } else {
            1.0
        }
    }
}

/// One read of a paired-neuron activation during perception.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZRead {
    /// Pass doing the read (0 = first bottom-up, odd = top-down).
    pub pass: usize,
    /// Hidden layer index, 0-based from the first hidden layer.
    pub layer: usize,
    /// Pass that last wrote the value read.
    pub written_in: usize,
}

/// Perception results as tape handles. Per-layer vectors are indexed from the
/// first hidden layer (`0`) to the top coding layer (`len - 1`).
#[derive(Clone, Debug)]
pub struct TapedState {
    pub batch: usize,
    pub y: Vec<Var>,
    pub u: Vec<Option<Var>>,
    pub z: Vec<Var>,
    /// Activations of the top-down stream; equal to `z` under neuron sharing.
    pub z_down: Vec<Var>,
    /// Top code flattened to `[batch × width]`.
    pub top_code: Var,
    pub reconstruction: Var,
    pub logits: Option<Var>,
    pub style_code: Option<Var>,
    pub reads: Vec<ZRead>,
}

/// Perception results as values.
#[derive(Clone, Debug)]
pub struct LmserState {
    pub y: Vec<Tensor>,
    pub u: Vec<Option<Tensor>>,
    pub z: Vec<Tensor>,
    pub z_down: Vec<Tensor>,
    pub top_code: Tensor,
    pub reconstruction: Tensor,
    pub logits: Option<Tensor>,
    pub style_code: Option<Tensor>,
    pub reads: Vec<ZRead>,
}

impl LmserState {
    fn from_tape(tape: &Tape, s: &TapedState) -> Self {
        let v = |x: Var| tape.value(x).clone();
        Self {
            y: s.y.iter().map(|&x| v(x)).collect(),
            u: s.u.iter().map(|x| x.map(v)).collect(),
            z: s.z.iter().map(|&x| v(x)).collect(),
            z_down: s.z_down.iter().map(|&x| v(x)).collect(),
            top_code: v(s.top_code),
            reconstruction: v(s.reconstruction),
            logits: s.logits.map(v),
            style_code: s.style_code.map(v),
            reads: s.reads.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lmser {
    config: LmserConfig,
    layers: Vec<Layer>,
    /// Per-sample input shape, batch excluded.
    input_shape: Vec<usize>,
    /// Per-sample output shape of every layer, batch excluded.
    hidden_shapes: Vec<Vec<usize>>,
}

fn layer_shapes(specs: &LayerSpecs) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    match specs {
        LayerSpecs::Dense { sizes } => {
            if sizes.len() < 2 || sizes.contains(&0) {
                return Err(Error::Config(format!(
                    "dense stack needs at least two positive sizes, got {sizes:?}"
                )));
            }
            Ok((vec![sizes[0]], sizes[1..].iter().map(|&n| vec![n]).collect()))
        }
        LayerSpecs::Conv {
            input,
            channels,
            kernel,
            stride,
            padding,
        } => {
            if channels.is_empty() || channels.contains(&0) || input.contains(&0) {
                return Err(Error::Config(format!(
                    "conv stack needs positive channels and input, got {channels:?} on {input:?}"
                )));
            }
            let mut shapes = Vec::with_capacity(channels.len());
            let (mut h, mut w) = (input[1], input[2]);
            for &c in channels {
                h = crate::tensor::conv_output_size(h, *kernel, *stride, *padding)?;
                w = crate::tensor::conv_output_size(w, *kernel, *stride, *padding)?;
                shapes.push(vec![c, h, w]);
            }
            Ok((input.to_vec(), shapes))
        }
    }
}

fn validate(config: &LmserConfig, hidden: &[Vec<usize>]) -> Result<()> {
    let top: usize = hidden.last().map(|s| s.iter().product()).unwrap_or(0);
    if config.supervised && (config.n_classes == 0 || top < config.n_classes + config.style_units) {
        return Err(Error::Config(format!(
            "top width {top} cannot hold {} classes and {} style units",
            config.n_classes, config.style_units
        )));
    }
    if !config.supervised && config.style_units > top {
        return Err(Error::Config(format!(
            "top width {top} cannot hold {} style units",
            config.style_units
        )));
    }
    Ok(())
}

impl Lmser {
    /// Fresh network with Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(config: LmserConfig, rng: &mut R) -> Result<Self> {
        let (input_shape, hidden_shapes) = layer_shapes(&config.layers)?;
        validate(&config, &hidden_shapes)?;
        let tied = config.weight_sharing;
        let layers = match &config.layers {
            LayerSpecs::Dense { sizes } => sizes
                .windows(2)
                .map(|p| Layer::Dense(DenseLayer::glorot(p[0], p[1], tied, rng)))
                .collect(),
            LayerSpecs::Conv {
                input,
                channels,
                kernel,
                stride,
                padding,
            } => std::iter::once(input[0])
                .chain(channels.iter().copied())
                .collect::<Vec<_>>()
                .windows(2)
                .map(|p| Layer::Conv(ConvLayer::glorot(p[0], p[1], *kernel, *stride, *padding, tied, rng)))
                .collect(),
        };
        Ok(Self {
            config,
            layers,
            input_shape,
            hidden_shapes,
        })
    }

    /// Network from explicit layers, checked against `config`.
    pub fn from_layers(config: LmserConfig, layers: Vec<Layer>) -> Result<Self> {
        let (input_shape, hidden_shapes) = layer_shapes(&config.layers)?;
        validate(&config, &hidden_shapes)?;
        if layers.len() != hidden_shapes.len() {
            return Err(Error::Config(format!(
                "{} layers given for {} specified",
                layers.len(),
                hidden_shapes.len()
            )));
        }
        let mut fan_in = input_shape.clone();
        for (layer, out) in layers.iter().zip(&hidden_shapes) {
            let ok = match (layer, &config.layers) {
                (Layer::Dense(l), LayerSpecs::Dense { .. }) => [l.n_in()] == fan_in[..] && [l.n_out()] == out[..],
                (Layer::Conv(l), LayerSpecs::Conv { kernel, stride, padding, .. }) => {
                    l.in_channels() == fan_in[0]
                        && l.out_channels() == out[0]
                        && l.k.shape()[2..] == [*kernel, *kernel]
                        && l.stride == *stride
                        && l.padding == *padding
                }
                _ => false,
            };
            if !ok || layer.is_tied() != config.weight_sharing {
                return Err(Error::Config(format!(
                    "layer does not match spec {:?} -> {out:?} (weight_sharing={})",
                    fan_in, config.weight_sharing
                )));
            }
            fan_in = out.clone();
        }
        Ok(Self {
            config,
            layers,
            input_shape,
            hidden_shapes,
        })
    }

    pub fn config(&self) -> &LmserConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn top_width(&self) -> usize {
        self.hidden_shapes.last().map(|s| s.iter().product()).unwrap_or(0)
    }

    pub fn set_reflections(&mut self, k: usize) {
        self.config.reflections = k;
    }

    /// Parameter name prefix of layer `i` (0-based).
    pub fn layer_prefix(i: usize) -> String {
        format!("l{}", i + 1)
    }

    /// Every parameter buffer in the fixed checkpoint/update order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let prefix = Self::layer_prefix(i);
                l.params()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                let prefix = Self::layer_prefix(i);
                l.params_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.bind(tape, &Self::layer_prefix(i)))
            .collect()
    }

    /// Splits an input shape into `(batch, batched)`.
    fn batch_of(&self, shape: &[usize]) -> Result<(usize, bool)> {
        let n = self.input_len();
        if shape == self.input_shape.as_slice() || (shape.len() == 1 && shape[0] == n) {
            return Ok((1, false));
        }
        match shape.split_first() {
            Some((&b, rest)) if rest.iter().product::<usize>() == n && !rest.is_empty() => Ok((b, true)),
            _ => Err(Error::dim("lmser input", shape, &self.input_shape)),
        }
    }

    fn batched_shape(&self, batch: usize, per_sample: &[usize]) -> Vec<usize> {
        std::iter::once(batch).chain(per_sample.iter().copied()).collect()
    }

    fn activate(&self, tape: &mut Tape, v: Var) -> Var {
        match self.config.hidden_activation {
            Activation::Relu => tape.relu(v),
            Activation::Sigmoid => tape.sigmoid(v),
        }
    }

    /// Runs perception with `k` reflections on the tape. `x` is one sample or
    /// a batch; the reconstruction has `x`'s shape. `style_noise`, when
    /// given, is added to the flattened top code before the final top-down
    /// pass.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[LayerVars],
        x: Var,
        k: usize,
        style_noise: Option<&Tensor>,
    ) -> Result<TapedState> {
        let x_shape = tape.value(x).shape().to_vec();
        let (batch, _) = self.batch_of(&x_shape)?;
        let input = tape.reshape(x, self.batched_shape(batch, &self.input_shape))?;
        let depth = self.layers.len();
        let top = depth - 1;
        let sharing = self.config.neuron_sharing;

        let mut reads = Vec::new();
        let mut version = vec![0usize; depth];
        let mut y: Vec<Var> = Vec::with_capacity(depth);
        let mut z: Vec<Var> = Vec::with_capacity(depth);
        let mut u: Vec<Option<Var>> = vec![None; depth];
        let mut pass = 0;

        // Pass 0: bottom-up with zero top-down signals.
        let mut h = input;
        for i in 0..depth {
            if i > 0 {
                reads.push(ZRead { pass, layer: i - 1, written_in: version[i - 1] });
            }
            let yi = self.layers[i].up_on(tape, &vars[i], h)?;
            let zi = if i == top { yi } else { self.activate(tape, yi) };
            y.push(yi);
            z.push(zi);
            version[i] = pass;
            h = zi;
        }

        // Without neuron sharing the two streams never meet, so every
        // reflection would reproduce pass 0 exactly.
        let reflections = if sharing { k } else { 0 };
        let mut z_down = z.clone();
        for r in 0..=reflections {
            pass += 1;
            let mut code = z[top];
            if r == reflections {
                if let Some(noise) = style_noise {
                    code = self.add_top_noise(tape, code, noise)?;
                }
            }
            reads.push(ZRead { pass, layer: top, written_in: version[top] });
            let mut h = code;
            for i in (0..top).rev() {
                if i + 1 < top {
                    reads.push(ZRead { pass, layer: i + 1, written_in: version[i + 1] });
                }
                let target = self.batched_shape(batch, &self.hidden_shapes[i]);
                let ui = self.layers[i + 1].down_on(tape, &vars[i + 1], h, &target)?;
                let zi = if sharing {
                    let fused = tape.add(y[i], ui)?;
                    self.activate(tape, fused)
                } else {
                    self.activate(tape, ui)
                };
                u[i] = Some(ui);
                z_down[i] = zi;
                if sharing {
                    z[i] = zi;
                }
                version[i] = pass;
                h = zi;
            }
            z_down[top] = code;
            if r == reflections {
                if top > 0 {
                    reads.push(ZRead { pass, layer: 0, written_in: version[0] });
                }
                let recon_pre = self.layers[0].down_on(
                    tape,
                    &vars[0],
                    h,
                    &self.batched_shape(batch, &self.input_shape),
                )?;
                let recon = tape.sigmoid(recon_pre);
                let reconstruction = tape.reshape(recon, x_shape.clone())?;
                let (top_code, logits, style_code) = self.split_top(tape, z[top], batch)?;
                return Ok(TapedState {
                    batch,
                    y,
                    u,
                    z,
                    z_down,
                    top_code,
                    reconstruction,
                    logits,
                    style_code,
                    reads,
                });
            }

            // Bottom-up pass fusing the fresh top-down signals.
            pass += 1;
            let mut h = input;
            for i in 0..depth {
                if i > 0 {
                    reads.push(ZRead { pass, layer: i - 1, written_in: version[i - 1] });
                }
                let yi = self.layers[i].up_on(tape, &vars[i], h)?;
                let zi = match u[i] {
                    Some(ui) if i != top => {
                        let fused = tape.add(yi, ui)?;
                        self.activate(tape, fused)
                    }
                    _ if i == top => yi,
                    _ => self.activate(tape, yi),
                };
                y[i] = yi;
                z[i] = zi;
                version[i] = pass;
                h = zi;
            }
        }
        unreachable!("the final top-down pass returns")
    }

    fn add_top_noise(&self, tape: &mut Tape, code: Var, noise: &Tensor) -> Result<Var> {
        let shape = tape.value(code).shape().to_vec();
        let noise = noise.reshape(shape)?;
        let nv = tape.leaf(noise);
        tape.add(code, nv)
    }

    fn split_top(&self, tape: &mut Tape, top: Var, batch: usize) -> Result<(Var, Option<Var>, Option<Var>)> {
        let flat = tape.reshape(top, vec![batch, self.top_width()])?;
        let logits = if self.config.supervised {
            Some(tape.slice_cols(flat, 0, self.config.n_classes)?)
        } else {
            None
        };
        let style = self.config.style_range();
        let style_code = if style.is_empty() {
            None
        } else {
            Some(tape.slice_cols(flat, style.start, style.len())?)
        };
        Ok((flat, logits, style_code))
    }

    /// Perception with `k` reflections, evaluated eagerly.
    pub fn forward(&self, x: &Tensor, k: usize) -> Result<LmserState> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let state = self.forward_on(&mut tape, &vars, xv, k, None)?;
        Ok(LmserState::from_tape(&tape, &state))
    }

    /// Pure top-down pass from a top code (`[width]` or `[batch × width]`):
    /// every hidden neuron outputs `act(u)`. Returns `[batch, ..input_shape]`
    /// (or one sample for an unbatched code).
    pub fn decode_on(&self, tape: &mut Tape, vars: &[LayerVars], code: Var) -> Result<Var> {
        let shape = tape.value(code).shape().to_vec();
        let width = self.top_width();
        let batch = match shape[..] {
            [w] if w == width => 1,
            [b, w] if w == width => b,
            _ => return Err(Error::dim("decode", &shape, &[width])),
        };
        let top = self.layers.len() - 1;
        let mut h = tape.reshape(code, self.batched_shape(batch, &self.hidden_shapes[top]))?;
        for i in (0..top).rev() {
            let target = self.batched_shape(batch, &self.hidden_shapes[i]);
            let ui = self.layers[i + 1].down_on(tape, &vars[i + 1], h, &target)?;
            h = self.activate(tape, ui);
        }
        let pre = self.layers[0].down_on(tape, &vars[0], h, &self.batched_shape(batch, &self.input_shape))?;
        let out = tape.sigmoid(pre);
        if shape.len() == 1 {
            tape.reshape(out, self.input_shape.clone())
        } else {
            Ok(out)
        }
    }

    pub fn decode(&self, code: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let cv = tape.leaf(code.clone());
        let out = self.decode_on(&mut tape, &vars, cv)?;
        Ok(tape.value(out).clone())
    }

    /// Argmax labels of the logits after `k` reflections.
    pub fn classify(&self, x: &Tensor, k: usize) -> Result<Vec<usize>> {
        if !self.config.supervised {
            return Err(Error::Capability("classify needs a supervised network".into()));
        }
        let state = self.forward(x, k)?;
        let logits = state.logits.expect("supervised networks emit logits");
        Ok(argmax_rows(&logits))
    }

    /// Zero-mean Gaussian noise of standard deviation `sigma` on the style
    /// columns of a flattened `[batch × width]` top code, zeros elsewhere.
    pub fn style_noise<R: Rng + ?Sized>(&self, batch: usize, sigma: f32, rng: &mut R) -> Result<Option<Tensor>> {
        let style = self.config.style_range();
        if style.is_empty() {
            return Ok(None);
        }
        let normal = Normal::new(0.0f32, sigma)
            .map_err(|e| Error::Config(format!("style noise sigma {sigma}: {e}")))?;
        let width = self.top_width();
        let mut noise = Tensor::zeros(vec![batch, width]);
        let data = noise.data_mut();
        for b in 0..batch {
            for c in style.clone() {
                data[b * width + c] = normal.sample(rng);
            }
        }
        Ok(Some(noise))
    }

    /// Perturbs the style units of `top_code` (`[batch × width]`); a no-op
    /// when the network has no style units.
    pub fn inject_style_noise<R: Rng + ?Sized>(&self, top_code: &Tensor, sigma: f32, rng: &mut R) -> Result<Tensor> {
        let batch = match *top_code.shape() {
            [b, w] if w == self.top_width() => b,
            _ => return Err(Error::dim("inject_style_noise", top_code.shape(), &[self.top_width()])),
        };
        match self.style_noise(batch, sigma, rng)? {
            Some(noise) if sigma != 0.0 => top_code.add(&noise),
            _ => Ok(top_code.clone()),
        }
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits.data().chunks(classes).map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn dense_cfg(sizes: &[usize]) -> LmserConfig {
        LmserConfig::new(LayerSpecs::Dense { sizes: sizes.to_vec() })
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
    }

    #[test]
    fn zero_network_reconstructs_one_half() {
        let mut net = Lmser::new(dense_cfg(&[6, 4, 3]), &mut rng(1)).unwrap();
        for (_, p) in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::uniform(vec![2, 6], 0.0, 1.0, &mut rng(2));
        let s = net.forward(&x, 1).unwrap();
        assert!(s.reconstruction.data().iter().all(|&v| v == 0.5));
        let img = net.decode(&Tensor::zeros(vec![3])).unwrap();
        assert_eq!(img.shape(), &[6]);
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn supervised_head_splits_top_code() {
        let mut cfg = dense_cfg(&[8, 6, 5]);
        cfg.supervised = true;
        cfg.n_classes = 3;
        cfg.style_units = 2;
        let net = Lmser::new(cfg, &mut rng(3)).unwrap();
        let x = Tensor::uniform(vec![4, 8], 0.0, 1.0, &mut rng(4));
        let s = net.forward(&x, 1).unwrap();
        let logits = s.logits.unwrap();
        let style = s.style_code.unwrap();
        assert_eq!(logits.shape(), &[4, 3]);
        assert_eq!(style.shape(), &[4, 2]);
        for b in 0..4 {
            let joined: Vec<f32> = logits.data()[b * 3..b * 3 + 3]
                .iter()
                .chain(&style.data()[b * 2..b * 2 + 2])
                .copied()
                .collect();
            assert_eq!(joined, s.top_code.data()[b * 5..b * 5 + 5]);
        }
    }

    #[test]
    fn supervised_top_must_fit_classes() {
        let mut cfg = dense_cfg(&[8, 6, 5]);
        cfg.supervised = true;
        cfg.n_classes = 4;
        cfg.style_units = 2;
        assert!(matches!(Lmser::new(cfg, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn classify_requires_supervision() {
        let net = Lmser::new(dense_cfg(&[4, 3]), &mut rng(5)).unwrap();
        assert!(matches!(
            net.classify(&Tensor::zeros(vec![4]), 1),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn hidden_activations_respect_ranges() {
        for act in [Activation::Relu, Activation::Sigmoid] {
            let mut cfg = dense_cfg(&[10, 7, 5, 3]);
            cfg.hidden_activation = act;
            let net = Lmser::new(cfg, &mut rng(6)).unwrap();
            let x = Tensor::uniform(vec![3, 10], 0.0, 1.0, &mut rng(7));
            let s = net.forward(&x, 2).unwrap();
            for zi in &s.z[..s.z.len() - 1] {
                match act {
                    Activation::Relu => assert!(zi.data().iter().all(|&v| v >= 0.0)),
                    Activation::Sigmoid => assert!(zi.data().iter().all(|&v| v > 0.0 && v < 1.0)),
                }
            }
            assert!(s.reconstruction.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn no_stale_reads_across_reflections() {
        let net = Lmser::new(dense_cfg(&[9, 7, 5, 4]), &mut rng(8)).unwrap();
        let x = Tensor::uniform(vec![2, 9], 0.0, 1.0, &mut rng(9));
        for k in 0..4 {
            let s = net.forward(&x, k).unwrap();
            let top = s.z.len() - 1;
            for r in &s.reads {
                let top_down = r.pass % 2 == 1;
                let expected = if top_down && r.layer == top { r.pass - 1 } else { r.pass };
                assert_eq!(r.written_in, expected, "k={k} {r:?}");
            }
            // one bottom-up plus 2k+1 further passes
            assert_eq!(s.reads.iter().map(|r| r.pass).max(), Some(2 * k + 1));
        }
    }

    #[test]
    fn input_shape_errors() {
        let net = Lmser::new(dense_cfg(&[6, 4]), &mut rng(10)).unwrap();
        assert!(matches!(net.forward(&Tensor::zeros(vec![2, 5]), 0), Err(Error::Dimension { .. })));
        assert!(matches!(net.decode(&Tensor::zeros(vec![5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn style_noise_is_seeded_and_zero_sigma_is_identity() {
        let mut cfg = dense_cfg(&[8, 6, 5]);
        cfg.supervised = true;
        cfg.n_classes = 3;
        cfg.style_units = 2;
        let net = Lmser::new(cfg, &mut rng(11)).unwrap();
        let code = Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut rng(12));
        assert_eq!(net.inject_style_noise(&code, 0.0, &mut rng(13)).unwrap(), code);
        let a = net.inject_style_noise(&code, 0.5, &mut rng(14)).unwrap();
        let b = net.inject_style_noise(&code, 0.5, &mut rng(14)).unwrap();
        assert_eq!(a, b);
        for r in 0..4 {
            assert_eq!(a.data()[r * 5..r * 5 + 3], code.data()[r * 5..r * 5 + 3]);
            assert_ne!(a.data()[r * 5 + 3..r * 5 + 5], code.data()[r * 5 + 3..r * 5 + 5]);
        }
        let plain = Lmser::new(dense_cfg(&[8, 6, 5]), &mut rng(11)).unwrap();
        assert_eq!(plain.inject_style_noise(&code, 0.5, &mut rng(1)).unwrap(), code);
    }

    #[test]
    fn variants_parse_and_configure() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("vae"), None);
        let specs = LayerSpecs::Dense { sizes: vec![4, 3] };
        let ae = Variant::Ae.config(specs.clone());
        assert!(!ae.weight_sharing && !ae.neuron_sharing && !ae.supervised);
        let un_n = Variant::LmserUnN.config(specs.clone());
        assert!(un_n.weight_sharing && !un_n.neuron_sharing);
        assert!(Variant::LmserSup.config(specs).supervised);
    }

    #[test]
    fn conv_stack_has_mnist_geometry() {
        let cfg = LmserConfig::new(LayerSpecs::mnist_conv(vec![16, 32, 64, 64]));
        let net = Lmser::new(cfg, &mut rng(15)).unwrap();
        assert_eq!(net.top_width(), 64 * 2 * 2);
        let x = Tensor::uniform(vec![2, 1, 28, 28], 0.0, 1.0, &mut rng(16));
        let s = net.forward(&x, 1).unwrap();
        let spatial: Vec<_> = s.z.iter().map(|z| z.shape()[2]).collect();
        assert_eq!(spatial, vec![14, 7, 4, 2]);
        assert_eq!(s.reconstruction.shape(), x.shape());
    }
}

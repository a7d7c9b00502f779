//! Layers whose bottom-up and top-down passes share one weight buffer.
//!
//! A tied dense layer maps `x ↦ W x + b_up` upward and `z ↦ Wᵀ z + b_down`
//! downward; a tied conv layer uses `conv2d` upward and the adjoint
//! `conv2d_transpose` downward with the same kernel. Untied layers carry a
//! separate downward buffer that is trained independently. Biases are always
//! per direction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, Tape, Tensor, Var};

fn glorot<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w: Var,
    pub w_down: Option<Var>,
    pub b_up: Var,
    pub b_down: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[n_out × n_in]`
    pub w: Tensor,
    pub b_up: Tensor,
    pub b_down: Tensor,
    /// `[n_in × n_out]`, present only when untied.
    pub w_down: Option<Tensor>,
}

impl DenseLayer {
    pub fn new(w: Tensor, b_up: Tensor, b_down: Tensor, w_down: Option<Tensor>) -> Result<Self> {
        let [n_out, n_in] = w.dims2("DenseLayer")?;
        if b_up.shape() != [n_out] {
            return Err(Error::dim("DenseLayer b_up", w.shape(), b_up.shape()));
        }
        if b_down.shape() != [n_in] {
            return Err(Error::dim("DenseLayer b_down", w.shape(), b_down.shape()));
        }
        if let Some(wd) = &w_down {
            if wd.shape() != [n_in, n_out] {
                return Err(Error::dim("DenseLayer w_down", w.shape(), wd.shape()));
            }
        }
        Ok(Self {
            w,
            b_up,
            b_down,
            w_down,
        })
    }

    /// Glorot-uniform weights, zero biases. An untied layer draws its
    /// downward weights independently.
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, n_out: usize, tied: bool, rng: &mut R) -> Self {
        let w = glorot(vec![n_out, n_in], n_in, n_out, rng);
        let w_down = (!tied).then(|| glorot(vec![n_in, n_out], n_out, n_in, rng));
        Self {
            w,
            b_up: Tensor::zeros(vec![n_out]),
            b_down: Tensor::zeros(vec![n_in]),
            w_down,
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn is_tied(&self) -> bool {
        self.w_down.is_none()
    }

    /// Gives the layer its own downward weights, initialized to `Wᵀ`.
    pub fn untie(&mut self) {
        if self.w_down.is_none() {
            self.w_down = Some(self.w.transpose().expect("rank-2 weight"));
        }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> LayerVars {
        LayerVars {
            w: tape.param(format!("{prefix}.w"), self.w.clone()),
            w_down: self
                .w_down
                .as_ref()
                .map(|wd| tape.param(format!("{prefix}.w_down"), wd.clone())),
            b_up: tape.param(format!("{prefix}.b_up"), self.b_up.clone()),
            b_down: tape.param(format!("{prefix}.b_down"), self.b_down.clone()),
        }
    }

    /// `x[b×n_in] ↦ x Wᵀ + b_up`
    pub fn up_on(&self, tape: &mut Tape, vars: &LayerVars, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, false, vars.w, true)?;
        tape.add_bias(y, vars.b_up)
    }

    /// `z[b×n_out] ↦ z W + b_down` (tied) or `z W_downᵀ + b_down` (untied)
    pub fn down_on(&self, tape: &mut Tape, vars: &LayerVars, z: Var) -> Result<Var> {
        let x = match vars.w_down {
            None => tape.matmul(z, vars.w)?,
            Some(wd) => tape.matmul_t(z, false, wd, true)?,
        };
        tape.add_bias(x, vars.b_down)
    }

    /// Bottom-up pre-activation for `[n_in]` or `[batch×n_in]` input.
    pub fn up(&self, x: &Tensor) -> Result<Tensor> {
        self.eager(x, self.n_in(), true)
    }

    /// Top-down pre-activation for `[n_out]` or `[batch×n_out]` input.
    pub fn down(&self, z: &Tensor) -> Result<Tensor> {
        self.eager(z, self.n_out(), false)
    }

    fn eager(&self, input: &Tensor, width: usize, upward: bool) -> Result<Tensor> {
        let (batch, single) = match *input.shape() {
            [n] if n == width => (1, true),
            [b, n] if n == width => (b, false),
            _ => {
                let op = if upward { "dense_up" } else { "dense_down" };
                return Err(Error::dim(op, input.shape(), &[width]));
            }
        };
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, "layer");
        let x = tape.leaf(input.reshape(vec![batch, width])?);
        let out = if upward {
            self.up_on(&mut tape, &vars, x)?
        } else {
            self.down_on(&mut tape, &vars, x)?
        };
        let out = tape.value(out).clone();
        if single {
            let n = out.len();
            out.reshape(vec![n])
        } else {
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[c_out × c_in × kh × kw]`
    pub k: Tensor,
    pub b_up: Tensor,
    pub b_down: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub k_down: Option<Tensor>,
}

impl ConvLayer {
    pub fn new(
        k: Tensor,
        b_up: Tensor,
        b_down: Tensor,
        stride: usize,
        padding: usize,
        k_down: Option<Tensor>,
    ) -> Result<Self> {
        let (c_out, c_in) = match *k.shape() {
            [co, ci, _, _] => (co, ci),
            _ => return Err(Error::dim("ConvLayer", k.shape(), &[0, 0, 0, 0])),
        };
        if stride == 0 {
            return Err(Error::Config("conv stride must be at least 1".into()));
        }
        if b_up.shape() != [c_out] || b_down.shape() != [c_in] {
            return Err(Error::dim("ConvLayer biases", b_up.shape(), b_down.shape()));
        }
        if let Some(kd) = &k_down {
            if kd.shape() != k.shape() {
                return Err(Error::dim("ConvLayer k_down", k.shape(), kd.shape()));
            }
        }
        Ok(Self {
            k,
            b_up,
            b_down,
            stride,
            padding,
            k_down,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn glorot<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        tied: bool,
        rng: &mut R,
    ) -> Self {
        let area = kernel * kernel;
        let shape = vec![c_out, c_in, kernel, kernel];
        let k = glorot(shape.clone(), c_in * area, c_out * area, rng);
        let k_down = (!tied).then(|| glorot(shape, c_out * area, c_in * area, rng));
        Self {
            k,
            b_up: Tensor::zeros(vec![c_out]),
            b_down: Tensor::zeros(vec![c_in]),
            stride,
            padding,
            k_down,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn is_tied(&self) -> bool {
        self.k_down.is_none()
    }

    pub fn untie(&mut self) {
        if self.k_down.is_none() {
            self.k_down = Some(self.k.clone());
        }
    }

    /// Output spatial size for an `(h, w)` input.
    pub fn output_hw(&self, hw: (usize, usize)) -> Result<(usize, usize)> {
        let (kh, kw) = (self.k.shape()[2], self.k.shape()[3]);
        Ok((
            conv_output_size(hw.0, kh, self.stride, self.padding)?,
            conv_output_size(hw.1, kw, self.stride, self.padding)?,
        ))
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> LayerVars {
        LayerVars {
            w: tape.param(format!("{prefix}.w"), self.k.clone()),
            w_down: self
                .k_down
                .as_ref()
                .map(|kd| tape.param(format!("{prefix}.w_down"), kd.clone())),
            b_up: tape.param(format!("{prefix}.b_up"), self.b_up.clone()),
            b_down: tape.param(format!("{prefix}.b_down"), self.b_down.clone()),
        }
    }

    pub fn up_on(&self, tape: &mut Tape, vars: &LayerVars, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, vars.w, self.stride, self.padding)?;
        tape.add_bias(y, vars.b_up)
    }

    pub fn down_on(&self, tape: &mut Tape, vars: &LayerVars, z: Var, target_hw: (usize, usize)) -> Result<Var> {
        let k = vars.w_down.unwrap_or(vars.w);
        let x = tape.conv2d_transpose(z, k, self.stride, self.padding, Some(target_hw))?;
        tape.add_bias(x, vars.b_down)
    }

    pub fn up(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, "layer");
        let xv = tape.leaf(x.clone());
        let out = self.up_on(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn down(&self, z: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, "layer");
        let zv = tape.leaf(z.clone());
        let out = self.down_on(&mut tape, &vars, zv, target_hw)?;
        Ok(tape.value(out).clone())
    }
}

/// One weight layer of an Lmser stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
}

impl Layer {
    pub fn is_tied(&self) -> bool {
        match self {
            Layer::Dense(l) => l.is_tied(),
            Layer::Conv(l) => l.is_tied(),
        }
    }

    pub fn untie(&mut self) {
        match self {
            Layer::Dense(l) => l.untie(),
            Layer::Conv(l) => l.untie(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> LayerVars {
        match self {
            Layer::Dense(l) => l.bind(tape, prefix),
            Layer::Conv(l) => l.bind(tape, prefix),
        }
    }

    pub fn up_on(&self, tape: &mut Tape, vars: &LayerVars, x: Var) -> Result<Var> {
        match self {
            Layer::Dense(l) => l.up_on(tape, vars, x),
            Layer::Conv(l) => l.up_on(tape, vars, x),
        }
    }

    /// Top-down pass producing a tensor shaped `target` (batch included).
    pub fn down_on(&self, tape: &mut Tape, vars: &LayerVars, z: Var, target: &[usize]) -> Result<Var> {
        match self {
            Layer::Dense(l) => l.down_on(tape, vars, z),
            Layer::Conv(l) => match *target {
                [_, _, h, w] => l.down_on(tape, vars, z, (h, w)),
                _ => Err(Error::dim("conv_down target", target, &[0, 0, 0, 0])),
            },
        }
    }

    /// Parameters in checkpoint order: `w`, `w_down`, `b_up`, `b_down`.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let (w, wd, bu, bd) = match self {
            Layer::Dense(l) => (&l.w, l.w_down.as_ref(), &l.b_up, &l.b_down),
            Layer::Conv(l) => (&l.k, l.k_down.as_ref(), &l.b_up, &l.b_down),
        };
        let mut out = vec![("w", w)];
        if let Some(wd) = wd {
            out.push(("w_down", wd));
        }
        out.push(("b_up", bu));
        out.push(("b_down", bd));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let (w, wd, bu, bd) = match self {
            Layer::Dense(l) => (&mut l.w, l.w_down.as_mut(), &mut l.b_up, &mut l.b_down),
            Layer::Conv(l) => (&mut l.k, l.k_down.as_mut(), &mut l.b_up, &mut l.b_down),
        };
        let mut out = vec![("w", w)];
        if let Some(wd) = wd {
            out.push(("w_down", wd));
        }
        out.push(("b_up", bu));
        out.push(("b_down", bd));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

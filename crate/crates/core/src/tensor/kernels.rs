use super::Tensor;
use crate::error::{Error, Result};

/// `C[m×n] = op(A)[m×k] · op(B)[k×n]` (plus `C` when `accumulate`).
///
/// `A` is stored row-major as `[m×k]`, or as `[k×m]` when `ta`; likewise `B`
/// is `[k×n]`, or `[n×k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the row-major buffers whose
    // lengths were checked against m, k and n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| flush_subnormal(sigmoid_scalar(v)))
}

/// Replaces subnormal values with zero. Saturated sigmoids otherwise feed
/// subnormals into gemm, which runs many times slower on them.
#[inline]
pub fn flush_subnormal(v: f32) -> f32 {
    if v.is_subnormal() {
        0.0
    } else {
        v
    }
}

/// Mean over all elements of `(a - b)^2`.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", a.shape(), b.shape()));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sum / a.len() as f64) as f32)
}

/// Splits `logits` into `(rows, classes)`; a rank-1 tensor is one row.
pub(crate) fn logit_rows(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (rows, classes) = match logits.shape() {
        [c] => (1, *c),
        [b, c] => (*b, *c),
        s => return Err(Error::dim("softmax_cross_entropy", s, &[labels.len(), 0])),
    };
    if labels.len() != rows {
        return Err(Error::dim(
            "softmax_cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index {
            index: bad,
            bound: classes,
        });
    }
    Ok((rows, classes))
}

/// Row-wise softmax probabilities and the per-row negative log-likelihood.
pub(crate) fn softmax_rows(logits: &[f32], classes: usize, labels: &[usize]) -> (Vec<f32>, Vec<f64>) {
    let mut probs = vec![0.0f32; logits.len()];
    let mut nll = Vec::with_capacity(labels.len());
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
            *p = ((v as f64 - log_z).exp()) as f32;
        }
        nll.push(log_z - row[label] as f64);
    }
    (probs, nll)
}

/// Mean softmax cross-entropy of `logits` (`[classes]` or `[batch×classes]`)
/// against integer `labels`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (rows, classes) = logit_rows(logits, labels)?;
    let (_, nll) = softmax_rows(logits.data(), classes, labels);
    Ok((nll.iter().sum::<f64>() / rows as f64) as f32)
}

/// `floor((input + 2·padding − kernel) / stride) + 1`, rejecting geometries
/// with no valid output position.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be at least 1".into()));
    }
    if kernel == 0 || input + 2 * padding < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Spatial bookkeeping shared by the convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Geometry of `conv2d(input[c×h×w], kernel)`.
    pub fn forward(input: [usize; 3], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [co, ci, kh, kw] = kernel4(kernel)?;
        let [c, h, w] = input;
        if c != ci {
            return Err(Error::dim("conv2d", &input, kernel));
        }
        Ok(Self {
            in_channels: ci,
            out_channels: co,
            kh,
            kw,
            stride,
            padding,
            h,
            w,
            oh: conv_output_size(h, kh, stride, padding)?,
            ow: conv_output_size(w, kw, stride, padding)?,
        })
    }

    /// Geometry of the convolution whose output is `output[c_out×oh×ow]`.
    /// With stride 1 the input size is unique; otherwise `target` must name it.
    pub fn from_output(
        output: [usize; 3],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        target: Option<(usize, usize)>,
    ) -> Result<Self> {
        let [co, ci, kh, kw] = kernel4(kernel)?;
        let [c, oh, ow] = output;
        if c != co {
            return Err(Error::dim("conv2d_transpose", &output, kernel));
        }
        let (h, w) = match target {
            Some(hw) => hw,
            None if stride == 1 => {
                let h = (oh + kh).checked_sub(1 + 2 * padding);
                let w = (ow + kw).checked_sub(1 + 2 * padding);
                match (h, w) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
                    _ => {
                        return Err(Error::Config(format!(
                            "no input size produces {oh}x{ow} with kernel {kh}x{kw}, padding {padding}"
                        )))
                    }
                }
            }
            None => {
                return Err(Error::Config(format!(
                    "stride {stride} admits several input sizes for output {oh}x{ow}; a target size is required"
                )))
            }
        };
        let geom = Self::forward([ci, h, w], kernel, stride, padding)?;
        if (geom.oh, geom.ow) != (oh, ow) {
            return Err(Error::Config(format!(
                "target {h}x{w} maps to {}x{}, not {oh}x{ow}",
                geom.oh, geom.ow
            )));
        }
        Ok(geom)
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let npos = self.positions();
        for c in 0..self.in_channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * npos..(row + 1) * npos];
                    for oi in 0..self.oh {
                        let ii = oi as isize * s + ki as isize - p;
                        for oj in 0..self.ow {
                            let jj = oj as isize * s + kj as isize - p;
                            dst[oi * self.ow + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.h
                                && (jj as usize) < self.w
                            {
                                plane[ii as usize * self.w + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], x: &mut [f32]) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let npos = self.positions();
        for c in 0..self.in_channels {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * npos..(row + 1) * npos];
                    for oi in 0..self.oh {
                        let ii = oi as isize * s + ki as isize - p;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let jj = oj as isize * s + kj as isize - p;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            plane[ii as usize * self.w + jj as usize] += src[oi * self.ow + oj];
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward_batch(&self, x: &[f32], kernel: &[f32], batch: usize) -> Vec<f32> {
        let (patch, npos) = (self.patch(), self.positions());
        let in_len = self.in_channels * self.h * self.w;
        let out_len = self.out_channels * npos;
        let mut col = vec![0.0; patch * npos];
        let mut out = vec![0.0; batch * out_len];
        for n in 0..batch {
            self.im2col(&x[n * in_len..(n + 1) * in_len], &mut col);
            gemm(
                self.out_channels,
                patch,
                npos,
                kernel,
                false,
                &col,
                false,
                &mut out[n * out_len..(n + 1) * out_len],
                false,
            );
        }
        out
    }

    pub(crate) fn adjoint_batch(&self, g: &[f32], kernel: &[f32], batch: usize) -> Vec<f32> {
        let (patch, npos) = (self.patch(), self.positions());
        let in_len = self.in_channels * self.h * self.w;
        let out_len = self.out_channels * npos;
        let mut col = vec![0.0; patch * npos];
        let mut x = vec![0.0; batch * in_len];
        for n in 0..batch {
            gemm(
                patch,
                self.out_channels,
                npos,
                kernel,
                true,
                &g[n * out_len..(n + 1) * out_len],
                false,
                &mut col,
                false,
            );
            self.col2im(&col, &mut x[n * in_len..(n + 1) * in_len]);
        }
        x
    }

    /// Gradient of `Σ ⟨conv2d(x, K), dy⟩` with respect to `K`.
    pub(crate) fn kernel_grad_batch(&self, x: &[f32], dy: &[f32], batch: usize) -> Vec<f32> {
        let (patch, npos) = (self.patch(), self.positions());
        let in_len = self.in_channels * self.h * self.w;
        let out_len = self.out_channels * npos;
        let mut col = vec![0.0; patch * npos];
        let mut dk = vec![0.0; self.out_channels * patch];
        for n in 0..batch {
            self.im2col(&x[n * in_len..(n + 1) * in_len], &mut col);
            gemm(
                self.out_channels,
                npos,
                patch,
                &dy[n * out_len..(n + 1) * out_len],
                false,
                &col,
                true,
                &mut dk,
                true,
            );
        }
        dk
    }
}

fn kernel4(kernel: &[usize]) -> Result<[usize; 4]> {
    match *kernel {
        [co, ci, kh, kw] => Ok([co, ci, kh, kw]),
        _ => Err(Error::dim("conv kernel", kernel, &[0, 0, 0, 0])),
    }
}

/// Views a `[c×h×w]` or `[n×c×h×w]` tensor as `(batch, [c, h, w], batched)`.
pub(crate) fn as_batch(t: &Tensor, op: &'static str) -> Result<(usize, [usize; 3], bool)> {
    match *t.shape() {
        [c, h, w] => Ok((1, [c, h, w], false)),
        [n, c, h, w] => Ok((n, [c, h, w], true)),
        _ => Err(Error::dim(op, t.shape(), &[0, 0, 0, 0])),
    }
}

fn batch_shape(batch: usize, chw: [usize; 3], batched: bool) -> Vec<usize> {
    if batched {
        vec![batch, chw[0], chw[1], chw[2]]
    } else {
        chw.to_vec()
    }
}

/// Cross-correlation (no kernel flip) of `x` (`[c_in×h×w]` or batched) with
/// `kernel[c_out×c_in×kh×kw]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, chw, batched) = as_batch(x, "conv2d")?;
    let geom = ConvGeometry::forward(chw, kernel.shape(), stride, padding)?;
    let out = geom.forward_batch(x.data(), kernel.data(), batch);
    Ok(Tensor::from_parts(
        batch_shape(batch, [geom.out_channels, geom.oh, geom.ow], batched),
        out,
    ))
}

/// The exact adjoint of [`conv2d`] with the same kernel, stride and padding.
/// `target_hw` selects the input size when `stride > 1` makes it ambiguous.
pub fn conv2d_transpose(
    g: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    target_hw: Option<(usize, usize)>,
) -> Result<Tensor> {
    let (batch, chw, batched) = as_batch(g, "conv2d_transpose")?;
    let geom = ConvGeometry::from_output(chw, kernel.shape(), stride, padding, target_hw)?;
    let x = geom.adjoint_batch(g.data(), kernel.data(), batch);
    Ok(Tensor::from_parts(
        batch_shape(batch, [geom.in_channels, geom.h, geom.w], batched),
        x,
    ))
}

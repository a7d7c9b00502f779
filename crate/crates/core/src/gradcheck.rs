//! Central finite-difference verification of the training gradients.
//!
//! Each parameter coordinate is nudged by `±h` and the loss difference
//! compared against the tape gradient. When a nudge flips a ReLU sign the
//! loss is not differentiable across that kink and the central difference
//! measures the jump rather than the slope, so the step is shrunk and the
//! coordinate skipped if it still straddles the kink.
//!
//! Dense networks are re-evaluated for the differences by a separate
//! double-precision implementation of the same forward pass and objective,
//! so the comparison is not swamped by f32 rounding. Networks with conv
//! layers fall back to the f32 engine with a larger step.
//! The error of a group is `max|g_tape − g_fd| / max(max|g_tape|, max|g_fd|)`.

use indexmap::IndexMap;

use crate::error::Result;
use crate::network::Lmser;
use crate::tensor::{Tape, Tensor};
use crate::training::{objective_on, Objective, Reduction};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Step for the double-precision evaluation.
    pub step: f64,
    /// Step for the f32 evaluation used on conv networks.
    pub step_f32: f32,
    pub tolerance: f64,
    pub objective: Objective,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            step_f32: 1e-2,
            tolerance: 1e-3,
            objective: Objective {
                recon_weight: 1.0,
                reduction: Reduction::Sum,
                lambda_cls: 1.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

struct Eval {
    loss: f64,
    pattern: Vec<bool>,
}

fn evaluate(net: &Lmser, x: &Tensor, labels: &[usize], opts: &GradcheckOptions) -> Result<(Eval, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let state = net.forward_on(&mut tape, &vars, xv, net.config().reflections, None)?;
    let loss = objective_on(&mut tape, xv, &state, Some(labels), &opts.objective)?;
    let grads = tape.backward(loss)?.params();
    Ok((
        Eval {
            loss: tape.value(loss).item() as f64,
            pattern: tape.relu_pattern(),
        },
        grads,
    ))
}

/// Compares tape gradients of the training objective with central
/// differences for every parameter of `net`.
pub fn gradcheck(net: &Lmser, x: &Tensor, labels: &[usize], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (base, analytic) = evaluate(net, x, labels, opts)?;
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    if let Some(reference) = reference::Net::from_lmser(net) {
        return gradcheck_f64(net, reference, x, labels, opts, &analytic);
    }
    let h = opts.step_f32;
    let mut probe = net.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let g = &analytic[name.as_str()];
        let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..g.len() {
            let orig = net.params()[gi].1.data()[i];
            let side = |delta: f32, probe: &mut Lmser| -> Result<Eval> {
                probe.params_mut()[gi].1.data_mut()[i] = orig + delta;
                Ok(evaluate(probe, x, labels, opts)?.0)
            };
            // Shrink the step when it straddles a kink; give up after three tries.
            let mut fd = None;
            let mut step = h;
            for _ in 0..3 {
                let plus = side(step, &mut probe)?;
                let minus = side(-step, &mut probe)?;
                if plus.pattern == base.pattern && minus.pattern == base.pattern {
                    // The divisor uses the perturbation actually representable in f32.
                    let span = ((orig + step) as f64) - ((orig - step) as f64);
                    fd = Some((plus.loss - minus.loss) / span);
                    break;
                }
                step /= 10.0;
            }
            probe.params_mut()[gi].1.data_mut()[i] = orig;
            let Some(fd) = fd else {
                skipped += 1;
                continue;
            };
            let ad = g.data()[i] as f64;
            max_diff = max_diff.max((ad - fd).abs());
            max_mag = max_mag.max(ad.abs()).max(fd.abs());
            checked += 1;
        }
        let max_rel_error = if max_mag > 0.0 { max_diff / max_mag } else { 0.0 };
        groups.push(GroupReport {
            name: name.clone(),
            max_rel_error,
            max_abs_grad: max_mag,
            checked,
            skipped,
        });
    }
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

#[derive(Default)]
struct Accum {
    max_diff: f64,
    max_mag: f64,
    checked: usize,
    skipped: usize,
}

impl Accum {
    fn add(&mut self, analytic: f64, fd: f64) {
        self.max_diff = self.max_diff.max((analytic - fd).abs());
        self.max_mag = self.max_mag.max(analytic.abs()).max(fd.abs());
        self.checked += 1;
    }

    fn report(self, name: &str) -> GroupReport {
        GroupReport {
            name: name.to_string(),
            max_rel_error: if self.max_mag > 0.0 { self.max_diff / self.max_mag } else { 0.0 },
            max_abs_grad: self.max_mag,
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

fn gradcheck_f64(
    net: &Lmser,
    mut reference: reference::Net,
    x: &Tensor,
    labels: &[usize],
    opts: &GradcheckOptions,
    analytic: &IndexMap<String, Tensor>,
) -> Result<GradcheckReport> {
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let batch = x.len() / net.input_len();
    let o = &opts.objective;
    let pixels = net.input_len() as f64;
    let recon_scale = o.recon_weight as f64
        * match o.reduction {
            Reduction::Mean => 1.0,
            Reduction::Sum => pixels,
        };
    let eval = |r: &reference::Net| r.objective(&xs, batch, labels, recon_scale, o.lambda_cls as f64);
    let (_, base) = eval(&reference);
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let g = &analytic[name.as_str()];
        let mut acc = Accum::default();
        for i in 0..g.len() {
            let orig = reference.param(gi)[i];
            let mut fd = None;
            let mut step = opts.step;
            for _ in 0..3 {
                reference.param(gi)[i] = orig + step;
                let (lp, pp) = eval(&reference);
                reference.param(gi)[i] = orig - step;
                let (lm, pm) = eval(&reference);
                if pp == base && pm == base {
                    fd = Some((lp - lm) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            reference.param(gi)[i] = orig;
            match fd {
                Some(fd) => acc.add(g.data()[i] as f64, fd),
                None => acc.skipped += 1,
            }
        }
        groups.push(acc.report(name));
    }
    Ok(GradcheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

/// Double-precision dense Lmser: the forward dynamics and training
/// objective restated over plain `Vec<f64>` buffers.
mod reference {
    use crate::layers::Layer;
    use crate::network::{Activation, Lmser};

    struct Dense {
        n_in: usize,
        n_out: usize,
        w: Vec<f64>,
        w_down: Option<Vec<f64>>,
        b_up: Vec<f64>,
        b_down: Vec<f64>,
    }

    pub(super) struct Net {
        layers: Vec<Dense>,
        /// (layer, slot) per parameter group in checkpoint order.
        index: Vec<(usize, usize)>,
        sharing: bool,
        reflections: usize,
        relu: bool,
        n_classes: Option<usize>,
    }

    fn widen(t: &crate::tensor::Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| v as f64).collect()
    }

    impl Net {
        pub(super) fn from_lmser(net: &Lmser) -> Option<Self> {
            let mut layers = Vec::new();
            let mut index = Vec::new();
            for (li, l) in net.layers().iter().enumerate() {
                let Layer::Dense(d) = l else { return None };
                layers.push(Dense {
                    n_in: d.n_in(),
                    n_out: d.n_out(),
                    w: widen(&d.w),
                    w_down: d.w_down.as_ref().map(widen),
                    b_up: widen(&d.b_up),
                    b_down: widen(&d.b_down),
                });
                index.push((li, 0));
                if d.w_down.is_some() {
                    index.push((li, 1));
                }
                index.push((li, 2));
                index.push((li, 3));
            }
            let cfg = net.config();
            Some(Self {
                layers,
                index,
                sharing: cfg.neuron_sharing,
                reflections: cfg.reflections,
                relu: cfg.hidden_activation == Activation::Relu,
                n_classes: cfg.supervised.then_some(cfg.n_classes),
            })
        }

        pub(super) fn param(&mut self, group: usize) -> &mut Vec<f64> {
            let (li, slot) = self.index[group];
            let l = &mut self.layers[li];
            match slot {
                0 => &mut l.w,
                1 => l.w_down.as_mut().expect("untied layer"),
                2 => &mut l.b_up,
                _ => &mut l.b_down,
            }
        }

        fn up(&self, i: usize, h: &[f64], batch: usize) -> Vec<f64> {
            let l = &self.layers[i];
            let mut y = vec![0.0; batch * l.n_out];
            for b in 0..batch {
                for o in 0..l.n_out {
                    let mut s = l.b_up[o];
                    for j in 0..l.n_in {
                        s += l.w[o * l.n_in + j] * h[b * l.n_in + j];
                    }
                    y[b * l.n_out + o] = s;
                }
            }
            y
        }

        fn down(&self, i: usize, z: &[f64], batch: usize) -> Vec<f64> {
            let l = &self.layers[i];
            let mut u = vec![0.0; batch * l.n_in];
            for b in 0..batch {
                for j in 0..l.n_in {
                    let mut s = l.b_down[j];
                    for o in 0..l.n_out {
                        let w = match &l.w_down {
                            None => l.w[o * l.n_in + j],
                            Some(wd) => wd[j * l.n_out + o],
                        };
                        s += z[b * l.n_out + o] * w;
                    }
                    u[b * l.n_in + j] = s;
                }
            }
            u
        }

        fn act(&self, v: &[f64], pattern: &mut Vec<bool>) -> Vec<f64> {
            if self.relu {
                pattern.extend(v.iter().map(|&a| a > 0.0));
                v.iter().map(|&a| a.max(0.0)).collect()
            } else {
                v.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect()
            }
        }

        /// Objective value and the sign pattern of every ReLU input.
        pub(super) fn objective(&self, x: &[f64], batch: usize, labels: &[usize], recon_scale: f64, lambda_cls: f64) -> (f64, Vec<bool>) {
            let mut pattern = Vec::new();
            let depth = self.layers.len();
            let top = depth - 1;
            let mut y: Vec<Vec<f64>> = Vec::new();
            let mut z: Vec<Vec<f64>> = Vec::new();
            let mut h = x.to_vec();
            for i in 0..depth {
                let yi = self.up(i, &h, batch);
                let zi = if i == top { yi.clone() } else { self.act(&yi, &mut pattern) };
                h = zi.clone();
                y.push(yi);
                z.push(zi);
            }
            let reflections = if self.sharing { self.reflections } else { 0 };
            let recon_pre = loop_passes(self, &mut y, &mut z, x, batch, reflections, &mut pattern);
            let mut loss = 0.0;
            if recon_scale != 0.0 {
                let se: f64 = recon_pre
                    .iter()
                    .zip(x)
                    .map(|(&p, &xi)| {
                        let r = 1.0 / (1.0 + (-p).exp());
                        (xi - r) * (xi - r)
                    })
                    .sum();
                loss += recon_scale * 0.5 * se / x.len() as f64;
            }
            if let Some(c) = self.n_classes {
                if lambda_cls != 0.0 {
                    let width = self.layers[top].n_out;
                    let mut ce = 0.0;
                    for (b, &label) in labels.iter().enumerate() {
                        let row = &z[top][b * width..b * width + c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        ce += lse - row[label];
                    }
                    loss += lambda_cls * ce / batch as f64;
                }
            }
            (loss, pattern)
        }
    }

    /// Reflections and the final top-down pass; returns the output
    /// pre-activation.
    fn loop_passes(
        net: &Net,
        y: &mut [Vec<f64>],
        z: &mut [Vec<f64>],
        x: &[f64],
        batch: usize,
        reflections: usize,
        pattern: &mut Vec<bool>,
    ) -> Vec<f64> {
        let top = y.len() - 1;
        let mut u: Vec<Option<Vec<f64>>> = vec![None; y.len()];
        for r in 0..=reflections {
            let mut h = z[top].clone();
            for i in (0..top).rev() {
                let ui = net.down(i + 1, &h, batch);
                let zi = if net.sharing {
                    let fused: Vec<f64> = y[i].iter().zip(&ui).map(|(a, b)| a + b).collect();
                    net.act(&fused, pattern)
                } else {
                    net.act(&ui, pattern)
                };
                if net.sharing {
                    z[i] = zi.clone();
                }
                u[i] = Some(ui);
                h = zi;
            }
            if r == reflections {
                return net.down(0, &h, batch);
            }
            let mut h = x.to_vec();
            for i in 0..=top {
                let yi = net.up(i, &h, batch);
                let zi = match &u[i] {
                    _ if i == top => yi.clone(),
                    Some(ui) => {
                        let fused: Vec<f64> = yi.iter().zip(ui).map(|(a, b)| a + b).collect();
                        net.act(&fused, pattern)
                    }
                    None => net.act(&yi, pattern),
                };
                h = zi.clone();
                y[i] = yi;
                z[i] = zi;
            }
        }
        unreachable!("the last reflection returns")
    }
}

//! Objectives, the Adam optimizer with exponential learning-rate decay, the
//! training loop and evaluation metrics.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::network::{Lmser, TapedState};
use crate::tensor::{self, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-iteration learning-rate multiplier.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the label term.
    pub lambda_cls: f32,
    /// Weight of the reconstruction term; zero trains a pure classifier.
    pub recon_weight: f32,
    /// How squared pixel errors are combined within one sample.
    #[serde(default)]
    pub recon_reduction: Reduction,
    /// Standard deviation of the noise added to style units.
    pub style_sigma: f32,
    pub iterations: usize,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables evaluation.
    pub eval_every: usize,
    /// Offer a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            lr0: 0.01,
            decay: 0.9999,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_cls: 1.0,
            recon_weight: 1.0,
            recon_reduction: Reduction::Sum,
            style_sigma: 0.1,
            iterations: 5000,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lambda_cls >= 0.0 && self.recon_weight >= 0.0 && self.style_sigma >= 0.0) {
            return bad("lambda_cls, recon_weight and style_sigma must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    /// Learning rate of update `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        lr_at(self.lr0, self.decay, t)
    }
}

pub fn lr_at(lr0: f64, decay: f64, t: usize) -> f64 {
    lr0 * decay.powi(t as i32)
}

/// Reduction of squared pixel errors within a sample. `Sum` is the squared
/// norm `½‖x − x̂‖²` averaged over the batch; `Mean` further divides by the
/// pixel count. The two differ only by a constant, which matters once a
/// label term is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 1,
    StyleNoise = 2,
    Attack = 3,
}

pub fn seeded_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// `½ · mean((x − x̂)²)`.
pub fn loss_unsup(x: &Tensor, reconstruction: &Tensor) -> Result<f32> {
    Ok(0.5 * tensor::mse(x, reconstruction)?)
}

/// `loss_unsup + λ · CE(logits, labels)`.
pub fn loss_joint(
    x: &Tensor,
    reconstruction: &Tensor,
    logits: &Tensor,
    labels: &[usize],
    lambda_cls: f32,
) -> Result<f32> {
    let ce = tensor::softmax_cross_entropy(logits, labels)?;
    Ok(loss_unsup(x, reconstruction)? + lambda_cls * ce)
}

/// Weights of the two terms of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub recon_weight: f32,
    pub reduction: Reduction,
    pub lambda_cls: f32,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            recon_weight: cfg.recon_weight,
            reduction: cfg.recon_reduction,
            lambda_cls: cfg.lambda_cls,
        }
    }

    /// Label term only.
    pub fn classification() -> Self {
        Self {
            recon_weight: 0.0,
            reduction: Reduction::Mean,
            lambda_cls: 1.0,
        }
    }
}

/// Builds the training objective on the tape:
/// `recon_weight · ½·E(reduced (x − x̂)²) + λ · CE`. The label term is
/// present only when the network is supervised and `labels` are given.
pub fn objective_on(
    tape: &mut Tape,
    x: Var,
    state: &TapedState,
    labels: Option<&[usize]>,
    objective: &Objective,
) -> Result<Var> {
    let Objective {
        recon_weight,
        reduction,
        lambda_cls,
    } = *objective;
    let mut total: Option<Var> = None;
    if recon_weight != 0.0 {
        let r = tape.half_mse(x, state.reconstruction)?;
        let scale = match reduction {
            Reduction::Mean => recon_weight,
            Reduction::Sum => recon_weight * (tape.value(x).len() / state.batch) as f32,
        };
        total = Some(if scale == 1.0 { r } else { tape.scale(r, scale) });
    }
    if let (Some(logits), Some(labels)) = (state.logits, labels) {
        if lambda_cls != 0.0 {
            let ce = tape.softmax_cross_entropy(logits, labels)?;
            let ce = if lambda_cls == 1.0 { ce } else { tape.scale(ce, lambda_cls) };
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => {
            // Nothing to minimise; keep a well-formed scalar loss.
            let r = tape.half_mse(x, state.reconstruction)?;
            Ok(tape.scale(r, 0.0))
        }
    }
}

/// Anything that exposes named parameter buffers in a fixed order.
pub trait ParamSet {
    fn param_slots(&mut self) -> Vec<(String, &mut Tensor)>;
}

impl ParamSet for Lmser {
    fn param_slots(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params_mut()
    }
}

impl ParamSet for IndexMap<String, Tensor> {
    fn param_slots(&mut self) -> Vec<(String, &mut Tensor)> {
        self.iter_mut().map(|(k, v)| (k.clone(), v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub moments: IndexMap<String, Moments>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps)
    }
}

/// One bias-corrected Adam update of every parameter, in slot order.
pub fn adam_step<P: ParamSet + ?Sized>(
    params: &mut P,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut slots = params.param_slots();
    for (name, p) in &slots {
        match grads.get(name) {
            None => return Err(Error::Contract(format!("no gradient for parameter {name}"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::dim("adam_step", g.shape(), p.shape()))
            }
            _ => {}
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let eps = state.eps as f32;
    // Fold both corrections into the step size: p -= lr·m̂/(√v̂ + eps).
    let step = (lr / c1) as f32;
    let inv_sqrt_c2 = (1.0 / c2.sqrt()) as f32;
    for (name, p) in slots.iter_mut() {
        let g = &grads[name.as_str()];
        let mo = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.shape().to_vec()),
            v: Tensor::zeros(p.shape().to_vec()),
        });
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = tensor::flush_subnormal(b1f * m[i] + (1.0 - b1f) * gi);
            v[i] = tensor::flush_subnormal(b2f * v[i] + (1.0 - b2f) * gi * gi);
            pd[i] -= step * m[i] / (v[i].sqrt() * inv_sqrt_c2 + eps);
        }
    }
    Ok(())
}

/// One evaluation row. `lr` is the rate used by the update that completed
/// `iteration`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub recon_error: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
}

pub const METRIC_HEADER: &str = "iteration,recon_error,accuracy,lr";

impl MetricRow {
    /// CSV line without newline; accuracy is empty for unsupervised nets.
    pub fn csv(&self) -> String {
        let acc = self.accuracy.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.iteration, self.recon_error, acc, self.lr)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

pub enum TrainEvent<'a> {
    /// Update `t` (0-based) ran with learning rate `lr` on a batch whose
    /// loss before the update was `loss`.
    Step { t: usize, lr: f64, loss: f32 },
    Metric(&'a MetricRow),
    Checkpoint { iteration: usize, net: &'a Lmser },
}

const EVAL_CHUNK: usize = 500;

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

/// Per-pixel squared error of the reconstructions, averaged over the set.
pub fn eval_reconstruction_error(net: &Lmser, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let k = net.config().reflections;
    let mut sum = 0.0f64;
    for idx in chunks(data.len()) {
        let (x, _) = data.batch(&idx)?;
        let r = net.forward(&x, k)?.reconstruction;
        sum += tensor::mse(&x, &r)? as f64 * idx.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

/// Fraction of examples whose logit argmax equals the label.
pub fn eval_accuracy(net: &Lmser, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let k = net.config().reflections;
    let mut correct = 0usize;
    for idx in chunks(data.len()) {
        let (x, labels) = data.batch(&idx)?;
        correct += net
            .classify(&x, k)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn evaluate(net: &Lmser, eval: &Dataset, iteration: usize, lr: f64) -> Result<MetricRow> {
    let recon_error = eval_reconstruction_error(net, eval)?;
    let accuracy = if net.config().supervised {
        Some(eval_accuracy(net, eval)?)
    } else {
        None
    };
    Ok(MetricRow {
        iteration,
        recon_error,
        accuracy,
        lr,
    })
}

/// Loss and parameter gradients of one batch.
pub fn batch_gradients(
    net: &Lmser,
    x: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    style_noise: Option<&Tensor>,
) -> Result<(f32, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let state = net.forward_on(&mut tape, &vars, xv, net.config().reflections, style_noise)?;
    let loss = objective_on(&mut tape, xv, &state, Some(labels), &Objective::from_config(cfg))?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.params()))
}

/// Trains `net` in place and returns the metric log. Batches come from a
/// shuffle seeded by `cfg.seed`; style noise from its own stream. Every
/// `eval_every` iterations the net is scored on `eval`.
pub fn train(
    net: &mut Lmser,
    data: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    hook: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rows = Vec::new();
    if cfg.iterations == 0 {
        return Ok(rows);
    }
    if cfg.eval_every > 0 && eval.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut batcher = Batcher::new(data.len(), cfg.batch_size, cfg.seed)?;
    let mut noise_rng = seeded_rng(cfg.seed, Stream::StyleNoise);
    let mut adam = AdamState::from_config(cfg);
    for t in 0..cfg.iterations {
        let idx = batcher.next_indices().to_vec();
        let (x, labels) = data.batch(&idx)?;
        let noise = if cfg.style_sigma > 0.0 {
            net.style_noise(idx.len(), cfg.style_sigma, &mut noise_rng)?
        } else {
            None
        };
        let (loss, grads) = batch_gradients(net, &x, &labels, cfg, noise.as_ref())?;
        let lr = cfg.lr_at(t);
        adam_step(net, &grads, &mut adam, lr)?;
        hook(TrainEvent::Step { t, lr, loss })?;
        let iteration = t + 1;
        if cfg.eval_every > 0 && iteration % cfg.eval_every == 0 {
            let row = evaluate(net, eval, iteration, lr)?;
            hook(TrainEvent::Metric(&row))?;
            rows.push(row);
        }
        if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
            hook(TrainEvent::Checkpoint { iteration, net })?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unsup_loss_constant_cases() {
        let ones = Tensor::full(vec![2, 3], 1.0);
        let zeros = Tensor::zeros(vec![2, 3]);
        assert_eq!(loss_unsup(&ones, &ones).unwrap(), 0.0);
        assert_eq!(loss_unsup(&ones, &zeros).unwrap(), 0.5);
        assert!(matches!(
            loss_unsup(&ones, &Tensor::zeros(vec![3, 2])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn joint_loss_with_uniform_logits() {
        let x = Tensor::full(vec![2, 3], 0.25);
        let logits = Tensor::zeros(vec![2, 10]);
        let j = loss_joint(&x, &x, &logits, &[3, 7], 1.0).unwrap();
        assert!((j - 10f32.ln()).abs() < 1e-6);
        assert_eq!(loss_joint(&x, &x, &logits, &[3, 7], 0.0).unwrap(), 0.0);
        assert!(matches!(
            loss_joint(&x, &x, &logits, &[3, 10], 1.0),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p: IndexMap<String, Tensor> = [("a".to_string(), Tensor::from_vec(vec![1.0, -2.0]))].into();
        let before = p.clone();
        let g: IndexMap<String, Tensor> = [("a".to_string(), Tensor::zeros(vec![2]))].into();
        let mut s = AdamState::new(0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p: IndexMap<String, Tensor> = [("a".to_string(), Tensor::from_vec(vec![1.0, -2.0, 0.5]))].into();
        let g: IndexMap<String, Tensor> = [("a".to_string(), Tensor::from_vec(vec![3.0, -0.2, 1e-2]))].into();
        let mut s = AdamState::new(0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        let d: Vec<f32> = p["a"].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        for (di, gi) in d.iter().zip([3.0f32, -0.2, 1e-2]) {
            assert!((di + 0.01 * gi.signum()).abs() < 1e-5, "{di} for {gi}");
        }
    }

    #[test]
    fn adam_missing_gradient_is_rejected_before_any_update() {
        let mut p: IndexMap<String, Tensor> = [
            ("a".to_string(), Tensor::from_vec(vec![1.0])),
            ("b".to_string(), Tensor::from_vec(vec![1.0])),
        ]
        .into();
        let before = p.clone();
        let g: IndexMap<String, Tensor> = [("a".to_string(), Tensor::from_vec(vec![1.0]))].into();
        let mut s = AdamState::new(0.9, 0.999, 1e-8);
        assert!(matches!(adam_step(&mut p, &g, &mut s, 0.1), Err(Error::Contract(_))));
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { decay: 0.0, ..Default::default() },
            TrainConfig { decay: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lambda_cls: -1.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn metric_csv_format() {
        let rows = [
            MetricRow { iteration: 5, recon_error: 0.25, accuracy: None, lr: 0.01 },
            MetricRow { iteration: 10, recon_error: 0.125, accuracy: Some(0.5), lr: 0.005 },
        ];
        assert_eq!(
            metrics_csv(&rows),
            "iteration,recon_error,accuracy,lr\n5,0.25,,0.01\n10,0.125,0.5,0.005\n"
        );
    }
}

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use lmser::attack::{fgsm, AttackLoss};
use lmser::checkpoint::{self, Checkpoint};
use lmser::data::{apply_mask, data_dir, load_mnist, masked_mse, split_paths, Dataset, MaskSpec, Split};
use lmser::gradcheck::{gradcheck, GradcheckOptions};
use lmser::training::{
    eval_reconstruction_error, seeded_rng, train, Objective, Reduction, Stream, TrainConfig, TrainEvent,
    METRIC_HEADER,
};
use lmser::{Error, LayerSpecs, Lmser, LmserConfig, Tensor, Variant};
use serde::{Deserialize, Serialize};

use crate::image::grid;
use crate::manifest::{RunManifest, MANIFEST_FILE};

pub const MODEL_FILE: &str = "model.lmsr";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flag values; reported like argument errors.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] Error),
    /// The command ran but its check did not hold.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(_) | CliError::Failed(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Dense,
    Conv,
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}`; valid values: {}", valid.join(", "))
    })
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "sum" => Ok(Reduction::Sum),
        "mean" => Ok(Reduction::Mean),
        _ => Err(format!("unknown reduction `{s}`; valid values: sum, mean")),
    }
}

fn parse_attack_loss(s: &str) -> Result<AttackLoss, String> {
    AttackLoss::parse(s).ok_or_else(|| format!("unknown attack loss `{s}`; valid values: cls, joint"))
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train a network and log metrics.
    Train(TrainArgs),
    /// Reconstruct test digits: input row over reconstruction row.
    Reconstruct(ReconstructArgs),
    /// FGSM accuracy of a supervised network at several intensities.
    Attack(AttackArgs),
    /// Decode a sweep of one top coding unit.
    Generate(GenerateArgs),
    /// Recall masked test digits.
    Associate(AssociateArgs),
    /// Finite-difference check of the training gradients on a tiny net.
    Gradcheck(GradcheckArgs),
    /// Rerun a command from its manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Reconstruct(_) => "reconstruct",
            Command::Attack(_) => "attack",
            Command::Generate(_) => "generate",
            Command::Associate(_) => "associate",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay(_) => "replay",
        }
    }

    /// Output directory of the command, if it writes one.
    pub fn out_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::Train(a) => Some(&mut a.io.out),
            Command::Reconstruct(a) => Some(&mut a.eval.io.out),
            Command::Attack(a) => Some(&mut a.eval.io.out),
            Command::Generate(a) => Some(&mut a.eval.io.out),
            Command::Associate(a) => Some(&mut a.eval.io.out),
            Command::Gradcheck(a) => Some(&mut a.out),
            Command::Replay(_) => None,
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoArgs {
    /// Directory with the MNIST IDX files (falls back to LMSER_DATA_DIR, then data/mnist).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    /// One of ae, lmser-un-n, lmser-un, lmser-sup, fcn.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Variant,
    #[arg(long, value_enum, default_value_t = Backbone::Dense)]
    pub backbone: Backbone,
    /// Layer widths above the input (dense) or channel counts (conv).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9999)]
    pub decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_cls: f32,
    /// Number of reflections k (variant default when omitted).
    #[arg(long, allow_negative_numbers = true)]
    pub reflections: Option<i64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub style_units: usize,
    #[arg(long, default_value_t = 0.1)]
    pub style_sigma: f32,
    /// How squared pixel errors combine within a sample: sum or mean.
    #[arg(long, value_parser = parse_reduction, default_value = "sum")]
    pub recon_reduction: Reduction,
    #[arg(long, default_value_t = 500)]
    pub eval_every: usize,
    /// Leading test images used for the logged metrics.
    #[arg(long, default_value_t = 1000)]
    pub eval_size: usize,
    /// Also save `model-<iteration>.lmsr` every this many iterations.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub io: IoArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Override the checkpoint's number of reflections.
    #[arg(long, allow_negative_numbers = true)]
    pub reflections: Option<i64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub io: IoArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructArgs {
    /// Number of leading test images.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Separator width between tiles, in pixels.
    #[arg(long, default_value_t = 2)]
    pub gap: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackArgs {
    /// Comma-separated intensities.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    pub epsilon: Vec<f32>,
    /// Loss whose input gradient is followed: cls or joint.
    #[arg(long, value_parser = parse_attack_loss, default_value = "cls")]
    pub attack_loss: AttackLoss,
    /// Label weight of the joint attack loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_cls: f32,
    #[arg(long, value_parser = parse_reduction, default_value = "sum")]
    pub recon_reduction: Reduction,
    /// Number of leading test images.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Index of the swept unit in the top code.
    #[arg(long)]
    pub unit: usize,
    /// Comma-separated unit values; overrides --from/--to/--steps.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Option<Vec<f32>>,
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    pub from: f32,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub to: f32,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Category held fixed by a supervised network.
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// Value placed on the fixed category unit.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub class_value: f32,
    /// Test image whose code fixes the other units of an unsupervised network.
    #[arg(long, default_value_t = 0)]
    pub reference: usize,
    #[arg(long, default_value_t = 2)]
    pub gap: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociateArgs {
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Masked rectangle as row0,col0,height,width.
    #[arg(long, value_delimiter = ',', default_value = "0,0,9,28")]
    pub mask: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub fill: f32,
    #[arg(long, default_value_t = 2)]
    pub gap: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_variant, default_value = "lmser-sup")]
    pub variant: Variant,
    /// Dense widths from input to top code.
    #[arg(long, value_delimiter = ',', default_value = "6,4,3")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    pub reflections: i64,
    #[arg(long, default_value_t = 0)]
    pub style_units: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A manifest.json written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Associate(a) => cmd_associate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn reflections(k: Option<i64>) -> CliResult<Option<usize>> {
    match k {
        Some(k) if k < 0 => Err(Error::Contract(format!("reflections must be non-negative, got {k}")).into()),
        Some(k) => Ok(Some(k as usize)),
        None => Ok(None),
    }
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    Ok(std::path::absolute(p)?)
}

/// Resolves the data directory in place and returns it.
fn resolve_data_dir(io: &mut IoArgs) -> CliResult<PathBuf> {
    let dir = absolute(&data_dir(io.data_dir.as_deref()))?;
    io.data_dir = Some(dir.clone());
    io.out = absolute(&io.out)?;
    Ok(dir)
}

fn split_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    let (i, l) = split_paths(dir, split);
    vec![i, l]
}

fn test_head(dir: &Path, n: usize) -> CliResult<Dataset> {
    let test = load_mnist(dir, Split::Test)?;
    if n == 0 || n > test.len() {
        return Err(CliError::Usage(format!("sample count must be in 1..={}, got {n}", test.len())));
    }
    Ok(test.head(n)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}

fn network_config(a: &TrainArgs, image_shape: &[usize]) -> CliResult<LmserConfig> {
    let [c, h, w] = image_shape else {
        return Err(Error::dim("network_config", image_shape, &[1, 28, 28]).into());
    };
    let supervised = a.variant.config(LayerSpecs::Dense { sizes: vec![] }).supervised;
    let layers = match a.backbone {
        Backbone::Dense => {
            let hidden = a.layers.clone().unwrap_or_else(|| {
                let top = if supervised { 10 + a.style_units } else { 10 };
                vec![300, 100, top]
            });
            let mut sizes = vec![c * h * w];
            sizes.extend(hidden);
            LayerSpecs::Dense { sizes }
        }
        Backbone::Conv => {
            let LayerSpecs::Conv { kernel, stride, padding, .. } = LayerSpecs::mnist_conv(vec![]) else {
                unreachable!()
            };
            LayerSpecs::Conv {
                input: [*c, *h, *w],
                channels: a.layers.clone().unwrap_or_else(|| vec![16, 32, 64, 64]),
                kernel,
                stride,
                padding,
            }
        }
    };
    let mut cfg = a.variant.config(layers);
    cfg.style_units = a.style_units;
    if let Some(k) = reflections(a.reflections)? {
        cfg.reflections = k;
    }
    Ok(cfg)
}

fn cmd_train(mut a: TrainArgs) -> CliResult<()> {
    reflections(a.reflections)?;
    let dir = resolve_data_dir(&mut a.io)?;
    let train_set = load_mnist(&dir, Split::Train)?;
    let eval_set = test_head(&dir, a.eval_size)?;
    let cfg = network_config(&a, train_set.image_shape())?;
    let tc = TrainConfig {
        batch_size: a.batch,
        lr0: a.lr,
        decay: a.decay,
        lambda_cls: a.lambda_cls,
        recon_weight: a.variant.recon_weight(),
        recon_reduction: a.recon_reduction,
        style_sigma: a.style_sigma,
        iterations: a.iters,
        seed: a.seed,
        eval_every: a.eval_every,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    tc.validate()?;

    let out = a.io.out.clone();
    let invocation = Command::Train(a.clone());
    let mut manifest = RunManifest::new(&invocation, &out);
    manifest.seed = a.seed;
    manifest.data_files = [split_files(&dir, Split::Train), split_files(&dir, Split::Test)].concat();
    manifest.network = Some(cfg.clone());
    manifest.training = Some(tc.clone());
    manifest.write()?;

    let mut net = Lmser::new(cfg, &mut seeded_rng(a.seed, Stream::Init))?;
    let mut log = File::create(out.join(METRICS_FILE))?;
    writeln!(log, "{METRIC_HEADER}")?;
    let rows = train(&mut net, &train_set, &eval_set, &tc, &mut |event| {
        match event {
            TrainEvent::Metric(row) => {
                writeln!(log, "{}", row.csv())?;
                log.flush()?;
            }
            TrainEvent::Checkpoint { iteration, net } => {
                checkpoint::save(&out.join(format!("model-{iteration:06}.lmsr")), net, a.seed, iteration as u64)?;
            }
            TrainEvent::Step { .. } => {}
        }
        Ok(())
    })?;
    checkpoint::save(&out.join(MODEL_FILE), &net, a.seed, a.iters as u64)?;
    match rows.last() {
        Some(r) => println!("{} after {} iterations: {}", a.variant.name(), a.iters, r.csv()),
        None => println!("{} initialised without training", a.variant.name()),
    }
    Ok(())
}

/// Loads the checkpoint named in `eval`, applies the reflection override
/// and writes the manifest. Returns the network and the data directory.
fn open_eval(eval: &mut EvalArgs, invocation: impl FnOnce(&EvalArgs) -> Command, data: &[Split]) -> CliResult<(Lmser, PathBuf)> {
    let k = reflections(eval.reflections)?;
    eval.checkpoint = absolute(&eval.checkpoint)?;
    let dir = resolve_data_dir(&mut eval.io)?;
    let Checkpoint { mut net, seed, .. } = checkpoint::load(&eval.checkpoint)?;
    if let Some(k) = k {
        net.set_reflections(k);
    }
    let invocation = invocation(eval);
    let mut manifest = RunManifest::new(&invocation, &eval.io.out);
    manifest.seed = seed;
    manifest.data_files = data.iter().flat_map(|&s| split_files(&dir, s)).collect();
    manifest.network = Some(net.config().clone());
    manifest.write()?;
    Ok((net, dir))
}

/// Tile size of the network's images: its `[1, h, w]` input, or a square
/// for a flat dense input.
fn tile_hw(net: &Lmser) -> CliResult<(usize, usize)> {
    match *net.input_shape() {
        [1, h, w] => Ok((h, w)),
        [n] if n.isqrt() * n.isqrt() == n => Ok((n.isqrt(), n.isqrt())),
        ref s => Err(Error::Capability(format!("image output needs single-channel or square inputs, got {s:?}")).into()),
    }
}

/// Reshapes a batch of network inputs or outputs into `[b, 1, h, w]` tiles.
fn tiles(t: &Tensor, (h, w): (usize, usize)) -> CliResult<Tensor> {
    Ok(t.reshape(vec![t.len() / (h * w), 1, h, w])?)
}

fn cmd_reconstruct(mut a: ReconstructArgs) -> CliResult<()> {
    let mut eval = a.eval.clone();
    let (net, dir) = open_eval(&mut eval, |e| Command::Reconstruct(ReconstructArgs { eval: e.clone(), ..a.clone() }), &[Split::Test])?;
    a.eval = eval;
    let hw = tile_hw(&net)?;
    let samples = test_head(&dir, a.n)?;
    let k = net.config().reflections;
    let recon = net.forward(&samples.images, k)?.reconstruction;
    let out = &a.eval.io.out;
    grid(&[&tiles(&samples.images, hw)?, &tiles(&recon, hw)?], a.gap)?.save(&out.join("reconstruct.pgm"))?;
    let mse = eval_reconstruction_error(&net, &samples)?;
    write_text(&out.join("reconstruct.csv"), &format!("samples,recon_error\n{},{mse}\n", a.n))?;
    println!("reconstruction error over {} samples: {mse}", a.n);
    Ok(())
}

const ATTACK_CHUNK: usize = 500;

fn cmd_attack(mut a: AttackArgs) -> CliResult<()> {
    if let Some(e) = a.epsilon.iter().find(|e| !(**e >= 0.0)) {
        return Err(CliError::Usage(format!("epsilon must be non-negative, got {e}")));
    }
    let mut eval = a.eval.clone();
    let (net, dir) = open_eval(&mut eval, |e| Command::Attack(AttackArgs { eval: e.clone(), ..a.clone() }), &[Split::Test])?;
    a.eval = eval;
    if !net.config().supervised {
        return Err(Error::Capability("attacks need a supervised network".into()).into());
    }
    let samples = test_head(&dir, a.n)?;
    let joint = Objective { recon_weight: 1.0, reduction: a.recon_reduction, lambda_cls: a.lambda_cls };
    let k = net.config().reflections;
    let mut csv = String::from("epsilon,accuracy,max_linf\n");
    for &eps in &a.epsilon {
        let (mut correct, mut linf) = (0usize, 0.0f32);
        for start in (0..samples.len()).step_by(ATTACK_CHUNK) {
            let idx: Vec<usize> = (start..(start + ATTACK_CHUNK).min(samples.len())).collect();
            let (x, labels) = samples.batch(&idx)?;
            let adv = fgsm(&net, &x, &labels, eps, a.attack_loss, &joint)?;
            linf = linf.max(adv.max_abs_diff(&x)?);
            correct += net.classify(&adv, k)?.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let acc = correct as f64 / samples.len() as f64;
        csv.push_str(&format!("{eps},{acc},{linf}\n"));
        println!("epsilon {eps}: accuracy {acc}");
    }
    write_text(&a.eval.io.out.join("attack.csv"), &csv)
}

/// `steps` evenly spaced values from `from` to `to` inclusive.
pub fn linspace(from: f32, to: f32, steps: usize) -> Vec<f32> {
    match steps {
        0 => vec![],
        1 => vec![from],
        _ => (0..steps).map(|i| from + (to - from) * i as f32 / (steps - 1) as f32).collect(),
    }
}

fn cmd_generate(mut a: GenerateArgs) -> CliResult<()> {
    let values = a.values.clone().unwrap_or_else(|| linspace(a.from, a.to, a.steps));
    if values.is_empty() {
        return Err(CliError::Usage("generate needs at least one value".into()));
    }
    a.values = Some(values.clone());
    // only unsupervised sweeps read a reference image
    let peek = checkpoint::load(&absolute(&a.eval.checkpoint)?)?;
    let supervised = peek.net.config().supervised;
    let data: &[Split] = if supervised { &[] } else { &[Split::Test] };
    let mut eval = a.eval.clone();
    let (net, dir) = open_eval(&mut eval, |e| Command::Generate(GenerateArgs { eval: e.clone(), ..a.clone() }), data)?;
    a.eval = eval;
    let hw = tile_hw(&net)?;
    let width = net.top_width();
    if a.unit >= width {
        return Err(CliError::Usage(format!("unit {} out of range: the top code has {width} units", a.unit)));
    }
    let base: Vec<f32> = if supervised {
        let classes = net.config().n_classes;
        if a.class >= classes {
            return Err(CliError::Usage(format!("class {} out of range: the network has {classes} classes", a.class)));
        }
        let mut code = vec![0.0; width];
        code[a.class] = a.class_value;
        code
    } else {
        let test = load_mnist(&dir, Split::Test)?;
        if a.reference >= test.len() {
            return Err(CliError::Usage(format!("reference {} out of range", a.reference)));
        }
        let (x, _) = test.batch(&[a.reference])?;
        net.forward(&x, net.config().reflections)?.top_code.into_data()
    };
    let codes = Tensor::from_fn(vec![values.len(), width], |i| {
        let (row, col) = (i / width, i % width);
        if col == a.unit {
            values[row]
        } else {
            base[col]
        }
    });
    let images = net.decode(&codes)?;
    let out = &a.eval.io.out;
    grid(&[&tiles(&images, hw)?], a.gap)?.save(&out.join("generate.pgm"))?;
    let per = net.input_len();
    let mut csv = String::from("step,value,mean_abs_diff_prev\n");
    for (i, v) in values.iter().enumerate() {
        let diff = if i == 0 {
            String::new()
        } else {
            let (p, q) = (&images.data()[(i - 1) * per..i * per], &images.data()[i * per..(i + 1) * per]);
            let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / per as f64;
            d.to_string()
        };
        csv.push_str(&format!("{i},{v},{diff}\n"));
    }
    write_text(&out.join("generate.csv"), &csv)?;
    println!("decoded {} codes sweeping unit {}", values.len(), a.unit);
    Ok(())
}

fn cmd_associate(mut a: AssociateArgs) -> CliResult<()> {
    let [row0, col0, height, width] = a.mask[..] else {
        return Err(CliError::Usage(format!("--mask takes row0,col0,height,width; got {:?}", a.mask)));
    };
    let mask = MaskSpec { row0, col0, height, width, fill: a.fill };
    let mut eval = a.eval.clone();
    let (net, dir) = open_eval(&mut eval, |e| Command::Associate(AssociateArgs { eval: e.clone(), ..a.clone() }), &[Split::Test])?;
    a.eval = eval;
    let hw = tile_hw(&net)?;
    mask.validate(hw.0, hw.1)?;
    let samples = test_head(&dir, a.n)?;
    let masked = apply_mask(&samples.images, &mask)?;
    let recalled = tiles(&net.forward(&masked, net.config().reflections)?.reconstruction, hw)?;
    let out = &a.eval.io.out;
    grid(&[&masked, &recalled, &samples.images], a.gap)?.save(&out.join("associate.pgm"))?;
    let mse = masked_mse(&recalled, &samples.images, &mask)?;
    write_text(&out.join("associate.csv"), &format!("samples,masked_mse\n{},{mse}\n", a.n))?;
    println!("masked-region error over {} samples: {mse}", a.n);
    Ok(())
}

fn cmd_gradcheck(mut a: GradcheckArgs) -> CliResult<()> {
    let k = reflections(Some(a.reflections))?.unwrap_or(0);
    if a.layers.len() < 2 || a.batch == 0 {
        return Err(CliError::Usage("gradcheck needs at least two layer widths and a positive batch".into()));
    }
    a.out = absolute(&a.out)?;
    let mut manifest = RunManifest::new(&Command::Gradcheck(a.clone()), &a.out);
    manifest.seed = a.seed;
    let mut cfg = a.variant.config(LayerSpecs::Dense { sizes: a.layers.clone() });
    let top = *a.layers.last().unwrap();
    cfg.n_classes = top.saturating_sub(a.style_units).clamp(1, 10);
    cfg.style_units = a.style_units;
    cfg.reflections = k;
    manifest.network = Some(cfg.clone());
    manifest.write()?;

    let mut rng = seeded_rng(a.seed, Stream::Init);
    let mut net = Lmser::new(cfg, &mut rng)?;
    // nonzero biases keep pre-activations off the ReLU kink
    for (name, p) in net.params_mut() {
        if name.contains(".b_") {
            *p = Tensor::uniform(p.shape().to_vec(), -0.3, 0.3, &mut rng);
        }
    }
    let x = Tensor::uniform(vec![a.batch, a.layers[0]], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..a.batch).map(|i| i % net.config().n_classes).collect();
    let opts = GradcheckOptions {
        tolerance: a.tolerance,
        objective: Objective { recon_weight: a.variant.recon_weight(), reduction: Reduction::Sum, lambda_cls: 1.0 },
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&net, &x, &labels, &opts)?;
    let mut csv = String::from("group,max_rel_error,max_abs_grad,checked,skipped\n");
    for g in &report.groups {
        csv.push_str(&format!("{},{},{},{},{}\n", g.name, g.max_rel_error, g.max_abs_grad, g.checked, g.skipped));
        println!("{:<10} max relative error {:.3e} ({} checked, {} skipped)", g.name, g.max_rel_error, g.checked, g.skipped);
    }
    write_text(&a.out.join("gradcheck.csv"), &csv)?;
    if report.passed() {
        println!("gradient check passed (max {:.3e} <= {:e})", report.max_rel_error(), a.tolerance);
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: max relative error {:.3e} > {:e}",
            report.max_rel_error(),
            a.tolerance
        )))
    }
}

fn cmd_replay(a: ReplayArgs) -> CliResult<()> {
    let path = if a.manifest.is_dir() { a.manifest.join(MANIFEST_FILE) } else { a.manifest.clone() };
    let mut invocation = RunManifest::read(&path)?.invocation;
    if let Command::Replay(_) = invocation {
        return Err(CliError::Usage("a manifest cannot record a replay".into()));
    }
    if let (Some(out), Some(slot)) = (a.out, invocation.out_mut()) {
        *slot = out;
    }
    run(invocation)
}

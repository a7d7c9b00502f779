//! IDX dataset loading, seeded mini-batching and rectangular masking.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    fn expected_len(self) -> usize {
        match self {
            Split::Train => 60_000,
            Split::Test => 10_000,
        }
    }
}

/// Images `[n, 1, rows, cols]` in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{}: truncated IDX header", path.display())))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{}: IDX magic {magic}, expected {expected}",
            path.display()
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let body = &bytes[header.min(bytes.len())..];
    if body.len() != len {
        return Err(Error::Format(format!(
            "{}: IDX payload holds {} bytes, header promises {len}",
            path.display(),
            body.len()
        )));
    }
    Ok(body)
}

/// Decodes an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;
    check_magic(&img, IMAGE_MAGIC, images_path)?;
    check_magic(&lab, LABEL_MAGIC, labels_path)?;
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            n, n_labels
        )));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!(
            "{}: empty IDX image set {n}×{rows}×{cols}",
            images_path.display()
        )));
    }
    let pixels = payload(&img, 16, n * rows * cols, images_path)?;
    let labels = payload(&lab, 8, n, labels_path)?;
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, rows, cols], data)?,
        labels: labels.iter().map(|&l| l as usize).collect(),
    })
}

/// Resolves the data directory: explicit path, then `LMSER_DATA_DIR`, then
/// `data/mnist` under the current directory.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os("LMSER_DATA_DIR") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from("data/mnist"),
    }
}

/// Paths of the standard `{train,t10k}-{images,labels}-idx?-ubyte` files.
pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let p = split.prefix();
    (
        dir.join(format!("{p}-images-idx3-ubyte")),
        dir.join(format!("{p}-labels-idx1-ubyte")),
    )
}

/// Loads one MNIST split and checks its size.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = split_paths(dir, split);
    let ds = load_idx(&images, &labels)?;
    if ds.len() != split.expected_len() {
        return Err(Error::Consistency(format!(
            "MNIST {split:?} has {} images, expected {}",
            ds.len(),
            split.expected_len()
        )));
    }
    Ok(ds)
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset { images, labels })
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                h[l] += 1;
            }
        }
        h
    }
}

/// Endless sequence of index batches: each epoch is a fresh Fisher–Yates
/// shuffle and ends with its short batch, if any.
#[derive(Clone, Debug)]
pub struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("cannot batch an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch_size,
        })
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos = (start + self.batch_size).min(self.order.len());
        &self.order[start..self.pos]
    }

    /// The batches of one epoch.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        loop {
            out.push(self.next_indices().to_vec());
            if self.pos == self.order.len() {
                return out;
            }
        }
    }
}

/// Rectangle `[row0, row0 + height) × [col0, col0 + width)` overwritten
/// with `fill`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
    pub fill: f32,
}

impl Default for MaskSpec {
    /// The upper band of a 28×28 digit, rows 0–8.
    fn default() -> Self {
        Self {
            row0: 0,
            col0: 0,
            height: 9,
            width: 28,
            fill: 0.0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.row0 + self.height > rows || self.col0 + self.width > cols {
            return Err(Error::Config(format!(
                "mask rows {}..{} cols {}..{} exceeds {rows}×{cols} image",
                self.row0,
                self.row0 + self.height,
                self.col0,
                self.col0 + self.width
            )));
        }
        Ok(())
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row0 + self.height).contains(&r) && (self.col0..self.col0 + self.width).contains(&c)
    }

    /// Flat per-image mask over `rows × cols` pixels.
    pub fn pixel_mask(&self, rows: usize, cols: usize) -> Vec<bool> {
        (0..rows * cols).map(|i| self.contains(i / cols, i % cols)).collect()
    }
}

/// Applies `mask` to every image of a `[.., rows, cols]` tensor.
pub fn apply_mask(images: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() < 2 {
        return Err(Error::dim("apply_mask", shape, &[28, 28]));
    }
    let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    mask.validate(rows, cols)?;
    let pm = mask.pixel_mask(rows, cols);
    let mut out = images.clone();
    for plane in out.data_mut().chunks_mut(rows * cols) {
        for (v, &m) in plane.iter_mut().zip(&pm) {
            if m {
                *v = mask.fill;
            }
        }
    }
    Ok(out)
}

/// Mean squared error over the masked pixels of every image.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &MaskSpec) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() < 2 {
        return Err(Error::dim("masked_mse", a.shape(), b.shape()));
    }
    let shape = a.shape();
    let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    mask.validate(rows, cols)?;
    let pm = mask.pixel_mask(rows, cols);
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (pa, pb) in a.data().chunks(rows * cols).zip(b.data().chunks(rows * cols)) {
        for ((&x, &y), &m) in pa.iter().zip(pb).zip(&pm) {
            if m {
                let d = x as f64 - y as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

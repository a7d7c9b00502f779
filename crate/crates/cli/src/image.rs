//! 8-bit grayscale images in binary PGM (P5) form and tiled grids.

use std::io::Write;
use std::path::Path;

use lmser::{Error, Result, Tensor};

/// Fill value of the separators between grid tiles.
pub const GAP_SHADE: u8 = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

/// `round(255·v)` with `v` clamped to `[0, 1]`.
pub fn to_byte(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, shade: u8) -> Self {
        Self { width, height, pixels: vec![shade; width * height] }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    /// Parses a binary PGM with maxval 255, allowing `#` comments in the header.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("expected PGM magic P5, found {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("expected maxval 255, found {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let raster = bytes.get(pos + 1..).unwrap_or_default();
        if raster.len() != width * height {
            return Err(Error::Format(format!(
                "PGM raster has {} bytes, expected {}",
                raster.len(),
                width * height
            )));
        }
        Ok(Self { width, height, pixels: raster.to_vec() })
    }
}

/// Lays out image rows as a grid. Each entry of `rows` is a
/// `[n, 1, h, w]` (or `[n, h, w]`) batch; all rows need the same shape.
/// The result is `(rows·h + (rows−1)·gap)` tall and `(n·w + (n−1)·gap)` wide.
pub fn grid(rows: &[&Tensor], gap: usize) -> Result<GrayImage> {
    let first = rows.first().ok_or_else(|| Error::Config("grid needs at least one row".into()))?;
    let (n, h, w) = match *first.shape() {
        [n, 1, h, w] | [n, h, w] => (n, h, w),
        _ => return Err(Error::Config(format!("grid rows must be grayscale batches, got {:?}", first.shape()))),
    };
    if n == 0 {
        return Err(Error::Config("grid rows must not be empty".into()));
    }
    let width = n * w + (n - 1) * gap;
    let height = rows.len() * h + (rows.len() - 1) * gap;
    let mut img = GrayImage::filled(width, height, GAP_SHADE);
    for (r, row) in rows.iter().enumerate() {
        if row.shape() != first.shape() {
            return Err(Error::dim("grid", row.shape(), first.shape()));
        }
        for (i, tile) in row.data().chunks(h * w).enumerate() {
            let (top, left) = (r * (h + gap), i * (w + gap));
            for y in 0..h {
                for x in 0..w {
                    img.pixels[(top + y) * width + left + x] = to_byte(tile[y * w + x]);
                }
            }
        }
    }
    Ok(img)
}

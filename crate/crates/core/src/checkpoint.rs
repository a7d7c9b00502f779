//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes   "LMSR"
//! version      u32       1
//! config_len   u32       byte length of the config JSON
//! config       bytes     LmserConfig as UTF-8 JSON
//! seed         u64
//! iteration    u64
//! n_params     u32
//! n_params times:
//!   name_len   u32
//!   name       bytes     UTF-8, e.g. "l1.w"
//!   rank       u32
//!   dims       rank × u32
//!   data       product(dims) × f32
//! ```
//!
//! Parameters appear layer by layer from the input side as `l{m}.w`,
//! `l{m}.w_down` (untied layers only), `l{m}.b_up`, `l{m}.b_down`. Dense
//! `w` is `[n_out, n_in]` and dense `w_down` is `[n_in, n_out]`; conv
//! kernels are `[c_out, c_in, kh, kw]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Lmser, LmserConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LMSR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Lmser,
    pub seed: u64,
    pub iteration: u64,
}

pub fn write_checkpoint<W: Write>(mut w: W, net: &Lmser, seed: u64, iteration: u64) -> Result<()> {
    let config = serde_json::to_vec(net.config())?;
    let params = net.params();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_len(config.len())?.to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&iteration.to_le_bytes())?;
    w.write_all(&u32_len(params.len())?.to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&u32_len(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_len(t.rank())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32_len(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what}: wanted {n} bytes, got {}",
                buf.len()
            )));
        }
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(inner: R) -> Result<Checkpoint> {
    let mut r = Reader { inner };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}, expected \"LMSR\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config: LmserConfig = serde_json::from_slice(&r.bytes(config_len, "config")?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let seed = r.u64("seed")?;
    let iteration = r.u64("iteration")?;

    // A freshly built network supplies the expected names and shapes.
    let mut net = Lmser::new(config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut slots = net.params_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, config needs {}",
            slots.len()
        )));
    }
    for (expected, slot) in slots.iter_mut() {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        if &name != expected {
            return Err(Error::Format(format!("expected parameter {expected}, found {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        if dims != slot.shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {dims:?}, expected {:?}",
                slot.shape()
            )));
        }
        let raw = r.bytes(slot.len() * 4, &name)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        **slot = Tensor::new(dims, data)?;
    }
    drop(slots);
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { net, seed, iteration })
}

pub fn save(path: &Path, net: &Lmser, seed: u64, iteration: u64) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, net, seed, iteration)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpecs, Variant};

    fn sample(variant: Variant) -> Lmser {
        let cfg = variant.config(LayerSpecs::Dense { sizes: vec![12, 5, 3] });
        let mut cfg = cfg;
        cfg.n_classes = 2;
        Lmser::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        for v in Variant::ALL {
            let net = sample(v);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &net, 77, 1234).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back.net, net);
            assert_eq!((back.seed, back.iteration), (77, 1234));
        }
    }

    #[test]
    fn header_layout_is_documented() {
        let net = sample(Variant::LmserUn);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, 9, 3).unwrap();
        assert_eq!(&buf[..4], b"LMSR");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        let cl = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let cfg: LmserConfig = serde_json::from_slice(&buf[12..12 + cl]).unwrap();
        assert_eq!(&cfg, net.config());
        let o = 12 + cl;
        assert_eq!(u64::from_le_bytes(buf[o..o + 8].try_into().unwrap()), 9);
        assert_eq!(u64::from_le_bytes(buf[o + 8..o + 16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[o + 16..o + 20].try_into().unwrap()), 6);
        let nl = u32::from_le_bytes(buf[o + 20..o + 24].try_into().unwrap()) as usize;
        assert_eq!(&buf[o + 24..o + 24 + nl], b"l1.w");
        // header + names + ranks/dims + floats
        let floats = net.param_count() * 4;
        assert!(buf.len() > floats);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let net = sample(Variant::Ae);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, 1, 1).unwrap();
        for cut in [0, 3, 10, 40, buf.len() - 1] {
            assert!(matches!(read_checkpoint(&buf[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_checkpoint(long.as_slice()), Err(Error::Format(_))));
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "MPBT" | version u32 | config (u32 len + UTF-8 key=value lines)
//!        | param count u32
//!        | per param: u32 len + name, rank u32, extents u32…, f32 payload
//!        | CRC-32 of everything after the magic
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::arraycore::{Array, Scalar};
use crate::error::{Error, Result};
use crate::model::Model;

use super::TrainConfig;

pub const MAGIC: [u8; 4] = *b"MPBT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
}

/// Writes `model` (stored as 32-bit floats) and `cfg` to `path`.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, cfg: &TrainConfig) -> Result<()> {
    fs::write(path, encode(model, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn encode<T: Scalar>(model: &Model<T>, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let mut text = cfg.to_text();
    text.push_str(&format!("num_classes={}\n", model.num_classes));

    let mut buf = MAGIC.to_vec();
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut buf, &text)?;
    let params = model.named_parameters();
    put_u32(&mut buf, params.len())?;
    for (name, a) in params {
        put_str(&mut buf, &name)?;
        put_u32(&mut buf, a.rank())?;
        for &e in a.shape() {
            put_u32(&mut buf, e)?;
        }
        for &v in a.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[MAGIC.len()..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Format("string is not valid UTF-8".into()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let body = &bytes[MAGIC.len()..bytes.len() - 4];
    let version = u32::from_le_bytes(body[..4].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tail = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let text = r.string()?;
    let (config, num_classes) = parse_config(text)?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?.to_string();
        let rank = r.u32()?;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("parameter `{name}` is too large")))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("parameter `{name}` is too large"))
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let array = Array::new(shape, data)
            .map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        params.push((name, array));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            body.len() - r.pos
        )));
    }

    let mut model = Model::<f32>::init(&config.encoder, config.head, num_classes, config.seed)
        .map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
    model.load_parameters(params)?;
    Ok(Checkpoint { config, model })
}

fn parse_config(text: &str) -> Result<(TrainConfig, usize)> {
    let mut cfg = TrainConfig::new(
        crate::heads::HeadKind::Baseline,
        crate::encoder::EncoderConfig::toy(crate::encoder::NUM_RESERVED + 1),
        0,
    );
    let mut num_classes = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line `{line}` is not key=value")))?;
        if k == "num_classes" {
            num_classes = Some(
                v.parse()
                    .map_err(|_| Error::Format(format!("bad num_classes `{v}`")))?,
            );
        } else {
            cfg.set(k, v)
                .map_err(|e| Error::Format(format!("config: {e}")))?;
        }
    }
    let num_classes = num_classes.ok_or_else(|| Error::Format("missing num_classes".into()))?;
    Ok((cfg, num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::heads::HeadKind;

    fn sample() -> (Model<f32>, TrainConfig) {
        let mut enc = EncoderConfig::toy(12);
        enc.num_layers = 2;
        enc.d_model = 8;
        enc.num_heads = 2;
        enc.d_ff = 16;
        let cfg = TrainConfig::new(HeadKind::MaxSeqMha { k: 2, num_heads: 2 }, enc, 5);
        let model = Model::init(&cfg.encoder, cfg.head, 2, 5).unwrap();
        (model, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, cfg) = sample();
        let back = decode(&encode(&model, &cfg).unwrap()).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn corruption_is_rejected() {
        let (model, cfg) = sample();
        let good = encode(&model, &cfg).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion(999))));

        let mut bad = good.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode(&bad), Err(Error::Checksum { .. })));

        for cut in [3, 9, good.len() / 2, good.len() - 1] {
            assert!(decode(&good[..cut]).is_err());
        }
    }
}
